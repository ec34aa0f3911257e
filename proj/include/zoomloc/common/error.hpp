#pragma once

#include <stdexcept>
#include <string>

namespace zoomloc {

// Base for all domain errors thrown by the library. The CLI maps these onto
// exit codes: ConfigError -> 1, data/file errors -> 2, numerical failures -> 3.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define ZOOMLOC_DEFINE_ERROR(NAME)                                \
  class NAME : public Error {                                     \
  public:                                                         \
    explicit NAME(const std::string& msg) : Error(#NAME ": " + msg) {} \
  }

ZOOMLOC_DEFINE_ERROR(LevelOutOfRange);
ZOOMLOC_DEFINE_ERROR(OutOfBounds);
ZOOMLOC_DEFINE_ERROR(FormatError);
ZOOMLOC_DEFINE_ERROR(IoError);
ZOOMLOC_DEFINE_ERROR(BudgetExceeded);
ZOOMLOC_DEFINE_ERROR(ConfigError);
ZOOMLOC_DEFINE_ERROR(ExhaustedRetries);
ZOOMLOC_DEFINE_ERROR(AmbiguousMatch);
ZOOMLOC_DEFINE_ERROR(ShapeMismatch);
ZOOMLOC_DEFINE_ERROR(GraphNotEvaluated);
ZOOMLOC_DEFINE_ERROR(MissingTensor);
ZOOMLOC_DEFINE_ERROR(SpecError);
ZOOMLOC_DEFINE_ERROR(DataFormatError);
ZOOMLOC_DEFINE_ERROR(Diverged);
ZOOMLOC_DEFINE_ERROR(EmptyRegion);
ZOOMLOC_DEFINE_ERROR(NoPatches);
ZOOMLOC_DEFINE_ERROR(FractionOutOfRange);
ZOOMLOC_DEFINE_ERROR(EmptyClass);
ZOOMLOC_DEFINE_ERROR(OutOfRange);

#undef ZOOMLOC_DEFINE_ERROR

}  // namespace zoomloc
