#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace zoomloc::nncore {

struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
};

struct Checkpoint {
  std::vector<NamedTensor> tensors;
  nlohmann::json manifest;  // contents of weights.json

  const NamedTensor& find(const std::string& name) const;
};

// Writes dir/weights.bin and dir/weights.json. `extra` entries are merged
// into the json manifest next to the tensor listing (e.g. validation
// metrics of the run that produced the weights).
void save_checkpoint(const std::filesystem::path& dir,
                     const std::vector<NamedTensor>& tensors,
                     const nlohmann::json& extra = nlohmann::json::object());

Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace zoomloc::nncore
