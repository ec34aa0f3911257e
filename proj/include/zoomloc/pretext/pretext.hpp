#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "zoomloc/common/image.hpp"
#include "zoomloc/common/rng.hpp"
#include "zoomloc/pyramid/pyramid.hpp"
#include "zoomloc/synth/synth.hpp"

namespace zoomloc::pretext {

struct SamplerConfig {
  int n = 2;                 // zoom difference between parent and child levels
  int patch_size = 256;      // window side in source pixels (64 at desk scale)
  int input_size = 112;      // network input side after resize
  // Probability of drawing the child level from the highest, second-highest,
  // third-highest pyramid level. Entries for levels that cannot host a valid
  // parent are dropped and the rest renormalized.
  std::vector<double> level_probs = {0.4, 0.4, 0.2};
  double white_reject = 0.5;     // parent rejected when whiteness exceeds this
  double lum_threshold = 0.85;
  double sat_threshold = 0.05;
  int retry_budget = 100;        // window draws per sample before giving up
  std::uint64_t seed = 0;
};

struct PretextSample {
  Image parent;            // p_y, resized to input_size
  Image child;             // p_x, resized to input_size
  int label = 0;           // child's index in row-major grid order, [0, 4^n)
  std::string pyramid_id;
  pyramid::PatchRef parent_ref;  // pre-resize window at the parent level
};

struct PairSample {
  Image parent;
  Image child;
  int label = 0;  // 1 = child lies inside parent, 0 = switched
};

// One complete set of augmentation decisions, separated from the RNG so the
// transform itself is testable with pinned draws.
struct AugmentDraws {
  bool flip_h = false;
  bool flip_v = false;
  int rot_k = 0;                  // quarter turns, 0..3
  double child_contrast = 1.0;
  double parent_contrast = 1.0;
  double crop_area = 1.0;         // fraction of child area kept, [0.8, 1.0]
  double crop_u = 0.0;            // crop position within the slack, [0,1]
  double crop_v = 0.0;
};

// Draws one location sample: child level per level_probs, parent window
// uniform among in-bounds windows passing the white filter, child index
// uniform in [0, 4^n). The white filter is evaluated on the resized patch
// after 8-bit quantization, i.e. on exactly the pixels a stored dataset
// would contain.
PretextSample sample_location(const pyramid::PyramidImage& img,
                              const SamplerConfig& cfg, Rng& rng,
                              const std::string& pyramid_id = "");

// Brute-force localization: average-pool the child n times and return the
// row-major index of the parent sub-block with the smallest L2 distance.
// Both patches are pre-resize pixels with equal dimensions divisible by 2^n.
int locate_oracle(const Image& parent, const Image& child, int n);

// Two location draws; with probability 0.5 their children are switched and
// both samples are labeled 0, otherwise both are labeled 1.
std::pair<PairSample, PairSample> sample_pair(const pyramid::PyramidImage& img,
                                              const SamplerConfig& cfg, Rng& rng);

AugmentDraws draw_augment(Rng& rng);
PretextSample augment_with(const PretextSample& sample, const AugmentDraws& d);
PretextSample augment(const PretextSample& sample, Rng& rng);

// ---------------------------------------------------------------------------
// Dataset shards: header {magic "PSSL", version u32, n u32, input_size u32,
// count u64}, then fixed-size records {label u32, parent u8 RGB, child u8
// RGB}, all little-endian.

struct DatasetPaths {
  std::filesystem::path train;
  std::filesystem::path val;
  std::filesystem::path meta;  // dataset.json
};

enum class PretextTask { Location, Pair };

struct BuildConfig {
  SamplerConfig sampler;
  PretextTask task = PretextTask::Location;
  std::uint64_t count = 1000;
  double train_fraction = 0.92;
  int threads = 0;
};

// Draws `count` samples from TRAIN-split patients only and writes
// train/val shards plus a dataset.json sidecar. Deterministic in
// cfg.sampler.seed regardless of thread count.
DatasetPaths build_dataset(const synth::SynthCohort& cohort,
                           const BuildConfig& cfg,
                           const std::filesystem::path& out_dir);

class ShardReader {
 public:
  explicit ShardReader(const std::filesystem::path& path);

  std::uint64_t count() const { return count_; }
  int n() const { return n_; }
  int input_size() const { return input_size_; }

  // Decodes record i into float pixels in [0,1].
  PretextSample read(std::uint64_t i) const;
  // Raw little-endian record bytes (label + two u8 pixel blocks).
  std::vector<std::uint8_t> read_raw(std::uint64_t i) const;

 private:
  std::filesystem::path path_;
  int n_ = 0;
  int input_size_ = 0;
  std::uint64_t count_ = 0;
  std::uint64_t record_bytes_ = 0;
  std::uint64_t header_bytes_ = 0;
};

class ShardWriter {
 public:
  ShardWriter(const std::filesystem::path& path, int n, int input_size,
              std::uint64_t count);
  ~ShardWriter();

  void append(int label, const std::vector<std::uint8_t>& parent,
              const std::vector<std::uint8_t>& child);
  void finish();  // flushes and verifies the promised record count

 private:
  struct Impl;
  Impl* impl_;
};

}  // namespace zoomloc::pretext
