#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "zoomloc/pyramid/pyramid.hpp"

namespace zoomloc::synth {

// Texture controls. Classes share the positional gradients (the localization
// cue) and differ in palette and noise statistics (the classification cue).
struct TextureParams {
  double noise_amplitude = 0.10;   // band-limited value noise
  int noise_cells = 12;            // lattice cells across level 0
  double hue_ramp = 0.25;          // left-to-right R/B shift
  double lum_ramp = 0.30;          // top-to-bottom brightness ramp
  double class_palette_step = 0.06;// per-class channel mean separation
  double class_freq_step = 0.35;   // per-class noise frequency multiplier step
  int white_blobs = 2;             // background ellipses per slide
  double white_blob_frac = 0.10;   // blob radius as fraction of min dimension
};

struct SynthSpec {
  std::uint64_t seed = 0;
  int levels = 4;        // stored levels (N + 1)
  int base_size = 128;   // level 0 is base_size x base_size
  int class_id = 0;
  int num_classes = 4;
  TextureParams texture;
  std::string patient_id;
  std::size_t memory_budget_mb = 2048;
};

struct PatientEntry {
  std::string patient_id;
  int class_id = 0;
  std::string split;  // "train" or "test"
  std::vector<std::string> pyramid_paths;  // relative to the cohort root
};

struct SynthCohort {
  std::filesystem::path root;
  std::vector<PatientEntry> patients;
};

struct CohortConfig {
  std::uint64_t seed = 0;
  int classes = 4;
  int train_patients_per_class = 3;
  int test_patients_per_class = 2;
  int slides_per_patient = 1;
  int levels = 4;
  int base_size = 128;
  TextureParams texture;
  std::size_t memory_budget_mb = 2048;
  int threads = 0;
};

// Deterministic in spec.seed. The top level is quantized to the 8-bit grid;
// every lower level is its exact 2x2 average pool, which the localization
// oracle relies on.
pyramid::PyramidImage generate_pyramid(const SynthSpec& spec);

// Writes per-patient pyramids plus cohort.json under `root`.
SynthCohort generate_cohort(const CohortConfig& cfg, const std::filesystem::path& root);

SynthCohort read_cohort(const std::filesystem::path& root);
void write_cohort_manifest(const SynthCohort& cohort);

}  // namespace zoomloc::synth
