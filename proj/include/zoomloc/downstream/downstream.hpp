#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "zoomloc/common/image.hpp"
#include "zoomloc/model/model.hpp"
#include "zoomloc/pyramid/pyramid.hpp"
#include "zoomloc/synth/synth.hpp"
#include "zoomloc/train/train.hpp"

namespace zoomloc::downstream {

struct TileConfig {
  int tile = 1024;             // source pixels per tile side, highest level
  int input_size = 112;        // network input side after resize
  double white_reject = 0.5;   // tiles whiter than this are dropped
  double lum_threshold = 0.85;
  double sat_threshold = 0.05;
  // Labeled regions are rectangles covering this fraction of each slide
  // side, placed by the seed. Stand-in for hand-drawn annotations.
  double region_frac = 0.5;
  double val_fraction = 0.15;
  bool patient_disjoint = true;  // validation split never shares a patient
  std::uint64_t seed = 0;
  int threads = 0;
};

struct RoiPatchSet {
  std::vector<train::LabeledPatch> train;
  std::vector<train::LabeledPatch> val;
  int classes = 0;
};

// Non-overlapping tiling of one rectangle at the pyramid's highest level.
// Tiles failing the white filter are dropped; survivors are resized to
// input_size and 8-bit quantized (the same pixel path the pretext shards
// use). Throws EmptyRegion when nothing survives.
std::vector<Image> tile_region(const pyramid::PyramidImage& img, int r0, int c0,
                               int height, int width, const TileConfig& cfg);

// Whole-slide tiling for inference.
std::vector<Image> tile_slide(const pyramid::PyramidImage& img,
                              const TileConfig& cfg);

// Harvests labeled patches from every train-split patient: one seeded
// region rectangle per slide, tiled and filtered, then balanced across
// classes by downsampling and split 85/15.
RoiPatchSet tile_rois(const synth::SynthCohort& cohort, const TileConfig& cfg);

// Stratified per-class subsample keeping round(fraction * count) patches of
// each class (at least one); fraction 1 returns the set unchanged.
std::vector<train::LabeledPatch> label_fraction_subset(
    const std::vector<train::LabeledPatch>& set, double fraction,
    std::uint64_t seed);

struct VoteResult {
  std::vector<long> votes;
  int label = -1;
  long margin = 0;  // winner's count minus the runner-up's
};

// Plurality vote over per-patch class probabilities. Ties are broken by the
// larger probability mass summed over the patient's patches, then by the
// lower class index. Throws NoPatches on an empty set.
VoteResult vote(const std::vector<std::vector<double>>& probs);

// Softmax rows for a batch of patches, evaluated through the classifier.
std::vector<std::vector<double>> classify_patches(
    model::Classifier<float>& m, const std::vector<Image>& patches,
    int threads);

struct PatientPrediction {
  std::string patient_id;
  int true_label = -1;
  int predicted = -1;
  std::vector<long> votes;
  long margin = 0;
};

// Tiles every slide of the patient whole (no region restriction),
// classifies each tile, and votes.
PatientPrediction predict_patient(model::Classifier<float>& m,
                                  const std::filesystem::path& cohort_root,
                                  const synth::PatientEntry& patient,
                                  const TileConfig& cfg, int threads);

// All test-split patients of the cohort, in cohort order.
std::vector<PatientPrediction> predict_cohort(model::Classifier<float>& m,
                                              const synth::SynthCohort& cohort,
                                              const TileConfig& cfg,
                                              int threads);

// Pre-tiled test patients, so repeated evaluations skip the pyramid reads.
struct TestPatient {
  std::string patient_id;
  int true_label = -1;
  std::vector<Image> patches;
};
std::vector<TestPatient> tile_test_cohort(const synth::SynthCohort& cohort,
                                          const TileConfig& cfg, int threads);
PatientPrediction predict_tiled(model::Classifier<float>& m,
                                const TestPatient& patient, int threads);

// patient_id,true,pred,votes_per_class,margin with votes joined as v0|v1|...
void write_predictions_csv(const std::filesystem::path& path,
                           const std::vector<PatientPrediction>& preds);

}  // namespace zoomloc::downstream
