#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "zoomloc/downstream/downstream.hpp"
#include "zoomloc/model/model.hpp"
#include "zoomloc/train/train.hpp"

namespace zoomloc::eval {

// Row-major K x K counts: rows index the true class, columns the predicted.
struct ConfusionMatrix {
  int classes = 0;
  std::vector<long> counts;
  int run_id = 0;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int k, int run = 0)
      : classes(k), counts(static_cast<std::size_t>(k) * k, 0), run_id(run) {}
  long& at(int t, int p) { return counts[static_cast<std::size_t>(t) * classes + p]; }
  long at(int t, int p) const { return counts[static_cast<std::size_t>(t) * classes + p]; }
};

ConfusionMatrix confusion(const std::vector<downstream::PatientPrediction>& preds,
                          int classes, int run_id = 0);

// Mean of per-class recalls. Throws EmptyClass when a true class has no
// test patients.
double mean_class_accuracy(const ConfusionMatrix& cm);

struct RunSummary {
  int classes = 0;
  int runs = 0;
  std::vector<double> cell_mean;  // K x K, row-major
  std::vector<double> cell_std;   // sample standard deviation
  double mean_acc = 0.0;          // mean of per-run mean class accuracies
  double acc_std = 0.0;
  long misclassified = 0;  // off-diagonal sum averaged over runs, rounded up
};

RunSummary aggregate_runs(const std::vector<ConfusionMatrix>& runs);

enum class Variant { LocationSsl, PairSsl, ExternalWeights, RandomInit };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct AblationConfig {
  std::vector<Variant> variants{Variant::LocationSsl, Variant::RandomInit};
  std::vector<double> fractions{0.33, 0.66, 1.0};
  int runs = 5;
  std::uint64_t seed = 0;
  int threads = 0;
  model::EncoderSpec encoder = model::desk_encoder();
  int input_size = 112;
  train::DownstreamSchedule schedule;
  downstream::TileConfig tiling;
  // Encoder checkpoints consumed by the matching variants. random-init
  // needs none.
  std::filesystem::path location_ckpt;
  std::filesystem::path pair_ckpt;
  std::filesystem::path external_ckpt;
};

struct AblationRow {
  Variant variant = Variant::RandomInit;
  double fraction = 1.0;
  int run = 0;
  double mean_acc = 0.0;
};

struct AblationResult {
  std::vector<AblationRow> rows;        // (variant, fraction, run) order
  std::vector<ConfusionMatrix> matrices;  // parallel to rows
};

// Fine-tunes and evaluates every (variant, fraction, run) cell. Cells run
// in parallel; each owns its model and seed stream, so the table depends
// only on (seed, config).
AblationResult run_ablation(const synth::SynthCohort& cohort,
                            const AblationConfig& cfg);

// One aggregate per (variant, fraction): mean and std of the run accuracies.
struct AblationPoint {
  Variant variant;
  double fraction;
  int runs;
  double mean_acc;
  double std_acc;
  long misclassified;
};

std::vector<AblationPoint> summarize_ablation(const AblationResult& result);

void write_ablation_csv(const std::filesystem::path& path,
                        const std::vector<AblationRow>& rows);
void write_summary_json(const std::filesystem::path& path,
                        const std::vector<AblationPoint>& points);
// Line plot of accuracy against labeled fraction, one series per variant,
// with one-standard-deviation error bars.
void write_curve_svg(const std::filesystem::path& path,
                     const std::vector<AblationPoint>& points);

}  // namespace zoomloc::eval
