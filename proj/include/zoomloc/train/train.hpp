#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "zoomloc/common/image.hpp"
#include "zoomloc/model/model.hpp"
#include "zoomloc/pretext/pretext.hpp"

namespace zoomloc::train {

// Counts consecutive evaluations that fail to improve on the best value by
// at least min_delta. observe() returns true when the count reaches
// patience, then resets the count (the best value is kept).
class StallTracker {
 public:
  StallTracker(int patience, double min_delta);
  bool observe(double value);
  double best() const { return best_; }
  int stalls() const { return stalls_; }

 private:
  int patience_;
  double min_delta_;
  double best_ = 0.0;
  bool has_best_ = false;
  int stalls_ = 0;
};

struct PretextSchedule {
  double lr = 2e-5;
  int batch = 32;
  double weight_decay = 1e-5;
  int patience = 3;
  double min_delta = 1e-3;
  // Applied in order on successive stalls; a third stall stops training.
  double stall_lr = 1e-4;
  int stall_batch = 64;
  int max_epochs = 40;
};

struct DownstreamSchedule {
  // Stage 1: encoder frozen, head only.
  int head_epochs_hi = 2;
  double head_lr_hi = 1e-3;
  int head_epochs_lo = 2;
  double head_lr_lo = 1e-4;
  // Stage 2: everything trains under a cosine warmup/decay envelope.
  int finetune_epochs = 120;
  double peak_lr = 1e-4;
  double warmup_frac = 0.05;  // of the total stage-2 iterations
  int batch = 2;
  double weight_decay = 0.0;
};

// Stage-2 learning rate at iteration `iter` of `total`: a half-cosine rise
// from 0 to peak over the first `warmup` iterations, then a half-cosine
// decay back to 0 at `total`.
double finetune_lr(double peak, long total, long warmup, long iter);
long warmup_iters(const DownstreamSchedule& sched, long total);

struct LogRow {
  int epoch = 0;
  long iter = 0;  // cumulative optimizer steps
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  double lr = 0.0;
  int batch = 0;
  std::string event;
};

struct TrainLog {
  std::vector<LogRow> rows;
  void save_csv(const std::filesystem::path& path) const;
};

struct FitResult {
  TrainLog log;
  double best_val_loss = 0.0;
  double best_val_acc = 0.0;  // highest validation accuracy over all epochs
  int best_epoch = -1;        // epoch of the lowest validation loss
  int epochs_run = 0;
};

// Trains the two-branch model on shard data with the asymmetric patch
// augmentation, evaluating on the validation shard once per epoch. The
// weights with the lowest validation loss are written to ckpt_dir (with
// ckpt_extra merged into the manifest). Stalls switch the learning rate,
// then the batch size, then stop the run.
FitResult train_pretext(model::Siamese<float>& m,
                        const pretext::ShardReader& train_data,
                        const pretext::ShardReader& val_data,
                        const PretextSchedule& sched,
                        const std::filesystem::path& ckpt_dir,
                        std::uint64_t seed, int threads,
                        const nlohmann::json& ckpt_extra = nlohmann::json::object(),
                        std::ostream* progress = nullptr);

struct LabeledPatch {
  Image image;
  int label = 0;
  std::string patient_id;
  std::string slide_id;
};

// Two-stage classifier training: a frozen-encoder warmup for the head, then
// full fine-tuning under the cosine envelope with a fresh optimizer. The
// final weights are left in the graph.
FitResult train_downstream(model::Classifier<float>& m,
                           const std::vector<LabeledPatch>& train_set,
                           const std::vector<LabeledPatch>& val_set,
                           const DownstreamSchedule& sched, std::uint64_t seed,
                           int threads, std::ostream* progress = nullptr);

}  // namespace zoomloc::train
