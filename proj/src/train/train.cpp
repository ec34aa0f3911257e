#include "zoomloc/train/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>

#include "zoomloc/common/error.hpp"
#include "zoomloc/common/parallel.hpp"
#include "zoomloc/common/rng.hpp"
#include "zoomloc/nncore/adam.hpp"

namespace zoomloc::train {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct EvalStats {
  double loss = 0.0;
  double acc = 0.0;
};

// Copies shard records [start, start+count) of `order` into the model
// inputs, optionally applying the training augmentation. Augmentation draws
// are keyed by (seed, epoch, record index), so they are independent of the
// shuffle order and the thread count. Returns the batch labels.
std::vector<int> fill_pretext_batch(model::Siamese<float>& m,
                                    const pretext::ShardReader& data,
                                    const std::vector<std::uint64_t>& order,
                                    std::size_t start, int count,
                                    std::uint64_t seed, int epoch,
                                    bool augmented, int threads) {
  const int s = data.input_size();
  const std::size_t plane = static_cast<std::size_t>(s) * s * 3;
  std::vector<float> child(static_cast<std::size_t>(count) * plane);
  std::vector<float> parent(static_cast<std::size_t>(count) * plane);
  std::vector<float> target(static_cast<std::size_t>(count) * m.classes, 0.0f);
  std::vector<int> labels(count, 0);

  parallel_for(count, threads, [&](std::size_t k) {
    const std::uint64_t idx = order[start + k];
    pretext::PretextSample sample = data.read(idx);
    if (augmented) {
      Rng rng(mix_seed(seed, 0xa7e27, static_cast<std::uint64_t>(epoch), idx));
      sample = pretext::augment(sample, rng);
    }
    const int label_span = m.task == model::Task::Location ? m.classes : 2;
    if (sample.label < 0 || sample.label >= label_span)
      throw DataFormatError("record label " + std::to_string(sample.label) +
                            " outside [0, " + std::to_string(label_span) + ")");
    std::copy(sample.child.data.begin(), sample.child.data.end(),
              child.begin() + k * plane);
    std::copy(sample.parent.data.begin(), sample.parent.data.end(),
              parent.begin() + k * plane);
    if (m.task == model::Task::Location)
      target[k * m.classes + sample.label] = 1.0f;
    else
      target[k] = static_cast<float>(sample.label);
    labels[k] = sample.label;
  });

  m.g.set_input(m.child, child);
  m.g.set_input(m.parent, parent);
  m.g.set_input(m.target, target);
  return labels;
}

int count_correct(const nncore::Graph<float>& g,
                  nncore::Graph<float>::Id logits_id, model::Task task,
                  int classes, const std::vector<int>& labels) {
  const auto& logits = g.value(logits_id).data;
  int correct = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (task == model::Task::Location) {
      int arg = 0;
      for (int c = 1; c < classes; ++c)
        if (logits[r * classes + c] > logits[r * classes + arg]) arg = c;
      correct += arg == labels[r];
    } else {
      correct += (logits[r] > 0.0f) == (labels[r] == 1);
    }
  }
  return correct;
}

EvalStats evaluate_pretext(model::Siamese<float>& m,
                           const pretext::ShardReader& data, int batch,
                           std::uint64_t seed, int threads) {
  std::vector<std::uint64_t> order(data.count());
  std::iota(order.begin(), order.end(), 0ull);
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < order.size();) {
    const int b = static_cast<int>(
        std::min<std::size_t>(batch, order.size() - start));
    if (m.g.batch() != b) m.g.set_batch(b);
    const auto labels =
        fill_pretext_batch(m, data, order, start, b, seed, 0, false, threads);
    loss_sum += static_cast<double>(m.g.forward(m.loss)) * b;
    correct += count_correct(m.g, m.logits, m.task, m.classes, labels);
    start += b;
  }
  return {loss_sum / static_cast<double>(order.size()),
          static_cast<double>(correct) / static_cast<double>(order.size())};
}

std::vector<int> fill_patch_batch(model::Classifier<float>& m,
                                  const std::vector<LabeledPatch>& set,
                                  const std::vector<std::size_t>& order,
                                  std::size_t start, int count, int threads) {
  const auto& shape = m.g.value(m.image).shape;
  const int s = shape[1];
  const std::size_t plane = static_cast<std::size_t>(s) * s * 3;
  std::vector<float> image(static_cast<std::size_t>(count) * plane);
  std::vector<float> target(static_cast<std::size_t>(count) * m.classes, 0.0f);
  std::vector<int> labels(count, 0);
  parallel_for(count, threads, [&](std::size_t k) {
    const LabeledPatch& p = set[order[start + k]];
    std::copy(p.image.data.begin(), p.image.data.end(), image.begin() + k * plane);
    target[k * m.classes + p.label] = 1.0f;
    labels[k] = p.label;
  });
  m.g.set_input(m.image, image);
  m.g.set_input(m.target, target);
  return labels;
}

EvalStats evaluate_patches(model::Classifier<float>& m,
                           const std::vector<LabeledPatch>& set, int batch,
                           int threads) {
  std::vector<std::size_t> order(set.size());
  std::iota(order.begin(), order.end(), 0u);
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < order.size();) {
    const int b = static_cast<int>(
        std::min<std::size_t>(batch, order.size() - start));
    if (m.g.batch() != b) m.g.set_batch(b);
    const auto labels = fill_patch_batch(m, set, order, start, b, threads);
    loss_sum += static_cast<double>(m.g.forward(m.loss)) * b;
    std::vector<int> row_labels(labels);
    const auto& logits = m.g.value(m.logits).data;
    for (std::size_t r = 0; r < row_labels.size(); ++r) {
      int arg = 0;
      for (int c = 1; c < m.classes; ++c)
        if (logits[r * m.classes + c] > logits[r * m.classes + arg]) arg = c;
      correct += arg == row_labels[r];
    }
    start += b;
  }
  return {loss_sum / static_cast<double>(set.size()),
          static_cast<double>(correct) / static_cast<double>(set.size())};
}

void check_patch_set(const std::vector<LabeledPatch>& set, int input_size,
                     int classes, const char* which) {
  for (const LabeledPatch& p : set) {
    if (p.image.height != input_size || p.image.width != input_size)
      throw ShapeMismatch(std::string(which) + " patch is " +
                          std::to_string(p.image.height) + "x" +
                          std::to_string(p.image.width) + ", model expects " +
                          std::to_string(input_size));
    if (p.label < 0 || p.label >= classes)
      throw ConfigError(std::string(which) + " label " +
                        std::to_string(p.label) + " outside [0, " +
                        std::to_string(classes) + ")");
  }
}

void report(std::ostream* progress, const LogRow& row) {
  if (!progress) return;
  *progress << "epoch " << row.epoch << " iter " << row.iter << " train "
            << row.train_loss << " val " << row.val_loss << " acc "
            << row.val_acc << " lr " << row.lr << " batch " << row.batch;
  if (!row.event.empty()) *progress << " [" << row.event << "]";
  *progress << "\n";
}

void append_event(std::string& event, const char* tag) {
  if (!event.empty()) event += "+";
  event += tag;
}

}  // namespace

StallTracker::StallTracker(int patience, double min_delta)
    : patience_(patience), min_delta_(min_delta) {
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (min_delta < 0) throw ConfigError("min_delta must be >= 0");
}

bool StallTracker::observe(double value) {
  if (!has_best_ || value <= best_ - min_delta_) {
    best_ = value;
    has_best_ = true;
    stalls_ = 0;
    return false;
  }
  if (++stalls_ < patience_) return false;
  stalls_ = 0;
  return true;
}

double finetune_lr(double peak, long total, long warmup, long iter) {
  if (total < 1) throw OutOfRange("finetune_lr: total must be >= 1");
  if (warmup < 1 || warmup > total)
    throw OutOfRange("finetune_lr: warmup must lie in [1, total]");
  if (iter < 0 || iter > total)
    throw OutOfRange("finetune_lr: iteration " + std::to_string(iter) +
                     " outside [0, " + std::to_string(total) + "]");
  const double pi = std::acos(-1.0);
  if (iter < warmup)
    return peak * (1.0 - std::cos(pi * static_cast<double>(iter) /
                                  static_cast<double>(warmup))) / 2.0;
  if (warmup == total) return iter < total ? peak : 0.0;
  return peak * (1.0 + std::cos(pi * static_cast<double>(iter - warmup) /
                                static_cast<double>(total - warmup))) / 2.0;
}

long warmup_iters(const DownstreamSchedule& sched, long total) {
  const long w = static_cast<long>(
      std::ceil(sched.warmup_frac * static_cast<double>(total)));
  return std::clamp(w, 1l, total);
}

void TrainLog::save_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "epoch,iter,train_loss,val_loss,val_acc,lr,batch,event\n";
  out.precision(17);
  for (const LogRow& r : rows)
    out << r.epoch << ',' << r.iter << ',' << r.train_loss << ',' << r.val_loss
        << ',' << r.val_acc << ',' << r.lr << ',' << r.batch << ',' << r.event
        << "\n";
  if (!out) throw IoError("failed writing " + path.string());
}

FitResult train_pretext(model::Siamese<float>& m,
                        const pretext::ShardReader& train_data,
                        const pretext::ShardReader& val_data,
                        const PretextSchedule& sched,
                        const std::filesystem::path& ckpt_dir,
                        std::uint64_t seed, int threads,
                        const nlohmann::json& ckpt_extra,
                        std::ostream* progress) {
  if (sched.batch < 1 || sched.stall_batch < 1)
    throw ConfigError("batch sizes must be >= 1");
  if (sched.max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (static_cast<std::uint64_t>(sched.batch) > train_data.count())
    throw ConfigError("batch exceeds the train shard");
  const int s = m.g.value(m.child).shape[1];
  if (train_data.input_size() != s || val_data.input_size() != s)
    throw ShapeMismatch("shard input size " +
                        std::to_string(train_data.input_size()) +
                        " does not match model input " + std::to_string(s));
  if (m.task == model::Task::Location) {
    int grid = 1;
    for (int i = 0; i < train_data.n(); ++i) grid *= 4;
    if (grid != m.classes)
      throw ShapeMismatch("shard grid 4^" + std::to_string(train_data.n()) +
                          " does not match " + std::to_string(m.classes) +
                          " model outputs");
  }

  nncore::Adam<float>::Hyper hy;
  hy.lr = sched.lr;
  hy.weight_decay = sched.weight_decay;
  nncore::Adam<float> opt(hy);

  int cur_batch = sched.batch;
  m.g.set_batch(cur_batch);
  StallTracker stall(sched.patience, sched.min_delta);
  int actions_fired = 0;

  FitResult res;
  res.best_val_loss = kInf;
  long iters = 0;
  bool stop = false;

  for (int epoch = 1; epoch <= sched.max_epochs && !stop; ++epoch) {
    std::vector<std::uint64_t> order(train_data.count());
    std::iota(order.begin(), order.end(), 0ull);
    Rng shuffle_rng(mix_seed(seed, 0x54ff1e, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size() - 1; i > 0; --i)
      std::swap(order[i], order[shuffle_rng.uniform_int(i + 1)]);

    const std::size_t usable = order.size() - order.size() % cur_batch;
    double loss_sum = 0.0;
    long batches = 0;
    for (std::size_t start = 0; start < usable; start += cur_batch) {
      fill_pretext_batch(m, train_data, order, start, cur_batch, seed, epoch,
                         true, threads);
      const double loss = m.g.forward(m.loss);
      if (!std::isfinite(loss))
        throw Diverged("train loss is not finite at epoch " +
                       std::to_string(epoch));
      m.g.backward(m.loss);
      opt.step(m.g);
      loss_sum += loss;
      ++iters;
      ++batches;
    }

    const EvalStats ev = evaluate_pretext(m, val_data, cur_batch, seed, threads);
    m.g.set_batch(cur_batch);

    LogRow row{epoch, iters, loss_sum / static_cast<double>(batches), ev.loss,
               ev.acc, opt.lr(), cur_batch, ""};
    res.best_val_acc = std::max(res.best_val_acc, ev.acc);
    if (ev.loss < res.best_val_loss) {
      res.best_val_loss = ev.loss;
      res.best_epoch = epoch;
      nlohmann::json manifest = ckpt_extra;
      manifest["task"] = m.task == model::Task::Location ? "location" : "pair";
      manifest["epoch"] = epoch;
      manifest["val_loss"] = ev.loss;
      manifest["val_accuracy"] = ev.acc;
      save_checkpoint(ckpt_dir, model::snapshot_params(m.g), manifest);
      append_event(row.event, "best");
    }
    if (stall.observe(ev.loss)) {
      ++actions_fired;
      if (actions_fired == 1) {
        opt.set_lr(sched.stall_lr);
        append_event(row.event, "switch_lr");
      } else if (actions_fired == 2) {
        if (static_cast<std::uint64_t>(sched.stall_batch) <= train_data.count()) {
          cur_batch = sched.stall_batch;
          m.g.set_batch(cur_batch);
          append_event(row.event, "raise_batch");
        } else {
          append_event(row.event, "hold_batch");
        }
      } else {
        append_event(row.event, "stop");
        stop = true;
      }
    }
    res.log.rows.push_back(row);
    res.epochs_run = epoch;
    report(progress, row);
  }
  return res;
}

FitResult train_downstream(model::Classifier<float>& m,
                           const std::vector<LabeledPatch>& train_set,
                           const std::vector<LabeledPatch>& val_set,
                           const DownstreamSchedule& sched, std::uint64_t seed,
                           int threads, std::ostream* progress) {
  if (sched.batch < 1) throw ConfigError("batch must be >= 1");
  if (train_set.empty()) throw ConfigError("downstream train set is empty");
  if (val_set.empty()) throw ConfigError("downstream validation set is empty");
  if (train_set.size() < static_cast<std::size_t>(sched.batch))
    throw ConfigError("batch exceeds the train set");
  if (sched.head_epochs_hi < 0 || sched.head_epochs_lo < 0 ||
      sched.finetune_epochs < 0)
    throw ConfigError("epoch counts must be >= 0");
  const int s = m.g.value(m.image).shape[1];
  check_patch_set(train_set, s, m.classes, "train");
  check_patch_set(val_set, s, m.classes, "validation");

  m.g.set_batch(sched.batch);
  const long per_epoch = static_cast<long>(train_set.size()) / sched.batch;

  FitResult res;
  res.best_val_loss = kInf;
  long iters = 0;
  int epoch = 0;

  const auto run_epoch = [&](double lr_fixed, bool cosine,
                             nncore::Adam<float>& opt, long total, long warmup,
                             long& stage_iter, const char* tag) {
    ++epoch;
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0u);
    Rng shuffle_rng(mix_seed(seed, 0xd0f1e, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size() - 1; i > 0; --i)
      std::swap(order[i], order[shuffle_rng.uniform_int(i + 1)]);

    double loss_sum = 0.0;
    for (long b = 0; b < per_epoch; ++b) {
      opt.set_lr(cosine ? finetune_lr(sched.peak_lr, total, warmup, stage_iter)
                        : lr_fixed);
      fill_patch_batch(m, train_set, order,
                       static_cast<std::size_t>(b) * sched.batch, sched.batch,
                       threads);
      const double loss = m.g.forward(m.loss);
      if (!std::isfinite(loss))
        throw Diverged("train loss is not finite at epoch " +
                       std::to_string(epoch));
      m.g.backward(m.loss);
      opt.step(m.g);
      loss_sum += loss;
      ++iters;
      ++stage_iter;
    }

    const EvalStats ev = evaluate_patches(m, val_set, sched.batch, threads);
    m.g.set_batch(sched.batch);
    LogRow row{epoch, iters, loss_sum / static_cast<double>(per_epoch), ev.loss,
               ev.acc, opt.lr(), sched.batch, tag};
    res.best_val_acc = std::max(res.best_val_acc, ev.acc);
    if (ev.loss < res.best_val_loss) {
      res.best_val_loss = ev.loss;
      res.best_epoch = epoch;
    }
    res.log.rows.push_back(row);
    res.epochs_run = epoch;
    report(progress, row);
  };

  // Stage 1: train the head on frozen features.
  model::set_encoder_trainable(m.g, false);
  nncore::Adam<float>::Hyper h1;
  h1.lr = sched.head_lr_hi;
  h1.weight_decay = sched.weight_decay;
  nncore::Adam<float> head_opt(h1);
  long unused = 0;
  for (int e = 0; e < sched.head_epochs_hi; ++e)
    run_epoch(sched.head_lr_hi, false, head_opt, 0, 0, unused,
              e == 0 ? "stage1" : "");
  for (int e = 0; e < sched.head_epochs_lo; ++e)
    run_epoch(sched.head_lr_lo, false, head_opt, 0, 0, unused, "");

  // Stage 2: everything trains under the cosine envelope with fresh
  // optimizer state.
  model::set_encoder_trainable(m.g, true);
  nncore::Adam<float>::Hyper h2;
  h2.weight_decay = sched.weight_decay;
  nncore::Adam<float> fine_opt(h2);
  const long total = static_cast<long>(sched.finetune_epochs) * per_epoch;
  const long warmup = total > 0 ? warmup_iters(sched, total) : 0;
  long stage_iter = 0;
  for (int e = 0; e < sched.finetune_epochs; ++e)
    run_epoch(0.0, true, fine_opt, total, warmup, stage_iter,
              e == 0 ? "stage2" : "");
  return res;
}

}  // namespace zoomloc::train
