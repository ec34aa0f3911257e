#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "zoomloc/common/error.hpp"
#include "zoomloc/model/model.hpp"
#include "zoomloc/pretext/pretext.hpp"
#include "zoomloc/synth/synth.hpp"
#include "zoomloc/train/train.hpp"

using namespace zoomloc;
using namespace zoomloc::train;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Cohort, shards, and model small enough that an epoch takes milliseconds.
struct TinySetup {
  fs::path dir;
  pretext::DatasetPaths paths;

  explicit TinySetup(const std::string& name,
                     pretext::PretextTask task = pretext::PretextTask::Location) {
    dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    synth::CohortConfig cc;
    cc.seed = 5;
    cc.train_patients_per_class = 1;
    cc.test_patients_per_class = 1;
    cc.classes = 2;
    cc.levels = 4;
    cc.base_size = 64;
    synth::generate_cohort(cc, dir / "cohort");
    const auto cohort = synth::read_cohort(dir / "cohort");

    pretext::BuildConfig bc;
    bc.sampler.n = 2;
    bc.sampler.patch_size = 16;
    bc.sampler.input_size = 8;
    bc.sampler.seed = 7;
    bc.task = task;
    bc.count = 120;
    bc.threads = 1;
    paths = pretext::build_dataset(cohort, bc, dir / "data");
  }
  ~TinySetup() { fs::remove_all(dir); }
};

model::SiameseConfig tiny_model_config(model::Task task = model::Task::Location) {
  model::SiameseConfig cfg;
  cfg.encoder = {{{4, 1}, {6, 1}}, 6};
  cfg.task = task;
  cfg.grid_n = 2;
  cfg.input_size = 8;
  cfg.batch = 8;
  cfg.fusion_hidden = 10;
  cfg.seed = 1;
  return cfg;
}

std::vector<LabeledPatch> class_coded_patches(int count, int classes, int size,
                                              std::uint64_t seed) {
  std::vector<LabeledPatch> out;
  Rng rng(seed);
  for (int i = 0; i < count; ++i) {
    LabeledPatch p;
    p.label = i % classes;
    p.patient_id = "P" + std::to_string(i % 5);
    p.image = Image(size, size, 3);
    for (float& v : p.image.data)
      v = static_cast<float>(
          std::clamp(0.2 + 0.15 * p.label + rng.uniform(-0.05, 0.05), 0.0, 1.0));
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace

TEST_CASE("stall tracking fires after patience consecutive flat evals") {
  StallTracker t(3, 0.02);
  CHECK_FALSE(t.observe(1.0));   // establishes the best
  CHECK_FALSE(t.observe(0.99));  // within delta: stall 1
  CHECK_FALSE(t.observe(0.99));  // stall 2
  CHECK(t.observe(0.99));        // stall 3 fires
  CHECK(t.stalls() == 0);        // and resets

  // A real improvement resets the count and moves the best.
  StallTracker u(2, 0.02);
  CHECK_FALSE(u.observe(1.0));
  CHECK_FALSE(u.observe(0.995));
  CHECK_FALSE(u.observe(0.9));  // improvement
  CHECK(u.best() == 0.9);
  CHECK_FALSE(u.observe(0.895));
  CHECK(u.observe(0.894));

  CHECK_THROWS_AS(StallTracker(0, 0.1), ConfigError);
  CHECK_THROWS_AS(StallTracker(1, -0.1), ConfigError);
}

TEST_CASE("cosine envelope hits its landmarks exactly") {
  const double peak = 1e-4;
  const long total = 1000, w = 50;
  CHECK(finetune_lr(peak, total, w, 0) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(finetune_lr(peak, total, w, w / 2) ==
        doctest::Approx(peak / 2).epsilon(1e-12));
  CHECK(finetune_lr(peak, total, w, w) == doctest::Approx(peak).epsilon(1e-12));
  CHECK(finetune_lr(peak, total, w, (w + total) / 2) ==
        doctest::Approx(peak / 2).epsilon(1e-12));
  CHECK(finetune_lr(peak, total, w, total) ==
        doctest::Approx(0.0).epsilon(1e-12));

  // Monotone rise then fall.
  for (long i = 1; i <= w; ++i)
    CHECK(finetune_lr(peak, total, w, i) > finetune_lr(peak, total, w, i - 1));
  for (long i = w + 1; i <= total; ++i)
    CHECK(finetune_lr(peak, total, w, i) < finetune_lr(peak, total, w, i - 1));

  CHECK_THROWS_AS(finetune_lr(peak, total, w, -1), OutOfRange);
  CHECK_THROWS_AS(finetune_lr(peak, total, w, total + 1), OutOfRange);
  CHECK_THROWS_AS(finetune_lr(peak, total, 0, 5), OutOfRange);
  CHECK_THROWS_AS(finetune_lr(peak, 0, 1, 0), OutOfRange);

  DownstreamSchedule sched;
  CHECK(warmup_iters(sched, 1000) == 50);
  CHECK(warmup_iters(sched, 30) == 2);  // ceil(1.5)
  CHECK(warmup_iters(sched, 1) == 1);
}

TEST_CASE("pretext training runs, logs, and checkpoints its best epoch") {
  TinySetup setup("zoomloc_train_pretext");
  pretext::ShardReader train_data(setup.paths.train);
  pretext::ShardReader val_data(setup.paths.val);

  auto m = model::build_siamese<float>(tiny_model_config());
  PretextSchedule sched;
  sched.lr = 1e-3;
  sched.batch = 8;
  sched.max_epochs = 3;
  const fs::path ckpt = setup.dir / "ckpt";
  const FitResult res =
      train_pretext(m, train_data, val_data, sched, ckpt, 11, 1);

  CHECK(res.epochs_run == 3);
  REQUIRE(res.log.rows.size() == 3);
  for (const LogRow& r : res.log.rows) {
    CHECK(r.batch == 8);
    CHECK(r.iter > 0);
    CHECK(std::isfinite(r.train_loss));
    CHECK(r.val_acc >= 0.0);
    CHECK(r.val_acc <= 1.0);
  }
  // 110 train records in batches of 8 -> 13 steps per epoch.
  CHECK(res.log.rows[0].iter == 13);
  CHECK(res.log.rows[2].iter == 39);
  CHECK(res.log.rows[0].event == "best");  // first eval is always the best

  const auto back = nncore::load_checkpoint(ckpt);
  CHECK(back.manifest.at("task") == "location");
  CHECK(back.manifest.at("epoch").get<int>() == res.best_epoch);
  CHECK(back.manifest.at("val_loss").get<double>() ==
        doctest::Approx(res.best_val_loss).epsilon(1e-12));
  double min_loss = 1e30;
  for (const LogRow& r : res.log.rows) min_loss = std::min(min_loss, r.val_loss);
  CHECK(res.best_val_loss == doctest::Approx(min_loss).epsilon(1e-12));
}

TEST_CASE("pretext training is reproducible row for row") {
  TinySetup setup("zoomloc_train_repro");
  pretext::ShardReader train_data(setup.paths.train);
  pretext::ShardReader val_data(setup.paths.val);
  PretextSchedule sched;
  sched.lr = 1e-3;
  sched.batch = 8;
  sched.max_epochs = 2;

  const auto run = [&](int threads, const fs::path& ckpt) {
    auto m = model::build_siamese<float>(tiny_model_config());
    return train_pretext(m, train_data, val_data, sched, ckpt, 11, threads);
  };
  const FitResult a = run(1, setup.dir / "ck_a");
  const FitResult b = run(3, setup.dir / "ck_b");

  const fs::path csv_a = setup.dir / "a.csv", csv_b = setup.dir / "b.csv";
  a.log.save_csv(csv_a);
  b.log.save_csv(csv_b);
  CHECK(slurp(csv_a) == slurp(csv_b));
  CHECK(slurp(setup.dir / "ck_a" / "weights.bin") ==
        slurp(setup.dir / "ck_b" / "weights.bin"));
}

TEST_CASE("stalls switch the rate, then the batch, then stop the run") {
  TinySetup setup("zoomloc_train_stall");
  pretext::ShardReader train_data(setup.paths.train);
  pretext::ShardReader val_data(setup.paths.val);

  auto m = model::build_siamese<float>(tiny_model_config());
  PretextSchedule sched;
  sched.lr = 0.0;  // frozen updates keep the validation loss exactly flat
  sched.weight_decay = 0.0;
  sched.stall_lr = 0.0;
  sched.batch = 8;
  sched.stall_batch = 16;
  sched.patience = 1;
  sched.max_epochs = 10;
  const FitResult res =
      train_pretext(m, train_data, val_data, sched, setup.dir / "ck", 13, 1);

  CHECK(res.epochs_run == 4);
  REQUIRE(res.log.rows.size() == 4);
  CHECK(res.log.rows[0].event == "best");
  CHECK(res.log.rows[1].event == "switch_lr");
  CHECK(res.log.rows[2].event == "raise_batch");
  CHECK(res.log.rows[2].batch == 8);   // raised after this epoch's row
  CHECK(res.log.rows[3].batch == 16);
  // The larger evaluation batch regroups the loss summation, so the final
  // epoch may edge out the old best by a few ulps and tag itself "best".
  CHECK(res.log.rows[3].event.substr(res.log.rows[3].event.size() - 4) ==
        "stop");
}

TEST_CASE("pair-task shards train the single-logit model") {
  TinySetup setup("zoomloc_train_pair", pretext::PretextTask::Pair);
  pretext::ShardReader train_data(setup.paths.train);
  pretext::ShardReader val_data(setup.paths.val);

  auto m = model::build_siamese<float>(tiny_model_config(model::Task::Pair));
  PretextSchedule sched;
  sched.lr = 1e-3;
  sched.batch = 8;
  sched.max_epochs = 2;
  const FitResult res =
      train_pretext(m, train_data, val_data, sched, setup.dir / "ck", 17, 1);
  CHECK(res.log.rows.size() == 2);
  CHECK(res.best_val_acc >= 0.0);
  CHECK(res.best_val_acc <= 1.0);
  CHECK(nncore::load_checkpoint(setup.dir / "ck").manifest.at("task") == "pair");
}

TEST_CASE("pretext trainer rejects mismatched data") {
  TinySetup setup("zoomloc_train_reject");
  pretext::ShardReader train_data(setup.paths.train);
  pretext::ShardReader val_data(setup.paths.val);

  auto m = model::build_siamese<float>(tiny_model_config());
  PretextSchedule sched;
  sched.batch = 512;  // more than the 110-record shard
  CHECK_THROWS_AS(
      train_pretext(m, train_data, val_data, sched, setup.dir / "ck", 1, 1),
      ConfigError);

  auto wide = tiny_model_config();
  wide.input_size = 16;
  auto m16 = model::build_siamese<float>(wide);
  PretextSchedule ok;
  ok.batch = 8;
  CHECK_THROWS_AS(
      train_pretext(m16, train_data, val_data, ok, setup.dir / "ck", 1, 1),
      ShapeMismatch);

  auto narrow = tiny_model_config();
  narrow.grid_n = 1;  // 4 outputs vs the shard's 16-cell labels
  auto m4 = model::build_siamese<float>(narrow);
  CHECK_THROWS_AS(
      train_pretext(m4, train_data, val_data, ok, setup.dir / "ck", 1, 1),
      ShapeMismatch);
}

TEST_CASE("downstream stage one trains the head on frozen features") {
  model::ClassifierConfig cfg;
  cfg.encoder = {{{4, 1}, {6, 1}}, 6};
  cfg.classes = 4;
  cfg.input_size = 8;
  cfg.batch = 4;
  cfg.seed = 2;
  auto m = model::build_classifier<float>(cfg);

  std::vector<std::vector<float>> enc_before;
  for (const auto id : m.g.params())
    if (m.g.name(id).rfind("enc.", 0) == 0)
      enc_before.push_back(m.g.value(id).data);

  const auto train_set = class_coded_patches(32, 4, 8, 3);
  const auto val_set = class_coded_patches(16, 4, 8, 4);
  DownstreamSchedule sched;
  sched.head_epochs_hi = 1;
  sched.head_epochs_lo = 1;
  sched.finetune_epochs = 0;
  sched.batch = 4;
  const FitResult res = train_downstream(m, train_set, val_set, sched, 5, 1);

  CHECK(res.log.rows.size() == 2);
  CHECK(res.log.rows[0].event == "stage1");
  CHECK(res.log.rows[0].lr == 1e-3);
  CHECK(res.log.rows[1].lr == 1e-4);
  std::size_t k = 0;
  for (const auto id : m.g.params())
    if (m.g.name(id).rfind("enc.", 0) == 0)
      CHECK(m.g.value(id).data == enc_before[k++]);
}

TEST_CASE("downstream stage two fine-tunes the encoder under the envelope") {
  model::ClassifierConfig cfg;
  cfg.encoder = {{{4, 1}, {6, 1}}, 6};
  cfg.classes = 4;
  cfg.input_size = 8;
  cfg.batch = 4;
  cfg.seed = 2;
  auto m = model::build_classifier<float>(cfg);

  std::vector<std::vector<float>> enc_before;
  for (const auto id : m.g.params())
    if (m.g.name(id).rfind("enc.", 0) == 0)
      enc_before.push_back(m.g.value(id).data);

  const auto train_set = class_coded_patches(32, 4, 8, 3);
  const auto val_set = class_coded_patches(16, 4, 8, 4);
  DownstreamSchedule sched;
  sched.head_epochs_hi = 0;
  sched.head_epochs_lo = 0;
  sched.finetune_epochs = 10;
  sched.peak_lr = 2e-2;
  sched.batch = 4;
  const FitResult res = train_downstream(m, train_set, val_set, sched, 5, 1);

  CHECK(res.log.rows.size() == 10);
  CHECK(res.log.rows[0].event == "stage2");
  bool enc_moved = false;
  std::size_t k = 0;
  for (const auto id : m.g.params())
    if (m.g.name(id).rfind("enc.", 0) == 0)
      enc_moved = enc_moved || m.g.value(id).data != enc_before[k++];
  CHECK(enc_moved);

  // The class-coded patches are separable: training should beat chance.
  CHECK(res.best_val_acc > 0.25);
}

TEST_CASE("downstream training is reproducible") {
  const auto run = [] {
    model::ClassifierConfig cfg;
    cfg.encoder = {{{4, 1}, {6, 1}}, 6};
    cfg.classes = 4;
    cfg.input_size = 8;
    cfg.batch = 4;
    cfg.seed = 2;
    auto m = model::build_classifier<float>(cfg);
    DownstreamSchedule sched;
    sched.head_epochs_hi = 1;
    sched.head_epochs_lo = 1;
    sched.finetune_epochs = 2;
    sched.batch = 4;
    return train_downstream(m, class_coded_patches(32, 4, 8, 3),
                            class_coded_patches(16, 4, 8, 4), sched, 5, 2);
  };
  const FitResult a = run();
  const FitResult b = run();
  REQUIRE(a.log.rows.size() == b.log.rows.size());
  for (std::size_t i = 0; i < a.log.rows.size(); ++i) {
    CHECK(a.log.rows[i].train_loss == b.log.rows[i].train_loss);
    CHECK(a.log.rows[i].val_loss == b.log.rows[i].val_loss);
    CHECK(a.log.rows[i].val_acc == b.log.rows[i].val_acc);
  }
}

TEST_CASE("downstream trainer validates its inputs") {
  model::ClassifierConfig cfg;
  cfg.encoder = {{{4, 1}, {6, 1}}, 6};
  cfg.classes = 4;
  cfg.input_size = 8;
  cfg.batch = 4;
  auto m = model::build_classifier<float>(cfg);
  DownstreamSchedule sched;
  sched.batch = 4;

  const auto good = class_coded_patches(16, 4, 8, 3);
  CHECK_THROWS_AS(train_downstream(m, {}, good, sched, 1, 1), ConfigError);
  CHECK_THROWS_AS(train_downstream(m, good, {}, sched, 1, 1), ConfigError);

  auto small = good;
  small.resize(2);  // smaller than one batch
  CHECK_THROWS_AS(train_downstream(m, small, good, sched, 1, 1), ConfigError);

  auto bad_label = good;
  bad_label[0].label = 7;
  CHECK_THROWS_AS(train_downstream(m, bad_label, good, sched, 1, 1), ConfigError);

  auto bad_size = good;
  bad_size[0].image = Image(4, 4, 3);
  CHECK_THROWS_AS(train_downstream(m, bad_size, good, sched, 1, 1), ShapeMismatch);
}
