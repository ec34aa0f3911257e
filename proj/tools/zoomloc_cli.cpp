#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "zoomloc/common/error.hpp"
#include "zoomloc/downstream/downstream.hpp"
#include "zoomloc/eval/eval.hpp"
#include "zoomloc/model/model.hpp"
#include "zoomloc/nncore/gradcheck.hpp"
#include "zoomloc/pretext/pretext.hpp"
#include "zoomloc/pyramid/pyramid.hpp"
#include "zoomloc/synth/synth.hpp"
#include "zoomloc/train/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace zoomloc;

namespace {

json default_config() {
  return json{
      {"synth",
       {{"seed", 0},
        {"classes", 4},
        {"train_patients_per_class", 3},
        {"test_patients_per_class", 2},
        {"slides_per_patient", 1},
        {"levels", 4},
        {"base_size", 128},
        {"memory_budget_mb", 2048},
        {"texture",
         {{"noise_amplitude", 0.10},
          {"noise_cells", 12},
          {"hue_ramp", 0.25},
          {"lum_ramp", 0.30},
          {"class_palette_step", 0.06},
          {"class_freq_step", 0.35},
          {"white_blobs", 2},
          {"white_blob_frac", 0.10}}}}},
      {"pretext",
       {{"seed", 0},
        {"n", 2},
        {"patch_size", 256},
        {"input_size", 112},
        {"level_probs", {0.4, 0.4, 0.2}},
        {"white_reject", 0.5},
        {"lum_threshold", 0.85},
        {"sat_threshold", 0.05},
        {"retry_budget", 100},
        {"task", "location"},
        {"count", 100000},
        {"train_fraction", 0.92}}},
      {"model",
       {{"seed", 0},
        {"encoder", "vgg16"},
        {"fusion_hidden", 256}}},
      {"train",
       {{"seed", 0},
        {"lr", 2e-5},
        {"batch", 32},
        {"weight_decay", 1e-5},
        {"patience", 3},
        {"min_delta", 1e-3},
        {"stall_lr", 1e-4},
        {"stall_batch", 64},
        {"max_epochs", 40}}},
      {"downstream",
       {{"seed", 0},
        {"tile", 1024},
        {"input_size", 112},
        {"white_reject", 0.5},
        {"lum_threshold", 0.85},
        {"sat_threshold", 0.05},
        {"region_frac", 0.5},
        {"val_fraction", 0.15},
        {"patient_disjoint", true},
        {"head_epochs_hi", 2},
        {"head_lr_hi", 1e-3},
        {"head_epochs_lo", 2},
        {"head_lr_lo", 1e-4},
        {"finetune_epochs", 120},
        {"peak_lr", 1e-4},
        {"warmup_frac", 0.05},
        {"batch", 2},
        {"weight_decay", 0.0}}},
      {"eval",
       {{"seed", 0},
        {"variants", {"location-ssl", "random-init"}},
        {"fractions", {0.33, 0.66, 1.0}},
        {"runs", 5},
        {"location_ckpt", ""},
        {"pair_ckpt", ""},
        {"external_ckpt", ""}}}};
}

bool kinds_compatible(const json& base, const json& user) {
  if (base.is_number_float() && user.is_number()) return true;
  if (base.is_number_integer() && user.is_number_integer()) return true;
  if (base.is_number_unsigned() && user.is_number_integer()) return true;
  return base.type() == user.type();
}

// Overlays user keys onto the defaults; a key with no default is a typo.
void merge_config(json& base, const json& user, const std::string& prefix) {
  if (!user.is_object())
    throw ConfigError((prefix.empty() ? std::string("config root") : prefix) +
                      " must be a JSON object");
  for (const auto& [key, value] : user.items()) {
    const std::string dotted = prefix.empty() ? key : prefix + "." + key;
    const auto it = base.find(key);
    if (it == base.end())
      throw ConfigError("unknown config key \"" + dotted + "\"");
    // The encoder accepts a preset name or an inline spec object.
    if (dotted == "model.encoder") {
      if (!value.is_string() && !value.is_object())
        throw ConfigError("model.encoder must be a preset name or an object");
      *it = value;
      continue;
    }
    if (it->is_object()) {
      merge_config(*it, value, dotted);
      continue;
    }
    if (!kinds_compatible(*it, value))
      throw ConfigError("config key \"" + dotted + "\" has the wrong type");
    *it = value;
  }
}

json load_config(const std::string& path) {
  json cfg = default_config();
  if (path.empty()) return cfg;
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  json user;
  try {
    user = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  merge_config(cfg, user, "");
  return cfg;
}

// One --help line per config key the subcommand reads.
std::string keys_footer(const std::vector<std::string>& groups) {
  const json d = default_config();
  std::string s = "Config keys read:";
  for (const std::string& g : groups)
    for (const auto& [key, value] : d.at(g).items()) {
      if (value.is_object()) {
        for (const auto& [sub, ignored] : value.items())
          s += "\n  " + g + "." + key + "." + sub;
      } else {
        s += "\n  " + g + "." + key;
      }
    }
  return s;
}

model::EncoderSpec encoder_from_config(const json& cfg) {
  const json& enc = cfg.at("model").at("encoder");
  if (enc.is_string()) {
    const std::string name = enc.get<std::string>();
    if (name == "vgg16") return model::vgg16_encoder();
    if (name == "desk") return model::desk_encoder();
    throw ConfigError("unknown encoder preset \"" + name + "\"");
  }
  return enc.get<model::EncoderSpec>();
}

synth::CohortConfig synth_from_config(const json& cfg, int threads) {
  const json& s = cfg.at("synth");
  synth::CohortConfig cc;
  cc.seed = s.at("seed").get<std::uint64_t>();
  cc.classes = s.at("classes").get<int>();
  cc.train_patients_per_class = s.at("train_patients_per_class").get<int>();
  cc.test_patients_per_class = s.at("test_patients_per_class").get<int>();
  cc.slides_per_patient = s.at("slides_per_patient").get<int>();
  cc.levels = s.at("levels").get<int>();
  cc.base_size = s.at("base_size").get<int>();
  cc.memory_budget_mb = s.at("memory_budget_mb").get<std::size_t>();
  const json& t = s.at("texture");
  cc.texture.noise_amplitude = t.at("noise_amplitude").get<double>();
  cc.texture.noise_cells = t.at("noise_cells").get<int>();
  cc.texture.hue_ramp = t.at("hue_ramp").get<double>();
  cc.texture.lum_ramp = t.at("lum_ramp").get<double>();
  cc.texture.class_palette_step = t.at("class_palette_step").get<double>();
  cc.texture.class_freq_step = t.at("class_freq_step").get<double>();
  cc.texture.white_blobs = t.at("white_blobs").get<int>();
  cc.texture.white_blob_frac = t.at("white_blob_frac").get<double>();
  cc.threads = threads;
  return cc;
}

pretext::BuildConfig pretext_from_config(const json& cfg, int threads) {
  const json& p = cfg.at("pretext");
  pretext::BuildConfig bc;
  bc.sampler.seed = p.at("seed").get<std::uint64_t>();
  bc.sampler.n = p.at("n").get<int>();
  bc.sampler.patch_size = p.at("patch_size").get<int>();
  bc.sampler.input_size = p.at("input_size").get<int>();
  bc.sampler.level_probs = p.at("level_probs").get<std::vector<double>>();
  bc.sampler.white_reject = p.at("white_reject").get<double>();
  bc.sampler.lum_threshold = p.at("lum_threshold").get<double>();
  bc.sampler.sat_threshold = p.at("sat_threshold").get<double>();
  bc.sampler.retry_budget = p.at("retry_budget").get<int>();
  const std::string task = p.at("task").get<std::string>();
  if (task == "location") bc.task = pretext::PretextTask::Location;
  else if (task == "pair") bc.task = pretext::PretextTask::Pair;
  else throw ConfigError("pretext.task must be \"location\" or \"pair\"");
  bc.count = p.at("count").get<std::uint64_t>();
  bc.train_fraction = p.at("train_fraction").get<double>();
  bc.threads = threads;
  return bc;
}

train::PretextSchedule pretext_schedule_from_config(const json& cfg) {
  const json& t = cfg.at("train");
  train::PretextSchedule sched;
  sched.lr = t.at("lr").get<double>();
  sched.batch = t.at("batch").get<int>();
  sched.weight_decay = t.at("weight_decay").get<double>();
  sched.patience = t.at("patience").get<int>();
  sched.min_delta = t.at("min_delta").get<double>();
  sched.stall_lr = t.at("stall_lr").get<double>();
  sched.stall_batch = t.at("stall_batch").get<int>();
  sched.max_epochs = t.at("max_epochs").get<int>();
  return sched;
}

downstream::TileConfig tiling_from_config(const json& cfg, int threads) {
  const json& d = cfg.at("downstream");
  downstream::TileConfig tc;
  tc.tile = d.at("tile").get<int>();
  tc.input_size = d.at("input_size").get<int>();
  tc.white_reject = d.at("white_reject").get<double>();
  tc.lum_threshold = d.at("lum_threshold").get<double>();
  tc.sat_threshold = d.at("sat_threshold").get<double>();
  tc.region_frac = d.at("region_frac").get<double>();
  tc.val_fraction = d.at("val_fraction").get<double>();
  tc.patient_disjoint = d.at("patient_disjoint").get<bool>();
  tc.seed = d.at("seed").get<std::uint64_t>();
  tc.threads = threads;
  return tc;
}

train::DownstreamSchedule downstream_schedule_from_config(const json& cfg) {
  const json& d = cfg.at("downstream");
  train::DownstreamSchedule sched;
  sched.head_epochs_hi = d.at("head_epochs_hi").get<int>();
  sched.head_lr_hi = d.at("head_lr_hi").get<double>();
  sched.head_epochs_lo = d.at("head_epochs_lo").get<int>();
  sched.head_lr_lo = d.at("head_lr_lo").get<double>();
  sched.finetune_epochs = d.at("finetune_epochs").get<int>();
  sched.peak_lr = d.at("peak_lr").get<double>();
  sched.warmup_frac = d.at("warmup_frac").get<double>();
  sched.batch = d.at("batch").get<int>();
  sched.weight_decay = d.at("weight_decay").get<double>();
  return sched;
}

eval::AblationConfig ablation_from_config(const json& cfg, int threads) {
  const json& e = cfg.at("eval");
  eval::AblationConfig ac;
  ac.variants.clear();
  for (const auto& name : e.at("variants"))
    ac.variants.push_back(eval::variant_from_name(name.get<std::string>()));
  ac.fractions = e.at("fractions").get<std::vector<double>>();
  ac.runs = e.at("runs").get<int>();
  ac.seed = e.at("seed").get<std::uint64_t>();
  ac.threads = threads;
  ac.encoder = encoder_from_config(cfg);
  ac.input_size = cfg.at("downstream").at("input_size").get<int>();
  ac.schedule = downstream_schedule_from_config(cfg);
  ac.tiling = tiling_from_config(cfg, 1);  // cells own the parallelism
  ac.location_ckpt = e.at("location_ckpt").get<std::string>();
  ac.pair_ckpt = e.at("pair_ckpt").get<std::string>();
  ac.external_ckpt = e.at("external_ckpt").get<std::string>();
  return ac;
}

// Options shared by every work subcommand.
struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  int threads = 0;
};

void attach_common(CLI::App* sub, Common& c, bool needs_out = true) {
  sub->add_option("--config", c.config, "JSON config file overlaying the defaults")
      ->check(CLI::ExistingFile);
  auto* out = sub->add_option("--out", c.out, "output directory (created if missing)");
  if (needs_out) out->required();
  sub->add_option("--seed", c.seed,
                  "override the active config group's seed");
  sub->add_option("--threads", c.threads,
                  "worker threads (0 = all available cores)");
}

fs::path ensure_out(const std::string& out) {
  const fs::path dir(out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  return dir;
}

void apply_seed_override(json& cfg, const std::string& group,
                         const std::optional<std::uint64_t>& seed) {
  if (seed) cfg.at(group).at("seed") = *seed;
}

int run_gen_synth(const Common& c) {
  json cfg = load_config(c.config);
  apply_seed_override(cfg, "synth", c.seed);
  const auto cc = synth_from_config(cfg, c.threads);
  const fs::path out = ensure_out(c.out);
  const auto cohort = synth::generate_cohort(cc, out);
  std::cerr << "wrote " << cohort.patients.size() << " patients ("
            << cc.classes << " classes) under " << out << "\n";
  return 0;
}

int run_gen_pretext(const Common& c, const std::string& cohort_dir) {
  json cfg = load_config(c.config);
  apply_seed_override(cfg, "pretext", c.seed);
  const auto bc = pretext_from_config(cfg, c.threads);
  const auto cohort = synth::read_cohort(cohort_dir);
  const fs::path out = ensure_out(c.out);
  const auto paths = pretext::build_dataset(cohort, bc, out);
  const pretext::ShardReader train(paths.train), val(paths.val);
  std::cerr << "wrote " << train.count() << " train + " << val.count()
            << " val samples under " << out << "\n";
  return 0;
}

int run_train_pretext(const Common& c, const std::string& data_dir) {
  json cfg = load_config(c.config);
  apply_seed_override(cfg, "train", c.seed);

  const fs::path data(data_dir);
  const pretext::ShardReader train_data(data / "train.bin");
  const pretext::ShardReader val_data(data / "val.bin");
  std::ifstream meta_in(data / "dataset.json");
  if (!meta_in) throw IoError("cannot open " + (data / "dataset.json").string());
  const json meta = json::parse(meta_in);
  const std::string task = meta.at("task").get<std::string>();

  model::SiameseConfig mc;
  mc.encoder = encoder_from_config(cfg);
  mc.task = task == "pair" ? model::Task::Pair : model::Task::Location;
  mc.grid_n = train_data.n();
  mc.input_size = train_data.input_size();
  mc.batch = cfg.at("train").at("batch").get<int>();
  mc.fusion_hidden = cfg.at("model").at("fusion_hidden").get<int>();
  mc.seed = cfg.at("model").at("seed").get<std::uint64_t>();
  auto m = model::build_siamese<float>(mc);

  const auto sched = pretext_schedule_from_config(cfg);
  const fs::path out = ensure_out(c.out);
  json extra;
  extra["encoder"] = mc.encoder;
  extra["input_size"] = mc.input_size;
  extra["grid_n"] = mc.grid_n;
  extra["fusion_hidden"] = mc.fusion_hidden;

  const auto fit = train::train_pretext(
      m, train_data, val_data, sched, out / "checkpoint",
      cfg.at("train").at("seed").get<std::uint64_t>(), c.threads, extra,
      &std::cerr);
  fit.log.save_csv(out / "train_log.csv");
  std::cerr << "best epoch " << fit.best_epoch << ": val loss "
            << fit.best_val_loss << ", val accuracy " << fit.best_val_acc
            << "\n";
  return 0;
}

int run_train_downstream(const Common& c, const std::string& cohort_dir,
                         const std::string& encoder_ckpt, double fraction) {
  json cfg = load_config(c.config);
  apply_seed_override(cfg, "downstream", c.seed);

  const auto cohort = synth::read_cohort(cohort_dir);
  const auto tiling = tiling_from_config(cfg, c.threads);
  const auto rois = downstream::tile_rois(cohort, tiling);
  std::cerr << "tiled " << rois.train.size() << " train + " << rois.val.size()
            << " val patches, " << rois.classes << " classes\n";

  model::ClassifierConfig mc;
  mc.classes = rois.classes;
  mc.input_size = tiling.input_size;
  mc.batch = cfg.at("downstream").at("batch").get<int>();
  mc.seed = cfg.at("downstream").at("seed").get<std::uint64_t>();

  std::optional<nncore::Checkpoint> ckpt;
  if (!encoder_ckpt.empty()) {
    ckpt = nncore::load_checkpoint(encoder_ckpt);
    if (!ckpt->manifest.contains("encoder"))
      throw ConfigError(encoder_ckpt + " carries no encoder description");
    // The checkpoint knows the trunk it was trained with.
    mc.encoder = ckpt->manifest.at("encoder").get<model::EncoderSpec>();
  } else {
    mc.encoder = encoder_from_config(cfg);
  }
  auto m = model::build_classifier<float>(mc);
  if (ckpt) model::load_encoder(m.g, *ckpt);

  auto train_set = rois.train;
  if (fraction != 1.0)
    train_set = downstream::label_fraction_subset(train_set, fraction, mc.seed);

  const auto sched = downstream_schedule_from_config(cfg);
  const fs::path out = ensure_out(c.out);
  const auto fit = train::train_downstream(m, train_set, rois.val, sched,
                                           mc.seed, c.threads, &std::cerr);
  fit.log.save_csv(out / "train_log.csv");

  json manifest;
  manifest["task"] = "downstream";
  manifest["encoder"] = mc.encoder;
  manifest["classes"] = mc.classes;
  manifest["input_size"] = mc.input_size;
  manifest["pretrained"] = !encoder_ckpt.empty();
  nncore::save_checkpoint(out / "checkpoint", model::snapshot_params(m.g),
                          manifest);
  std::cerr << "best epoch " << fit.best_epoch << ": val loss "
            << fit.best_val_loss << ", val accuracy " << fit.best_val_acc
            << "\n";
  return 0;
}

int run_evaluate(const Common& c, const std::string& cohort_dir,
                 const std::string& model_ckpt) {
  json cfg = load_config(c.config);
  apply_seed_override(cfg, "downstream", c.seed);

  const auto ckpt = nncore::load_checkpoint(model_ckpt);
  if (!ckpt.manifest.contains("classes") || !ckpt.manifest.contains("encoder"))
    throw ConfigError(model_ckpt + " is not a classifier checkpoint");
  model::ClassifierConfig mc;
  mc.encoder = ckpt.manifest.at("encoder").get<model::EncoderSpec>();
  mc.classes = ckpt.manifest.at("classes").get<int>();
  mc.input_size = ckpt.manifest.at("input_size").get<int>();
  mc.batch = cfg.at("downstream").at("batch").get<int>();
  auto m = model::build_classifier<float>(mc);
  model::load_params(m.g, ckpt);

  auto tiling = tiling_from_config(cfg, c.threads);
  if (tiling.input_size != mc.input_size)
    throw ConfigError("downstream.input_size " +
                      std::to_string(tiling.input_size) +
                      " does not match the checkpoint's " +
                      std::to_string(mc.input_size));
  const auto cohort = synth::read_cohort(cohort_dir);
  const auto preds = downstream::predict_cohort(m, cohort, tiling, c.threads);

  const fs::path out = ensure_out(c.out);
  downstream::write_predictions_csv(out / "predictions.csv", preds);

  const auto cm = eval::confusion(preds, mc.classes);
  const double acc = eval::mean_class_accuracy(cm);
  json counts = json::array();
  for (int t = 0; t < cm.classes; ++t) {
    json row = json::array();
    for (int p = 0; p < cm.classes; ++p) row.push_back(cm.at(t, p));
    counts.push_back(row);
  }
  json metrics;
  metrics["patients"] = preds.size();
  metrics["mean_class_accuracy"] = acc;
  metrics["confusion"] = counts;
  std::ofstream mout(out / "metrics.json");
  if (!mout) throw IoError("cannot write " + (out / "metrics.json").string());
  mout << metrics.dump(2) << "\n";
  std::cerr << preds.size() << " patients, mean class accuracy " << acc << "\n";
  return 0;
}

int run_ablate(const Common& c, const std::string& cohort_dir) {
  json cfg = load_config(c.config);
  apply_seed_override(cfg, "eval", c.seed);

  const auto ac = ablation_from_config(cfg, c.threads);
  const auto cohort = synth::read_cohort(cohort_dir);
  const auto result = eval::run_ablation(cohort, ac);
  const auto points = eval::summarize_ablation(result);

  const fs::path out = ensure_out(c.out);
  eval::write_ablation_csv(out / "ablation.csv", result.rows);
  eval::write_summary_json(out / "summary.json", points);
  eval::write_curve_svg(out / "curve.svg", points);
  for (const auto& p : points)
    std::cerr << eval::variant_name(p.variant) << " @ " << p.fraction << ": "
              << p.mean_acc << " +/- " << p.std_acc << " over " << p.runs
              << " runs\n";
  return 0;
}

// Re-derives the library's trusted results from first principles: gradient
// checks against central differences and the localization oracle against
// generated labels.
int run_verify() {
  bool ok = true;
  const auto report = [&](const std::string& name, bool pass,
                          const std::string& detail) {
    std::cerr << (pass ? "PASS" : "FAIL") << " " << name;
    if (!detail.empty()) std::cerr << " (" << detail << ")";
    std::cerr << "\n";
    ok = ok && pass;
  };

  double worst = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed)
    worst = std::max(worst, nncore::gradcheck::random_graph_error(seed));
  report("gradients vs central differences", worst < 1e-4,
         "worst relative error " + std::to_string(worst));

  synth::SynthSpec spec;
  spec.seed = 99;
  spec.levels = 4;
  spec.base_size = 64;
  const auto img = synth::generate_pyramid(spec);

  pretext::SamplerConfig sc;
  sc.n = 2;
  sc.patch_size = 16;
  sc.input_size = 8;
  Rng rng(17);
  int oracle_hits = 0;
  const int draws = 200;
  for (int i = 0; i < draws; ++i) {
    const auto s = pretext::sample_location(img, sc, rng);
    const auto kids = pyramid::children_set(s.parent_ref, sc.n, img.max_level());
    const Image parent = extract(img, s.parent_ref);
    const Image child = extract(img, kids[s.label]);
    if (pretext::locate_oracle(parent, child, sc.n) == s.label) ++oracle_hits;
  }
  report("localization oracle recovers labels", oracle_hits == draws,
         std::to_string(oracle_hits) + "/" + std::to_string(draws));

  bool geometry = true;
  Rng grng(23);
  for (int i = 0; i < 200 && geometry; ++i) {
    const int n = 1 + static_cast<int>(grng.uniform_int(2));
    const int size = 8 << grng.uniform_int(2);
    const int level = static_cast<int>(grng.uniform_int(img.max_level() - n + 1));
    const Image& base = img.level(level);
    if (base.height < size || base.width < size) continue;
    const pyramid::PatchRef p{
        level, static_cast<int>(grng.uniform_int(base.height - size + 1)),
        static_cast<int>(grng.uniform_int(base.width - size + 1)), size, size};
    const auto kids = pyramid::children_set(p, n, img.max_level());
    geometry = geometry && kids.size() == (1u << (2 * n));
    const int scale = 1 << n;
    std::vector<bool> covered(static_cast<std::size_t>(scale) * scale, false);
    for (const auto& k : kids) {
      geometry = geometry && k.level == level + n && k.height == size &&
                 k.width == size;
      const int gr = (k.origin_row - p.origin_row * scale) / size;
      const int gc = (k.origin_col - p.origin_col * scale) / size;
      if (gr < 0 || gr >= scale || gc < 0 || gc >= scale) {
        geometry = false;
        break;
      }
      const std::size_t cell = static_cast<std::size_t>(gr) * scale + gc;
      geometry = geometry && !covered[cell];
      covered[cell] = true;
    }
    for (const bool c : covered) geometry = geometry && c;
  }
  report("children tile the parent exactly", geometry, "");

  if (!ok) {
    std::cerr << "verification failed\n";
    return 3;
  }
  std::cerr << "all checks passed\n";
  return 0;
}

int dispatch(const CLI::App& app, const Common& common,
             const std::string& cohort_dir, const std::string& data_dir,
             const std::string& encoder_ckpt, const std::string& model_ckpt,
             double fraction) {
  if (app.got_subcommand("gen-synth")) return run_gen_synth(common);
  if (app.got_subcommand("gen-pretext")) return run_gen_pretext(common, cohort_dir);
  if (app.got_subcommand("train-pretext")) return run_train_pretext(common, data_dir);
  if (app.got_subcommand("train-downstream"))
    return run_train_downstream(common, cohort_dir, encoder_ckpt, fraction);
  if (app.got_subcommand("evaluate")) return run_evaluate(common, cohort_dir, model_ckpt);
  if (app.got_subcommand("ablate")) return run_ablate(common, cohort_dir);
  if (app.got_subcommand("verify")) return run_verify();
  std::cerr << app.help() << "\n";
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised zoom localization on image pyramids"};
  app.require_subcommand(0, 1);

  bool print_defaults = false;
  app.add_flag("--print-defaults", print_defaults,
               "dump the built-in config defaults as JSON and exit");

  Common common;
  std::string cohort_dir, data_dir, encoder_ckpt, model_ckpt;
  double fraction = 1.0;

  auto* gen_synth =
      app.add_subcommand("gen-synth", "generate a synthetic pyramid cohort");
  attach_common(gen_synth, common);
  gen_synth->footer(keys_footer({"synth"}));

  auto* gen_pretext = app.add_subcommand(
      "gen-pretext", "sample pretext shards from a cohort's train slides");
  attach_common(gen_pretext, common);
  gen_pretext->add_option("--cohort", cohort_dir, "cohort directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  gen_pretext->footer(keys_footer({"pretext"}));

  auto* train_pretext = app.add_subcommand(
      "train-pretext", "train the two-branch localization model on shards");
  attach_common(train_pretext, common);
  train_pretext
      ->add_option("--data", data_dir, "shard directory from gen-pretext")
      ->required()
      ->check(CLI::ExistingDirectory);
  train_pretext->footer(keys_footer({"model", "train"}));

  auto* train_downstream = app.add_subcommand(
      "train-downstream", "fine-tune a patch classifier on labeled regions");
  attach_common(train_downstream, common);
  train_downstream->add_option("--cohort", cohort_dir, "cohort directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  train_downstream->add_option(
      "--encoder", encoder_ckpt,
      "encoder checkpoint to start from (default: random init)");
  train_downstream->add_option(
      "--fraction", fraction, "labeled fraction of the training patches");
  train_downstream->footer(keys_footer({"model", "downstream"}));

  auto* evaluate = app.add_subcommand(
      "evaluate", "patient-level predictions on the test split");
  attach_common(evaluate, common);
  evaluate->add_option("--cohort", cohort_dir, "cohort directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  evaluate->add_option("--model", model_ckpt, "classifier checkpoint directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  evaluate->footer(keys_footer({"downstream"}));

  auto* ablate = app.add_subcommand(
      "ablate", "accuracy against labeled fraction per pretraining variant");
  attach_common(ablate, common);
  ablate->add_option("--cohort", cohort_dir, "cohort directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  ablate->footer(keys_footer({"model", "downstream", "eval"}));

  app.add_subcommand("verify", "run the oracle and gradient self-checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (print_defaults) {
    std::cout << default_config().dump(2) << "\n";
    return 0;
  }

  try {
    return dispatch(app, common, cohort_dir, data_dir, encoder_ckpt,
                    model_ckpt, fraction);
  } catch (const Diverged& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const FractionOutOfRange& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const SpecError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const OutOfRange& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ShapeMismatch& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
