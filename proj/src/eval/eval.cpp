#include "zoomloc/eval/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include <json.hpp>

#include "zoomloc/common/error.hpp"
#include "zoomloc/common/parallel.hpp"
#include "zoomloc/common/rng.hpp"
#include "zoomloc/nncore/checkpoint.hpp"

namespace zoomloc::eval {

using nlohmann::json;

ConfusionMatrix confusion(const std::vector<downstream::PatientPrediction>& preds,
                          int classes, int run_id) {
  if (classes < 1) throw ConfigError("confusion matrix needs >= 1 class");
  ConfusionMatrix cm(classes, run_id);
  for (const auto& p : preds) {
    if (p.true_label < 0 || p.true_label >= classes || p.predicted < 0 ||
        p.predicted >= classes)
      throw OutOfRange("label pair (" + std::to_string(p.true_label) + ", " +
                       std::to_string(p.predicted) + ") outside [0, " +
                       std::to_string(classes) + ")");
    ++cm.at(p.true_label, p.predicted);
  }
  return cm;
}

double mean_class_accuracy(const ConfusionMatrix& cm) {
  if (cm.classes < 1) throw ConfigError("empty confusion matrix");
  double acc = 0.0;
  for (int t = 0; t < cm.classes; ++t) {
    long row = 0;
    for (int p = 0; p < cm.classes; ++p) row += cm.at(t, p);
    if (row == 0)
      throw EmptyClass("true class " + std::to_string(t) + " has no patients");
    acc += static_cast<double>(cm.at(t, t)) / static_cast<double>(row);
  }
  return acc / cm.classes;
}

RunSummary aggregate_runs(const std::vector<ConfusionMatrix>& runs) {
  if (runs.size() < 2) throw ConfigError("aggregation needs >= 2 runs");
  const int k = runs.front().classes;
  for (const auto& cm : runs)
    if (cm.classes != k)
      throw ShapeMismatch("runs mix " + std::to_string(k) + " and " +
                          std::to_string(cm.classes) + " classes");

  RunSummary s;
  s.classes = k;
  s.runs = static_cast<int>(runs.size());
  const std::size_t cells = static_cast<std::size_t>(k) * k;
  s.cell_mean.assign(cells, 0.0);
  s.cell_std.assign(cells, 0.0);
  const double n = static_cast<double>(runs.size());
  for (std::size_t c = 0; c < cells; ++c) {
    double mean = 0.0;
    for (const auto& cm : runs) mean += static_cast<double>(cm.counts[c]);
    mean /= n;
    double var = 0.0;
    for (const auto& cm : runs) {
      const double d = static_cast<double>(cm.counts[c]) - mean;
      var += d * d;
    }
    s.cell_mean[c] = mean;
    s.cell_std[c] = std::sqrt(var / (n - 1.0));
  }

  double acc_mean = 0.0;
  std::vector<double> accs;
  accs.reserve(runs.size());
  for (const auto& cm : runs) {
    accs.push_back(mean_class_accuracy(cm));
    acc_mean += accs.back();
  }
  acc_mean /= n;
  double acc_var = 0.0;
  for (double a : accs) acc_var += (a - acc_mean) * (a - acc_mean);
  s.mean_acc = acc_mean;
  s.acc_std = std::sqrt(acc_var / (n - 1.0));

  double off = 0.0;
  for (const auto& cm : runs)
    for (int t = 0; t < k; ++t)
      for (int p = 0; p < k; ++p)
        if (t != p) off += static_cast<double>(cm.at(t, p));
  s.misclassified = static_cast<long>(std::ceil(off / n));
  return s;
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::LocationSsl: return "location-ssl";
    case Variant::PairSsl: return "pair-ssl";
    case Variant::ExternalWeights: return "external-weights";
    case Variant::RandomInit: return "random-init";
  }
  throw ConfigError("unknown variant");
}

Variant variant_from_name(const std::string& name) {
  if (name == "location-ssl") return Variant::LocationSsl;
  if (name == "pair-ssl") return Variant::PairSsl;
  if (name == "external-weights") return Variant::ExternalWeights;
  if (name == "random-init") return Variant::RandomInit;
  throw ConfigError("unknown variant \"" + name + "\"");
}

namespace {

const std::filesystem::path& ckpt_path(const AblationConfig& cfg, Variant v) {
  static const std::filesystem::path none;
  switch (v) {
    case Variant::LocationSsl: return cfg.location_ckpt;
    case Variant::PairSsl: return cfg.pair_ckpt;
    case Variant::ExternalWeights: return cfg.external_ckpt;
    case Variant::RandomInit: return none;
  }
  throw ConfigError("unknown variant");
}

}  // namespace

AblationResult run_ablation(const synth::SynthCohort& cohort,
                            const AblationConfig& cfg) {
  if (cfg.variants.empty()) throw ConfigError("no variants requested");
  if (cfg.fractions.empty()) throw ConfigError("no fractions requested");
  if (cfg.runs < 1) throw ConfigError("runs must be >= 1");
  for (double f : cfg.fractions)
    if (!(f > 0.0) || f > 1.0)
      throw FractionOutOfRange("fraction " + std::to_string(f) +
                               " outside (0, 1]");

  // Encoder checkpoints load once; cells share the parsed tensors.
  std::map<Variant, nncore::Checkpoint> ckpts;
  for (Variant v : cfg.variants) {
    if (v == Variant::RandomInit || ckpts.count(v)) continue;
    const auto& path = ckpt_path(cfg, v);
    if (path.empty())
      throw ConfigError(variant_name(v) + " needs an encoder checkpoint");
    ckpts.emplace(v, nncore::load_checkpoint(path));
  }

  const downstream::RoiPatchSet rois = downstream::tile_rois(cohort, cfg.tiling);
  const auto test = downstream::tile_test_cohort(cohort, cfg.tiling, cfg.threads);

  const std::size_t cells =
      cfg.variants.size() * cfg.fractions.size() * static_cast<std::size_t>(cfg.runs);
  AblationResult result;
  result.rows.resize(cells);
  result.matrices.resize(cells);

  parallel_for(cells, cfg.threads, [&](std::size_t cell) {
    const int run = static_cast<int>(cell % cfg.runs);
    const std::size_t vf = cell / cfg.runs;
    const std::size_t fi = vf % cfg.fractions.size();
    const std::size_t vi = vf / cfg.fractions.size();
    const Variant variant = cfg.variants[vi];
    const double fraction = cfg.fractions[fi];
    const std::uint64_t seed =
        mix_seed(cfg.seed, 0xab1a7e, vi * 97 + fi, static_cast<std::uint64_t>(run));

    model::ClassifierConfig mc;
    mc.encoder = cfg.encoder;
    mc.classes = rois.classes;
    mc.input_size = cfg.input_size;
    mc.batch = cfg.schedule.batch;
    mc.seed = seed;
    auto m = model::build_classifier<float>(mc);
    if (variant != Variant::RandomInit)
      model::load_encoder(m.g, ckpts.at(variant));

    const auto subset = downstream::label_fraction_subset(rois.train, fraction, seed);
    train::train_downstream(m, subset, rois.val, cfg.schedule, seed, 1);

    std::vector<downstream::PatientPrediction> preds;
    preds.reserve(test.size());
    for (const auto& patient : test)
      preds.push_back(downstream::predict_tiled(m, patient, 1));

    result.matrices[cell] = confusion(preds, rois.classes, run);
    result.rows[cell] = {variant, fraction, run,
                         mean_class_accuracy(result.matrices[cell])};
  });
  return result;
}

std::vector<AblationPoint> summarize_ablation(const AblationResult& result) {
  std::vector<AblationPoint> points;
  std::size_t i = 0;
  while (i < result.rows.size()) {
    const Variant v = result.rows[i].variant;
    const double f = result.rows[i].fraction;
    std::vector<double> accs;
    double off = 0.0;
    std::size_t j = i;
    for (; j < result.rows.size() && result.rows[j].variant == v &&
           result.rows[j].fraction == f;
         ++j) {
      accs.push_back(result.rows[j].mean_acc);
      const ConfusionMatrix& cm = result.matrices[j];
      for (int t = 0; t < cm.classes; ++t)
        for (int p = 0; p < cm.classes; ++p)
          if (t != p) off += static_cast<double>(cm.at(t, p));
    }
    const double n = static_cast<double>(accs.size());
    double mean = 0.0;
    for (double a : accs) mean += a;
    mean /= n;
    double var = 0.0;
    for (double a : accs) var += (a - mean) * (a - mean);
    AblationPoint point;
    point.variant = v;
    point.fraction = f;
    point.runs = static_cast<int>(accs.size());
    point.mean_acc = mean;
    point.std_acc = accs.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
    point.misclassified = static_cast<long>(std::ceil(off / n));
    points.push_back(point);
    i = j;
  }
  return points;
}

void write_ablation_csv(const std::filesystem::path& path,
                        const std::vector<AblationRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "variant,fraction,run,mean_acc\n";
  out << std::setprecision(17);
  for (const AblationRow& r : rows)
    out << variant_name(r.variant) << ',' << r.fraction << ',' << r.run << ','
        << r.mean_acc << "\n";
  if (!out) throw IoError("failed writing " + path.string());
}

void write_summary_json(const std::filesystem::path& path,
                        const std::vector<AblationPoint>& points) {
  json cells = json::array();
  for (const AblationPoint& p : points)
    cells.push_back({{"variant", variant_name(p.variant)},
                     {"fraction", p.fraction},
                     {"runs", p.runs},
                     {"mean_acc", p.mean_acc},
                     {"std_acc", p.std_acc},
                     {"misclassified", p.misclassified}});
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << json{{"cells", cells}}.dump(2) << "\n";
  if (!out) throw IoError("failed writing " + path.string());
}

namespace {

std::string fmt(double v) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(2) << v;
  return ss.str();
}

}  // namespace

void write_curve_svg(const std::filesystem::path& path,
                     const std::vector<AblationPoint>& points) {
  if (points.empty()) throw ConfigError("nothing to plot");

  std::vector<Variant> variants;
  double fmin = points.front().fraction, fmax = points.front().fraction;
  for (const AblationPoint& p : points) {
    if (std::find(variants.begin(), variants.end(), p.variant) == variants.end())
      variants.push_back(p.variant);
    fmin = std::min(fmin, p.fraction);
    fmax = std::max(fmax, p.fraction);
  }
  if (fmax == fmin) {
    fmin -= 0.1;
    fmax += 0.1;
  }

  const double x0 = 60, x1 = 470, y0 = 360, y1 = 20;  // plot rectangle
  const auto sx = [&](double f) { return x0 + (f - fmin) / (fmax - fmin) * (x1 - x0); };
  const auto sy = [&](double a) { return y0 + a * (y1 - y0); };  // accuracy in [0,1]
  const char* palette[] = {"#4477aa", "#ee6677", "#228833", "#ccbb44"};

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" "
         "viewBox=\"0 0 640 400\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<rect width=\"640\" height=\"400\" fill=\"white\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double a = 0.25 * i;
    svg << "<line x1=\"" << fmt(x0) << "\" y1=\"" << fmt(sy(a)) << "\" x2=\""
        << fmt(x1) << "\" y2=\"" << fmt(sy(a))
        << "\" stroke=\"#dddddd\"/>\n";
    svg << "<text x=\"" << fmt(x0 - 8) << "\" y=\"" << fmt(sy(a) + 4)
        << "\" text-anchor=\"end\">" << fmt(a) << "</text>\n";
  }
  std::vector<double> ticks;
  for (const AblationPoint& p : points)
    if (std::find(ticks.begin(), ticks.end(), p.fraction) == ticks.end())
      ticks.push_back(p.fraction);
  std::sort(ticks.begin(), ticks.end());
  for (double f : ticks) {
    svg << "<line x1=\"" << fmt(sx(f)) << "\" y1=\"" << fmt(y0) << "\" x2=\""
        << fmt(sx(f)) << "\" y2=\"" << fmt(y0 + 5) << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << fmt(sx(f)) << "\" y=\"" << fmt(y0 + 18)
        << "\" text-anchor=\"middle\">" << fmt(f) << "</text>\n";
  }
  svg << "<line x1=\"" << fmt(x0) << "\" y1=\"" << fmt(y0) << "\" x2=\""
      << fmt(x1) << "\" y2=\"" << fmt(y0) << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << fmt(x0) << "\" y1=\"" << fmt(y0) << "\" x2=\""
      << fmt(x0) << "\" y2=\"" << fmt(y1) << "\" stroke=\"black\"/>\n";
  svg << "<text x=\"" << fmt((x0 + x1) / 2) << "\" y=\"390\" "
         "text-anchor=\"middle\">labeled fraction</text>\n";
  svg << "<text transform=\"rotate(-90 15 190)\" x=\"15\" y=\"190\" "
         "text-anchor=\"middle\">mean class accuracy</text>\n";

  for (std::size_t vi = 0; vi < variants.size(); ++vi) {
    const char* color = palette[vi % 4];
    std::vector<const AblationPoint*> series;
    for (const AblationPoint& p : points)
      if (p.variant == variants[vi]) series.push_back(&p);
    std::sort(series.begin(), series.end(),
              [](const AblationPoint* a, const AblationPoint* b) {
                return a->fraction < b->fraction;
              });
    svg << "<polyline fill=\"none\" stroke=\"" << color
        << "\" stroke-width=\"2\" points=\"";
    for (const AblationPoint* p : series)
      svg << fmt(sx(p->fraction)) << ',' << fmt(sy(p->mean_acc)) << ' ';
    svg << "\"/>\n";
    for (const AblationPoint* p : series) {
      const double x = sx(p->fraction);
      const double lo = sy(std::max(0.0, p->mean_acc - p->std_acc));
      const double hi = sy(std::min(1.0, p->mean_acc + p->std_acc));
      svg << "<line x1=\"" << fmt(x) << "\" y1=\"" << fmt(lo) << "\" x2=\""
          << fmt(x) << "\" y2=\"" << fmt(hi) << "\" stroke=\"" << color
          << "\"/>\n";
      svg << "<line x1=\"" << fmt(x - 4) << "\" y1=\"" << fmt(lo) << "\" x2=\""
          << fmt(x + 4) << "\" y2=\"" << fmt(lo) << "\" stroke=\"" << color
          << "\"/>\n";
      svg << "<line x1=\"" << fmt(x - 4) << "\" y1=\"" << fmt(hi) << "\" x2=\""
          << fmt(x + 4) << "\" y2=\"" << fmt(hi) << "\" stroke=\"" << color
          << "\"/>\n";
      svg << "<circle cx=\"" << fmt(x) << "\" cy=\"" << fmt(sy(p->mean_acc))
          << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    }
    const double ly = 40 + 20 * static_cast<double>(vi);
    svg << "<line x1=\"490\" y1=\"" << fmt(ly - 4) << "\" x2=\"510\" y2=\""
        << fmt(ly - 4) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"515\" y=\"" << fmt(ly) << "\">"
        << variant_name(variants[vi]) << "</text>\n";
  }
  svg << "</svg>\n";

  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << svg.str();
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace zoomloc::eval
