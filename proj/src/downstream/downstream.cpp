#include "zoomloc/downstream/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>

#include "zoomloc/common/error.hpp"
#include "zoomloc/common/parallel.hpp"
#include "zoomloc/common/rng.hpp"

namespace zoomloc::downstream {

namespace {

void check_tile_config(const TileConfig& cfg) {
  if (cfg.tile < 1) throw ConfigError("tile must be >= 1");
  if (cfg.input_size < 1) throw ConfigError("input_size must be >= 1");
  if (cfg.white_reject < 0.0 || cfg.white_reject > 1.0)
    throw ConfigError("white_reject must lie in [0,1]");
  if (cfg.region_frac <= 0.0 || cfg.region_frac > 1.0)
    throw ConfigError("region_frac must lie in (0,1]");
  if (cfg.val_fraction <= 0.0 || cfg.val_fraction >= 1.0)
    throw ConfigError("val_fraction must lie strictly between 0 and 1");
}

Image stored_form(const Image& patch, int input_size) {
  return quantize_u8(resize_bilinear(patch, input_size, input_size));
}

template <typename T>
void seeded_shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i)
    std::swap(v[i - 1], v[rng.uniform_int(i)]);
}

}  // namespace

std::vector<Image> tile_region(const pyramid::PyramidImage& img, int r0, int c0,
                               int height, int width, const TileConfig& cfg) {
  check_tile_config(cfg);
  const Image& top = img.levels.back();
  if (r0 < 0 || c0 < 0 || height < 1 || width < 1 ||
      r0 + height > top.height || c0 + width > top.width)
    throw OutOfBounds("region " + std::to_string(height) + "x" +
                      std::to_string(width) + "+" + std::to_string(r0) + "+" +
                      std::to_string(c0) + " leaves the top level");

  std::vector<Image> tiles;
  for (int r = r0; r + cfg.tile <= r0 + height; r += cfg.tile) {
    for (int c = c0; c + cfg.tile <= c0 + width; c += cfg.tile) {
      const Image patch =
          stored_form(crop(top, r, c, cfg.tile, cfg.tile), cfg.input_size);
      if (whiteness(patch, cfg.lum_threshold, cfg.sat_threshold) >
          cfg.white_reject)
        continue;
      tiles.push_back(patch);
    }
  }
  if (tiles.empty())
    throw EmptyRegion("region yields no usable tiles (tile " +
                      std::to_string(cfg.tile) + ", region " +
                      std::to_string(height) + "x" + std::to_string(width) + ")");
  return tiles;
}

std::vector<Image> tile_slide(const pyramid::PyramidImage& img,
                              const TileConfig& cfg) {
  const Image& top = img.levels.back();
  return tile_region(img, 0, 0, top.height, top.width, cfg);
}

RoiPatchSet tile_rois(const synth::SynthCohort& cohort, const TileConfig& cfg) {
  check_tile_config(cfg);

  struct SlideJob {
    std::size_t patient_index;
    std::string patient_id, slide_id;
    int label;
    std::filesystem::path path;
  };
  std::vector<SlideJob> jobs;
  int classes = 0;
  for (std::size_t pi = 0; pi < cohort.patients.size(); ++pi) {
    const synth::PatientEntry& p = cohort.patients[pi];
    classes = std::max(classes, p.class_id + 1);
    if (p.split != "train") continue;
    for (std::size_t si = 0; si < p.pyramid_paths.size(); ++si)
      jobs.push_back({pi, p.patient_id, p.pyramid_paths[si], p.class_id,
                      cohort.root / p.pyramid_paths[si]});
  }
  if (jobs.empty()) throw ConfigError("cohort has no train-split patients");

  std::vector<std::vector<train::LabeledPatch>> harvested(jobs.size());
  parallel_for(jobs.size(), cfg.threads, [&](std::size_t j) {
    const SlideJob& job = jobs[j];
    const pyramid::PyramidImage img = pyramid::read_pyramid(job.path);
    const Image& top = img.levels.back();
    const int rh = std::max(1, static_cast<int>(std::lround(cfg.region_frac * top.height)));
    const int rw = std::max(1, static_cast<int>(std::lround(cfg.region_frac * top.width)));
    Rng rng(mix_seed(cfg.seed, 0x4017, job.patient_index, j));
    const int r0 = static_cast<int>(rng.uniform_int(top.height - rh + 1));
    const int c0 = static_cast<int>(rng.uniform_int(top.width - rw + 1));
    for (Image& tile : tile_region(img, r0, c0, rh, rw, cfg)) {
      train::LabeledPatch patch;
      patch.image = std::move(tile);
      patch.label = job.label;
      patch.patient_id = job.patient_id;
      patch.slide_id = job.slide_id;
      harvested[j].push_back(std::move(patch));
    }
  });

  std::vector<std::vector<train::LabeledPatch>> by_class(classes);
  for (auto& slide_patches : harvested)
    for (auto& patch : slide_patches)
      by_class[patch.label].push_back(std::move(patch));

  // Balance by downsampling every class to the smallest class's count.
  std::size_t floor_count = std::numeric_limits<std::size_t>::max();
  for (const auto& v : by_class)
    if (!v.empty()) floor_count = std::min(floor_count, v.size());
  for (int k = 0; k < classes; ++k) {
    Rng rng(mix_seed(cfg.seed, 0xba1a, static_cast<std::uint64_t>(k)));
    seeded_shuffle(by_class[k], rng);
    if (by_class[k].size() > floor_count) by_class[k].resize(floor_count);
  }

  RoiPatchSet set;
  set.classes = classes;
  if (cfg.patient_disjoint) {
    // Pick validation patients per class, then route patches by patient.
    std::map<std::string, bool> to_val;
    for (int k = 0; k < classes; ++k) {
      std::vector<std::string> ids;
      for (const synth::PatientEntry& p : cohort.patients)
        if (p.split == "train" && p.class_id == k) ids.push_back(p.patient_id);
      if (ids.empty()) continue;
      if (ids.size() < 2)
        throw ConfigError(
            "class " + std::to_string(k) +
            " has a single train patient; a patient-disjoint validation "
            "split is impossible");
      Rng rng(mix_seed(cfg.seed, 0x5911, static_cast<std::uint64_t>(k)));
      seeded_shuffle(ids, rng);
      const std::size_t val_n = std::clamp<std::size_t>(
          static_cast<std::size_t>(
              std::ceil(cfg.val_fraction * static_cast<double>(ids.size()))),
          1, ids.size() - 1);
      for (std::size_t i = 0; i < ids.size(); ++i) to_val[ids[i]] = i < val_n;
    }
    for (auto& v : by_class)
      for (auto& patch : v)
        (to_val[patch.patient_id] ? set.val : set.train).push_back(std::move(patch));
  } else {
    std::vector<train::LabeledPatch> pool;
    for (auto& v : by_class)
      for (auto& patch : v) pool.push_back(std::move(patch));
    Rng rng(mix_seed(cfg.seed, 0x5911));
    seeded_shuffle(pool, rng);
    const std::size_t val_n = static_cast<std::size_t>(
        std::llround(cfg.val_fraction * static_cast<double>(pool.size())));
    for (std::size_t i = 0; i < pool.size(); ++i)
      (i < val_n ? set.val : set.train).push_back(std::move(pool[i]));
  }
  if (set.train.empty() || set.val.empty())
    throw ConfigError("the 85/15 split left an empty side; too few patches");
  return set;
}

std::vector<train::LabeledPatch> label_fraction_subset(
    const std::vector<train::LabeledPatch>& set, double fraction,
    std::uint64_t seed) {
  if (!(fraction > 0.0) || fraction > 1.0)
    throw FractionOutOfRange("fraction " + std::to_string(fraction) +
                             " outside (0, 1]");
  if (fraction == 1.0) return set;

  int classes = 0;
  for (const auto& p : set) classes = std::max(classes, p.label + 1);
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < set.size(); ++i)
    by_class[set[i].label].push_back(i);

  std::vector<std::size_t> keep;
  for (int k = 0; k < classes; ++k) {
    auto& idx = by_class[k];
    if (idx.empty()) continue;
    Rng rng(mix_seed(seed, 0xf7ac, static_cast<std::uint64_t>(k)));
    seeded_shuffle(idx, rng);
    const std::size_t m = std::max<std::size_t>(
        1, static_cast<std::size_t>(
               std::llround(fraction * static_cast<double>(idx.size()))));
    idx.resize(std::min(m, idx.size()));
    keep.insert(keep.end(), idx.begin(), idx.end());
  }
  std::sort(keep.begin(), keep.end());
  std::vector<train::LabeledPatch> out;
  out.reserve(keep.size());
  for (std::size_t i : keep) out.push_back(set[i]);
  return out;
}

VoteResult vote(const std::vector<std::vector<double>>& probs) {
  if (probs.empty()) throw NoPatches("no patches to vote over");
  const std::size_t classes = probs.front().size();
  if (classes == 0) throw ShapeMismatch("probability rows are empty");

  std::vector<long> votes(classes, 0);
  std::vector<double> mass(classes, 0.0);
  for (const auto& row : probs) {
    if (row.size() != classes)
      throw ShapeMismatch("probability rows disagree on the class count");
    std::size_t arg = 0;
    for (std::size_t c = 1; c < classes; ++c)
      if (row[c] > row[arg]) arg = c;
    ++votes[arg];
    for (std::size_t c = 0; c < classes; ++c) mass[c] += row[c];
  }

  const long top = *std::max_element(votes.begin(), votes.end());
  std::size_t winner = classes;
  for (std::size_t c = 0; c < classes; ++c) {
    if (votes[c] != top) continue;
    if (winner == classes || mass[c] > mass[winner]) winner = c;
  }
  long runner_up = 0;
  for (std::size_t c = 0; c < classes; ++c)
    if (c != winner) runner_up = std::max(runner_up, votes[c]);

  VoteResult res;
  res.votes = std::move(votes);
  res.label = static_cast<int>(winner);
  res.margin = top - runner_up;
  return res;
}

std::vector<std::vector<double>> classify_patches(
    model::Classifier<float>& m, const std::vector<Image>& patches,
    int threads) {
  if (patches.empty()) throw NoPatches("no patches to classify");
  const auto& shape = m.g.value(m.image).shape;
  const int s = shape[1];
  const std::size_t plane = static_cast<std::size_t>(s) * s * 3;
  const int batch = shape[0];

  std::vector<std::vector<double>> probs(patches.size());
  for (std::size_t start = 0; start < patches.size();) {
    const int b = static_cast<int>(
        std::min<std::size_t>(batch, patches.size() - start));
    if (m.g.batch() != b) m.g.set_batch(b);
    std::vector<float> input(static_cast<std::size_t>(b) * plane);
    parallel_for(b, threads, [&](std::size_t k) {
      const Image& p = patches[start + k];
      if (p.height != s || p.width != s || p.channels != 3)
        throw ShapeMismatch("patch is " + std::to_string(p.height) + "x" +
                            std::to_string(p.width) + "x" +
                            std::to_string(p.channels) + ", model expects " +
                            std::to_string(s) + "x" + std::to_string(s) + "x3");
      std::copy(p.data.begin(), p.data.end(), input.begin() + k * plane);
    });
    m.g.set_input(m.image, input);
    m.g.forward(m.logits);
    const auto& logits = m.g.value(m.logits).data;
    for (int r = 0; r < b; ++r) {
      std::vector<double> row(m.classes);
      double zmax = -1e300;
      for (int c = 0; c < m.classes; ++c)
        zmax = std::max(zmax, static_cast<double>(logits[r * m.classes + c]));
      double sum = 0.0;
      for (int c = 0; c < m.classes; ++c) {
        row[c] = std::exp(static_cast<double>(logits[r * m.classes + c]) - zmax);
        sum += row[c];
      }
      for (double& v : row) v /= sum;
      probs[start + r] = std::move(row);
    }
    start += b;
  }
  return probs;
}

PatientPrediction predict_tiled(model::Classifier<float>& m,
                                const TestPatient& patient, int threads) {
  if (patient.patches.empty())
    throw NoPatches("patient " + patient.patient_id + " has no patches");
  const VoteResult v = vote(classify_patches(m, patient.patches, threads));
  PatientPrediction pred;
  pred.patient_id = patient.patient_id;
  pred.true_label = patient.true_label;
  pred.predicted = v.label;
  pred.votes = v.votes;
  pred.margin = v.margin;
  return pred;
}

PatientPrediction predict_patient(model::Classifier<float>& m,
                                  const std::filesystem::path& cohort_root,
                                  const synth::PatientEntry& patient,
                                  const TileConfig& cfg, int threads) {
  TestPatient t;
  t.patient_id = patient.patient_id;
  t.true_label = patient.class_id;
  for (const std::string& rel : patient.pyramid_paths) {
    const pyramid::PyramidImage img = pyramid::read_pyramid(cohort_root / rel);
    try {
      for (Image& tile : tile_slide(img, cfg)) t.patches.push_back(std::move(tile));
    } catch (const EmptyRegion&) {
      // a fully background slide contributes nothing
    }
  }
  return predict_tiled(m, t, threads);
}

std::vector<TestPatient> tile_test_cohort(const synth::SynthCohort& cohort,
                                          const TileConfig& cfg, int threads) {
  check_tile_config(cfg);
  std::vector<const synth::PatientEntry*> test;
  for (const synth::PatientEntry& p : cohort.patients)
    if (p.split == "test") test.push_back(&p);
  if (test.empty()) throw ConfigError("cohort has no test-split patients");

  std::vector<TestPatient> out(test.size());
  parallel_for(test.size(), threads, [&](std::size_t i) {
    const synth::PatientEntry& p = *test[i];
    out[i].patient_id = p.patient_id;
    out[i].true_label = p.class_id;
    for (const std::string& rel : p.pyramid_paths) {
      const pyramid::PyramidImage img = pyramid::read_pyramid(cohort.root / rel);
      try {
        for (Image& tile : tile_slide(img, cfg))
          out[i].patches.push_back(std::move(tile));
      } catch (const EmptyRegion&) {
      }
    }
  });
  return out;
}

std::vector<PatientPrediction> predict_cohort(model::Classifier<float>& m,
                                              const synth::SynthCohort& cohort,
                                              const TileConfig& cfg,
                                              int threads) {
  const auto tiled = tile_test_cohort(cohort, cfg, threads);
  std::vector<PatientPrediction> preds;
  preds.reserve(tiled.size());
  for (const TestPatient& t : tiled)
    preds.push_back(predict_tiled(m, t, threads));
  return preds;
}

void write_predictions_csv(const std::filesystem::path& path,
                           const std::vector<PatientPrediction>& preds) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "patient_id,true,pred,votes_per_class,margin\n";
  for (const PatientPrediction& p : preds) {
    out << p.patient_id << ',' << p.true_label << ',' << p.predicted << ',';
    for (std::size_t c = 0; c < p.votes.size(); ++c) {
      if (c) out << '|';
      out << p.votes[c];
    }
    out << ',' << p.margin << "\n";
  }
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace zoomloc::downstream
