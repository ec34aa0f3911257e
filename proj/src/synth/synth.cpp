#include "zoomloc/synth/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <json.hpp>

#include "zoomloc/common/error.hpp"
#include "zoomloc/common/parallel.hpp"
#include "zoomloc/common/rng.hpp"

namespace zoomloc::synth {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

double lattice_value(std::uint64_t seed, int tag, int xi, int yi) {
  const std::uint64_t h = mix_seed(seed, static_cast<std::uint64_t>(tag),
                                   static_cast<std::uint64_t>(xi) + 0x10000,
                                   static_cast<std::uint64_t>(yi) + 0x10000);
  return static_cast<double>(h >> 11) * 0x1.0p-52 - 1.0;  // [-1, 1)
}

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

// Band-limited value noise on the unit square: a seeded lattice of `cells`
// cells, smooth-interpolated.
double value_noise(std::uint64_t seed, int tag, double u, double v, int cells) {
  const double x = u * cells;
  const double y = v * cells;
  const int xi = std::min(static_cast<int>(x), cells - 1);
  const int yi = std::min(static_cast<int>(y), cells - 1);
  const double fx = smoothstep(x - xi);
  const double fy = smoothstep(y - yi);
  const double v00 = lattice_value(seed, tag, xi, yi);
  const double v10 = lattice_value(seed, tag, xi + 1, yi);
  const double v01 = lattice_value(seed, tag, xi, yi + 1);
  const double v11 = lattice_value(seed, tag, xi + 1, yi + 1);
  const double top = v00 + (v10 - v00) * fx;
  const double bot = v01 + (v11 - v01) * fx;
  return top + (bot - top) * fy;
}

struct Blob {
  double cx, cy, rx, ry;
};

std::vector<Blob> place_blobs(const SynthSpec& spec) {
  Rng rng(mix_seed(spec.seed, 0xb10b));
  std::vector<Blob> blobs;
  for (int i = 0; i < spec.texture.white_blobs; ++i) {
    Blob b;
    b.cx = rng.uniform(0.15, 0.85);
    b.cy = rng.uniform(0.15, 0.85);
    b.rx = spec.texture.white_blob_frac * rng.uniform(0.7, 1.3);
    b.ry = spec.texture.white_blob_frac * rng.uniform(0.7, 1.3);
    blobs.push_back(b);
  }
  return blobs;
}

}  // namespace

pyramid::PyramidImage generate_pyramid(const SynthSpec& spec) {
  if (spec.levels < 3) throw ConfigError("pyramid needs at least 3 levels");
  if (spec.num_classes < 2) throw ConfigError("need at least 2 classes");
  const int top = spec.base_size << (spec.levels - 1);
  // All levels together hold ~4/3 of the top level's floats.
  const std::size_t bytes =
      static_cast<std::size_t>(top) * top * 3 * sizeof(float) * 4 / 3;
  if (bytes > spec.memory_budget_mb * (1u << 20))
    throw BudgetExceeded("pyramid would need " + std::to_string(bytes >> 20) +
                         " MB, budget is " + std::to_string(spec.memory_budget_mb));

  const TextureParams& tx = spec.texture;
  // Class palette: shared base color, per-class channel shifts on a fixed
  // phase pattern so all pairs stay separated.
  double palette[3];
  for (int ch = 0; ch < 3; ++ch) {
    const double base[3] = {0.58, 0.48, 0.58};
    const double phase = 2.0 * M_PI * (static_cast<double>(spec.class_id) / spec.num_classes) +
                         2.0 * M_PI * ch / 3.0;
    palette[ch] = base[ch] + tx.class_palette_step * std::sin(phase);
  }
  const double freq_mul = 1.0 + tx.class_freq_step * spec.class_id;
  const int cells1 = std::max(2, static_cast<int>(std::lround(tx.noise_cells * freq_mul)));
  const int cells2 = cells1 * 3;
  const auto blobs = place_blobs(spec);

  Image level(top, top, 3);
  for (int r = 0; r < top; ++r) {
    const double v = (r + 0.5) / top;
    for (int c = 0; c < top; ++c) {
      const double u = (c + 0.5) / top;
      bool in_blob = false;
      for (const Blob& b : blobs) {
        const double dx = (u - b.cx) / b.rx;
        const double dy = (v - b.cy) / b.ry;
        if (dx * dx + dy * dy <= 1.0) { in_blob = true; break; }
      }
      if (in_blob) {
        // Near-white background with faint channel-correlated texture: stays
        // under the saturation threshold but never exactly flat.
        const double w = 0.95 + 0.02 * value_noise(spec.seed, 99, u, v, cells2);
        for (int ch = 0; ch < 3; ++ch)
          level.at(r, c, ch) = static_cast<float>(std::clamp(w, 0.0, 1.0));
        continue;
      }
      for (int ch = 0; ch < 3; ++ch) {
        double val = palette[ch];
        val += tx.noise_amplitude * (value_noise(spec.seed, ch, u, v, cells1) +
                                     0.4 * value_noise(spec.seed, 10 + ch, u, v, cells2));
        if (ch == 0) val += 0.5 * tx.hue_ramp * (u - 0.5);
        if (ch == 2) val -= 0.5 * tx.hue_ramp * (u - 0.5);
        val *= 1.0 + tx.lum_ramp * (v - 0.5);
        level.at(r, c, ch) = static_cast<float>(std::clamp(val, 0.0, 1.0));
      }
    }
  }
  level = quantize_u8(level);

  pyramid::PyramidImage img;
  img.levels.resize(spec.levels);
  img.levels[spec.levels - 1] = std::move(level);
  for (int t = spec.levels - 2; t >= 0; --t)
    img.levels[t] = pool2x2(img.levels[t + 1]);
  img.meta.levels = spec.levels;
  img.meta.base_width = img.levels[0].width;
  img.meta.base_height = img.levels[0].height;
  img.meta.channels = 3;
  pyramid::validate(img);
  return img;
}

SynthCohort generate_cohort(const CohortConfig& cfg, const fs::path& root) {
  if (cfg.classes < 2) throw ConfigError("cohort needs at least 2 classes");
  if (cfg.train_patients_per_class < 1 || cfg.test_patients_per_class < 1)
    throw ConfigError("every class needs at least one patient per split");
  if (cfg.slides_per_patient < 1) throw ConfigError("slides_per_patient must be >= 1");

  SynthCohort cohort;
  cohort.root = root;
  int patient_index = 0;
  for (const char* split : {"train", "test"}) {
    const int per_class = split == std::string("train") ? cfg.train_patients_per_class
                                                        : cfg.test_patients_per_class;
    for (int k = 0; k < cfg.classes; ++k) {
      for (int i = 0; i < per_class; ++i) {
        PatientEntry e;
        char buf[16];
        std::snprintf(buf, sizeof buf, "P%03d", patient_index);
        e.patient_id = buf;
        e.class_id = k;
        e.split = split;
        for (int s = 0; s < cfg.slides_per_patient; ++s)
          e.pyramid_paths.push_back(e.patient_id + "/slide_" + std::to_string(s));
        cohort.patients.push_back(std::move(e));
        ++patient_index;
      }
    }
  }

  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("cannot create " + root.string() + ": " + ec.message());

  parallel_for(cohort.patients.size(), cfg.threads, [&](std::size_t pi) {
    const PatientEntry& e = cohort.patients[pi];
    for (std::size_t s = 0; s < e.pyramid_paths.size(); ++s) {
      SynthSpec spec;
      // Per-patient stream: seed XOR patient index, then slide-mixed.
      spec.seed = mix_seed(cfg.seed ^ pi, 0x51edd, s);
      spec.levels = cfg.levels;
      spec.base_size = cfg.base_size;
      spec.class_id = e.class_id;
      spec.num_classes = cfg.classes;
      spec.texture = cfg.texture;
      spec.patient_id = e.patient_id;
      spec.memory_budget_mb = cfg.memory_budget_mb;
      pyramid::write_pyramid(generate_pyramid(spec), root / e.pyramid_paths[s]);
    }
  });

  write_cohort_manifest(cohort);
  return cohort;
}

void write_cohort_manifest(const SynthCohort& cohort) {
  json records = json::array();
  for (const PatientEntry& e : cohort.patients)
    for (const std::string& p : e.pyramid_paths)
      records.push_back({{"patient_id", e.patient_id},
                         {"class_id", e.class_id},
                         {"split", e.split},
                         {"pyramid_path", p}});
  std::ofstream out(cohort.root / "cohort.json");
  if (!out) throw IoError("cannot write cohort manifest");
  out << records.dump(2) << "\n";
}

SynthCohort read_cohort(const fs::path& root) {
  std::ifstream in(root / "cohort.json");
  if (!in) throw IoError("missing cohort manifest: " + (root / "cohort.json").string());
  json records;
  try {
    in >> records;
  } catch (const json::exception& e) {
    throw FormatError("unparseable cohort manifest: " + std::string(e.what()));
  }
  SynthCohort cohort;
  cohort.root = root;
  std::map<std::string, std::size_t> index;
  for (const json& rec : records) {
    const std::string pid = rec.at("patient_id").get<std::string>();
    auto it = index.find(pid);
    if (it == index.end()) {
      PatientEntry e;
      e.patient_id = pid;
      e.class_id = rec.at("class_id").get<int>();
      e.split = rec.at("split").get<std::string>();
      index.emplace(pid, cohort.patients.size());
      cohort.patients.push_back(std::move(e));
      it = index.find(pid);
    } else {
      const PatientEntry& e = cohort.patients[it->second];
      if (e.split != rec.at("split").get<std::string>())
        throw FormatError("patient " + pid + " appears in both splits");
      if (e.class_id != rec.at("class_id").get<int>())
        throw FormatError("patient " + pid + " has inconsistent class labels");
    }
    cohort.patients[it->second].pyramid_paths.push_back(
        rec.at("pyramid_path").get<std::string>());
  }
  return cohort;
}

}  // namespace zoomloc::synth
