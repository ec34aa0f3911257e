#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "zoomloc/common/error.hpp"
#include "zoomloc/pyramid/pyramid.hpp"
#include "zoomloc/synth/synth.hpp"

using namespace zoomloc;
using namespace zoomloc::synth;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("zoomloc_synth_" + name);
  fs::remove_all(dir);
  return dir;
}

SynthSpec desk_spec(std::uint64_t seed, int class_id = 0) {
  SynthSpec spec;
  spec.seed = seed;
  spec.levels = 4;
  spec.base_size = 32;
  spec.class_id = class_id;
  return spec;
}

}  // namespace

TEST_CASE("generate_pyramid is deterministic in the seed") {
  const auto a = generate_pyramid(desk_spec(77));
  const auto b = generate_pyramid(desk_spec(77));
  REQUIRE(a.levels.size() == b.levels.size());
  for (std::size_t t = 0; t < a.levels.size(); ++t)
    CHECK(a.levels[t].data == b.levels[t].data);

  const auto c = generate_pyramid(desk_spec(78));
  CHECK(a.levels.back().data != c.levels.back().data);
}

TEST_CASE("generated levels double in size") {
  const auto img = generate_pyramid(desk_spec(5));
  REQUIRE(img.levels.size() == 4);
  for (int t = 0; t + 1 < 4; ++t) {
    CHECK(img.level(t + 1).width == 2 * img.level(t).width);
    CHECK(img.level(t + 1).height == 2 * img.level(t).height);
  }
  CHECK(img.level(0).width == 32);
}

TEST_CASE("every level is the exact average pool of the one above") {
  const auto img = generate_pyramid(desk_spec(9));
  for (int t = 0; t + 1 < static_cast<int>(img.levels.size()); ++t) {
    const Image pooled = pool2x2(img.level(t + 1));
    CHECK(pooled.data == img.level(t).data);
  }
}

TEST_CASE("all generated pixels stay in the unit interval") {
  const auto img = generate_pyramid(desk_spec(13));
  for (const Image& level : img.levels)
    for (float v : level.data) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
}

TEST_CASE("classes are separable by channel means") {
  const int K = 4;
  std::array<std::array<double, 3>, 4> means{};
  for (int k = 0; k < K; ++k) {
    SynthSpec spec = desk_spec(123, k);
    spec.num_classes = K;
    const auto img = generate_pyramid(spec);
    const Image& base = img.level(0);
    for (int ch = 0; ch < 3; ++ch) {
      double sum = 0;
      for (int r = 0; r < base.height; ++r)
        for (int c = 0; c < base.width; ++c) sum += base.at(r, c, ch);
      means[k][ch] = sum / (base.height * base.width);
    }
  }
  const double margin = 0.5 * TextureParams{}.class_palette_step;
  for (int a = 0; a < K; ++a) {
    for (int b = a + 1; b < K; ++b) {
      double linf = 0;
      for (int ch = 0; ch < 3; ++ch)
        linf = std::max(linf, std::abs(means[a][ch] - means[b][ch]));
      CHECK(linf >= margin);
    }
  }
}

TEST_CASE("white regions exist but do not dominate") {
  const auto img = generate_pyramid(desk_spec(31));
  const double frac = whiteness(img.levels.back());
  CHECK(frac > 0.005);
  CHECK(frac < 0.5);
}

TEST_CASE("oversized pyramids are rejected up front") {
  SynthSpec spec = desk_spec(1);
  spec.levels = 8;
  spec.base_size = 512;
  spec.memory_budget_mb = 64;
  CHECK_THROWS_AS(generate_pyramid(spec), BudgetExceeded);
}

TEST_CASE("degenerate specs are config errors") {
  SynthSpec two_levels = desk_spec(1);
  two_levels.levels = 2;
  CHECK_THROWS_AS(generate_pyramid(two_levels), ConfigError);

  SynthSpec one_class = desk_spec(1);
  one_class.num_classes = 1;
  CHECK_THROWS_AS(generate_pyramid(one_class), ConfigError);
}

TEST_CASE("cohort generation honors configured counts") {
  const fs::path root = temp_dir("counts");
  CohortConfig cfg;
  cfg.seed = 7;
  cfg.classes = 4;
  cfg.train_patients_per_class = 3;
  cfg.test_patients_per_class = 2;
  cfg.levels = 3;
  cfg.base_size = 16;
  const SynthCohort cohort = generate_cohort(cfg, root);

  CHECK(cohort.patients.size() == 20);
  int train = 0, test = 0;
  std::array<std::array<int, 2>, 4> per_class{};
  for (const PatientEntry& e : cohort.patients) {
    (e.split == "train" ? train : test) += 1;
    per_class[e.class_id][e.split == "train" ? 0 : 1] += 1;
    REQUIRE(e.pyramid_paths.size() == 1);
    CHECK(fs::exists(root / e.pyramid_paths[0] / "manifest.json"));
  }
  CHECK(train == 12);
  CHECK(test == 8);
  for (int k = 0; k < 4; ++k) {
    CHECK(per_class[k][0] == 3);
    CHECK(per_class[k][1] == 2);
  }
  fs::remove_all(root);
}

TEST_CASE("cohort manifests round-trip through read_cohort") {
  const fs::path root = temp_dir("roundtrip");
  CohortConfig cfg;
  cfg.seed = 11;
  cfg.classes = 2;
  cfg.train_patients_per_class = 1;
  cfg.test_patients_per_class = 1;
  cfg.slides_per_patient = 2;
  cfg.levels = 3;
  cfg.base_size = 16;
  const SynthCohort made = generate_cohort(cfg, root);
  const SynthCohort read = read_cohort(root);

  REQUIRE(read.patients.size() == made.patients.size());
  for (std::size_t i = 0; i < made.patients.size(); ++i) {
    CHECK(read.patients[i].patient_id == made.patients[i].patient_id);
    CHECK(read.patients[i].class_id == made.patients[i].class_id);
    CHECK(read.patients[i].split == made.patients[i].split);
    CHECK(read.patients[i].pyramid_paths == made.patients[i].pyramid_paths);
  }
  for (const PatientEntry& e : read.patients)
    for (const std::string& rel : e.pyramid_paths)
      CHECK_NOTHROW(pyramid::read_pyramid(root / rel));
  fs::remove_all(root);
}

TEST_CASE("cohort generation is reproducible across runs and thread counts") {
  CohortConfig cfg;
  cfg.seed = 13;
  cfg.classes = 2;
  cfg.train_patients_per_class = 2;
  cfg.test_patients_per_class = 1;
  cfg.levels = 3;
  cfg.base_size = 16;

  const fs::path a = temp_dir("reproa");
  const fs::path b = temp_dir("reprob");
  cfg.threads = 1;
  generate_cohort(cfg, a);
  cfg.threads = 4;
  generate_cohort(cfg, b);

  for (const PatientEntry& e : read_cohort(a).patients) {
    for (const std::string& rel : e.pyramid_paths) {
      const auto pa = pyramid::read_pyramid(a / rel);
      const auto pb = pyramid::read_pyramid(b / rel);
      REQUIRE(pa.levels.size() == pb.levels.size());
      for (std::size_t t = 0; t < pa.levels.size(); ++t)
        CHECK(pa.levels[t].data == pb.levels[t].data);
    }
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("patients differ from one another within a class") {
  const fs::path root = temp_dir("variety");
  CohortConfig cfg;
  cfg.seed = 17;
  cfg.classes = 2;
  cfg.train_patients_per_class = 2;
  cfg.test_patients_per_class = 1;
  cfg.levels = 3;
  cfg.base_size = 16;
  const SynthCohort cohort = generate_cohort(cfg, root);
  const auto p0 = pyramid::read_pyramid(root / cohort.patients[0].pyramid_paths[0]);
  const auto p1 = pyramid::read_pyramid(root / cohort.patients[1].pyramid_paths[0]);
  CHECK(p0.levels.back().data != p1.levels.back().data);
  fs::remove_all(root);
}

TEST_CASE("empty splits are config errors") {
  CohortConfig cfg;
  cfg.classes = 4;
  cfg.train_patients_per_class = 3;
  cfg.test_patients_per_class = 0;
  CHECK_THROWS_AS(generate_cohort(cfg, temp_dir("badcfg")), ConfigError);
  cfg.test_patients_per_class = 2;
  cfg.classes = 1;
  CHECK_THROWS_AS(generate_cohort(cfg, temp_dir("badcfg")), ConfigError);
}

TEST_CASE("read_cohort rejects a patient listed in both splits") {
  const fs::path root = temp_dir("bothsplits");
  fs::create_directories(root);
  nlohmann::json records = nlohmann::json::array();
  records.push_back({{"patient_id", "P000"}, {"class_id", 0},
                     {"split", "train"}, {"pyramid_path", "P000/slide_0"}});
  records.push_back({{"patient_id", "P000"}, {"class_id", 0},
                     {"split", "test"}, {"pyramid_path", "P000/slide_1"}});
  std::ofstream(root / "cohort.json") << records.dump();
  CHECK_THROWS_AS(read_cohort(root), FormatError);
  fs::remove_all(root);
}

TEST_CASE("read_cohort reports missing and broken manifests") {
  CHECK_THROWS_AS(read_cohort(temp_dir("absent")), IoError);
  const fs::path root = temp_dir("garbled");
  fs::create_directories(root);
  std::ofstream(root / "cohort.json") << "not json";
  CHECK_THROWS_AS(read_cohort(root), FormatError);
  fs::remove_all(root);
}
