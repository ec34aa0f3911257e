#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "zoomloc/common/error.hpp"
#include "zoomloc/downstream/downstream.hpp"
#include "zoomloc/model/model.hpp"
#include "zoomloc/synth/synth.hpp"

using namespace zoomloc;
using namespace zoomloc::downstream;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Single-level in-memory pyramid filled with one constant value.
pyramid::PyramidImage flat_pyramid(int side, float value) {
  pyramid::PyramidImage img;
  Image level(side, side, 3);
  std::fill(level.data.begin(), level.data.end(), value);
  img.levels.push_back(std::move(level));
  img.meta.levels = 1;
  img.meta.base_width = side;
  img.meta.base_height = side;
  return img;
}

// Cohort on disk shared by the tiling tests; generating pyramids dominates
// the suite's runtime, so build it once.
struct CohortFixture {
  fs::path dir;
  synth::SynthCohort cohort;

  CohortFixture() {
    dir = fs::temp_directory_path() / "zoomloc_downstream_test";
    fs::remove_all(dir);
    synth::CohortConfig cc;
    cc.seed = 11;
    cc.classes = 3;
    cc.train_patients_per_class = 3;
    cc.test_patients_per_class = 1;
    cc.levels = 3;
    cc.base_size = 32;  // top level 128x128
    synth::generate_cohort(cc, dir);
    cohort = synth::read_cohort(dir);
  }
  ~CohortFixture() { fs::remove_all(dir); }
};

CohortFixture& fixture() {
  static CohortFixture f;
  return f;
}

TileConfig small_tiles() {
  TileConfig cfg;
  cfg.tile = 16;
  cfg.input_size = 8;
  cfg.white_reject = 1.0;  // keep everything; counts stay predictable
  cfg.region_frac = 0.5;
  cfg.seed = 3;
  cfg.threads = 1;
  return cfg;
}

}  // namespace

TEST_CASE("tile_region grid count and stored shape") {
  const auto img = flat_pyramid(64, 0.5f);
  TileConfig cfg;
  cfg.tile = 8;
  cfg.input_size = 4;
  cfg.white_reject = 1.0;
  const auto tiles = tile_region(img, 0, 0, 16, 16, cfg);
  CHECK(tiles.size() == 4);
  for (const Image& t : tiles) {
    CHECK(t.height == 4);
    CHECK(t.width == 4);
    CHECK(t.channels == 3);
  }
  // Partial tiles at the ragged edge are skipped, not padded.
  CHECK(tile_region(img, 0, 0, 20, 9, cfg).size() == 2);
}

TEST_CASE("tile_region rejects a fully white region") {
  const auto img = flat_pyramid(64, 1.0f);
  TileConfig cfg;
  cfg.tile = 8;
  cfg.input_size = 4;
  cfg.white_reject = 0.5;
  CHECK_THROWS_AS(tile_region(img, 0, 0, 32, 32, cfg), EmptyRegion);
  // With the filter effectively off the same region tiles fine.
  cfg.white_reject = 1.0;
  CHECK(tile_region(img, 0, 0, 32, 32, cfg).size() == 16);
}

TEST_CASE("tile_region bounds checking") {
  const auto img = flat_pyramid(64, 0.5f);
  TileConfig cfg = small_tiles();
  CHECK_THROWS_AS(tile_region(img, -1, 0, 16, 16, cfg), OutOfBounds);
  CHECK_THROWS_AS(tile_region(img, 0, 60, 16, 16, cfg), OutOfBounds);
  CHECK_THROWS_AS(tile_region(img, 0, 0, 0, 16, cfg), OutOfBounds);
}

TEST_CASE("tile_rois balances classes and excludes test patients") {
  const auto& f = fixture();
  const auto set = tile_rois(f.cohort, small_tiles());
  CHECK(set.classes == 3);
  CHECK(!set.train.empty());
  CHECK(!set.val.empty());

  std::map<int, std::size_t> per_class;
  std::set<std::string> seen_patients;
  for (const auto& p : set.train) {
    ++per_class[p.label];
    seen_patients.insert(p.patient_id);
  }
  for (const auto& p : set.val) {
    ++per_class[p.label];
    seen_patients.insert(p.patient_id);
  }
  REQUIRE(per_class.size() == 3);
  CHECK(per_class[0] == per_class[1]);
  CHECK(per_class[1] == per_class[2]);

  for (const auto& patient : f.cohort.patients)
    if (patient.split == "test")
      CHECK(seen_patients.count(patient.patient_id) == 0);
}

TEST_CASE("patient-disjoint split never straddles a patient") {
  const auto& f = fixture();
  const auto set = tile_rois(f.cohort, small_tiles());
  std::set<std::string> train_patients, val_patients;
  for (const auto& p : set.train) train_patients.insert(p.patient_id);
  for (const auto& p : set.val) val_patients.insert(p.patient_id);
  CHECK(!val_patients.empty());
  for (const auto& id : val_patients) CHECK(train_patients.count(id) == 0);
}

TEST_CASE("patch-random split hits the requested fraction") {
  const auto& f = fixture();
  TileConfig cfg = small_tiles();
  cfg.patient_disjoint = false;
  const auto set = tile_rois(f.cohort, cfg);
  const auto total = set.train.size() + set.val.size();
  const auto expected = std::llround(0.15 * static_cast<double>(total));
  CHECK(std::llabs(static_cast<long long>(set.val.size()) - expected) <= 1);
}

TEST_CASE("tile_rois is deterministic across thread counts") {
  const auto& f = fixture();
  TileConfig a = small_tiles();
  TileConfig b = small_tiles();
  b.threads = 4;
  const auto sa = tile_rois(f.cohort, a);
  const auto sb = tile_rois(f.cohort, b);
  REQUIRE(sa.train.size() == sb.train.size());
  REQUIRE(sa.val.size() == sb.val.size());
  for (std::size_t i = 0; i < sa.train.size(); ++i) {
    CHECK(sa.train[i].patient_id == sb.train[i].patient_id);
    CHECK(sa.train[i].label == sb.train[i].label);
    CHECK(sa.train[i].image.data == sb.train[i].image.data);
  }
}

TEST_CASE("single train patient per class cannot split patient-disjoint") {
  const fs::path dir = fs::temp_directory_path() / "zoomloc_single_patient";
  fs::remove_all(dir);
  synth::CohortConfig cc;
  cc.seed = 2;
  cc.classes = 2;
  cc.train_patients_per_class = 1;
  cc.test_patients_per_class = 1;
  cc.levels = 3;
  cc.base_size = 32;
  synth::generate_cohort(cc, dir);
  const auto cohort = synth::read_cohort(dir);
  CHECK_THROWS_AS(tile_rois(cohort, small_tiles()), ConfigError);
  TileConfig cfg = small_tiles();
  cfg.patient_disjoint = false;
  CHECK_NOTHROW(tile_rois(cohort, cfg));
  fs::remove_all(dir);
}

TEST_CASE("label_fraction_subset keeps per-class proportions") {
  std::vector<train::LabeledPatch> set;
  for (int i = 0; i < 300; ++i) {
    train::LabeledPatch p;
    p.label = i % 3;
    p.patient_id = "P" + std::to_string(i);
    p.image = Image(2, 2, 3);
    set.push_back(std::move(p));
  }
  const auto sub = label_fraction_subset(set, 0.33, 17);
  CHECK(sub.size() == 99);
  std::map<int, int> per_class;
  for (const auto& p : sub) ++per_class[p.label];
  for (int k = 0; k < 3; ++k) CHECK(per_class[k] == 33);

  // Original order is preserved within the subset.
  for (std::size_t i = 1; i < sub.size(); ++i)
    CHECK(std::stoi(sub[i - 1].patient_id.substr(1)) <
          std::stoi(sub[i].patient_id.substr(1)));

  const auto all = label_fraction_subset(set, 1.0, 17);
  CHECK(all.size() == set.size());
  for (std::size_t i = 0; i < all.size(); ++i)
    CHECK(all[i].patient_id == set[i].patient_id);

  // Tiny classes keep at least one patch.
  std::vector<train::LabeledPatch> tiny(set.begin(), set.begin() + 3);
  CHECK(label_fraction_subset(tiny, 0.1, 0).size() == 3);

  CHECK_THROWS_AS(label_fraction_subset(set, 0.0, 0), FractionOutOfRange);
  CHECK_THROWS_AS(label_fraction_subset(set, 1.2, 0), FractionOutOfRange);
  CHECK_THROWS_AS(label_fraction_subset(set, -0.5, 0), FractionOutOfRange);
}

TEST_CASE("vote follows plurality") {
  const std::vector<std::vector<double>> probs = {
      {0.9, 0.1}, {0.8, 0.2}, {0.3, 0.7}};
  const auto v = vote(probs);
  CHECK(v.label == 0);
  CHECK(v.votes == std::vector<long>{2, 1});
  CHECK(v.margin == 1);
}

TEST_CASE("vote ties break on probability mass") {
  // One patch each way; class 1 holds more total mass.
  const auto a = vote({{0.9, 0.1}, {0.01, 0.99}});
  CHECK(a.label == 1);
  CHECK(a.margin == 0);
  // Mirrored mass flips the winner.
  const auto b = vote({{0.99, 0.01}, {0.1, 0.9}});
  CHECK(b.label == 0);
}

TEST_CASE("vote exact mass tie falls back to the lower index") {
  const auto v = vote({{0.8, 0.2, 0.0}, {0.2, 0.8, 0.0}});
  CHECK(v.votes == std::vector<long>{1, 1, 0});
  CHECK(v.label == 0);
}

TEST_CASE("vote on a single patch") {
  const auto v = vote({{0.2, 0.5, 0.3}});
  CHECK(v.label == 1);
  CHECK(v.votes == std::vector<long>{0, 1, 0});
  CHECK(v.margin == 1);
}

TEST_CASE("vote is invariant to patch order") {
  std::vector<std::vector<double>> probs = {
      {0.6, 0.4}, {0.2, 0.8}, {0.7, 0.3}, {0.1, 0.9}, {0.55, 0.45}};
  const auto base = vote(probs);
  std::sort(probs.begin(), probs.end());
  do {
    const auto v = vote(probs);
    CHECK(v.label == base.label);
    CHECK(v.votes == base.votes);
    CHECK(v.margin == base.margin);
  } while (std::next_permutation(probs.begin(), probs.end()));
}

TEST_CASE("vote rejects empty and ragged input") {
  CHECK_THROWS_AS(vote({}), NoPatches);
  CHECK_THROWS_AS(vote({{0.5, 0.5}, {1.0}}), ShapeMismatch);
}

TEST_CASE("predictions csv format") {
  std::vector<PatientPrediction> preds(2);
  preds[0] = {"patient_07", 2, 2, {1, 0, 5, 2}, 3};
  preds[1] = {"patient_11", 0, 1, {3, 4, 0, 0}, 1};
  const fs::path path = fs::temp_directory_path() / "zoomloc_preds.csv";
  write_predictions_csv(path, preds);
  CHECK(slurp(path) ==
        "patient_id,true,pred,votes_per_class,margin\n"
        "patient_07,2,2,1|0|5|2,3\n"
        "patient_11,0,1,3|4|0|0,1\n");
  fs::remove(path);
}

TEST_CASE("classify_patches handles odd batch tails and untrained voting") {
  model::ClassifierConfig mc;
  mc.encoder = {{{4, 1}, {6, 1}}, 6};
  mc.classes = 3;
  mc.input_size = 8;
  mc.batch = 4;
  mc.seed = 21;
  auto m = model::build_classifier<float>(mc);

  std::vector<Image> patches;
  Rng rng(99);
  for (int i = 0; i < 7; ++i) {
    Image p(8, 8, 3);
    for (float& v : p.data) v = static_cast<float>(rng.uniform());
    patches.push_back(std::move(p));
  }
  const auto probs = classify_patches(m, patches, 1);
  REQUIRE(probs.size() == 7);
  for (const auto& row : probs) {
    REQUIRE(row.size() == 3);
    double sum = 0.0;
    for (double v : row) {
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
  // Batched evaluation matches one-at-a-time evaluation.
  for (int i = 0; i < 7; ++i) {
    const auto solo = classify_patches(m, {patches[i]}, 1);
    for (int c = 0; c < 3; ++c)
      CHECK(solo[0][c] == doctest::Approx(probs[i][c]).epsilon(1e-6));
  }

  CHECK_THROWS_AS(classify_patches(m, {}, 1), NoPatches);
  CHECK_THROWS_AS(classify_patches(m, {Image(4, 4, 3)}, 1), ShapeMismatch);
}

TEST_CASE("predict_cohort votes over every tile of every test slide") {
  const auto& f = fixture();
  model::ClassifierConfig mc;
  mc.encoder = {{{4, 1}, {6, 1}}, 6};
  mc.classes = 3;
  mc.input_size = 8;
  mc.batch = 8;
  mc.seed = 5;
  auto m = model::build_classifier<float>(mc);

  const TileConfig cfg = small_tiles();
  const auto preds = predict_cohort(m, f.cohort, cfg, 1);

  std::vector<std::string> test_ids;
  for (const auto& p : f.cohort.patients)
    if (p.split == "test") test_ids.push_back(p.patient_id);
  REQUIRE(preds.size() == test_ids.size());

  for (std::size_t i = 0; i < preds.size(); ++i) {
    CHECK(preds[i].patient_id == test_ids[i]);
    CHECK(preds[i].votes.size() == 3);
    long total = 0;
    for (long v : preds[i].votes) total += v;
    // 128x128 top level tiled at 16 with the filter off: 64 tiles per slide.
    CHECK(total == 64);
    CHECK(preds[i].predicted >= 0);
    CHECK(preds[i].predicted < 3);
  }

  // predict_patient agrees with the cohort-level path.
  const synth::PatientEntry* first_test = nullptr;
  for (const auto& p : f.cohort.patients)
    if (p.split == "test") {
      first_test = &p;
      break;
    }
  REQUIRE(first_test != nullptr);
  const auto solo = predict_patient(m, f.cohort.root, *first_test, cfg, 1);
  CHECK(solo.patient_id == preds[0].patient_id);
  CHECK(solo.predicted == preds[0].predicted);
  CHECK(solo.votes == preds[0].votes);
}
