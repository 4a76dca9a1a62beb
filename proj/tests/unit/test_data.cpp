#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <set>

#include "simvae/corpus.hpp"
#include "simvae/losses.hpp"
#include "simvae/seed.hpp"
#include "simvae/volume.hpp"

using namespace simvae;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("simvae_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

CorpusSpec identity_spec() {
  CorpusSpec spec;
  spec.dims = {16, 18, 14};
  spec.ranges.translation = {Range{-3, 3}, Range{-3, 3}, Range{-3, 3}};
  spec.ranges.rotation = {Range{0, 0}, Range{0, 0}, Range{0, 0}};
  spec.ranges.scale = {Range{1, 1}, Range{1, 1}, Range{1, 1}};
  spec.ranges.gain = {1, 1};
  spec.ranges.noise = {0, 0};
  return spec;
}

double masked_mean(const Volume& v, const Volume& mask) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (mask.voxels[i] > 0.5f) {
      s += v.voxels[i];
      ++n;
    }
  }
  return s / static_cast<double>(n);
}

}  // namespace

TEST_SUITE("volume io") {
  TEST_CASE("round trip is bitwise") {
    auto dir = scratch("roundtrip");
    Volume v(5, 4, 3);
    std::mt19937_64 rng(1);
    std::normal_distribution<float> n(0.f, 10.f);
    for (auto& x : v.voxels) x = n(rng);
    v.voxels[3] = -0.0f;
    v.spacing = {1.5, 2.0, 2.5};
    v.provenance = "unit test";
    save_volume(v, dir / "a.vol");
    Volume back = load_volume(dir / "a.vol");
    CHECK(back.dims == v.dims);
    CHECK(back.spacing == v.spacing);
    CHECK(back.provenance == "unit test");
    CHECK(std::memcmp(back.voxels.data(), v.voxels.data(), v.size() * sizeof(float)) == 0);
  }

  TEST_CASE("truncated payload names expected and actual byte counts") {
    auto dir = scratch("truncated");
    Volume v(2, 2, 2, 1.0f);
    save_volume(v, dir / "t.vol");
    fs::resize_file(dir / "t.vol", 30);
    try {
      load_volume(dir / "t.vol");
      FAIL("expected VolumeFormatError");
    } catch (const VolumeFormatError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("32") != std::string::npos);
      CHECK(msg.find("30") != std::string::npos);
    }
  }

  TEST_CASE("2x2x2 golden layout: little-endian float32, x fastest") {
    auto dir = scratch("golden");
    Volume v(2, 2, 2);
    for (std::size_t i = 0; i < 8; ++i) v.voxels[i] = static_cast<float>(i) + 0.5f;
    v.at(1, 0, 1) = -2.0f;  // index (1*2+0)*2+1 = 5
    save_volume(v, dir / "g.vol");
    const std::string bytes = slurp(dir / "g.vol");
    const unsigned char expected[32] = {
        0x00, 0x00, 0x00, 0x3f,  // 0.5
        0x00, 0x00, 0xc0, 0x3f,  // 1.5
        0x00, 0x00, 0x20, 0x40,  // 2.5
        0x00, 0x00, 0x60, 0x40,  // 3.5
        0x00, 0x00, 0x90, 0x40,  // 4.5
        0x00, 0x00, 0x00, 0xc0,  // -2.0 at (x=1, y=0, z=1)
        0x00, 0x00, 0xd0, 0x40,  // 6.5
        0x00, 0x00, 0xf0, 0x40,  // 7.5
    };
    REQUIRE(bytes.size() == 32);
    CHECK(std::memcmp(bytes.data(), expected, 32) == 0);
    auto header = read_json_file(sidecar_path(dir / "g.vol"));
    CHECK(header["dims"] == Json::array({2, 2, 2}));
    CHECK(header["order"] == "x-fastest");
    CHECK(header["byte_order"] == "little");
  }

  TEST_CASE("header with non-positive dims is rejected") {
    auto dir = scratch("baddims");
    save_volume(Volume(2, 2, 2), dir / "b.vol");
    auto header = read_json_file(sidecar_path(dir / "b.vol"));
    header["dims"] = Json::array({0, 2, 2});
    std::ofstream(sidecar_path(dir / "b.vol")) << header.dump();
    CHECK_THROWS_AS(load_volume(dir / "b.vol"), VolumeFormatError);
  }
}

TEST_SUITE("normalize_intensity") {
  Volume ramp() {
    Volume v(10, 10, 2, 1.0f);
    v.voxels[0] = 0.0f;
    v.voxels[1] = 0.5f;
    v.voxels[2] = 0.25f;
    return v;
  }

  TEST_CASE("endpoints are fixed for any gamma") {
    for (double g : {0.0, 0.3, 1.0, 4.0}) {
      Volume n = normalize_intensity(ramp(), g);
      CHECK(n.voxels[0] == 0.0f);
      CHECK(n.voxels[5] == 1.0f);
    }
  }

  TEST_CASE("gamma = 1 maps 0.5 to (e^0.5 - 1)/(e - 1)") {
    Volume n = normalize_intensity(ramp(), 1.0);
    CHECK(n.voxels[1] == doctest::Approx(0.3775406687981455).epsilon(1e-7));
  }

  TEST_CASE("gamma -> 0 approaches the identity") {
    Volume n = normalize_intensity(ramp(), 1e-9);
    CHECK(n.voxels[1] == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(n.voxels[2] == doctest::Approx(0.25).epsilon(1e-6));
  }

  TEST_CASE("divides by the 99th percentile and clips") {
    Volume v(100, 1, 1);
    for (std::size_t i = 0; i < 100; ++i) v.voxels[i] = static_cast<float>(i);
    const double p99 = 98.01;  // linear interpolation between 98 and 99
    CHECK(percentile(v.voxels, 99.0) == doctest::Approx(p99));
    Volume n = normalize_intensity(v, 0.0);
    CHECK(n.voxels[50] == doctest::Approx(50.0 / p99).epsilon(1e-6));
    CHECK(n.voxels[99] == 1.0f);
  }

  TEST_CASE("property: monotone and bounded") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<float> u(-2.f, 40.f);
    for (int t = 0; t < 20; ++t) {
      Volume v(7, 5, 3);
      for (auto& x : v.voxels) x = u(rng);
      const double gamma = 0.1 * t;
      Volume n = normalize_intensity(v, gamma);
      for (std::size_t i = 0; i < v.size(); ++i) {
        CHECK(n.voxels[i] >= 0.0f);
        CHECK(n.voxels[i] <= 1.0f);
        for (std::size_t j = 0; j < v.size(); j += 7) {
          if (v.voxels[i] <= v.voxels[j]) CHECK(n.voxels[i] <= n.voxels[j]);
        }
      }
    }
  }

  TEST_CASE("constant volume is rejected") {
    CHECK_THROWS_AS(normalize_intensity(Volume(3, 3, 3, 2.0f)), std::invalid_argument);
  }
}

TEST_SUITE("phantom") {
  TEST_CASE("null factors give the pristine canonical phantom") {
    const auto spec = identity_spec();
    GenerativeFactors f;
    Volume v = generate_phantom(spec, f);
    Volume base = canonical_phantom(spec, 0.0);
    CHECK(v.voxels == base.voxels);
    // Something brain-like is there.
    CHECK(*std::max_element(v.voxels.begin(), v.voxels.end()) > 0.9f);
    CHECK(v.voxels[0] == 0.0f);
  }

  TEST_CASE("maximal score scales decrease ROIs by exactly 1 - c") {
    const auto spec = identity_spec();
    GenerativeFactors healthy, severe;
    severe.score = spec.score_max;
    Volume a = generate_phantom(spec, healthy), b = generate_phantom(spec, severe);
    for (const auto& roi : spec.rois) {
      Volume mask = roi_mask(spec, roi);
      const double ratio = masked_mean(b, mask) / masked_mean(a, mask);
      INFO(roi.name);
      if (roi.effect == Effect::decrease) CHECK(ratio == doctest::Approx(1.0 - roi.strength).epsilon(1e-6));
      if (roi.effect == Effect::increase) CHECK(ratio == doctest::Approx(1.0 + roi.strength).epsilon(1e-6));
      if (roi.effect == Effect::neutral) CHECK(ratio == 1.0);
    }
  }

  TEST_CASE("integer translation shifts the baseline exactly") {
    const auto spec = identity_spec();
    GenerativeFactors f;
    f.translation = {2, 0, 0};
    Volume shifted = generate_phantom(spec, f);
    Volume base = generate_phantom(spec, GenerativeFactors{});
    for (std::size_t z = 0; z < spec.dims[2]; ++z)
      for (std::size_t y = 0; y < spec.dims[1]; ++y)
        for (std::size_t x = 2; x < spec.dims[0]; ++x) CHECK(shifted.at(x, y, z) == base.at(x - 2, y, z));
  }

  TEST_CASE("out-of-range factors are rejected") {
    const auto spec = identity_spec();
    GenerativeFactors f;
    f.score = 90.0;
    CHECK_THROWS_AS(generate_phantom(spec, f), std::invalid_argument);
    f.score = 10.0;
    f.translation[1] = 3.5;
    CHECK_THROWS_AS(generate_phantom(spec, f), std::invalid_argument);
  }

  TEST_CASE("noise is deterministic given the seed") {
    CorpusSpec spec;
    spec.dims = {12, 12, 12};
    auto f = sample_factors(spec, 42);
    CHECK(generate_phantom(spec, f).voxels == generate_phantom(spec, f).voxels);
    auto g = f;
    g.seed = 43;
    CHECK(generate_phantom(spec, f).voxels != generate_phantom(spec, g).voxels);
  }

  TEST_CASE("severity ROI mean tracks the score on noise-free phantoms") {
    CorpusSpec spec;
    spec.dims = {32, 32, 32};
    spec.ranges.noise = {0, 0};
    std::vector<double> scores, means;
    Volume mask(32, 32, 32);
    for (const auto& roi : spec.rois) {
      if (roi.effect != Effect::decrease) continue;
      Volume m = roi_mask(spec, roi);
      for (std::size_t i = 0; i < m.size(); ++i) mask.voxels[i] = std::max(mask.voxels[i], m.voxels[i]);
    }
    for (std::uint64_t s = 0; s < 60; ++s) {
      auto f = sample_factors(spec, 1000 + s);
      Volume v = normalize_intensity(generate_phantom(spec, f));
      Volume warped = apply_geometry(mask, f);
      scores.push_back(f.score);
      means.push_back(masked_mean(v, warped));
    }
    CHECK(std::abs(pearson(scores, means).r) >= 0.95);
  }

  TEST_CASE("spec config rejects unknown keys and bad ROIs") {
    CHECK_THROWS_AS(CorpusSpec::from_json(Json{{"subjetcs", 3}}), ConfigError);
    try {
      CorpusSpec::from_json(Json{{"ranges", {{"gian", {0, 1}}}}});
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(e.key() == "corpus.ranges.gian");
    }
    Json bad_roi = {{"rois", Json::array({{{"name", "x"}, {"center", {0.9, 0, 0}}, {"radii", {0.3, 0.1, 0.1}}}})}};
    CHECK_THROWS_AS(CorpusSpec::from_json(bad_roi), std::invalid_argument);
    auto spec = CorpusSpec::from_json(Json{{"subjects", 12}, {"dims", {8, 8, 8}}});
    CHECK(spec.subjects == 12);
    CHECK(CorpusSpec::from_json(spec.to_json()).to_json() == spec.to_json());
  }
}

TEST_SUITE("corpus") {
  CorpusSpec small_spec() {
    CorpusSpec spec;
    spec.subjects = 10;
    spec.dims = {10, 12, 10};
    spec.seed = 7;
    return spec;
  }

  TEST_CASE("generation is byte-identical across runs and thread counts") {
    auto a = scratch("corpus_a"), b = scratch("corpus_b");
    generate_corpus(small_spec(), a, 1);
    generate_corpus(small_spec(), b, 3);
    CHECK(slurp(a / "manifest.csv") == slurp(b / "manifest.csv"));
    for (const auto& entry : fs::directory_iterator(a / "volumes")) {
      CHECK(slurp(entry.path()) == slurp(b / "volumes" / entry.path().filename()));
    }
  }

  TEST_CASE("diagnosis labels follow the score thresholds") {
    auto dir = scratch("corpus_labels");
    auto spec = small_spec();
    spec.subjects = 40;
    Manifest m = generate_corpus(spec, dir);
    Manifest back = read_manifest(dir / "manifest.csv");
    REQUIRE(back.subjects.size() == 40);
    for (const auto& s : back.subjects) {
      const Diagnosis expected = s.score < 20 ? Diagnosis::HC : (s.score < 40 ? Diagnosis::MCI : Diagnosis::AD);
      CHECK(s.diagnosis == expected);
      REQUIRE(s.factors.has_value());
      CHECK(s.factors->score == s.score);
    }
    CHECK(back.subjects[3].factors->translation == m.subjects[3].factors->translation);
  }

  TEST_CASE("score histogram spans the configured range") {
    CorpusSpec spec;
    std::vector<int> bins(10, 0);
    for (std::uint64_t i = 0; i < 200; ++i) {
      auto f = sample_factors(spec, derive_seed(spec.seed, {i}));
      bins[std::min(9, static_cast<int>(f.score / 8.5))]++;
    }
    for (int b : bins) CHECK(b > 0);
  }

  TEST_CASE("unwritable output directory is reported") {
    auto dir = scratch("corpus_blocked");
    std::ofstream(dir / "file") << "x";
    CHECK_THROWS_AS(generate_corpus(small_spec(), dir / "file" / "sub"), std::runtime_error);
  }

  TEST_CASE("manifest without a required column is rejected") {
    auto dir = scratch("manifest_bad");
    std::ofstream(dir / "m.csv") << "id,score,diagnosis\nsub-0,1,HC\n";
    CHECK_THROWS_AS(read_manifest(dir / "m.csv"), std::runtime_error);
  }

  TEST_CASE("external manifests without factor columns load") {
    auto dir = scratch("manifest_ext");
    fs::create_directories(dir / "v");
    for (int i = 0; i < 3; ++i) {
      Volume v(4, 4, 4);
      for (std::size_t k = 0; k < v.size(); ++k) v.voxels[k] = static_cast<float>(k % 7 + i);
      save_volume(v, dir / "v" / ("s" + std::to_string(i) + ".vol"));
    }
    std::ofstream(dir / "m.csv") << "id,volume_path,score,diagnosis\ns0,v/s0.vol,3,HC\ns1,v/s1.vol,30,MCI\ns2,v/s2.vol,60,AD\n";
    Dataset d = load_dataset(read_manifest(dir / "m.csv"));
    CHECK(d.size() == 3);
    CHECK(d.shape == std::array<std::size_t, 3>{4, 4, 4});
    CHECK_FALSE(d.factors[0].has_value());
    Tensor b = d.batch(std::vector<std::size_t>{2, 0});
    CHECK(b.shape() == Shape{2, 1, 4, 4, 4});
  }
}

TEST_SUITE("split_dataset") {
  std::vector<std::string> ids(std::size_t n) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back("s" + std::to_string(i));
    return out;
  }

  TEST_CASE("100 subjects split 65/15/20") {
    auto s = split_dataset(ids(100), kDefaultSplit, 1);
    CHECK(s.train.size() == 65);
    CHECK(s.val.size() == 15);
    CHECK(s.test.size() == 20);
  }

  TEST_CASE("10 subjects split 7/1/2") {
    auto s = split_dataset(ids(10), kDefaultSplit, 1);
    CHECK(s.train.size() == 7);
    CHECK(s.val.size() == 1);
    CHECK(s.test.size() == 2);
  }

  TEST_CASE("same seed, same split; different seed, different order") {
    auto a = split_dataset(ids(50), kDefaultSplit, 9), b = split_dataset(ids(50), kDefaultSplit, 9),
         c = split_dataset(ids(50), kDefaultSplit, 10);
    CHECK(a.train == b.train);
    CHECK(a.val == b.val);
    CHECK(a.test == b.test);
    CHECK(a.train != c.train);
  }

  TEST_CASE("property: disjoint and exhaustive") {
    for (std::size_t n = 3; n < 80; ++n) {
      auto all = ids(n);
      auto s = split_dataset(all, kDefaultSplit, n);
      std::set<std::string> seen;
      for (auto* part : {&s.train, &s.val, &s.test})
        for (const auto& id : *part) CHECK(seen.insert(id).second);
      CHECK(seen.size() == n);
    }
  }

  TEST_CASE("invalid inputs are rejected") {
    CHECK_THROWS_AS(split_dataset(ids(2), kDefaultSplit, 1), std::invalid_argument);
    CHECK_THROWS_AS(split_dataset(ids(10), {0.5, 0.5, 0.1}, 1), std::invalid_argument);
    CHECK_THROWS_AS(split_dataset(ids(10), {1.0, 0.0, 0.0}, 1), std::invalid_argument);
  }
}
