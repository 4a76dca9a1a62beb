#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>

#include "simvae/dispersion.hpp"
#include "simvae/training.hpp"
#include "test_util.hpp"

using namespace simvae;
using simvae::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.input = {6, 8, 6};
  c.encoder = {{3, 3, 2}, {3, 4, 2}};
  c.hidden = 8;
  c.latent = 3;
  c.decoder_channels = 4;
  c.decoder = {{3, 3, 2}, {3, 1, 2}};
  c.seed = 3;
  return c;
}

Dataset random_dataset(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Dataset d;
  d.shape = {6, 8, 6};
  for (std::size_t i = 0; i < n; ++i) {
    d.ids.push_back("s" + std::to_string(i));
    const double score = 85.0 * u(rng);
    std::vector<double> v(d.voxels());
    for (std::size_t k = 0; k < v.size(); ++k) v[k] = 0.5 * u(rng) + (k % 17 == 0 ? score / 85.0 : 0.0);
    d.volumes.push_back(std::move(v));
    d.scores.push_back(score);
    d.diagnoses.push_back(Diagnosis::HC);
    d.factors.emplace_back();
  }
  return d;
}

HyperParams fast(double beta, double alpha, std::size_t epochs, double lr = 1e-3) {
  HyperParams hp;
  hp.beta = beta;
  hp.alpha = alpha;
  hp.batch_size = 4;
  hp.epochs = epochs;
  hp.seed = 11;
  hp.adam.learning_rate = lr;
  return hp;
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("simvae_test_training_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void check_same_history(const TrainingHistory& a, const TrainingHistory& b) {
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].train.total == b[i].train.total);
    CHECK(a[i].val.total == b[i].val.total);
    CHECK(a[i].val_r == b[i].val_r);
    CHECK(a[i].val_dispersion == b[i].val_dispersion);
  }
}

}  // namespace

TEST_SUITE("adam") {
  TEST_CASE("zero gradients from a fresh state leave parameters unchanged") {
    std::vector<NamedTensor> p{{"w", Tensor({3}, std::vector<double>{1, -2, 3})}};
    auto s = AdamState::fresh(p);
    CHECK(adam_step(p, {Tensor({3})}, s, {}));
    CHECK(p[0].value == Tensor({3}, std::vector<double>{1, -2, 3}));
    CHECK(s.step == 1);
  }

  TEST_CASE("first step with unit gradient moves by lr / (1 + eps)") {
    std::vector<NamedTensor> p{{"w", Tensor({2}, 0.5)}};
    auto s = AdamState::fresh(p);
    AdamOptions o;
    CHECK(o.learning_rate == 2e-5);
    adam_step(p, {Tensor({2}, 1.0)}, s, o);
    const double expected = 0.5 - o.learning_rate * 1.0 / (1.0 + o.epsilon);
    CHECK(p[0].value[0] == doctest::Approx(expected).epsilon(1e-15));
  }

  TEST_CASE("two steps match the hand-evaluated bias-corrected formula") {
    std::vector<NamedTensor> p{{"w", Tensor({1}, 0.0)}};
    auto s = AdamState::fresh(p);
    AdamOptions o{0.1, 0.9, 0.999, 1e-8};
    adam_step(p, {Tensor({1}, 2.0)}, s, o);
    adam_step(p, {Tensor({1}, -1.0)}, s, o);
    double w = 0.0, m = 0.0, v = 0.0;
    const double g[2] = {2.0, -1.0};
    for (int t = 1; t <= 2; ++t) {
      m = 0.9 * m + 0.1 * g[t - 1];
      v = 0.999 * v + 0.001 * g[t - 1] * g[t - 1];
      w -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    }
    CHECK(p[0].value[0] == doctest::Approx(w).epsilon(1e-14));
  }

  TEST_CASE("non-finite gradient skips the step") {
    std::vector<NamedTensor> p{{"a", Tensor({2}, 1.0)}, {"b", Tensor({1}, 1.0)}};
    auto s = AdamState::fresh(p);
    Tensor bad({1}, std::numeric_limits<double>::quiet_NaN());
    CHECK_FALSE(adam_step(p, {Tensor({2}, 1.0), bad}, s, {}));
    CHECK(p[0].value == Tensor({2}, 1.0));
    CHECK(s.step == 0);
    CHECK(s.skipped == 1);
  }
}

TEST_SUITE("hyperparameters") {
  TEST_CASE("defaults are the paper operating point") {
    HyperParams hp;
    CHECK(hp.beta == 1e-4);
    CHECK(hp.alpha == 1e-4);
    CHECK(hp.batch_size == 8);
    CHECK(hp.adam.learning_rate == 2e-5);
    CHECK_NOTHROW(hp.validate());
  }

  TEST_CASE("invalid values and unknown keys are rejected") {
    CHECK_THROWS_AS(HyperParams::from_json(Json{{"learning_rate", 0.0}}), ConfigError);
    CHECK_THROWS_AS(HyperParams::from_json(Json{{"epochs", 0}}), ConfigError);
    CHECK_THROWS_AS(HyperParams::from_json(Json{{"alpha", 1.0}, {"batch_size", 2}}), ConfigError);
    CHECK_NOTHROW(HyperParams::from_json(Json{{"alpha", 0.0}, {"batch_size", 2}}));
    CHECK_THROWS_AS(HyperParams::from_json(Json{{"beta", -1.0}}), ConfigError);
    CHECK_THROWS_AS(HyperParams::from_json(Json{{"similarity", "cosine"}}), ConfigError);
    try {
      HyperParams::from_json(Json{{"lr", 1e-3}});
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(e.key() == "training.lr");
    }
    auto hp = fast(0.5, 2.0, 7);
    CHECK(HyperParams::from_json(hp.to_json()).to_json() == hp.to_json());
  }
}

TEST_SUITE("batching") {
  TEST_CASE("every subject appears exactly once and order is seeded") {
    auto hp = fast(0, 1, 1);
    for (std::size_t n = 3; n < 40; ++n) {
      auto batches = epoch_batches(n, hp, 2);
      std::set<std::size_t> seen;
      for (const auto& b : batches) {
        CHECK(b.size() >= 3);
        for (auto i : b) CHECK(seen.insert(i).second);
      }
      CHECK(seen.size() == n);
      CHECK(epoch_batches(n, hp, 2) == batches);
    }
    CHECK(epoch_batches(30, hp, 0) != epoch_batches(30, hp, 1));
  }

  TEST_CASE("short trailing batches fold only when needed") {
    auto hp = fast(0, 0, 1);
    hp.batch_size = 8;
    auto kept = epoch_batches(10, hp, 0);
    REQUIRE(kept.size() == 2);
    CHECK(kept[1].size() == 2);
    CHECK(epoch_batches(9, hp, 0).size() == 1);
    hp.alpha = 1.0;
    CHECK(epoch_batches(10, hp, 0).size() == 1);
    CHECK(epoch_batches(11, hp, 0).size() == 2);
  }

  TEST_CASE("empty or too-small datasets are rejected") {
    CHECK_THROWS_AS(epoch_batches(0, fast(0, 0, 1), 0), std::invalid_argument);
    CHECK_THROWS_AS(epoch_batches(2, fast(0, 1, 1), 0), std::invalid_argument);
    Trainer t(build_model(tiny()), fast(0, 0, 1));
    CHECK_THROWS_AS(t.train_epoch(Dataset{}, Dataset{}), std::invalid_argument);
  }
}

TEST_SUITE("training") {
  TEST_CASE("alpha = beta = 0 on four identical volumes decreases MSE for 5 epochs") {
    Dataset one = random_dataset(1, 5);
    Dataset d = one;
    for (int i = 1; i < 4; ++i) {
      d.ids.push_back("copy" + std::to_string(i));
      d.volumes.push_back(one.volumes[0]);
      d.scores.push_back(one.scores[0]);
      d.diagnoses.push_back(one.diagnoses[0]);
      d.factors.push_back(one.factors[0]);
    }
    Trainer t(build_model(tiny()), fast(0, 0, 5, 1e-2));
    t.fit(d, Dataset{});
    for (std::size_t i = 1; i < t.history.size(); ++i) CHECK(t.history[i].train.mse < t.history[i - 1].train.mse);
  }

  TEST_CASE("memorizing four subjects lowers smoothed MSE monotonically over 50 epochs") {
    Dataset d = random_dataset(4, 6);
    Trainer t(build_model(tiny()), fast(0, 0, 50, 1e-2));
    t.fit(d, Dataset{});
    std::vector<double> smooth;
    for (std::size_t i = 4; i < t.history.size(); ++i) {
      double s = 0.0;
      for (std::size_t k = i - 4; k <= i; ++k) s += t.history[k].train.mse;
      smooth.push_back(s / 5.0);
    }
    for (std::size_t i = 1; i < smooth.size(); ++i) CHECK(smooth[i] < smooth[i - 1]);
  }

  TEST_CASE("fixed seed gives identical histories") {
    Dataset train = random_dataset(12, 1), val = random_dataset(5, 2);
    Trainer a(build_model(tiny()), fast(1e-2, 1e-1, 3)), b(build_model(tiny()), fast(1e-2, 1e-1, 3));
    a.fit(train, val);
    b.fit(train, val);
    check_same_history(a.history, b.history);
    CHECK(parameter_hash(a.model) == parameter_hash(b.model));
    for (const auto& r : a.history) {
      CHECK(std::isfinite(r.train.total));
      CHECK(r.val_r >= -1.0);
      CHECK(r.val_r <= 1.0);
      CHECK(r.val_dispersion >= 0.0);
      CHECK(r.skipped_steps == 0);
    }
  }

  TEST_CASE("non-finite loss aborts naming the batch") {
    Dataset d = random_dataset(6, 3);
    d.volumes[2][0] = std::numeric_limits<double>::infinity();
    Trainer t(build_model(tiny()), fast(0, 0, 1));
    try {
      t.train_epoch(d, Dataset{});
      FAIL("expected TrainingError");
    } catch (const TrainingError& e) {
      CHECK(std::string(e.what()).find("batch") != std::string::npos);
    }
  }

  TEST_CASE("similarity term drives training pearson up") {
    Dataset train = random_dataset(16, 7);
    Trainer t(build_model(tiny()), fast(0, 1.0, 25));
    t.fit(train, train);
    CHECK(t.history.back().val_r > t.history.front().val_r);
    CHECK(t.history.back().val_r > 0.5);
  }

  TEST_CASE("large beta collapses dispersion relative to beta = 0") {
    Dataset train = random_dataset(12, 8);
    Trainer ae(build_model(tiny()), fast(0, 0, 30, 1e-2)), vae(build_model(tiny()), fast(10.0, 0, 30, 1e-2));
    ae.fit(train, train);
    vae.fit(train, train);
    CHECK(vae.history.back().val_dispersion < 0.1 * ae.history.back().val_dispersion);
  }

  TEST_CASE("evaluation uses mu in eval mode and is repeatable") {
    Dataset d = random_dataset(7, 9);
    auto m = build_model(tiny());
    auto a = evaluate(m, d, fast(0, 0, 1), 3), b = evaluate(m, d, fast(0, 0, 1), 16);
    CHECK(a.mu.size() == 7);
    CHECK(a.r == doctest::Approx(b.r).epsilon(1e-12));
    CHECK(a.loss.mse == doctest::Approx(b.loss.mse).epsilon(1e-12));
    std::vector<double> mu0;
    for (const auto& row : a.mu) mu0.push_back(row[0]);
    CHECK(a.r == pearson(mu0, d.scores).r);
  }

  TEST_CASE("history CSV has one row per epoch") {
    Trainer t(build_model(tiny()), fast(0, 0, 2));
    t.fit(random_dataset(4, 1), random_dataset(3, 2));
    const std::string csv = history_csv(t.history);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
    CHECK(csv.starts_with("epoch,train_mse"));
  }
}

TEST_SUITE("checkpoint") {
  TEST_CASE("fresh model round-trips to an identical parameter hash") {
    auto dir = scratch("fresh");
    Trainer t(build_model(tiny()), fast(0.1, 0.2, 4));
    save_checkpoint(t, dir / "c.ckpt");
    Trainer back = load_checkpoint(dir / "c.ckpt");
    CHECK(parameter_hash(back.model) == parameter_hash(t.model));
    CHECK(back.hp.to_json() == t.hp.to_json());
    CHECK(back.model.config().hash() == t.model.config().hash());
  }

  TEST_CASE("resume after one epoch equals uninterrupted training bitwise") {
    auto dir = scratch("resume");
    Dataset train = random_dataset(10, 4), val = random_dataset(4, 5);
    Trainer straight(build_model(tiny()), fast(1e-2, 1e-1, 3));
    straight.fit(train, val);

    Trainer first(build_model(tiny()), fast(1e-2, 1e-1, 3));
    first.train_epoch(train, val);
    save_checkpoint(first, dir / "c.ckpt");
    Trainer resumed = load_checkpoint(dir / "c.ckpt");
    resumed.fit(train, val);

    CHECK(parameter_hash(resumed.model) == parameter_hash(straight.model));
    CHECK(resumed.adam.step == straight.adam.step);
    check_same_history(resumed.history, straight.history);
    save_checkpoint(straight, dir / "a.ckpt");
    save_checkpoint(resumed, dir / "b.ckpt");
    std::ifstream a(dir / "a.ckpt", std::ios::binary), b(dir / "b.ckpt", std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
    CHECK(sa == sb);
  }

  TEST_CASE("corrupted, truncated and wrong-version files are rejected") {
    auto dir = scratch("corrupt");
    Trainer t(build_model(tiny()), fast(0, 0, 1));
    save_checkpoint(t, dir / "c.ckpt");
    std::ifstream in(dir / "c.ckpt", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});

    auto write = [&](const std::string& name, const std::string& content) {
      std::ofstream(dir / name, std::ios::binary) << content;
      return dir / name;
    };
    std::string flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x5a;
    CHECK_THROWS_AS(load_checkpoint(write("flip.ckpt", flipped)), CheckpointError);
    CHECK_THROWS_AS(load_checkpoint(write("short.ckpt", bytes.substr(0, bytes.size() / 3))), CheckpointError);
    std::string version = bytes;
    version[8] = 9;
    try {
      load_checkpoint(write("version.ckpt", version));
      FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
      CHECK(std::string(e.what()).find("version") != std::string::npos);
    }
    CHECK_THROWS_AS(load_checkpoint(write("junk.ckpt", "hello")), CheckpointError);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), CheckpointError);
  }
}

TEST_SUITE("dispersion") {
  TEST_CASE("identical vectors give zero, two points at -1 and 1 give one") {
    CHECK(dispersion({{1, 2}, {1, 2}, {1, 2}}).value == 0.0);
    auto r = dispersion({{-1}, {1}});
    CHECK(r.value == 1.0);
    CHECK(r.centroid == std::vector<double>{0.0});
  }

  TEST_CASE("matches a two-pass long double oracle") {
    std::mt19937_64 rng(12);
    std::normal_distribution<double> n(0.0, 3.0);
    std::vector<std::vector<double>> mus(50, std::vector<double>(6));
    for (auto& m : mus)
      for (auto& v : m) v = n(rng);
    long double c[6] = {};
    for (const auto& m : mus)
      for (int j = 0; j < 6; ++j) c[j] += m[j];
    for (auto& v : c) v /= 50;
    long double total = 0;
    for (const auto& m : mus) {
      long double s = 0;
      for (int j = 0; j < 6; ++j) s += (m[j] - c[j]) * (m[j] - c[j]);
      total += std::sqrt(s);
    }
    CHECK(std::abs(dispersion(mus).value - static_cast<double>(total / 50)) <= 1e-12);
  }

  TEST_CASE("property: translation and permutation invariant, scales with |a|") {
    std::mt19937_64 rng(13);
    std::normal_distribution<double> n;
    for (int t = 0; t < 20; ++t) {
      std::vector<std::vector<double>> mus(10, std::vector<double>(3));
      for (auto& m : mus)
        for (auto& v : m) v = n(rng);
      const double base = dispersion(mus).value;
      auto shifted = mus, scaled = mus, permuted = mus;
      const double a = n(rng) * 4;
      for (auto& m : shifted)
        for (int j = 0; j < 3; ++j) m[j] += 10.0 * (j + 1);
      for (auto& m : scaled)
        for (auto& v : m) v *= a;
      std::shuffle(permuted.begin(), permuted.end(), rng);
      CHECK(std::abs(dispersion(shifted).value - base) <= 1e-12);
      CHECK(dispersion(permuted).value == doctest::Approx(base).epsilon(1e-14));
      CHECK(dispersion(scaled).value == doctest::Approx(std::abs(a) * base).epsilon(1e-12));
    }
  }

  TEST_CASE("ragged or empty input is rejected") {
    CHECK_THROWS_AS(dispersion({{1, 2}, {1}}), std::invalid_argument);
    CHECK_THROWS_AS(dispersion({}), std::invalid_argument);
  }
}
