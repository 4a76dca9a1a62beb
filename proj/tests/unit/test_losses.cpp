#include <doctest.h>

#include <cmath>
#include <random>

#include "simvae/grad_check.hpp"
#include "simvae/losses.hpp"
#include "simvae/ops.hpp"
#include "test_util.hpp"

using namespace simvae;
using simvae::testing::random_tensor;

namespace {

// Eq.-5-style evaluation in extended precision, independent of the library code.
double pearson_oracle(const std::vector<double>& z, const std::vector<double>& y) {
  long double mz = 0, my = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    mz += z[i];
    my += y[i];
  }
  mz /= z.size();
  my /= y.size();
  long double num = 0, dz = 0, dy = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    num += (z[i] - mz) * (y[i] - my);
    dz += (z[i] - mz) * (z[i] - mz);
    dy += (y[i] - my) * (y[i] - my);
  }
  return static_cast<double>(num / (std::sqrt(dz) * std::sqrt(dy)));
}

double neg_pearson_value(const std::vector<double>& z, const std::vector<double>& y) {
  Graph g;
  Tensor yt({y.size()}, y);
  return negative_pearson(g.parameter(Tensor({z.size()}, z)), yt).value().item();
}

}  // namespace

TEST_SUITE("mse_loss") {
  TEST_CASE("identical inputs give zero") {
    std::mt19937_64 rng(1);
    Graph g;
    Tensor x = random_tensor({2, 1, 3, 3, 3}, rng);
    CHECK(mse_loss(g.constant(x), g.constant(x)).value().item() == 0.0);
  }

  TEST_CASE("unit residual over V voxels with N = 1 gives V") {
    Graph g;
    Tensor x({1, 1, 2, 3, 4}, 1.0), xh({1, 1, 2, 3, 4}, 0.0);
    CHECK(mse_loss(g.constant(x), g.constant(xh)).value().item() == 24.0);
  }

  TEST_CASE("matches two-loop oracle") {
    std::mt19937_64 rng(2);
    Graph g;
    Tensor x = random_tensor({3, 1, 2, 2, 5}, rng), xh = random_tensor({3, 1, 2, 2, 5}, rng);
    double acc = 0.0;
    for (std::size_t n = 0; n < 3; ++n) {
      double per = 0.0;
      for (std::size_t v = 0; v < 20; ++v) per += std::pow(x[n * 20 + v] - xh[n * 20 + v], 2);
      acc += per;
    }
    CHECK(std::abs(mse_loss(g.constant(x), g.constant(xh)).value().item() - acc / 3.0) <= 1e-12);
  }

  TEST_CASE("shape mismatch is rejected") {
    Graph g;
    CHECK_THROWS_AS(mse_loss(g.constant(Tensor({1, 4})), g.constant(Tensor({1, 5}))), ShapeError);
  }
}

TEST_SUITE("kl_gaussian") {
  TEST_CASE("prior-matching posterior gives zero") {
    Graph g;
    CHECK(kl_gaussian(g.constant(Tensor({4, 3})), g.constant(Tensor({4, 3}))).value().item() == 0.0);
  }

  TEST_CASE("unit mean offset in one dimension gives one half") {
    Graph g;
    CHECK(kl_gaussian(g.constant(Tensor({1, 1}, 1.0)), g.constant(Tensor({1, 1}))).value().item() == 0.5);
  }

  TEST_CASE("property: non-negative and zero only at the prior") {
    std::mt19937_64 rng(3);
    for (int i = 0; i < 200; ++i) {
      Graph g;
      double kl = kl_gaussian(g.constant(random_tensor({3, 4}, rng, -2, 2)),
                              g.constant(random_tensor({3, 4}, rng, -3, 3)))
                      .value()
                      .item();
      CHECK(kl > 0.0);
    }
    Graph g;
    CHECK(std::abs(kl_gaussian(g.constant(Tensor({2, 2}, 1e-7)), g.constant(Tensor({2, 2}, 0.0)))
                       .value()
                       .item()) <= 1e-12);
  }

  TEST_CASE("matches a Monte-Carlo estimate of E_q[log q - log p]") {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int draw = 0; draw < 5; ++draw) {
      Tensor mu = random_tensor({1, 3}, rng, -1.5, 1.5), lv = random_tensor({1, 3}, rng, -1.5, 1.0);
      Graph g;
      const double kl = kl_gaussian(g.constant(mu), g.constant(lv)).value().item();
      const int samples = 200000;
      double s = 0.0, s2 = 0.0;
      for (int k = 0; k < samples; ++k) {
        double term = 0.0;
        for (std::size_t j = 0; j < 3; ++j) {
          const double e = normal(rng);
          const double z = mu[j] + std::exp(0.5 * lv[j]) * e;
          // log q - log p; the 2*pi constants cancel
          term += -0.5 * lv[j] - 0.5 * e * e + 0.5 * z * z;
        }
        s += term;
        s2 += term * term;
      }
      const double m = s / samples;
      const double se = std::sqrt((s2 / samples - m * m) / samples);
      CHECK(std::abs(m - kl) <= 3.0 * se);
    }
  }
}

TEST_SUITE("pearson") {
  TEST_CASE("perfect correlation and anticorrelation") {
    CHECK(neg_pearson_value({1, 2, 3, 4}, {1, 2, 3, 4}) == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(neg_pearson_value({1, 2, 3}, {3, 2, 1}) == doctest::Approx(1.0).epsilon(1e-15));
  }

  TEST_CASE("small case against the direct formula") {
    const double r = pearson_oracle({1, 2, 4}, {1, 2, 3});
    CHECK(std::abs(neg_pearson_value({1, 2, 4}, {1, 2, 3}) + r) <= 1e-15);
    CHECK(r == doctest::Approx(0.9819805060619657).epsilon(1e-14));
  }

  TEST_CASE("affine invariance and symmetry") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-3, 3);
    for (int t = 0; t < 50; ++t) {
      std::vector<double> z(17), y(17);
      for (auto& v : z) v = u(rng);
      for (auto& v : y) v = u(rng);
      const double r = pearson(z, y).r;
      const double a = u(rng), b = u(rng);
      std::vector<double> az(z);
      for (auto& v : az) v = a * v + b;
      CHECK(std::abs(pearson(az, y).r - (a > 0 ? 1 : -1) * r) <= 1e-10);
      CHECK(pearson(z, y).r == pearson(y, z).r);
    }
    std::vector<double> y{2, 5, 1, 7};
    std::vector<double> z;
    for (double v : y) z.push_back(3.0 * v + 11.0);
    CHECK(pearson(z, y).r == doctest::Approx(1.0).epsilon(1e-15));
  }

  TEST_CASE("constant input is degenerate, not fatal") {
    auto res = pearson(std::vector<double>{1, 2, 3, 4}, std::vector<double>{5, 5, 5, 5});
    CHECK(res.degenerate);
    CHECK(res.r == 0.0);
    Graph g;
    Var z = g.parameter(Tensor({4}, std::vector<double>{1, 2, 3, 4}));
    bool degenerate = false;
    Var loss = negative_pearson(z, Tensor({4}, 5.0), &degenerate);
    CHECK(degenerate);
    g.backward(loss);
    CHECK(g.grad(z) == Tensor({4}, 0.0));
  }

  TEST_CASE("N = 64 random pairs match the two-pass oracle") {
    std::mt19937_64 rng(6);
    std::normal_distribution<double> n(0, 1);
    for (int t = 0; t < 20; ++t) {
      std::vector<double> z(64), y(64);
      for (std::size_t i = 0; i < 64; ++i) {
        y[i] = n(rng);
        z[i] = 0.5 * y[i] + n(rng);
      }
      CHECK(std::abs(pearson(z, y).r - pearson_oracle(z, y)) <= 1e-12);
    }
  }

  TEST_CASE("fewer than three subjects is rejected") {
    CHECK_THROWS_AS(pearson(std::vector<double>{1, 2}, std::vector<double>{2, 1}), std::invalid_argument);
    Graph g;
    CHECK_THROWS_AS(similarity_loss(g.constant(Tensor({2, 1})), Tensor({2}), PearsonSimilarity()),
                    std::invalid_argument);
  }
}

TEST_SUITE("similarity_loss") {
  TEST_CASE("registry ships pearson and rejects unknown names") {
    auto& reg = SimilarityRegistry::instance();
    CHECK(reg.get("pearson").name() == "pearson");
    CHECK_THROWS_AS(reg.get("mutual-information"), std::invalid_argument);
  }

  TEST_CASE("accepts custom metrics") {
    struct MeanGap final : SimilarityMetric {
      std::string name() const override { return "mean-gap"; }
      Var loss(Var z, const Tensor& y, bool*) const override {
        return sub(mean(z), scale(mean(z.graph->constant(y)), 1.0));
      }
    };
    SimilarityRegistry::instance().add(std::make_shared<MeanGap>());
    Graph g;
    Var v = similarity_loss(g.constant(Tensor({3, 1}, std::vector<double>{1, 2, 3})),
                            Tensor({3}, std::vector<double>{0, 0, 3}), SimilarityRegistry::instance().get("mean-gap"));
    CHECK(v.value().item() == doctest::Approx(1.0));
  }

  TEST_CASE("multiple supervised columns average their terms") {
    Graph g;
    Tensor z({3, 2}, std::vector<double>{1, 3, 2, 2, 3, 1});
    Var v = similarity_loss(g.constant(z), Tensor({3}, std::vector<double>{1, 2, 3}), PearsonSimilarity());
    CHECK(v.value().item() == doctest::Approx(0.0));
  }
}

TEST_SUITE("total_loss") {
  struct Batch {
    Tensor x, xh, mu, lv, z, y;
  };
  Batch make_batch(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return {random_tensor({4, 1, 2, 2, 2}, rng), random_tensor({4, 1, 2, 2, 2}, rng), random_tensor({4, 3}, rng),
            random_tensor({4, 3}, rng), random_tensor({4, 1}, rng), random_tensor({4}, rng, 0, 85)};
  }

  TEST_CASE("components combine as mse + beta kl + alpha similarity") {
    auto b = make_batch(7);
    for (auto [beta, alpha] : {std::pair{0.0, 0.0}, std::pair{1.0, 0.0}, std::pair{1e-4, 1e-4}, std::pair{2.5, 3.0}}) {
      Graph g;
      auto t = total_loss(g.constant(b.x), g.constant(b.xh), g.constant(b.mu), g.constant(b.lv), g.constant(b.z),
                          b.y, {beta, alpha}, PearsonSimilarity());
      const auto& br = t.breakdown;
      CHECK(br.total == br.mse + beta * br.kl + alpha * br.similarity);
      CHECK(br.mse >= 0.0);
      CHECK(br.kl >= 0.0);
      CHECK(br.similarity >= -1.0);
      CHECK(br.similarity <= 1.0);
      if (beta == 0.0 && alpha == 0.0) CHECK(br.total == br.mse);
    }
  }

  TEST_CASE("gradients with respect to every input pass finite differences") {
    auto b = make_batch(8);
    std::vector<NamedTensor> params{{"x", b.x}, {"xh", b.xh}, {"mu", b.mu}, {"logvar", b.lv}, {"z", b.z}};
    auto report = grad_check(
        [&](Graph& g, std::span<const Var> p) {
          return total_loss(p[0], p[1], p[2], p[3], p[4], b.y, {0.7, 1.3}, PearsonSimilarity()).total;
        },
        params, {1e-5, 1e-4});
    CHECK(report.passed);
  }

  TEST_CASE("one descent step on alpha * (-r) increases r") {
    std::mt19937_64 rng(9);
    for (int t = 0; t < 20; ++t) {
      Tensor z = random_tensor({8, 1}, rng), y = random_tensor({8}, rng, 0, 85);
      Graph g;
      Var zv = g.parameter(z);
      Var loss = scale(similarity_loss(zv, y, PearsonSimilarity()), 0.5);
      const double before = -loss.value().item() / 0.5;
      g.backward(loss);
      Tensor stepped = z;
      for (std::size_t i = 0; i < z.size(); ++i) stepped[i] -= 1e-3 * g.grad(zv)[i];
      const double after = pearson(stepped.values(), y.values()).r;
      CHECK(after > before);
    }
  }

  TEST_CASE("alpha > 0 with a two-row batch is rejected") {
    auto b = make_batch(10);
    Graph g;
    Tensor x2({2, 1}, 0.5), mu2({2, 3}), z2({2, 1});
    CHECK_THROWS_AS(total_loss(g.constant(x2), g.constant(x2), g.constant(mu2), g.constant(mu2), g.constant(z2),
                               Tensor({2}), {0.0, 1.0}, PearsonSimilarity()),
                    std::invalid_argument);
    CHECK_NOTHROW(total_loss(g.constant(x2), g.constant(x2), g.constant(mu2), g.constant(mu2), g.constant(z2),
                             Tensor({2}), {1.0, 0.0}, PearsonSimilarity()));
  }
}
