#pragma once

#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "simvae/graph.hpp"

namespace simvae {

// Squared error summed over every non-batch axis, averaged over the batch axis.
Var mse_loss(Var x, Var reconstruction);

// KL(N(mu, exp(logvar)) || N(0, I)) summed over latent axes, averaged over the
// batch. Non-negative.
Var kl_gaussian(Var mu, Var logvar);

inline constexpr double kPearsonEpsilon = 1e-8;

struct PearsonResult {
  double r = 0.0;
  // Set when either centered vector has norm below the guard; r is then 0.
  bool degenerate = false;
};

PearsonResult pearson(std::span<const double> a, std::span<const double> b,
                      double epsilon = kPearsonEpsilon);

// -pearson(z, y) as a graph node. z is [N] or [N,1]. A degenerate batch yields
// loss 0 and zero gradient; `degenerate` (optional) reports it.
Var negative_pearson(Var z, const Tensor& y, bool* degenerate = nullptr);

// D(z_(k), y): lower means more similar.
class SimilarityMetric {
 public:
  virtual ~SimilarityMetric() = default;
  virtual std::string name() const = 0;
  // z is a single supervised column [N]. Returns a scalar node.
  virtual Var loss(Var z, const Tensor& y, bool* degenerate) const = 0;
};

class PearsonSimilarity final : public SimilarityMetric {
 public:
  std::string name() const override { return "pearson"; }
  Var loss(Var z, const Tensor& y, bool* degenerate) const override {
    return negative_pearson(z, y, degenerate);
  }
};

class SimilarityRegistry {
 public:
  static SimilarityRegistry& instance();

  void add(std::shared_ptr<const SimilarityMetric> metric);
  const SimilarityMetric& get(const std::string& name) const;
  std::vector<std::string> names() const;

 private:
  SimilarityRegistry();
  std::map<std::string, std::shared_ptr<const SimilarityMetric>> metrics_;
};

inline constexpr std::size_t kMinSimilarityBatch = 3;

// Mean of the metric over the supervised columns of z_supervised [N,k].
// Throws std::invalid_argument when N < 3.
Var similarity_loss(Var z_supervised, const Tensor& y, const SimilarityMetric& metric,
                    bool* degenerate = nullptr);

struct LossWeights {
  double beta = 0.0;
  double alpha = 0.0;
};

struct LossBreakdown {
  double mse = 0.0;
  double kl = 0.0;
  double similarity = 0.0;
  double total = 0.0;
  double beta = 0.0;
  double alpha = 0.0;
  bool degenerate_similarity = false;
};

struct TotalLoss {
  Var total;
  LossBreakdown breakdown;
};

// mse + beta * kl + alpha * similarity. The similarity term is evaluated whenever
// the batch has at least 3 rows; with fewer rows it is required that alpha == 0
// and the term is recorded as 0.
TotalLoss total_loss(Var x, Var reconstruction, Var mu, Var logvar, Var z_supervised,
                     const Tensor& y, const LossWeights& weights, const SimilarityMetric& metric);

}  // namespace simvae
