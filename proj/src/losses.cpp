#include "simvae/losses.hpp"

#include <cmath>
#include <stdexcept>

#include "simvae/ops.hpp"

namespace simvae {

Var mse_loss(Var x, Var reconstruction) {
  const Tensor& a = x.value();
  const Tensor& b = reconstruction.value();
  if (a.shape() != b.shape()) {
    throw ShapeError("mse_loss: shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  const double batch = static_cast<double>(a.dim(0));
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return x.graph->record(Tensor::scalar(acc / batch), {x, reconstruction}, [batch](BackwardContext& ctx) {
    const Tensor& a = ctx.input(0);
    const Tensor& b = ctx.input(1);
    const double k = 2.0 * ctx.grad_output()[0] / batch;
    if (Tensor* g = ctx.grad_input(0)) {
      for (std::size_t i = 0; i < a.size(); ++i) (*g)[i] += k * (a[i] - b[i]);
    }
    if (Tensor* g = ctx.grad_input(1)) {
      for (std::size_t i = 0; i < a.size(); ++i) (*g)[i] -= k * (a[i] - b[i]);
    }
  });
}

Var kl_gaussian(Var mu, Var logvar) {
  const Tensor& m = mu.value();
  const Tensor& lv = logvar.value();
  if (m.shape() != lv.shape() || m.rank() != 2) {
    throw ShapeError("kl_gaussian: expected matching [N,d] tensors, got " + shape_string(m.shape()) +
                     " and " + shape_string(lv.shape()));
  }
  const double batch = static_cast<double>(m.dim(0));
  double acc = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) acc += m[i] * m[i] + std::exp(lv[i]) - lv[i] - 1.0;
  return mu.graph->record(Tensor::scalar(0.5 * acc / batch), {mu, logvar}, [batch](BackwardContext& ctx) {
    const double k = ctx.grad_output()[0] / batch;
    if (Tensor* g = ctx.grad_input(0)) {
      const Tensor& m = ctx.input(0);
      for (std::size_t i = 0; i < m.size(); ++i) (*g)[i] += k * m[i];
    }
    if (Tensor* g = ctx.grad_input(1)) {
      const Tensor& lv = ctx.input(1);
      for (std::size_t i = 0; i < lv.size(); ++i) (*g)[i] += 0.5 * k * (std::exp(lv[i]) - 1.0);
    }
  });
}

PearsonResult pearson(std::span<const double> a, std::span<const double> b, double epsilon) {
  if (a.size() != b.size()) {
    throw ShapeError("pearson: length mismatch " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  }
  if (a.size() < 3) throw std::invalid_argument("pearson: need at least 3 samples");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  const double na = std::sqrt(saa), nb = std::sqrt(sbb);
  if (na < epsilon || nb < epsilon) return {0.0, true};
  double r = sab / (na * nb);
  r = std::max(-1.0, std::min(1.0, r));
  return {r, false};
}

Var negative_pearson(Var z, const Tensor& y, bool* degenerate) {
  const Tensor& zv = z.value();
  const std::size_t n = zv.dim(0);
  if (zv.size() != n || y.size() != n) {
    throw ShapeError("negative_pearson: expected [N] vectors, got " + shape_string(zv.shape()) + " and " +
                     shape_string(y.shape()));
  }
  const PearsonResult res = pearson(zv.values(), y.values());
  if (degenerate) *degenerate = res.degenerate;
  return z.graph->record(Tensor::scalar(-res.r), {z}, [y, res](BackwardContext& ctx) {
    Tensor* g = ctx.grad_input(0);
    if (!g || res.degenerate) return;
    const Tensor& zv = ctx.input(0);
    const std::size_t n = zv.size();
    double mz = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mz += zv[i];
      my += y[i];
    }
    mz /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double szz = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      szz += (zv[i] - mz) * (zv[i] - mz);
      syy += (y[i] - my) * (y[i] - my);
    }
    const double norm = std::sqrt(szz) * std::sqrt(syy);
    const double gy = ctx.grad_output()[0];
    // d r / d z_i = (y_i - my) / norm - r (z_i - mz) / szz
    for (std::size_t i = 0; i < n; ++i) {
      (*g)[i] -= gy * ((y[i] - my) / norm - res.r * (zv[i] - mz) / szz);
    }
  });
}

SimilarityRegistry::SimilarityRegistry() { add(std::make_shared<PearsonSimilarity>()); }

SimilarityRegistry& SimilarityRegistry::instance() {
  static SimilarityRegistry registry;
  return registry;
}

void SimilarityRegistry::add(std::shared_ptr<const SimilarityMetric> metric) {
  const std::string key = metric->name();
  metrics_[key] = std::move(metric);
}

const SimilarityMetric& SimilarityRegistry::get(const std::string& name) const {
  auto it = metrics_.find(name);
  if (it == metrics_.end()) throw std::invalid_argument("unknown similarity metric '" + name + "'");
  return *it->second;
}

std::vector<std::string> SimilarityRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : metrics_) out.push_back(k);
  return out;
}

Var similarity_loss(Var z_supervised, const Tensor& y, const SimilarityMetric& metric, bool* degenerate) {
  const Tensor& z = z_supervised.value();
  if (z.rank() != 2) {
    throw ShapeError("similarity_loss: expected [N,k] supervised latents, got " + shape_string(z.shape()));
  }
  const std::size_t n = z.dim(0), k = z.dim(1);
  if (n < kMinSimilarityBatch) {
    throw std::invalid_argument("similarity_loss: need at least 3 subjects, got " + std::to_string(n));
  }
  if (y.size() != n) {
    throw ShapeError("similarity_loss: " + std::to_string(n) + " latent rows but " +
                     std::to_string(y.size()) + " targets");
  }
  bool any_degenerate = false;
  Var acc{};
  for (std::size_t j = 0; j < k; ++j) {
    const std::size_t col[] = {j};
    Var column = reshape(select_columns(z_supervised, col), {n});
    bool deg = false;
    Var term = metric.loss(column, y, &deg);
    any_degenerate = any_degenerate || deg;
    acc = j == 0 ? term : add(acc, term);
  }
  if (degenerate) *degenerate = any_degenerate;
  return k == 1 ? acc : scale(acc, 1.0 / static_cast<double>(k));
}

TotalLoss total_loss(Var x, Var reconstruction, Var mu, Var logvar, Var z_supervised, const Tensor& y,
                     const LossWeights& weights, const SimilarityMetric& metric) {
  if (weights.beta < 0.0 || weights.alpha < 0.0) {
    throw std::invalid_argument("total_loss: beta and alpha must be non-negative");
  }
  Var mse = mse_loss(x, reconstruction);
  Var kl = kl_gaussian(mu, logvar);
  TotalLoss out;
  out.breakdown.beta = weights.beta;
  out.breakdown.alpha = weights.alpha;
  out.breakdown.mse = mse.value().item();
  out.breakdown.kl = kl.value().item();

  Var total = add(mse, scale(kl, weights.beta));
  const std::size_t n = z_supervised.value().dim(0);
  if (n >= kMinSimilarityBatch) {
    bool deg = false;
    Var sim = similarity_loss(z_supervised, y, metric, &deg);
    out.breakdown.similarity = sim.value().item();
    out.breakdown.degenerate_similarity = deg;
    if (weights.alpha != 0.0) total = add(total, scale(sim, weights.alpha));
  } else if (weights.alpha != 0.0) {
    throw std::invalid_argument("total_loss: similarity term needs at least 3 subjects per batch");
  }
  out.breakdown.total = total.value().item();
  out.total = total;
  return out;
}

}  // namespace simvae
