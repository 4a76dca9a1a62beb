#include "simvae/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>

namespace simvae {

double GradCheckReport::max_relative_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_relative_error);
  return m;
}

namespace {

double evaluate_loss(const GraphBuilder& builder, const std::vector<Tensor>& values) {
  Graph g;
  std::vector<Var> leaves;
  leaves.reserve(values.size());
  for (const auto& v : values) leaves.push_back(g.parameter(v));
  return builder(g, leaves).value().item();
}

}  // namespace

GradCheckReport grad_check(const GraphBuilder& builder, std::span<const NamedTensor> params,
                           const GradCheckOptions& options) {
  GradCheckReport report;
  std::vector<Tensor> values;
  for (const auto& p : params) values.push_back(p.value);

  std::vector<Tensor> analytic;
  {
    Graph g;
    std::vector<Var> leaves;
    for (const auto& v : values) leaves.push_back(g.parameter(v));
    Var loss = builder(g, leaves);
    if (!std::isfinite(loss.value().item())) {
      report.failure = "non-finite loss at the base point";
      return report;
    }
    g.backward(loss);
    for (const auto& leaf : leaves) analytic.push_back(g.grad(leaf));
  }

  std::mt19937_64 rng(options.seed);
  for (std::size_t t = 0; t < params.size(); ++t) {
    GradCheckEntry entry;
    entry.name = params[t].name;
    const std::size_t n = values[t].size();

    std::vector<std::size_t> indices(n);
    std::iota(indices.begin(), indices.end(), std::size_t{0});
    if (options.max_probes_per_tensor != 0 && n > options.max_probes_per_tensor) {
      std::shuffle(indices.begin(), indices.end(), rng);
      indices.resize(options.max_probes_per_tensor);
      std::sort(indices.begin(), indices.end());
    }

    // Probes straddling a ReLU kink converge only once the step is small enough
    // to stay on one side; large losses lose digits when it gets too small. Halve
    // from `step` until two successive central differences agree.
    double tensor_scale = 1e-12;
    for (std::size_t i : indices) tensor_scale = std::max(tensor_scale, std::abs(analytic[t][i]));
    const double agree = std::max(0.25 * options.tolerance * tensor_scale, 1e-9);

    double worst_diff = 0.0, scale = 0.0;
    for (std::size_t i : indices) {
      const double original = values[t][i];
      bool finite = true;
      auto central = [&](double delta) {
        values[t][i] = original + delta;
        const double plus = evaluate_loss(builder, values);
        values[t][i] = original - delta;
        const double minus = evaluate_loss(builder, values);
        values[t][i] = original;
        finite = finite && std::isfinite(plus) && std::isfinite(minus);
        return (plus - minus) / (2.0 * delta);
      };
      double step = options.step;
      double previous = central(step);
      std::optional<double> numeric;
      for (std::size_t k = 0; finite && k < options.halvings; ++k) {
        step /= 2.0;
        const double next = central(step);
        if (std::abs(next - previous) <= agree) {
          numeric = next;
          break;
        }
        previous = next;
      }
      if (!finite) {
        report.failure = "non-finite loss while probing " + entry.name + "[" + std::to_string(i) + "]";
        report.entries.push_back(entry);
        return report;
      }
      if (!numeric) {
        ++entry.nonsmooth;
        continue;
      }
      const double a = analytic[t][i];
      ++entry.probed;
      worst_diff = std::max(worst_diff, std::abs(a - *numeric));
      scale = std::max({scale, std::abs(a), std::abs(*numeric)});
    }
    entry.max_relative_error = scale > 0.0 ? worst_diff / scale : worst_diff;
    report.entries.push_back(entry);
  }

  report.passed = std::all_of(report.entries.begin(), report.entries.end(), [&](const auto& e) {
    return e.probed > 0 && e.max_relative_error <= options.tolerance;
  });
  return report;
}

}  // namespace simvae
