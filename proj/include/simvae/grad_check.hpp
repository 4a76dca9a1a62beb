#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "simvae/graph.hpp"

namespace simvae {

struct NamedTensor {
  std::string name;
  Tensor value;
};

// Builds a scalar loss from freshly bound parameter leaves. Must be a
// deterministic function of the parameter values.
using GraphBuilder = std::function<Var(Graph&, std::span<const Var>)>;

struct GradCheckOptions {
  double tolerance = 1e-5;
  double step = 1e-4;
  // Entries probed per tensor; 0 probes every entry. Larger tensors are sampled
  // deterministically from `seed`.
  std::size_t max_probes_per_tensor = 0;
  std::uint64_t seed = 0;
  // Step halvings tried per probe before it counts as non-smooth.
  std::size_t halvings = 5;
};

struct GradCheckEntry {
  std::string name;
  // max |analytic - numeric| over probed entries, divided by the larger of the
  // two gradients' max-abs over the same entries.
  double max_relative_error = 0.0;
  std::size_t probed = 0;
  // Entries whose central differences never settled while halving the step,
  // i.e. the probe sits on a non-differentiable point. Excluded from the error.
  std::size_t nonsmooth = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool passed = false;
  std::string failure;  // set when a probe produced a non-finite loss

  double max_relative_error() const;
};

GradCheckReport grad_check(const GraphBuilder& builder, std::span<const NamedTensor> params,
                           const GradCheckOptions& options = {});

}  // namespace simvae
