#include "simvae/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <string>
#include <vector>

namespace simvae {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrix = Eigen::Map<RowMatrix>;
using ConstMapMatrix = Eigen::Map<const RowMatrix>;

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

template <typename Fwd, typename Deriv>
Var unary(Var x, Fwd fwd, Deriv deriv) {
  const Tensor& v = x.value();
  Tensor out(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = fwd(v[i]);
  return x.graph->record(std::move(out), {x}, [deriv](BackwardContext& ctx) {
    Tensor* g = ctx.grad_input(0);
    if (!g) return;
    const Tensor& in = ctx.input(0);
    const Tensor& y = ctx.output();
    const Tensor& gy = ctx.grad_output();
    for (std::size_t i = 0; i < in.size(); ++i) (*g)[i] += gy[i] * deriv(in[i], y[i]);
  });
}

}  // namespace

Var dense(Var input, Var weight, Var bias) {
  const Tensor& x = input.value();
  const Tensor& w = weight.value();
  const Tensor& b = bias.value();
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1) {
    throw ShapeError("dense: expected input [N,I], weight [O,I], bias [O], got " +
                     shape_string(x.shape()) + ", " + shape_string(w.shape()) + ", " +
                     shape_string(b.shape()));
  }
  if (x.dim(1) != w.dim(1) || b.dim(0) != w.dim(0)) {
    throw ShapeError("dense: inner extents disagree: input " + shape_string(x.shape()) +
                     ", weight " + shape_string(w.shape()) + ", bias " + shape_string(b.shape()));
  }
  const auto N = static_cast<Eigen::Index>(x.dim(0));
  const auto I = static_cast<Eigen::Index>(x.dim(1));
  const auto O = static_cast<Eigen::Index>(w.dim(0));
  Tensor out({x.dim(0), w.dim(0)});
  MapMatrix y(out.data(), N, O);
  y.noalias() = ConstMapMatrix(x.data(), N, I) * ConstMapMatrix(w.data(), O, I).transpose();
  for (Eigen::Index n = 0; n < N; ++n) {
    for (Eigen::Index o = 0; o < O; ++o) y(n, o) += b[static_cast<std::size_t>(o)];
  }
  return input.graph->record(std::move(out), {input, weight, bias}, [N, I, O](BackwardContext& ctx) {
    ConstMapMatrix dy(ctx.grad_output().data(), N, O);
    if (Tensor* gx = ctx.grad_input(0)) {
      MapMatrix(gx->data(), N, I).noalias() += dy * ConstMapMatrix(ctx.input(1).data(), O, I);
    }
    if (Tensor* gw = ctx.grad_input(1)) {
      MapMatrix(gw->data(), O, I).noalias() += dy.transpose() * ConstMapMatrix(ctx.input(0).data(), N, I);
    }
    if (Tensor* gb = ctx.grad_input(2)) {
      for (Eigen::Index o = 0; o < O; ++o) (*gb)[static_cast<std::size_t>(o)] += dy.col(o).sum();
    }
  });
}

Var relu(Var x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Var x) {
  return unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Var exp(Var x) {
  return unary(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var scale(Var x, double factor) {
  return unary(
      x, [factor](double v) { return factor * v; }, [factor](double, double) { return factor; });
}

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return a.graph->record(std::move(out), {a, b}, [](BackwardContext& ctx) {
    const Tensor& gy = ctx.grad_output();
    for (std::size_t k = 0; k < 2; ++k) {
      if (Tensor* g = ctx.grad_input(k)) {
        for (std::size_t i = 0; i < gy.size(); ++i) (*g)[i] += gy[i];
      }
    }
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.graph->record(std::move(out), {a, b}, [](BackwardContext& ctx) {
    const Tensor& gy = ctx.grad_output();
    if (Tensor* g = ctx.grad_input(0)) {
      for (std::size_t i = 0; i < gy.size(); ++i) (*g)[i] += gy[i];
    }
    if (Tensor* g = ctx.grad_input(1)) {
      for (std::size_t i = 0; i < gy.size(); ++i) (*g)[i] -= gy[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.graph->record(std::move(out), {a, b}, [](BackwardContext& ctx) {
    const Tensor& gy = ctx.grad_output();
    if (Tensor* g = ctx.grad_input(0)) {
      const Tensor& other = ctx.input(1);
      for (std::size_t i = 0; i < gy.size(); ++i) (*g)[i] += gy[i] * other[i];
    }
    if (Tensor* g = ctx.grad_input(1)) {
      const Tensor& other = ctx.input(0);
      for (std::size_t i = 0; i < gy.size(); ++i) (*g)[i] += gy[i] * other[i];
    }
  });
}

Var sum(Var x) {
  double acc = 0.0;
  for (double v : x.value().values()) acc += v;
  return x.graph->record(Tensor::scalar(acc), {x}, [](BackwardContext& ctx) {
    if (Tensor* g = ctx.grad_input(0)) {
      const double gy = ctx.grad_output()[0];
      for (double& v : g->values()) v += gy;
    }
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.graph->record(std::move(out), {x}, [](BackwardContext& ctx) {
    if (Tensor* g = ctx.grad_input(0)) {
      const Tensor& gy = ctx.grad_output();
      for (std::size_t i = 0; i < gy.size(); ++i) (*g)[i] += gy[i];
    }
  });
}

Var select_columns(Var x, std::span<const std::size_t> columns) {
  const Tensor& v = x.value();
  if (v.rank() != 2) throw ShapeError("select_columns: expected [N,d], got " + shape_string(v.shape()));
  const std::size_t N = v.dim(0), d = v.dim(1);
  std::vector<std::size_t> cols(columns.begin(), columns.end());
  if (cols.empty()) throw ShapeError("select_columns: empty column set");
  for (std::size_t c : cols) {
    if (c >= d) {
      throw ShapeError("select_columns: column " + std::to_string(c) + " out of range for width " +
                       std::to_string(d));
    }
  }
  Tensor out({N, cols.size()});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t j = 0; j < cols.size(); ++j) out[n * cols.size() + j] = v[n * d + cols[j]];
  }
  return x.graph->record(std::move(out), {x}, [cols, N, d](BackwardContext& ctx) {
    if (Tensor* g = ctx.grad_input(0)) {
      const Tensor& gy = ctx.grad_output();
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t j = 0; j < cols.size(); ++j) (*g)[n * d + cols[j]] += gy[n * cols.size() + j];
      }
    }
  });
}

Var crop3d(Var x, std::size_t depth, std::size_t height, std::size_t width) {
  const Tensor& v = x.value();
  if (v.rank() != 5) throw ShapeError("crop3d: expected [N,C,D,H,W], got " + shape_string(v.shape()));
  const std::size_t N = v.dim(0), C = v.dim(1), D = v.dim(2), H = v.dim(3), W = v.dim(4);
  if (depth > D || height > H || width > W || depth == 0 || height == 0 || width == 0) {
    throw ShapeError("crop3d: cannot crop " + shape_string(v.shape()) + " to " +
                     std::to_string(depth) + "x" + std::to_string(height) + "x" + std::to_string(width));
  }
  const std::size_t oz = (D - depth) / 2, oy = (H - height) / 2, ox = (W - width) / 2;
  Tensor out({N, C, depth, height, width});
  auto src_index = [=](std::size_t nc, std::size_t z, std::size_t y, std::size_t xx) {
    return ((nc * D + z + oz) * H + y + oy) * W + xx + ox;
  };
  std::size_t i = 0;
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t z = 0; z < depth; ++z)
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t xx = 0; xx < width; ++xx) out[i++] = v[src_index(nc, z, y, xx)];
  return x.graph->record(std::move(out), {x}, [=](BackwardContext& ctx) {
    Tensor* g = ctx.grad_input(0);
    if (!g) return;
    const Tensor& gy = ctx.grad_output();
    std::size_t j = 0;
    for (std::size_t nc = 0; nc < N * C; ++nc)
      for (std::size_t z = 0; z < depth; ++z)
        for (std::size_t y = 0; y < height; ++y)
          for (std::size_t xx = 0; xx < width; ++xx) (*g)[src_index(nc, z, y, xx)] += gy[j++];
  });
}

Var batchnorm(Var input, Var scale_var, Var shift_var, RunningStats& stats, Mode mode,
              BatchNormOptions options) {
  const Tensor& x = input.value();
  const Tensor& gamma = scale_var.value();
  const Tensor& beta = shift_var.value();
  if (x.rank() < 2) throw ShapeError("batchnorm: expected [N,C,...], got " + shape_string(x.shape()));
  const std::size_t N = x.dim(0), C = x.dim(1);
  const std::size_t S = x.size() / (N * C);
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C} || stats.mean.shape() != Shape{C} ||
      stats.var.shape() != Shape{C}) {
    throw ShapeError("batchnorm: per-channel tensors must have shape [" + std::to_string(C) + "]");
  }
  const double M = static_cast<double>(N * S);
  const double eps = options.epsilon;

  std::vector<double> mu(C), inv_std(C);
  if (mode == Mode::train) {
    if (N < 2) throw ShapeError("batchnorm: train mode needs a batch of at least 2, got 1");
    for (std::size_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double* p = x.data() + (n * C + c) * S;
        for (std::size_t s = 0; s < S; ++s) acc += p[s];
      }
      const double m = acc / M;
      double sq = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double* p = x.data() + (n * C + c) * S;
        for (std::size_t s = 0; s < S; ++s) sq += (p[s] - m) * (p[s] - m);
      }
      const double var = sq / M;
      mu[c] = m;
      inv_std[c] = 1.0 / std::sqrt(var + eps);
      const double unbiased = M > 1.0 ? sq / (M - 1.0) : var;
      stats.mean[c] = (1.0 - options.momentum) * stats.mean[c] + options.momentum * m;
      stats.var[c] = (1.0 - options.momentum) * stats.var[c] + options.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = stats.mean[c];
      inv_std[c] = 1.0 / std::sqrt(stats.var[c] + eps);
    }
  }

  Tensor out(x.shape());
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* p = x.data() + (n * C + c) * S;
      double* q = out.data() + (n * C + c) * S;
      for (std::size_t s = 0; s < S; ++s) q[s] = gamma[c] * (p[s] - mu[c]) * inv_std[c] + beta[c];
    }
  }

  const bool batch_stats = mode == Mode::train;
  return input.graph->record(
      std::move(out), {input, scale_var, shift_var},
      [N, C, S, M, mu, inv_std, batch_stats](BackwardContext& ctx) {
        const Tensor& x = ctx.input(0);
        const Tensor& gamma = ctx.input(1);
        const Tensor& gy = ctx.grad_output();
        Tensor* gx = ctx.grad_input(0);
        Tensor* gg = ctx.grad_input(1);
        Tensor* gb = ctx.grad_input(2);
        for (std::size_t c = 0; c < C; ++c) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t n = 0; n < N; ++n) {
            const double* p = x.data() + (n * C + c) * S;
            const double* d = gy.data() + (n * C + c) * S;
            for (std::size_t s = 0; s < S; ++s) {
              sum_dy += d[s];
              sum_dy_xhat += d[s] * (p[s] - mu[c]) * inv_std[c];
            }
          }
          if (gg) (*gg)[c] += sum_dy_xhat;
          if (gb) (*gb)[c] += sum_dy;
          if (!gx) continue;
          const double k = gamma[c] * inv_std[c];
          for (std::size_t n = 0; n < N; ++n) {
            const double* p = x.data() + (n * C + c) * S;
            const double* d = gy.data() + (n * C + c) * S;
            double* g = gx->data() + (n * C + c) * S;
            for (std::size_t s = 0; s < S; ++s) {
              if (batch_stats) {
                const double xhat = (p[s] - mu[c]) * inv_std[c];
                g[s] += k * (d[s] - sum_dy / M - xhat * sum_dy_xhat / M);
              } else {
                g[s] += k * d[s];
              }
            }
          }
        }
      });
}

}  // namespace simvae
