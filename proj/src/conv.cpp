#include <Eigen/Core>
#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "simvae/ops.hpp"

namespace simvae {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrix = Eigen::Map<RowMatrix>;
using ConstMapMatrix = Eigen::Map<const RowMatrix>;

// Geometry of a strided window sweep over one sample: a [channels, D, H, W] grid
// read through a [kd, kh, kw] window into an [od, oh, ow] lattice.
struct Window {
  std::ptrdiff_t channels, depth, height, width;
  std::ptrdiff_t kd, kh, kw;
  std::ptrdiff_t stride, padding;
  std::ptrdiff_t od, oh, ow;

  std::ptrdiff_t rows() const { return channels * kd * kh * kw; }
  std::ptrdiff_t cols() const { return od * oh * ow; }
  std::ptrdiff_t grid() const { return channels * depth * height * width; }
};

// col[row, p] = x[c, p*stride + offset - padding], zero outside the grid.
void im2col(const double* x, const Window& w, double* col) {
  const std::ptrdiff_t P = w.cols();
  for (std::ptrdiff_t c = 0; c < w.channels; ++c) {
    for (std::ptrdiff_t a = 0; a < w.kd; ++a) {
      for (std::ptrdiff_t b = 0; b < w.kh; ++b) {
        for (std::ptrdiff_t e = 0; e < w.kw; ++e) {
          double* dst = col + (((c * w.kd + a) * w.kh + b) * w.kw + e) * P;
          for (std::ptrdiff_t z = 0; z < w.od; ++z) {
            const std::ptrdiff_t iz = z * w.stride + a - w.padding;
            for (std::ptrdiff_t y = 0; y < w.oh; ++y) {
              const std::ptrdiff_t iy = y * w.stride + b - w.padding;
              double* row = dst + (z * w.oh + y) * w.ow;
              if (iz < 0 || iz >= w.depth || iy < 0 || iy >= w.height) {
                for (std::ptrdiff_t q = 0; q < w.ow; ++q) row[q] = 0.0;
                continue;
              }
              const double* src = x + ((c * w.depth + iz) * w.height + iy) * w.width;
              for (std::ptrdiff_t q = 0; q < w.ow; ++q) {
                const std::ptrdiff_t ix = q * w.stride + e - w.padding;
                row[q] = (ix >= 0 && ix < w.width) ? src[ix] : 0.0;
              }
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add columns back onto the grid.
void col2im(const double* col, const Window& w, double* x) {
  const std::ptrdiff_t P = w.cols();
  for (std::ptrdiff_t c = 0; c < w.channels; ++c) {
    for (std::ptrdiff_t a = 0; a < w.kd; ++a) {
      for (std::ptrdiff_t b = 0; b < w.kh; ++b) {
        for (std::ptrdiff_t e = 0; e < w.kw; ++e) {
          const double* srcrow = col + (((c * w.kd + a) * w.kh + b) * w.kw + e) * P;
          for (std::ptrdiff_t z = 0; z < w.od; ++z) {
            const std::ptrdiff_t iz = z * w.stride + a - w.padding;
            if (iz < 0 || iz >= w.depth) continue;
            for (std::ptrdiff_t y = 0; y < w.oh; ++y) {
              const std::ptrdiff_t iy = y * w.stride + b - w.padding;
              if (iy < 0 || iy >= w.height) continue;
              const double* row = srcrow + (z * w.oh + y) * w.ow;
              double* dst = x + ((c * w.depth + iz) * w.height + iy) * w.width;
              for (std::ptrdiff_t q = 0; q < w.ow; ++q) {
                const std::ptrdiff_t ix = q * w.stride + e - w.padding;
                if (ix >= 0 && ix < w.width) dst[ix] += row[q];
              }
            }
          }
        }
      }
    }
  }
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

void check_conv_operands(const char* op, const Tensor& in, const Tensor& k, const Tensor& bias,
                         std::size_t kernel_in_axis, std::size_t kernel_out_axis,
                         std::size_t stride) {
  const std::string name(op);
  require(in.rank() == 5, name + ": input must be [N,C,D,H,W], got " + shape_string(in.shape()));
  require(k.rank() == 5, name + ": kernel must be rank 5, got " + shape_string(k.shape()));
  require(k.dim(kernel_in_axis) == in.dim(1),
          name + ": input has " + std::to_string(in.dim(1)) + " channels but kernel expects " +
              std::to_string(k.dim(kernel_in_axis)) + " (kernel " + shape_string(k.shape()) + ")");
  require(bias.rank() == 1 && bias.dim(0) == k.dim(kernel_out_axis),
          name + ": bias must have " + std::to_string(k.dim(kernel_out_axis)) +
              " entries, got " + shape_string(bias.shape()));
  require(stride >= 1, name + ": stride must be >= 1");
}

}  // namespace

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t padding) {
  if (stride == 0) throw ShapeError("stride must be >= 1");
  if (in + 2 * padding < kernel) {
    throw ShapeError("extent " + std::to_string(in) + " with padding " + std::to_string(padding) +
                     " is smaller than kernel " + std::to_string(kernel));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

std::size_t conv_transpose_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                         std::size_t padding, std::size_t output_padding) {
  if (stride == 0) throw ShapeError("stride must be >= 1");
  if (output_padding >= stride) {
    throw ShapeError("output_padding " + std::to_string(output_padding) +
                     " must be smaller than stride " + std::to_string(stride));
  }
  const std::ptrdiff_t out = static_cast<std::ptrdiff_t>((in - 1) * stride + kernel + output_padding) -
                             static_cast<std::ptrdiff_t>(2 * padding);
  if (out <= 0) throw ShapeError("transposed convolution produces an empty extent");
  return static_cast<std::size_t>(out);
}

Var conv3d(Var input, Var kernel, Var bias, std::size_t stride, std::size_t padding) {
  const Tensor& x = input.value();
  const Tensor& k = kernel.value();
  const Tensor& b = bias.value();
  check_conv_operands("conv3d", x, k, b, 1, 0, stride);

  const std::size_t N = x.dim(0);
  Window w{};
  w.channels = static_cast<std::ptrdiff_t>(x.dim(1));
  w.depth = static_cast<std::ptrdiff_t>(x.dim(2));
  w.height = static_cast<std::ptrdiff_t>(x.dim(3));
  w.width = static_cast<std::ptrdiff_t>(x.dim(4));
  w.kd = static_cast<std::ptrdiff_t>(k.dim(2));
  w.kh = static_cast<std::ptrdiff_t>(k.dim(3));
  w.kw = static_cast<std::ptrdiff_t>(k.dim(4));
  w.stride = static_cast<std::ptrdiff_t>(stride);
  w.padding = static_cast<std::ptrdiff_t>(padding);
  w.od = static_cast<std::ptrdiff_t>(conv_output_extent(x.dim(2), k.dim(2), stride, padding));
  w.oh = static_cast<std::ptrdiff_t>(conv_output_extent(x.dim(3), k.dim(3), stride, padding));
  w.ow = static_cast<std::ptrdiff_t>(conv_output_extent(x.dim(4), k.dim(4), stride, padding));
  const std::ptrdiff_t F = static_cast<std::ptrdiff_t>(k.dim(0));

  Tensor out({N, k.dim(0), static_cast<std::size_t>(w.od), static_cast<std::size_t>(w.oh),
              static_cast<std::size_t>(w.ow)});
  std::vector<double> col(static_cast<std::size_t>(w.rows() * w.cols()));
  ConstMapMatrix K(k.data(), F, w.rows());
  for (std::size_t n = 0; n < N; ++n) {
    im2col(x.data() + n * w.grid(), w, col.data());
    MapMatrix y(out.data() + n * F * w.cols(), F, w.cols());
    y.noalias() = K * ConstMapMatrix(col.data(), w.rows(), w.cols());
    for (std::ptrdiff_t f = 0; f < F; ++f) y.row(f).array() += b[f];
  }

  return input.graph->record(
      std::move(out), {input, kernel, bias}, [w, N, F](BackwardContext& ctx) {
        const Tensor& x = ctx.input(0);
        const Tensor& k = ctx.input(1);
        const Tensor& gy = ctx.grad_output();
        Tensor* gx = ctx.grad_input(0);
        Tensor* gk = ctx.grad_input(1);
        Tensor* gb = ctx.grad_input(2);
        std::vector<double> col(static_cast<std::size_t>(w.rows() * w.cols()));
        ConstMapMatrix K(k.data(), F, w.rows());
        for (std::size_t n = 0; n < N; ++n) {
          ConstMapMatrix dy(gy.data() + n * F * w.cols(), F, w.cols());
          if (gk) {
            im2col(x.data() + n * w.grid(), w, col.data());
            MapMatrix(gk->data(), F, w.rows()).noalias() +=
                dy * ConstMapMatrix(col.data(), w.rows(), w.cols()).transpose();
          }
          if (gx) {
            MapMatrix(col.data(), w.rows(), w.cols()).noalias() = K.transpose() * dy;
            col2im(col.data(), w, gx->data() + n * w.grid());
          }
          if (gb) {
            for (std::ptrdiff_t f = 0; f < F; ++f) (*gb)[f] += dy.row(f).sum();
          }
        }
      });
}

Var conv3d_transpose(Var input, Var kernel, Var bias, std::size_t stride, std::size_t padding,
                     std::size_t output_padding) {
  return conv3d_transpose(input, kernel, bias, stride, padding,
                          std::array<std::size_t, 3>{output_padding, output_padding, output_padding});
}

Var conv3d_transpose(Var input, Var kernel, Var bias, std::size_t stride, std::size_t padding,
                     std::array<std::size_t, 3> output_padding) {
  const Tensor& x = input.value();
  const Tensor& k = kernel.value();
  const Tensor& b = bias.value();
  check_conv_operands("conv3d_transpose", x, k, b, 0, 1, stride);
  for (std::size_t op : output_padding) {
    if (op >= stride) {
      throw ShapeError("conv3d_transpose: output_padding " + std::to_string(op) + " must be smaller than stride " +
                       std::to_string(stride));
    }
  }

  const std::size_t N = x.dim(0);
  const std::size_t D = conv_transpose_output_extent(x.dim(2), k.dim(2), stride, padding, output_padding[0]);
  const std::size_t H = conv_transpose_output_extent(x.dim(3), k.dim(3), stride, padding, output_padding[1]);
  const std::size_t W = conv_transpose_output_extent(x.dim(4), k.dim(4), stride, padding, output_padding[2]);

  // The window sweeps the (larger) output grid; its lattice is the input grid.
  Window w{};
  w.channels = static_cast<std::ptrdiff_t>(k.dim(1));
  w.depth = static_cast<std::ptrdiff_t>(D);
  w.height = static_cast<std::ptrdiff_t>(H);
  w.width = static_cast<std::ptrdiff_t>(W);
  w.kd = static_cast<std::ptrdiff_t>(k.dim(2));
  w.kh = static_cast<std::ptrdiff_t>(k.dim(3));
  w.kw = static_cast<std::ptrdiff_t>(k.dim(4));
  w.stride = static_cast<std::ptrdiff_t>(stride);
  w.padding = static_cast<std::ptrdiff_t>(padding);
  w.od = static_cast<std::ptrdiff_t>(x.dim(2));
  w.oh = static_cast<std::ptrdiff_t>(x.dim(3));
  w.ow = static_cast<std::ptrdiff_t>(x.dim(4));
  const std::ptrdiff_t Cin = static_cast<std::ptrdiff_t>(x.dim(1));
  const std::ptrdiff_t F = w.channels;
  const std::ptrdiff_t spatial_out = w.depth * w.height * w.width;

  Tensor out({N, k.dim(1), D, H, W});
  std::vector<double> col(static_cast<std::size_t>(w.rows() * w.cols()));
  ConstMapMatrix K(k.data(), Cin, w.rows());
  for (std::size_t n = 0; n < N; ++n) {
    ConstMapMatrix xn(x.data() + n * Cin * w.cols(), Cin, w.cols());
    MapMatrix(col.data(), w.rows(), w.cols()).noalias() = K.transpose() * xn;
    double* yn = out.data() + n * w.grid();
    col2im(col.data(), w, yn);
    for (std::ptrdiff_t f = 0; f < F; ++f) {
      double* plane = yn + f * spatial_out;
      for (std::ptrdiff_t i = 0; i < spatial_out; ++i) plane[i] += b[f];
    }
  }

  return input.graph->record(
      std::move(out), {input, kernel, bias},
      [w, N, Cin, F, spatial_out](BackwardContext& ctx) {
        const Tensor& x = ctx.input(0);
        const Tensor& k = ctx.input(1);
        const Tensor& gy = ctx.grad_output();
        Tensor* gx = ctx.grad_input(0);
        Tensor* gk = ctx.grad_input(1);
        Tensor* gb = ctx.grad_input(2);
        std::vector<double> col(static_cast<std::size_t>(w.rows() * w.cols()));
        ConstMapMatrix K(k.data(), Cin, w.rows());
        for (std::size_t n = 0; n < N; ++n) {
          const double* gyn = gy.data() + n * w.grid();
          if (gx || gk) {
            im2col(gyn, w, col.data());
            ConstMapMatrix dcol(col.data(), w.rows(), w.cols());
            if (gx) {
              MapMatrix(gx->data() + n * Cin * w.cols(), Cin, w.cols()).noalias() += K * dcol;
            }
            if (gk) {
              ConstMapMatrix xn(x.data() + n * Cin * w.cols(), Cin, w.cols());
              MapMatrix(gk->data(), Cin, w.rows()).noalias() += xn * dcol.transpose();
            }
          }
          if (gb) {
            for (std::ptrdiff_t f = 0; f < F; ++f) {
              const double* plane = gyn + f * spatial_out;
              double acc = 0.0;
              for (std::ptrdiff_t i = 0; i < spatial_out; ++i) acc += plane[i];
              (*gb)[f] += acc;
            }
          }
        }
      });
}

}  // namespace simvae
