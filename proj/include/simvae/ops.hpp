#pragma once

#include <array>
#include <cstddef>
#include <span>

#include "simvae/graph.hpp"

namespace simvae {

enum class Mode { train, eval };

// Output extent of a strided convolution along one axis.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t padding);
// Output extent of a transposed convolution along one axis.
std::size_t conv_transpose_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                         std::size_t padding, std::size_t output_padding);

// Cross-correlation. input [N,C,D,H,W], kernel [F,C,kd,kh,kw], bias [F].
Var conv3d(Var input, Var kernel, Var bias, std::size_t stride, std::size_t padding);

// Adjoint of conv3d with respect to its input, plus bias.
// input [N,C,D,H,W], kernel [C,F,kd,kh,kw] (same layout conv3d uses for an F->C
// convolution), bias [F].
Var conv3d_transpose(Var input, Var kernel, Var bias, std::size_t stride, std::size_t padding,
                     std::size_t output_padding);
// Same with a separate output padding per spatial axis (D, H, W).
Var conv3d_transpose(Var input, Var kernel, Var bias, std::size_t stride, std::size_t padding,
                     std::array<std::size_t, 3> output_padding);

// input [N,I], weight [O,I], bias [O] -> [N,O].
Var dense(Var input, Var weight, Var bias);

Var relu(Var x);
Var sigmoid(Var x);
Var exp(Var x);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double factor);
Var sum(Var x);
Var mean(Var x);
Var reshape(Var x, Shape shape);

// [N,d] -> [N,k] gathering the listed columns.
Var select_columns(Var x, std::span<const std::size_t> columns);

// Center crop of the three trailing spatial axes of [N,C,D,H,W].
Var crop3d(Var x, std::size_t depth, std::size_t height, std::size_t width);

struct RunningStats {
  Tensor mean;
  Tensor var;

  static RunningStats fresh(std::size_t channels) {
    return {Tensor({channels}, 0.0), Tensor({channels}, 1.0)};
  }
};

struct BatchNormOptions {
  double momentum = 0.1;
  double epsilon = 1e-5;
};

// Per-channel normalization of [N,C,...]. Train mode normalizes with the biased
// batch variance, differentiates through the batch statistics and folds them into
// `stats` (unbiased variance). Eval mode normalizes with `stats`.
Var batchnorm(Var input, Var scale, Var shift, RunningStats& stats, Mode mode,
              BatchNormOptions options = {});

}  // namespace simvae
