#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "simvae/config.hpp"
#include "simvae/grad_check.hpp"
#include "simvae/ops.hpp"

namespace simvae {

struct ConvLayerSpec {
  std::size_t kernel = 3;
  std::size_t channels = 8;
  std::size_t stride = 2;
};

enum class DecoderStyle {
  // One transposed stage per encoder layer; padding and output padding are
  // solved so each stage restores the matching encoder extent.
  mirrored,
  // Unpadded transposed stages with the smallest uniform stride that covers the
  // input, a 1x1x1 projection to one channel and a center crop.
  literal,
};

enum class OutputActivation { linear, sigmoid };

struct ModelConfig {
  std::array<std::size_t, 3> input{32, 32, 32};  // D, H, W
  std::vector<ConvLayerSpec> encoder;
  std::size_t hidden = 64;
  std::size_t latent = 8;
  // Channels of the decoder's first volume (the dense layer's output is
  // reshaped to [decoder_channels, encoder output extents]).
  std::size_t decoder_channels = 16;
  // For `mirrored` the last entry must have 1 channel.
  std::vector<ConvLayerSpec> decoder;
  DecoderStyle decoder_style = DecoderStyle::mirrored;
  OutputActivation output = OutputActivation::linear;
  std::vector<std::size_t> supervised{0};
  BatchNormOptions batchnorm;
  std::uint64_t seed = 0;

  static ModelConfig paper();
  static ModelConfig paper_literal();
  static ModelConfig desk();

  static ModelConfig from_json(const Json& j);
  Json to_json() const;
  // FNV-1a over the canonical JSON echo.
  std::uint64_t hash() const;
};

class ModelConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct EncoderStage {
  std::size_t kernel, stride, padding, in_channels, out_channels;
  std::array<std::size_t, 3> out;
};

struct DecoderStage {
  std::size_t kernel, stride, padding;
  std::array<std::size_t, 3> output_padding;
  std::size_t in_channels, out_channels;
  std::array<std::size_t, 3> out;
  bool projection = false;  // 1x1x1 conv3d rather than a transposed conv
};

// Shape plan derived from a config; build_model rejects configs whose plan does
// not close.
struct ModelPlan {
  std::vector<EncoderStage> encoder;
  std::size_t flattened = 0;
  std::array<std::size_t, 3> bottleneck{0, 0, 0};
  std::vector<DecoderStage> decoder;
  std::array<std::size_t, 3> decoded{0, 0, 0};  // before any crop
};

ModelPlan plan_model(const ModelConfig& config);

struct Encoded {
  Var mu;
  Var logvar;
};

class VaeModel {
 public:
  VaeModel() = default;
  explicit VaeModel(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  const ModelPlan& plan() const { return plan_; }

  std::vector<NamedTensor>& parameters() { return params_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }
  std::vector<RunningStats>& running_stats() { return stats_; }
  const std::vector<RunningStats>& running_stats() const { return stats_; }
  std::size_t parameter_count() const;

  // Registers every parameter as a tracked leaf of g, in parameters() order.
  std::vector<Var> bind(Graph& g) const;

  // x [N,1,D,H,W] -> mu, logvar [N,d]. Train mode updates the running statistics.
  Encoded encode(std::span<const Var> params, Var x, Mode mode);
  // z [N,d] -> [N,1,D,H,W].
  Var decode(std::span<const Var> params, Var z, Mode mode);

  // Eval-mode conveniences on plain tensors.
  std::pair<Tensor, Tensor> encode(const Tensor& x);
  Tensor decode(const Tensor& z);

 private:
  ModelConfig config_;
  ModelPlan plan_;
  std::vector<NamedTensor> params_;
  std::vector<RunningStats> stats_;
  std::size_t decoder_param_offset_ = 0;
  std::size_t decoder_stats_offset_ = 0;
};

VaeModel build_model(const ModelConfig& config);

// z = mu + exp(logvar / 2) * noise
Var reparameterize(Var mu, Var logvar, Var noise);

}  // namespace simvae
