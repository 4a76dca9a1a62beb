#include "simvae/model.hpp"

#include <cmath>
#include <optional>
#include <random>
#include <sstream>

#include "simvae/seed.hpp"

namespace simvae {

namespace {

using Extents = std::array<std::size_t, 3>;

std::string extents_string(const Extents& e) {
  std::ostringstream os;
  os << e[0] << 'x' << e[1] << 'x' << e[2];
  return os.str();
}

std::size_t volume_of(const Extents& e) { return e[0] * e[1] * e[2]; }

const char* to_string(DecoderStyle s) { return s == DecoderStyle::mirrored ? "mirrored" : "literal"; }
const char* to_string(OutputActivation a) { return a == OutputActivation::linear ? "linear" : "sigmoid"; }

Json layers_json(const std::vector<ConvLayerSpec>& layers) {
  Json out = Json::array();
  for (const auto& l : layers) out.push_back({{"kernel", l.kernel}, {"channels", l.channels}, {"stride", l.stride}});
  return out;
}

std::vector<ConvLayerSpec> layers_from(ConfigSection& s, const std::string& key, std::vector<ConvLayerSpec> fallback) {
  if (!s.has(key)) return fallback;
  const Json& arr = s.raw(key);
  if (!arr.is_array()) throw ConfigError(s.qualified(key), "'" + s.qualified(key) + "' must be an array");
  std::vector<ConvLayerSpec> out;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    ConfigSection l(arr[i], s.qualified(key) + "[" + std::to_string(i) + "]");
    ConvLayerSpec spec;
    spec.kernel = l.get<std::size_t>("kernel", spec.kernel);
    spec.channels = l.get<std::size_t>("channels", spec.channels);
    spec.stride = l.get<std::size_t>("stride", spec.stride);
    l.finish();
    out.push_back(spec);
  }
  return out;
}

// Transposed-conv extents for every axis, or nullopt if any axis is invalid.
std::optional<Extents> transpose_extents(const Extents& in, std::size_t k, std::size_t s, std::size_t p,
                                         const Extents& op) {
  Extents out{};
  for (int a = 0; a < 3; ++a) {
    const long long e = static_cast<long long>((in[a] - 1) * s + k + op[a]) - 2 * static_cast<long long>(p);
    if (e < 1 || op[a] >= s) return std::nullopt;
    out[a] = static_cast<std::size_t>(e);
  }
  return out;
}

Tensor he_normal(Shape shape, std::size_t fan_in, std::uint64_t seed) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (double& v : t.values()) v = n(rng);
  return t;
}

}  // namespace

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.input = {48, 64, 48};
  c.encoder = {{11, 32, 2}, {7, 64, 2}, {5, 128, 2}, {3, 256, 2}};
  c.hidden = 256;
  c.latent = 8;
  c.decoder_channels = 128;
  c.decoder = {{3, 128, 2}, {4, 64, 2}, {11, 32, 2}, {3, 1, 2}};
  c.decoder_style = DecoderStyle::mirrored;
  return c;
}

ModelConfig ModelConfig::paper_literal() {
  ModelConfig c = paper();
  c.decoder = {{3, 128, 0}, {4, 64, 0}, {11, 32, 0}};
  c.decoder_style = DecoderStyle::literal;
  return c;
}

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.input = {32, 32, 32};
  c.encoder = {{5, 8, 2}, {3, 16, 2}};
  c.hidden = 64;
  c.latent = 8;
  c.decoder_channels = 16;
  c.decoder = {{3, 8, 2}, {5, 1, 2}};
  return c;
}

ModelConfig ModelConfig::from_json(const Json& j) {
  ConfigSection s(j, "model");
  const std::string preset = s.get<std::string>("preset", "desk");
  ModelConfig c;
  if (preset == "desk") {
    c = desk();
  } else if (preset == "paper") {
    c = paper();
  } else if (preset == "paper-literal") {
    c = paper_literal();
  } else {
    throw ConfigError("model.preset", "unknown model preset '" + preset + "' (desk, paper, paper-literal)");
  }
  c.input = s.get<std::array<std::size_t, 3>>("input", c.input);
  c.encoder = layers_from(s, "encoder", c.encoder);
  c.hidden = s.get<std::size_t>("hidden", c.hidden);
  c.latent = s.get<std::size_t>("latent", c.latent);
  c.decoder_channels = s.get<std::size_t>("decoder_channels", c.decoder_channels);
  c.decoder = layers_from(s, "decoder", c.decoder);
  const std::string style = s.get<std::string>("decoder_style", to_string(c.decoder_style));
  if (style == "mirrored") {
    c.decoder_style = DecoderStyle::mirrored;
  } else if (style == "literal") {
    c.decoder_style = DecoderStyle::literal;
  } else {
    throw ConfigError("model.decoder_style", "unknown decoder_style '" + style + "' (mirrored, literal)");
  }
  const std::string act = s.get<std::string>("output", to_string(c.output));
  if (act == "linear") {
    c.output = OutputActivation::linear;
  } else if (act == "sigmoid") {
    c.output = OutputActivation::sigmoid;
  } else {
    throw ConfigError("model.output", "unknown output activation '" + act + "' (linear, sigmoid)");
  }
  c.supervised = s.get<std::vector<std::size_t>>("supervised", c.supervised);
  {
    ConfigSection bn = s.section("batchnorm");
    c.batchnorm.momentum = bn.get<double>("momentum", c.batchnorm.momentum);
    c.batchnorm.epsilon = bn.get<double>("epsilon", c.batchnorm.epsilon);
    bn.finish();
  }
  c.seed = s.get<std::uint64_t>("seed", c.seed);
  s.finish();
  return c;
}

Json ModelConfig::to_json() const {
  Json j;
  j["input"] = input;
  j["encoder"] = layers_json(encoder);
  j["hidden"] = hidden;
  j["latent"] = latent;
  j["decoder_channels"] = decoder_channels;
  j["decoder"] = layers_json(decoder);
  j["decoder_style"] = to_string(decoder_style);
  j["output"] = to_string(output);
  j["supervised"] = supervised;
  j["batchnorm"] = {{"momentum", batchnorm.momentum}, {"epsilon", batchnorm.epsilon}};
  j["seed"] = seed;
  return j;
}

std::uint64_t ModelConfig::hash() const {
  return fnv1a(to_json().dump());
}

ModelPlan plan_model(const ModelConfig& c) {
  if (c.latent < 1) throw ModelConfigError("model: latent dimensionality must be at least 1");
  if (c.hidden < 1) throw ModelConfigError("model: hidden width must be at least 1");
  if (c.decoder_channels < 1) throw ModelConfigError("model: decoder_channels must be at least 1");
  for (auto i : c.supervised) {
    if (i >= c.latent) {
      throw ModelConfigError("model: supervised index " + std::to_string(i) + " is outside 0.." +
                             std::to_string(c.latent - 1));
    }
  }
  for (auto e : c.input) {
    if (e < 1) throw ModelConfigError("model: input extents must be positive");
  }
  if (c.encoder.empty()) throw ModelConfigError("model: encoder needs at least one layer");
  if (c.decoder.empty()) throw ModelConfigError("model: decoder needs at least one layer");

  ModelPlan plan;
  std::vector<Extents> levels{c.input};
  std::size_t channels = 1;
  for (std::size_t i = 0; i < c.encoder.size(); ++i) {
    const auto& l = c.encoder[i];
    const std::string name = "encoder layer " + std::to_string(i);
    if (l.kernel < 1 || l.stride < 1 || l.channels < 1) {
      throw ModelConfigError(name + ": kernel, stride and channels must be positive");
    }
    EncoderStage st{l.kernel, l.stride, (l.kernel - 1) / 2, channels, l.channels, {}};
    for (int a = 0; a < 3; ++a) {
      try {
        st.out[a] = conv_output_extent(levels.back()[a], l.kernel, l.stride, st.padding);
      } catch (const std::exception& e) {
        throw ModelConfigError(name + ": input " + extents_string(levels.back()) + " too small for kernel " +
                               std::to_string(l.kernel));
      }
    }
    levels.push_back(st.out);
    channels = l.channels;
    plan.encoder.push_back(st);
  }
  plan.bottleneck = levels.back();
  plan.flattened = channels * volume_of(plan.bottleneck);

  Extents cur = plan.bottleneck;
  channels = c.decoder_channels;
  if (c.decoder_style == DecoderStyle::mirrored) {
    if (c.decoder.size() != c.encoder.size()) {
      throw ModelConfigError("model: mirrored decoder needs one stage per encoder layer (" +
                             std::to_string(c.encoder.size()) + "), got " + std::to_string(c.decoder.size()));
    }
    if (c.decoder.back().channels != 1) {
      throw ModelConfigError("decoder layer " + std::to_string(c.decoder.size() - 1) +
                             ": last mirrored stage must produce 1 channel");
    }
    for (std::size_t i = 0; i < c.decoder.size(); ++i) {
      const auto& l = c.decoder[i];
      const std::string name = "decoder layer " + std::to_string(i);
      if (l.kernel < 1 || l.stride < 1 || l.channels < 1) {
        throw ModelConfigError(name + ": kernel, stride and channels must be positive");
      }
      const Extents target = levels[levels.size() - 2 - i];
      // Smallest padding for which a per-axis output padding in [0, stride) hits the target.
      bool solved = false;
      for (std::size_t p = 0; p <= l.kernel && !solved; ++p) {
        Extents op{};
        bool ok = true;
        for (int a = 0; a < 3 && ok; ++a) {
          const long long base = static_cast<long long>((cur[a] - 1) * l.stride + l.kernel) - 2 * static_cast<long long>(p);
          const long long need = static_cast<long long>(target[a]) - base;
          ok = need >= 0 && need < static_cast<long long>(l.stride);
          if (ok) op[a] = static_cast<std::size_t>(need);
        }
        if (ok) {
          plan.decoder.push_back({l.kernel, l.stride, p, op, channels, l.channels, target});
          solved = true;
        }
      }
      if (!solved) {
        throw ModelConfigError(name + ": no padding maps " + extents_string(cur) + " to " + extents_string(target) +
                               " with kernel " + std::to_string(l.kernel) + ", stride " + std::to_string(l.stride));
      }
      cur = target;
      channels = l.channels;
    }
  } else {
    std::size_t chosen = 0;
    for (std::size_t s = 1; s <= 16 && chosen == 0; ++s) {
      Extents e = cur;
      bool ok = true;
      for (const auto& l : c.decoder) {
        auto out = transpose_extents(e, l.kernel, l.stride ? l.stride : s, 0, Extents{});
        if (!out) {
          ok = false;
          break;
        }
        e = *out;
      }
      if (ok && e[0] >= c.input[0] && e[1] >= c.input[1] && e[2] >= c.input[2]) chosen = s;
    }
    if (chosen == 0) throw ModelConfigError("model: literal decoder cannot cover the input shape");
    for (std::size_t i = 0; i < c.decoder.size(); ++i) {
      const auto& l = c.decoder[i];
      if (l.kernel < 1 || l.channels < 1) {
        throw ModelConfigError("decoder layer " + std::to_string(i) + ": kernel and channels must be positive");
      }
      const std::size_t s = l.stride ? l.stride : chosen;
      auto out = transpose_extents(cur, l.kernel, s, 0, Extents{});
      plan.decoder.push_back({l.kernel, s, 0, Extents{}, channels, l.channels, *out});
      cur = *out;
      channels = l.channels;
    }
    if (cur[0] < c.input[0] || cur[1] < c.input[1] || cur[2] < c.input[2]) {
      throw ModelConfigError("decoder layer " + std::to_string(c.decoder.size() - 1) + ": output " +
                             extents_string(cur) + " smaller than input " + extents_string(c.input));
    }
    plan.decoder.push_back({1, 1, 0, Extents{}, channels, 1, cur, true});
  }
  plan.decoded = cur;
  return plan;
}

VaeModel::VaeModel(ModelConfig config) : config_(std::move(config)), plan_(plan_model(config_)) {
  std::uint64_t layer = 0;
  auto add = [&](std::string name, Tensor t) { params_.push_back({std::move(name), std::move(t)}); };
  auto weight = [&](Shape shape, std::size_t fan_in) { return he_normal(std::move(shape), fan_in, derive_seed(config_.seed, {layer++})); };

  for (std::size_t i = 0; i < plan_.encoder.size(); ++i) {
    const auto& st = plan_.encoder[i];
    const std::size_t k = st.kernel;
    const std::string p = "encoder." + std::to_string(i);
    add(p + ".weight", weight({st.out_channels, st.in_channels, k, k, k}, st.in_channels * k * k * k));
    add(p + ".bias", Tensor({st.out_channels}));
    add(p + ".bn.scale", Tensor({st.out_channels}, 1.0));
    add(p + ".bn.shift", Tensor({st.out_channels}));
    stats_.push_back(RunningStats::fresh(st.out_channels));
  }
  const std::size_t h = config_.hidden, d = config_.latent;
  add("encoder.dense.weight", weight({h, plan_.flattened}, plan_.flattened));
  add("encoder.dense.bias", Tensor({h}));
  add("encoder.mu.weight", weight({d, h}, h));
  add("encoder.mu.bias", Tensor({d}));
  add("encoder.logvar.weight", weight({d, h}, h));
  add("encoder.logvar.bias", Tensor({d}));

  decoder_param_offset_ = params_.size();
  decoder_stats_offset_ = stats_.size();
  const std::size_t width = config_.decoder_channels * volume_of(plan_.bottleneck);
  add("decoder.dense.weight", weight({width, d}, d));
  add("decoder.dense.bias", Tensor({width}));
  for (std::size_t i = 0; i < plan_.decoder.size(); ++i) {
    const auto& st = plan_.decoder[i];
    const std::size_t k = st.kernel;
    const std::string p = st.projection ? std::string("decoder.projection") : "decoder." + std::to_string(i);
    if (st.projection) {
      add(p + ".weight", weight({1, st.in_channels, 1, 1, 1}, st.in_channels));
    } else {
      add(p + ".weight", weight({st.in_channels, st.out_channels, k, k, k}, st.in_channels * k * k * k));
    }
    add(p + ".bias", Tensor({st.out_channels}));
    if (i + 1 < plan_.decoder.size()) {
      add(p + ".bn.scale", Tensor({st.out_channels}, 1.0));
      add(p + ".bn.shift", Tensor({st.out_channels}));
      stats_.push_back(RunningStats::fresh(st.out_channels));
    }
  }
}

std::size_t VaeModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::vector<Var> VaeModel::bind(Graph& g) const {
  std::vector<Var> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(g.parameter(p.value));
  return out;
}

Encoded VaeModel::encode(std::span<const Var> params, Var x, Mode mode) {
  if (params.size() != params_.size()) throw std::invalid_argument("encode: parameter list does not match model");
  const auto& in = config_.input;
  const Shape& xs = x.shape();
  if (xs.size() != 5 || xs[1] != 1 || xs[2] != in[0] || xs[3] != in[1] || xs[4] != in[2]) {
    throw ShapeError("encode: expected [N,1," + std::to_string(in[0]) + "," + std::to_string(in[1]) + "," +
                     std::to_string(in[2]) + "], got " + shape_string(xs));
  }
  std::size_t p = 0;
  Var h = x;
  for (std::size_t i = 0; i < plan_.encoder.size(); ++i) {
    const auto& st = plan_.encoder[i];
    h = relu(conv3d(h, params[p], params[p + 1], st.stride, st.padding));
    h = batchnorm(h, params[p + 2], params[p + 3], stats_[i], mode, config_.batchnorm);
    p += 4;
  }
  const std::size_t n = xs[0];
  h = reshape(h, {n, plan_.flattened});
  h = relu(dense(h, params[p], params[p + 1]));
  Var mu = dense(h, params[p + 2], params[p + 3]);
  Var logvar = dense(h, params[p + 4], params[p + 5]);
  return {mu, logvar};
}

Var VaeModel::decode(std::span<const Var> params, Var z, Mode mode) {
  if (params.size() != params_.size()) throw std::invalid_argument("decode: parameter list does not match model");
  const Shape& zs = z.shape();
  if (zs.size() != 2 || zs[1] != config_.latent) {
    throw ShapeError("decode: expected [N," + std::to_string(config_.latent) + "], got " + shape_string(zs));
  }
  const std::size_t n = zs[0];
  std::size_t p = decoder_param_offset_;
  const auto& b = plan_.bottleneck;
  Var h = relu(dense(z, params[p], params[p + 1]));
  h = reshape(h, {n, config_.decoder_channels, b[0], b[1], b[2]});
  p += 2;
  std::size_t s = decoder_stats_offset_;
  for (std::size_t i = 0; i < plan_.decoder.size(); ++i) {
    const auto& st = plan_.decoder[i];
    if (st.projection) {
      h = conv3d(h, params[p], params[p + 1], 1, 0);
    } else {
      h = conv3d_transpose(h, params[p], params[p + 1], st.stride, st.padding, st.output_padding);
    }
    p += 2;
    if (i + 1 < plan_.decoder.size()) {
      h = relu(h);
      h = batchnorm(h, params[p], params[p + 1], stats_[s++], mode, config_.batchnorm);
      p += 2;
    }
  }
  const auto& in = config_.input;
  if (plan_.decoded != in) h = crop3d(h, in[0], in[1], in[2]);
  if (config_.output == OutputActivation::sigmoid) h = sigmoid(h);
  return h;
}

std::pair<Tensor, Tensor> VaeModel::encode(const Tensor& x) {
  Graph g;
  std::vector<Var> params;
  for (const auto& p : params_) params.push_back(g.constant(p.value));
  auto e = encode(params, g.constant(x), Mode::eval);
  return {e.mu.value(), e.logvar.value()};
}

Tensor VaeModel::decode(const Tensor& z) {
  Graph g;
  std::vector<Var> params;
  for (const auto& p : params_) params.push_back(g.constant(p.value));
  return decode(params, g.constant(z), Mode::eval).value();
}

VaeModel build_model(const ModelConfig& config) { return VaeModel(config); }

Var reparameterize(Var mu, Var logvar, Var noise) {
  return add(mu, mul(exp(scale(logvar, 0.5)), noise));
}

}  // namespace simvae
