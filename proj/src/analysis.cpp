#include "simvae/analysis.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <thread>

#include "simvae/losses.hpp"
#include "simvae/seed.hpp"

namespace simvae {

double t_two_sided_p(double t, std::size_t df) {
  if (df == 0) throw std::invalid_argument("t_two_sided_p: df must be positive");
  if (std::isnan(t)) return std::numeric_limits<double>::quiet_NaN();
  if (std::isinf(t)) return 0.0;
  if (df >= 30) return std::erfc(std::abs(t) / std::numbers::sqrt2);
  const double nu = static_cast<double>(df);
  const double theta = std::atan(std::abs(t) / std::sqrt(nu));
  const double s = std::sin(theta), c = std::cos(theta), c2 = c * c;
  double inside;  // P(|T| < |t|)
  if (df % 2 == 1) {
    double sum = 0.0;
    if (df > 1) {
      double term = c;
      sum = term;
      for (std::size_t k = 3; k + 2 <= df; k += 2) {
        term *= c2 * static_cast<double>(k - 1) / static_cast<double>(k);
        sum += term;
      }
    }
    inside = 2.0 / std::numbers::pi * (theta + s * sum);
  } else {
    double term = 1.0, sum = 1.0;
    for (std::size_t k = 2; k + 2 <= df; k += 2) {
      term *= c2 * static_cast<double>(k - 1) / static_cast<double>(k);
      sum += term;
    }
    inside = s * sum;
  }
  return std::clamp(1.0 - inside, 0.0, 1.0);
}

Correlation correlate(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("correlate: series lengths differ");
  if (a.size() < 3) throw std::invalid_argument("correlate: need at least 3 subjects");
  Correlation c;
  c.n = a.size();
  const PearsonResult pr = pearson(a, b);
  c.degenerate = pr.degenerate;
  if (pr.degenerate) return c;
  c.r = std::clamp(pr.r, -1.0, 1.0);
  const double df = static_cast<double>(c.n - 2);
  const double one_minus = 1.0 - c.r * c.r;
  c.t = one_minus > 0.0 ? c.r * std::sqrt(df / one_minus) : std::copysign(std::numeric_limits<double>::infinity(), c.r);
  c.p = t_two_sided_p(c.t, c.n - 2);
  return c;
}

std::vector<double> column(const Codes& codes, std::size_t k) {
  std::vector<double> out;
  out.reserve(codes.size());
  for (const auto& row : codes) {
    if (k >= row.size()) throw std::invalid_argument("latent index " + std::to_string(k) + " out of range");
    out.push_back(row[k]);
  }
  return out;
}

Correlation correlate_latent(const Codes& codes, std::size_t k, std::span<const double> covariate) {
  const auto z = column(codes, k);
  return correlate(z, covariate);
}

std::vector<std::vector<double>> decode_rows(VaeModel& model, const Codes& codes) {
  const std::size_t d = model.config().latent;
  std::vector<std::vector<double>> out;
  out.reserve(codes.size());
  for (const auto& row : codes) {
    if (row.size() != d) throw std::invalid_argument("decode: code length does not match the latent size");
    Tensor z({1, d}, row);
    const Tensor x = model.decode(z);
    out.emplace_back(x.values().begin(), x.values().end());
  }
  return out;
}

std::vector<double> average_reconstruction(VaeModel& model, double z0, std::size_t samples, std::uint64_t seed,
                                            double tail_scale) {
  if (samples == 0) throw std::invalid_argument("average_reconstruction: need at least one sample");
  const auto& cfg = model.config();
  const std::size_t sup = cfg.supervised.empty() ? 0 : cfg.supervised.front();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Codes codes(samples, std::vector<double>(cfg.latent, 0.0));
  for (auto& row : codes) {
    for (std::size_t k = 0; k < cfg.latent; ++k) {
      row[k] = k == sup ? z0 : tail_scale * normal(rng);
    }
  }
  const auto decoded = decode_rows(model, codes);
  std::vector<double> mean(decoded.front().size(), 0.0);
  for (const auto& v : decoded) {
    for (std::size_t i = 0; i < v.size(); ++i) mean[i] += v[i];
  }
  for (double& v : mean) v /= static_cast<double>(samples);
  return mean;
}

GlmMap glm_voxelwise(const std::vector<std::vector<double>>& volumes, std::span<const double> regressor, Shape3 shape,
                     std::size_t threads) {
  const std::size_t n = volumes.size();
  if (n < 3) throw std::invalid_argument("glm: need at least 3 volumes");
  if (regressor.size() != n) throw std::invalid_argument("glm: one regressor value per volume is required");
  const std::size_t voxels = shape[0] * shape[1] * shape[2];
  for (const auto& v : volumes) {
    if (v.size() != voxels) throw std::invalid_argument("glm: volumes must share the declared shape");
  }
  double xbar = 0.0;
  for (double x : regressor) xbar += x;
  xbar /= static_cast<double>(n);
  double sxx = 0.0;
  for (double x : regressor) sxx += (x - xbar) * (x - xbar);
  if (!(sxx > 0.0)) throw std::invalid_argument("glm: the regressor is constant");

  GlmMap map;
  map.shape = shape;
  map.slope.assign(voxels, 0.0);
  map.intercept.assign(voxels, 0.0);
  map.t.assign(voxels, 0.0);
  map.design = "intensity ~ 1 + z0";
  const double df = static_cast<double>(n - 2);

  auto run = [&](std::size_t begin, std::size_t end) {
    for (std::size_t v = begin; v < end; ++v) {
      double ybar = 0.0;
      for (std::size_t i = 0; i < n; ++i) ybar += volumes[i][v];
      ybar /= static_cast<double>(n);
      double sxy = 0.0;
      for (std::size_t i = 0; i < n; ++i) sxy += (regressor[i] - xbar) * (volumes[i][v] - ybar);
      const double b = sxy / sxx;
      const double a = ybar - b * xbar;
      double rss = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double e = volumes[i][v] - a - b * regressor[i];
        rss += e * e;
      }
      map.slope[v] = b;
      map.intercept[v] = a;
      if (b == 0.0) {
        map.t[v] = 0.0;
      } else {
        const double sigma2 = std::max(rss / df, std::numeric_limits<double>::min());
        map.t[v] = b / std::sqrt(sigma2 / sxx);
      }
    }
  };
  threads = std::clamp<std::size_t>(threads, 1, voxels);
  if (threads == 1) {
    run(0, voxels);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (voxels + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t begin = t * chunk, end = std::min(voxels, begin + chunk);
      if (begin < end) pool.emplace_back(run, begin, end);
    }
    for (auto& th : pool) th.join();
  }
  return map;
}

ReconstructionGlm reconstruction_glm(VaeModel& model, double lo, double hi, std::size_t levels, std::size_t samples,
                                     std::uint64_t seed, std::size_t threads) {
  if (levels < 3) throw std::invalid_argument("glm: need at least 3 z0 levels");
  if (!(hi > lo)) throw std::invalid_argument("glm: the z0 range is empty");
  ReconstructionGlm out;
  for (std::size_t l = 0; l < levels; ++l) {
    const double z0 = lo + (hi - lo) * static_cast<double>(l) / static_cast<double>(levels - 1);
    out.levels.push_back(z0);
    out.reconstructions.push_back(average_reconstruction(model, z0, samples, derive_seed(seed, {l})));
  }
  const auto& in = model.config().input;
  out.map = glm_voxelwise(out.reconstructions, out.levels, {in[0], in[1], in[2]}, threads);
  return out;
}

Volume to_volume(std::span<const double> values, Shape3 shape, const std::string& provenance) {
  Volume v(shape[2], shape[1], shape[0]);
  if (values.size() != v.size()) throw std::invalid_argument("to_volume: value count does not match the shape");
  for (std::size_t i = 0; i < values.size(); ++i) v.voxels[i] = static_cast<float>(values[i]);
  v.provenance = provenance;
  return v;
}

void save_glm_map(const GlmMap& map, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_volume(to_volume(map.slope, map.shape, "glm slope: " + map.design), dir / "slope.vol");
  save_volume(to_volume(map.intercept, map.shape, "glm intercept: " + map.design), dir / "intercept.vol");
  save_volume(to_volume(map.t, map.shape, "glm t: " + map.design), dir / "t.vol");
}

RoiSummary roi_summary(const GlmMap& map, const Volume& mask) {
  if (mask.dims != std::array<std::size_t, 3>{map.shape[2], map.shape[1], map.shape[0]}) {
    throw std::invalid_argument("roi: mask shape does not match the map");
  }
  RoiSummary s;
  std::size_t negative = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask.voxels[i] <= 0.5f) continue;
    ++s.voxels;
    s.mean_slope += map.slope[i];
    if (map.slope[i] < 0.0) ++negative;
  }
  if (s.voxels == 0) throw std::invalid_argument("roi: mask is empty");
  s.mean_slope /= static_cast<double>(s.voxels);
  s.negative_fraction = static_cast<double>(negative) / static_cast<double>(s.voxels);
  return s;
}

double LogisticModel::decision(std::span<const double> x) const {
  if (x.size() != weights.size()) throw std::invalid_argument("logistic: feature count mismatch");
  double s = intercept;
  for (std::size_t i = 0; i < x.size(); ++i) s += weights[i] * x[i];
  return s;
}

namespace {

double log1pexp(double a) { return a > 0.0 ? a + std::log1p(std::exp(-a)) : std::log1p(std::exp(a)); }

double sigmoid(double a) {
  if (a >= 0.0) return 1.0 / (1.0 + std::exp(-a));
  const double e = std::exp(a);
  return e / (1.0 + e);
}

}  // namespace

LogisticModel logistic_fit(const Codes& features, std::span<const int> labels, const LogisticOptions& options) {
  const std::size_t n = features.size();
  if (n == 0 || labels.size() != n) throw std::invalid_argument("logistic: one label per row is required");
  const std::size_t f = features.front().size();
  if (f == 0) throw std::invalid_argument("logistic: need at least one feature");
  bool has0 = false, has1 = false;
  for (int y : labels) {
    if (y != 0 && y != 1) throw std::invalid_argument("logistic: labels must be 0 or 1");
    (y ? has1 : has0) = true;
  }
  if (!has0 || !has1) throw std::invalid_argument("logistic: both classes must be present");
  if (!(options.lambda >= 0.0)) throw std::invalid_argument("logistic: lambda must be >= 0");

  // Column 0 is the intercept.
  Eigen::MatrixXd X(n, f + 1);
  Eigen::VectorXd y(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (features[i].size() != f) throw std::invalid_argument("logistic: ragged feature table");
    X(i, 0) = 1.0;
    for (std::size_t j = 0; j < f; ++j) X(i, j + 1) = features[i][j];
    y(i) = labels[i];
  }
  Eigen::VectorXd penalty = Eigen::VectorXd::Constant(f + 1, options.lambda);
  penalty(0) = 0.0;

  auto objective = [&](const Eigen::VectorXd& w) {
    const Eigen::VectorXd eta = X * w;
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += log1pexp(eta(i)) - y(i) * eta(i);
    return s + 0.5 * (penalty.array() * w.array().square()).sum();
  };

  Eigen::VectorXd w = Eigen::VectorXd::Zero(f + 1);
  double current = objective(w);
  LogisticModel m;
  for (m.iterations = 0; m.iterations < options.max_iterations; ++m.iterations) {
    const Eigen::VectorXd eta = X * w;
    Eigen::VectorXd p(n), s(n);
    for (std::size_t i = 0; i < n; ++i) {
      p(i) = sigmoid(eta(i));
      s(i) = p(i) * (1.0 - p(i));
    }
    const Eigen::VectorXd grad = X.transpose() * (p - y) + penalty.cwiseProduct(w);
    m.gradient_norm = grad.norm();
    if (m.gradient_norm <= options.tolerance) break;
    Eigen::MatrixXd H = X.transpose() * s.asDiagonal() * X;
    H.diagonal() += penalty;
    // Tiny ridge keeps the solve defined when a separable fit drives s to 0.
    H.diagonal().array() += 1e-12 * (1.0 + H.diagonal().cwiseAbs().maxCoeff());
    const Eigen::VectorXd step = H.ldlt().solve(grad);
    // Near the optimum the decrease falls below rounding, so allow that much slack.
    const double slack = 1e-13 * std::max(1.0, std::abs(current));
    double t = 1.0;
    Eigen::VectorXd next = w - step;
    double value = objective(next);
    while (!(value <= current + slack) && t > 1e-12) {
      t *= 0.5;
      next = w - t * step;
      value = objective(next);
    }
    if (!(value <= current + slack) || next == w) break;
    w = next;
    current = value;
  }
  m.intercept = w(0);
  m.weights.assign(w.data() + 1, w.data() + 1 + f);
  return m;
}

BinaryMetrics binary_metrics(std::span<const int> truth, std::span<const int> predicted) {
  if (truth.size() != predicted.size() || truth.empty()) throw std::invalid_argument("metrics: size mismatch");
  std::size_t tp = 0, tn = 0, pos = 0, neg = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] == 1) {
      ++pos;
      tp += predicted[i] == 1;
    } else {
      ++neg;
      tn += predicted[i] == 0;
    }
  }
  if (pos == 0 || neg == 0) throw std::invalid_argument("metrics: both classes must be present in the test set");
  BinaryMetrics m;
  m.accuracy = static_cast<double>(tp + tn) / static_cast<double>(truth.size());
  m.sensitivity = static_cast<double>(tp) / static_cast<double>(pos);
  m.specificity = static_cast<double>(tn) / static_cast<double>(neg);
  m.balanced = 0.5 * (m.sensitivity + m.specificity);
  return m;
}

namespace {

MeanStd mean_std(const std::vector<double>& v) {
  MeanStd m;
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return m;
}

}  // namespace

ClassificationReport bootstrap_classify(const Codes& train_x, std::span<const int> train_y, const Codes& test_x,
                                        std::span<const int> test_y, const BootstrapOptions& options,
                                        const std::string& input_set) {
  if (options.resamples == 0) throw std::invalid_argument("bootstrap: need at least one resample");
  if (train_x.size() != train_y.size() || test_x.size() != test_y.size()) {
    throw std::invalid_argument("bootstrap: one label per row is required");
  }
  if (train_x.empty() || test_x.empty()) throw std::invalid_argument("bootstrap: empty train or test split");
  ClassificationReport report;
  report.input_set = input_set;
  report.resamples = options.resamples;
  const std::size_t n = train_x.size();
  for (std::size_t r = 0; r < options.resamples; ++r) {
    Codes xs;
    std::vector<int> ys;
    bool ok = false;
    for (std::size_t attempt = 0; attempt <= options.max_redraws && !ok; ++attempt) {
      std::mt19937_64 rng(derive_seed(options.seed, {r, attempt}));
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      xs.clear();
      ys.clear();
      int classes = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = pick(rng);
        xs.push_back(train_x[k]);
        ys.push_back(train_y[k]);
        classes |= train_y[k] ? 2 : 1;
      }
      ok = classes == 3;
    }
    if (!ok) throw std::runtime_error("bootstrap: every redraw of resample " + std::to_string(r) + " missed a class");
    const LogisticModel model = logistic_fit(xs, ys, options.logistic);
    std::vector<int> predicted;
    for (const auto& row : test_x) predicted.push_back(model.predict(row));
    report.runs.push_back(binary_metrics(test_y, predicted));
  }
  std::vector<double> acc, sens, spec, bal;
  for (const auto& m : report.runs) {
    acc.push_back(m.accuracy);
    sens.push_back(m.sensitivity);
    spec.push_back(m.specificity);
    bal.push_back(m.balanced);
  }
  report.accuracy = mean_std(acc);
  report.sensitivity = mean_std(sens);
  report.specificity = mean_std(spec);
  report.balanced = mean_std(bal);
  return report;
}

std::string InputSet::name() const {
  switch (kind) {
    case InputKind::supervised: return "supervised";
    case InputKind::remaining: return "remaining";
    case InputKind::covariate: return "covariate";
    case InputKind::latent: return "latent_" + std::to_string(latent);
  }
  return "?";
}

Codes select_features(const Codes& codes, std::span<const double> covariate, std::span<const std::size_t> supervised,
                      const InputSet& set) {
  if (set.kind == InputKind::covariate && covariate.size() != codes.size()) {
    throw std::invalid_argument("features: one covariate value per subject is required");
  }
  Codes out(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const auto& row = codes[i];
    auto is_sup = [&](std::size_t k) { return std::find(supervised.begin(), supervised.end(), k) != supervised.end(); };
    switch (set.kind) {
      case InputKind::supervised:
        for (auto k : supervised) {
          if (k >= row.size()) throw std::invalid_argument("features: supervised index out of range");
          out[i].push_back(row[k]);
        }
        break;
      case InputKind::remaining:
        for (std::size_t k = 0; k < row.size(); ++k) {
          if (!is_sup(k)) out[i].push_back(row[k]);
        }
        break;
      case InputKind::covariate: out[i].push_back(covariate[i]); break;
      case InputKind::latent:
        if (set.latent >= row.size()) throw std::invalid_argument("features: latent index out of range");
        out[i].push_back(row[set.latent]);
        break;
    }
    if (out[i].empty()) throw std::invalid_argument("features: input set '" + set.name() + "' is empty");
  }
  return out;
}

BinaryCohort ad_vs_hc(const Dataset& data) {
  BinaryCohort c;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.diagnoses[i] == Diagnosis::MCI) continue;
    c.rows.push_back(i);
    c.labels.push_back(data.diagnoses[i] == Diagnosis::AD ? 1 : 0);
  }
  return c;
}

TraversalSheet latent_traversal(VaeModel& model, std::size_t latent, double lo, double hi, std::size_t steps) {
  const auto& cfg = model.config();
  if (latent >= cfg.latent) {
    throw std::invalid_argument("traversal: latent index " + std::to_string(latent) + " out of range 0.." +
                                std::to_string(cfg.latent - 1));
  }
  if (steps < 2) throw std::invalid_argument("traversal: need at least 2 steps");
  if (!(hi >= lo)) throw std::invalid_argument("traversal: empty value range");
  TraversalSheet sheet;
  sheet.latent = latent;
  sheet.shape = {cfg.input[0], cfg.input[1], cfg.input[2]};
  Codes codes;
  for (std::size_t s = 0; s < steps; ++s) {
    const double v = lo + (hi - lo) * static_cast<double>(s) / static_cast<double>(steps - 1);
    sheet.values.push_back(v);
    std::vector<double> z(cfg.latent, 0.0);
    z[latent] = v;
    codes.push_back(std::move(z));
  }
  sheet.volumes = decode_rows(model, codes);
  return sheet;
}

std::pair<double, double> observed_range(const Codes& codes, std::size_t k) {
  const auto z = column(codes, k);
  if (z.empty()) throw std::invalid_argument("observed_range: no codes");
  const auto [mn, mx] = std::minmax_element(z.begin(), z.end());
  return {*mn, *mx};
}

std::string traversal_pgm(const TraversalSheet& sheet) {
  const auto [D, H, W] = sheet.shape;
  const std::size_t steps = sheet.volumes.size();
  // Panels: axial (z = D/2) is H x W, coronal (y = H/2) is D x W, sagittal (x = W/2) is D x H.
  const std::size_t cell_w = std::max(W, H);
  const std::size_t width = steps * cell_w;
  const std::size_t height = H + D + D;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& v : sheet.volumes) {
    for (double x : v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  }
  std::string pixels(width * height, '\0');
  auto shade = [&](double x) {
    const double t = hi > lo ? (x - lo) / (hi - lo) : 0.0;
    return static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * std::clamp(t, 0.0, 1.0))));
  };
  for (std::size_t s = 0; s < steps; ++s) {
    const auto& v = sheet.volumes[s];
    auto at = [&](std::size_t z, std::size_t y, std::size_t x) { return v[(z * H + y) * W + x]; };
    const std::size_t x0 = s * cell_w;
    // Rows are flipped so the higher index is drawn at the top.
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) pixels[(H - 1 - y) * width + x0 + x] = shade(at(D / 2, y, x));
    }
    for (std::size_t z = 0; z < D; ++z) {
      for (std::size_t x = 0; x < W; ++x) pixels[(H + D - 1 - z) * width + x0 + x] = shade(at(z, H / 2, x));
    }
    for (std::size_t z = 0; z < D; ++z) {
      for (std::size_t y = 0; y < H; ++y) pixels[(H + 2 * D - 1 - z) * width + x0 + y] = shade(at(z, y, W / 2));
    }
  }
  return "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n" + pixels;
}

std::array<double, 3> intensity_centroid(std::span<const double> volume, Shape3 shape) {
  const auto [D, H, W] = shape;
  if (volume.size() != D * H * W) throw std::invalid_argument("centroid: value count does not match the shape");
  double total = 0.0;
  std::array<double, 3> c{0, 0, 0};
  for (std::size_t z = 0; z < D; ++z) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const double m = std::max(0.0, volume[(z * H + y) * W + x]);
        total += m;
        c[0] += m * static_cast<double>(x);
        c[1] += m * static_cast<double>(y);
        c[2] += m * static_cast<double>(z);
      }
    }
  }
  if (!(total > 0.0)) throw std::invalid_argument("centroid: volume has no positive mass");
  for (double& v : c) v /= total;
  return c;
}

}  // namespace simvae
