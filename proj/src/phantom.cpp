#include "simvae/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "simvae/seed.hpp"

namespace simvae {

namespace {

struct Tissue {
  Ellipsoid shape;
  double intensity;
};

// Nested tissue compartments, painted outermost first.
const std::vector<Tissue>& tissues() {
  static const std::vector<Tissue> t{
      {{{0.0, 0.0, 0.0}, {0.74, 0.82, 0.70}}, 1.00},    // cortex
      {{{0.0, 0.02, 0.0}, {0.56, 0.64, 0.52}}, 0.55},   // white matter
      {{{-0.24, -0.05, 0.0}, {0.10, 0.12, 0.10}}, 0.85}, // deep gray, left
      {{{0.24, -0.05, 0.0}, {0.10, 0.12, 0.10}}, 0.85},  // deep gray, right
      {{{-0.10, 0.08, 0.06}, {0.06, 0.22, 0.10}}, 0.15}, // ventricle, left
      {{{0.10, 0.08, 0.06}, {0.06, 0.22, 0.10}}, 0.15},  // ventricle, right
  };
  return t;
}

std::array<double, 3> normalized(const std::array<std::size_t, 3>& dims, double x, double y, double z) {
  const double p[3] = {x, y, z};
  std::array<double, 3> u{};
  for (int i = 0; i < 3; ++i) {
    const double half = static_cast<double>(dims[i]) / 2.0;
    u[i] = (p[i] - (static_cast<double>(dims[i]) - 1.0) / 2.0) / half;
  }
  return u;
}

double ellipsoid_radius(const Ellipsoid& e, const std::array<double, 3>& u) {
  double s = 0.0;
  for (int i = 0; i < 3; ++i) {
    const double d = (u[i] - e.center[i]) / e.radii[i];
    s += d * d;
  }
  return std::sqrt(s);
}

// Soft membership with a one-voxel linear ramp across the boundary.
double soft_membership(const Ellipsoid& e, const std::array<double, 3>& u,
                       const std::array<std::size_t, 3>& dims) {
  double min_radius_vox = 1e9;
  for (int i = 0; i < 3; ++i) {
    min_radius_vox = std::min(min_radius_vox, e.radii[i] * static_cast<double>(dims[i]) / 2.0);
  }
  const double depth = (1.0 - ellipsoid_radius(e, u)) * min_radius_vox;
  return std::clamp(0.5 + depth, 0.0, 1.0);
}

void check_range(const char* name, const Range& r, double v) {
  if (!r.contains(v)) {
    throw std::invalid_argument(std::string("factor ") + name + " = " + std::to_string(v) +
                                " outside [" + std::to_string(r.lo) + ", " + std::to_string(r.hi) + "]");
  }
}

using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 multiply(const Mat3& a, const Mat3& b) {
  Mat3 m{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) m[i][j] += a[i][k] * b[k][j];
  return m;
}

// R = Rz * Ry * Rx, angles in degrees.
Mat3 rotation_matrix(const std::array<double, 3>& deg) {
  const double k = std::numbers::pi / 180.0;
  const double cx = std::cos(deg[0] * k), sx = std::sin(deg[0] * k);
  const double cy = std::cos(deg[1] * k), sy = std::sin(deg[1] * k);
  const double cz = std::cos(deg[2] * k), sz = std::sin(deg[2] * k);
  const Mat3 rx{{{1, 0, 0}, {0, cx, -sx}, {0, sx, cx}}};
  const Mat3 ry{{{cy, 0, sy}, {0, 1, 0}, {-sy, 0, cy}}};
  const Mat3 rz{{{cz, -sz, 0}, {sz, cz, 0}, {0, 0, 1}}};
  return multiply(rz, multiply(ry, rx));
}

double sample_trilinear(const Volume& v, double x, double y, double z) {
  const double fx = std::floor(x), fy = std::floor(y), fz = std::floor(z);
  const double ax = x - fx, ay = y - fy, az = z - fz;
  const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy), z0 = static_cast<long>(fz);
  auto get = [&](long i, long j, long k) -> double {
    if (i < 0 || j < 0 || k < 0 || i >= static_cast<long>(v.dims[0]) || j >= static_cast<long>(v.dims[1]) ||
        k >= static_cast<long>(v.dims[2])) {
      return 0.0;
    }
    return v.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j), static_cast<std::size_t>(k));
  };
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz) {
    const double wz = dz ? az : 1.0 - az;
    if (wz == 0.0) continue;
    for (int dy = 0; dy < 2; ++dy) {
      const double wy = dy ? ay : 1.0 - ay;
      if (wy == 0.0) continue;
      for (int dx = 0; dx < 2; ++dx) {
        const double wx = dx ? ax : 1.0 - ax;
        if (wx == 0.0) continue;
        acc += wx * wy * wz * get(x0 + dx, y0 + dy, z0 + dz);
      }
    }
  }
  return acc;
}

}  // namespace

std::string to_string(Effect e) {
  switch (e) {
    case Effect::decrease: return "decrease";
    case Effect::increase: return "increase";
    case Effect::neutral: return "neutral";
  }
  return "neutral";
}

Effect effect_from_string(const std::string& s) {
  if (s == "decrease") return Effect::decrease;
  if (s == "increase") return Effect::increase;
  if (s == "neutral") return Effect::neutral;
  throw std::invalid_argument("unknown ROI effect '" + s + "' (expected decrease, increase or neutral)");
}

std::vector<RoiSpec> CorpusSpec::default_rois() {
  return {
      {"hippocampus_left", {{-0.34, -0.05, -0.30}, {0.16, 0.26, 0.16}}, Effect::decrease, 0.5},
      {"hippocampus_right", {{0.34, -0.05, -0.30}, {0.16, 0.26, 0.16}}, Effect::decrease, 0.5},
      {"posterior_cingulate", {{0.0, 0.38, 0.28}, {0.16, 0.20, 0.18}}, Effect::decrease, 0.5},
      {"motor_strip", {{0.0, -0.12, 0.50}, {0.36, 0.12, 0.12}}, Effect::increase, 0.25},
      {"occipital_control", {{0.0, 0.62, -0.05}, {0.22, 0.12, 0.16}}, Effect::neutral, 0.0},
  };
}

void CorpusSpec::validate() const {
  if (subjects < 1) throw std::invalid_argument("corpus needs at least one subject");
  for (auto d : dims) {
    if (d < 4) throw std::invalid_argument("corpus volume extents must be >= 4");
  }
  if (!(score_max > 0.0)) throw std::invalid_argument("score_max must be positive");
  if (!(mci_threshold <= ad_threshold)) throw std::invalid_argument("diagnosis thresholds out of order");
  auto ordered = [](const Range& r, const char* name) {
    if (!(r.lo <= r.hi)) throw std::invalid_argument(std::string("range ") + name + " has lo > hi");
  };
  ordered(ranges.score, "score");
  for (const auto& r : ranges.translation) ordered(r, "translation");
  for (const auto& r : ranges.rotation) ordered(r, "rotation");
  for (const auto& r : ranges.scale) {
    ordered(r, "scale");
    if (!(r.lo > 0.0)) throw std::invalid_argument("scale range must be positive");
  }
  ordered(ranges.gain, "gain");
  ordered(ranges.noise, "noise");
  if (ranges.noise.lo < 0.0) throw std::invalid_argument("noise range must be non-negative");
  for (const auto& roi : rois) {
    for (int i = 0; i < 3; ++i) {
      if (!(roi.region.radii[i] > 0.0)) {
        throw std::invalid_argument("ROI " + roi.name + " needs positive radii");
      }
      if (std::abs(roi.region.center[i]) + roi.region.radii[i] > 1.0) {
        throw std::invalid_argument("ROI " + roi.name + " extends outside the volume");
      }
    }
    if (roi.strength < 0.0 || (roi.effect == Effect::decrease && roi.strength > 1.0)) {
      throw std::invalid_argument("ROI " + roi.name + " has an invalid effect strength");
    }
  }
}

namespace {

Range range_from(ConfigSection& s, const std::string& key, Range fallback) {
  auto v = s.get<std::vector<double>>(key, {fallback.lo, fallback.hi});
  if (v.size() != 2) throw ConfigError(s.qualified(key), "'" + s.qualified(key) + "' must be [lo, hi]");
  return {v[0], v[1]};
}

std::array<Range, 3> ranges3_from(ConfigSection& s, const std::string& key, std::array<Range, 3> fallback) {
  if (!s.has(key)) {
    s.get<Json>(key, Json());
    return fallback;
  }
  auto v = s.get<std::vector<std::vector<double>>>(key, {});
  if (v.size() != 3) throw ConfigError(s.qualified(key), "'" + s.qualified(key) + "' must hold 3 [lo, hi] pairs");
  std::array<Range, 3> out{};
  for (int i = 0; i < 3; ++i) {
    if (v[i].size() != 2) throw ConfigError(s.qualified(key), "'" + s.qualified(key) + "' must hold [lo, hi] pairs");
    out[i] = {v[i][0], v[i][1]};
  }
  return out;
}

Json range_json(const Range& r) { return Json::array({r.lo, r.hi}); }
Json ranges3_json(const std::array<Range, 3>& r) {
  return Json::array({range_json(r[0]), range_json(r[1]), range_json(r[2])});
}

}  // namespace

CorpusSpec CorpusSpec::from_json(const Json& j) {
  CorpusSpec spec;
  ConfigSection s(j, "corpus");
  spec.subjects = s.get<std::size_t>("subjects", spec.subjects);
  spec.dims = s.get<std::array<std::size_t, 3>>("dims", spec.dims);
  spec.score_max = s.get<double>("score_max", spec.score_max);
  spec.mci_threshold = s.get<double>("mci_threshold", spec.mci_threshold);
  spec.ad_threshold = s.get<double>("ad_threshold", spec.ad_threshold);
  spec.seed = s.get<std::uint64_t>("seed", spec.seed);
  {
    ConfigSection r = s.section("ranges");
    spec.ranges.score = range_from(r, "score", spec.ranges.score);
    spec.ranges.translation = ranges3_from(r, "translation", spec.ranges.translation);
    spec.ranges.rotation = ranges3_from(r, "rotation", spec.ranges.rotation);
    spec.ranges.scale = ranges3_from(r, "scale", spec.ranges.scale);
    spec.ranges.gain = range_from(r, "gain", spec.ranges.gain);
    spec.ranges.noise = range_from(r, "noise", spec.ranges.noise);
    r.finish();
  }
  if (s.has("rois")) {
    const Json& arr = s.raw("rois");
    if (!arr.is_array()) throw ConfigError("corpus.rois", "'corpus.rois' must be an array");
    spec.rois.clear();
    for (std::size_t i = 0; i < arr.size(); ++i) {
      ConfigSection r(arr[i], "corpus.rois[" + std::to_string(i) + "]");
      RoiSpec roi;
      roi.name = r.get<std::string>("name", "roi" + std::to_string(i));
      roi.region.center = r.get<std::array<double, 3>>("center", roi.region.center);
      roi.region.radii = r.get<std::array<double, 3>>("radii", roi.region.radii);
      try {
        roi.effect = effect_from_string(r.get<std::string>("effect", "neutral"));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(r.qualified("effect"), e.what());
      }
      roi.strength = r.get<double>("strength", 0.0);
      r.finish();
      spec.rois.push_back(roi);
    }
  }
  s.finish();
  spec.validate();
  return spec;
}

Json CorpusSpec::to_json() const {
  Json j;
  j["subjects"] = subjects;
  j["dims"] = dims;
  j["score_max"] = score_max;
  j["mci_threshold"] = mci_threshold;
  j["ad_threshold"] = ad_threshold;
  j["seed"] = seed;
  j["ranges"] = {{"score", range_json(ranges.score)},
                 {"translation", ranges3_json(ranges.translation)},
                 {"rotation", ranges3_json(ranges.rotation)},
                 {"scale", ranges3_json(ranges.scale)},
                 {"gain", range_json(ranges.gain)},
                 {"noise", range_json(ranges.noise)}};
  Json rs = Json::array();
  for (const auto& r : rois) {
    rs.push_back({{"name", r.name},
                  {"center", r.region.center},
                  {"radii", r.region.radii},
                  {"effect", to_string(r.effect)},
                  {"strength", r.strength}});
  }
  j["rois"] = rs;
  return j;
}

GenerativeFactors sample_factors(const CorpusSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto draw = [&rng](const Range& r) {
    return r.lo == r.hi ? r.lo : std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
  };
  GenerativeFactors f;
  f.seed = seed;
  f.score = draw(spec.ranges.score);
  for (int i = 0; i < 3; ++i) f.translation[i] = draw(spec.ranges.translation[i]);
  for (int i = 0; i < 3; ++i) f.rotation[i] = draw(spec.ranges.rotation[i]);
  for (int i = 0; i < 3; ++i) f.scale[i] = draw(spec.ranges.scale[i]);
  f.gain = draw(spec.ranges.gain);
  f.noise = draw(spec.ranges.noise);
  return f;
}

Volume canonical_phantom(const CorpusSpec& spec, double score) {
  const auto& d = spec.dims;
  Volume v(d[0], d[1], d[2]);
  const double severity = score / spec.score_max;
  for (std::size_t z = 0; z < d[2]; ++z) {
    for (std::size_t y = 0; y < d[1]; ++y) {
      for (std::size_t x = 0; x < d[0]; ++x) {
        const auto u = normalized(d, static_cast<double>(x), static_cast<double>(y), static_cast<double>(z));
        double value = 0.0;
        for (const auto& t : tissues()) {
          const double m = soft_membership(t.shape, u, d);
          value = value * (1.0 - m) + t.intensity * m;
        }
        for (const auto& roi : spec.rois) {
          if (roi.effect == Effect::neutral || ellipsoid_radius(roi.region, u) > 1.0) continue;
          value *= roi.effect == Effect::decrease ? 1.0 - roi.strength * severity
                                                  : 1.0 + roi.strength * severity;
        }
        v.at(x, y, z) = static_cast<float>(value);
      }
    }
  }
  v.provenance = "simvae phantom";
  return v;
}

Volume roi_mask(const CorpusSpec& spec, const RoiSpec& roi) {
  const auto& d = spec.dims;
  Volume v(d[0], d[1], d[2]);
  for (std::size_t z = 0; z < d[2]; ++z)
    for (std::size_t y = 0; y < d[1]; ++y)
      for (std::size_t x = 0; x < d[0]; ++x) {
        const auto u = normalized(d, static_cast<double>(x), static_cast<double>(y), static_cast<double>(z));
        v.at(x, y, z) = ellipsoid_radius(roi.region, u) <= 1.0 ? 1.0f : 0.0f;
      }
  v.provenance = "simvae roi mask " + roi.name;
  return v;
}

Volume apply_geometry(const Volume& base, const GenerativeFactors& f) {
  const auto& d = base.dims;
  Volume out(d[0], d[1], d[2]);
  const Mat3 rot = rotation_matrix(f.rotation);
  const double c[3] = {(d[0] - 1.0) / 2.0, (d[1] - 1.0) / 2.0, (d[2] - 1.0) / 2.0};
  for (std::size_t z = 0; z < d[2]; ++z) {
    for (std::size_t y = 0; y < d[1]; ++y) {
      for (std::size_t x = 0; x < d[0]; ++x) {
        // Invert p = S R (q - c) + c + t.
        const double p[3] = {static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)};
        double s[3];
        for (int i = 0; i < 3; ++i) s[i] = (p[i] - c[i] - f.translation[i]) / f.scale[i];
        double q[3];
        for (int i = 0; i < 3; ++i) q[i] = rot[0][i] * s[0] + rot[1][i] * s[1] + rot[2][i] * s[2] + c[i];
        out.at(x, y, z) = static_cast<float>(sample_trilinear(base, q[0], q[1], q[2]));
      }
    }
  }
  out.spacing = base.spacing;
  out.provenance = base.provenance;
  return out;
}

Volume generate_phantom(const CorpusSpec& spec, const GenerativeFactors& f) {
  const auto& r = spec.ranges;
  check_range("score", r.score, f.score);
  for (int i = 0; i < 3; ++i) {
    check_range("translation", r.translation[i], f.translation[i]);
    check_range("rotation", r.rotation[i], f.rotation[i]);
    check_range("scale", r.scale[i], f.scale[i]);
  }
  check_range("gain", r.gain, f.gain);
  check_range("noise", r.noise, f.noise);

  Volume out = apply_geometry(canonical_phantom(spec, f.score), f);
  for (float& v : out.voxels) v = static_cast<float>(f.gain * v);
  if (f.noise > 0.0) {
    std::mt19937_64 rng(derive_seed(f.seed, {1}));
    std::normal_distribution<double> normal(0.0, f.noise);
    for (float& v : out.voxels) v = static_cast<float>(v + normal(rng));
  }
  out.provenance = "simvae phantom";
  return out;
}

}  // namespace simvae
