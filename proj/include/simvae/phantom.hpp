#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "simvae/config.hpp"
#include "simvae/volume.hpp"

namespace simvae {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  bool contains(double v) const { return v >= lo && v <= hi; }
};

// Ellipsoid in normalized coordinates: each axis spans [-1, 1] across the volume.
struct Ellipsoid {
  std::array<double, 3> center{0, 0, 0};
  std::array<double, 3> radii{1, 1, 1};
};

enum class Effect { decrease, increase, neutral };

std::string to_string(Effect e);
Effect effect_from_string(const std::string& s);

// Region whose intensity is scaled by (1 - strength * y / y_max) for `decrease`
// and (1 + strength * y / y_max) for `increase`.
struct RoiSpec {
  std::string name;
  Ellipsoid region;
  Effect effect = Effect::neutral;
  double strength = 0.0;
};

struct FactorRanges {
  Range score{0.0, 85.0};
  std::array<Range, 3> translation{Range{-2, 2}, Range{-2, 2}, Range{-2, 2}};  // voxels
  std::array<Range, 3> rotation{Range{-4, 4}, Range{-4, 4}, Range{-4, 4}};    // degrees
  std::array<Range, 3> scale{Range{0.95, 1.05}, Range{0.95, 1.05}, Range{0.95, 1.05}};
  Range gain{0.9, 1.1};
  Range noise{0.01, 0.03};
};

struct CorpusSpec {
  std::size_t subjects = 200;
  std::array<std::size_t, 3> dims{32, 32, 32};  // nx, ny, nz
  std::vector<RoiSpec> rois = default_rois();
  FactorRanges ranges;
  double score_max = 85.0;
  // y < mci_threshold -> HC, y < ad_threshold -> MCI, else AD.
  double mci_threshold = 20.0;
  double ad_threshold = 40.0;
  std::uint64_t seed = 0;

  static std::vector<RoiSpec> default_rois();

  void validate() const;
  static CorpusSpec from_json(const Json& j);
  Json to_json() const;
};

struct GenerativeFactors {
  double score = 0.0;
  std::array<double, 3> translation{0, 0, 0};
  std::array<double, 3> rotation{0, 0, 0};
  std::array<double, 3> scale{1, 1, 1};
  double gain = 1.0;
  double noise = 0.0;
  std::uint64_t seed = 0;
};

GenerativeFactors sample_factors(const CorpusSpec& spec, std::uint64_t seed);

// Noise-free, untransformed phantom with the severity modulation applied.
Volume canonical_phantom(const CorpusSpec& spec, double score);

// Full forward model: canonical phantom -> rotation -> scale -> translation
// (trilinear resampling about the volume center) -> gain -> Gaussian noise.
Volume generate_phantom(const CorpusSpec& spec, const GenerativeFactors& factors);

// Rotation, scale and translation about the volume center, trilinear, zero outside.
Volume apply_geometry(const Volume& base, const GenerativeFactors& factors);

// Binary mask of one ROI in canonical (untransformed) space.
Volume roi_mask(const CorpusSpec& spec, const RoiSpec& roi);

}  // namespace simvae
