#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "simvae/corpus.hpp"
#include "simvae/model.hpp"
#include "simvae/volume.hpp"

namespace simvae {

using Shape3 = std::array<std::size_t, 3>;  // D, H, W
using Codes = std::vector<std::vector<double>>;

struct Correlation {
  double r = 0.0;
  double t = 0.0;
  double p = 1.0;
  std::size_t n = 0;
  bool degenerate = false;
};

// Two-sided p-value of a Student t statistic. Exact for df < 30 (closed-form
// series for integer df), normal tail beyond.
double t_two_sided_p(double t, std::size_t df);

// Pearson r of two series with t = r sqrt((n-2)/(1-r^2)). Requires n >= 3.
Correlation correlate(std::span<const double> a, std::span<const double> b);

// Correlation of latent column `k` of the codes with a per-subject covariate.
Correlation correlate_latent(const Codes& codes, std::size_t k, std::span<const double> covariate);

// Latent column k of a code table.
std::vector<double> column(const Codes& codes, std::size_t k);

// Decodes rows one at a time in eval mode; each volume is D*H*W, W fastest.
std::vector<std::vector<double>> decode_rows(VaeModel& model, const Codes& codes);

// Mean of M decodings of (z0, eps) with z0 in the first supervised column and
// eps ~ tail_scale * N(0, I) drawn from `seed` on the remaining columns.
std::vector<double> average_reconstruction(VaeModel& model, double z0, std::size_t samples,
                                           std::uint64_t seed, double tail_scale = 1.0);

struct GlmMap {
  Shape3 shape{0, 0, 0};
  std::vector<double> slope;
  std::vector<double> intercept;
  std::vector<double> t;
  std::string design;
};

// Per voxel OLS of intensity on [1, regressor].
GlmMap glm_voxelwise(const std::vector<std::vector<double>>& volumes, std::span<const double> regressor,
                     Shape3 shape, std::size_t threads = 1);

// `levels` evenly spaced z0 values over [lo, hi]; average reconstruction at each
// (seed derive_seed(seed, {level})), then the voxelwise GLM on z0.
struct ReconstructionGlm {
  std::vector<double> levels;
  std::vector<std::vector<double>> reconstructions;
  GlmMap map;
};
ReconstructionGlm reconstruction_glm(VaeModel& model, double lo, double hi, std::size_t levels,
                                     std::size_t samples, std::uint64_t seed, std::size_t threads = 1);

// slope.vol, intercept.vol and t.vol under `dir`.
void save_glm_map(const GlmMap& map, const std::filesystem::path& dir);

Volume to_volume(std::span<const double> values, Shape3 shape, const std::string& provenance = {});

struct RoiSummary {
  double mean_slope = 0.0;
  double negative_fraction = 0.0;
  std::size_t voxels = 0;
};

// Statistics over voxels where mask > 0.5. The mask is an nx, ny, nz volume.
RoiSummary roi_summary(const GlmMap& map, const Volume& mask);

struct LogisticOptions {
  double lambda = 1e-4;
  double tolerance = 1e-8;
  std::size_t max_iterations = 200;
};

// Maximizes sum log p(y|x) - lambda/2 |w|^2 (intercept unpenalized) by Newton
// (iteratively reweighted least squares) with backtracking.
struct LogisticModel {
  std::vector<double> weights;
  double intercept = 0.0;
  std::size_t iterations = 0;
  double gradient_norm = 0.0;

  double decision(std::span<const double> x) const;
  int predict(std::span<const double> x) const { return decision(x) > 0.0 ? 1 : 0; }
};

LogisticModel logistic_fit(const Codes& features, std::span<const int> labels, const LogisticOptions& options = {});

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

struct BinaryMetrics {
  double accuracy = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
  double balanced = 0.0;
};

// Positive class is 1. Both classes must be present.
BinaryMetrics binary_metrics(std::span<const int> truth, std::span<const int> predicted);

struct ClassificationReport {
  std::string input_set;
  std::size_t resamples = 0;
  MeanStd accuracy, sensitivity, specificity, balanced;
  std::vector<BinaryMetrics> runs;
};

struct BootstrapOptions {
  std::size_t resamples = 10;
  std::uint64_t seed = 0;
  std::size_t max_redraws = 100;
  LogisticOptions logistic;
};

// Each resample draws the training rows with replacement (redrawn when a class
// is missing), fits, and scores on the fixed test rows.
ClassificationReport bootstrap_classify(const Codes& train_x, std::span<const int> train_y, const Codes& test_x,
                                        std::span<const int> test_y, const BootstrapOptions& options,
                                        const std::string& input_set = {});

enum class InputKind { supervised, remaining, covariate, latent };

struct InputSet {
  InputKind kind = InputKind::supervised;
  std::size_t latent = 0;  // for InputKind::latent

  std::string name() const;
};

// Feature table for one input set. `supervised` lists the supervised columns.
Codes select_features(const Codes& codes, std::span<const double> covariate, std::span<const std::size_t> supervised,
                      const InputSet& set);

// Rows of `data` diagnosed AD or HC, with label 1 for AD.
struct BinaryCohort {
  std::vector<std::size_t> rows;
  std::vector<int> labels;
};
BinaryCohort ad_vs_hc(const Dataset& data);

struct TraversalSheet {
  std::size_t latent = 0;
  Shape3 shape{0, 0, 0};
  std::vector<double> values;
  std::vector<std::vector<double>> volumes;
};

// Decodes the zero code with entry `latent` set to `steps` evenly spaced values
// over [lo, hi], one code per decode.
TraversalSheet latent_traversal(VaeModel& model, std::size_t latent, double lo, double hi, std::size_t steps);

// [min, max] of latent column k.
std::pair<double, double> observed_range(const Codes& codes, std::size_t k);

// Mid-plane slices, one column per step; rows are axial, coronal, sagittal.
// Shared min/max grayscale mapping.
std::string traversal_pgm(const TraversalSheet& sheet);

// Intensity-weighted centroid (x, y, z) in voxels; negative intensities count as 0.
std::array<double, 3> intensity_centroid(std::span<const double> volume, Shape3 shape);

}  // namespace simvae
