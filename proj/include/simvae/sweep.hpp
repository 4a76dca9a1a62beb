#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "simvae/training.hpp"

namespace simvae {

enum class GridKind {
  dim_beta,    // rows: latent dimensionality d, cols: beta; alpha fixed to 0; metric D_mu
  beta_alpha,  // rows: beta, cols: alpha; d fixed; metric pearson r
};

std::string to_string(GridKind k);
GridKind grid_kind_from_string(const std::string& s);

enum class Regime { collapse, stable, autoencoder_like, non_informative, similarity_dominated, failed };

std::string to_string(Regime r);

enum class ThresholdScope { grid, row };

struct RegimeThresholds {
  // tau_low = tau_low_fraction * median(D_mu over the grid).
  double tau_low_fraction = 0.05;
  // tau_high = this percentile of D_mu over tau_high_scope.
  double tau_high_percentile = 90.0;
  ThresholdScope tau_high_scope = ThresholdScope::row;
  double rho_low = 0.3;
  double rho_high = 0.95;
  double kappa = 2.0;

  void validate() const;
};

struct SweepSpec {
  GridKind kind = GridKind::beta_alpha;
  std::vector<double> rows;
  std::vector<double> cols;
  RegimeThresholds thresholds;
  std::size_t threads = 1;

  void validate() const;
  static SweepSpec from_json(const Json& j);
  Json to_json() const;
};

struct PhaseCell {
  std::size_t row = 0, col = 0;
  double row_value = 0.0, col_value = 0.0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  // Converged values: means over the final 10% of epochs.
  double dispersion = 0.0;
  double r = 0.0;
  double val_mse = 0.0;
  Regime regime = Regime::failed;

  // D_mu for dim-beta grids, pearson r for beta-alpha grids.
  double metric(GridKind kind) const { return kind == GridKind::dim_beta ? dispersion : r; }
};

struct PhaseGrid {
  GridKind kind = GridKind::beta_alpha;
  std::vector<double> rows, cols;
  std::vector<PhaseCell> cells;  // row-major

  const PhaseCell& at(std::size_t i, std::size_t j) const { return cells.at(i * cols.size() + j); }
  PhaseCell& at(std::size_t i, std::size_t j) { return cells.at(i * cols.size() + j); }
  std::string row_name() const { return kind == GridKind::dim_beta ? "d" : "beta"; }
  std::string col_name() const { return kind == GridKind::dim_beta ? "beta" : "alpha"; }
};

// Mean of the last max(1, ceil(0.1 * epochs)) entries.
double converged_value(const std::vector<double>& series);

// Labels every cell; failed cells stay `failed`.
void classify_regimes(PhaseGrid& grid, const RegimeThresholds& thresholds);

struct SweepInputs {
  ModelConfig model;
  HyperParams training;
  const Dataset* train = nullptr;
  const Dataset* val = nullptr;
};

// Trains one model per cell with seed derive_seed(training.seed, {i, j}) and
// classifies the grid. Cell failures are recorded and do not stop the sweep.
PhaseGrid run_sweep(const SweepSpec& spec, const SweepInputs& inputs,
                    const std::function<void(const PhaseCell&)>& on_cell = {});

std::string grid_csv(const PhaseGrid& grid);

// Binary PGM, `cell_px` pixels per cell, rows top to bottom; min -> black,
// max -> white, failed cells black. Beta-alpha grids render |r|.
std::string grid_pgm(const PhaseGrid& grid, std::size_t cell_px = 16);

}  // namespace simvae
