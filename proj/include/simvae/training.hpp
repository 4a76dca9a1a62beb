#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "simvae/corpus.hpp"
#include "simvae/losses.hpp"
#include "simvae/model.hpp"

namespace simvae {

struct AdamOptions {
  double learning_rate = 2e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;
  std::uint64_t skipped = 0;

  static AdamState fresh(const std::vector<NamedTensor>& params);
};

// Bias-corrected Adam update in place. Returns false, leaving parameters and
// moments untouched, when any gradient entry is non-finite.
bool adam_step(std::vector<NamedTensor>& params, const std::vector<Tensor>& grads, AdamState& state,
               const AdamOptions& options);

struct HyperParams {
  double beta = 1e-4;
  double alpha = 1e-4;
  std::size_t batch_size = 8;
  std::size_t epochs = 100;
  std::uint64_t seed = 0;
  AdamOptions adam;
  std::string similarity = "pearson";

  void validate() const;
  static HyperParams from_json(const Json& j);
  Json to_json() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  LossBreakdown train;
  LossBreakdown val;
  double val_r = 0.0;
  double val_dispersion = 0.0;
  std::uint64_t skipped_steps = 0;
};

using TrainingHistory = std::vector<EpochRecord>;

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Eval-mode metrics on mu: reconstruction of mu, pearson(mu_k, y) averaged over
// the supervised columns, and the dispersion of all mu rows.
struct Evaluation {
  LossBreakdown loss;
  double r = 0.0;
  bool degenerate_r = false;
  double dispersion = 0.0;
  std::vector<std::vector<double>> mu;
};

Evaluation evaluate(VaeModel& model, const Dataset& data, const HyperParams& hp, std::size_t chunk = 16);

// Index batches for one epoch: a seeded shuffle cut into batch_size chunks. A
// trailing batch too small for batch norm (< 2) or, with alpha > 0, for the
// similarity term (< 3) is folded into the previous one.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, const HyperParams& hp, std::size_t epoch);

struct Trainer {
  VaeModel model;
  HyperParams hp;
  AdamState adam;
  TrainingHistory history;

  Trainer(VaeModel model, HyperParams hp);

  // One optimizer step per batch over `train`; evaluates on `val` when it has
  // at least one subject. Appends and returns the epoch record.
  const EpochRecord& train_epoch(const Dataset& train, const Dataset& val);

  // Runs until history.size() == hp.epochs, calling on_epoch after each one.
  void fit(const Dataset& train, const Dataset& val,
           const std::function<void(const Trainer&)>& on_epoch = {});
};

// Versioned little-endian container: model config, hyperparameters, parameters,
// running statistics, Adam state and history.
void save_checkpoint(const Trainer& trainer, const std::filesystem::path& path);
Trainer load_checkpoint(const std::filesystem::path& path);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One line per epoch.
std::string history_csv(const TrainingHistory& history);

// FNV-1a over every parameter and running statistic value.
std::uint64_t parameter_hash(const VaeModel& model);

}  // namespace simvae
