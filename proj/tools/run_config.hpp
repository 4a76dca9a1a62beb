#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include "simvae/analysis.hpp"
#include "simvae/config.hpp"
#include "simvae/corpus.hpp"
#include "simvae/model.hpp"
#include "simvae/phantom.hpp"
#include "simvae/sweep.hpp"
#include "simvae/training.hpp"

namespace simvae::cli {

// Bad flags, bad config, incompatible inputs: exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataOptions {
  std::array<double, 3> split = kDefaultSplit;  // train, val, test
  std::uint64_t split_seed = 0;
  double gamma = 1.0;
};

struct AnalysisOptions {
  std::size_t levels = 11;
  std::size_t samples = 32;
  std::size_t resamples = 10;
  double lambda = 1e-4;
  std::size_t traversal_steps = 7;
  std::uint64_t seed = 0;
};

struct RunConfig {
  std::optional<std::uint64_t> seed;
  std::string output_dir = "runs";
  std::size_t threads = 1;
  CorpusSpec corpus;
  ModelConfig model = ModelConfig::desk();
  bool model_explicit = false;
  HyperParams training;
  bool alpha_explicit = false;
  SweepSpec sweep;
  DataOptions data;
  AnalysisOptions analysis;

  // Sets every module seed.
  void apply_seed(std::uint64_t s);

  static RunConfig from_json(const Json& j);
  Json to_json() const;
};

// Missing path -> defaults. Parse and validation problems become UsageError.
RunConfig load_run_config(const std::optional<std::filesystem::path>& path);

// Defaults of every section, for --help.
std::string documented_defaults();

}  // namespace simvae::cli
