#include "run_config.hpp"

namespace simvae::cli {

void RunConfig::apply_seed(std::uint64_t s) {
  seed = s;
  corpus.seed = s;
  model.seed = s;
  training.seed = s;
  data.split_seed = s;
  analysis.seed = s;
}

RunConfig RunConfig::from_json(const Json& j) {
  RunConfig c;
  ConfigSection s(j, "");
  if (s.has("seed")) c.seed = s.get<std::uint64_t>("seed", 0);
  c.output_dir = s.get<std::string>("output_dir", c.output_dir);
  c.threads = s.get<std::size_t>("threads", c.threads);
  c.corpus = CorpusSpec::from_json(s.raw("corpus"));
  c.model_explicit = s.has("model");
  c.model = ModelConfig::from_json(s.raw("model"));
  const Json& training = s.raw("training");
  c.alpha_explicit = training.contains("alpha");
  c.training = HyperParams::from_json(training);
  c.sweep = SweepSpec::from_json(s.raw("sweep"));
  {
    ConfigSection d = s.section("data");
    c.data.split = d.get<std::array<double, 3>>("split", c.data.split);
    c.data.split_seed = d.get<std::uint64_t>("split_seed", c.data.split_seed);
    c.data.gamma = d.get<double>("gamma", c.data.gamma);
    d.finish();
  }
  {
    ConfigSection a = s.section("analysis");
    auto& o = c.analysis;
    o.levels = a.get<std::size_t>("levels", o.levels);
    o.samples = a.get<std::size_t>("samples", o.samples);
    o.resamples = a.get<std::size_t>("resamples", o.resamples);
    o.lambda = a.get<double>("lambda", o.lambda);
    o.traversal_steps = a.get<std::size_t>("traversal_steps", o.traversal_steps);
    o.seed = a.get<std::uint64_t>("seed", o.seed);
    a.finish();
    if (o.levels < 3) throw ConfigError("analysis.levels", "analysis.levels must be >= 3");
    if (o.samples < 1) throw ConfigError("analysis.samples", "analysis.samples must be >= 1");
    if (o.resamples < 1) throw ConfigError("analysis.resamples", "analysis.resamples must be >= 1");
    if (o.traversal_steps < 2) throw ConfigError("analysis.traversal_steps", "analysis.traversal_steps must be >= 2");
    if (!(o.lambda >= 0.0)) throw ConfigError("analysis.lambda", "analysis.lambda must be >= 0");
  }
  s.finish();
  if (c.threads < 1) throw ConfigError("threads", "threads must be >= 1");
  if (c.seed) c.apply_seed(*c.seed);
  return c;
}

Json RunConfig::to_json() const {
  Json j;
  if (seed) j["seed"] = *seed;
  j["output_dir"] = output_dir;
  j["threads"] = threads;
  j["corpus"] = corpus.to_json();
  j["model"] = model.to_json();
  j["training"] = training.to_json();
  j["sweep"] = sweep.to_json();
  j["data"] = {{"split", data.split}, {"split_seed", data.split_seed}, {"gamma", data.gamma}};
  j["analysis"] = {{"levels", analysis.levels},       {"samples", analysis.samples},
                   {"resamples", analysis.resamples}, {"lambda", analysis.lambda},
                   {"traversal_steps", analysis.traversal_steps}, {"seed", analysis.seed}};
  return j;
}

RunConfig load_run_config(const std::optional<std::filesystem::path>& path) {
  try {
    if (!path) return RunConfig::from_json(Json::object());
    if (!std::filesystem::exists(*path)) throw UsageError("config file not found: " + path->string());
    return RunConfig::from_json(read_json_file(*path));
  } catch (const ConfigError& e) {
    throw UsageError(e.key().empty() ? std::string(e.what()) : "config key '" + e.key() + "': " + e.what());
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("invalid config: ") + e.what());
  }
}

std::string documented_defaults() {
  return "Config file (JSON); every key is optional and unknown keys are rejected.\n"
         "Top level: seed (sets every module seed), output_dir, threads.\n"
         "model.preset is one of desk, paper, paper-literal; other model keys override it.\n"
         "Defaults:\n" +
         RunConfig{}.to_json().dump(2) +
         "\nEnvironment: SIMVAE_OUTPUT_ROOT overrides output_dir, SIMVAE_THREADS overrides threads.\n";
}

}  // namespace simvae::cli
