#include "commands.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/basic_file_sink.h>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "run_config.hpp"
#include "simvae/seed.hpp"

namespace simvae::cli {

namespace fs = std::filesystem;

namespace {

struct Common {
  std::optional<fs::path> config;
  std::optional<fs::path> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
};

void add_common(CLI::App& app, Common& c, bool with_config = true) {
  if (with_config) app.add_option("--config", c.config, "JSON run config")->check(CLI::ExistingFile);
  app.add_option("--out", c.out, "output directory (default: <output root>/<command>-<UTC stamp>)");
  app.add_option("--seed", c.seed, "seed for every module; overrides the config");
  app.add_option("--threads", c.threads, "worker cap; overrides SIMVAE_THREADS and the config");
  app.footer(documented_defaults());
}

std::size_t resolve_threads(const Common& c, const RunConfig& cfg) {
  if (c.threads) {
    if (*c.threads < 1) throw UsageError("--threads must be >= 1");
    return *c.threads;
  }
  if (const char* env = std::getenv("SIMVAE_THREADS"); env && *env) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
    throw UsageError(std::string("SIMVAE_THREADS must be a positive integer, got '") + env + "'");
  }
  return cfg.threads;
}

fs::path resolve_out(const Common& c, const RunConfig& cfg, const std::string& command) {
  if (c.out) return *c.out;
  fs::path root = cfg.output_dir;
  if (const char* env = std::getenv("SIMVAE_OUTPUT_ROOT"); env && *env) root = env;
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream stamp;
  stamp << command << '-' << std::put_time(&tm, "%Y%m%d-%H%M%S");
  fs::path dir = root / stamp.str();
  for (int k = 1; fs::exists(dir); ++k) dir = root / (stamp.str() + "-" + std::to_string(k));
  return dir;
}

RunConfig prepare(const Common& c) {
  RunConfig cfg = load_run_config(c.config);
  if (c.seed) cfg.apply_seed(*c.seed);
  return cfg;
}

std::shared_ptr<spdlog::logger> open_log(const fs::path& out) {
  fs::create_directories(out);
  auto console = std::make_shared<spdlog::sinks::stderr_sink_mt>();
  auto file = std::make_shared<spdlog::sinks::basic_file_sink_mt>((out / "run.log").string(), true);
  auto log = std::make_shared<spdlog::logger>("simvae", spdlog::sinks_init_list{console, file});
  log->set_pattern("[%Y-%m-%d %H:%M:%S] [%l] %v");
  log->flush_on(spdlog::level::info);
  return log;
}

// files.json: every produced file except the log, sorted, with size and FNV-1a.
void write_files_manifest(const fs::path& out) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(out)) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), out);
    if (rel == "run.log" || rel == "files.json") continue;
    files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  Json list = Json::array();
  for (const auto& rel : files) {
    std::ifstream in(out / rel, std::ios::binary);
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ostringstream hex;
    hex << std::hex << std::setw(16) << std::setfill('0') << fnv1a(bytes);
    list.push_back({{"path", rel.generic_string()}, {"bytes", bytes.size()}, {"fnv1a", hex.str()}});
  }
  write_file_atomic(out / "files.json", Json{{"files", list}}.dump(2) + "\n");
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  write_file_atomic(path, text);
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

struct LoadedData {
  Dataset all, train, val, test;
  Split split;
};

LoadedData load_data(const fs::path& dir, const RunConfig& cfg) {
  const fs::path manifest_path = fs::is_directory(dir) ? dir / "manifest.csv" : dir;
  if (!fs::exists(manifest_path)) throw UsageError("no corpus manifest at " + manifest_path.string());
  LoadedData d;
  d.all = load_dataset(read_manifest(manifest_path), cfg.data.gamma);
  d.split = split_dataset(d.all.ids, cfg.data.split, cfg.data.split_seed);
  d.train = d.all.subset(d.split.train);
  d.val = d.all.subset(d.split.val);
  d.test = d.all.subset(d.split.test);
  return d;
}

void check_shape(const ModelConfig& m, const Dataset& d) {
  if (m.input != d.shape) {
    std::ostringstream os;
    os << "model input " << m.input[0] << 'x' << m.input[1] << 'x' << m.input[2] << " does not match the corpus volumes "
       << d.shape[0] << 'x' << d.shape[1] << 'x' << d.shape[2];
    throw UsageError(os.str());
  }
}

Json split_json(const Split& s) { return {{"train", s.train}, {"val", s.val}, {"test", s.test}}; }

// ---------------------------------------------------------------- gen-data

struct GenDataArgs {
  Common common;
  std::optional<fs::path> spec;
  std::optional<std::size_t> subjects;
};

int gen_data(const GenDataArgs& a) {
  RunConfig cfg = prepare(a.common);
  CorpusSpec spec = cfg.corpus;
  if (a.spec) {
    try {
      spec = CorpusSpec::from_json(read_json_file(*a.spec));
    } catch (const ConfigError& e) {
      throw UsageError("spec key '" + e.key() + "': " + e.what());
    } catch (const std::invalid_argument& e) {
      throw UsageError(std::string("invalid spec: ") + e.what());
    }
  }
  if (a.common.seed) spec.seed = *a.common.seed;
  if (a.subjects) spec.subjects = *a.subjects;
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("invalid spec: ") + e.what());
  }
  const std::size_t threads = resolve_threads(a.common, cfg);
  const fs::path out = resolve_out(a.common, cfg, "gen-data");
  auto log = open_log(out);
  log->info("generating {} subjects of {}x{}x{} (seed {}) into {}", spec.subjects, spec.dims[0], spec.dims[1],
            spec.dims[2], spec.seed, out.string());
  const Manifest m = generate_corpus(spec, out, threads);
  write_files_manifest(out);

  std::map<Diagnosis, std::size_t> dx;
  const std::size_t bins = 10;
  std::vector<std::size_t> hist(bins, 0);
  for (const auto& s : m.subjects) {
    ++dx[s.diagnosis];
    const auto b = static_cast<std::size_t>(s.score / spec.score_max * static_cast<double>(bins));
    ++hist[std::min(b, bins - 1)];
  }
  std::cout << "subjects " << m.subjects.size() << " (HC " << dx[Diagnosis::HC] << ", MCI " << dx[Diagnosis::MCI]
            << ", AD " << dx[Diagnosis::AD] << ")\nscore histogram:\n";
  for (std::size_t b = 0; b < bins; ++b) {
    const double lo = spec.score_max * static_cast<double>(b) / bins, hi = spec.score_max * static_cast<double>(b + 1) / bins;
    std::cout << "  [" << std::setw(5) << std::fixed << std::setprecision(1) << lo << ", " << std::setw(5) << hi
              << ") " << std::setw(5) << hist[b] << ' ' << std::string(hist[b] * 40 / std::max<std::size_t>(1, m.subjects.size()), '#')
              << '\n';
  }
  std::cout << "wrote " << out.string() << '\n';
  return 0;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  Common common;
  fs::path data;
  std::optional<fs::path> resume;
  std::optional<std::size_t> epochs;
  std::size_t checkpoint_every = 1;
};

int train(const TrainArgs& a) {
  RunConfig cfg = prepare(a.common);
  if (a.epochs) cfg.training.epochs = *a.epochs;
  if (a.checkpoint_every < 1) throw UsageError("--checkpoint-every must be >= 1");
  LoadedData data = load_data(a.data, cfg);

  std::optional<Trainer> trainer;
  if (a.resume) {
    try {
      trainer.emplace(load_checkpoint(*a.resume));
    } catch (const CheckpointError& e) {
      throw UsageError(std::string("cannot resume: ") + e.what());
    }
    if (cfg.model_explicit && trainer->model.config().hash() != cfg.model.hash()) {
      throw UsageError("checkpoint model config does not match the run config");
    }
    cfg.model = trainer->model.config();
    if (a.epochs) trainer->hp.epochs = *a.epochs;
    cfg.training = trainer->hp;
  } else {
    try {
      trainer.emplace(build_model(cfg.model), cfg.training);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  check_shape(cfg.model, data.all);
  if (data.train.size() < 2) throw UsageError("the training split needs at least 2 subjects");

  const fs::path out = resolve_out(a.common, cfg, "train");
  auto log = open_log(out);
  write_text(out / "config.json", cfg.to_json().dump(2) + "\n");
  write_text(out / "split.json", split_json(data.split).dump(2) + "\n");
  log->info("training {} parameters on {} subjects (val {}, test {}), {} epochs", trainer->model.parameter_count(),
            data.train.size(), data.val.size(), data.test.size(), trainer->hp.epochs);

  const fs::path ckpt = out / "checkpoint.bin";
  trainer->fit(data.train, data.val, [&](const Trainer& t) {
    const auto& e = t.history.back();
    log->info("epoch {:>4}  train {:.6g}  val_mse {:.6g}  val_r {:+.4f}  D_mu {:.4g}  skipped {}", e.epoch,
              e.train.total, e.val.mse, e.val_r, e.val_dispersion, e.skipped_steps);
    if (t.history.size() % a.checkpoint_every == 0 || t.history.size() == t.hp.epochs) {
      save_checkpoint(t, ckpt);
      write_file_atomic(out / "history.csv", history_csv(t.history));
    }
  });
  if (trainer->history.empty()) throw std::runtime_error("no epochs were run");
  save_checkpoint(*trainer, ckpt);
  write_file_atomic(out / "history.csv", history_csv(trainer->history));
  write_files_manifest(out);
  const auto& last = trainer->history.back();
  std::cout << "final epoch " << last.epoch << ": val_mse=" << last.val.mse << " val_r=" << last.val_r
            << " val_dispersion=" << last.val_dispersion << "\nwrote " << out.string() << '\n';
  return 0;
}

// ---------------------------------------------------------------- sweep

struct SweepArgs {
  Common common;
  fs::path data;
  std::optional<std::string> grid;
};

int sweep(const SweepArgs& a) {
  RunConfig cfg = prepare(a.common);
  if (a.grid) {
    // Re-read the sweep section so per-grid axis defaults follow the chosen grid.
    Json j = a.common.config ? read_json_file(*a.common.config) : Json::object();
    Json section = j.contains("sweep") ? j["sweep"] : Json::object();
    section["grid"] = *a.grid;
    try {
      cfg.sweep = SweepSpec::from_json(section);
    } catch (const ConfigError& e) {
      throw UsageError("config key '" + e.key() + "': " + e.what());
    }
  }
  if (cfg.sweep.kind == GridKind::dim_beta) {
    if (cfg.alpha_explicit && cfg.training.alpha != 0.0) {
      throw UsageError("the dim-beta grid fixes alpha = 0, but training.alpha is " + fmt_double(cfg.training.alpha));
    }
    cfg.training.alpha = 0.0;
  }
  cfg.sweep.threads = resolve_threads(a.common, cfg);
  LoadedData data = load_data(a.data, cfg);
  check_shape(cfg.model, data.all);
  try {
    plan_model(cfg.model);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  const fs::path out = resolve_out(a.common, cfg, "sweep");
  auto log = open_log(out);
  write_text(out / "config.json", cfg.to_json().dump(2) + "\n");
  log->info("{} sweep: {} x {} cells, {} epochs each, {} threads", to_string(cfg.sweep.kind), cfg.sweep.rows.size(),
            cfg.sweep.cols.size(), cfg.training.epochs, cfg.sweep.threads);
  const SweepInputs inputs{cfg.model, cfg.training, &data.train, &data.val};
  const PhaseGrid grid = run_sweep(cfg.sweep, inputs, [&](const PhaseCell& c) {
    if (c.ok) {
      const bool dim = cfg.sweep.kind == GridKind::dim_beta;
      log->info("cell ({}, {}) {}={} {}={}: D_mu {:.4g}  r {:+.4f}  val_mse {:.6g}", c.row, c.col, dim ? "d" : "beta",
                c.row_value, dim ? "beta" : "alpha", c.col_value, c.dispersion, c.r, c.val_mse);
    } else {
      log->warn("cell ({}, {}) failed: {}", c.row, c.col, c.error);
    }
  });
  write_text(out / "grid.csv", grid_csv(grid));
  write_text(out / "grid.pgm", grid_pgm(grid));
  write_files_manifest(out);

  std::size_t ok = 0;
  std::map<std::string, std::size_t> labels;
  for (const auto& c : grid.cells) {
    ok += c.ok;
    ++labels[to_string(c.regime)];
  }
  std::cout << ok << " of " << grid.cells.size() << " cells succeeded;";
  for (const auto& [name, n] : labels) std::cout << ' ' << name << '=' << n;
  std::cout << "\nwrote " << out.string() << '\n';
  return ok > 0 ? 0 : 1;
}

// ---------------------------------------------------------------- analyze

struct AnalyzeArgs {
  Common common;
  fs::path checkpoint;
  fs::path data;
  std::vector<std::string> tasks{"correlate", "glm", "classify", "traverse"};
  std::vector<fs::path> masks;
  std::optional<fs::path> split;
};

// Score, mean intensity inside each mask, then the planted nuisance factors when
// the manifest records them.
std::vector<std::pair<std::string, std::vector<double>>> covariates(
    const Dataset& d, const std::vector<std::pair<std::string, Volume>>& masks) {
  std::vector<std::pair<std::string, std::vector<double>>> out{{"score", d.scores}};
  for (const auto& [name, mask] : masks) {
    std::vector<double> means;
    for (const auto& v : d.volumes) {
      double s = 0.0;
      std::size_t n = 0;
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (mask.voxels[i] > 0.5f) {
          s += v[i];
          ++n;
        }
      }
      means.push_back(n ? s / static_cast<double>(n) : 0.0);
    }
    out.emplace_back("roi_" + name, std::move(means));
  }
  const bool factors = std::all_of(d.factors.begin(), d.factors.end(), [](const auto& f) { return f.has_value(); });
  if (!factors || d.size() == 0) return out;
  const char* axes = "xyz";
  for (int k = 0; k < 3; ++k) {
    std::vector<double> t, r, s;
    for (const auto& f : d.factors) {
      t.push_back(f->translation[k]);
      r.push_back(f->rotation[k]);
      s.push_back(f->scale[k]);
    }
    out.emplace_back(std::string("t") + axes[k], t);
    out.emplace_back(std::string("r") + axes[k], r);
    out.emplace_back(std::string("s") + axes[k], s);
  }
  std::vector<double> gain;
  for (const auto& f : d.factors) gain.push_back(f->gain);
  out.emplace_back("gain", gain);
  return out;
}

int analyze(const AnalyzeArgs& a) {
  RunConfig cfg = prepare(a.common);
  const std::set<std::string> known{"correlate", "glm", "classify", "traverse"};
  std::set<std::string> tasks;
  for (const auto& t : a.tasks) {
    if (!known.count(t)) throw UsageError("unknown task '" + t + "' (correlate, glm, classify, traverse)");
    tasks.insert(t);
  }
  if (!fs::exists(a.checkpoint)) throw UsageError("checkpoint not found: " + a.checkpoint.string());
  std::optional<Trainer> trainer;
  try {
    trainer.emplace(load_checkpoint(a.checkpoint));
  } catch (const CheckpointError& e) {
    throw UsageError(std::string("incompatible checkpoint: ") + e.what());
  }
  VaeModel& model = trainer->model;
  if (cfg.model_explicit && model.config().hash() != cfg.model.hash()) {
    throw UsageError("incompatible checkpoint: its model config hash differs from the run config");
  }
  LoadedData data = load_data(a.data, cfg);
  if (a.split) {
    const Json s = read_json_file(*a.split);
    data.split.train = s.at("train").get<std::vector<std::string>>();
    data.split.val = s.at("val").get<std::vector<std::string>>();
    data.split.test = s.at("test").get<std::vector<std::string>>();
    try {
      data.train = data.all.subset(data.split.train);
      data.test = data.all.subset(data.split.test);
    } catch (const std::exception& e) {
      throw UsageError(std::string("split does not match the corpus: ") + e.what());
    }
  }
  try {
    check_shape(model.config(), data.all);
  } catch (const UsageError& e) {
    throw UsageError(std::string("incompatible checkpoint: ") + e.what());
  }
  if (data.test.size() < 3) throw UsageError("the test split needs at least 3 subjects");

  // Masks: explicit files, else the planted ROIs of the corpus.
  std::vector<std::pair<std::string, Volume>> masks;
  const Shape3 shape{model.config().input[0], model.config().input[1], model.config().input[2]};
  const std::array<std::size_t, 3> mask_dims{shape[2], shape[1], shape[0]};
  for (const auto& p : a.masks) {
    if (!fs::exists(p)) throw UsageError("mask file not found: " + p.string());
    Volume v;
    try {
      v = load_volume(p);
    } catch (const std::exception& e) {
      throw UsageError("cannot read mask " + p.string() + ": " + e.what());
    }
    if (v.dims != mask_dims) throw UsageError("mask " + p.string() + " does not match the volume shape");
    masks.emplace_back(p.stem().string(), std::move(v));
  }
  const fs::path corpus_json = (fs::is_directory(a.data) ? a.data : a.data.parent_path()) / "corpus.json";
  if (a.masks.empty() && (tasks.count("glm") || tasks.count("correlate")) && fs::exists(corpus_json)) {
    const CorpusSpec spec = CorpusSpec::from_json(read_json_file(corpus_json));
    if (spec.dims == mask_dims) {
      for (const auto& roi : spec.rois) masks.emplace_back(roi.name, roi_mask(spec, roi));
    }
  }

  const std::size_t threads = resolve_threads(a.common, cfg);
  const fs::path out = resolve_out(a.common, cfg, "analyze");
  auto log = open_log(out);
  const auto& sup = model.config().supervised;
  const std::size_t z0 = sup.empty() ? 0 : sup.front();
  const std::size_t d = model.config().latent;

  const Codes test_codes = evaluate(model, data.test, trainer->hp).mu;
  log->info("encoded {} test subjects", data.test.size());
  if (tasks.count("correlate")) {
    std::ostringstream os;
    os << "id,score,diagnosis";
    for (std::size_t k = 0; k < d; ++k) os << ",mu_" << k;
    os << '\n';
    for (std::size_t i = 0; i < data.test.size(); ++i) {
      os << data.test.ids[i] << ',' << fmt_double(data.test.scores[i]) << ',' << to_string(data.test.diagnoses[i]);
      for (double v : test_codes[i]) os << ',' << fmt_double(v);
      os << '\n';
    }
    write_text(out / "codes.csv", os.str());
  }

  if (tasks.count("correlate")) {
    std::ostringstream os;
    os << "latent,covariate,r,t,p,n,degenerate\n";
    for (const auto& [name, values] : covariates(data.test, masks)) {
      for (std::size_t k = 0; k < d; ++k) {
        const Correlation c = correlate_latent(test_codes, k, values);
        os << k << ',' << name << ',' << fmt_double(c.r) << ',' << fmt_double(c.t) << ',' << fmt_double(c.p) << ','
           << c.n << ',' << (c.degenerate ? 1 : 0) << '\n';
      }
    }
    write_text(out / "correlations.csv", os.str());
    const Correlation c0 = correlate_latent(test_codes, z0, data.test.scores);
    log->info("correlate: r(mu_{}, score) = {:+.4f}, p = {:.3g}", z0, c0.r, c0.p);
  }

  if (tasks.count("glm")) {
    const auto [lo, hi] = observed_range(test_codes, z0);
    const ReconstructionGlm g =
        reconstruction_glm(model, lo, hi, cfg.analysis.levels, cfg.analysis.samples, cfg.analysis.seed, threads);
    save_glm_map(g.map, out / "glm");
    std::ostringstream levels;
    levels << "level,z0\n";
    for (std::size_t l = 0; l < g.levels.size(); ++l) levels << l << ',' << fmt_double(g.levels[l]) << '\n';
    write_text(out / "glm" / "levels.csv", levels.str());
    std::ostringstream roi;
    roi << "mask,voxels,mean_slope,negative_fraction\n";
    for (const auto& [name, mask] : masks) {
      try {
        const RoiSummary s = roi_summary(g.map, mask);
        roi << name << ',' << s.voxels << ',' << fmt_double(s.mean_slope) << ',' << fmt_double(s.negative_fraction)
            << '\n';
        log->info("glm: {} mean slope {:+.4g}, {:.0f}% negative", name, s.mean_slope, 100.0 * s.negative_fraction);
      } catch (const std::invalid_argument& e) {
        log->warn("glm: skipping mask {}: {}", name, e.what());
      }
    }
    write_text(out / "glm" / "roi_summary.csv", roi.str());
  }

  if (tasks.count("classify")) {
    const Codes train_codes = evaluate(model, data.train, trainer->hp).mu;
    const BinaryCohort tr = ad_vs_hc(data.train), te = ad_vs_hc(data.test);
    auto pick = [](const Codes& c, const std::vector<std::size_t>& rows) {
      Codes out;
      for (auto r : rows) out.push_back(c[r]);
      return out;
    };
    auto scores = [](const Dataset& ds, const std::vector<std::size_t>& rows) {
      std::vector<double> out;
      for (auto r : rows) out.push_back(ds.scores[r]);
      return out;
    };
    const Codes trc = pick(train_codes, tr.rows), tec = pick(test_codes, te.rows);
    const auto trs = scores(data.train, tr.rows), tes = scores(data.test, te.rows);
    std::vector<InputSet> sets{{InputKind::supervised, 0}, {InputKind::remaining, 0}, {InputKind::covariate, 0}};
    for (std::size_t k = 0; k < d; ++k) sets.push_back({InputKind::latent, k});
    BootstrapOptions opt;
    opt.resamples = cfg.analysis.resamples;
    opt.seed = cfg.analysis.seed;
    opt.logistic.lambda = cfg.analysis.lambda;
    std::ostringstream os;
    os << "input_set,resamples,accuracy_mean,accuracy_std,sensitivity_mean,sensitivity_std,specificity_mean,"
          "specificity_std,balanced_mean,balanced_std\n";
    for (const auto& set : sets) {
      if (set.kind == InputKind::remaining && d == sup.size()) continue;
      const ClassificationReport r =
          bootstrap_classify(select_features(trc, trs, sup, set), tr.labels, select_features(tec, tes, sup, set),
                             te.labels, opt, set.name());
      os << r.input_set << ',' << r.resamples;
      for (const MeanStd& m : {r.accuracy, r.sensitivity, r.specificity, r.balanced}) {
        os << ',' << fmt_double(m.mean) << ',' << fmt_double(m.std);
      }
      os << '\n';
      log->info("classify: {:<12} balanced accuracy {:.3f} +- {:.3f}", r.input_set, r.balanced.mean, r.balanced.std);
    }
    write_text(out / "classification.csv", os.str());
  }

  if (tasks.count("traverse")) {
    std::ostringstream os;
    os << "latent,step,value,centroid_x,centroid_y,centroid_z\n";
    for (std::size_t k = 0; k < d; ++k) {
      const auto [lo, hi] = observed_range(test_codes, k);
      const TraversalSheet sheet = latent_traversal(model, k, lo, hi, cfg.analysis.traversal_steps);
      write_text(out / "traversal" / ("latent_" + std::to_string(k) + ".pgm"), traversal_pgm(sheet));
      for (std::size_t s = 0; s < sheet.values.size(); ++s) {
        os << k << ',' << s << ',' << fmt_double(sheet.values[s]);
        try {
          for (double c : intensity_centroid(sheet.volumes[s], sheet.shape)) os << ',' << fmt_double(c);
        } catch (const std::invalid_argument&) {
          os << ",nan,nan,nan";
        }
        os << '\n';
      }
    }
    write_text(out / "traversal" / "traversal.csv", os.str());
    log->info("traverse: {} latents x {} steps", d, cfg.analysis.traversal_steps);
  }

  write_files_manifest(out);
  std::cout << "wrote " << out.string() << '\n';
  return 0;
}

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const UsageError& e) {
    std::cerr << "simvae: error: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "simvae: error: config key '" << e.key() << "': " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "simvae: runtime failure: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Semi-supervised similarity-regularized beta-VAE toolkit", "simvae"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "simvae 0.1.0");

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic phantom corpus");
  gen->add_option("--spec", gd.spec, "corpus spec JSON (keys of the 'corpus' section)")->check(CLI::ExistingFile);
  gen->add_option("--subjects", gd.subjects, "number of subjects");
  add_common(*gen, gd.common);

  TrainArgs tr;
  auto* trn = app.add_subcommand("train", "Train a model; writes checkpoint.bin and history.csv");
  trn->add_option("--data", tr.data, "corpus directory (with manifest.csv)")->required();
  trn->add_option("--resume", tr.resume, "continue from a checkpoint")->check(CLI::ExistingFile);
  trn->add_option("--epochs", tr.epochs, "total epochs; overrides training.epochs");
  trn->add_option("--checkpoint-every", tr.checkpoint_every, "epochs between checkpoints")->capture_default_str();
  add_common(*trn, tr.common);

  SweepArgs sw;
  auto* swp = app.add_subcommand("sweep", "Train a grid of models and label phase regimes");
  swp->add_option("--grid", sw.grid, "dim-beta or beta-alpha; overrides sweep.grid")
      ->check(CLI::IsMember({"dim-beta", "beta-alpha"}));
  swp->add_option("--data", sw.data, "corpus directory (with manifest.csv)")->required();
  add_common(*swp, sw.common);

  AnalyzeArgs an;
  auto* ana = app.add_subcommand("analyze", "Correlations, GLM maps, classification and traversals");
  ana->add_option("--checkpoint", an.checkpoint, "trained checkpoint")->required();
  ana->add_option("--data", an.data, "corpus directory (with manifest.csv)")->required();
  ana->add_option("--tasks", an.tasks, "comma-separated subset of correlate,glm,classify,traverse")
      ->delimiter(',')
      ->capture_default_str();
  ana->add_option("--masks", an.masks, "comma-separated .vol mask files (default: the corpus ROIs)")->delimiter(',');
  ana->add_option("--split", an.split, "split.json written by train (default: recomputed from data.split)")
      ->check(CLI::ExistingFile);
  add_common(*ana, an.common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (gen->parsed()) return guarded([&] { return gen_data(gd); });
  if (trn->parsed()) return guarded([&] { return train(tr); });
  if (swp->parsed()) return guarded([&] { return sweep(sw); });
  if (ana->parsed()) return guarded([&] { return analyze(an); });
  return 2;
}

}  // namespace simvae::cli
