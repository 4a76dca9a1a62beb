#include "simvae/sweep.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#include "simvae/seed.hpp"

namespace simvae {

std::string to_string(GridKind k) { return k == GridKind::dim_beta ? "dim-beta" : "beta-alpha"; }

GridKind grid_kind_from_string(const std::string& s) {
  if (s == "dim-beta") return GridKind::dim_beta;
  if (s == "beta-alpha") return GridKind::beta_alpha;
  throw std::invalid_argument("unknown grid '" + s + "' (dim-beta, beta-alpha)");
}

std::string to_string(Regime r) {
  switch (r) {
    case Regime::collapse: return "collapse";
    case Regime::stable: return "stable";
    case Regime::autoencoder_like: return "autoencoder-like";
    case Regime::non_informative: return "non-informative";
    case Regime::similarity_dominated: return "similarity-dominated";
    case Regime::failed: return "failed";
  }
  return "failed";
}

void RegimeThresholds::validate() const {
  if (!(tau_low_fraction >= 0.0)) throw std::invalid_argument("sweep: tau_low_fraction must be >= 0");
  if (!(tau_high_percentile > 0.0 && tau_high_percentile <= 100.0)) {
    throw std::invalid_argument("sweep: tau_high_percentile must be in (0, 100]");
  }
  if (!(rho_low >= 0.0 && rho_low <= rho_high && rho_high <= 1.0)) {
    throw std::invalid_argument("sweep: thresholds out of order, need 0 <= rho_low <= rho_high <= 1");
  }
  if (!(kappa >= 1.0)) throw std::invalid_argument("sweep: kappa must be >= 1");
}

void SweepSpec::validate() const {
  thresholds.validate();
  if (rows.empty() || cols.empty()) throw std::invalid_argument("sweep: both axes need at least one value");
  auto increasing = [](const std::vector<double>& v, const char* name) {
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!std::isfinite(v[i]) || v[i] < 0.0) throw std::invalid_argument(std::string("sweep: ") + name + " values must be finite and >= 0");
      if (i > 0 && !(v[i] > v[i - 1])) throw std::invalid_argument(std::string("sweep: ") + name + " values must be strictly increasing");
    }
  };
  increasing(rows, "row");
  increasing(cols, "column");
  if (kind == GridKind::dim_beta) {
    for (double d : rows) {
      if (d < 1.0 || d != std::floor(d)) throw std::invalid_argument("sweep: latent dimensionalities must be integers >= 1");
    }
  }
  if (threads < 1) throw std::invalid_argument("sweep: threads must be >= 1");
}

SweepSpec SweepSpec::from_json(const Json& j) {
  SweepSpec s;
  ConfigSection c(j, "sweep");
  try {
    s.kind = grid_kind_from_string(c.get<std::string>("grid", to_string(s.kind)));
  } catch (const std::invalid_argument& e) {
    throw ConfigError("sweep.grid", e.what());
  }
  if (s.kind == GridKind::dim_beta) {
    s.rows = {2, 4, 8, 16};
    s.cols = {0.0, 1e-2, 1.0, 10.0};
  } else {
    s.rows = {0.0, 1e-4, 1e-2, 1.0};
    s.cols = {0.0, 1e-2, 1.0, 100.0};
  }
  s.rows = c.get<std::vector<double>>("rows", s.rows);
  s.cols = c.get<std::vector<double>>("cols", s.cols);
  s.threads = c.get<std::size_t>("threads", s.threads);
  {
    ConfigSection t = c.section("thresholds");
    auto& th = s.thresholds;
    th.tau_low_fraction = t.get<double>("tau_low_fraction", th.tau_low_fraction);
    th.tau_high_percentile = t.get<double>("tau_high_percentile", th.tau_high_percentile);
    const std::string scope = t.get<std::string>("tau_high_scope", "row");
    if (scope == "row") {
      th.tau_high_scope = ThresholdScope::row;
    } else if (scope == "grid") {
      th.tau_high_scope = ThresholdScope::grid;
    } else {
      throw ConfigError("sweep.thresholds.tau_high_scope", "tau_high_scope must be 'row' or 'grid'");
    }
    th.rho_low = t.get<double>("rho_low", th.rho_low);
    th.rho_high = t.get<double>("rho_high", th.rho_high);
    th.kappa = t.get<double>("kappa", th.kappa);
    t.finish();
  }
  c.finish();
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("sweep", e.what());
  }
  return s;
}

Json SweepSpec::to_json() const {
  return {{"grid", to_string(kind)},
          {"rows", rows},
          {"cols", cols},
          {"threads", threads},
          {"thresholds",
           {{"tau_low_fraction", thresholds.tau_low_fraction},
            {"tau_high_percentile", thresholds.tau_high_percentile},
            {"tau_high_scope", thresholds.tau_high_scope == ThresholdScope::row ? "row" : "grid"},
            {"rho_low", thresholds.rho_low},
            {"rho_high", thresholds.rho_high},
            {"kappa", thresholds.kappa}}}};
}

namespace {

double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

double converged_value(const std::vector<double>& series) {
  if (series.empty()) throw std::invalid_argument("converged_value: empty series");
  const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(0.1 * static_cast<double>(series.size()))));
  double s = 0.0;
  for (std::size_t i = series.size() - n; i < series.size(); ++i) s += series[i];
  return s / static_cast<double>(n);
}

void classify_regimes(PhaseGrid& grid, const RegimeThresholds& th) {
  th.validate();
  std::vector<PhaseCell*> done;
  for (auto& c : grid.cells) {
    if (c.ok) {
      done.push_back(&c);
    } else {
      c.regime = Regime::failed;
    }
  }
  if (done.empty()) return;

  if (grid.kind == GridKind::dim_beta) {
    std::vector<double> all;
    for (auto* c : done) all.push_back(c->dispersion);
    const double tau_low = th.tau_low_fraction * quantile(all, 0.5);
    const double grid_high = quantile(all, th.tau_high_percentile / 100.0);
    for (std::size_t i = 0; i < grid.rows.size(); ++i) {
      double tau_high = grid_high;
      if (th.tau_high_scope == ThresholdScope::row) {
        std::vector<double> row;
        for (std::size_t j = 0; j < grid.cols.size(); ++j) {
          if (grid.at(i, j).ok) row.push_back(grid.at(i, j).dispersion);
        }
        if (row.empty()) continue;
        tau_high = quantile(row, th.tau_high_percentile / 100.0);
      }
      for (std::size_t j = 0; j < grid.cols.size(); ++j) {
        auto& c = grid.at(i, j);
        if (!c.ok) continue;
        if (c.dispersion < tau_low) {
          c.regime = Regime::collapse;
        } else if (c.dispersion > tau_high) {
          c.regime = Regime::autoencoder_like;
        } else {
          c.regime = Regime::stable;
        }
      }
    }
    return;
  }

  std::vector<double> stable_mse, all_mse;
  for (auto* c : done) {
    all_mse.push_back(c->val_mse);
    const double a = std::abs(c->r);
    if (a >= th.rho_low && a <= th.rho_high) stable_mse.push_back(c->val_mse);
  }
  const double mse_stable = quantile(stable_mse.empty() ? all_mse : stable_mse, 0.5);
  for (auto* c : done) {
    const double a = std::abs(c->r);
    if (a < th.rho_low) {
      c->regime = Regime::non_informative;
    } else if (a > th.rho_high && c->val_mse > th.kappa * mse_stable) {
      c->regime = Regime::similarity_dominated;
    } else {
      c->regime = Regime::stable;
    }
  }
}

PhaseGrid run_sweep(const SweepSpec& spec, const SweepInputs& in, const std::function<void(const PhaseCell&)>& on_cell) {
  spec.validate();
  if (!in.train || !in.val) throw std::invalid_argument("sweep: train and validation sets are required");
  if (spec.kind == GridKind::dim_beta && in.training.alpha != 0.0) {
    throw std::invalid_argument("sweep: the dim-beta grid fixes alpha = 0, but training.alpha is " +
                                std::to_string(in.training.alpha));
  }
  PhaseGrid grid;
  grid.kind = spec.kind;
  grid.rows = spec.rows;
  grid.cols = spec.cols;
  grid.cells.resize(spec.rows.size() * spec.cols.size());
  for (std::size_t i = 0; i < spec.rows.size(); ++i) {
    for (std::size_t j = 0; j < spec.cols.size(); ++j) {
      auto& c = grid.at(i, j);
      c.row = i;
      c.col = j;
      c.row_value = spec.rows[i];
      c.col_value = spec.cols[j];
      c.seed = derive_seed(in.training.seed, {i, j});
    }
  }

  std::atomic<std::size_t> next{0};
  std::mutex report_lock;
  auto worker = [&] {
    for (std::size_t k = next++; k < grid.cells.size(); k = next++) {
      auto& c = grid.cells[k];
      try {
        ModelConfig mc = in.model;
        HyperParams hp = in.training;
        if (spec.kind == GridKind::dim_beta) {
          mc.latent = static_cast<std::size_t>(c.row_value);
          hp.beta = c.col_value;
        } else {
          hp.beta = c.row_value;
          hp.alpha = c.col_value;
        }
        mc.seed = c.seed;
        hp.seed = c.seed;
        Trainer t(build_model(mc), hp);
        t.fit(*in.train, *in.val);
        std::vector<double> disp, r, mse;
        for (const auto& e : t.history) {
          disp.push_back(e.val_dispersion);
          r.push_back(e.val_r);
          mse.push_back(e.val.mse);
        }
        c.dispersion = converged_value(disp);
        c.r = converged_value(r);
        c.val_mse = converged_value(mse);
        c.ok = std::isfinite(c.dispersion) && std::isfinite(c.r) && std::isfinite(c.val_mse);
        if (!c.ok) c.error = "non-finite converged metric";
      } catch (const std::exception& e) {
        c.ok = false;
        c.error = e.what();
      }
      if (on_cell) {
        std::lock_guard lock(report_lock);
        on_cell(c);
      }
    }
  };
  const std::size_t n_threads = std::min(spec.threads, grid.cells.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  classify_regimes(grid, spec.thresholds);
  return grid;
}

std::string grid_csv(const PhaseGrid& grid) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "row,col," << grid.row_name() << ',' << grid.col_name()
     << ",seed,status,metric,val_dispersion,val_r,val_mse,regime,error\n";
  for (const auto& c : grid.cells) {
    std::string err = c.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    os << c.row << ',' << c.col << ',' << c.row_value << ',' << c.col_value << ',' << c.seed << ','
       << (c.ok ? "ok" : "failed") << ',' << c.metric(grid.kind) << ',' << c.dispersion << ',' << c.r << ','
       << c.val_mse << ',' << to_string(c.regime) << ',' << err << '\n';
  }
  return os.str();
}

std::string grid_pgm(const PhaseGrid& grid, std::size_t cell_px) {
  if (cell_px == 0) throw std::invalid_argument("grid_pgm: cell_px must be positive");
  auto value = [&](const PhaseCell& c) { return grid.kind == GridKind::dim_beta ? c.dispersion : std::abs(c.r); };
  double lo = 0.0, hi = 0.0;
  bool any = false;
  for (const auto& c : grid.cells) {
    if (!c.ok) continue;
    lo = any ? std::min(lo, value(c)) : value(c);
    hi = any ? std::max(hi, value(c)) : value(c);
    any = true;
  }
  const std::size_t w = grid.cols.size() * cell_px, h = grid.rows.size() * cell_px;
  std::ostringstream os;
  os << "P5\n" << w << ' ' << h << "\n255\n";
  std::string pixels(w * h, '\0');
  for (const auto& c : grid.cells) {
    unsigned char shade = 0;
    if (c.ok) {
      const double t = hi > lo ? (value(c) - lo) / (hi - lo) : 1.0;
      shade = static_cast<unsigned char>(std::lround(255.0 * t));
    }
    for (std::size_t y = 0; y < cell_px; ++y) {
      for (std::size_t x = 0; x < cell_px; ++x) {
        pixels[(c.row * cell_px + y) * w + c.col * cell_px + x] = static_cast<char>(shade);
      }
    }
  }
  os << pixels;
  return os.str();
}

}  // namespace simvae
