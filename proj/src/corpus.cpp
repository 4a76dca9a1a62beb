#include "simvae/corpus.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "simvae/seed.hpp"

namespace simvae {

namespace fs = std::filesystem;

std::string to_string(Diagnosis d) {
  switch (d) {
    case Diagnosis::HC: return "HC";
    case Diagnosis::MCI: return "MCI";
    case Diagnosis::AD: return "AD";
  }
  return "HC";
}

Diagnosis diagnosis_from_string(const std::string& s) {
  if (s == "HC") return Diagnosis::HC;
  if (s == "MCI") return Diagnosis::MCI;
  if (s == "AD") return Diagnosis::AD;
  throw std::invalid_argument("unknown diagnosis '" + s + "'");
}

Diagnosis diagnose(const CorpusSpec& spec, double score) {
  if (score < spec.mci_threshold) return Diagnosis::HC;
  if (score < spec.ad_threshold) return Diagnosis::MCI;
  return Diagnosis::AD;
}

fs::path Manifest::resolve(const SubjectRecord& s) const {
  return s.volume_path.is_absolute() ? s.volume_path : root / s.volume_path;
}

namespace {

const char* const kFactorColumns[] = {"tx", "ty", "tz", "rx", "ry", "rz", "sx", "sy", "sz", "gain", "noise", "seed"};

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error(where + ": cannot parse number '" + s + "'");
  }
}

}  // namespace

void write_manifest(const Manifest& manifest, const fs::path& csv) {
  const bool with_factors =
      !manifest.subjects.empty() &&
      std::all_of(manifest.subjects.begin(), manifest.subjects.end(), [](const auto& s) { return s.factors.has_value(); });
  std::ostringstream os;
  os << "id,volume_path,score,diagnosis";
  if (with_factors) {
    for (const char* c : kFactorColumns) os << ',' << c;
  }
  os << '\n';
  for (const auto& s : manifest.subjects) {
    os << s.id << ',' << s.volume_path.generic_string() << ',' << format_double(s.score) << ','
       << to_string(s.diagnosis);
    if (with_factors) {
      const auto& f = *s.factors;
      for (double v : f.translation) os << ',' << format_double(v);
      for (double v : f.rotation) os << ',' << format_double(v);
      for (double v : f.scale) os << ',' << format_double(v);
      os << ',' << format_double(f.gain) << ',' << format_double(f.noise) << ',' << f.seed;
    }
    os << '\n';
  }
  write_file_atomic(csv, os.str());
}

Manifest read_manifest(const fs::path& csv) {
  std::ifstream in(csv);
  if (!in) throw std::runtime_error("cannot open manifest " + csv.string());
  Manifest m;
  m.root = csv.parent_path();
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(csv.string() + ": empty manifest");
  const auto header = split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* required : {"id", "volume_path", "score", "diagnosis"}) {
    if (!col.count(required)) throw std::runtime_error(csv.string() + ": missing column '" + required + "'");
  }
  const bool with_factors =
      std::all_of(std::begin(kFactorColumns), std::end(kFactorColumns), [&](const char* c) { return col.count(c) > 0; });
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    const std::string where = csv.string() + ":" + std::to_string(row);
    if (cells.size() != header.size()) {
      throw std::runtime_error(where + ": expected " + std::to_string(header.size()) + " columns, got " +
                               std::to_string(cells.size()));
    }
    SubjectRecord s;
    s.id = cells[col["id"]];
    s.volume_path = cells[col["volume_path"]];
    s.score = parse_double(cells[col["score"]], where);
    try {
      s.diagnosis = diagnosis_from_string(cells[col["diagnosis"]]);
    } catch (const std::invalid_argument& e) {
      throw std::runtime_error(where + ": " + e.what());
    }
    if (with_factors) {
      GenerativeFactors f;
      f.score = s.score;
      for (int i = 0; i < 3; ++i) f.translation[i] = parse_double(cells[col[kFactorColumns[i]]], where);
      for (int i = 0; i < 3; ++i) f.rotation[i] = parse_double(cells[col[kFactorColumns[3 + i]]], where);
      for (int i = 0; i < 3; ++i) f.scale[i] = parse_double(cells[col[kFactorColumns[6 + i]]], where);
      f.gain = parse_double(cells[col["gain"]], where);
      f.noise = parse_double(cells[col["noise"]], where);
      f.seed = std::stoull(cells[col["seed"]]);
      s.factors = f;
    }
    m.subjects.push_back(std::move(s));
  }
  return m;
}

Manifest generate_corpus(const CorpusSpec& spec, const fs::path& out_dir, std::size_t threads) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(out_dir / "volumes", ec);
  if (ec) throw std::runtime_error("cannot create output directory " + out_dir.string() + ": " + ec.message());

  Manifest m;
  m.root = out_dir;
  m.subjects.resize(spec.subjects);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_lock;
  auto worker = [&] {
    for (std::size_t i = next++; i < spec.subjects; i = next++) {
      try {
        std::ostringstream id;
        id << "sub-" << std::setw(4) << std::setfill('0') << i;
        SubjectRecord s;
        s.id = id.str();
        s.volume_path = fs::path("volumes") / (s.id + ".vol");
        const GenerativeFactors f = sample_factors(spec, derive_seed(spec.seed, {i}));
        s.score = f.score;
        s.diagnosis = diagnose(spec, f.score);
        s.factors = f;
        Volume v = generate_phantom(spec, f);
        v.provenance = "simvae phantom " + s.id + " corpus-seed " + std::to_string(spec.seed);
        save_volume(v, out_dir / s.volume_path);
        m.subjects[i] = std::move(s);
      } catch (...) {
        std::lock_guard lock(failure_lock);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(threads, spec.subjects));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  write_manifest(m, out_dir / "manifest.csv");
  write_file_atomic(out_dir / "corpus.json", spec.to_json().dump(2) + "\n");
  return m;
}

Split split_dataset(std::span<const std::string> ids, std::array<double, 3> proportions, std::uint64_t seed) {
  if (ids.size() < 3) throw std::invalid_argument("split_dataset: need at least 3 subjects");
  double total = 0.0;
  for (double p : proportions) {
    if (!(p > 0.0)) throw std::invalid_argument("split_dataset: proportions must be positive");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("split_dataset: proportions must sum to 1");
  std::vector<std::string> order(ids.begin(), ids.end());
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const double n = static_cast<double>(order.size());
  const auto n_val = static_cast<std::size_t>(std::floor(proportions[1] * n + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(proportions[2] * n + 1e-9));
  const std::size_t n_train = order.size() - n_val - n_test;
  Split s;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
               order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  return s;
}

Dataset Dataset::subset(std::span<const std::string> keep) const {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < ids.size(); ++i) index[ids[i]] = i;
  Dataset out;
  out.shape = shape;
  for (const auto& id : keep) {
    auto it = index.find(id);
    if (it == index.end()) throw std::invalid_argument("unknown subject id '" + id + "'");
    const std::size_t i = it->second;
    out.ids.push_back(ids[i]);
    out.volumes.push_back(volumes[i]);
    out.scores.push_back(scores[i]);
    out.diagnoses.push_back(diagnoses[i]);
    out.factors.push_back(factors[i]);
  }
  return out;
}

Tensor Dataset::batch(std::span<const std::size_t> rows) const {
  const std::size_t v = voxels();
  Tensor t({rows.size(), 1, shape[0], shape[1], shape[2]});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy(volumes.at(rows[r]).begin(), volumes.at(rows[r]).end(), t.data() + r * v);
  }
  return t;
}

Dataset load_dataset(const Manifest& manifest, double gamma) {
  Dataset d;
  for (const auto& s : manifest.subjects) {
    const Volume raw = load_volume(manifest.resolve(s));
    const std::array<std::size_t, 3> shape{raw.dims[2], raw.dims[1], raw.dims[0]};
    if (d.ids.empty()) {
      d.shape = shape;
    } else if (shape != d.shape) {
      throw std::runtime_error("subject " + s.id + " has a different volume shape than the first subject");
    }
    const Volume norm = normalize_intensity(raw, gamma);
    d.ids.push_back(s.id);
    d.volumes.emplace_back(norm.voxels.begin(), norm.voxels.end());
    d.scores.push_back(s.score);
    d.diagnoses.push_back(s.diagnosis);
    d.factors.push_back(s.factors);
  }
  return d;
}

}  // namespace simvae
