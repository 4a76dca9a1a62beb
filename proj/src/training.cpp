#include "simvae/training.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "simvae/dispersion.hpp"
#include "simvae/seed.hpp"

namespace simvae {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

AdamState AdamState::fresh(const std::vector<NamedTensor>& params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.value.shape());
    s.v.emplace_back(p.value.shape());
  }
  return s;
}

bool adam_step(std::vector<NamedTensor>& params, const std::vector<Tensor>& grads, AdamState& state,
               const AdamOptions& o) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("adam_step: parameter, gradient and state counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].value.shape()) {
      throw ShapeError("adam_step: gradient of " + params[i].name + " has shape " + shape_string(grads[i].shape()));
    }
    if (!grads[i].all_finite()) {
      ++state.skipped;
      return false;
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    double* w = params[i].value.data();
    double* m = state.m[i].data();
    double* v = state.v[i].data();
    const double* g = grads[i].data();
    for (std::size_t k = 0; k < grads[i].size(); ++k) {
      m[k] = o.beta1 * m[k] + (1.0 - o.beta1) * g[k];
      v[k] = o.beta2 * v[k] + (1.0 - o.beta2) * g[k] * g[k];
      w[k] -= o.learning_rate * (m[k] / c1) / (std::sqrt(v[k] / c2) + o.epsilon);
    }
  }
  return true;
}

void HyperParams::validate() const {
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw std::invalid_argument("training.beta must be finite and >= 0");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw std::invalid_argument("training.alpha must be finite and >= 0");
  if (!(adam.learning_rate > 0.0)) throw std::invalid_argument("training.learning_rate must be > 0");
  if (epochs < 1) throw std::invalid_argument("training.epochs must be >= 1");
  if (batch_size < 2) throw std::invalid_argument("training.batch_size must be >= 2 (batch norm)");
  if (alpha > 0.0 && batch_size < kMinSimilarityBatch) {
    throw std::invalid_argument("training.batch_size must be >= 3 when alpha > 0");
  }
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 && adam.epsilon > 0.0)) {
    throw std::invalid_argument("training: Adam moments need 0 <= beta1, beta2 < 1 and epsilon > 0");
  }
  SimilarityRegistry::instance().get(similarity);
}

HyperParams HyperParams::from_json(const Json& j) {
  HyperParams hp;
  ConfigSection s(j, "training");
  hp.beta = s.get<double>("beta", hp.beta);
  hp.alpha = s.get<double>("alpha", hp.alpha);
  hp.batch_size = s.get<std::size_t>("batch_size", hp.batch_size);
  hp.epochs = s.get<std::size_t>("epochs", hp.epochs);
  hp.seed = s.get<std::uint64_t>("seed", hp.seed);
  hp.adam.learning_rate = s.get<double>("learning_rate", hp.adam.learning_rate);
  hp.adam.beta1 = s.get<double>("adam_beta1", hp.adam.beta1);
  hp.adam.beta2 = s.get<double>("adam_beta2", hp.adam.beta2);
  hp.adam.epsilon = s.get<double>("adam_epsilon", hp.adam.epsilon);
  hp.similarity = s.get<std::string>("similarity", hp.similarity);
  s.finish();
  try {
    hp.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("training", e.what());
  }
  return hp;
}

Json HyperParams::to_json() const {
  return {{"beta", beta},
          {"alpha", alpha},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"seed", seed},
          {"learning_rate", adam.learning_rate},
          {"adam_beta1", adam.beta1},
          {"adam_beta2", adam.beta2},
          {"adam_epsilon", adam.epsilon},
          {"similarity", similarity}};
}

namespace {

Tensor scores_tensor(const Dataset& data, std::span<const std::size_t> rows) {
  Tensor y({rows.size()});
  for (std::size_t i = 0; i < rows.size(); ++i) y[i] = data.scores.at(rows[i]);
  return y;
}

void accumulate(LossBreakdown& acc, const LossBreakdown& b, double w) {
  acc.mse += w * b.mse;
  acc.kl += w * b.kl;
  acc.similarity += w * b.similarity;
  acc.total += w * b.total;
  acc.degenerate_similarity = acc.degenerate_similarity || b.degenerate_similarity;
}

}  // namespace

Evaluation evaluate(VaeModel& model, const Dataset& data, const HyperParams& hp, std::size_t chunk) {
  if (data.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  if (chunk == 0) chunk = data.size();
  const std::size_t d = model.config().latent;
  Evaluation ev;
  ev.loss.beta = hp.beta;
  ev.loss.alpha = hp.alpha;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const std::size_t stop = std::min(data.size(), start + chunk);
    std::vector<std::size_t> rows(stop - start);
    std::iota(rows.begin(), rows.end(), start);
    Graph g;
    std::vector<Var> params;
    for (const auto& p : model.parameters()) params.push_back(g.constant(p.value));
    Var x = g.constant(data.batch(rows));
    auto e = model.encode(params, x, Mode::eval);
    Var rec = model.decode(params, e.mu, Mode::eval);
    const double w = static_cast<double>(rows.size()) / static_cast<double>(data.size());
    ev.loss.mse += w * mse_loss(x, rec).value().item();
    ev.loss.kl += w * kl_gaussian(e.mu, e.logvar).value().item();
    const Tensor& mu = e.mu.value();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      ev.mu.emplace_back(mu.data() + i * d, mu.data() + (i + 1) * d);
    }
  }
  const auto& sup = model.config().supervised;
  if (data.size() >= kMinSimilarityBatch && !sup.empty()) {
    double sum_r = 0.0;
    for (std::size_t k : sup) {
      std::vector<double> col;
      for (const auto& m : ev.mu) col.push_back(m[k]);
      const auto pr = pearson(col, data.scores);
      sum_r += pr.r;
      ev.degenerate_r = ev.degenerate_r || pr.degenerate;
    }
    ev.r = sum_r / static_cast<double>(sup.size());
    ev.loss.similarity = -ev.r;
    ev.loss.degenerate_similarity = ev.degenerate_r;
  } else {
    ev.degenerate_r = true;
    ev.loss.degenerate_similarity = true;
  }
  ev.loss.total = ev.loss.mse + hp.beta * ev.loss.kl + hp.alpha * ev.loss.similarity;
  ev.dispersion = dispersion(ev.mu).value;
  return ev;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, const HyperParams& hp, std::size_t epoch) {
  if (n == 0) throw std::invalid_argument("training: empty dataset");
  const std::size_t min_batch = hp.alpha > 0.0 ? kMinSimilarityBatch : 2;
  if (n < min_batch) {
    throw std::invalid_argument("training: need at least " + std::to_string(min_batch) + " training subjects, got " +
                                std::to_string(n));
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(hp.seed, {epoch, 0}));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += hp.batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + hp.batch_size)));
  }
  if (batches.size() > 1 && batches.back().size() < min_batch) {
    auto tail = std::move(batches.back());
    batches.pop_back();
    batches.back().insert(batches.back().end(), tail.begin(), tail.end());
  }
  return batches;
}

Trainer::Trainer(VaeModel m, HyperParams h) : model(std::move(m)), hp(std::move(h)) {
  hp.validate();
  adam = AdamState::fresh(model.parameters());
}

const EpochRecord& Trainer::train_epoch(const Dataset& train, const Dataset& val) {
  const std::size_t epoch = history.size();
  const auto batches = epoch_batches(train.size(), hp, epoch);
  const SimilarityMetric& metric = SimilarityRegistry::instance().get(hp.similarity);
  const std::size_t d = model.config().latent;
  const auto& sup = model.config().supervised;

  EpochRecord rec;
  rec.epoch = epoch + 1;
  rec.train.beta = hp.beta;
  rec.train.alpha = hp.alpha;
  const std::uint64_t skipped_before = adam.skipped;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const auto& rows = batches[b];
    Tensor noise({rows.size(), d});
    std::mt19937_64 rng(derive_seed(hp.seed, {epoch, b + 1}));
    std::normal_distribution<double> normal;
    for (double& v : noise.values()) v = normal(rng);

    Graph g;
    auto params = model.bind(g);
    Var x = g.constant(train.batch(rows));
    auto e = model.encode(params, x, Mode::train);
    Var z = reparameterize(e.mu, e.logvar, g.constant(std::move(noise)));
    Var recon = model.decode(params, z, Mode::train);
    auto loss = total_loss(x, recon, e.mu, e.logvar, select_columns(z, sup), scores_tensor(train, rows),
                           {hp.beta, hp.alpha}, metric);
    if (!std::isfinite(loss.breakdown.total)) {
      throw TrainingError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " + std::to_string(b));
    }
    g.backward(loss.total);
    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for (const Var& p : params) grads.push_back(g.grad(p));
    adam_step(model.parameters(), grads, adam, hp.adam);
    accumulate(rec.train, loss.breakdown, static_cast<double>(rows.size()) / static_cast<double>(train.size()));
  }
  rec.skipped_steps = adam.skipped - skipped_before;
  if (val.size() > 0) {
    auto ev = evaluate(model, val, hp);
    rec.val = ev.loss;
    rec.val_r = ev.r;
    rec.val_dispersion = ev.dispersion;
  }
  history.push_back(rec);
  return history.back();
}

void Trainer::fit(const Dataset& train, const Dataset& val, const std::function<void(const Trainer&)>& on_epoch) {
  while (history.size() < hp.epochs) {
    train_epoch(train, val);
    if (on_epoch) on_epoch(*this);
  }
}

namespace {

constexpr char kMagic[8] = {'S', 'I', 'M', 'V', 'A', 'E', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;


class Writer {
 public:
  template <typename T>
  void put(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    bytes_.append(buf, sizeof(T));
  }
  void put_string(const std::string& s) {
    put<std::uint64_t>(s.size());
    bytes_.append(s);
  }
  void put_tensor(const std::string& name, const Tensor& t) {
    put_string(name);
    put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(d);
    bytes_.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
  }
  std::string finish() {
    put<std::uint64_t>(fnv1a(bytes_.data(), bytes_.size()));
    return std::move(bytes_);
  }

 private:
  std::string bytes_;
};

class Reader {
 public:
  Reader(const std::string& bytes, std::string where) : bytes_(bytes), where_(std::move(where)) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint64_t>();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  Tensor get_tensor(const std::string& expected_name) {
    const std::string name = get_string();
    if (name != expected_name) fail("expected tensor '" + expected_name + "', found '" + name + "'");
    const auto rank = get<std::uint32_t>();
    if (rank == 0 || rank > 8) fail("tensor '" + name + "' has invalid rank " + std::to_string(rank));
    Shape shape;
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape.push_back(get<std::uint64_t>());
      if (shape.back() == 0 || shape.back() > (std::size_t{1} << 32)) fail("tensor '" + name + "' has invalid shape");
      count *= shape.back();
    }
    need(count * sizeof(double));
    std::vector<double> values(count);
    std::memcpy(values.data(), bytes_.data() + pos_, count * sizeof(double));
    pos_ += count * sizeof(double);
    return Tensor(std::move(shape), std::move(values));
  }
  std::size_t position() const { return pos_; }
  [[noreturn]] void fail(const std::string& msg) const { throw CheckpointError(where_ + ": " + msg); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) fail("truncated checkpoint");
  }
  const std::string& bytes_;
  std::string where_;
  std::size_t pos_ = 0;
};

Json breakdown_json(const LossBreakdown& b) {
  return {{"mse", b.mse}, {"kl", b.kl}, {"similarity", b.similarity}, {"total", b.total},
          {"beta", b.beta}, {"alpha", b.alpha}, {"degenerate_similarity", b.degenerate_similarity}};
}

LossBreakdown breakdown_from(const Json& j) {
  LossBreakdown b;
  b.mse = j.at("mse").get<double>();
  b.kl = j.at("kl").get<double>();
  b.similarity = j.at("similarity").get<double>();
  b.total = j.at("total").get<double>();
  b.beta = j.at("beta").get<double>();
  b.alpha = j.at("alpha").get<double>();
  b.degenerate_similarity = j.at("degenerate_similarity").get<bool>();
  return b;
}

}  // namespace

void save_checkpoint(const Trainer& t, const std::filesystem::path& path) {
  Json meta;
  meta["model"] = t.model.config().to_json();
  meta["training"] = t.hp.to_json();
  meta["adam_step"] = t.adam.step;
  meta["adam_skipped"] = t.adam.skipped;
  Json hist = Json::array();
  for (const auto& r : t.history) {
    hist.push_back({{"epoch", r.epoch},
                    {"train", breakdown_json(r.train)},
                    {"val", breakdown_json(r.val)},
                    {"val_r", r.val_r},
                    {"val_dispersion", r.val_dispersion},
                    {"skipped_steps", r.skipped_steps}});
  }
  meta["history"] = hist;

  Writer w;
  for (char c : kMagic) w.put<char>(c);
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint64_t>(t.model.config().hash());
  w.put_string(meta.dump());
  const auto& params = t.model.parameters();
  w.put<std::uint64_t>(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    w.put_tensor(params[i].name, params[i].value);
    w.put_tensor("adam.m." + params[i].name, t.adam.m[i]);
    w.put_tensor("adam.v." + params[i].name, t.adam.v[i]);
  }
  const auto& stats = t.model.running_stats();
  w.put<std::uint64_t>(stats.size());
  for (std::size_t i = 0; i < stats.size(); ++i) {
    w.put_tensor("stats." + std::to_string(i) + ".mean", stats[i].mean);
    w.put_tensor("stats." + std::to_string(i) + ".var", stats[i].var);
  }
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  write_file_atomic(path, w.finish());
}

Trainer load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string bytes = buf.str();
  Reader r(bytes, path.string());

  if (bytes.size() < sizeof(kMagic) + 12 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    r.fail("not a simvae checkpoint");
  }
  std::uint64_t stored_sum;
  std::memcpy(&stored_sum, bytes.data() + bytes.size() - 8, 8);
  for (std::size_t i = 0; i < sizeof(kMagic); ++i) r.get<char>();
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) {
    r.fail("unsupported checkpoint version " + std::to_string(version) + " (expected " + std::to_string(kVersion) + ")");
  }
  if (fnv1a(bytes.data(), bytes.size() - 8) != stored_sum) r.fail("checksum mismatch, file is corrupted");

  const auto hash = r.get<std::uint64_t>();
  Json meta;
  try {
    meta = Json::parse(r.get_string());
  } catch (const nlohmann::json::exception& e) {
    r.fail(std::string("unreadable metadata: ") + e.what());
  }
  ModelConfig config = ModelConfig::from_json(meta.at("model"));
  if (config.hash() != hash) r.fail("config hash does not match the stored model config");
  Trainer t(build_model(config), HyperParams::from_json(meta.at("training")));

  auto& params = t.model.parameters();
  if (r.get<std::uint64_t>() != params.size()) r.fail("parameter count does not match the model config");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor v = r.get_tensor(params[i].name);
    Tensor m = r.get_tensor("adam.m." + params[i].name);
    Tensor s = r.get_tensor("adam.v." + params[i].name);
    if (v.shape() != params[i].value.shape() || m.shape() != v.shape() || s.shape() != v.shape()) {
      r.fail("tensor '" + params[i].name + "' has shape " + shape_string(v.shape()) + ", expected " +
             shape_string(params[i].value.shape()));
    }
    params[i].value = std::move(v);
    t.adam.m[i] = std::move(m);
    t.adam.v[i] = std::move(s);
  }
  auto& stats = t.model.running_stats();
  if (r.get<std::uint64_t>() != stats.size()) r.fail("running statistics count does not match the model config");
  for (std::size_t i = 0; i < stats.size(); ++i) {
    Tensor mean = r.get_tensor("stats." + std::to_string(i) + ".mean");
    Tensor var = r.get_tensor("stats." + std::to_string(i) + ".var");
    if (mean.shape() != stats[i].mean.shape() || var.shape() != stats[i].var.shape()) {
      r.fail("running statistics " + std::to_string(i) + " have the wrong shape");
    }
    stats[i] = {std::move(mean), std::move(var)};
  }
  if (r.position() != bytes.size() - 8) r.fail("trailing bytes after the last record");

  t.adam.step = meta.at("adam_step").get<std::uint64_t>();
  t.adam.skipped = meta.at("adam_skipped").get<std::uint64_t>();
  for (const auto& h : meta.at("history")) {
    EpochRecord e;
    e.epoch = h.at("epoch").get<std::size_t>();
    e.train = breakdown_from(h.at("train"));
    e.val = breakdown_from(h.at("val"));
    e.val_r = h.at("val_r").get<double>();
    e.val_dispersion = h.at("val_dispersion").get<double>();
    e.skipped_steps = h.at("skipped_steps").get<std::uint64_t>();
    t.history.push_back(e);
  }
  return t;
}

std::string history_csv(const TrainingHistory& history) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "epoch,train_mse,train_kl,train_similarity,train_total,val_mse,val_kl,val_similarity,val_total,val_r,"
        "val_dispersion,skipped_steps\n";
  for (const auto& r : history) {
    os << r.epoch << ',' << r.train.mse << ',' << r.train.kl << ',' << r.train.similarity << ',' << r.train.total
       << ',' << r.val.mse << ',' << r.val.kl << ',' << r.val.similarity << ',' << r.val.total << ',' << r.val_r
       << ',' << r.val_dispersion << ',' << r.skipped_steps << '\n';
  }
  return os.str();
}

std::uint64_t parameter_hash(const VaeModel& model) {
  std::uint64_t h = kFnvOffset;
  for (const auto& p : model.parameters()) {
    h = fnv1a(p.value.data(), p.value.size() * sizeof(double), h);
  }
  for (const auto& s : model.running_stats()) {
    h = fnv1a(s.mean.data(), s.mean.size() * sizeof(double), h);
    h = fnv1a(s.var.data(), s.var.size() * sizeof(double), h);
  }
  return h;
}

}  // namespace simvae
