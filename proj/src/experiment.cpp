#include "pmjdot/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

namespace pmjdot {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(AblationMode mode) {
  static const char* names[] = {"v1", "v2", "v3", "v4", "v5"};
  return names[static_cast<int>(mode)];
}

AblationMode ablation_mode_from_string(const std::string& s) {
  if (s == "v1") return AblationMode::v1;
  if (s == "v2") return AblationMode::v2;
  if (s == "v3") return AblationMode::v3;
  if (s == "v4") return AblationMode::v4;
  if (s == "v5") return AblationMode::v5;
  throw std::invalid_argument("unknown ablation mode '" + s + "' (expected v1..v5)");
}

void ExperimentConfig::validate() const {
  if (corpus_path.empty()) data.validate();
  training.validate();
  if (epochs < 0) throw std::invalid_argument("experiment: epochs must be >= 0");
  if (eval_k < 1) throw std::invalid_argument("experiment: eval_k must be >= 1");
}

TrainingConfig wire_ablation(TrainingConfig base, AblationMode mode) {
  switch (mode) {
    case AblationMode::v1: base.alignment = AlignmentMode::none; break;
    case AblationMode::v2: base.alignment = AlignmentMode::batch; break;
    case AblationMode::v3:
      base.alignment = AlignmentMode::prototype;
      base.bank_size = base.batch_size;
      break;
    case AblationMode::v4: base.alignment = AlignmentMode::bank; break;
    case AblationMode::v5: base.alignment = AlignmentMode::prototype; break;
  }
  return base;
}

// ---------------------------------------------------------------------------
// Configuration JSON

namespace {

class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ParseError(path_ + ": expected an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ParseError(path_ + "." + key + ": " + e.what());
    }
  }

  ObjectReader child(const std::string& key) {
    seen_.insert(key);
    static const json empty = json::object();
    return ObjectReader(j_.contains(key) ? j_.at(key) : empty, path_ + "." + key);
  }

  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key())) throw ParseError(path_ + ": unknown key '" + item.key() + "'");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json sinkhorn_json(const SinkhornConfig<double>& c) {
  return {{"entropy_weight", c.entropy_weight},
          {"max_iterations", c.max_iterations},
          {"marginal_tolerance", c.marginal_tolerance},
          {"log_domain", c.log_domain}};
}

void read_sinkhorn(ObjectReader r, SinkhornConfig<double>& c) {
  r.get("entropy_weight", c.entropy_weight);
  r.get("max_iterations", c.max_iterations);
  r.get("marginal_tolerance", c.marginal_tolerance);
  r.get("log_domain", c.log_domain);
  r.finish();
}

}  // namespace

json to_json(const ExperimentConfig& c) {
  const DomainSpec& d = c.data;
  const TrainingConfig& t = c.training;
  const AugmentationSpec& a = t.augmentation;
  return {
      {"data",
       {{"class_count", d.class_count},
        {"photos_per_class", d.photos_per_class},
        {"sketches_per_class", d.sketches_per_class},
        {"queries_per_class", d.queries_per_class},
        {"ambient_dim", d.ambient_dim},
        {"class_separation", d.class_separation},
        {"noise_sigma", d.noise_sigma},
        {"rotation_degrees", d.rotation_degrees},
        {"translation_norm", d.translation_norm},
        {"sketch_noise_scale", d.sketch_noise_scale},
        {"seed", d.seed}}},
      {"corpus_path", c.corpus_path},
      {"training",
       {{"nu", t.nu},
        {"mu", t.mu},
        {"learning_rate", t.learning_rate},
        {"momentum", t.momentum},
        {"weight_decay", t.weight_decay},
        {"lr_halving_period", t.lr_halving_period},
        {"batch_size", t.batch_size},
        {"queue_size", t.queue_size},
        {"bank_size", t.bank_size},
        {"prototype_count", t.prototype_count},
        {"hidden_widths", t.hidden_widths},
        {"embedding_dim", t.embedding_dim},
        {"alternation", to_string(t.alternation)},
        {"prototype_grad_from_alignment", t.prototype_grad_from_alignment},
        {"prototype_grad_from_semantic", t.prototype_grad_from_semantic},
        {"augmentation",
         {{"noise_sigma", a.noise_sigma},
          {"scale_min", a.scale_min},
          {"scale_max", a.scale_max},
          {"dropout_fraction", a.dropout_fraction}}}}},
      {"cost", {{"alpha", t.cost.alpha}, {"beta", t.cost.beta}, {"temperature", t.cost.temperature}}},
      {"sinkhorn",
       {{"correspondence", sinkhorn_json(t.correspondence_ot)}, {"assignment", sinkhorn_json(t.assignment_ot)}}},
      {"mode", to_string(c.mode)},
      {"epochs", c.epochs},
      {"seed", c.seed},
      {"eval_k", c.eval_k},
  };
}

ExperimentConfig experiment_config_from_json(const json& j) {
  ExperimentConfig c;
  ObjectReader root(j, "config");

  ObjectReader data = root.child("data");
  data.get("class_count", c.data.class_count);
  data.get("photos_per_class", c.data.photos_per_class);
  data.get("sketches_per_class", c.data.sketches_per_class);
  data.get("queries_per_class", c.data.queries_per_class);
  data.get("ambient_dim", c.data.ambient_dim);
  data.get("class_separation", c.data.class_separation);
  data.get("noise_sigma", c.data.noise_sigma);
  data.get("rotation_degrees", c.data.rotation_degrees);
  data.get("translation_norm", c.data.translation_norm);
  data.get("sketch_noise_scale", c.data.sketch_noise_scale);
  data.get("seed", c.data.seed);
  data.finish();

  root.get("corpus_path", c.corpus_path);

  TrainingConfig& t = c.training;
  ObjectReader tr = root.child("training");
  tr.get("nu", t.nu);
  tr.get("mu", t.mu);
  tr.get("learning_rate", t.learning_rate);
  tr.get("momentum", t.momentum);
  tr.get("weight_decay", t.weight_decay);
  tr.get("lr_halving_period", t.lr_halving_period);
  tr.get("batch_size", t.batch_size);
  tr.get("queue_size", t.queue_size);
  tr.get("bank_size", t.bank_size);
  tr.get("prototype_count", t.prototype_count);
  tr.get("hidden_widths", t.hidden_widths);
  tr.get("embedding_dim", t.embedding_dim);
  std::string alternation = to_string(t.alternation);
  tr.get("alternation", alternation);
  t.alternation = alternation_from_string(alternation);
  tr.get("prototype_grad_from_alignment", t.prototype_grad_from_alignment);
  tr.get("prototype_grad_from_semantic", t.prototype_grad_from_semantic);
  ObjectReader aug = tr.child("augmentation");
  aug.get("noise_sigma", t.augmentation.noise_sigma);
  aug.get("scale_min", t.augmentation.scale_min);
  aug.get("scale_max", t.augmentation.scale_max);
  aug.get("dropout_fraction", t.augmentation.dropout_fraction);
  aug.finish();
  tr.finish();

  ObjectReader cost = root.child("cost");
  cost.get("alpha", t.cost.alpha);
  cost.get("beta", t.cost.beta);
  cost.get("temperature", t.cost.temperature);
  cost.finish();

  ObjectReader sk = root.child("sinkhorn");
  read_sinkhorn(sk.child("correspondence"), t.correspondence_ot);
  read_sinkhorn(sk.child("assignment"), t.assignment_ot);
  sk.finish();

  std::string mode = to_string(c.mode);
  root.get("mode", mode);
  c.mode = ablation_mode_from_string(mode);
  root.get("epochs", c.epochs);
  root.get("seed", c.seed);
  root.get("eval_k", c.eval_k);
  root.finish();
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ParseError("config '" + path + "': " + e.what());
  }
  return experiment_config_from_json(j);
}

std::string config_hash(const ExperimentConfig& config) {
  // FNV-1a over the canonical (key-sorted) dump.
  const std::string text = to_json(config).dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

LabeledCorpus corpus_for(const ExperimentConfig& config) {
  return config.corpus_path.empty() ? generate(config.data) : load_corpus(config.corpus_path);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(rows)}};
}

const json& field(const json& j, const std::string& key, const std::string& path) {
  if (!j.is_object() || !j.contains(key)) throw ParseError("checkpoint: missing field '" + path + "." + key + "'");
  return j.at(key);
}

template <typename T>
T scalar_field(const json& j, const std::string& key, const std::string& path) {
  const json& v = field(j, key, path);
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw ParseError("checkpoint: field '" + path + "." + key + "' has the wrong type");
  }
}

Matrix matrix_from_json(const json& j, const std::string& path) {
  const auto rows = scalar_field<Index>(j, "rows", path);
  const auto cols = scalar_field<Index>(j, "cols", path);
  const json& data = field(j, "data", path);
  if (rows < 0 || cols < 0 || !data.is_array() || static_cast<Index>(data.size()) != rows)
    throw ParseError("checkpoint: field '" + path + ".data' does not have " + std::to_string(rows) + " rows");
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    const json& row = data[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Index>(row.size()) != cols)
      throw ParseError("checkpoint: field '" + path + ".data[" + std::to_string(i) + "]' does not have " +
                       std::to_string(cols) + " columns");
    for (Index c = 0; c < cols; ++c) {
      const json& v = row[static_cast<std::size_t>(c)];
      if (!v.is_number()) throw ParseError("checkpoint: non-numeric entry in '" + path + "'");
      m(i, c) = v.get<double>();
    }
  }
  if (!m.allFinite()) throw ParseError("checkpoint: non-finite entry in '" + path + "'");
  return m;
}

json layers_json(const std::vector<DenseLayer>& layers) {
  json out = json::array();
  for (const auto& l : layers) out.push_back({{"weight", matrix_json(l.weight)}, {"bias", matrix_json(l.bias)}});
  return out;
}

std::vector<DenseLayer> layers_from_json(const json& j, const std::string& path) {
  if (!j.is_array()) throw ParseError("checkpoint: field '" + path + "' must be an array");
  std::vector<DenseLayer> layers;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string p = path + "[" + std::to_string(i) + "]";
    Matrix bias = matrix_from_json(field(j[i], "bias", p), p + ".bias");
    if (bias.cols() != 1) throw ParseError("checkpoint: field '" + p + ".bias' must be a column");
    layers.push_back({matrix_from_json(field(j[i], "weight", p), p + ".weight"), bias.col(0)});
  }
  return layers;
}

json bank_json(const FifoBank& bank) {
  return {{"capacity", bank.capacity()}, {"batch_size", bank.batch_size()}, {"contents", matrix_json(bank.contents())}};
}

FifoBank bank_from_json(const json& j, const std::string& path) {
  const auto capacity = scalar_field<Index>(j, "capacity", path);
  const auto batch = scalar_field<Index>(j, "batch_size", path);
  Matrix contents = matrix_from_json(field(j, "contents", path), path + ".contents");
  try {
    FifoBank bank(contents.rows(), capacity, batch);
    bank.restore(contents);
    return bank;
  } catch (const std::invalid_argument& e) {
    throw ParseError("checkpoint: field '" + path + "': " + e.what());
  }
}

json metrics_entry(const EpochMetrics& m) {
  return {{"epoch", m.epoch},
          {"prec_at_k", m.prec_at_k},
          {"map_at_k", m.map_at_k},
          {"map", m.map},
          {"mean_alignment_loss", m.mean_alignment_loss},
          {"mean_semantic_loss", m.mean_semantic_loss},
          {"max_marginal_residual", m.max_marginal_residual},
          {"alignment_ot_calls", m.alignment_ot_calls},
          {"alignment_ot_shape", {m.alignment_ot_rows, m.alignment_ot_cols}}};
}

EpochMetrics metrics_from_json(const json& j, const std::string& path) {
  EpochMetrics m;
  m.epoch = scalar_field<int>(j, "epoch", path);
  m.prec_at_k = scalar_field<double>(j, "prec_at_k", path);
  m.map_at_k = scalar_field<double>(j, "map_at_k", path);
  m.map = scalar_field<double>(j, "map", path);
  m.mean_alignment_loss = scalar_field<double>(j, "mean_alignment_loss", path);
  m.mean_semantic_loss = scalar_field<double>(j, "mean_semantic_loss", path);
  m.max_marginal_residual = scalar_field<double>(j, "max_marginal_residual", path);
  m.alignment_ot_calls = scalar_field<std::int64_t>(j, "alignment_ot_calls", path);
  auto shape = scalar_field<std::vector<Index>>(j, "alignment_ot_shape", path);
  if (shape.size() != 2) throw ParseError("checkpoint: field '" + path + ".alignment_ot_shape' must have 2 entries");
  m.alignment_ot_rows = shape[0];
  m.alignment_ot_cols = shape[1];
  return m;
}

}  // namespace

json to_json(const Checkpoint& cp) {
  const TrainingState& s = cp.state;
  json history = json::array();
  for (const auto& m : cp.history) history.push_back(metrics_entry(m));
  return {{"version", cp.version},
          {"config_hash", cp.config_hash},
          {"config", cp.config},
          {"epoch", cp.epoch},
          {"history", std::move(history)},
          {"state",
           {{"step", s.step},
            {"encoder", {{"widths", s.encoder.widths()}, {"layers", layers_json(s.encoder.layers())}}},
            {"prototypes", matrix_json(s.prototypes.vectors())},
            {"correspondence_prototypes", matrix_json(s.correspondence_prototypes.vectors())},
            {"optimizer",
             {{"encoder_velocity", layers_json(s.optimizer.encoder_velocity)},
              {"prototype_velocity", matrix_json(s.optimizer.prototype_velocity)}}},
            {"sketch_bank", bank_json(s.sketch_bank)},
            {"photo_bank", bank_json(s.photo_bank)},
            {"sketch_queue", bank_json(s.sketch_queue)},
            {"photo_queue", bank_json(s.photo_queue)}}}};
}

Checkpoint checkpoint_from_json(const json& j) {
  Checkpoint cp;
  cp.version = scalar_field<std::string>(j, "version", "checkpoint");
  cp.config_hash = scalar_field<std::string>(j, "config_hash", "checkpoint");
  cp.config = field(j, "config", "checkpoint");
  cp.epoch = scalar_field<int>(j, "epoch", "checkpoint");
  const json& history = field(j, "history", "checkpoint");
  if (!history.is_array()) throw ParseError("checkpoint: field 'checkpoint.history' must be an array");
  for (std::size_t i = 0; i < history.size(); ++i)
    cp.history.push_back(metrics_from_json(history[i], "checkpoint.history[" + std::to_string(i) + "]"));

  const json& st = field(j, "state", "checkpoint");
  const std::string sp = "checkpoint.state";
  TrainingState& s = cp.state;
  s.step = scalar_field<std::int64_t>(st, "step", sp);

  const json& enc = field(st, "encoder", sp);
  auto widths = scalar_field<std::vector<int>>(enc, "widths", sp + ".encoder");
  std::vector<DenseLayer> layers = layers_from_json(field(enc, "layers", sp + ".encoder"), sp + ".encoder.layers");
  try {
    s.encoder = Encoder(widths, 0);
  } catch (const std::invalid_argument& e) {
    throw ParseError("checkpoint: field '" + sp + ".encoder.widths': " + e.what());
  }
  if (layers.size() != s.encoder.layers().size())
    throw ParseError("checkpoint: field '" + sp + ".encoder.layers' does not match widths");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& ref = s.encoder.layers()[i];
    if (layers[i].weight.rows() != ref.weight.rows() || layers[i].weight.cols() != ref.weight.cols() ||
        layers[i].bias.size() != ref.bias.size())
      throw ParseError("checkpoint: field '" + sp + ".encoder.layers[" + std::to_string(i) + "]' has the wrong shape");
  }
  s.encoder.layers() = std::move(layers);

  try {
    s.prototypes = PrototypeBank(matrix_from_json(field(st, "prototypes", sp), sp + ".prototypes"));
    s.correspondence_prototypes =
        PrototypeBank(matrix_from_json(field(st, "correspondence_prototypes", sp), sp + ".correspondence_prototypes"));
  } catch (const std::invalid_argument& e) {
    throw ParseError("checkpoint: field '" + sp + ".prototypes': " + e.what());
  }

  const json& opt = field(st, "optimizer", sp);
  s.optimizer.encoder_velocity =
      layers_from_json(field(opt, "encoder_velocity", sp + ".optimizer"), sp + ".optimizer.encoder_velocity");
  s.optimizer.prototype_velocity =
      matrix_from_json(field(opt, "prototype_velocity", sp + ".optimizer"), sp + ".optimizer.prototype_velocity");
  if (s.optimizer.encoder_velocity.size() != s.encoder.layers().size())
    throw ParseError("checkpoint: field '" + sp + ".optimizer.encoder_velocity' does not match the encoder");

  s.sketch_bank = bank_from_json(field(st, "sketch_bank", sp), sp + ".sketch_bank");
  s.photo_bank = bank_from_json(field(st, "photo_bank", sp), sp + ".photo_bank");
  s.sketch_queue = bank_from_json(field(st, "sketch_queue", sp), sp + ".sketch_queue");
  s.photo_queue = bank_from_json(field(st, "photo_queue", sp), sp + ".photo_queue");
  return cp;
}

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + tmp + "' for writing");
    out << to_json(checkpoint).dump() << '\n';
    if (!out) throw std::runtime_error("failed writing '" + tmp + "'");
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("checkpoint '" + path + "': " + e.what());
  }
  return checkpoint_from_json(j);
}

// ---------------------------------------------------------------------------
// Runs

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over (seed, stream)
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

constexpr std::uint64_t kEncoderStream = 1;
constexpr std::uint64_t kKmeansStream = 2;
constexpr std::uint64_t kEpochStreamBase = 1000;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

EpochMetrics metrics_from_report(int epoch, const RetrievalReport& r) {
  EpochMetrics m;
  m.epoch = epoch;
  m.prec_at_k = r.prec_at_k;
  m.map_at_k = r.map_at_k;
  m.map = r.map;
  return m;
}

}  // namespace

RetrievalReport evaluate_state(const TrainingState& state, const LabeledCorpus& corpus, int k) {
  const Matrix queries = state.encoder.encode(Matrix(corpus.query_sketch.vectors.cast<double>()));
  const Matrix gallery = state.encoder.encode(Matrix(corpus.gallery_photo.vectors.cast<double>()));
  return evaluate(queries, corpus.query_sketch.labels, gallery, corpus.gallery_photo.labels,
                  std::min<int>(k, static_cast<int>(gallery.cols())));
}

json metrics_json(const ExperimentConfig& config, const std::vector<EpochMetrics>& history) {
  json epochs = json::array();
  for (const auto& m : history) epochs.push_back(metrics_entry(m));
  json out = {{"version", kCodeVersion},
              {"config_hash", config_hash(config)},
              {"mode", to_string(config.mode)},
              {"seed", config.seed},
              {"k", config.eval_k},
              {"epochs", std::move(epochs)}};
  if (!history.empty())
    out["final"] = {{"epoch", history.back().epoch},
                    {"prec_at_k", history.back().prec_at_k},
                    {"map_at_k", history.back().map_at_k},
                    {"map", history.back().map}};
  return out;
}

std::string metrics_csv_rows(const ExperimentConfig& config, const std::vector<EpochMetrics>& history) {
  std::string out;
  char buf[160];
  for (const auto& m : history) {
    std::snprintf(buf, sizeof(buf), "%s,%llu,%d,%.6f,%.6f,%.6f\n", to_string(config.mode).c_str(),
                  static_cast<unsigned long long>(config.seed), m.epoch, m.prec_at_k, m.map_at_k, m.map);
    out += buf;
  }
  return out;
}

RunResult run_experiment(const ExperimentConfig& config, const LabeledCorpus& corpus, const RunOptions& options) {
  config.validate();
  const TrainingConfig tc = wire_ablation(config.training, config.mode);
  const std::string hash = config_hash(config);
  const Index A = tc.batch_size;

  const Matrix sketches = corpus.train_sketch.vectors.cast<double>();
  const Matrix photos = corpus.train_photo.vectors.cast<double>();
  if (sketches.cols() < A || photos.cols() < A)
    throw std::invalid_argument("run: each training domain needs at least one batch of samples");
  if (corpus.query_sketch.size() == 0 || corpus.gallery_photo.size() == 0)
    throw std::invalid_argument("run: corpus has no query or gallery records");

  RunResult result;
  int start_epoch = 0;
  if (!options.resume_from.empty()) {
    Checkpoint cp = load_checkpoint(options.resume_from);
    if (cp.version != kCodeVersion)
      throw std::runtime_error("resume: checkpoint version '" + cp.version + "' does not match '" + kCodeVersion + "'");
    if (cp.config_hash != hash)
      throw std::runtime_error("resume: checkpoint config hash " + cp.config_hash + " does not match " + hash);
    if (cp.epoch > config.epochs) throw std::runtime_error("resume: checkpoint is past the configured epoch count");
    result.state = std::move(cp.state);
    result.history = std::move(cp.history);
    start_epoch = cp.epoch;
  } else {
    std::vector<int> widths{static_cast<int>(sketches.rows())};
    widths.insert(widths.end(), tc.hidden_widths.begin(), tc.hidden_widths.end());
    widths.push_back(tc.embedding_dim);
    Encoder encoder(widths, mix_seed(config.seed, kEncoderStream));
    PrototypeBank protos = kmeans_init(encoder.encode(photos), tc.prototype_count, mix_seed(config.seed, kKmeansStream));
    result.state = make_training_state(tc, std::move(encoder), std::move(protos));
    result.history.push_back(metrics_from_report(0, evaluate_state(result.state, corpus, config.eval_k)));
  }

  fs::path out_dir;
  if (!options.out_dir.empty()) {
    out_dir = options.out_dir;
    fs::create_directories(out_dir);
  }

  const Index steps_per_epoch = photos.cols() / A;
  const Index sketch_rounds = (steps_per_epoch * A + sketches.cols() - 1) / sketches.cols();
  Matrix sketch_batch(sketches.rows(), A), photo_batch(photos.rows(), A);
  TrainingState& state = result.state;

  for (int epoch = start_epoch; epoch < config.epochs; ++epoch) {
    if (options.stop_after_epoch >= 0 && epoch >= options.stop_after_epoch) break;
    begin_epoch(state, tc);
    std::mt19937_64 rng(mix_seed(config.seed, kEpochStreamBase + static_cast<std::uint64_t>(epoch)));
    std::vector<Index> photo_order(static_cast<std::size_t>(photos.cols()));
    std::iota(photo_order.begin(), photo_order.end(), Index(0));
    std::shuffle(photo_order.begin(), photo_order.end(), rng);
    std::vector<Index> sketch_order;
    for (Index r = 0; r < sketch_rounds; ++r) {
      std::vector<Index> round(static_cast<std::size_t>(sketches.cols()));
      std::iota(round.begin(), round.end(), Index(0));
      std::shuffle(round.begin(), round.end(), rng);
      sketch_order.insert(sketch_order.end(), round.begin(), round.end());
    }

    const double lr = lr_schedule(epoch, tc);
    EpochMetrics m;
    for (Index step = 0; step < steps_per_epoch; ++step) {
      for (Index i = 0; i < A; ++i) {
        sketch_batch.col(i) = sketches.col(sketch_order[step * A + i]);
        photo_batch.col(i) = photos.col(photo_order[step * A + i]);
      }
      StepDiagnostics d;
      try {
        d = training_step(state, sketch_batch, photo_batch, tc, lr, rng);
      } catch (const std::exception& e) {
        throw std::runtime_error("training_step failed at epoch " + std::to_string(epoch + 1) + ", step " +
                                 std::to_string(step) + ": " + e.what());
      }
      m.mean_alignment_loss += d.alignment_loss;
      m.mean_semantic_loss += d.semantic_loss;
      m.max_marginal_residual = std::max(m.max_marginal_residual, d.max_marginal_residual);
      m.alignment_ot_calls += d.alignment_ot_calls;
      m.alignment_ot_rows = std::max(m.alignment_ot_rows, d.alignment_ot_rows);
      m.alignment_ot_cols = std::max(m.alignment_ot_cols, d.alignment_ot_cols);
    }
    const RetrievalReport report = evaluate_state(state, corpus, config.eval_k);
    const EpochMetrics eval = metrics_from_report(epoch + 1, report);
    m.epoch = eval.epoch;
    m.prec_at_k = eval.prec_at_k;
    m.map_at_k = eval.map_at_k;
    m.map = eval.map;
    if (steps_per_epoch > 0) {
      m.mean_alignment_loss /= double(steps_per_epoch);
      m.mean_semantic_loss /= double(steps_per_epoch);
    }
    result.history.push_back(m);
    if (options.verbose)
      std::fprintf(stderr, "[%s seed %llu] epoch %d  L_a %.4f  L_se %.4f  mAP %.4f\n", to_string(config.mode).c_str(),
                   static_cast<unsigned long long>(config.seed), m.epoch, m.mean_alignment_loss,
                   m.mean_semantic_loss, m.map);

    if (!out_dir.empty()) {
      Checkpoint cp{kCodeVersion, hash, to_json(config), epoch + 1, state, result.history};
      save_checkpoint((out_dir / "checkpoint.json").string(), cp);
    }
  }

  result.final_report = evaluate_state(state, corpus, config.eval_k);
  if (!out_dir.empty()) {
    if (start_epoch == 0 && config.epochs == 0) {
      Checkpoint cp{kCodeVersion, hash, to_json(config), 0, state, result.history};
      save_checkpoint((out_dir / "checkpoint.json").string(), cp);
    }
    write_text(out_dir / "metrics.json", metrics_json(config, result.history).dump(2) + "\n");
    write_text(out_dir / "metrics.csv", std::string(kMetricsCsvHeader) + "\n" + metrics_csv_rows(config, result.history));
    write_text(out_dir / "report.json", to_json(result.final_report).dump() + "\n");
  }
  return result;
}

std::vector<AblationRun> ablate(const ExperimentConfig& base, const std::vector<AblationMode>& modes,
                                const std::vector<std::uint64_t>& seeds, const std::string& out_dir, bool verbose) {
  const LabeledCorpus corpus = corpus_for(base);
  std::vector<AblationRun> runs;
  std::string csv = std::string(kMetricsCsvHeader) + "\n";
  for (AblationMode mode : modes)
    for (std::uint64_t seed : seeds) {
      ExperimentConfig cfg = base;
      cfg.mode = mode;
      cfg.seed = seed;
      RunOptions opts;
      opts.verbose = verbose;
      if (!out_dir.empty())
        opts.out_dir = (fs::path(out_dir) / (to_string(mode) + "_seed" + std::to_string(seed))).string();
      RunResult r = run_experiment(cfg, corpus, opts);
      csv += metrics_csv_rows(cfg, r.history);
      runs.push_back({mode, seed, std::move(r)});
    }
  if (!out_dir.empty()) write_text(fs::path(out_dir) / "ablation.csv", csv);
  return runs;
}

}  // namespace pmjdot
