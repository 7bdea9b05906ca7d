#include "pmjdot/data.hpp"

#include "pmjdot/types.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string_view>

namespace pmjdot {

void DomainSpec::validate() const {
  if (class_count < 1 || ambient_dim < 1) throw std::invalid_argument("DomainSpec: class_count, ambient_dim >= 1");
  if (photos_per_class < 1) throw std::invalid_argument("DomainSpec: photos_per_class >= 1");
  if (queries_per_class < 0 || sketches_per_class <= queries_per_class)
    throw std::invalid_argument("DomainSpec: need more sketches per class than queries per class");
  if (!(class_separation >= 0) || !(noise_sigma >= 0) || !(translation_norm >= 0) || !(sketch_noise_scale >= 0))
    throw std::invalid_argument("DomainSpec: scales must be non-negative");
  if (ambient_dim < 2 && !rotation_degrees.empty())
    throw std::invalid_argument("DomainSpec: rotations need ambient_dim >= 2");
}

namespace {

using MatrixD = Eigen::MatrixXd;
using VectorD = Eigen::VectorXd;

VectorD gaussian_vector(int dim, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  VectorD v(dim);
  for (int i = 0; i < dim; ++i) v(i) = n(rng);
  return v;
}

VectorD random_unit(int dim, std::mt19937_64& rng) {
  VectorD v = gaussian_vector(dim, rng);
  return v / std::max(v.norm(), kNormEpsilon);
}

// Rotation by `degrees` in a random 2-plane.
MatrixD plane_rotation(int dim, double degrees, std::mt19937_64& rng) {
  VectorD e1 = random_unit(dim, rng);
  VectorD e2 = gaussian_vector(dim, rng);
  e2 -= e1 * e1.dot(e2);
  e2 /= std::max(e2.norm(), kNormEpsilon);
  const double t = degrees * std::numbers::pi / 180.0;
  MatrixD r = MatrixD::Identity(dim, dim);
  r += (std::cos(t) - 1.0) * (e1 * e1.transpose() + e2 * e2.transpose());
  r += std::sin(t) * (e2 * e1.transpose() - e1 * e2.transpose());
  return r;
}

}  // namespace

LabeledCorpus generate(const DomainSpec& spec) {
  spec.validate();
  const int d = spec.ambient_dim, c = spec.class_count;
  std::mt19937_64 rng(spec.seed);

  MatrixD means(d, c);
  for (int k = 0; k < c; ++k) means.col(k) = spec.class_separation * random_unit(d, rng);

  MatrixD rotation = MatrixD::Identity(d, d);
  for (double deg : spec.rotation_degrees) rotation = plane_rotation(d, deg, rng) * rotation;
  const VectorD translation = spec.translation_norm * random_unit(d, rng);
  const MatrixD sketch_means = (rotation * means).colwise() + translation;

  LabeledCorpus corpus;
  const int n_photo = c * spec.photos_per_class;
  corpus.train_photo.vectors.resize(d, n_photo);
  for (int k = 0, j = 0; k < c; ++k)
    for (int i = 0; i < spec.photos_per_class; ++i, ++j) {
      corpus.train_photo.vectors.col(j) =
          (means.col(k) + spec.noise_sigma * gaussian_vector(d, rng)).cast<float>();
      corpus.train_photo.ids.push_back(j);
    }
  corpus.gallery_photo = corpus.train_photo;
  for (int k = 0; k < c; ++k) corpus.gallery_photo.labels.insert(corpus.gallery_photo.labels.end(), spec.photos_per_class, k);

  const double sketch_sigma = spec.noise_sigma * spec.sketch_noise_scale;
  const int n_train_sketch = c * (spec.sketches_per_class - spec.queries_per_class);
  const int n_query = c * spec.queries_per_class;
  corpus.train_sketch.vectors.resize(d, n_train_sketch);
  corpus.query_sketch.vectors.resize(d, n_query);
  int sketch_id = 0, t = 0, q = 0;
  for (int k = 0; k < c; ++k) {
    std::vector<int> order(spec.sketches_per_class);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<bool> is_query(spec.sketches_per_class, false);
    for (int i = 0; i < spec.queries_per_class; ++i) is_query[order[i]] = true;
    for (int i = 0; i < spec.sketches_per_class; ++i, ++sketch_id) {
      Eigen::VectorXf v = (sketch_means.col(k) + sketch_sigma * gaussian_vector(d, rng)).cast<float>();
      if (is_query[i]) {
        corpus.query_sketch.vectors.col(q++) = v;
        corpus.query_sketch.ids.push_back(sketch_id);
        corpus.query_sketch.labels.push_back(k);
      } else {
        corpus.train_sketch.vectors.col(t++) = v;
        corpus.train_sketch.ids.push_back(sketch_id);
      }
    }
  }
  return corpus;
}

namespace {

void append_float(std::string& out, float v) {
  char buf[32];
  const int n = std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
  out.append(buf, static_cast<std::size_t>(n));
}

void append_set(std::string& out, const SampleSet& set, const char* split, const char* domain) {
  for (Eigen::Index j = 0; j < set.size(); ++j) {
    out += split;
    out += ',';
    out += domain;
    out += ',';
    out += std::to_string(set.ids[j]);
    out += ',';
    out += set.labels.empty() ? std::string("-") : std::to_string(set.labels[j]);
    for (Eigen::Index i = 0; i < set.vectors.rows(); ++i) {
      out += ',';
      append_float(out, set.vectors(i, j));
    }
    out += '\n';
  }
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

struct Pending {
  std::vector<std::vector<float>> columns;
  std::vector<int> ids;
  std::vector<int> labels;

  SampleSet finish(int dim) const {
    SampleSet s;
    s.vectors.resize(dim, static_cast<Eigen::Index>(columns.size()));
    for (std::size_t j = 0; j < columns.size(); ++j)
      for (int i = 0; i < dim; ++i) s.vectors(i, static_cast<Eigen::Index>(j)) = columns[j][i];
    s.ids = ids;
    s.labels = labels;
    return s;
  }
};

}  // namespace

std::string corpus_to_csv(const LabeledCorpus& corpus) {
  std::string out = "split,domain,id,label";
  for (int i = 0; i < corpus.dim(); ++i) out += ",v" + std::to_string(i);
  out += '\n';
  append_set(out, corpus.train_sketch, "train", "sketch");
  append_set(out, corpus.train_photo, "train", "photo");
  append_set(out, corpus.query_sketch, "query", "sketch");
  append_set(out, corpus.gallery_photo, "gallery", "photo");
  return out;
}

LabeledCorpus corpus_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("corpus: missing header line");
  auto header = split_fields(line);
  if (header.size() < 5 || header[0] != "split" || header[1] != "domain" || header[2] != "id" || header[3] != "label")
    throw ParseError("corpus: header must start with split,domain,id,label,v0");
  const int dim = static_cast<int>(header.size()) - 4;
  for (int i = 0; i < dim; ++i)
    if (header[4 + i] != "v" + std::to_string(i)) throw ParseError("corpus: header column " + std::to_string(4 + i) + " should be v" + std::to_string(i));

  Pending train_sketch, train_photo, query_sketch, gallery_photo;
  std::size_t record = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::string where = "corpus: record " + std::to_string(record) + " (line " + std::to_string(record + 2) + ")";
    auto f = split_fields(line);
    if (f.size() != header.size())
      throw ParseError(where + ": expected " + std::to_string(header.size()) + " fields, got " + std::to_string(f.size()));
    Pending* target = nullptr;
    const bool train = f[0] == "train";
    if (train && f[1] == "sketch") target = &train_sketch;
    else if (train && f[1] == "photo") target = &train_photo;
    else if (f[0] == "query" && f[1] == "sketch") target = &query_sketch;
    else if (f[0] == "gallery" && f[1] == "photo") target = &gallery_photo;
    else throw ParseError(where + ": unknown split/domain '" + std::string(f[0]) + "," + std::string(f[1]) + "'");

    int id = 0;
    if (!parse_number(f[2], id)) throw ParseError(where + ": bad id '" + std::string(f[2]) + "'");
    if (train) {
      if (f[3] != "-") throw ParseError(where + ": training records must not carry a label");
    } else {
      int label = 0;
      if (!parse_number(f[3], label) || label < 0) throw ParseError(where + ": bad label '" + std::string(f[3]) + "'");
      target->labels.push_back(label);
    }
    std::vector<float> values(dim);
    for (int i = 0; i < dim; ++i)
      if (!parse_number(f[4 + i], values[i]) || !std::isfinite(values[i]))
        throw ParseError(where + ": bad value in column v" + std::to_string(i));
    target->ids.push_back(id);
    target->columns.push_back(std::move(values));
    ++record;
  }

  LabeledCorpus corpus{train_sketch.finish(dim), train_photo.finish(dim), query_sketch.finish(dim),
                       gallery_photo.finish(dim)};
  if (corpus.train_photo.size() == 0 || corpus.train_sketch.size() == 0)
    throw ParseError("corpus: both training domains must be non-empty");
  std::set<int> train_ids(corpus.train_sketch.ids.begin(), corpus.train_sketch.ids.end());
  for (int id : corpus.query_sketch.ids)
    if (train_ids.count(id)) throw ParseError("corpus: query sketch " + std::to_string(id) + " also appears in training");
  return corpus;
}

void save_corpus(const LabeledCorpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << corpus_to_csv(corpus);
  if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

LabeledCorpus load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return corpus_from_csv(buf.str());
}

}  // namespace pmjdot
