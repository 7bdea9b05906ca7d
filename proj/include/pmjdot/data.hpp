// Synthetic two-domain corpus and its CSV file format.
//
// File layout: a mandatory header `split,domain,id,label,v0,...,v{d-1}`
// followed by one record per line. `split` is train, query or gallery;
// training records carry the literal `-` as label. Floats use 9
// significant digits, which round-trips the single-precision storage.
#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <string>
#include <vector>

namespace pmjdot {

using CorpusMatrix = Eigen::MatrixXf;

struct DomainSpec {
  int class_count = 10;
  int photos_per_class = 100;
  int sketches_per_class = 60;
  int queries_per_class = 10;
  int ambient_dim = 32;
  double class_separation = 1.0;
  double noise_sigma = 0.12;
  // Sketch-domain transform: one rotation per angle, each in a random plane,
  // then a translation of the given norm and inflated noise.
  std::vector<double> rotation_degrees{20.0, 20.0};
  double translation_norm = 4.0;
  double sketch_noise_scale = 1.0;
  std::uint64_t seed = 7;

  void validate() const;
};

/// Samples of one split, one column per record.
struct SampleSet {
  CorpusMatrix vectors;
  std::vector<int> ids;
  std::vector<int> labels;  // empty for training splits

  Eigen::Index size() const { return vectors.cols(); }
  bool operator==(const SampleSet&) const = default;
};

struct LabeledCorpus {
  SampleSet train_sketch;
  SampleSet train_photo;
  SampleSet query_sketch;
  SampleSet gallery_photo;

  int dim() const { return static_cast<int>(train_photo.vectors.rows()); }
  bool operator==(const LabeledCorpus&) const = default;
};

/// Gaussian class blobs; photos sit at the class means, sketches at the
/// rotated and translated means with extra noise. The gallery is a labelled
/// copy of the training photos; queries are held-out sketches.
LabeledCorpus generate(const DomainSpec& spec);

void save_corpus(const LabeledCorpus& corpus, const std::string& path);
/// Throws ParseError naming the record index on malformed input, and
/// rejects labels in training splits.
LabeledCorpus load_corpus(const std::string& path);

std::string corpus_to_csv(const LabeledCorpus& corpus);
LabeledCorpus corpus_from_csv(const std::string& text);

}  // namespace pmjdot
