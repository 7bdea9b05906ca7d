// Alternating optimization: correspondence with parameters frozen, then one
// SGD step on the encoder and prototypes.
#pragma once

#include "pmjdot/correspondence.hpp"
#include "pmjdot/encoder.hpp"
#include "pmjdot/losses.hpp"
#include "pmjdot/types.hpp"

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace pmjdot {

/// How cross-domain alignment is wired into a training step.
enum class AlignmentMode {
  none,       // semantic loss only
  batch,      // OT between the sketch batch and the photo batch
  prototype,  // OT between prototypes and each domain's memory bank
  bank,       // OT between the sketch bank and the photo bank
};

/// How often the prototypes used for correspondence are refreshed.
enum class Alternation { step, epoch };

std::string to_string(AlignmentMode mode);
AlignmentMode alignment_mode_from_string(const std::string& s);
std::string to_string(Alternation a);
Alternation alternation_from_string(const std::string& s);

struct AugmentationSpec {
  double noise_sigma = 0.15;
  double scale_min = 0.8;
  double scale_max = 1.2;
  double dropout_fraction = 0.1;

  void validate() const;
};

struct TrainingConfig {
  // Loss weights.
  double nu = 1.0;
  double mu = 10.0;
  // SGD.
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int lr_halving_period = 10;
  // Sizes.
  int batch_size = 16;
  int queue_size = 64;
  int bank_size = 128;
  int prototype_count = 10;
  std::vector<int> hidden_widths{64};
  int embedding_dim = 16;

  CostParams cost;
  SinkhornConfig<double> correspondence_ot;
  SinkhornConfig<double> assignment_ot;
  AugmentationSpec augmentation;

  AlignmentMode alignment = AlignmentMode::prototype;
  Alternation alternation = Alternation::step;
  bool prototype_grad_from_alignment = true;
  bool prototype_grad_from_semantic = true;

  void validate() const;
};

struct OptimizerState {
  std::vector<DenseLayer> encoder_velocity;
  Matrix prototype_velocity;
};

struct TrainingState {
  Encoder encoder;
  PrototypeBank prototypes;
  // Prototypes used on the cost side of correspondence under epoch alternation.
  PrototypeBank correspondence_prototypes;
  MemoryBank sketch_bank;
  MemoryBank photo_bank;
  FeatureQueue sketch_queue;
  FeatureQueue photo_queue;
  OptimizerState optimizer;
  std::int64_t step = 0;
};

/// Fresh state with empty banks/queues and zero momentum.
TrainingState make_training_state(const TrainingConfig& config, Encoder encoder, PrototypeBank prototypes);

/// Called at the start of each epoch; refreshes the correspondence snapshot.
void begin_epoch(TrainingState& state, const TrainingConfig& config);

struct StepDiagnostics {
  double alignment_loss = 0;
  double semantic_loss = 0;
  double total_loss = 0;
  // Largest marginal deviation over every OT solve in the step.
  double max_marginal_residual = 0;
  bool all_converged = true;
  bool log_clamped = false;
  // Shape of the alignment OT problem (0 x 0 when alignment is off).
  Index alignment_ot_rows = 0;
  Index alignment_ot_cols = 0;
  int alignment_ot_calls = 0;
  int assignment_ot_calls = 0;
};

class NonFiniteLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One alternation step on a sketch batch and a photo batch (input x A each).
/// On any error, including a non-finite loss, `state` is left unchanged.
StepDiagnostics training_step(TrainingState& state, const Matrix& sketch_batch, const Matrix& photo_batch,
                              const TrainingConfig& config, double learning_rate, std::mt19937_64& rng);

/// initial * 0.5^floor(epoch / period)
double lr_schedule(int epoch, const TrainingConfig& config);

/// Lloyd's algorithm with k-means++ seeding on unit-norm features (D x N);
/// centroids are L2-normalized into a prototype bank.
PrototypeBank kmeans_init(const Matrix& features, Index k, std::uint64_t seed);

/// (input * keep_mask) * scale + noise, drawn from `rng`.
Vector augment(const Vector& input, const AugmentationSpec& spec, std::mt19937_64& rng);

}  // namespace pmjdot
