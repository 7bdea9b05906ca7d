#include "pmjdot/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace pmjdot {

std::string to_string(AlignmentMode mode) {
  switch (mode) {
    case AlignmentMode::none: return "none";
    case AlignmentMode::batch: return "batch";
    case AlignmentMode::prototype: return "prototype";
    case AlignmentMode::bank: return "bank";
  }
  return "unknown";
}

AlignmentMode alignment_mode_from_string(const std::string& s) {
  if (s == "none") return AlignmentMode::none;
  if (s == "batch") return AlignmentMode::batch;
  if (s == "prototype") return AlignmentMode::prototype;
  if (s == "bank") return AlignmentMode::bank;
  throw std::invalid_argument("unknown alignment mode '" + s + "'");
}

std::string to_string(Alternation a) { return a == Alternation::step ? "step" : "epoch"; }

Alternation alternation_from_string(const std::string& s) {
  if (s == "step") return Alternation::step;
  if (s == "epoch") return Alternation::epoch;
  throw std::invalid_argument("unknown alternation '" + s + "'");
}

void AugmentationSpec::validate() const {
  if (!(noise_sigma >= 0)) throw std::invalid_argument("augmentation: noise_sigma must be >= 0");
  if (!(scale_min > 0) || !(scale_max >= scale_min))
    throw std::invalid_argument("augmentation: scale range must be positive and ordered");
  if (!(dropout_fraction >= 0) || !(dropout_fraction < 1))
    throw std::invalid_argument("augmentation: dropout_fraction must be in [0, 1)");
}

void TrainingConfig::validate() const {
  if (!(nu >= 0) || !(mu >= 0)) throw std::invalid_argument("training: loss weights must be >= 0");
  if (!(learning_rate > 0)) throw std::invalid_argument("training: learning_rate must be positive");
  if (!(momentum >= 0) || !(weight_decay >= 0))
    throw std::invalid_argument("training: momentum and weight_decay must be >= 0");
  if (lr_halving_period < 1) throw std::invalid_argument("training: lr_halving_period must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("training: batch_size must be >= 1");
  if (queue_size < batch_size || queue_size % batch_size != 0)
    throw std::invalid_argument("training: queue_size must be a multiple of batch_size");
  if (bank_size < batch_size || bank_size % batch_size != 0)
    throw std::invalid_argument("training: bank_size must be a multiple of batch_size");
  if (prototype_count < 2) throw std::invalid_argument("training: prototype_count must be >= 2");
  if (embedding_dim < 1) throw std::invalid_argument("training: embedding_dim must be >= 1");
  cost.validate();
  correspondence_ot.validate();
  assignment_ot.validate();
  augmentation.validate();
  if ((alignment == AlignmentMode::batch || alignment == AlignmentMode::bank) && !(cost.alpha > 0))
    throw std::invalid_argument("training: prototype-free alignment needs alpha > 0");
}

TrainingState make_training_state(const TrainingConfig& config, Encoder encoder, PrototypeBank prototypes) {
  config.validate();
  const Index d = encoder.output_dim();
  if (prototypes.dim() != d) throw std::invalid_argument("training: prototype dimension != embedding dimension");
  TrainingState s;
  s.encoder = std::move(encoder);
  s.prototypes = std::move(prototypes);
  s.correspondence_prototypes = s.prototypes;
  s.sketch_bank = MemoryBank(d, config.bank_size, config.batch_size);
  s.photo_bank = MemoryBank(d, config.bank_size, config.batch_size);
  s.sketch_queue = FeatureQueue(d, config.queue_size, config.batch_size);
  s.photo_queue = FeatureQueue(d, config.queue_size, config.batch_size);
  s.optimizer.encoder_velocity = EncoderGradient::zeros_like(s.encoder.layers()).layers;
  s.optimizer.prototype_velocity = Matrix::Zero(d, s.prototypes.count());
  return s;
}

void begin_epoch(TrainingState& state, const TrainingConfig& config) {
  if (config.alternation == Alternation::epoch) state.correspondence_prototypes = state.prototypes;
}

namespace {

Matrix augment_batch(const Matrix& batch, const AugmentationSpec& spec, std::mt19937_64& rng) {
  Matrix out(batch.rows(), batch.cols());
  for (Index j = 0; j < batch.cols(); ++j) out.col(j) = augment(batch.col(j), spec, rng);
  return out;
}

struct Tracker {
  StepDiagnostics& diag;
  void record(const TransportPlan<double>& plan) {
    diag.max_marginal_residual = std::max(diag.max_marginal_residual, plan.max_violation());
    diag.all_converged = diag.all_converged && plan.converged;
  }
};

// Cost 1 - xs.xp between two feature sets, clamped at zero against rounding.
Matrix cosine_cost(const Matrix& a, const Matrix& b, double alpha) {
  return (alpha * (1.0 - (a.transpose() * b).array())).matrix().cwiseMax(0.0);
}

}  // namespace

StepDiagnostics training_step(TrainingState& state, const Matrix& sketch_batch, const Matrix& photo_batch,
                              const TrainingConfig& config, double learning_rate, std::mt19937_64& rng) {
  config.validate();
  const Index A = config.batch_size;
  if (sketch_batch.cols() != A || photo_batch.cols() != A)
    throw std::invalid_argument("training_step: batches must have exactly batch_size columns");

  StepDiagnostics diag;
  Tracker track{diag};
  const Encoder& enc = state.encoder;
  const PrototypeBank& protos = state.prototypes;

  // Two augmented views per sample per domain.
  const Matrix sketch_v1 = augment_batch(sketch_batch, config.augmentation, rng);
  const Matrix sketch_v2 = augment_batch(sketch_batch, config.augmentation, rng);
  const Matrix photo_v1 = augment_batch(photo_batch, config.augmentation, rng);
  const Matrix photo_v2 = augment_batch(photo_batch, config.augmentation, rng);
  const Encoder::Trace ts1 = enc.forward(sketch_v1);
  const Encoder::Trace ts2 = enc.forward(sketch_v2);
  const Encoder::Trace tp1 = enc.forward(photo_v1);
  const Encoder::Trace tp2 = enc.forward(photo_v2);

  // View-1 snapshots enter the banks and queues. Work on copies so a
  // failed step leaves the state untouched.
  MemoryBank sketch_bank = state.sketch_bank;
  MemoryBank photo_bank = state.photo_bank;
  FeatureQueue sketch_queue = state.sketch_queue;
  FeatureQueue photo_queue = state.photo_queue;
  sketch_bank.push(ts1.output);
  photo_bank.push(tp1.output);
  sketch_queue.push(ts1.output);
  photo_queue.push(tp1.output);

  Matrix d_s1 = Matrix::Zero(ts1.output.rows(), A), d_s2 = d_s1, d_p1 = d_s1, d_p2 = d_s1;
  Matrix d_protos = Matrix::Zero(protos.dim(), protos.count());

  // Correspondence with parameters frozen, then the alignment loss.
  switch (config.alignment) {
    case AlignmentMode::none:
      break;
    case AlignmentMode::prototype: {
      const PrototypeBank& cost_protos =
          config.alternation == Alternation::epoch ? state.correspondence_prototypes : protos;
      TransportPlan<double> gs = estimate_correspondence(cost_protos, sketch_bank, config.cost, config.correspondence_ot);
      TransportPlan<double> gp = estimate_correspondence(cost_protos, photo_bank, config.cost, config.correspondence_ot);
      track.record(gs);
      track.record(gp);
      diag.alignment_ot_calls = 2;
      diag.alignment_ot_rows = gs.rows();
      diag.alignment_ot_cols = gs.cols();
      AlignmentLoss la = alignment_loss(extract_batch_plan(gs.mass, A), extract_batch_plan(gp.mass, A), protos,
                                        ts1.output, tp1.output, config.cost);
      diag.alignment_loss = la.loss;
      diag.log_clamped = diag.log_clamped || la.clamped;
      d_s1 += config.nu * la.d_sketch;
      d_p1 += config.nu * la.d_photo;
      if (config.prototype_grad_from_alignment) d_protos += config.nu * la.d_prototypes;
      break;
    }
    case AlignmentMode::batch: {
      TransportPlan<double> g = sinkhorn_min(cosine_cost(ts1.output, tp1.output, config.cost.alpha),
                                             config.correspondence_ot);
      track.record(g);
      diag.alignment_ot_calls = 1;
      diag.alignment_ot_rows = g.rows();
      diag.alignment_ot_cols = g.cols();
      PairAlignment la = feature_alignment_loss(g.mass / g.mass.sum(), ts1.output, tp1.output, config.cost.alpha);
      diag.alignment_loss = la.loss;
      d_s1 += config.nu * la.d_sketch;
      d_p1 += config.nu * la.d_photo;
      break;
    }
    case AlignmentMode::bank: {
      const Matrix ms = sketch_bank.contents();
      const Matrix mp = photo_bank.contents();
      TransportPlan<double> g = sinkhorn_min(cosine_cost(ms, mp, config.cost.alpha), config.correspondence_ot);
      track.record(g);
      diag.alignment_ot_calls = 1;
      diag.alignment_ot_rows = g.rows();
      diag.alignment_ot_cols = g.cols();
      // Keep only entries touching a current-batch sample on either side.
      Matrix w = Matrix::Zero(g.rows(), g.cols());
      w.topRows(A) = g.mass.topRows(A);
      w.leftCols(A) = g.mass.leftCols(A);
      const double mass = w.sum();
      if (!(mass > 0)) throw DegenerateMassError("training_step: bank plan has no batch mass");
      PairAlignment la = feature_alignment_loss(w / mass, ms, mp, config.cost.alpha);
      diag.alignment_loss = la.loss;
      // Older bank entries are detached snapshots.
      d_s1 += config.nu * la.d_sketch.leftCols(A);
      d_p1 += config.nu * la.d_photo.leftCols(A);
      break;
    }
  }

  // Swapped prediction. The queue top holds view 1 after the push; view 2
  // is scored against the same history with its own batch on top.
  auto semantic = [&](const FeatureQueue& queue, const Encoder::Trace& v1, const Encoder::Trace& v2) {
    Matrix q = queue.contents();
    TransportPlan<double> z1 = swav_assignments(q, protos, config.assignment_ot);
    q.leftCols(A) = v2.output;
    TransportPlan<double> z2 = swav_assignments(q, protos, config.assignment_ot);
    track.record(z1);
    track.record(z2);
    diag.assignment_ot_calls += 2;
    return swav_loss(v1.output, v2.output, z1.mass.leftCols(A), z2.mass.leftCols(A), protos,
                     config.cost.temperature);
  };
  SwappedLoss ls = semantic(sketch_queue, ts1, ts2);
  SwappedLoss lp = semantic(photo_queue, tp1, tp2);
  diag.semantic_loss = ls.loss + lp.loss;
  diag.log_clamped = diag.log_clamped || ls.clamped || lp.clamped;
  d_s1 += config.mu * ls.d_view1;
  d_s2 += config.mu * ls.d_view2;
  d_p1 += config.mu * lp.d_view1;
  d_p2 += config.mu * lp.d_view2;
  if (config.prototype_grad_from_semantic) d_protos += config.mu * (ls.d_prototypes + lp.d_prototypes);

  diag.total_loss = config.nu * diag.alignment_loss + config.mu * diag.semantic_loss;
  if (!std::isfinite(diag.total_loss) || !std::isfinite(diag.alignment_loss) || !std::isfinite(diag.semantic_loss))
    throw NonFiniteLossError("training_step: non-finite loss at step " + std::to_string(state.step));

  // SGD with momentum; weight decay on encoder weights only.
  EncoderGradient grad = enc.backward(ts1, d_s1);
  grad += enc.backward(ts2, d_s2);
  grad += enc.backward(tp1, d_p1);
  grad += enc.backward(tp2, d_p2);
  for (const auto& l : grad.layers)
    if (!l.weight.allFinite() || !l.bias.allFinite())
      throw NonFiniteLossError("training_step: non-finite gradient at step " + std::to_string(state.step));
  if (!d_protos.allFinite())
    throw NonFiniteLossError("training_step: non-finite prototype gradient at step " + std::to_string(state.step));

  auto& layers = state.encoder.layers();
  auto& velocity = state.optimizer.encoder_velocity;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    velocity[i].weight = config.momentum * velocity[i].weight + grad.layers[i].weight +
                         config.weight_decay * layers[i].weight;
    velocity[i].bias = config.momentum * velocity[i].bias + grad.layers[i].bias;
    layers[i].weight -= learning_rate * velocity[i].weight;
    layers[i].bias -= learning_rate * velocity[i].bias;
  }
  state.optimizer.prototype_velocity = config.momentum * state.optimizer.prototype_velocity + d_protos;
  state.prototypes.mutable_vectors() -= learning_rate * state.optimizer.prototype_velocity;
  state.prototypes.renormalize();

  state.sketch_bank = std::move(sketch_bank);
  state.photo_bank = std::move(photo_bank);
  state.sketch_queue = std::move(sketch_queue);
  state.photo_queue = std::move(photo_queue);
  ++state.step;
  return diag;
}

double lr_schedule(int epoch, const TrainingConfig& config) {
  if (epoch < 0) throw std::invalid_argument("lr_schedule: epoch must be >= 0");
  return std::ldexp(config.learning_rate, -(epoch / config.lr_halving_period));
}

PrototypeBank kmeans_init(const Matrix& features, Index k, std::uint64_t seed) {
  const Index n = features.cols();
  if (k < 1 || n < k)
    throw std::invalid_argument("kmeans_init: need at least K=" + std::to_string(k) + " points, got " +
                                std::to_string(n));
  std::mt19937_64 rng(seed);
  Matrix centers(features.rows(), k);

  // k-means++ seeding.
  std::uniform_int_distribution<Index> first(0, n - 1);
  centers.col(0) = features.col(first(rng));
  Vector nearest = (features.colwise() - centers.col(0)).colwise().squaredNorm().transpose();
  for (Index c = 1; c < k; ++c) {
    const double total = nearest.sum();
    Index pick = 0;
    if (total > 0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double r = u(rng), acc = 0;
      pick = n - 1;
      for (Index i = 0; i < n; ++i) {
        acc += nearest(i);
        if (nearest(i) > 0 && acc >= r) {
          pick = i;
          break;
        }
      }
    } else {
      pick = first(rng);
    }
    centers.col(c) = features.col(pick);
    nearest = nearest.cwiseMin((features.colwise() - centers.col(c)).colwise().squaredNorm().transpose());
  }

  // Lloyd iterations.
  std::vector<Index> assign(n, 0);
  for (int iter = 0; iter < 100; ++iter) {
    Vector dist(n);
    for (Index i = 0; i < n; ++i) {
      Index best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (Index c = 0; c < k; ++c) {
        const double d = (features.col(i) - centers.col(c)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      assign[i] = best;
      dist(i) = best_d;
    }
    Matrix next = Matrix::Zero(features.rows(), k);
    std::vector<Index> counts(k, 0);
    for (Index i = 0; i < n; ++i) {
      next.col(assign[i]) += features.col(i);
      ++counts[assign[i]];
    }
    for (Index c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        next.col(c) /= double(counts[c]);
        continue;
      }
      // Re-seed an empty cluster from the point farthest from its centroid.
      Index far = 0;
      dist.maxCoeff(&far);
      next.col(c) = features.col(far);
      dist(far) = -1;
    }
    const double shift = (next - centers).colwise().norm().maxCoeff();
    centers = std::move(next);
    if (shift < 1e-6) break;
  }
  return PrototypeBank(normalize_columns(centers));
}

Vector augment(const Vector& input, const AugmentationSpec& spec, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> scale_dist(spec.scale_min, spec.scale_max);
  std::uniform_real_distribution<double> keep_dist(0.0, 1.0);
  std::normal_distribution<double> noise_dist(0.0, 1.0);
  const double scale = scale_dist(rng);
  Vector out(input.size());
  for (Index i = 0; i < input.size(); ++i) {
    const bool keep = keep_dist(rng) >= spec.dropout_fraction;
    const double noise = noise_dist(rng);
    out(i) = (keep ? input(i) : 0.0) * scale + spec.noise_sigma * noise;
  }
  return out;
}

}  // namespace pmjdot
