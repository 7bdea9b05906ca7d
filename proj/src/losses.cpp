#include "pmjdot/losses.hpp"

#include <cmath>

namespace pmjdot {

namespace {

void check_shapes(const Matrix& plan, const PrototypeBank& protos, const Matrix& features, const char* what) {
  if (features.rows() != protos.dim() || plan.rows() != protos.count() || plan.cols() != features.cols())
    throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

struct CrossEntropyGrad {
  double loss = 0;
  Matrix d_logits;  // K x A
  bool clamped = false;
};

// sum_ij w_ij * -max(log y_ij, floor) and its gradient w.r.t. the logits.
// Clamped entries contribute a constant.
CrossEntropyGrad weighted_cross_entropy(const Matrix& weights, const Matrix& log_y) {
  const double floor = std::log(kLogEpsilon);
  CrossEntropyGrad out;
  out.d_logits.resize(weights.rows(), weights.cols());
  for (Index j = 0; j < weights.cols(); ++j) {
    double active_mass = 0;
    for (Index k = 0; k < weights.rows(); ++k) {
      const double w = weights(k, j);
      if (log_y(k, j) < floor) {
        out.loss -= w * floor;
        if (w != 0) out.clamped = true;
        out.d_logits(k, j) = 0;
      } else {
        out.loss -= w * log_y(k, j);
        active_mass += w;
        out.d_logits(k, j) = -w;
      }
    }
    out.d_logits.col(j) += active_mass * log_y.col(j).array().exp().matrix();
  }
  return out;
}

}  // namespace

DomainAlignment domain_alignment_loss(const Matrix& batch_plan, const PrototypeBank& protos, const Matrix& features,
                                      const CostParams& params) {
  params.validate();
  check_shapes(batch_plan, protos, features, "alignment_loss");
  const Matrix& U = protos.vectors();
  DomainAlignment out;
  out.d_features = Matrix::Zero(features.rows(), features.cols());
  out.d_prototypes = Matrix::Zero(U.rows(), U.cols());

  if (params.alpha > 0) {
    Matrix dots = U.transpose() * features;
    out.loss += params.alpha * batch_plan.cwiseProduct((1.0 - dots.array()).matrix()).sum();
    out.d_features -= params.alpha * U * batch_plan;
    out.d_prototypes -= params.alpha * features * batch_plan.transpose();
  }
  if (params.beta > 0) {
    Matrix log_y = cluster_log_probabilities(features, protos, params.temperature);
    CrossEntropyGrad ce = weighted_cross_entropy(batch_plan, log_y);
    const double scale = params.beta / params.temperature;
    out.loss += params.beta * ce.loss;
    out.d_features += scale * U * ce.d_logits;
    out.d_prototypes += scale * features * ce.d_logits.transpose();
    out.clamped = ce.clamped;
  }
  return out;
}

AlignmentLoss alignment_loss(const Matrix& sketch_plan, const Matrix& photo_plan, const PrototypeBank& protos,
                             const Matrix& sketch_features, const Matrix& photo_features, const CostParams& params) {
  DomainAlignment s = domain_alignment_loss(sketch_plan, protos, sketch_features, params);
  DomainAlignment p = domain_alignment_loss(photo_plan, protos, photo_features, params);
  return {s.loss + p.loss, std::move(s.d_features), std::move(p.d_features), s.d_prototypes + p.d_prototypes,
          s.clamped || p.clamped};
}

PairAlignment feature_alignment_loss(const Matrix& weights, const Matrix& sketch_features,
                                     const Matrix& photo_features, double alpha) {
  if (weights.rows() != sketch_features.cols() || weights.cols() != photo_features.cols() ||
      sketch_features.rows() != photo_features.rows())
    throw std::invalid_argument("feature_alignment_loss: shape mismatch");
  if (!(alpha > 0)) throw std::invalid_argument("feature_alignment_loss: alpha must be positive");
  Matrix dots = sketch_features.transpose() * photo_features;
  PairAlignment out;
  out.loss = alpha * weights.cwiseProduct((1.0 - dots.array()).matrix()).sum();
  out.d_sketch = -alpha * photo_features * weights.transpose();
  out.d_photo = -alpha * sketch_features * weights;
  return out;
}

TransportPlan<double> swav_assignments(const Matrix& queue_features, const PrototypeBank& protos,
                                       const SinkhornConfig<double>& config) {
  if (queue_features.cols() == 0) throw std::invalid_argument("swav_assignments: empty queue");
  if (queue_features.rows() != protos.dim()) throw std::invalid_argument("swav_assignments: dimension mismatch");
  return sinkhorn_max(protos.vectors().transpose() * queue_features, config);
}

SwappedLoss swav_loss(const Matrix& view1, const Matrix& view2, const Matrix& assign1, const Matrix& assign2,
                      const PrototypeBank& protos, double temperature) {
  check_shapes(assign1, protos, view1, "swav_loss");
  check_shapes(assign2, protos, view2, "swav_loss");
  if (view1.cols() != view2.cols()) throw std::invalid_argument("swav_loss: view batch sizes differ");
  const Index batch = view1.cols();

  auto targets = [](const Matrix& z) {
    Eigen::RowVectorXd mass = z.colwise().sum();
    if (!(mass.array() > 0).all() || !mass.allFinite())
      throw DegenerateMassError("swav_loss: assignment column with no mass");
    return Matrix(z * mass.cwiseInverse().asDiagonal());
  };
  const Matrix q1 = targets(assign1);
  const Matrix q2 = targets(assign2);
  const Matrix& U = protos.vectors();

  // View 1 predicts the assignment of view 2 and vice versa.
  CrossEntropyGrad ce1 = weighted_cross_entropy(q2, cluster_log_probabilities(view1, protos, temperature));
  CrossEntropyGrad ce2 = weighted_cross_entropy(q1, cluster_log_probabilities(view2, protos, temperature));

  const double scale = 1.0 / (temperature * double(batch));
  SwappedLoss out;
  out.loss = (ce1.loss + ce2.loss) / double(batch);
  out.d_view1 = scale * U * ce1.d_logits;
  out.d_view2 = scale * U * ce2.d_logits;
  out.d_prototypes = scale * (view1 * ce1.d_logits.transpose() + view2 * ce2.d_logits.transpose());
  out.clamped = ce1.clamped || ce2.clamped;
  return out;
}

}  // namespace pmjdot
