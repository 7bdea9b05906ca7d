// Alignment and swapped-prediction losses with analytic gradients.
//
// All gradients treat transport plans and cluster assignments as constants.
// Features are D x A (one sample per column), plans are K x A.
#pragma once

#include "pmjdot/correspondence.hpp"
#include "pmjdot/types.hpp"

namespace pmjdot {

struct DomainAlignment {
  double loss = 0;
  Matrix d_features;    // D x A
  Matrix d_prototypes;  // D x K
  bool clamped = false;
};

/// sum_ij plan_ij (alpha (1 - u_i.x_j) + beta (-log y_j^(i))) for one domain.
DomainAlignment domain_alignment_loss(const Matrix& batch_plan, const PrototypeBank& protos, const Matrix& features,
                                      const CostParams& params);

struct AlignmentLoss {
  double loss = 0;
  Matrix d_sketch;
  Matrix d_photo;
  Matrix d_prototypes;
  bool clamped = false;
};

/// Sketch term plus photo term, each weighted by its extracted batch plan.
AlignmentLoss alignment_loss(const Matrix& sketch_plan, const Matrix& photo_plan, const PrototypeBank& protos,
                             const Matrix& sketch_features, const Matrix& photo_features, const CostParams& params);

struct PairAlignment {
  double loss = 0;
  Matrix d_sketch;  // D x Ns
  Matrix d_photo;   // D x Np
};

/// Prototype-free alignment: alpha * sum_ij w_ij (1 - xs_i.xp_j) with an
/// Ns x Np weight matrix.
PairAlignment feature_alignment_loss(const Matrix& weights, const Matrix& sketch_features,
                                     const Matrix& photo_features, double alpha);

/// Cluster assignments for a queue (D x B) by maximizing the trace score
/// U^T Q with entropy weight eps. Returns a K x B plan.
TransportPlan<double> swav_assignments(const Matrix& queue_features, const PrototypeBank& protos,
                                       const SinkhornConfig<double>& config);

struct SwappedLoss {
  double loss = 0;
  Matrix d_view1;       // D x A
  Matrix d_view2;       // D x A
  Matrix d_prototypes;  // D x K
  bool clamped = false;
};

/// Swapped prediction for one domain, averaged over the batch:
///   mean_j [ CE(y1_j, z2_j) + CE(y2_j, z1_j) ]
/// Assignment columns are rescaled to sum to one before the cross-entropy.
SwappedLoss swav_loss(const Matrix& view1, const Matrix& view2, const Matrix& assign1, const Matrix& assign2,
                      const PrototypeBank& protos, double temperature);

}  // namespace pmjdot
