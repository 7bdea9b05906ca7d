#include "pmjdot/correspondence.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace pmjdot {

PrototypeBank::PrototypeBank(Matrix vectors) : vectors_(std::move(vectors)) {
  if (vectors_.cols() < 2) throw std::invalid_argument("PrototypeBank: need at least 2 prototypes");
  if (vectors_.rows() < 1) throw std::invalid_argument("PrototypeBank: empty embedding dimension");
  if (!vectors_.allFinite()) throw std::invalid_argument("PrototypeBank: non-finite entries");
  if (!columns_unit_norm(vectors_)) throw std::invalid_argument("PrototypeBank: prototypes must be unit-norm");
}

void PrototypeBank::renormalize() { vectors_ = normalize_columns(vectors_); }

FifoBank::FifoBank(Index dim, Index capacity, Index batch_size)
    : slots_(Matrix::Zero(dim, capacity)), batch_size_(batch_size) {
  if (dim < 1 || batch_size < 1) throw std::invalid_argument("FifoBank: dim and batch size must be positive");
  if (capacity < batch_size || capacity % batch_size != 0)
    throw std::invalid_argument("FifoBank: capacity must be a positive multiple of the batch size");
}

void FifoBank::push(const Matrix& batch) {
  if (batch.cols() != batch_size_ || batch.rows() != dim())
    throw std::invalid_argument("FifoBank::push: batch shape " + std::to_string(batch.rows()) + "x" +
                                std::to_string(batch.cols()) + " does not match " + std::to_string(dim()) + "x" +
                                std::to_string(batch_size_));
  if (!batch.allFinite() || !columns_unit_norm(batch))
    throw std::invalid_argument("FifoBank::push: features must be finite and unit-norm");
  const Index keep = std::min(fill_, capacity() - batch_size_);
  if (keep > 0) slots_.middleCols(batch_size_, keep) = slots_.leftCols(keep).eval();
  slots_.leftCols(batch_size_) = batch;
  fill_ = keep + batch_size_;
}

void FifoBank::restore(const Matrix& contents) {
  if (contents.rows() != dim() || contents.cols() > capacity() || contents.cols() % batch_size_ != 0)
    throw std::invalid_argument("FifoBank::restore: contents do not fit this bank");
  slots_.setZero();
  slots_.leftCols(contents.cols()) = contents;
  fill_ = contents.cols();
}

void CostParams::validate() const {
  if (!(alpha >= 0) || !(beta >= 0) || !(alpha + beta > 0))
    throw std::invalid_argument("CostParams: alpha, beta must be >= 0 with alpha + beta > 0");
  if (!(temperature > 0)) throw std::invalid_argument("CostParams: temperature must be positive");
}

Matrix cluster_log_probabilities(const Matrix& features, const PrototypeBank& protos, double temperature) {
  if (!(temperature > 0)) throw std::invalid_argument("cluster_probabilities: temperature must be positive");
  if (features.rows() != protos.dim())
    throw std::invalid_argument("cluster_probabilities: feature dimension does not match prototypes");
  Matrix logits = protos.vectors().transpose() * features / temperature;
  Eigen::RowVectorXd mx = logits.colwise().maxCoeff();
  logits.rowwise() -= mx;
  Eigen::RowVectorXd lse = logits.array().exp().colwise().sum().log();
  logits.rowwise() -= lse;
  return logits;
}

Matrix cluster_probabilities(const Matrix& features, const PrototypeBank& protos, double temperature) {
  return cluster_log_probabilities(features, protos, temperature).array().exp();
}

Vector cluster_probabilities(const Vector& feature, const PrototypeBank& protos, double temperature) {
  return cluster_probabilities(Matrix(feature), protos, temperature).col(0);
}

Matrix joint_cost(const PrototypeBank& protos, const Matrix& features, const CostParams& params) {
  params.validate();
  if (features.cols() == 0) throw std::invalid_argument("joint_cost: empty memory bank");
  Matrix cost = Matrix::Zero(protos.count(), features.cols());
  if (params.alpha > 0) cost += params.alpha * (1.0 - (protos.vectors().transpose() * features).array()).matrix();
  if (params.beta > 0) {
    const double log_floor = std::log(kLogEpsilon);
    Matrix log_y = cluster_log_probabilities(features, protos, params.temperature);
    cost -= params.beta * log_y.cwiseMax(log_floor);
  }
  return cost.cwiseMax(0.0);
}

TransportPlan<double> estimate_correspondence(const PrototypeBank& protos, const MemoryBank& bank,
                                              const CostParams& params, const SinkhornConfig<double>& config) {
  if (bank.size() < bank.batch_size() || bank.empty())
    throw std::invalid_argument("estimate_correspondence: memory bank holds less than one batch");
  return sinkhorn_min(joint_cost(protos, bank.contents(), params), config);
}

Matrix extract_batch_plan(const Matrix& plan, Index batch_size) {
  if (batch_size < 1 || batch_size > plan.cols())
    throw std::invalid_argument("extract_batch_plan: batch size " + std::to_string(batch_size) +
                                " exceeds plan width " + std::to_string(plan.cols()));
  Matrix block = plan.leftCols(batch_size);
  const double mass = block.sum();
  if (!(mass > 0) || !std::isfinite(mass))
    throw DegenerateMassError("extract_batch_plan: batch columns carry no transport mass");
  return block / mass;
}

}  // namespace pmjdot
