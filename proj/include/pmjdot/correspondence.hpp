// Prototype / memory-bank correspondence estimation.
#pragma once

#include "pmjdot/ot.hpp"
#include "pmjdot/types.hpp"

namespace pmjdot {

/// K trainable unit-norm prototypes stored as the columns of a D x K matrix.
/// Prototype k carries the implicit one-hot label e_k.
class PrototypeBank {
 public:
  PrototypeBank() = default;
  /// Throws unless K >= 2 and every column is unit-norm.
  explicit PrototypeBank(Matrix vectors);

  const Matrix& vectors() const { return vectors_; }
  Matrix& mutable_vectors() { return vectors_; }
  Index count() const { return vectors_.cols(); }
  Index dim() const { return vectors_.rows(); }

  void renormalize();

 private:
  Matrix vectors_;
};

/// Fixed-capacity FIFO of detached feature snapshots. Columns 0..A-1 hold
/// the most recent batch; pushing past capacity evicts the oldest batch.
class FifoBank {
 public:
  FifoBank() = default;
  FifoBank(Index dim, Index capacity, Index batch_size);

  /// `batch` is D x A with unit-norm columns.
  void push(const Matrix& batch);

  /// Occupied slots, newest first (D x size()).
  auto contents() const { return slots_.leftCols(fill_); }

  Index size() const { return fill_; }
  Index capacity() const { return slots_.cols(); }
  Index batch_size() const { return batch_size_; }
  Index dim() const { return slots_.rows(); }
  bool empty() const { return fill_ == 0; }

  // Checkpoint restore.
  void restore(const Matrix& contents);

 private:
  Matrix slots_;
  Index fill_ = 0;
  Index batch_size_ = 0;
};

using MemoryBank = FifoBank;
using FeatureQueue = FifoBank;

struct CostParams {
  double alpha = 1.0;
  double beta = 1.0;
  double temperature = 0.1;

  void validate() const;
};

/// Softmax over x^T u_k / temperature, one column per feature (K x N).
Matrix cluster_probabilities(const Matrix& features, const PrototypeBank& protos, double temperature);
Vector cluster_probabilities(const Vector& feature, const PrototypeBank& protos, double temperature);

/// Log of cluster_probabilities, computed stably (K x N).
Matrix cluster_log_probabilities(const Matrix& features, const PrototypeBank& protos, double temperature);

/// C(i, j) = alpha (1 - u_i.x_j) + beta (-log y_j^(i)), K x N.
Matrix joint_cost(const PrototypeBank& protos, const Matrix& features, const CostParams& params);

/// Plan between the prototypes and the bank's current occupancy, with
/// marginals 1/K and 1/E_cur. Requires at least one full batch in the bank.
TransportPlan<double> estimate_correspondence(const PrototypeBank& protos, const MemoryBank& bank,
                                              const CostParams& params, const SinkhornConfig<double>& config);

/// First `batch_size` columns of the plan rescaled to total mass 1.
Matrix extract_batch_plan(const Matrix& plan, Index batch_size);

}  // namespace pmjdot
