// Feed-forward encoder: tanh hidden layers, linear output, L2 normalization.
#pragma once

#include "pmjdot/types.hpp"

#include <cstdint>
#include <vector>

namespace pmjdot {

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out
};

/// Per-layer gradients, same shapes as the encoder's layers.
struct EncoderGradient {
  std::vector<DenseLayer> layers;

  static EncoderGradient zeros_like(const std::vector<DenseLayer>& layers);
  EncoderGradient& operator+=(const EncoderGradient& other);
};

class Encoder {
 public:
  /// Intermediate values kept for the backward pass. Inputs and features
  /// are column-major: one sample per column.
  struct Trace {
    std::vector<Matrix> activations;  // activations[0] = input
    Matrix pre_norm;                  // D x N, last linear output
    Vector norms;                     // guarded column norms of pre_norm
    Matrix output;                    // D x N, unit columns
  };

  Encoder() = default;
  /// `widths` = {input, hidden..., D}; Glorot-uniform weights, zero biases.
  Encoder(std::vector<int> widths, std::uint64_t seed);

  Matrix encode(const Matrix& inputs) const { return forward(inputs).output; }
  Vector encode(const Vector& input) const;

  Trace forward(const Matrix& inputs) const;
  /// Gradient of a loss with respect to all parameters given dL/d(output).
  EncoderGradient backward(const Trace& trace, const Matrix& d_output) const;

  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<int>& widths() const { return widths_; }
  int input_dim() const { return widths_.front(); }
  int output_dim() const { return widths_.back(); }
  Index parameter_count() const;

 private:
  std::vector<int> widths_;
  std::vector<DenseLayer> layers_;
};

}  // namespace pmjdot
