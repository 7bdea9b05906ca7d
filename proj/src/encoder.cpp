#include "pmjdot/encoder.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

namespace pmjdot {

EncoderGradient EncoderGradient::zeros_like(const std::vector<DenseLayer>& layers) {
  EncoderGradient g;
  for (const auto& l : layers)
    g.layers.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()), Vector::Zero(l.bias.size())});
  return g;
}

EncoderGradient& EncoderGradient::operator+=(const EncoderGradient& other) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].weight += other.layers[i].weight;
    layers[i].bias += other.layers[i].bias;
  }
  return *this;
}

Encoder::Encoder(std::vector<int> widths, std::uint64_t seed) : widths_(std::move(widths)) {
  if (widths_.size() < 2) throw std::invalid_argument("Encoder: need at least input and output widths");
  for (int w : widths_)
    if (w < 1) throw std::invalid_argument("Encoder: layer widths must be positive");
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i + 1 < widths_.size(); ++i) {
    const int fan_in = widths_[i], fan_out = widths_[i + 1];
    const double limit = std::sqrt(6.0 / double(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    DenseLayer layer{Matrix(fan_out, fan_in), Vector::Zero(fan_out)};
    // Fill in a fixed row-major order so the draw sequence is layout independent.
    for (int r = 0; r < fan_out; ++r)
      for (int c = 0; c < fan_in; ++c) layer.weight(r, c) = dist(rng);
    layers_.push_back(std::move(layer));
  }
}

Index Encoder::parameter_count() const {
  Index n = 0;
  for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
  return n;
}

Vector Encoder::encode(const Vector& input) const { return encode(Matrix(input)).col(0); }

Encoder::Trace Encoder::forward(const Matrix& inputs) const {
  if (inputs.rows() != input_dim())
    throw std::invalid_argument("Encoder: input dimension " + std::to_string(inputs.rows()) + " != " +
                                std::to_string(input_dim()));
  Trace t;
  t.activations.reserve(layers_.size());
  t.activations.push_back(inputs);
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
    Matrix z = (layers_[i].weight * t.activations.back()).colwise() + layers_[i].bias;
    t.activations.push_back(z.array().tanh().matrix());
  }
  t.pre_norm = (layers_.back().weight * t.activations.back()).colwise() + layers_.back().bias;
  t.norms = t.pre_norm.colwise().norm().transpose().cwiseMax(kNormEpsilon);
  t.output = t.pre_norm * t.norms.cwiseInverse().asDiagonal();
  return t;
}

EncoderGradient Encoder::backward(const Trace& trace, const Matrix& d_output) const {
  const Index n = trace.output.cols();
  if (d_output.rows() != trace.output.rows() || d_output.cols() != n)
    throw std::invalid_argument("Encoder::backward: gradient shape mismatch");

  // d/dh of h/|h| applied to g is (g - x (x.g)) / |h|.
  Matrix delta(d_output.rows(), n);
  for (Index j = 0; j < n; ++j) {
    const auto x = trace.output.col(j);
    const auto g = d_output.col(j);
    const double raw_norm = trace.pre_norm.col(j).norm();
    if (raw_norm < kNormEpsilon)
      delta.col(j) = g / kNormEpsilon;
    else
      delta.col(j) = (g - x * x.dot(g)) / trace.norms(j);
  }

  EncoderGradient grad;
  grad.layers.resize(layers_.size());
  for (std::size_t li = layers_.size(); li-- > 0;) {
    const Matrix& input = trace.activations[li];
    grad.layers[li].weight = delta * input.transpose();
    grad.layers[li].bias = delta.rowwise().sum();
    if (li == 0) break;
    Matrix upstream = layers_[li].weight.transpose() * delta;
    delta = upstream.cwiseProduct((1.0 - input.array().square()).matrix());
  }
  return grad;
}

}  // namespace pmjdot
