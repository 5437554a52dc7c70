#pragma once

// Neuron activation states: sigmoid-squashed products of a neuron's raw
// output and the KL-to-uniform gradient with respect to that output.

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "nac/matrix.hpp"
#include "nac/netlab.hpp"

namespace nac {

// Raw outputs z and dKL/dz of one layer over a batch (B x N each).
struct RawLayerBatch {
  std::string layer_id;
  Matrix<float> z;
  Matrix<float> grad;

  // Shapes match and every entry is finite; otherwise throws naming the
  // offending (row, col).
  void validate() const;
};

// B x N states, every entry strictly inside (0, 1).
class NeuronStateMatrix {
 public:
  NeuronStateMatrix(Matrix<double> values, std::string layer_id, double alpha);

  const Matrix<double>& values() const noexcept { return values_; }
  const std::string& layer_id() const noexcept { return layer_id_; }
  double alpha() const noexcept { return alpha_; }
  std::size_t samples() const noexcept { return values_.rows(); }
  std::size_t neurons() const noexcept { return values_.cols(); }
  double operator()(std::size_t b, std::size_t i) const { return values_(b, i); }

 private:
  Matrix<double> values_;
  std::string layer_id_;
  double alpha_;
};

// 1 / (1 + exp(-alpha * x)), exponent clamped to +-500 and the result kept
// strictly inside (0, 1).
double squash(double x, double alpha);

NeuronStateMatrix neuron_states(const RawLayerBatch& batch, double alpha);

// Same states computed through the per-class input-times-gradient
// decomposition: sigma(alpha * sum_i (z . dg_i/dz) * (p_i - u_i)).
// per_class_grads[i] is the B x N matrix of d logit_i / d z.
NeuronStateMatrix states_via_decomposition(const Matrix<float>& z,
                                           std::span<const Matrix<double>> per_class_grads,
                                           const Matrix<double>& probs, double alpha,
                                           std::string layer_id);

// Which quantity gets squashed. `product` is the neuron activation state;
// the other two are the single-factor ablations.
enum class StateForm { activation, gradient, product };

NeuronStateMatrix form_states(const RawLayerBatch& batch, double alpha, StateForm form);

// Runs forward + KL backward for every row and collects the given taps.
struct LayerCapture {
  std::map<std::string, RawLayerBatch> layers;
  Matrix<float> logits;  // B x C
};

LayerCapture capture_layers(const DenseNet& net, const Matrix<float>& inputs,
                            std::span<const std::size_t> taps);

}  // namespace nac
