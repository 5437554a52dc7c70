#include "nac/state.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace nac {
namespace {

constexpr double kExponentClamp = 500.0;

std::string cell(std::size_t r, std::size_t c) {
  return "(" + std::to_string(r) + ", " + std::to_string(c) + ")";
}

void check_alpha(double alpha) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) {
    throw std::invalid_argument("alpha must be a positive finite number");
  }
}

}  // namespace

void RawLayerBatch::validate() const {
  if (z.rows() != grad.rows() || z.cols() != grad.cols()) {
    throw std::invalid_argument("layer '" + layer_id + "': z is " + std::to_string(z.rows()) +
                                "x" + std::to_string(z.cols()) + " but grad is " +
                                std::to_string(grad.rows()) + "x" + std::to_string(grad.cols()));
  }
  for (std::size_t r = 0; r < z.rows(); ++r) {
    for (std::size_t c = 0; c < z.cols(); ++c) {
      if (!std::isfinite(z(r, c))) {
        throw std::invalid_argument("layer '" + layer_id + "': non-finite z at " + cell(r, c));
      }
      if (!std::isfinite(grad(r, c))) {
        throw std::invalid_argument("layer '" + layer_id + "': non-finite gradient at " +
                                    cell(r, c));
      }
    }
  }
}

NeuronStateMatrix::NeuronStateMatrix(Matrix<double> values, std::string layer_id, double alpha)
    : values_(std::move(values)), layer_id_(std::move(layer_id)), alpha_(alpha) {
  check_alpha(alpha_);
  for (std::size_t r = 0; r < values_.rows(); ++r) {
    for (std::size_t c = 0; c < values_.cols(); ++c) {
      const double v = values_(r, c);
      if (!(v > 0.0 && v < 1.0)) {
        throw std::invalid_argument("state " + std::to_string(v) + " at " + cell(r, c) +
                                    " outside the open interval (0, 1)");
      }
    }
  }
}

double squash(double x, double alpha) {
  const double e = std::clamp(-alpha * x, -kExponentClamp, kExponentClamp);
  double s = 1.0 / (1.0 + std::exp(e));
  if (s >= 1.0) s = std::nextafter(1.0, 0.0);
  if (s <= 0.0) s = std::nextafter(0.0, 1.0);
  return s;
}

NeuronStateMatrix neuron_states(const RawLayerBatch& batch, double alpha) {
  return form_states(batch, alpha, StateForm::product);
}

NeuronStateMatrix form_states(const RawLayerBatch& batch, double alpha, StateForm form) {
  check_alpha(alpha);
  batch.validate();
  Matrix<double> out(batch.z.rows(), batch.z.cols());
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < out.cols(); ++c) {
      const double z = batch.z(r, c);
      const double g = batch.grad(r, c);
      double x = 0.0;
      switch (form) {
        case StateForm::activation: x = z; break;
        case StateForm::gradient: x = g; break;
        case StateForm::product: x = z * g; break;
      }
      out(r, c) = squash(x, alpha);
    }
  }
  return NeuronStateMatrix(std::move(out), batch.layer_id, alpha);
}

NeuronStateMatrix states_via_decomposition(const Matrix<float>& z,
                                           std::span<const Matrix<double>> per_class_grads,
                                           const Matrix<double>& probs, double alpha,
                                           std::string layer_id) {
  check_alpha(alpha);
  const std::size_t classes = per_class_grads.size();
  if (classes < 2) {
    throw std::invalid_argument("need at least 2 classes: KL to uniform is identically 0 for C = 1");
  }
  if (probs.rows() != z.rows() || probs.cols() != classes) {
    throw std::invalid_argument("probability matrix must be B x C");
  }
  for (const auto& g : per_class_grads) {
    if (g.rows() != z.rows() || g.cols() != z.cols()) {
      throw std::invalid_argument("per-class gradient shape does not match z");
    }
  }
  const double u = 1.0 / static_cast<double>(classes);
  Matrix<double> out(z.rows(), z.cols());
  for (std::size_t b = 0; b < z.rows(); ++b) {
    double psum = 0.0;
    for (std::size_t i = 0; i < classes; ++i) psum += probs(b, i);
    if (std::abs(psum - 1.0) > 1e-6) {
      throw std::invalid_argument("probabilities of row " + std::to_string(b) +
                                  " do not sum to 1");
    }
    for (std::size_t n = 0; n < z.cols(); ++n) {
      double acc = 0.0;
      for (std::size_t i = 0; i < classes; ++i) {
        acc += static_cast<double>(z(b, n)) * per_class_grads[i](b, n) * (probs(b, i) - u);
      }
      out(b, n) = squash(acc, alpha);
    }
  }
  return NeuronStateMatrix(std::move(out), std::move(layer_id), alpha);
}

LayerCapture capture_layers(const DenseNet& net, const Matrix<float>& inputs,
                            std::span<const std::size_t> taps) {
  for (auto tap : taps) {
    if (!std::binary_search(net.taps().begin(), net.taps().end(), tap)) {
      throw std::invalid_argument("layer index " + std::to_string(tap) + " is not a tap point");
    }
  }
  LayerCapture cap;
  cap.logits = Matrix<float>(inputs.rows(), net.class_count());
  for (auto tap : taps) {
    auto& batch = cap.layers[DenseNet::tap_name(tap)];
    batch.layer_id = DenseNet::tap_name(tap);
    batch.z = Matrix<float>(inputs.rows(), net.tap_width(tap));
    batch.grad = Matrix<float>(inputs.rows(), net.tap_width(tap));
  }
  for (std::size_t r = 0; r < inputs.rows(); ++r) {
    auto kl = backward_kl(net, inputs.row(r));
    for (std::size_t c = 0; c < net.class_count(); ++c) {
      cap.logits(r, c) = static_cast<float>(kl.bundle.logits[c]);
    }
    for (auto tap : taps) {
      auto& batch = cap.layers[DenseNet::tap_name(tap)];
      const auto& z = kl.activations.at(tap);
      const auto& g = kl.gradients.at(tap);
      std::copy(z.begin(), z.end(), batch.z.row(r).begin());
      std::copy(g.begin(), g.end(), batch.grad.row(r).begin());
    }
  }
  return cap;
}

}  // namespace nac
