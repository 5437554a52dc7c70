#pragma once

// Small dense feed-forward classifier: forward inference, cross-entropy
// training, and backpropagation of the KL divergence between the uniform
// vector and the softmax output to any tapped layer.
//
// Weights and exported activations are 32-bit floats. Every reduction
// (dot products, softmax, KL) accumulates in double.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nac/matrix.hpp"

namespace nac {

class CoverageModel;

enum class Nonlinearity : std::uint8_t { identity = 0, relu = 1 };

struct DenseLayer {
  std::size_t inputs = 0;
  std::size_t outputs = 0;
  std::vector<float> weights;  // outputs x inputs, row-major
  std::vector<float> biases;   // outputs
  Nonlinearity nonlinearity = Nonlinearity::relu;

  bool operator==(const DenseLayer&) const = default;
};

class DenseNet {
 public:
  // Validates shapes, the identity logit layer and tap indices.
  DenseNet(std::vector<DenseLayer> layers, std::vector<std::size_t> taps);

  // ReLU hidden layers, identity logit layer, He-normal weights, zero biases.
  // widths = {input, hidden..., classes}.
  static DenseNet random(std::span<const std::size_t> widths, std::vector<std::size_t> taps,
                         std::uint64_t seed, double bias_scale = 0.0);

  std::size_t input_width() const { return layers_.front().inputs; }
  std::size_t class_count() const { return layers_.back().outputs; }
  const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
  std::vector<DenseLayer>& mutable_layers() noexcept { return layers_; }
  const std::vector<std::size_t>& taps() const noexcept { return taps_; }
  std::size_t tap_width(std::size_t layer) const { return layers_.at(layer).outputs; }

  // "layer<k>" with k = index + 1.
  static std::string tap_name(std::size_t layer);
  // Inverse of tap_name; throws on names that are not taps of this net.
  std::size_t tap_index(const std::string& name) const;

  bool operator==(const DenseNet&) const = default;

 private:
  std::vector<DenseLayer> layers_;
  std::vector<std::size_t> taps_;
};

struct LogitBundle {
  std::vector<double> logits;
  std::vector<double> probs;    // softmax(logits), max-subtracted
  std::vector<double> uniform;  // all 1/C

  static LogitBundle from_logits(std::span<const double> logits);
  std::size_t class_count() const { return logits.size(); }
};

struct ForwardResult {
  std::map<std::size_t, std::vector<float>> activations;  // tap -> z
  LogitBundle bundle;
};

ForwardResult forward(const DenseNet& net, std::span<const float> x);

// D_KL(u || p). Probabilities below 1e-12 are floored inside the log; when
// that happens *clamped (if given) is set.
double kl_uniform(const LogitBundle& bundle, bool* clamped = nullptr);

struct KlGradients {
  std::map<std::size_t, std::vector<float>> activations;  // tap -> z
  std::map<std::size_t, std::vector<float>> gradients;    // tap -> dKL/dz
  LogitBundle bundle;
  std::vector<double> logit_gradient;  // p - u
};

// One forward and one backward pass.
KlGradients backward_kl(const DenseNet& net, std::span<const float> x);

// Rows i = 0..C-1 hold d logit_i / d z at the given tap (C x width).
Matrix<double> logit_jacobian(const DenseNet& net, std::span<const float> x, std::size_t tap);

std::vector<std::uint32_t> predict(const DenseNet& net, const Matrix<float>& inputs);
double accuracy(const DenseNet& net, const Matrix<float>& inputs,
                std::span<const std::uint32_t> labels);

struct LabeledSet {
  Matrix<float> inputs;
  std::vector<std::uint32_t> labels;

  std::size_t size() const { return inputs.rows(); }
};

enum class EntropyMode : std::uint8_t { none, maximize, minimize };

struct EntropyRegularizer {
  EntropyMode mode = EntropyMode::none;
  double coefficient = 0.0;
  std::size_t refresh_interval = 100;  // steps between histogram refits
  std::optional<std::size_t> tap;      // defaults to the deepest tap
};

struct TrainConfig {
  double learning_rate = 0.05;
  std::size_t steps = 2000;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  EntropyRegularizer entropy;
  std::size_t checkpoint_interval = 0;  // 0 disables the checkpoint callback

  void validate() const;
};

struct TrainResult {
  DenseNet net;
  std::vector<double> loss_trace;     // total loss per step
  std::vector<double> entropy_trace;  // batch-mean NAC entropy per step (regularized runs)
};

using CheckpointCallback = std::function<void(std::size_t step, const DenseNet&)>;

// Minibatch SGD on mean cross-entropy. With an entropy regularizer the loss
// adds -/+ coefficient * H(z), where the histogram probabilities are
// constants within a step, so parameter updates come from the
// cross-entropy term. The histogram (over sigmoid-squashed raw outputs) is
// refit on the full training set every refresh_interval steps; `coverage`
// seeds the first histogram and supplies its configuration.
TrainResult train(DenseNet net, const LabeledSet& data, const TrainConfig& cfg,
                  const CoverageModel* coverage = nullptr,
                  const CheckpointCallback& on_checkpoint = {});

// Binary checkpoint: "NACW", u32 version, u32 layer count, then per layer
// u32 inputs, u32 outputs, f32 weights, f32 biases, u8 nonlinearity tag,
// then u32 tap count and u32 tap indices.
std::vector<std::uint8_t> encode_checkpoint(const DenseNet& net);
DenseNet decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const DenseNet& net, const std::filesystem::path& path);
DenseNet load_checkpoint(const std::filesystem::path& path);

}  // namespace nac
