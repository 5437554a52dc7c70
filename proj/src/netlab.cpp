#include "nac/netlab.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "nac/binary_io.hpp"
#include "nac/coverage.hpp"
#include "nac/error.hpp"
#include "nac/state.hpp"

namespace nac {
namespace {

constexpr double kProbFloor = 1e-12;

// Per-layer pre- and post-nonlinearity values of one sample.
struct Trace {
  std::vector<std::vector<double>> pre;
  std::vector<std::vector<double>> post;
};

void check_input(const DenseNet& net, std::span<const float> x) {
  if (x.size() != net.input_width()) {
    throw std::invalid_argument("input has " + std::to_string(x.size()) +
                                " features, network expects " +
                                std::to_string(net.input_width()));
  }
}

Trace run(const DenseNet& net, std::span<const float> x) {
  check_input(net, x);
  const auto& layers = net.layers();
  Trace t;
  t.pre.resize(layers.size());
  t.post.resize(layers.size());
  std::vector<double> in(x.begin(), x.end());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    auto& pre = t.pre[l];
    pre.resize(layer.outputs);
    for (std::size_t o = 0; o < layer.outputs; ++o) {
      double acc = layer.biases[o];
      const float* w = layer.weights.data() + o * layer.inputs;
      for (std::size_t i = 0; i < layer.inputs; ++i) acc += static_cast<double>(w[i]) * in[i];
      pre[o] = acc;
    }
    auto& post = t.post[l];
    post = pre;
    if (layer.nonlinearity == Nonlinearity::relu) {
      for (auto& v : post) v = std::max(v, 0.0);
    }
    in = post;
  }
  return t;
}

// Given dL/d(post of layer `from`), walks down to layer 0. visit(l, grad_post,
// grad_pre) is called for every layer l <= from.
template <typename Visit>
void backprop(const DenseNet& net, const Trace& t, std::vector<double> grad_post,
              std::size_t from, Visit&& visit) {
  const auto& layers = net.layers();
  for (std::size_t l = from + 1; l-- > 0;) {
    const auto& layer = layers[l];
    std::vector<double> grad_pre = grad_post;
    if (layer.nonlinearity == Nonlinearity::relu) {
      for (std::size_t o = 0; o < layer.outputs; ++o) {
        if (t.pre[l][o] <= 0.0) grad_pre[o] = 0.0;
      }
    }
    visit(l, grad_post, grad_pre);
    if (l == 0) break;
    std::vector<double> below(layer.inputs, 0.0);
    for (std::size_t o = 0; o < layer.outputs; ++o) {
      if (grad_pre[o] == 0.0) continue;
      const float* w = layer.weights.data() + o * layer.inputs;
      for (std::size_t i = 0; i < layer.inputs; ++i) below[i] += static_cast<double>(w[i]) * grad_pre[o];
    }
    grad_post = std::move(below);
  }
}

std::vector<float> to_float(const std::vector<double>& v) {
  return {v.begin(), v.end()};
}

}  // namespace

DenseNet::DenseNet(std::vector<DenseLayer> layers, std::vector<std::size_t> taps)
    : layers_(std::move(layers)), taps_(std::move(taps)) {
  if (layers_.empty()) throw std::invalid_argument("network needs at least one layer");
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    if (layer.inputs == 0 || layer.outputs == 0) {
      throw std::invalid_argument("layer " + std::to_string(l) + " has a zero dimension");
    }
    if (layer.weights.size() != layer.inputs * layer.outputs ||
        layer.biases.size() != layer.outputs) {
      throw std::invalid_argument("layer " + std::to_string(l) +
                                  " parameter sizes do not match its dimensions");
    }
    if (l > 0 && layers_[l - 1].outputs != layer.inputs) {
      throw std::invalid_argument("layer " + std::to_string(l) + " expects " +
                                  std::to_string(layer.inputs) + " inputs but layer " +
                                  std::to_string(l - 1) + " produces " +
                                  std::to_string(layers_[l - 1].outputs));
    }
  }
  if (layers_.back().nonlinearity != Nonlinearity::identity) {
    throw std::invalid_argument("final (logit) layer must use the identity nonlinearity");
  }
  std::sort(taps_.begin(), taps_.end());
  taps_.erase(std::unique(taps_.begin(), taps_.end()), taps_.end());
  for (auto tap : taps_) {
    if (tap + 1 >= layers_.size()) {
      throw std::invalid_argument("tap " + std::to_string(tap) +
                                  " must name a non-final layer (network has " +
                                  std::to_string(layers_.size()) + " layers)");
    }
  }
}

DenseNet DenseNet::random(std::span<const std::size_t> widths, std::vector<std::size_t> taps,
                          std::uint64_t seed, double bias_scale) {
  if (widths.size() < 2) throw std::invalid_argument("need at least input and output widths");
  std::mt19937_64 rng(seed);
  std::vector<DenseLayer> layers;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    DenseLayer layer;
    layer.inputs = widths[l];
    layer.outputs = widths[l + 1];
    layer.nonlinearity = l + 2 == widths.size() ? Nonlinearity::identity : Nonlinearity::relu;
    std::normal_distribution<double> w(0.0, std::sqrt(2.0 / static_cast<double>(layer.inputs)));
    layer.weights.resize(layer.inputs * layer.outputs);
    for (auto& v : layer.weights) v = static_cast<float>(w(rng));
    layer.biases.assign(layer.outputs, 0.0f);
    if (bias_scale > 0.0) {
      std::normal_distribution<double> b(0.0, bias_scale);
      for (auto& v : layer.biases) v = static_cast<float>(b(rng));
    }
    layers.push_back(std::move(layer));
  }
  return DenseNet(std::move(layers), std::move(taps));
}

std::string DenseNet::tap_name(std::size_t layer) { return "layer" + std::to_string(layer + 1); }

std::size_t DenseNet::tap_index(const std::string& name) const {
  for (auto tap : taps_) {
    if (tap_name(tap) == name) return tap;
  }
  std::string known;
  for (auto tap : taps_) known += (known.empty() ? "" : ", ") + tap_name(tap);
  throw std::invalid_argument("unknown layer '" + name + "' (taps: " + known + ")");
}

LogitBundle LogitBundle::from_logits(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("empty logit vector");
  LogitBundle b;
  b.logits.assign(logits.begin(), logits.end());
  const double mx = *std::max_element(logits.begin(), logits.end());
  b.probs.resize(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    b.probs[i] = std::exp(logits[i] - mx);
    sum += b.probs[i];
  }
  for (auto& p : b.probs) p /= sum;
  b.uniform.assign(logits.size(), 1.0 / static_cast<double>(logits.size()));
  return b;
}

ForwardResult forward(const DenseNet& net, std::span<const float> x) {
  auto t = run(net, x);
  ForwardResult r;
  for (auto tap : net.taps()) r.activations[tap] = to_float(t.post[tap]);
  r.bundle = LogitBundle::from_logits(t.post.back());
  return r;
}

double kl_uniform(const LogitBundle& bundle, bool* clamped) {
  double kl = 0.0;
  bool floored = false;
  for (std::size_t i = 0; i < bundle.probs.size(); ++i) {
    double p = bundle.probs[i];
    if (p < kProbFloor) {
      p = kProbFloor;
      floored = true;
    }
    kl += bundle.uniform[i] * std::log(bundle.uniform[i] / p);
  }
  if (clamped) *clamped = floored;
  return std::max(kl, 0.0);
}

KlGradients backward_kl(const DenseNet& net, std::span<const float> x) {
  auto t = run(net, x);
  KlGradients r;
  r.bundle = LogitBundle::from_logits(t.post.back());
  r.logit_gradient.resize(r.bundle.class_count());
  for (std::size_t i = 0; i < r.logit_gradient.size(); ++i) {
    r.logit_gradient[i] = r.bundle.probs[i] - r.bundle.uniform[i];
  }
  for (auto tap : net.taps()) r.activations[tap] = to_float(t.post[tap]);
  if (net.taps().empty()) return r;
  // Logit layer is identity, so dKL/d(pre) = dKL/d(post) = p - u.
  const std::size_t last = net.layers().size() - 1;
  std::vector<double> grad_below(net.layers()[last].inputs, 0.0);
  const auto& logit_layer = net.layers()[last];
  for (std::size_t o = 0; o < logit_layer.outputs; ++o) {
    const float* w = logit_layer.weights.data() + o * logit_layer.inputs;
    for (std::size_t i = 0; i < logit_layer.inputs; ++i) {
      grad_below[i] += static_cast<double>(w[i]) * r.logit_gradient[o];
    }
  }
  backprop(net, t, std::move(grad_below), last - 1,
           [&](std::size_t l, const std::vector<double>& grad_post, const std::vector<double>&) {
             if (std::binary_search(net.taps().begin(), net.taps().end(), l)) {
               r.gradients[l] = to_float(grad_post);
             }
           });
  return r;
}

Matrix<double> logit_jacobian(const DenseNet& net, std::span<const float> x, std::size_t tap) {
  if (tap + 1 >= net.layers().size()) {
    throw std::invalid_argument("jacobian tap must be a non-final layer");
  }
  auto t = run(net, x);
  const std::size_t classes = net.class_count();
  Matrix<double> jac(classes, net.tap_width(tap));
  const std::size_t last = net.layers().size() - 1;
  const auto& logit_layer = net.layers()[last];
  for (std::size_t c = 0; c < classes; ++c) {
    const float* w = logit_layer.weights.data() + c * logit_layer.inputs;
    std::vector<double> grad(w, w + logit_layer.inputs);
    if (tap + 1 == last) {
      std::copy(grad.begin(), grad.end(), jac.row(c).begin());
      continue;
    }
    backprop(net, t, std::move(grad), last - 1,
             [&](std::size_t l, const std::vector<double>& grad_post, const std::vector<double>&) {
               if (l == tap) std::copy(grad_post.begin(), grad_post.end(), jac.row(c).begin());
             });
  }
  return jac;
}

std::vector<std::uint32_t> predict(const DenseNet& net, const Matrix<float>& inputs) {
  std::vector<std::uint32_t> out(inputs.rows());
  for (std::size_t r = 0; r < inputs.rows(); ++r) {
    auto t = run(net, inputs.row(r));
    const auto& logits = t.post.back();
    out[r] = static_cast<std::uint32_t>(
        std::distance(logits.begin(), std::max_element(logits.begin(), logits.end())));
  }
  return out;
}

double accuracy(const DenseNet& net, const Matrix<float>& inputs,
                std::span<const std::uint32_t> labels) {
  if (labels.size() != inputs.rows()) throw std::invalid_argument("label count mismatch");
  if (labels.empty()) return 0.0;
  auto pred = predict(net, inputs);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("learning rate must be positive");
  }
  if (batch_size == 0) throw std::invalid_argument("batch size must be at least 1");
  if (!(entropy.coefficient >= 0.0)) {
    throw std::invalid_argument("entropy coefficient must be non-negative");
  }
  if (entropy.mode != EntropyMode::none && entropy.refresh_interval == 0) {
    throw std::invalid_argument("entropy refresh interval must be positive");
  }
}

namespace {

CoverageModel refit_entropy_histogram(const DenseNet& net, const LabeledSet& data,
                                      std::size_t tap, const CoverageConfig& cfg, double alpha) {
  CoverageModel model(DenseNet::tap_name(tap), net.tap_width(tap), cfg, alpha,
                      StateSource::raw_activation);
  Matrix<double> states(data.size(), net.tap_width(tap));
  for (std::size_t r = 0; r < data.size(); ++r) {
    auto t = run(net, data.inputs.row(r));
    const auto& z = t.post[tap];
    for (std::size_t i = 0; i < z.size(); ++i) {
      states(r, i) = squash(static_cast<float>(z[i]), alpha);
    }
  }
  if (data.size() > 0) model.update(NeuronStateMatrix(std::move(states), model.layer_id(), alpha));
  model.freeze();
  return model;
}

}  // namespace

TrainResult train(DenseNet net, const LabeledSet& data, const TrainConfig& cfg,
                  const CoverageModel* coverage, const CheckpointCallback& on_checkpoint) {
  cfg.validate();
  const std::size_t classes = net.class_count();
  for (auto y : data.labels) {
    if (y >= classes) {
      throw std::invalid_argument("label " + std::to_string(y) + " outside [0, " +
                                  std::to_string(classes) + ")");
    }
  }
  if (data.labels.size() != data.size()) throw std::invalid_argument("label count mismatch");
  if (data.size() == 0 && cfg.steps > 0) throw std::invalid_argument("empty training set");
  if (data.size() > 0 && data.inputs.cols() != net.input_width()) {
    throw std::invalid_argument("training inputs do not match network input width");
  }

  const bool regularized =
      cfg.entropy.mode != EntropyMode::none && cfg.entropy.coefficient > 0.0;
  std::size_t entropy_tap = 0;
  CoverageConfig hist_cfg;
  double hist_alpha = 1.0;
  std::optional<CoverageModel> hist;
  if (regularized) {
    if (net.taps().empty()) throw std::invalid_argument("entropy regularizer needs a tap point");
    entropy_tap = cfg.entropy.tap.value_or(net.taps().back());
    if (entropy_tap + 1 >= net.layers().size()) {
      throw std::invalid_argument("entropy tap must be a non-final layer");
    }
    if (coverage) {
      if (coverage->source() != StateSource::raw_activation) {
        throw std::invalid_argument("entropy regularizer needs a coverage model over raw outputs");
      }
      if (coverage->neurons() != net.tap_width(entropy_tap)) {
        throw std::invalid_argument("coverage model width does not match the entropy tap");
      }
      hist_cfg = coverage->config();
      hist_alpha = coverage->alpha();
      hist = *coverage;
      hist->freeze();
    } else {
      hist = refit_entropy_histogram(net, data, entropy_tap, hist_cfg, hist_alpha);
    }
  }
  const double entropy_sign = cfg.entropy.mode == EntropyMode::maximize ? -1.0 : 1.0;

  TrainResult result{std::move(net), {}, {}};
  DenseNet& model = result.net;
  const auto& layers = model.layers();
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() == 0 ? 0 : data.size() - 1);

  std::vector<std::vector<double>> grad_w(layers.size()), grad_b(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    grad_w[l].assign(layers[l].weights.size(), 0.0);
    grad_b[l].assign(layers[l].biases.size(), 0.0);
  }

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    if (regularized && step > 1 && (step - 1) % cfg.entropy.refresh_interval == 0) {
      hist = refit_entropy_histogram(model, data, entropy_tap, hist_cfg, hist_alpha);
    }
    for (auto& g : grad_w) std::fill(g.begin(), g.end(), 0.0);
    for (auto& g : grad_b) std::fill(g.begin(), g.end(), 0.0);
    double ce = 0.0;
    double entropy = 0.0;
    const double scale = 1.0 / static_cast<double>(cfg.batch_size);

    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const std::size_t idx = pick(rng);
      auto x = data.inputs.row(idx);
      auto t = run(model, x);
      auto bundle = LogitBundle::from_logits(t.post.back());
      const auto y = data.labels[idx];
      ce -= std::log(std::max(bundle.probs[y], kProbFloor));

      if (regularized) {
        const auto& z = t.post[entropy_tap];
        double h = 0.0;
        for (std::size_t i = 0; i < z.size(); ++i) {
          auto k = hist->bin_of(squash(static_cast<float>(z[i]), hist_alpha));
          double p = static_cast<double>(hist->count(i, k)) /
                     static_cast<double>(std::max<std::uint64_t>(hist->total(), 1));
          p = std::max(p, kProbFloor);
          h -= p * std::log(p);
        }
        entropy += h;
      }

      std::vector<double> grad = bundle.probs;
      grad[y] -= 1.0;
      for (auto& g : grad) g *= scale;
      backprop(model, t, std::move(grad), layers.size() - 1,
               [&](std::size_t l, const std::vector<double>&, const std::vector<double>& grad_pre) {
                 const auto& layer = layers[l];
                 std::span<const double> in;
                 std::vector<double> xin;
                 if (l == 0) {
                   xin.assign(x.begin(), x.end());
                   in = xin;
                 } else {
                   in = t.post[l - 1];
                 }
                 for (std::size_t o = 0; o < layer.outputs; ++o) {
                   const double g = grad_pre[o];
                   if (g == 0.0) continue;
                   grad_b[l][o] += g;
                   double* gw = grad_w[l].data() + o * layer.inputs;
                   for (std::size_t i = 0; i < layer.inputs; ++i) gw[i] += g * in[i];
                 }
               });
    }

    ce *= scale;
    entropy *= scale;
    const double loss = ce + (regularized ? entropy_sign * cfg.entropy.coefficient * entropy : 0.0);
    if (!std::isfinite(loss)) {
      throw TrainingDiverged("non-finite loss at step " + std::to_string(step), step);
    }
    result.loss_trace.push_back(loss);
    if (regularized) result.entropy_trace.push_back(entropy);

    auto& mut = model.mutable_layers();
    for (std::size_t l = 0; l < mut.size(); ++l) {
      for (std::size_t k = 0; k < mut[l].weights.size(); ++k) {
        mut[l].weights[k] -= static_cast<float>(cfg.learning_rate * grad_w[l][k]);
      }
      for (std::size_t k = 0; k < mut[l].biases.size(); ++k) {
        mut[l].biases[k] -= static_cast<float>(cfg.learning_rate * grad_b[l][k]);
      }
    }
    if (on_checkpoint && cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0) {
      on_checkpoint(step, model);
    }
  }
  return result;
}

std::vector<std::uint8_t> encode_checkpoint(const DenseNet& net) {
  io::ByteWriter w;
  w.put_magic("NACW");
  w.put<std::uint32_t>(1);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(net.layers().size()));
  for (const auto& layer : net.layers()) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(layer.inputs));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(layer.outputs));
    w.put_array<float>(layer.weights);
    w.put_array<float>(layer.biases);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(layer.nonlinearity));
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(net.taps().size()));
  for (auto tap : net.taps()) w.put<std::uint32_t>(static_cast<std::uint32_t>(tap));
  return w.bytes();
}

DenseNet decode_checkpoint(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("NACW");
  const auto version_at = r.offset();
  if (auto v = r.get<std::uint32_t>("version"); v != 1) {
    throw FormatError("unsupported NACW version " + std::to_string(v), version_at);
  }
  const auto count = r.get<std::uint32_t>("layer count");
  std::vector<DenseLayer> layers;
  for (std::uint32_t l = 0; l < count; ++l) {
    DenseLayer layer;
    layer.inputs = r.get<std::uint32_t>("layer inputs");
    layer.outputs = r.get<std::uint32_t>("layer outputs");
    layer.weights = r.get_array<float>(std::uint64_t{layer.inputs} * layer.outputs, "weights");
    layer.biases = r.get_array<float>(layer.outputs, "biases");
    const auto tag_at = r.offset();
    const auto tag = r.get<std::uint8_t>("nonlinearity tag");
    if (tag > 1) throw FormatError("unknown nonlinearity tag " + std::to_string(tag), tag_at);
    layer.nonlinearity = static_cast<Nonlinearity>(tag);
    layers.push_back(std::move(layer));
  }
  const auto tap_count = r.get<std::uint32_t>("tap count");
  auto raw_taps = r.get_array<std::uint32_t>(tap_count, "taps");
  r.expect_end();
  const auto end = r.offset();
  try {
    return DenseNet(std::move(layers), {raw_taps.begin(), raw_taps.end()});
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("invalid network: ") + e.what(), end);
  }
}

void save_checkpoint(const DenseNet& net, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_checkpoint(net));
}

DenseNet load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path));
}

}  // namespace nac
