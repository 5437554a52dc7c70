#include "nac/coverage.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "nac/binary_io.hpp"
#include "nac/error.hpp"

namespace nac {
namespace {

constexpr double kProbFloor = 1e-12;

void require_frozen(const CoverageModel& model, const char* op) {
  if (!model.frozen()) {
    throw std::logic_error(std::string(op) + " needs a frozen coverage model (layer '" +
                           model.layer_id() + "')");
  }
}

void check_states(const CoverageModel& model, const NeuronStateMatrix& states) {
  if (states.layer_id() != model.layer_id()) {
    throw std::invalid_argument("states for layer '" + states.layer_id() +
                                "' given to the coverage model of layer '" + model.layer_id() +
                                "'");
  }
  if (states.samples() > 0 && states.neurons() != model.neurons()) {
    throw std::invalid_argument("states have " + std::to_string(states.neurons()) +
                                " neurons, coverage model has " +
                                std::to_string(model.neurons()));
  }
  if (states.alpha() != model.alpha()) {
    throw std::invalid_argument("states use alpha " + std::to_string(states.alpha()) +
                                ", coverage model was fit with alpha " +
                                std::to_string(model.alpha()));
  }
}

double fill_ratio(std::uint64_t count, std::uint64_t fill) {
  return std::min(static_cast<double>(count) / static_cast<double>(fill), 1.0);
}

}  // namespace

void CoverageConfig::validate() const {
  if (bins < 2) throw std::invalid_argument("coverage needs at least 2 bins");
  if (fill_threshold < 1) throw std::invalid_argument("fill threshold O* must be at least 1");
  if (bin_scale == BinScale::log && !(log_epsilon > 0.0 && log_epsilon <= 0.1)) {
    throw std::invalid_argument("log_epsilon must lie in (0, 0.1]");
  }
}

std::vector<double> bin_edges(const CoverageConfig& cfg) {
  cfg.validate();
  const std::size_t m = cfg.bins;
  std::vector<double> edges(m + 1);
  edges[0] = 0.0;
  for (std::size_t k = 1; k < m; ++k) {
    const double t = static_cast<double>(k) / static_cast<double>(m);
    edges[k] = cfg.bin_scale == BinScale::uniform
                   ? t
                   : cfg.log_epsilon * std::pow(1.0 / cfg.log_epsilon, t);
  }
  edges[m] = 1.0;
  return edges;
}

CoverageModel::CoverageModel(std::string layer_id, std::size_t neurons, CoverageConfig cfg,
                             double alpha, StateSource source)
    : layer_id_(std::move(layer_id)),
      neurons_(neurons),
      config_(cfg),
      alpha_(alpha),
      source_(source),
      edges_(bin_edges(cfg)),
      counts_(neurons * cfg.bins, 0) {
  if (neurons_ == 0) throw std::invalid_argument("coverage model needs at least one neuron");
  if (!(alpha_ > 0.0)) throw std::invalid_argument("alpha must be positive");
}

std::size_t CoverageModel::bin_of(double state) const {
  if (!(state >= 0.0 && state <= 1.0)) {
    throw std::invalid_argument("state " + std::to_string(state) + " outside [0, 1]");
  }
  auto it = std::upper_bound(edges_.begin(), edges_.end(), state);
  const auto k = static_cast<std::size_t>(std::distance(edges_.begin(), it));
  return std::min(k, config_.bins) - 1;
}

void CoverageModel::update(const NeuronStateMatrix& states) {
  if (frozen_) {
    throw std::logic_error("coverage model for layer '" + layer_id_ + "' is frozen");
  }
  check_states(*this, states);
  const std::size_t m = config_.bins;
  for (std::size_t b = 0; b < states.samples(); ++b) {
    for (std::size_t i = 0; i < neurons_; ++i) {
      ++counts_[i * m + bin_of(states(b, i))];
    }
  }
  total_ += states.samples();
}

CoverageHistogram CoverageModel::histogram(std::size_t neuron) const {
  if (neuron >= neurons_) {
    throw std::out_of_range("neuron " + std::to_string(neuron) + " out of range (layer has " +
                            std::to_string(neurons_) + ")");
  }
  auto c = counts(neuron);
  return {neuron, edges_, {c.begin(), c.end()}, total_};
}

double CoverageModel::implied_r(std::size_t bin) const {
  const double h = edges_.at(bin + 1) - edges_.at(bin);
  return static_cast<double>(config_.fill_threshold) / (static_cast<double>(total_) * h);
}

bool CoverageModel::same_shape(const CoverageModel& other) const {
  return layer_id_ == other.layer_id_ && neurons_ == other.neurons_ &&
         config_ == other.config_ && alpha_ == other.alpha_ && source_ == other.source_ &&
         edges_ == other.edges_;
}

CoverageModel fit(std::string layer_id, std::size_t neurons,
                  std::span<const NeuronStateMatrix> batches, const CoverageConfig& cfg,
                  double alpha, StateSource source) {
  CoverageModel model(std::move(layer_id), neurons, cfg, alpha, source);
  for (const auto& batch : batches) model.update(batch);
  model.freeze();
  return model;
}

CoverageModel merge(const CoverageModel& a, const CoverageModel& b) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument("cannot merge coverage models with different layer, width, "
                                "alpha, source or configuration ('" +
                                a.layer_id() + "' vs '" + b.layer_id() + "')");
  }
  CoverageModel out = a;
  for (std::size_t k = 0; k < out.counts_.size(); ++k) out.counts_[k] += b.counts_[k];
  out.total_ += b.total_;
  out.frozen_ = a.frozen_ && b.frozen_;
  return out;
}

double phi(const CoverageModel& model, std::size_t neuron, double state) {
  require_frozen(model, "phi");
  if (neuron >= model.neurons()) {
    throw std::out_of_range("unknown neuron " + std::to_string(neuron) + " (layer '" +
                            model.layer_id() + "' has " + std::to_string(model.neurons()) +
                            ")");
  }
  return fill_ratio(model.count(neuron, model.bin_of(state)), model.config().fill_threshold);
}

std::vector<double> nac_ue(const CoverageModel& model, const NeuronStateMatrix& states) {
  require_frozen(model, "nac_ue");
  check_states(model, states);
  const auto fill = model.config().fill_threshold;
  const double inv_n = 1.0 / static_cast<double>(model.neurons());
  std::vector<double> scores(states.samples());
  for (std::size_t b = 0; b < states.samples(); ++b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < model.neurons(); ++i) {
      acc += fill_ratio(model.count(i, model.bin_of(states(b, i))), fill);
    }
    scores[b] = acc * inv_n;
  }
  return scores;
}

double nac_me(const CoverageModel& model) {
  require_frozen(model, "nac_me");
  const auto fill = model.config().fill_threshold;
  double acc = 0.0;
  for (std::size_t i = 0; i < model.neurons(); ++i) {
    for (auto c : model.counts(i)) acc += fill_ratio(c, fill);
  }
  return acc / static_cast<double>(model.neurons() * model.bins());
}

std::vector<double> nac_entropy_per_sample(const CoverageModel& model,
                                           const NeuronStateMatrix& states) {
  require_frozen(model, "nac_entropy");
  check_states(model, states);
  if (model.total() == 0) {
    throw std::invalid_argument("NAC entropy is undefined for an empty coverage model");
  }
  const double total = static_cast<double>(model.total());
  std::vector<double> out(states.samples());
  for (std::size_t b = 0; b < states.samples(); ++b) {
    double h = 0.0;
    for (std::size_t i = 0; i < model.neurons(); ++i) {
      double p = static_cast<double>(model.count(i, model.bin_of(states(b, i)))) / total;
      p = std::max(p, kProbFloor);
      h -= p * std::log(p);
    }
    out[b] = h;
  }
  return out;
}

double nac_entropy(const CoverageModel& model, const NeuronStateMatrix& states) {
  auto per = nac_entropy_per_sample(model, states);
  if (per.empty()) return 0.0;
  double acc = 0.0;
  for (double h : per) acc += h;
  return acc / static_cast<double>(per.size());
}

ScoreReport fuse_layers(const std::map<std::string, std::vector<double>>& per_layer,
                        const std::map<std::string, double>& weights,
                        std::optional<double> threshold) {
  if (per_layer.empty()) throw std::invalid_argument("no layer scores to fuse");
  for (const auto& [layer, w] : weights) {
    if (!per_layer.contains(layer)) {
      throw std::invalid_argument("weight given for unknown layer '" + layer + "'");
    }
    if (!(w >= 0.0)) throw std::invalid_argument("layer weights must be non-negative");
  }
  const std::size_t n = per_layer.begin()->second.size();
  ScoreReport report;
  report.per_layer_scores = per_layer;
  report.fused.assign(n, 0.0);
  for (const auto& [layer, scores] : per_layer) {
    if (scores.size() != n) {
      throw std::invalid_argument("layer '" + layer + "' has " + std::to_string(scores.size()) +
                                  " scores, expected " + std::to_string(n));
    }
    auto it = weights.find(layer);
    const double w = it == weights.end() ? 1.0 : it->second;
    report.layer_weights[layer] = w;
    for (std::size_t b = 0; b < n; ++b) report.fused[b] += w * scores[b];
  }
  if (threshold) {
    report.threshold = threshold;
    std::vector<Decision> d(n);
    for (std::size_t b = 0; b < n; ++b) {
      d[b] = report.fused[b] >= *threshold ? Decision::ind : Decision::ood;
    }
    report.decisions = std::move(d);
  }
  return report;
}

std::vector<std::uint8_t> encode_coverage(const CoverageModel& model) {
  const auto& cfg = model.config();
  io::ByteWriter w;
  w.put_magic("NACM");
  w.put<std::uint32_t>(1);
  w.put_short_string(model.layer_id());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cfg.bins));
  w.put<std::uint64_t>(cfg.fill_threshold);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(cfg.bin_scale));
  w.put<double>(cfg.log_epsilon);
  w.put<std::uint8_t>(cfg.correct_only ? 1 : 0);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(model.source()));
  w.put<double>(model.alpha());
  w.put<std::uint8_t>(model.frozen() ? 1 : 0);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.neurons()));
  w.put_array<double>(model.edges());
  for (std::size_t i = 0; i < model.neurons(); ++i) w.put_array<std::uint64_t>(model.counts(i));
  w.put<std::uint64_t>(model.total());
  return w.bytes();
}

CoverageModel decode_coverage(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("NACM");
  const auto version_at = r.offset();
  if (auto v = r.get<std::uint32_t>("version"); v != 1) {
    throw FormatError("unsupported NACM version " + std::to_string(v), version_at);
  }
  auto layer_id = r.get_short_string("layer id");
  CoverageConfig cfg;
  cfg.bins = r.get<std::uint32_t>("bin count");
  cfg.fill_threshold = r.get<std::uint64_t>("fill threshold");
  const auto scale_at = r.offset();
  const auto scale = r.get<std::uint8_t>("bin scale");
  if (scale > 1) throw FormatError("unknown bin scale tag " + std::to_string(scale), scale_at);
  cfg.bin_scale = static_cast<BinScale>(scale);
  cfg.log_epsilon = r.get<double>("log epsilon");
  cfg.correct_only = r.get<std::uint8_t>("correct_only") != 0;
  const auto source_at = r.offset();
  const auto source = r.get<std::uint8_t>("state source");
  if (source > 1) throw FormatError("unknown state source tag " + std::to_string(source), source_at);
  const double alpha = r.get<double>("alpha");
  const bool frozen = r.get<std::uint8_t>("frozen flag") != 0;
  const auto config_end = r.offset();
  const auto neurons = r.get<std::uint32_t>("neuron count");
  std::optional<CoverageModel> model;
  try {
    model.emplace(std::move(layer_id), neurons, cfg, alpha, static_cast<StateSource>(source));
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("invalid coverage configuration: ") + e.what(), config_end);
  }
  const auto edges_at = r.offset();
  auto edges = r.get_array<double>(cfg.bins + 1, "bin edges");
  for (std::size_t k = 0; k < edges.size(); ++k) {
    if (std::abs(edges[k] - model->edges_[k]) > 1e-12) {
      throw FormatError("stored bin edges do not match the configuration", edges_at);
    }
  }
  model->edges_ = std::move(edges);
  model->counts_ = r.get_array<std::uint64_t>(std::uint64_t{neurons} * cfg.bins, "counts");
  model->total_ = r.get<std::uint64_t>("total");
  r.expect_end();
  for (std::size_t i = 0; i < model->neurons_; ++i) {
    std::uint64_t sum = 0;
    for (auto c : model->counts(i)) sum += c;
    if (sum != model->total_) {
      throw FormatError("counts of neuron " + std::to_string(i) + " do not sum to the total",
                        r.offset());
    }
  }
  model->frozen_ = frozen;
  return std::move(*model);
}

void save_coverage(const CoverageModel& model, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_coverage(model));
}

CoverageModel load_coverage(const std::filesystem::path& path) {
  return decode_coverage(io::read_file(path));
}

}  // namespace nac
