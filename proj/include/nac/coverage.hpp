#pragma once

// Neuron activation coverage: per-neuron histograms of states observed on
// in-distribution data, the saturating coverage function built on them, and
// the two scores derived from it (per-sample uncertainty and per-model
// robustness).

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nac/state.hpp"

namespace nac {

enum class BinScale : std::uint8_t { log = 0, uniform = 1 };

// What the histogrammed values are: activation states, or sigmoid-squashed
// raw outputs (used by the entropy regularizer).
enum class StateSource : std::uint8_t { kl_state = 0, raw_activation = 1 };

struct CoverageConfig {
  std::size_t bins = 50;                // M
  std::uint64_t fill_threshold = 50;    // O*
  BinScale bin_scale = BinScale::log;
  double log_epsilon = 1e-4;
  bool correct_only = false;            // recorded; filtering is the caller's job

  void validate() const;
  bool operator==(const CoverageConfig&) const = default;
};

// M + 1 ascending edges with edges[0] = 0 and edges[M] = 1. Log scale puts
// edges[k] = eps * (1/eps)^(k/M) for k >= 1.
std::vector<double> bin_edges(const CoverageConfig& cfg);

struct CoverageHistogram {
  std::size_t neuron_id = 0;
  std::vector<double> edges;
  std::vector<std::uint64_t> counts;
  std::uint64_t total = 0;

  double bin_width(std::size_t k) const { return edges[k + 1] - edges[k]; }
};

class CoverageModel {
 public:
  CoverageModel(std::string layer_id, std::size_t neurons, CoverageConfig cfg, double alpha,
                StateSource source = StateSource::kl_state);

  // Adds one minibatch. Rejected once frozen, or on layer/width/alpha mismatch.
  void update(const NeuronStateMatrix& states);
  void freeze() noexcept { frozen_ = true; }

  const std::string& layer_id() const noexcept { return layer_id_; }
  const CoverageConfig& config() const noexcept { return config_; }
  double alpha() const noexcept { return alpha_; }
  StateSource source() const noexcept { return source_; }
  bool frozen() const noexcept { return frozen_; }
  std::size_t neurons() const noexcept { return neurons_; }
  std::size_t bins() const noexcept { return config_.bins; }
  std::uint64_t total() const noexcept { return total_; }
  const std::vector<double>& edges() const noexcept { return edges_; }

  // Half-open bins, last bin closed at 1.0.
  std::size_t bin_of(double state) const;
  std::uint64_t count(std::size_t neuron, std::size_t bin) const {
    return counts_[neuron * config_.bins + bin];
  }
  std::span<const std::uint64_t> counts(std::size_t neuron) const {
    return {counts_.data() + neuron * config_.bins, config_.bins};
  }
  CoverageHistogram histogram(std::size_t neuron) const;

  // Density lower bound implied by O*: r = O* / (|X| h_k). Diagnostic only.
  double implied_r(std::size_t bin) const;

  bool same_shape(const CoverageModel& other) const;
  bool operator==(const CoverageModel&) const = default;

 private:
  friend CoverageModel merge(const CoverageModel& a, const CoverageModel& b);
  friend CoverageModel decode_coverage(std::span<const std::uint8_t> bytes);

  std::string layer_id_;
  std::size_t neurons_;
  CoverageConfig config_;
  double alpha_;
  StateSource source_;
  std::vector<double> edges_;
  std::vector<std::uint64_t> counts_;  // neurons x bins
  std::uint64_t total_ = 0;
  bool frozen_ = false;
};

// Counts every minibatch and returns a frozen model.
CoverageModel fit(std::string layer_id, std::size_t neurons,
                  std::span<const NeuronStateMatrix> batches, const CoverageConfig& cfg,
                  double alpha, StateSource source = StateSource::kl_state);

// Elementwise sum of counts and totals. Frozen iff both inputs are.
CoverageModel merge(const CoverageModel& a, const CoverageModel& b);

// min(O(state) / O*, 1) for the bin containing `state`.
double phi(const CoverageModel& model, std::size_t neuron, double state);

// Per-sample mean coverage over the layer's neurons.
std::vector<double> nac_ue(const CoverageModel& model, const NeuronStateMatrix& states);

// Mean over neurons and bins of min(O_k / O*, 1).
double nac_me(const CoverageModel& model);

// Batch mean of -sum_i p_i log p_i, p_i = O(bin of state_i) / |X| floored at 1e-12.
double nac_entropy(const CoverageModel& model, const NeuronStateMatrix& states);
// Per-sample entropies (same formula, no batch mean).
std::vector<double> nac_entropy_per_sample(const CoverageModel& model,
                                           const NeuronStateMatrix& states);

enum class Decision : std::uint8_t { ind, ood };

struct ScoreReport {
  std::map<std::string, std::vector<double>> per_layer_scores;
  std::map<std::string, double> layer_weights;
  std::vector<double> fused;
  std::optional<double> threshold;
  std::optional<std::vector<Decision>> decisions;
};

// fused[b] = sum_l w_l * score_l[b]; layers absent from `weights` get 1.
// With a threshold, fused >= threshold is in-distribution.
ScoreReport fuse_layers(const std::map<std::string, std::vector<double>>& per_layer,
                        const std::map<std::string, double>& weights = {},
                        std::optional<double> threshold = std::nullopt);

// Binary model file: "NACM", u32 version, u16 + layer id, u32 M, u64 O*,
// u8 bin scale, f64 log epsilon, u8 correct_only, u8 state source,
// f64 alpha, u8 frozen, u32 N, f64 edges[M+1], u64 counts[N*M], u64 total.
std::vector<std::uint8_t> encode_coverage(const CoverageModel& model);
CoverageModel decode_coverage(std::span<const std::uint8_t> bytes);
void save_coverage(const CoverageModel& model, const std::filesystem::path& path);
CoverageModel load_coverage(const std::filesystem::path& path);

}  // namespace nac
