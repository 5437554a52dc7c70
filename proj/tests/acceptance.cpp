// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit if any
// criterion fails. Tolerances and seed counts are fixed below.
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "commands.hpp"
#include "nac/coverage.hpp"
#include "nac/data.hpp"
#include "nac/metrics.hpp"
#include "nac/netlab.hpp"
#include "nac/state.hpp"
#include "oracles.hpp"

using namespace nac;
namespace fs = std::filesystem;

namespace {

constexpr double kLogitGradRel = 1e-6;
constexpr double kLogitGradFloor = 1e-8;
constexpr double kLogitFdStep = 1e-5;
constexpr double kHiddenGradRel = 1e-4;
constexpr double kHiddenGradFloor = 1e-6;
constexpr double kHiddenFdStep = 1e-4;
constexpr double kDecompositionAbs = 1e-6;
constexpr double kIntegrationAbs = 1e-12;
constexpr double kSpearmanAbs = 1e-12;
constexpr double kDetectAuroc = 0.95;
constexpr double kSubsetDelta = 0.02;
constexpr std::size_t kSeeds = 5;
constexpr std::size_t kSeedsNeeded = 4;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  std::string name;
  double budget_seconds;
  std::function<Outcome()> run;
};

fs::path work_dir() {
  static const fs::path dir =
      fs::temp_directory_path() / ("nac_acceptance_" + std::to_string(::getpid()));
  return dir;
}

std::string seed_list(const std::vector<double>& v, int precision = 4) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out += fmt::format("{}{:.{}f}", i ? " " : "", v[i], precision);
  }
  return out;
}

// ---------------------------------------------------------------- gradients

Outcome gradient_identity() {
  std::mt19937_64 rng(2024);
  std::normal_distribution<float> in(0.0f, 1.5f);
  double worst_logit = 0.0, worst_hidden = 0.0;
  std::size_t checked = 0, kinks = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::size_t> widths{3, 8, 6, 2 + static_cast<std::size_t>(trial % 6)};
    auto net = DenseNet::random(widths, {0, 1}, 7000 + trial, 0.3);
    std::vector<float> x(3);
    for (auto& v : x) v = in(rng);
    auto g = backward_kl(net, x);

    const auto& logits = g.bundle.logits;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      auto up = logits, down = logits;
      up[i] += kLogitFdStep;
      down[i] -= kLogitFdStep;
      const double fd =
          (oracle::kl_from_logits(up) - oracle::kl_from_logits(down)) / (2 * kLogitFdStep);
      worst_logit = std::max(worst_logit,
                             oracle::rel_error(g.logit_gradient[i], fd, kLogitGradFloor));
    }
    for (auto tap : net.taps()) {
      auto z = oracle::activation_at(net, tap, x);
      auto fd = oracle::finite_difference(net, tap, z, kHiddenFdStep);
      for (std::size_t i = 0; i < z.size(); ++i) {
        if (!fd.valid[i]) {
          ++kinks;
          continue;
        }
        ++checked;
        worst_hidden = std::max(
            worst_hidden, oracle::rel_error(g.gradients.at(tap)[i], fd.gradient[i], kHiddenGradFloor));
      }
    }
  }
  const bool pass = worst_logit <= kLogitGradRel && worst_hidden <= kHiddenGradRel && checked > 0;
  return {pass, fmt::format("100 nets; logit max rel err {:.2e} (<= {:.0e}), hidden max rel err "
                            "{:.2e} (<= {:.0e}) over {} coordinates, {} skipped at ReLU kinks",
                            worst_logit, kLogitGradRel, worst_hidden, kHiddenGradRel, checked, kinks)};
}

// ---------------------------------------------------------------- decomposition

Outcome decomposition() {
  std::mt19937_64 rng(77);
  std::normal_distribution<float> in(0.0f, 1.5f);
  double worst = 0.0;
  std::size_t compared = 0;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::size_t> widths{4, 9, 7, 2 + static_cast<std::size_t>(trial % 5)};
    auto net = DenseNet::random(widths, {0, 1}, 300 + trial, 0.3);
    Matrix<float> xs(16, 4);
    for (auto& v : xs.data()) v = in(rng);
    std::vector<std::size_t> taps{0, 1};
    auto cap = capture_layers(net, xs, taps);
    for (auto tap : taps) {
      const auto& batch = cap.layers.at(DenseNet::tap_name(tap));
      const std::size_t classes = net.class_count();
      std::vector<Matrix<double>> per_class(classes, Matrix<double>(xs.rows(), batch.z.cols()));
      Matrix<double> probs(xs.rows(), classes);
      for (std::size_t b = 0; b < xs.rows(); ++b) {
        auto jac = logit_jacobian(net, xs.row(b), tap);
        auto fr = forward(net, xs.row(b));
        for (std::size_t c = 0; c < classes; ++c) {
          probs(b, c) = fr.bundle.probs[c];
          for (std::size_t n = 0; n < batch.z.cols(); ++n) per_class[c](b, n) = jac(c, n);
        }
      }
      for (double alpha : {1.0, 100.0}) {
        auto direct = neuron_states(batch, alpha);
        auto via = states_via_decomposition(batch.z, per_class, probs, alpha, batch.layer_id);
        for (std::size_t i = 0; i < direct.values().data().size(); ++i) {
          worst = std::max(worst, std::abs(direct.values().data()[i] - via.values().data()[i]));
          ++compared;
        }
      }
    }
  }
  return {worst <= kDecompositionAbs,
          fmt::format("50 nets, {} states at alpha 1 and 100; max abs diff {:.2e} (<= {:.0e})",
                      compared, worst, kDecompositionAbs)};
}

// ---------------------------------------------------------------- histogram oracle

std::vector<double> independent_edges(const CoverageConfig& cfg) {
  std::vector<double> e(cfg.bins + 1);
  e[0] = 0.0;
  for (std::size_t k = 1; k <= cfg.bins; ++k) {
    const double t = static_cast<double>(k) / static_cast<double>(cfg.bins);
    e[k] = cfg.bin_scale == BinScale::uniform ? t : cfg.log_epsilon * std::pow(1.0 / cfg.log_epsilon, t);
  }
  e[cfg.bins] = 1.0;
  return e;
}

Outcome histogram_oracle() {
  constexpr std::size_t rows = 1250, neurons = 8;  // 10,000 states
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::string detail;
  bool pass = true;
  for (auto scale : {BinScale::uniform, BinScale::log}) {
    CoverageConfig cfg;
    cfg.bins = 37;
    cfg.bin_scale = scale;
    Matrix<double> all(rows, neurons);
    for (auto& v : all.data()) {
      // Skewed toward 0 so the narrow log bins are exercised too.
      v = std::clamp(std::pow(u(rng), 3.0), 1e-12, 1.0 - 1e-12);
    }
    std::vector<CoverageModel> parts;
    for (std::size_t q = 0; q < 4; ++q) {
      std::vector<std::size_t> idx;
      for (std::size_t r = q * rows / 4; r < (q + 1) * rows / 4; ++r) idx.push_back(r);
      std::vector<NeuronStateMatrix> batch{NeuronStateMatrix(select_rows(all, idx), "l", 1.0)};
      parts.push_back(fit("l", neurons, batch, cfg, 1.0));
    }
    auto merged = merge(merge(parts[0], parts[1]), merge(parts[2], parts[3]));

    const auto& edges = merged.edges();
    double edge_err = 0.0;
    const auto ref = independent_edges(cfg);
    for (std::size_t k = 0; k < edges.size(); ++k) edge_err = std::max(edge_err, std::abs(edges[k] - ref[k]));
    std::vector<std::uint64_t> brute(neurons * cfg.bins, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t n = 0; n < neurons; ++n) {
        const double s = all(r, n);
        std::size_t k = 0;
        while (k + 1 < cfg.bins && s >= edges[k + 1]) ++k;
        brute[n * cfg.bins + k]++;
      }
    }
    std::size_t mismatches = 0;
    for (std::size_t n = 0; n < neurons; ++n) {
      for (std::size_t k = 0; k < cfg.bins; ++k) {
        mismatches += merged.count(n, k) != brute[n * cfg.bins + k];
      }
    }
    const bool ok = mismatches == 0 && merged.total() == rows && edge_err <= 1e-15;
    pass = pass && ok;
    detail += fmt::format("{}{} bins: {} count mismatches, total {}, edge err {:.1e}",
                          detail.empty() ? "" : "; ",
                          scale == BinScale::log ? "log" : "uniform", mismatches, merged.total(),
                          edge_err);
  }
  return {pass, "10,000 states, 4-way split then merge vs single-pass tally; " + detail};
}

// ---------------------------------------------------------------- NAC-ME exactness

Outcome nac_me_exactness() {
  double worst = 0.0;
  std::size_t fraction_mismatch = 0;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(1e-9, 1.0 - 1e-9);
  for (std::uint64_t trial = 0; trial < 30; ++trial) {
    const std::size_t bins = 5 + trial % 23, neurons = 4, rows = 200 + 10 * trial;
    Matrix<double> states(rows, neurons);
    for (auto& v : states.data()) v = u(rng);
    std::vector<NeuronStateMatrix> batch{NeuronStateMatrix(states, "l", 1.0)};
    CoverageConfig cfg;
    cfg.bins = bins;
    cfg.bin_scale = BinScale::uniform;
    cfg.fill_threshold = 1 + trial * 13 % 60;
    auto model = fit("l", neurons, batch, cfg, 1.0);
    double integral = 0.0;
    for (std::size_t n = 0; n < neurons; ++n) {
      integral += oracle::integrate_coverage(model.counts(n), cfg.fill_threshold, 10 * bins);
    }
    integral /= static_cast<double>(neurons);
    worst = std::max(worst, std::abs(nac_me(model) - integral));

    cfg.fill_threshold = 1;
    auto ones = fit("l", neurons, batch, cfg, 1.0);
    std::size_t occupied = 0;
    for (std::size_t n = 0; n < neurons; ++n) {
      std::set<std::size_t> seen;
      for (std::size_t r = 0; r < rows; ++r) seen.insert(oracle::uniform_bin(states(r, n), bins));
      occupied += seen.size();
    }
    fraction_mismatch +=
        nac_me(ones) != static_cast<double>(occupied) / static_cast<double>(bins * neurons);
  }
  return {worst <= kIntegrationAbs && fraction_mismatch == 0,
          fmt::format("30 models; max |bin-sum - midpoint integral| {:.2e} (<= {:.0e}); O* = 1 "
                      "occupied-fraction mismatches {}",
                      worst, kIntegrationAbs, fraction_mismatch)};
}

// ---------------------------------------------------------------- metric oracles

Outcome metric_oracles() {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> size(1, 200);
  std::size_t auroc_mismatch = 0;
  for (int trial = 0; trial < 300; ++trial) {
    const bool ties = trial % 2 == 0;
    std::vector<double> ind(size(rng)), ood(size(rng));
    for (auto& v : ind) v = ties ? std::round(g(rng) * 3.0) / 3.0 + 0.4 : g(rng) + 0.4;
    for (auto& v : ood) v = ties ? std::round(g(rng) * 3.0) / 3.0 : g(rng);
    auroc_mismatch += auroc(ind, ood) != oracle::auroc_pairwise(ind, ood);
  }
  double spearman_err = 0.0;
  std::uniform_int_distribution<std::size_t> len(3, 200);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> x(len(rng)), y;
    for (auto& v : x) v = g(rng);
    for (double v : x) y.push_back(0.5 * v + g(rng));
    spearman_err = std::max(spearman_err, std::abs(spearman_rc(x, y) - oracle::spearman_closed_form(x, y)));
  }

  std::size_t fpr_fail = 0;
  std::vector<double> hundred(100);
  for (std::size_t i = 0; i < 100; ++i) hundred[i] = static_cast<double>(i + 1);
  auto hand = fpr_at_tpr(hundred, std::vector{0.5, 5.5, 200.0}, 0.95);
  fpr_fail += !(hand.threshold == 6.0 && hand.fpr == 1.0 / 3.0);
  fpr_fail += fpr_at_tpr(std::vector{5.0, 6.0, 7.0}, std::vector{1.0, 2.0}).fpr != 0.0;
  std::vector<double> same(200);
  for (auto& v : same) v = g(rng);
  fpr_fail += !(fpr_at_tpr(same, same, 0.95).fpr >= 0.95);

  return {auroc_mismatch == 0 && spearman_err <= kSpearmanAbs && fpr_fail == 0,
          fmt::format("AUROC vs pairwise: {} mismatches in 300 sets (sizes 1..200, half tied); "
                      "Spearman vs closed form max diff {:.1e} (<= {:.0e}); FPR95 examples failing "
                      "{}/3",
                      auroc_mismatch, spearman_err, kSpearmanAbs, fpr_fail)};
}

// ---------------------------------------------------------------- desk-scale pipeline

fs::path heldout_run(std::uint64_t seed) {
  const auto dir = work_dir() / fmt::format("heldout_{}", seed);
  if (!fs::exists(cli::final_checkpoint(dir))) {
    cli::TrainOptions o;
    o.task = {seed, TaskKind::heldout_class};
    o.out = dir;
    cli::cmd_train(o);
  }
  return dir;
}

cli::SweepOutcome sweep_for(std::uint64_t seed, double subset_frac, const std::string& tag) {
  cli::SweepOptions s;
  s.task = {seed, TaskKind::heldout_class};
  s.checkpoint = cli::final_checkpoint(heldout_run(seed));
  s.subset_frac = subset_frac;
  s.out = work_dir() / fmt::format("sweep_{}_{}", tag, seed);
  return cli::cmd_sweep(s);
}

Outcome desk_detection() {
  std::size_t ok = 0;
  std::vector<double> nac, msp, gap, dflt;
  for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
    auto sweep = sweep_for(seed, 1.0, "full");
    const auto& cell = sweep.cells[sweep.selected];
    cli::DetectOptions d;
    d.task = {seed, TaskKind::heldout_class};
    d.checkpoint = cli::final_checkpoint(heldout_run(seed));
    d.nac.layers = cell.layers;
    d.nac.alpha = {cell.alpha};
    d.nac.bins = cell.bins;
    d.nac.fill = cell.fill;
    d.nac.weights = cell.weights;
    d.out = work_dir() / fmt::format("detect_{}", seed);
    auto r = cli::cmd_eval_detect(d);
    const auto& row = r.row("NAC-UE");
    const auto& base = r.row("MSP");
    nac.push_back(row.auroc);
    msp.push_back(base.auroc);
    gap.push_back(row.mean_ind - row.mean_ood);
    ok += row.auroc >= kDetectAuroc && row.auroc >= base.auroc && row.mean_ood < row.mean_ind;

    d.nac = {};
    d.out = work_dir() / fmt::format("detect_default_{}", seed);
    dflt.push_back(cli::cmd_eval_detect(d).row("NAC-UE").auroc);
  }
  return {ok >= kSeedsNeeded,
          fmt::format("{}/{} seeds (need {}); validation-selected NAC-UE AUROC [{}] (>= {}), MSP "
                      "[{}], mean InD - mean OOD score [{}]; fixed defaults alpha=100 M=50 O*=50 "
                      "give NAC-UE [{}]",
                      ok, kSeeds, kSeedsNeeded, seed_list(nac), kDetectAuroc, seed_list(msp),
                      seed_list(gap), seed_list(dflt))};
}

Outcome desk_generalization() {
  std::size_t ok = 0;
  std::vector<double> rc, val_rc;
  for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
    cli::TrainOptions t;
    t.task = {seed, TaskKind::covariate_shift};
    t.out = work_dir() / fmt::format("shift_{}", seed);
    cli::cmd_train(t);
    cli::EvalMeOptions e;
    e.task = t.task;
    e.run_dir = t.out;
    e.out = work_dir() / fmt::format("me_{}", seed);
    auto r = cli::cmd_eval_me(e);
    const double v = r.nac_me.rc.value_or(std::nan(""));
    rc.push_back(v);
    val_rc.push_back(r.val.rc.value_or(std::nan("")));
    ok += r.steps.size() == 16 && r.nac_me.rc && v > 0.0;
  }
  return {ok >= kSeedsNeeded,
          fmt::format("{}/{} seeds (need {}); 16 checkpoints per run; RC(NAC-ME, OOD acc) [{}] "
                      "(> 0); RC(val acc, OOD acc) [{}]",
                      ok, kSeeds, kSeedsNeeded, seed_list(rc, 3), seed_list(val_rc, 3))};
}

Outcome sensitivity_sweep() {
  std::size_t ok = 0;
  std::vector<double> selected, worst;
  for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
    auto s = sweep_for(seed, 1.0, "grid");
    std::set<std::string> combos;
    double lo = 1.0;
    for (const auto& c : s.cells) {
      combos.insert(fmt::format("{}/{}/{}", c.alpha, c.bins, c.fill));
      lo = std::min(lo, c.test_auroc);
    }
    std::ifstream csv(work_dir() / fmt::format("sweep_grid_{}", seed) / "sweep.csv");
    std::size_t lines = 0;
    for (std::string line; std::getline(csv, line);) ++lines;
    const bool complete = s.cells.size() == 27 && combos.size() == 27 && lines == 28;
    const double sel = s.cells[s.selected].test_auroc;
    selected.push_back(sel);
    worst.push_back(lo);
    ok += complete && sel > lo;
  }
  return {ok >= kSeedsNeeded,
          fmt::format("{}/{} seeds (need {}) with 27 cells, 28 CSV lines and the selected cell above the worst "
                      "test cell; selected test AUROC [{}], worst [{}]",
                      ok, kSeeds, kSeedsNeeded, seed_list(selected), seed_list(worst))};
}

Outcome subset_efficiency() {
  std::size_t ok = 0;
  std::vector<double> delta, fixed_delta;
  for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
    auto full = sweep_for(seed, 1.0, "frac100");
    auto part = sweep_for(seed, 0.01, "frac1");
    const double d = std::abs(full.cells[full.selected].test_auroc - part.cells[part.selected].test_auroc);
    delta.push_back(d);
    ok += d <= kSubsetDelta;

    cli::DetectOptions o;
    o.task = {seed, TaskKind::heldout_class};
    o.checkpoint = cli::final_checkpoint(heldout_run(seed));
    o.out = work_dir() / fmt::format("subset_fixed_{}", seed);
    const double a = cli::cmd_eval_detect(o).row("NAC-UE").auroc;
    o.nac.subset_frac = 0.01;
    const double b = cli::cmd_eval_detect(o).row("NAC-UE").auroc;
    fixed_delta.push_back(std::abs(a - b));
  }
  return {ok == kSeeds,
          fmt::format("{}/{} seeds with |AUROC(1%) - AUROC(100%)| <= {} under validation "
                      "selection: [{}]; with fixed alpha=100 M=50 O*=50: [{}]",
                      ok, kSeeds, kSubsetDelta, seed_list(delta), seed_list(fixed_delta))};
}

Outcome state_forms() {
  std::size_t ok = 0;
  std::vector<double> act, grad, prod;
  for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
    cli::PlotOptions p;
    p.task = {seed, TaskKind::heldout_class};
    p.checkpoint = cli::final_checkpoint(heldout_run(seed));
    p.out = work_dir() / fmt::format("plot_{}", seed);
    auto r = cli::cmd_plot(p);
    std::map<StateForm, double> a;
    for (const auto& f : r.forms) a[f.form] = f.auroc;
    act.push_back(a[StateForm::activation]);
    grad.push_back(a[StateForm::gradient]);
    prod.push_back(a[StateForm::product]);
    ok += a[StateForm::product] >= a[StateForm::activation] &&
          a[StateForm::product] >= a[StateForm::gradient];
  }
  return {ok >= kSeedsNeeded,
          fmt::format("{}/{} seeds (need {}) where the product state separates best at alpha=100; "
                      "AUROC activation [{}], gradient [{}], product [{}]",
                      ok, kSeeds, kSeedsNeeded, seed_list(act), seed_list(grad), seed_list(prod))};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {"gradient-identity", 10, gradient_identity},
      {"state-decomposition", 10, decomposition},
      {"histogram-oracle", 5, histogram_oracle},
      {"nac-me-exactness", 5, nac_me_exactness},
      {"metric-oracles", 5, metric_oracles},
      {"desk-detection", 180, desk_detection},
      {"desk-generalization", 300, desk_generalization},
      {"sensitivity-sweep", 600, sensitivity_sweep},
      {"subset-efficiency", 180, subset_efficiency},
      {"state-form-ablation (supplementary)", 180, state_forms},
  };
  fs::create_directories(work_dir());
  bool all = true;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool pass = o.pass && secs <= c.budget_seconds;
    all = all && pass;
    std::printf("%s %s: %s [%.1fs, budget %.0fs]\n", pass ? "PASS" : "FAIL", c.name.c_str(),
                o.detail.c_str(), secs, c.budget_seconds);
    std::fflush(stdout);
  }
  std::error_code ec;
  fs::remove_all(work_dir(), ec);
  return all ? 0 : 1;
}
