#include "nac/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace nac {
namespace {

void require_nonempty(std::span<const double> ind, std::span<const double> ood) {
  if (ind.empty() || ood.empty()) {
    throw std::invalid_argument("detection metrics need non-empty InD and OOD score sets");
  }
}

}  // namespace

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double auroc(std::span<const double> ind, std::span<const double> ood) {
  require_nonempty(ind, ood);
  std::vector<double> all(ind.begin(), ind.end());
  all.insert(all.end(), ood.begin(), ood.end());
  for (double v : all) {
    if (std::isnan(v)) throw std::invalid_argument("NaN score");
  }
  auto ranks = average_ranks(all);
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < ind.size(); ++i) rank_sum += ranks[i];
  const double n1 = static_cast<double>(ind.size());
  const double n0 = static_cast<double>(ood.size());
  const double u = rank_sum - n1 * (n1 + 1.0) / 2.0;
  return u / (n1 * n0);
}

FprAtTpr fpr_at_tpr(std::span<const double> ind, std::span<const double> ood, double tpr) {
  require_nonempty(ind, ood);
  if (!(tpr > 0.0 && tpr <= 1.0)) throw std::invalid_argument("tpr must lie in (0, 1]");
  std::vector<double> sorted(ind.begin(), ind.end());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const double n = static_cast<double>(sorted.size());
  // Smallest k with k / n >= tpr; the guard absorbs representation error in tpr * n.
  auto k = static_cast<std::size_t>(std::ceil(tpr * n - 1e-9));
  k = std::clamp<std::size_t>(k, 1, sorted.size());
  FprAtTpr r;
  r.threshold = sorted[k - 1];
  const auto above = std::count_if(ood.begin(), ood.end(),
                                   [&](double s) { return s >= r.threshold; });
  r.fpr = static_cast<double>(above) / static_cast<double>(ood.size());
  return r;
}

double spearman_rc(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("spearman_rc needs equal-length inputs");
  if (x.size() < 2) throw std::invalid_argument("spearman_rc needs at least 2 points");
  auto rx = average_ranks(x);
  auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    const double dx = rx[i] - mx, dy = ry[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) {
    throw std::invalid_argument(
        "rank correlation undefined: all values in one input are tied (zero rank variance)");
  }
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double msp_score(const LogitBundle& bundle) {
  return *std::max_element(bundle.probs.begin(), bundle.probs.end());
}

double energy_score(const LogitBundle& bundle) {
  const double mx = *std::max_element(bundle.logits.begin(), bundle.logits.end());
  double sum = 0.0;
  for (double l : bundle.logits) sum += std::exp(l - mx);
  return mx + std::log(sum);
}

DetectionEval evaluate_detection(std::vector<double> ind, std::vector<double> ood, double tpr) {
  DetectionEval e;
  e.auroc = auroc(ind, ood);
  auto f = fpr_at_tpr(ind, ood, tpr);
  e.fpr95 = f.fpr;
  e.threshold_at_tpr95 = f.threshold;
  e.ind_scores = std::move(ind);
  e.ood_scores = std::move(ood);
  return e;
}

RankEval evaluate_ranking(std::vector<double> criterion, std::vector<double> ood_acc) {
  if (criterion.size() != ood_acc.size()) {
    throw std::invalid_argument("criterion and accuracy vectors differ in length");
  }
  if (criterion.empty()) throw std::invalid_argument("no checkpoints to rank");
  RankEval r;
  r.best_index = static_cast<std::size_t>(
      std::distance(criterion.begin(), std::max_element(criterion.begin(), criterion.end())));
  r.best_acc = ood_acc[r.best_index];
  if (criterion.size() < 2) {
    r.rc_note = "rank correlation needs at least 2 checkpoints";
  } else {
    try {
      r.rc = spearman_rc(criterion, ood_acc);
    } catch (const std::invalid_argument& e) {
      r.rc_note = e.what();
    }
  }
  r.criterion_values = std::move(criterion);
  r.ood_test_acc = std::move(ood_acc);
  return r;
}

}  // namespace nac
