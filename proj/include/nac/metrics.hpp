#pragma once

// Detection and model-ranking metrics. Scores are oriented so that higher
// means more in-distribution everywhere.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nac/netlab.hpp"

namespace nac {

// P(ind > ood) + 0.5 P(ind == ood), via average ranks.
double auroc(std::span<const double> ind, std::span<const double> ood);

struct FprAtTpr {
  double fpr = 0.0;
  double threshold = 0.0;
};

// threshold = largest t with fraction(ind >= t) >= tpr; fpr = fraction(ood >= t).
FprAtTpr fpr_at_tpr(std::span<const double> ind, std::span<const double> ood, double tpr = 0.95);

// Pearson correlation of average ranks. Throws when either input has zero
// rank variance.
double spearman_rc(std::span<const double> x, std::span<const double> y);

// 1-based average ranks (ties share the mean of their positions).
std::vector<double> average_ranks(std::span<const double> values);

double msp_score(const LogitBundle& bundle);
double energy_score(const LogitBundle& bundle);

struct DetectionEval {
  std::vector<double> ind_scores;
  std::vector<double> ood_scores;
  double auroc = 0.0;
  double fpr95 = 0.0;
  double threshold_at_tpr95 = 0.0;
};

DetectionEval evaluate_detection(std::vector<double> ind, std::vector<double> ood,
                                 double tpr = 0.95);

struct RankEval {
  std::vector<double> criterion_values;
  std::vector<double> ood_test_acc;
  std::optional<double> rc;  // empty when fewer than 2 checkpoints or no rank variance
  std::string rc_note;       // why rc is missing
  double best_acc = 0.0;     // OOD accuracy at the first argmax of the criterion
  std::size_t best_index = 0;
};

RankEval evaluate_ranking(std::vector<double> criterion, std::vector<double> ood_acc);

}  // namespace nac
