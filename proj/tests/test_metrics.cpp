#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "nac/metrics.hpp"
#include "oracles.hpp"

using namespace nac;

namespace {

std::vector<double> random_scores(std::size_t n, std::uint64_t seed, bool ties) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = ties ? std::round(g(rng) * 2.0) / 2.0 : g(rng);
  return v;
}

}  // namespace

TEST_CASE("auroc hand cases") {
  CHECK(auroc(std::vector{2.0, 3.0}, std::vector{0.0, 1.0}) == 1.0);
  CHECK(auroc(std::vector{0.0, 1.0}, std::vector{2.0, 3.0}) == 0.0);
  CHECK(auroc(std::vector{0.9, 0.4}, std::vector{0.5, 0.1}) == 0.75);
  std::vector<double> same{0.3, 0.1, 0.7, 0.7};
  CHECK(auroc(same, same) == 0.5);
}

TEST_CASE("auroc rejects empty input") {
  CHECK_THROWS_AS(auroc(std::vector<double>{}, std::vector{1.0}), std::invalid_argument);
  CHECK_THROWS_AS(auroc(std::vector{1.0}, std::vector<double>{}), std::invalid_argument);
}

TEST_CASE("auroc equals pairwise enumeration and the trapezoid ROC area") {
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    const bool ties = seed % 2 == 0;
    auto ind = random_scores(1 + seed * 3 % 120, seed, ties);
    auto ood = random_scores(1 + seed * 7 % 80, 1000 + seed, ties);
    for (auto& v : ind) v += 0.5;
    const double a = auroc(ind, ood);
    CHECK(a == oracle::auroc_pairwise(ind, ood));
    CHECK(std::abs(a - oracle::auroc_trapezoid(ind, ood)) <= 1e-9);
  }
}

TEST_CASE("auroc is invariant under increasing transforms and symmetric without ties") {
  auto ind = random_scores(50, 1, false);
  auto ood = random_scores(40, 2, false);
  auto tx = [](std::vector<double> v) {
    for (auto& x : v) x = std::exp(3.0 * x) + 7.0;
    return v;
  };
  CHECK(auroc(ind, ood) == auroc(tx(ind), tx(ood)));
  CHECK(auroc(ind, ood) + auroc(ood, ind) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("fpr at tpr hand enumeration") {
  std::vector<double> ind(100);
  std::iota(ind.begin(), ind.end(), 1.0);
  auto r = fpr_at_tpr(ind, std::vector{0.5, 5.5, 200.0}, 0.95);
  CHECK(r.threshold == 6.0);
  CHECK(r.fpr == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("fpr at tpr on separated and identical sets") {
  auto perfect = fpr_at_tpr(std::vector{5.0, 6.0, 7.0}, std::vector{1.0, 2.0});
  CHECK(perfect.fpr == 0.0);
  auto scores = random_scores(200, 4, false);
  auto same = fpr_at_tpr(scores, scores, 0.95);
  CHECK(same.fpr >= 0.95);
}

TEST_CASE("fpr at full tpr thresholds at the minimum InD score") {
  std::vector<double> ind{0.4, 0.9, 0.2, 0.6};
  auto r = fpr_at_tpr(ind, std::vector{0.1, 0.3, 0.5}, 1.0);
  CHECK(r.threshold == 0.2);
  CHECK(r.fpr == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("fpr threshold is the largest one meeting the target") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto ind = random_scores(10 + seed, seed, seed % 2 == 1);
    auto ood = random_scores(15, 50 + seed, false);
    const double tpr = 0.5 + 0.015 * static_cast<double>(seed);
    auto r = fpr_at_tpr(ind, ood, tpr);
    auto frac = [](const std::vector<double>& v, double t) {
      return static_cast<double>(std::count_if(v.begin(), v.end(), [&](double s) { return s >= t; })) /
             static_cast<double>(v.size());
    };
    CHECK(frac(ind, r.threshold) >= tpr);
    for (double t : ind) {
      if (t > r.threshold) CHECK(frac(ind, t) < tpr);
    }
    CHECK(r.fpr == frac(ood, r.threshold));
  }
}

TEST_CASE("fpr at tpr input validation") {
  CHECK_THROWS_AS(fpr_at_tpr(std::vector<double>{}, std::vector{1.0}), std::invalid_argument);
  CHECK_THROWS_AS(fpr_at_tpr(std::vector{1.0}, std::vector{1.0}, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(fpr_at_tpr(std::vector{1.0}, std::vector{1.0}, 1.5), std::invalid_argument);
}

TEST_CASE("spearman hand cases") {
  std::vector<double> x{1, 2, 3, 4};
  CHECK(spearman_rc(x, x) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(spearman_rc(x, std::vector<double>{4, 3, 2, 1}) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(spearman_rc(x, std::vector<double>{1, 3, 2, 4}) == doctest::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("spearman matches the closed form on tie-free data") {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    auto x = random_scores(2 + seed, seed, false);
    auto y = random_scores(2 + seed, 500 + seed, false);
    CHECK(std::abs(spearman_rc(x, y) - oracle::spearman_closed_form(x, y)) <= 1e-12);
  }
}

TEST_CASE("spearman is invariant under increasing transforms") {
  auto x = random_scores(30, 1, true);
  auto y = random_scores(30, 2, true);
  auto tx = x;
  for (auto& v : tx) v = v * v * v + 2.0;
  CHECK(spearman_rc(x, y) == doctest::Approx(spearman_rc(tx, y)).epsilon(1e-14));
}

TEST_CASE("spearman rejects undefined inputs") {
  CHECK_THROWS_AS(spearman_rc(std::vector{1.0}, std::vector{2.0}), std::invalid_argument);
  CHECK_THROWS_AS(spearman_rc(std::vector{1.0, 2.0}, std::vector{2.0}), std::invalid_argument);
  CHECK_THROWS_AS(spearman_rc(std::vector{1.0, 1.0, 1.0}, std::vector{1.0, 2.0, 3.0}),
                  std::invalid_argument);
}

TEST_CASE("average ranks share ties") {
  CHECK(average_ranks(std::vector{10.0, 20.0, 10.0, 5.0}) == std::vector{2.5, 4.0, 2.5, 1.0});
}

TEST_CASE("softmax and energy baselines") {
  auto uniform = LogitBundle::from_logits(std::vector<double>(10, 0.3));
  CHECK(msp_score(uniform) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(energy_score(LogitBundle::from_logits(std::vector{0.0, 0.0})) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-15));
  auto peaked = LogitBundle::from_logits(std::vector{50.0, 0.0, 0.0});
  CHECK(msp_score(peaked) > 1.0 - 1e-12);
  auto big = LogitBundle::from_logits(std::vector{1000.0, 999.0});
  CHECK(energy_score(big) == doctest::Approx(1000.0 + std::log(1.0 + std::exp(-1.0))));
}

TEST_CASE("detection evaluation bundles consistent numbers") {
  auto ind = random_scores(80, 1, false);
  auto ood = random_scores(60, 2, false);
  for (auto& v : ind) v += 1.0;
  auto e = evaluate_detection(ind, ood);
  CHECK(e.auroc == auroc(ind, ood));
  auto f = fpr_at_tpr(ind, ood, 0.95);
  CHECK(e.fpr95 == f.fpr);
  CHECK(e.threshold_at_tpr95 == f.threshold);
}

TEST_CASE("ranking evaluation") {
  auto r = evaluate_ranking({0.1, 0.4, 0.3}, {0.5, 0.9, 0.6});
  REQUIRE(r.rc.has_value());
  CHECK(*r.rc == doctest::Approx(1.0));
  CHECK(r.best_index == 1);
  CHECK(r.best_acc == 0.9);

  auto single = evaluate_ranking({0.2}, {0.7});
  CHECK_FALSE(single.rc.has_value());
  CHECK_FALSE(single.rc_note.empty());
  CHECK(single.best_acc == 0.7);

  auto flat = evaluate_ranking({0.5, 0.5}, {0.1, 0.2});
  CHECK_FALSE(flat.rc.has_value());
  CHECK(flat.best_index == 0);

  CHECK_THROWS_AS(evaluate_ranking({0.1, 0.2}, {0.3}), std::invalid_argument);
}
