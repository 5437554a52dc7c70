#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "nac/error.hpp"
#include "nac/netlab.hpp"
#include "oracles.hpp"

using namespace nac;

namespace {

DenseNet identity_net() {
  DenseLayer l{2, 2, {1.0f, 0.0f, 0.0f, 1.0f}, {0.0f, 0.0f}, Nonlinearity::identity};
  return DenseNet({l}, {});
}

LogitBundle bundle_from_probs(std::vector<double> p) {
  for (auto& v : p) v = std::log(v);
  return LogitBundle::from_logits(p);
}

std::vector<float> random_input(std::mt19937_64& rng, std::size_t width) {
  std::normal_distribution<float> n(0.0f, 1.5f);
  std::vector<float> x(width);
  for (auto& v : x) v = n(rng);
  return x;
}

// Four blobs at (+-2, +-2); label is 1 when the coordinate signs agree.
LabeledSet xor_blobs(std::size_t per_blob, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 0.4f);
  LabeledSet set{Matrix<float>(0, 2), {}};
  for (int sx : {-1, 1}) {
    for (int sy : {-1, 1}) {
      for (std::size_t i = 0; i < per_blob; ++i) {
        std::vector<float> row{2.0f * sx + n(rng), 2.0f * sy + n(rng)};
        set.inputs.append_row(std::span<const float>(row));
        set.labels.push_back(sx == sy ? 1u : 0u);
      }
    }
  }
  return set;
}

}  // namespace

TEST_CASE("forward through an identity layer gives the softmax of the input") {
  auto net = identity_net();
  std::vector<float> x{1.0f, -1.0f};
  auto r = forward(net, x);
  CHECK(r.bundle.logits[0] == 1.0);
  CHECK(r.bundle.logits[1] == -1.0);
  const double p0 = 1.0 / (1.0 + std::exp(-2.0));
  CHECK(r.bundle.probs[0] == doctest::Approx(p0).epsilon(1e-12));
  CHECK(r.bundle.probs[1] == doctest::Approx(1.0 - p0).epsilon(1e-12));
  CHECK(r.bundle.probs[0] == doctest::Approx(0.8808).epsilon(1e-4));
}

TEST_CASE("equal logits give the uniform distribution") {
  std::vector<double> logits(5, 3.25);
  auto b = LogitBundle::from_logits(logits);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(b.probs[i] == doctest::Approx(0.2).epsilon(1e-15));
    CHECK(b.uniform[i] == 0.2);
  }
  CHECK(kl_uniform(b) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("probabilities sum to one for random nets and inputs") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::size_t> widths{3, 8, 6, 4};
    auto net = DenseNet::random(widths, {0, 1}, 100 + trial, 0.5);
    auto x = random_input(rng, 3);
    auto r = forward(net, x);
    double s = 0.0;
    for (double p : r.bundle.probs) {
      CHECK(p >= 0.0);
      CHECK(p <= 1.0);
      s += p;
    }
    CHECK(std::abs(s - 1.0) <= 1e-9);
  }
}

TEST_CASE("huge logits stay finite after max subtraction") {
  std::vector<double> logits{1e4, 1e4 - 1.0, -1e4};
  auto b = LogitBundle::from_logits(logits);
  for (double p : b.probs) CHECK(std::isfinite(p));
  bool clamped = false;
  const double kl = kl_uniform(b, &clamped);
  CHECK(clamped);
  CHECK(std::isfinite(kl));
}

TEST_CASE("forward rejects a wrong input width") {
  auto net = identity_net();
  std::vector<float> x{1.0f, 2.0f, 3.0f};
  CHECK_THROWS_AS(forward(net, x), std::invalid_argument);
}

TEST_CASE("network construction enforces layer invariants") {
  DenseLayer a{2, 3, std::vector<float>(6, 0.1f), std::vector<float>(3, 0.0f), Nonlinearity::relu};
  DenseLayer b{3, 2, std::vector<float>(6, 0.1f), std::vector<float>(2, 0.0f),
               Nonlinearity::identity};
  CHECK_NOTHROW(DenseNet({a, b}, {0}));

  DenseLayer wrong_in = b;
  wrong_in.inputs = 4;
  wrong_in.weights.assign(8, 0.1f);
  CHECK_THROWS_AS(DenseNet({a, wrong_in}, {0}), std::invalid_argument);

  DenseLayer relu_logits = b;
  relu_logits.nonlinearity = Nonlinearity::relu;
  CHECK_THROWS_AS(DenseNet({a, relu_logits}, {0}), std::invalid_argument);

  CHECK_THROWS_AS(DenseNet({a, b}, {1}), std::invalid_argument);
  CHECK_THROWS_AS(DenseNet({a, b}, {5}), std::invalid_argument);
}

TEST_CASE("tap names map to layer indices and back") {
  std::vector<std::size_t> widths{2, 4, 4, 3};
  auto net = DenseNet::random(widths, {1, 0}, 1);
  CHECK(net.taps() == std::vector<std::size_t>{0, 1});
  CHECK(DenseNet::tap_name(0) == "layer1");
  CHECK(net.tap_index("layer2") == 1);
  CHECK_THROWS_AS(net.tap_index("layer3"), std::invalid_argument);
  CHECK_THROWS_AS(net.tap_index("bogus"), std::invalid_argument);
}

TEST_CASE("KL to uniform for a two-class distribution") {
  auto b = bundle_from_probs({0.75, 0.25});
  const double expected = 0.5 * std::log(0.5 / 0.75) + 0.5 * std::log(0.5 / 0.25);
  CHECK(kl_uniform(b) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(kl_uniform(b) == doctest::Approx(0.14384).epsilon(1e-4));
}

TEST_CASE("a more peaked four-class distribution diverges more") {
  auto two = bundle_from_probs({0.75, 0.25});
  auto four = bundle_from_probs({0.97, 0.01, 0.01, 0.01});
  double expected = 0.0;
  for (double p : {0.97, 0.01, 0.01, 0.01}) expected += 0.25 * std::log(0.25 / p);
  CHECK(kl_uniform(four) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(kl_uniform(four) > kl_uniform(two));
}

TEST_CASE("KL is non-negative and vanishes only at uniform") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 2.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> logits(2 + trial % 6);
    for (auto& l : logits) l = n(rng);
    auto b = LogitBundle::from_logits(logits);
    const double kl = kl_uniform(b);
    CHECK(kl >= 0.0);
    double maxdev = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      maxdev = std::max(maxdev, std::abs(b.probs[i] - b.uniform[i]));
    }
    if (maxdev > 1e-3) CHECK(kl > 0.0);
  }
}

TEST_CASE("logit gradient is p minus u") {
  SUBCASE("uniform prediction") {
    DenseLayer l{2, 3, std::vector<float>(6, 0.0f), std::vector<float>(3, 0.0f),
                 Nonlinearity::identity};
    DenseNet net({l}, {});
    std::vector<float> x{0.3f, -0.7f};
    auto g = backward_kl(net, x);
    for (double v : g.logit_gradient) CHECK(v == 0.0);
  }
  SUBCASE("two classes at 0.75 / 0.25") {
    DenseLayer l{2, 2, {1.0f, 0.0f, 0.0f, 1.0f}, {0.0f, 0.0f}, Nonlinearity::identity};
    DenseNet net({l}, {});
    const float logit = static_cast<float>(std::log(3.0));
    std::vector<float> x{logit, 0.0f};
    auto g = backward_kl(net, x);
    CHECK(g.logit_gradient[0] == doctest::Approx(0.25).epsilon(1e-7));
    CHECK(g.logit_gradient[1] == doctest::Approx(-0.25).epsilon(1e-7));
  }
}

TEST_CASE("logit gradient matches finite differences of KL") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 2.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> logits(2 + trial % 9);
    for (auto& l : logits) l = n(rng);
    auto b = LogitBundle::from_logits(logits);
    const double eps = 1e-5;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      auto up = logits, down = logits;
      up[i] += eps;
      down[i] -= eps;
      const double fd = (oracle::kl_from_logits(up) - oracle::kl_from_logits(down)) / (2 * eps);
      CHECK(oracle::rel_error(b.probs[i] - b.uniform[i], fd, 1e-8) <= 1e-6);
    }
  }
}

TEST_CASE("tap gradients match finite differences on random nets") {
  std::mt19937_64 rng(5);
  std::size_t checked = 0, skipped = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::size_t> widths{3, 7, 6, 5, 3 + static_cast<std::size_t>(trial % 3)};
    auto net = DenseNet::random(widths, {0, 1, 2}, 500 + trial, 0.3);
    auto x = random_input(rng, 3);
    auto g = backward_kl(net, x);
    for (auto tap : net.taps()) {
      auto z = oracle::activation_at(net, tap, x);
      auto fd = oracle::finite_difference(net, tap, z, 1e-4);
      for (std::size_t i = 0; i < z.size(); ++i) {
        if (!fd.valid[i]) {
          ++skipped;
          continue;
        }
        ++checked;
        CHECK(oracle::rel_error(g.gradients.at(tap)[i], fd.gradient[i], 1e-6) <= 1e-4);
      }
    }
  }
  CHECK(checked > 10 * skipped);
}

TEST_CASE("logit jacobian matches per-class finite differences") {
  std::mt19937_64 rng(9);
  std::vector<std::size_t> widths{2, 6, 5, 3};
  auto net = DenseNet::random(widths, {0, 1}, 77, 0.3);
  auto x = random_input(rng, 2);
  for (std::size_t tap : {0u, 1u}) {
    auto jac = logit_jacobian(net, x, tap);
    auto z = oracle::activation_at(net, tap, x);
    const double eps = 1e-5;
    for (std::size_t i = 0; i < z.size(); ++i) {
      auto up = z, down = z;
      up[i] += eps;
      down[i] -= eps;
      if (oracle::relu_pattern(net, tap, up) != oracle::relu_pattern(net, tap, down)) continue;
      for (std::size_t c = 0; c < net.class_count(); ++c) {
        auto run = [&](const std::vector<double>& v) {
          std::vector<double> h = v;
          for (std::size_t l = tap + 1; l < net.layers().size(); ++l) {
            const auto& L = net.layers()[l];
            std::vector<double> nx(L.outputs);
            for (std::size_t o = 0; o < L.outputs; ++o) {
              double acc = L.biases[o];
              for (std::size_t k = 0; k < L.inputs; ++k) acc += L.weights[o * L.inputs + k] * h[k];
              nx[o] = L.nonlinearity == Nonlinearity::relu ? std::max(acc, 0.0) : acc;
            }
            h = nx;
          }
          return h[c];
        };
        const double fd = (run(up) - run(down)) / (2 * eps);
        CHECK(oracle::rel_error(jac(c, i), fd, 1e-6) <= 1e-5);
      }
    }
  }
}

TEST_CASE("training reaches high accuracy on XOR-style blobs") {
  auto data = xor_blobs(250, 21);
  std::vector<std::size_t> widths{2, 16, 16, 2};
  auto net = DenseNet::random(widths, {1}, 4);
  TrainConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.steps = 2000;
  cfg.seed = 4;
  auto result = train(net, data, cfg);
  CHECK(accuracy(result.net, data.inputs, data.labels) >= 0.99);
  CHECK(result.loss_trace.size() == 2000);
  CHECK(result.loss_trace.back() < result.loss_trace.front());
}

TEST_CASE("zero training steps leave parameters unchanged") {
  auto data = xor_blobs(10, 1);
  std::vector<std::size_t> widths{2, 4, 2};
  auto net = DenseNet::random(widths, {0}, 2);
  TrainConfig cfg;
  cfg.steps = 0;
  auto result = train(net, data, cfg);
  CHECK(result.net == net);
  CHECK(result.loss_trace.empty());
}

TEST_CASE("training is bit-reproducible for a fixed seed") {
  auto data = xor_blobs(50, 3);
  std::vector<std::size_t> widths{2, 8, 2};
  auto net = DenseNet::random(widths, {0}, 3);
  TrainConfig cfg;
  cfg.steps = 300;
  cfg.seed = 99;
  auto a = train(net, data, cfg);
  auto b = train(net, data, cfg);
  CHECK(a.net == b.net);
  CHECK(a.loss_trace == b.loss_trace);
  cfg.seed = 100;
  auto c = train(net, data, cfg);
  CHECK_FALSE(a.net == c.net);
}

TEST_CASE("training config validation") {
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.learning_rate = -1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.learning_rate = 0.1;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.batch_size = 8;
  cfg.entropy.coefficient = -0.5;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("labels outside the class range are rejected") {
  auto data = xor_blobs(5, 1);
  data.labels[0] = 7;
  std::vector<std::size_t> widths{2, 4, 2};
  auto net = DenseNet::random(widths, {0}, 2);
  CHECK_THROWS_AS(train(net, data, TrainConfig{}), std::invalid_argument);
}

TEST_CASE("a diverging run reports the step index") {
  auto data = xor_blobs(20, 1);
  std::vector<std::size_t> widths{2, 8, 2};
  auto net = DenseNet::random(widths, {0}, 2);
  TrainConfig cfg;
  cfg.learning_rate = 1e30;
  cfg.steps = 50;
  try {
    train(net, data, cfg);
    FAIL("expected divergence");
  } catch (const TrainingDiverged& e) {
    CHECK(e.step() >= 1);
    CHECK(std::string(e.what()).find(std::to_string(e.step())) != std::string::npos);
  }
}

TEST_CASE("checkpoint callback fires at the configured interval") {
  auto data = xor_blobs(20, 1);
  std::vector<std::size_t> widths{2, 8, 2};
  auto net = DenseNet::random(widths, {0}, 2);
  TrainConfig cfg;
  cfg.steps = 1000;
  cfg.checkpoint_interval = 300;
  std::vector<std::size_t> steps;
  train(net, data, cfg, nullptr, [&](std::size_t s, const DenseNet&) { steps.push_back(s); });
  CHECK(steps == std::vector<std::size_t>{300, 600, 900});
}

TEST_CASE("checkpoint bytes round-trip exactly") {
  std::vector<std::size_t> widths{3, 5, 4, 2};
  auto net = DenseNet::random(widths, {0, 1}, 12, 0.2);
  auto bytes = encode_checkpoint(net);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "NACW");
  CHECK(decode_checkpoint(bytes) == net);

  auto path = std::filesystem::temp_directory_path() / "nac_test_ckpt.nacw";
  save_checkpoint(net, path);
  CHECK(load_checkpoint(path) == net);
  std::filesystem::remove(path);
}

TEST_CASE("corrupt checkpoints are rejected with a byte offset") {
  std::vector<std::size_t> widths{2, 3, 2};
  auto bytes = encode_checkpoint(DenseNet::random(widths, {0}, 1));
  SUBCASE("bad magic") {
    bytes[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bytes), FormatError);
  }
  SUBCASE("truncated") {
    bytes.resize(bytes.size() - 3);
    try {
      decode_checkpoint(bytes);
      FAIL("expected a format error");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("offset") != std::string::npos);
    }
  }
  SUBCASE("trailing bytes") {
    bytes.push_back(0);
    CHECK_THROWS_AS(decode_checkpoint(bytes), FormatError);
  }
  SUBCASE("unsupported version") {
    bytes[4] = 9;
    CHECK_THROWS_AS(decode_checkpoint(bytes), FormatError);
  }
}
