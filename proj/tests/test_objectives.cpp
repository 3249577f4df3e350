#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <vector>

#include "cmdret/errors.hpp"
#include "cmdret/model_config.hpp"
#include "cmdret/numerics/gradcheck.hpp"
#include "cmdret/objectives.hpp"
#include "test_util.hpp"

using namespace cmdret;
using test::random_tensor;

namespace {

Tensor unit_rows(Tensor t) {
  for (std::size_t i = 0; i < t.rows(); ++i) {
    double n = 0.0;
    for (double v : t.row(i)) n += v * v;
    for (double& v : t.row(i)) v /= std::sqrt(n);
  }
  return t;
}

std::vector<std::int64_t> random_labels(std::size_t b, Rng& rng) {
  std::vector<std::int64_t> labels(b);
  for (auto& l : labels) l = static_cast<std::int64_t>(rng.below(b));
  return labels;
}

// Direct definition: p = exp(s/τ)/Σexp(s/τ) per row, H = −Σ y log p / B.
double brute_direction(const Tensor& s, const Tensor& other, double tau, const std::vector<std::int64_t>& labels,
                       bool transpose) {
  const std::size_t b = labels.size();
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<double> logits(b);
    double mx = -1e300;
    for (std::size_t j = 0; j < b; ++j) {
      const std::size_t q = transpose ? j : i, g = transpose ? i : j;
      double d = 0.0;
      for (std::size_t k = 0; k < s.cols(); ++k) d += s(q, k) * other(g, k);
      logits[j] = d / tau;
      mx = std::max(mx, logits[j]);
    }
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    std::size_t n = 0;
    for (std::size_t j = 0; j < b; ++j) n += labels[j] == labels[i];
    for (std::size_t j = 0; j < b; ++j)
      if (labels[j] == labels[i]) total -= (1.0 / n) * (logits[j] - mx - std::log(z));
  }
  return total / b;
}

double brute_loss(const Tensor& s, const Tensor& img, double tau, const std::vector<std::int64_t>& labels) {
  return 0.5 * (brute_direction(s, img, tau, labels, false) + brute_direction(s, img, tau, labels, true));
}

double var_loss(const Tensor& s, const Tensor& img, double tau, const std::vector<std::int64_t>& labels,
                bool cmd = false) {
  Tape tape;
  Var scale = tape.constant(Tensor::scalar(1.0 / tau));
  Var sv = tape.constant(s), iv = tape.constant(img);
  return (cmd ? cmd_loss(sv, iv, scale, labels) : sic_loss(sv, iv, scale, labels)).value().item();
}

}  // namespace

TEST(Targets, MultiPositiveRows) {
  const std::vector<std::int64_t> labels{7, 7, 3, 9};
  const Tensor y = build_targets(labels, Direction::speech_to_image);
  EXPECT_EQ(y(0, 0), 0.5);
  EXPECT_EQ(y(0, 1), 0.5);
  EXPECT_EQ(y(1, 0), 0.5);
  EXPECT_EQ(y(1, 1), 0.5);
  EXPECT_EQ(y(2, 2), 1.0);
  EXPECT_EQ(y(3, 3), 1.0);
  EXPECT_EQ(y(0, 2), 0.0);
  EXPECT_THROW(build_targets(std::vector<std::int64_t>{}, Direction::speech_to_image), ContractError);
}

TEST(Targets, RowsSumToOneOnRandomLabels) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const auto labels = random_labels(1 + rng.below(12), rng);
    for (auto dir : {Direction::speech_to_image, Direction::image_to_speech}) {
      const Tensor y = build_targets(labels, dir);
      for (std::size_t i = 0; i < y.rows(); ++i) {
        double s = 0.0;
        for (double v : y.row(i)) s += v;
        ASSERT_NEAR(s, 1.0, 1e-12);
        ASSERT_GT(y(i, i), 0.0);
      }
    }
  }
}

TEST(SimilarityProbs, MatchesBruteForceAndTransposes) {
  Rng rng(2);
  const Tensor sim = random_tensor(Shape{4, 4}, rng);
  const double tau = 0.3;
  const Tensor p = similarity_probs(sim, tau, Direction::speech_to_image);
  const Tensor q = similarity_probs(sim, tau, Direction::image_to_speech);
  for (std::size_t i = 0; i < 4; ++i) {
    double zp = 0.0, zq = 0.0;
    for (std::size_t j = 0; j < 4; ++j) {
      zp += std::exp(sim(i, j) / tau);
      zq += std::exp(sim(j, i) / tau);
    }
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_NEAR(p(i, j), std::exp(sim(i, j) / tau) / zp, 1e-15);
      EXPECT_NEAR(q(i, j), std::exp(sim(j, i) / tau) / zq, 1e-15);
    }
  }
  EXPECT_THROW(similarity_probs(sim, 0.0, Direction::speech_to_image), ConfigError);
  Tensor bad = sim;
  bad(1, 1) = std::nan("");
  EXPECT_THROW(similarity_probs(bad, 0.1, Direction::speech_to_image), DataError);
}

TEST(ContrastiveLoss, MatchesBruteForceOnRandomInstances) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t b = 3 + rng.below(6), e = 2 + rng.below(6);
    const Tensor s = unit_rows(random_tensor(Shape{b, e}, rng));
    const Tensor img = unit_rows(random_tensor(Shape{b, e}, rng));
    const double tau = 0.02 + 0.5 * rng.uniform();
    const auto labels = random_labels(b, rng);
    const double brute = brute_loss(s, img, tau, labels);
    ASSERT_NEAR(var_loss(s, img, tau, labels), brute, 1e-12);
    ASSERT_NEAR(var_loss(s, img, tau, labels, true), brute, 1e-12);

    Tape tape;
    const Tensor sim = similarity_matrix(tape.constant(s), tape.constant(img)).value();
    const Tensor y_s2i = build_targets(labels, Direction::speech_to_image);
    const Tensor y_i2s = build_targets(labels, Direction::image_to_speech);
    const double from_probs = contrastive_loss(similarity_probs(sim, tau, Direction::speech_to_image),
                                               similarity_probs(sim, tau, Direction::image_to_speech), y_s2i, y_i2s);
    ASSERT_NEAR(from_probs, brute, 1e-12);
  }
}

TEST(ContrastiveLoss, UniformLogitsGiveLogB) {
  for (std::size_t b = 2; b <= 16; ++b) {
    const Tensor ones(Shape{b, 3}, 1.0 / std::sqrt(3.0));
    std::vector<std::int64_t> labels(b);
    for (std::size_t i = 0; i < b; ++i) labels[i] = static_cast<std::int64_t>(i);
    EXPECT_NEAR(var_loss(ones, ones, 0.07, labels), std::log(static_cast<double>(b)), 1e-12);
  }
}

TEST(ContrastiveLoss, PerfectAlignmentApproachesZero) {
  const Tensor eye = Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  const std::vector<std::int64_t> labels{0, 1, 2};
  EXPECT_LT(var_loss(eye, eye, 0.01, labels), 1e-40);
  EXPECT_GT(var_loss(eye, eye, 10.0, labels), 1.0);
}

TEST(ContrastiveLoss, LargeLogitsStayFinite) {
  Rng rng(4);
  const Tensor s = unit_rows(random_tensor(Shape{5, 4}, rng));
  const Tensor img = unit_rows(random_tensor(Shape{5, 4}, rng));
  const std::vector<std::int64_t> labels{0, 1, 2, 3, 4};
  const double v = var_loss(s, img, 1e-4, labels);
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, brute_loss(s, img, 1e-4, labels), 1e-9 * std::abs(v));
}

TEST(LogitScale, ExponentAndClamp) {
  ModelConfig cfg;
  Tape tape;
  Var lt = tape.constant(Tensor::scalar(std::log(0.07)));
  EXPECT_NEAR(logit_scale(lt, cfg).value().item(), 1.0 / 0.07, 1e-12);
  Var tiny = tape.constant(Tensor::scalar(std::log(1e-3)));
  EXPECT_NEAR(logit_scale(tiny, cfg).value().item(), 1000.0, 1e-9);
  cfg.clamp_logit_scale = true;
  EXPECT_EQ(logit_scale(tiny, cfg).value().item(), 100.0);
  EXPECT_NEAR(logit_scale(lt, cfg).value().item(), 1.0 / 0.07, 1e-12);
}

TEST(TotalLoss, AlphaWeighting) {
  EXPECT_EQ(total_loss(1.5, 2.0, 0.0), 1.5);
  EXPECT_EQ(total_loss(1.5, 2.0, 0.5), 2.5);
  EXPECT_THROW(total_loss(1.0, 1.0, -0.1), ConfigError);
  Tape tape;
  Var a = tape.leaf(Tensor::scalar(1.0)), b = tape.leaf(Tensor::scalar(2.0));
  tape.backward(total_loss(a, b, 0.25));
  EXPECT_EQ(tape.grad(a).item(), 1.0);
  EXPECT_EQ(tape.grad(b).item(), 0.25);
}

TEST(ContrastiveLoss, GradientsMatchFiniteDifferences) {
  Rng rng(5);
  ParamStore params;
  params.add("speech", random_tensor(Shape{5, 4}, rng), ParamGroup::encoder, false);
  params.add("image", random_tensor(Shape{5, 4}, rng), ParamGroup::fusion, false);
  params.add(names::log_tau, Tensor::scalar(std::log(0.2)), ParamGroup::temperature, false);
  const std::vector<std::int64_t> labels{0, 0, 1, 2, 2};
  for (bool clamp : {false, true}) {
    ModelConfig cfg;
    cfg.clamp_logit_scale = clamp;
    cfg.max_logit_scale = 100.0;
    const Objective f = [&](Tape&, const Binding& p) {
      return sic_loss(ops::l2_normalize_rows(p["speech"]), ops::l2_normalize_rows(p["image"]),
                      logit_scale(p[names::log_tau], cfg), labels);
    };
    const GradCheckReport rep = finite_diff_check(f, params);
    EXPECT_TRUE(rep.passed()) << rep.summary();
  }
}
