#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "calsam/losses.hpp"
#include "support.hpp"

using namespace calsam;
using calsam::testing::decoder_gradient_error;
using calsam::testing::make_decoder_case;
using calsam::testing::random_values;

namespace {

ad::Tensor vol(std::vector<double> v) {
  const std::size_t n = v.size();
  return ad::Tensor({1, 1, 1, 1, n}, std::move(v));
}

std::vector<double> random_labels(std::size_t n, std::mt19937_64& rng) {
  std::bernoulli_distribution b(0.4);
  std::vector<double> v(n);
  for (auto& x : v) x = b(rng) ? 1.0 : 0.0;
  return v;
}

// Direct loops, no tensors.
double bce_oracle(const std::vector<double>& p, const std::vector<double>& m) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], 1e-12, 1.0 - 1e-12);
    s += -(m[i] * std::log(q) + (1.0 - m[i]) * std::log(1.0 - q));
  }
  return s / static_cast<double>(p.size());
}

double dice_oracle(const std::vector<double>& p, const std::vector<double>& m) {
  double inter = 0.0, sp = 0.0, sm = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * m[i];
    sp += p[i];
    sm += m[i];
  }
  return 1.0 - (2.0 * inter + 1e-6) / (sp + sm + 1e-6);
}

double focal_oracle(const std::vector<double>& p, const std::vector<double>& m, double focus) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pt = std::clamp(m[i] > 0.5 ? p[i] : 1.0 - p[i], 1e-12, 1.0 - 1e-12);
    s += -std::pow(1.0 - pt, focus) * std::log(pt);
  }
  return s / static_cast<double>(p.size());
}

ad::Tensor loss_sam(const ad::Tensor& p, const ad::Tensor&, const ad::Tensor&, const ad::Tensor& t) {
  return sam_loss(p, t);
}

}  // namespace

TEST(Dice, PerfectAndDisjoint) {
  const auto m = vol({1, 0, 1, 1, 0, 0, 1, 0});
  EXPECT_LT(dice_loss(m, m).item(), 1e-5);
  const auto other = vol({0, 1, 0, 0, 1, 1, 0, 1});
  EXPECT_NEAR(dice_loss(other, m).item(), 1.0, 1e-5);
}

TEST(Dice, HalfProbabilityClosedForm) {
  const auto m = vol({1, 1, 1, 1, 0, 0, 0, 0});
  const auto p = ad::Tensor::full(m.shape(), 0.5);
  EXPECT_NEAR(dice_loss(p, m).item(), 0.5, 1e-6);
  EXPECT_NEAR(dice_loss(p, m).item(), dice_oracle(p.to_vector(), m.to_vector()), 1e-15);
}

TEST(Dice, RejectsShapeMismatch) {
  EXPECT_THROW(dice_loss(ad::Tensor::zeros({1, 1, 2, 2, 2}), ad::Tensor::zeros({1, 1, 2, 2, 1})),
               std::invalid_argument);
}

TEST(Bce, ClosedForms) {
  const auto m = vol({1, 0, 1, 0});
  EXPECT_LE(bce_loss(m, m).item(), 1e-11);
  EXPECT_NEAR(bce_loss(ad::Tensor::full(m.shape(), 0.5), m).item(), std::log(2.0), 1e-15);
}

TEST(Bce, MatchesDirectSummation) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = random_values(8, rng, 0.0, 1.0);
    const auto m = random_labels(8, rng);
    EXPECT_NEAR(bce_loss(vol(p), vol(m)).item(), bce_oracle(p, m), 1e-12);
    EXPECT_NEAR(bce_loss(vol(p), vol(m), Reduction::sum).item(), 8.0 * bce_oracle(p, m), 1e-11);
  }
}

TEST(SamLoss, IsSumOfParts) {
  std::mt19937_64 rng(9);
  const auto p = random_values(8, rng, 0.0, 1.0);
  const auto m = random_labels(8, rng);
  EXPECT_NEAR(sam_loss(vol(p), vol(m)).item(), dice_oracle(p, m) + bce_oracle(p, m), 1e-12);
  const auto perfect = vol({1, 0, 0, 1});
  EXPECT_LT(sam_loss(perfect, perfect).item(), 1e-5);
  EXPECT_EQ(sam_loss(perfect, perfect).item(), dice_loss(perfect, perfect).item() + bce_loss(perfect, perfect).item());
}

TEST(Losses, PermutationInvariant) {
  std::mt19937_64 rng(10);
  auto p = random_values(27, rng, 0.0, 1.0);
  auto m = random_labels(27, rng);
  const double dice = dice_loss(vol(p), vol(m)).item();
  const double bce = bce_loss(vol(p), vol(m)).item();
  std::vector<std::size_t> perm(27);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<double> pp(27), mm(27);
  for (std::size_t i = 0; i < 27; ++i) {
    pp[i] = p[perm[i]];
    mm[i] = m[perm[i]];
  }
  EXPECT_NEAR(dice_loss(vol(pp), vol(mm)).item(), dice, 1e-12);
  EXPECT_NEAR(bce_loss(vol(pp), vol(mm)).item(), bce, 1e-12);
}

TEST(Fip, SingleScalarClosedForm) {
  // Identity decoder on a one-element feature map; logit 0 gives p = 0.5.
  ad::Graph g;
  const auto z = g.leaf(ad::Tensor({1, 1, 1, 1, 1}, {0.0}));
  const auto truth = ad::Tensor::ones({1, 1, 1, 1, 1});
  EXPECT_NEAR(fip_penalty(z, z, truth).item(), 0.125, 1e-15);
  // A decoder gain of 3 triples the feature gradient.
  const auto scaled = fip_penalty(z, ad::scale(z, 3.0), truth);
  EXPECT_NEAR(scaled.item(), 9.0 * 0.125, 1e-14);
}

TEST(Fip, InnerLossScaleGivesSquare) {
  const auto c = make_decoder_case(41, 8);
  ad::Graph g;
  const auto z = g.leaf(c.z);
  const auto logits = decode(z, c.phi, c.cfg);
  const double base = fip_penalty(z, logits, c.truth).item();
  const auto gz = g.gradient(fip_inner_loss(logits, c.truth, InnerLoss::cross_entropy), {z}, true)[0];
  const auto scaled = g.gradient(ad::scale(fip_inner_loss(logits, c.truth, InnerLoss::cross_entropy), 2.5), {z},
                                 true)[0];
  EXPECT_NEAR(0.5 * ad::sum_squares(scaled).item(), 6.25 * 0.5 * ad::sum_squares(gz).item(), 1e-12);
  EXPECT_NEAR(base, 0.5 * ad::sum_squares(gz).item(), 1e-15);
}

TEST(Fip, RejectsNonLeafFeatures) {
  const auto c = make_decoder_case(42, 8);
  ad::Graph g;
  const auto z = g.leaf(c.z);
  const auto z2 = ad::scale(z, 1.0);
  EXPECT_THROW(fip_penalty(z2, decode(z2, c.phi, c.cfg), c.truth), std::invalid_argument);
  EXPECT_THROW(fip_penalty(c.z, decode(c.z, c.phi, c.cfg), c.truth), std::invalid_argument);
}

TEST(Fip, MatchesOuterProductTrace) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (auto inner : {InnerLoss::cross_entropy, InnerLoss::dice}) {
      const auto c = make_decoder_case(100 + seed, 8, 2);
      ad::Graph g;
      const auto z = g.leaf(c.z);
      const auto logits = decode(z, c.phi, c.cfg);
      const double fip = fip_penalty(z, logits, c.truth, inner).item();
      const auto gz = g.gradient(fip_inner_loss(logits, c.truth, inner), {z}, false)[0].to_vector();
      const std::size_t per = gz.size() / 2;
      double acc = 0.0;
      for (std::size_t b = 0; b < 2; ++b) {
        acc += 0.5 * fisher_trace_oracle(std::span<const double>(gz).subspan(b * per, per));
      }
      EXPECT_NEAR(fip, acc / 2.0, 1e-10);
    }
  }
}

TEST(Fip, ModelIgnoringFeaturesGivesZero) {
  const auto c = make_decoder_case(43, 8);
  ad::Graph g;
  const auto z = g.leaf(c.z);
  const auto phi = g.leaf(ad::Tensor::zeros({1}));
  const auto logits = ad::broadcast_to(ad::reshape(phi, {1, 1, 1, 1, 1}), c.truth.shape());
  EXPECT_EQ(fip_penalty(z, logits, c.truth).item(), 0.0);
}

TEST(FisherOracle, TraceOfOuterProduct) {
  const std::vector<double> g{3.0, 4.0};
  EXPECT_EQ(fisher_trace_oracle(g), 25.0);
  EXPECT_EQ(fisher_trace_oracle(std::vector<double>(5, 0.0)), 0.0);
  std::mt19937_64 rng(12);
  const auto r = random_values(64, rng);
  double sq = 0.0;
  for (double v : r) sq += v * v;
  EXPECT_NEAR(fisher_trace_oracle(r), sq, 1e-12);
}

TEST(Cmp, SurrogateValues) {
  const double tau = std::log(2.0);
  // logit 0 on a positive voxel: CE = ln 2 = tau.
  EXPECT_DOUBLE_EQ(cmp_penalty(vol({0.0}), vol({1.0}), tau, 0.1).item(), 0.5);
  // Confident correct: CE -> 0.
  EXPECT_NEAR(cmp_penalty(vol({40.0}), vol({1.0}), tau, 0.1).item(), 0.0009756097560975618, 1e-12);
  // p = 0.01 on the true class: CE = 4.605.
  const double logit = std::log(0.01 / 0.99);
  EXPECT_GT(cmp_penalty(vol({logit}), vol({1.0}), tau, 0.1).item(), 1.0 - 1e-12);
}

TEST(Cmp, MonotoneInCrossEntropy) {
  std::vector<double> logits;
  for (int i = 0; i <= 200; ++i) logits.push_back(8.0 - 0.08 * i);  // CE increasing for truth 1
  double prev = -1.0;
  for (double s : logits) {
    const double v = cmp_penalty(vol({s}), vol({1.0})).item();
    EXPECT_GE(v, prev);
    prev = v;
  }
}

TEST(Cmp, RejectsNonPositiveGamma) {
  EXPECT_THROW(cmp_penalty(vol({0.0}), vol({1.0}), 0.7, 0.0), std::invalid_argument);
  EXPECT_THROW(cmp_penalty(vol({0.0}), vol({1.0}), 0.7, -1.0), std::invalid_argument);
}

TEST(Focal, ReducesToBceAndMatchesOracle) {
  std::mt19937_64 rng(13);
  const auto p = random_values(8, rng, 0.0, 1.0);
  const auto m = random_labels(8, rng);
  EXPECT_EQ(focal_loss(vol(p), vol(m), 0.0).item(), bce_loss(vol(p), vol(m)).item());
  EXPECT_NEAR(focal_loss(vol(p), vol(m), 2.0).item(), focal_oracle(p, m, 2.0), 1e-12);
  // p_t = 1 is clamped to 1 - 1e-12, leaving a (1e-12)^2 residue.
  EXPECT_LT(focal_loss(vol({1.0, 0.0}), vol({1.0, 0.0})).item(), 1e-30);
  EXPECT_THROW(focal_loss(vol(p), vol(m), -1.0), std::invalid_argument);
}

TEST(CalsamLoss, DegenerateWeightsAndBreakdown) {
  const auto c = make_decoder_case(44, 8);
  ad::Graph g;
  const auto z = g.leaf(c.z);
  const auto logits = decode(z, c.phi, c.cfg);
  const auto probs = ad::sigmoid(logits);
  LossWeights off;
  off.lambda1 = off.lambda2 = 0.0;
  const auto zero = calsam_loss(probs, logits, z, c.truth, off);
  EXPECT_EQ(zero.total.item(), sam_loss(probs, c.truth).item());
  EXPECT_FALSE(zero.fip.has_value());

  const LossWeights w;
  EXPECT_EQ(w.lambda1, 0.3);
  EXPECT_EQ(w.lambda2, 0.5);
  const auto full = calsam_loss(probs, logits, z, c.truth, w);
  ASSERT_TRUE(full.fip && full.cmp);
  EXPECT_NEAR(full.total.item(), full.sam.item() + 0.3 * full.fip->item() + 0.5 * full.cmp->item(), 1e-12);

  LossWeights bad;
  bad.gamma = 0.0;
  EXPECT_THROW(calsam_loss(probs, logits, z, c.truth, bad), std::invalid_argument);
}

TEST(LossGradients, MatchFiniteDifferences) {
  const std::vector<std::pair<const char*, calsam::testing::DecoderLoss>> losses{
      {"dice", [](auto& p, auto&, auto&, auto& t) { return dice_loss(p, t); }},
      {"bce", [](auto& p, auto&, auto&, auto& t) { return bce_loss(p, t); }},
      {"sam", loss_sam},
      {"focal", [](auto& p, auto&, auto&, auto& t) { return focal_loss(p, t); }},
      {"cmp", [](auto&, auto& s, auto&, auto& t) { return cmp_penalty(s, t); }},
      {"fip", [](auto&, auto& s, auto& z, auto& t) { return fip_penalty(z, s, t); }},
      {"fip-dice", [](auto&, auto& s, auto& z, auto& t) { return fip_penalty(z, s, t, InnerLoss::dice); }},
      {"calsam", [](auto& p, auto& s, auto& z, auto& t) { return calsam_loss(p, s, z, t, LossWeights{}).total; }},
  };
  for (const auto& [name, fn] : losses) {
    for (std::uint64_t seed : {1u, 2u}) {
      const auto c = make_decoder_case(500 + seed, seed == 1 ? 4 : 8);
      EXPECT_LT(decoder_gradient_error(c, fn, 1e-5), 1e-5) << name << " seed " << seed;
    }
  }
}

TEST(InnerLossNames, RoundTrip) {
  EXPECT_EQ(parse_inner_loss(to_string(InnerLoss::dice)), InnerLoss::dice);
  EXPECT_EQ(parse_inner_loss("cross-entropy"), InnerLoss::cross_entropy);
  EXPECT_THROW(parse_inner_loss("kl"), std::invalid_argument);
}
