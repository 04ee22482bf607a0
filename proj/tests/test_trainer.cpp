#include <gtest/gtest.h>

#include <cstring>

#include "calsam/trainer.hpp"
#include "support.hpp"

using namespace calsam;

namespace {

std::vector<Example> tiny_examples(std::size_t n, const Extents& dims, std::uint64_t seed = 5) {
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    const DomainTag dom{Vendor::A, static_cast<int>(i % 2), Corruption::none, 0};
    out.push_back(prepare_example("s" + std::to_string(i), synth::generate_sample(seed + i, dims, dom), true));
  }
  return out;
}

Batch first_batch(const std::vector<Example>& data, std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return make_batch(data, idx);
}

std::vector<double> theta_bytes(const ParamStore& p) {
  std::vector<double> out;
  for (const auto& t : p.theta()) {
    const auto v = t.value.values();
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

double max_abs_diff(const ParamStore& a, const ParamStore& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.phi().size(); ++i) {
    const auto x = a.phi()[i].value.values(), y = b.phi()[i].value.values();
    for (std::size_t k = 0; k < x.size(); ++k) worst = std::max(worst, std::abs(x[k] - y[k]));
  }
  return worst;
}

}  // namespace

TEST(CosineLr, Endpoints) {
  EXPECT_EQ(cosine_lr(0, 100, 1e-4), 1e-4);
  EXPECT_EQ(cosine_lr(100, 100, 1e-4), 0.0);
  EXPECT_NEAR(cosine_lr(50, 100, 1e-4), 5e-5, 1e-20);
  for (std::size_t s = 1; s <= 100; ++s) EXPECT_LE(cosine_lr(s, 100, 1.0), cosine_lr(s - 1, 100, 1.0));
  EXPECT_THROW(cosine_lr(101, 100, 1e-4), std::out_of_range);
  EXPECT_THROW(cosine_lr(0, 0, 1e-4), std::invalid_argument);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.lr0 = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.epochs = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.clip_norm = -1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_EQ(parse_ablation("cmp-only"), Ablation::cmp_only);
  EXPECT_THROW(parse_ablation("calSAM"), std::invalid_argument);
}

TEST(TrainConfig, AblationZeroesWeights) {
  TrainConfig c;
  c.ablation = Ablation::sam_ft;
  EXPECT_EQ(effective_weights(c).lambda1, 0.0);
  EXPECT_EQ(effective_weights(c).lambda2, 0.0);
  c.ablation = Ablation::fip_only;
  EXPECT_EQ(effective_weights(c).lambda1, 0.3);
  EXPECT_EQ(effective_weights(c).lambda2, 0.0);
  c.ablation = Ablation::cmp_only;
  EXPECT_EQ(effective_weights(c).lambda1, 0.0);
  EXPECT_EQ(effective_weights(c).lambda2, 0.5);
  c.ablation = Ablation::calsam;
  EXPECT_EQ(effective_weights(c).lambda1, 0.3);
  EXPECT_EQ(effective_weights(c).lambda2, 0.5);
}

TEST(Adam, FirstStepIsSignedLearningRate) {
  Adam opt(0.9, 0.999, 1e-8);
  const std::vector<ad::Tensor> p{ad::Tensor({3}, {1.0, 2.0, 3.0})};
  const std::vector<ad::Tensor> g{ad::Tensor({3}, {0.5, -2.0, 0.0})};
  const auto next = opt.update(p, g, 0.1);
  EXPECT_NEAR(next[0].values()[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_NEAR(next[0].values()[1], 2.0 + 0.1 * 2.0 / (2.0 + 1e-8), 1e-15);
  EXPECT_EQ(next[0].values()[2], 3.0);
  EXPECT_EQ(opt.steps(), 1u);
  EXPECT_THROW(opt.update(p, {}, 0.1), std::invalid_argument);
}

TEST(TrainStep, DegenerateWeightsMatchPlainStep) {
  const auto data = tiny_examples(2, {16, 16, 16});
  const Batch b = first_batch(data, 2);
  TrainConfig cfg;
  cfg.weights.lambda1 = 0.0;
  cfg.weights.lambda2 = 0.0;
  const ModelConfig mcfg = cfg.model();
  ParamStore ours = init_params(mcfg, 9);
  const ParamStore start = ours;
  Adam opt(cfg.beta1, cfg.beta2, cfg.adam_eps);
  train_step(b, ours, cfg, opt, 0.01);

  // Reference: Dice + BCE gradient, then one hand-written Adam step.
  ad::Graph g;
  const auto z = encode(b.x, start, mcfg);
  std::vector<ad::Tensor> phi;
  for (const auto& p : start.phi()) phi.push_back(g.leaf(p.value));
  const auto probs = ad::sigmoid(decode(z, phi, mcfg));
  const auto loss = ad::add(dice_loss(probs, b.truth), bce_loss(probs, b.truth));
  const auto grads = g.gradient(loss, phi, false);
  double worst = 0.0;
  for (std::size_t i = 0; i < phi.size(); ++i) {
    const auto p0 = start.phi()[i].value.values();
    const auto gr = grads[i].values();
    const auto p1 = ours.phi()[i].value.values();
    for (std::size_t k = 0; k < p0.size(); ++k) {
      const double m = 0.1 * gr[k], v = 0.001 * gr[k] * gr[k];
      const double ref = p0[k] - 0.01 * (m / 0.1) / (std::sqrt(v / 0.001) + 1e-8);
      worst = std::max(worst, std::abs(ref - p1[k]));
    }
  }
  EXPECT_LE(worst, 1e-15);
}

TEST(TrainStep, EncoderStaysByteIdentical) {
  const auto data = tiny_examples(2, {16, 16, 16});
  TrainConfig cfg;
  ParamStore p = init_params(cfg.model(), 3);
  const auto before = theta_bytes(p);
  Adam opt(cfg.beta1, cfg.beta2, cfg.adam_eps);
  for (int s = 0; s < 3; ++s) train_step(first_batch(data, 2), p, cfg, opt, 0.05);
  const auto after = theta_bytes(p);
  ASSERT_EQ(before.size(), after.size());
  EXPECT_EQ(std::memcmp(before.data(), after.data(), before.size() * sizeof(double)), 0);
}

TEST(TrainStep, LossDecreasesOnOneSmallBatch) {
  const auto data = tiny_examples(2, {8, 8, 8}, 77);
  const Batch b = first_batch(data, 2);
  TrainConfig cfg;
  cfg.ablation = Ablation::calsam;
  ParamStore p = init_params(cfg.model(), 42);
  Adam opt(cfg.beta1, cfg.beta2, cfg.adam_eps);
  double first = 0.0, last = 0.0;
  for (int s = 0; s < 50; ++s) {
    const auto r = train_step(b, p, cfg, opt, cfg.lr0);
    if (s == 0) first = r.loss.total;
    last = r.loss.total;
  }
  EXPECT_LT(last, first);
}

TEST(TrainStep, AblationsNestInsideCalsam) {
  const auto data = tiny_examples(2, {16, 16, 16});
  const Batch b = first_batch(data, 2);
  TrainConfig cfg;
  const ModelConfig mcfg = cfg.model();
  const ParamStore p = init_params(mcfg, 11);
  for (auto [ablation, zero_fip] : {std::pair{Ablation::fip_only, false}, std::pair{Ablation::cmp_only, true}}) {
    TrainConfig ab = cfg;
    ab.ablation = ablation;
    LossWeights w = cfg.weights;
    (zero_fip ? w.lambda1 : w.lambda2) = 0.0;
    const auto a = loss_and_gradients(b, p, mcfg, effective_weights(ab), ablation);
    const auto c = loss_and_gradients(b, p, mcfg, w, Ablation::calsam);
    for (std::size_t i = 0; i < a.grads.size(); ++i) {
      const auto x = a.grads[i].values(), y = c.grads[i].values();
      for (std::size_t k = 0; k < x.size(); ++k) ASSERT_NEAR(x[k], y[k], 1e-12) << to_string(ablation);
    }
  }
}

TEST(TrainStep, ComponentsAddUpEveryStep) {
  const auto data = tiny_examples(4, {16, 16, 16});
  Dataset d;
  d.train = data;
  TrainConfig cfg;
  cfg.epochs = 2;
  const auto rec = run_experiment(cfg, d);
  ASSERT_EQ(rec.steps.size(), 4u);
  const auto w = effective_weights(cfg);
  for (const auto& s : rec.steps) {
    EXPECT_GT(s.fip, 0.0);
    EXPECT_GT(s.cmp, 0.0);
    EXPECT_NEAR(s.total, s.sam + w.lambda1 * s.fip + w.lambda2 * s.cmp, 1e-12);
  }
}

TEST(TrainStep, NonFiniteLossNamesComponent) {
  auto data = tiny_examples(1, {8, 8, 8});
  auto v = data[0].truth.to_vector();
  v[0] = std::numeric_limits<double>::quiet_NaN();
  data[0].truth = ad::Tensor(data[0].truth.shape(), v);
  TrainConfig cfg;
  ParamStore p = init_params(cfg.model(), 1);
  Adam opt(cfg.beta1, cfg.beta2, cfg.adam_eps);
  try {
    train_step(first_batch(data, 1), p, cfg, opt, 0.01);
    FAIL() << "expected NonFiniteLoss";
  } catch (const NonFiniteLoss& e) {
    EXPECT_EQ(e.component(), "sam");
  }
}

TEST(TrainStep, ClippingBoundsTheUpdateNorm) {
  const auto data = tiny_examples(2, {16, 16, 16});
  TrainConfig cfg;
  cfg.clip_norm = 1e-6;
  ParamStore p = init_params(cfg.model(), 2);
  Adam opt(cfg.beta1, cfg.beta2, cfg.adam_eps);
  const auto r = train_step(first_batch(data, 2), p, cfg, opt, 0.01);
  EXPECT_TRUE(r.clipped);
  EXPECT_GT(r.grad_norm, 1e-6);
}

TEST(TrainStep, DetachedFeaturesGiveEncoderNoGradient) {
  // Encoder recorded against theta leaves; the feature penalty is taken
  // once on the attached output and once on a detached, re-leafed copy.
  const auto data = tiny_examples(1, {8, 8, 8});
  const Batch b = first_batch(data, 1);
  ModelConfig mcfg;
  const ParamStore p = init_params(mcfg, 4);
  auto theta_grad = [&](bool detach) {
    ad::Graph g;
    std::vector<ad::Tensor> th;
    for (const auto& t : p.theta()) th.push_back(g.leaf(t.value));
    ad::Tensor z = detail::add_channel_bias(ad::conv3d(b.x, th[0], mcfg.patch, 0), th[1]);
    z = ad::relu(detail::add_channel_bias(ad::conv3d(z, th[2], 1, 1), th[3]));
    z = ad::relu(detail::add_channel_bias(ad::conv3d(z, th[4], 1, 1), th[5]));
    if (detach) z = g.leaf(z.detach());
    const auto logits = decode(z, p.phi_values(), mcfg);
    const auto inner = fip_inner_loss(logits, b.truth, InnerLoss::cross_entropy);
    const auto gz = g.gradient(inner, {z}, true)[0];
    const auto fip = ad::scale(ad::sum_squares(gz), 0.5);
    double s = 0.0;
    for (const auto& gr : g.gradient(fip, th, false))
      for (double v : gr.values()) s += std::abs(v);
    return s;
  };
  EXPECT_EQ(theta_grad(true), 0.0);
  EXPECT_GT(theta_grad(false), 0.0);
}

TEST(RunExperiment, SameConfigSameMetrics) {
  const Extents dims{16, 16, 16};
  Dataset d;
  d.train = tiny_examples(4, dims);
  d.eval.emplace_back(synth::Role::target, tiny_examples(2, dims, 90));
  TrainConfig cfg;
  cfg.epochs = 2;
  const auto a = run_experiment(cfg, d), b = run_experiment(cfg, d);
  ASSERT_EQ(a.steps.size(), b.steps.size());
  for (std::size_t i = 0; i < a.steps.size(); ++i) EXPECT_EQ(a.steps[i].total, b.steps[i].total);
  const auto &ra = a.splits[0].rows, &rb = b.splits[0].rows;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    EXPECT_EQ(ra[i].dsc, rb[i].dsc);
    EXPECT_EQ(ra[i].ece, rb[i].ece);
    EXPECT_EQ(ra[i].brier, rb[i].brier);
  }
  EXPECT_EQ(max_abs_diff(a.params, b.params), 0.0);
  cfg.seed = 43;
  EXPECT_GT(max_abs_diff(a.params, run_experiment(cfg, d).params), 0.0);
}

TEST(Overhead, IdenticalConfigsRunEquallyFast) {
  const auto data = tiny_examples(2, {16, 16, 16});
  TrainConfig cfg;
  cfg.ablation = Ablation::sam_ft;
  const auto r = measure_overhead(cfg, cfg, data, 100, 10);
  EXPECT_EQ(r.steps, 100u);
  EXPECT_NEAR(r.ratio, 1.0, 0.05);
  EXPECT_THROW(measure_overhead(cfg, cfg, data, 0, 10), std::invalid_argument);
}

TEST(Median, OddAndEven) {
  EXPECT_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(median({4.0, 1.0, 2.0, 3.0}), 2.5);
  EXPECT_THROW(median({}), std::invalid_argument);
}
