#include <gtest/gtest.h>

#include <random>

#include "gradient_check.hpp"
#include "pointca/attack.hpp"
#include "test_support.hpp"
#include "toy_fixture.hpp"

using namespace pointca;

namespace {

Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return Errc::InvalidConfig;
}

AttackConfig quick_config(std::size_t iterations = 30) {
  auto c = attack_preset("toy", AttackMode::geometry);
  c.iterations = iterations;
  c.seed = 3;
  return c;
}

double budget_violation(std::span<const Vec3> delta, const AttackConfig& cfg, const NeighborProfile& profile) {
  return max_budget_violation(delta, cfg.budget_kind, profile.epsilon, cfg.uniform_epsilon);
}

// A small untrained victim for gradient checks, marked trained so the attack
// entry points accept it.
CompletionModel tiny_model(std::uint64_t seed) {
  ModelArch arch;
  arch.point_hidden = 8;
  arch.feature_dim = 6;
  arch.decoder_hidden = 10;
  arch.output_points = 5;
  auto m = CompletionModel::create(arch, seed);
  m.set_trained(true);
  return m;
}

}  // namespace

TEST(AttackConfig, Validation) {
  AttackConfig c;
  EXPECT_NO_THROW(c.validate());
  const std::vector<std::function<void(AttackConfig&)>> breakers{
      [](auto& x) { x.base_step = 0.0; },      [](auto& x) { x.decay_rate = 0.0; },
      [](auto& x) { x.decay_rate = 1.5; },     [](auto& x) { x.decay_step = 0; },
      [](auto& x) { x.lambda = -1.0; },        [](auto& x) { x.eta = 0.0; },
      [](auto& x) { x.k = 1; },                [](auto& x) { x.t = -0.5; },
      [](auto& x) { x.uniform_epsilon = -1; }, [](auto& x) { x.init_noise_scale = -1; }};
  for (const auto& b : breakers) {
    AttackConfig bad;
    b(bad);
    EXPECT_EQ(code_of([&] { bad.validate(); }), Errc::InvalidConfig);
  }
}

TEST(AttackConfig, StepScheduleIsPiecewiseConstantAndNonincreasing) {
  AttackConfig c;
  c.base_step = 0.01;
  c.decay_rate = 0.7;
  c.decay_step = 20;
  EXPECT_EQ(c.step_size(0), 0.01);
  EXPECT_EQ(c.step_size(19), 0.01);
  EXPECT_DOUBLE_EQ(c.step_size(20), 0.007);
  EXPECT_DOUBLE_EQ(c.step_size(45), 0.01 * 0.49);
  for (std::size_t q = 1; q < 200; ++q) {
    EXPECT_LE(c.step_size(q), c.step_size(q - 1));
    if (q % 20 != 0) {
      EXPECT_EQ(c.step_size(q), c.step_size(q - 1));
    }
  }
}

TEST(AttackConfig, PresetsAndNames) {
  EXPECT_EQ(attack_preset("pcn", AttackMode::latent).lambda, 1000.0);
  EXPECT_EQ(attack_preset("rfa", AttackMode::geometry).lambda, 20.0);
  EXPECT_EQ(attack_preset("grnet", AttackMode::geometry).lambda, 0.05);
  EXPECT_EQ(attack_preset("vrcnet", AttackMode::latent).lambda, 20.0);
  EXPECT_EQ(attack_preset("grnet", AttackMode::latent).decay_step, 50u);
  EXPECT_EQ(attack_preset("toy", AttackMode::latent).lambda, 1.0);
  EXPECT_EQ(code_of([] { attack_preset("pointnet", AttackMode::geometry); }), Errc::InvalidConfig);
  for (auto t : {LatentTerms::both, LatentTerms::l2_only, LatentTerms::kl_only}) {
    EXPECT_EQ(latent_terms_from_string(to_string(t)), t);
  }
  EXPECT_EQ(attack_mode_from_string("latent"), AttackMode::latent);
  EXPECT_EQ(code_of([] { attack_mode_from_string("classification"); }), Errc::InvalidConfig);
}

TEST(GeometryLoss, MatchesMetricAndVanishesOnOwnOutput) {
  const auto m = tiny_model(1);
  std::mt19937_64 rng(2);
  const auto x = test::random_cloud(12, rng, -0.5, 0.5);
  const auto y = test::random_cloud(20, rng, -0.5, 0.5);
  ad::Tape tape;
  EXPECT_NEAR(geometry_loss(tape, m, points_tensor(x), points_tensor(y)).item(), chamfer(m.complete(x), y), 1e-9);
  ad::Tape t2;
  EXPECT_EQ(geometry_loss(t2, m, points_tensor(x), points_tensor(m.complete(x))).item(), 0.0);
}

TEST(GeometryLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  int checked = 0;
  for (int trial = 0; checked < 20 && trial < 200; ++trial) {
    const auto m = tiny_model(static_cast<std::uint64_t>(trial));
    const auto y = points_tensor(test::random_cloud(7, rng, -0.5, 0.5));
    test::GradInstance inst{{points_tensor(test::random_cloud(6, rng, -0.5, 0.5))},
                            [&m, y](ad::Tape& t, const std::vector<ad::Tensor>& in) { return geometry_loss(t, m, in[0], y); }};
    // Skip instances whose forward pass sits within a step of a relu, max-pool
    // or nearest-neighbor switch: there the loss is not differentiable.
    const double coarse = test::gradient_error(inst, 1e-4);
    const double fine = test::gradient_error(inst, 1e-6);
    if (std::abs(coarse - fine) > 1e-4) continue;
    EXPECT_LT(fine, 1e-4) << "trial " << trial;
    ++checked;
  }
  EXPECT_EQ(checked, 20);
}

TEST(LatentLoss, ZeroAtTargetAndDefinitionalReductions) {
  const auto m = tiny_model(3);
  std::mt19937_64 rng(4);
  const auto target = test::random_cloud(10, rng);
  const auto adv = test::random_cloud(10, rng);
  const auto fv = m.encode(target);
  const ad::Tensor feature({fv.size()}, fv);
  ad::Tape t0;
  EXPECT_EQ(latent_loss(t0, m, points_tensor(target), feature, 20.0).item(), 0.0);

  const auto fa = m.encode(adv);
  double l2 = 0.0;
  for (std::size_t i = 0; i < fa.size(); ++i) l2 += (fa[i] - fv[i]) * (fa[i] - fv[i]);
  l2 = std::sqrt(l2);
  ad::Tape t1, t2, t3, t4;
  EXPECT_NEAR(latent_loss(t1, m, points_tensor(adv), feature, 0.0).item(), l2, 1e-12);
  const double kl = latent_loss(t2, m, points_tensor(adv), feature, 0.0, LatentTerms::kl_only).item();
  EXPECT_GT(kl, 0.0);
  EXPECT_NEAR(latent_loss(t3, m, points_tensor(adv), feature, 20.0).item(), l2 + 20.0 * kl, 1e-12);
  EXPECT_NEAR(latent_loss(t4, m, points_tensor(adv), feature, 7.0, LatentTerms::l2_only).item(), l2, 1e-12);

  ad::Tape t5;
  EXPECT_EQ(code_of([&] { latent_loss(t5, m, points_tensor(adv), ad::Tensor({3}, {0, 0, 0}), 1.0); }),
            Errc::ShapeMismatch);
  EXPECT_EQ(code_of([&] { latent_loss(t5, m, points_tensor(adv), feature, -1.0); }), Errc::InvalidParam);
}

TEST(LatentLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  int checked = 0;
  for (int trial = 0; checked < 20 && trial < 200; ++trial) {
    const auto m = tiny_model(static_cast<std::uint64_t>(100 + trial));
    const auto fv = m.encode(test::random_cloud(6, rng));
    const ad::Tensor feature({fv.size()}, fv);
    test::GradInstance inst{{points_tensor(test::random_cloud(6, rng))},
                            [&m, feature](ad::Tape& t, const std::vector<ad::Tensor>& in) {
                              return latent_loss(t, m, in[0], feature, 20.0);
                            }};
    const double coarse = test::gradient_error(inst, 1e-4);
    const double fine = test::gradient_error(inst, 1e-6);
    if (std::abs(coarse - fine) > 1e-4) continue;
    EXPECT_LT(fine, 1e-4) << "trial " << trial;
    ++checked;
  }
  EXPECT_EQ(checked, 20);
}

TEST(RunPointca, ZeroIterationsReturnsClippedInitialization) {
  const auto& model = test::toy_completion();
  const auto pair = test::toy_pairs(1)[0];
  auto cfg = quick_config(0);
  cfg.eta = 0.5;
  const auto r = run_pointca(model, pair.source_partial, pair.target_gt, cfg);
  std::mt19937_64 rng(cfg.seed);
  const auto init = detail::uniform_noise(pair.source_partial.size(), cfg.init_noise_scale, rng);
  const auto profile = build_neighbor_profile(pair.source_partial, cfg.k, cfg.t, cfg.eta);
  const auto expected = clip_to_budget({init, BudgetKind::adaptive}, profile).delta;
  EXPECT_EQ(r.delta, expected);
  EXPECT_TRUE(r.loss_trace.empty());
  for (std::size_t i = 0; i < r.adversarial.size(); ++i) {
    EXPECT_EQ(r.adversarial[i], pair.source_partial[i] + expected[i]);
  }
}

TEST(RunPointca, VanishingBudgetLeavesCompletionUnchanged) {
  const auto& model = test::toy_completion();
  const auto pair = test::toy_pairs(1)[0];
  auto cfg = quick_config(5);
  cfg.eta = 1e-12;
  const auto r = run_pointca(model, pair.source_partial, pair.target_gt, cfg);
  for (const auto& d : r.delta) EXPECT_LE(norm(d), 1e-10);
  const double clean = chamfer(model.complete(pair.source_partial), pair.target_gt);
  EXPECT_NEAR(chamfer(model.complete(r.adversarial), pair.target_gt), clean, 1e-8);
}

TEST(RunPointca, EveryIterateIsFeasibleUnderEveryBudgetKind) {
  const auto& model = test::toy_completion();
  const auto pairs = test::toy_pairs(3);
  for (auto kind : {BudgetKind::adaptive, BudgetKind::pointwise_l2, BudgetKind::channelwise_linf}) {
    for (const auto& pair : pairs) {
      auto cfg = quick_config(25);
      cfg.budget_kind = kind;
      cfg.eta = 1.0;
      cfg.uniform_epsilon = 0.01;
      const auto profile = build_neighbor_profile(pair.source_partial, cfg.k, cfg.t, cfg.eta);
      std::size_t calls = 0;
      double worst = 0.0;
      run_pointca(model, pair.source_partial, pair.target_gt, cfg, [&](std::size_t q, std::span<const Vec3> delta) {
        EXPECT_EQ(q, calls++);
        worst = std::max(worst, budget_violation(delta, cfg, profile));
      });
      EXPECT_EQ(calls, 25u);
      EXPECT_LE(worst, 1e-9) << to_string(kind);
    }
  }
}

TEST(RunPointca, ProjectionUsesTheCleanProfile) {
  // With a tight budget most points end on their ball. Their radius must be the
  // clean cloud's epsilon, not one recomputed from the perturbed cloud.
  const auto& model = test::toy_completion();
  const auto pair = test::toy_pairs(1)[0];
  auto cfg = quick_config(40);
  cfg.eta = 0.1;
  cfg.base_step = 0.02;  // large next to the budget so iterates saturate
  const auto clean = build_neighbor_profile(pair.source_partial, cfg.k, cfg.t, cfg.eta);
  const auto r = run_pointca(model, pair.source_partial, pair.target_gt, cfg);
  const auto moved = build_neighbor_profile(r.adversarial, cfg.k, cfg.t, cfg.eta);
  std::size_t on_ball = 0, differs = 0;
  for (std::size_t i = 0; i < r.delta.size(); ++i) {
    if (std::abs(norm(r.delta[i]) - clean.epsilon[i]) <= 1e-12 * (1.0 + clean.epsilon[i])) {
      ++on_ball;
      differs += std::abs(moved.epsilon[i] - clean.epsilon[i]) > 1e-9;
    }
  }
  EXPECT_GT(on_ball, r.delta.size() / 2);
  EXPECT_GT(differs, 0u);
}

TEST(RunPointca, DeterministicGivenSeed) {
  const auto& model = test::toy_completion();
  const auto pair = test::toy_pairs(1)[0];
  for (auto mode : {AttackMode::geometry, AttackMode::latent}) {
    auto cfg = quick_config(10);
    cfg.mode = mode;
    const auto& target = mode == AttackMode::geometry ? pair.target_gt : pair.target_partial;
    const auto a = run_pointca(model, pair.source_partial, target, cfg);
    const auto b = run_pointca(model, pair.source_partial, target, cfg);
    EXPECT_EQ(a.adversarial.points, b.adversarial.points);
    EXPECT_EQ(a.loss_trace, b.loss_trace);
    cfg.seed = 4;
    EXPECT_NE(run_pointca(model, pair.source_partial, target, cfg).adversarial.points, a.adversarial.points);
  }
}

TEST(RunPointca, GeometryLossDecreasesOnNearlyEveryPair) {
  const auto& model = test::toy_completion();
  const auto pairs = test::toy_pairs(20);
  std::size_t decreased = 0;
  for (const auto& pair : pairs) {
    const auto r = run_pointca(model, pair.source_partial, pair.target_gt, quick_config(60));
    decreased += r.loss_trace.back() < r.loss_trace.front();
  }
  EXPECT_GE(static_cast<double>(decreased), 0.95 * static_cast<double>(pairs.size()));
}

TEST(RunPointca, Errors) {
  const auto pair = test::toy_pairs(1)[0];
  const auto untrained = CompletionModel::create({}, 1);
  EXPECT_EQ(code_of([&] { run_pointca(untrained, pair.source_partial, pair.target_gt, quick_config()); }),
            Errc::ModelUntrained);
  auto bad = quick_config();
  bad.decay_step = 0;
  EXPECT_EQ(code_of([&] { run_pointca(test::toy_completion(), pair.source_partial, pair.target_gt, bad); }),
            Errc::InvalidConfig);
}

TEST(RandomNoise, DeterministicAndFeasible) {
  const auto pair = test::toy_pairs(1)[0];
  const auto cfg = quick_config();
  const auto a = random_noise_baseline(pair.source_partial, cfg);
  EXPECT_EQ(a.adversarial.points, random_noise_baseline(pair.source_partial, cfg).adversarial.points);
  EXPECT_EQ(a.config_echo.iterations, 0u);
  const auto profile = build_neighbor_profile(pair.source_partial, cfg.k, cfg.t, cfg.eta);
  EXPECT_LE(budget_violation(a.delta, cfg, profile), 1e-9);
  auto tight = cfg;
  tight.eta = 0.1;
  const auto t = random_noise_baseline(pair.source_partial, tight);
  EXPECT_LE(budget_violation(t.delta, tight, build_neighbor_profile(pair.source_partial, 8, 3.0, 0.1)), 1e-9);
}

TEST(ClassificationNoise, FoolsTheClassifierWithinBudget) {
  const auto& classifier = test::toy_classifier();
  const auto& completion = test::toy_completion();
  const auto pairs = test::toy_pairs(20);
  std::size_t fooled = 0;
  for (const auto& pair : pairs) {
    auto cfg = quick_config(100);
    int target = -1;
    const auto r = classification_noise_baseline(classifier, completion, pair.source_partial, pair.source_label, cfg, &target);
    EXPECT_NE(target, pair.source_label);
    EXPECT_GE(target, 0);
    const auto profile = build_neighbor_profile(pair.source_partial, cfg.k, cfg.t, cfg.eta);
    EXPECT_LE(budget_violation(r.delta, cfg, profile), 1e-9);
    fooled += classifier.predict(r.adversarial) != static_cast<std::size_t>(pair.source_label);
  }
  EXPECT_GE(static_cast<double>(fooled), 0.8 * static_cast<double>(pairs.size()));
}

TEST(ClassificationNoise, Errors) {
  const auto pair = test::toy_pairs(1)[0];
  const auto untrained = Classifier::create({}, 1);
  EXPECT_EQ(code_of([&] {
              classification_noise_baseline(untrained, test::toy_completion(), pair.source_partial, 0, quick_config());
            }),
            Errc::ModelUntrained);
  EXPECT_EQ(code_of([&] {
              classification_noise_baseline(test::toy_classifier(), test::toy_completion(), pair.source_partial, 7,
                                            quick_config());
            }),
            Errc::InvalidParam);
}

TEST(Transfer, SelfTransferEqualsMeanTargetError) {
  const auto& model = test::toy_completion();
  const auto pairs = test::toy_pairs(3);
  std::vector<PointCloud> adv, targets;
  double total = 0.0;
  for (const auto& p : pairs) {
    adv.push_back(run_pointca(model, p.source_partial, p.target_gt, quick_config(10)).adversarial);
    targets.push_back(p.target_gt);
    total += chamfer(model.complete(adv.back()), p.target_gt);
  }
  EXPECT_DOUBLE_EQ(transfer_evaluate(adv, targets, model), total / 3.0);
  EXPECT_EQ(code_of([&] { transfer_evaluate(std::span(adv).first(2), targets, model); }), Errc::SizeMismatch);
  EXPECT_EQ(code_of([&] { transfer_evaluate({}, {}, model); }), Errc::EmptyInput);
  EXPECT_EQ(code_of([&] { transfer_evaluate(adv, targets, CompletionModel::create({}, 1)); }), Errc::ModelUntrained);
}
