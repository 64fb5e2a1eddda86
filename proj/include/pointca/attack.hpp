#pragma once

// Completion attacks. Geometry mode minimizes CD-P between the completion of
// the perturbed partial and a complete target; latent mode minimizes the L2
// plus lambda-weighted KL distance between encoder features of the perturbed
// partial and of a partial target. Both take sign-gradient steps with a
// step-decay schedule and project every point back onto its budget after
// each step.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pointca/autodiff.hpp"
#include "pointca/constraint.hpp"
#include "pointca/metrics.hpp"
#include "pointca/models.hpp"
#include "pointca/neighbors.hpp"

namespace pointca {

enum class AttackMode { geometry, latent };

inline const char* to_string(AttackMode m) { return m == AttackMode::geometry ? "geometry" : "latent"; }

inline AttackMode attack_mode_from_string(const std::string& s) {
  if (s == "geometry") return AttackMode::geometry;
  if (s == "latent") return AttackMode::latent;
  throw Error(Errc::InvalidConfig, "unknown attack mode '" + s + "'");
}

/// Which terms of the latent loss are active.
enum class LatentTerms { both, l2_only, kl_only };

inline const char* to_string(LatentTerms t) {
  switch (t) {
    case LatentTerms::both: return "both";
    case LatentTerms::l2_only: return "l2";
    case LatentTerms::kl_only: return "kl";
  }
  return "both";
}

inline LatentTerms latent_terms_from_string(const std::string& s) {
  if (s == "both") return LatentTerms::both;
  if (s == "l2") return LatentTerms::l2_only;
  if (s == "kl") return LatentTerms::kl_only;
  throw Error(Errc::InvalidConfig, "unknown latent terms '" + s + "' (expected both, l2 or kl)");
}

struct AttackConfig {
  AttackMode mode = AttackMode::geometry;
  std::size_t iterations = 200;
  std::size_t k = kDefaultNeighbors;
  double t = kDefaultUniformityWeight;
  double eta = 5.0;
  double base_step = 0.01;
  double decay_rate = 0.7;
  std::size_t decay_step = 20;
  double lambda = 20.0;
  LatentTerms latent_terms = LatentTerms::both;
  BudgetKind budget_kind = BudgetKind::adaptive;
  /// Radius of the pointwise_l2 ball or half-width of the channelwise box.
  double uniform_epsilon = 0.05;
  double init_noise_scale = 0.01;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(base_step > 0.0)) throw Error(Errc::InvalidConfig, "base_step must be positive");
    if (!(decay_rate > 0.0 && decay_rate <= 1.0)) throw Error(Errc::InvalidConfig, "decay_rate must lie in (0,1]");
    if (decay_step < 1) throw Error(Errc::InvalidConfig, "decay_step must be at least 1");
    if (!(lambda >= 0.0)) throw Error(Errc::InvalidConfig, "lambda must be nonnegative");
    if (!(eta > 0.0)) throw Error(Errc::InvalidConfig, "eta must be positive");
    if (k < 2) throw Error(Errc::InvalidConfig, "k must be at least 2");
    if (!(t >= 0.0)) throw Error(Errc::InvalidConfig, "t must be nonnegative");
    if (!(uniform_epsilon >= 0.0)) throw Error(Errc::InvalidConfig, "uniform_epsilon must be nonnegative");
    if (!(init_noise_scale >= 0.0)) throw Error(Errc::InvalidConfig, "init_noise_scale must be nonnegative");
  }

  /// beta_q = beta * decay_rate^floor(q / decay_step), q counted from 0.
  double step_size(std::size_t q) const {
    return base_step * std::pow(decay_rate, static_cast<double>(q / decay_step));
  }
};

/// Step schedules from the original victims (geometry / latent columns) and
/// the ones tuned for the toy model.
inline AttackConfig attack_preset(const std::string& victim, AttackMode mode) {
  AttackConfig c;
  c.mode = mode;
  c.iterations = 200;
  const bool geo = mode == AttackMode::geometry;
  if (victim == "pcn") {
    c.lambda = 1000;
    c.base_step = geo ? 0.01 : 0.5;
    c.decay_rate = geo ? 0.7 : 0.5;
    c.decay_step = 20;
  } else if (victim == "rfa") {
    c.lambda = 20;
    c.base_step = geo ? 0.5 : 0.75;
    c.decay_rate = 0.6;
    c.decay_step = 20;
  } else if (victim == "grnet") {
    c.lambda = 0.05;
    c.base_step = 0.003;
    c.decay_rate = 0.5;
    c.decay_step = 50;
  } else if (victim == "vrcnet") {
    c.lambda = 20;
    c.base_step = geo ? 0.002 : 0.01;
    c.decay_rate = geo ? 0.5 : 0.7;
    c.decay_step = geo ? 30 : 20;
  } else if (victim == "toy") {
    // Grid-searched on the toy victim for the best median T-NRE.
    c.lambda = 1;
    c.base_step = geo ? 0.005 : 0.05;
    c.decay_rate = 0.7;
    c.decay_step = 20;
  } else {
    throw Error(Errc::InvalidConfig, "unknown victim preset '" + victim + "'");
  }
  return c;
}

struct AttackResult {
  PointCloud adversarial;
  std::vector<double> loss_trace;
  MetricReport metrics;
  AttackConfig config_echo;
  std::vector<Vec3> delta;
};

/// Called after every projection with the iteration index and the feasible delta.
using AttackObserver = std::function<void(std::size_t, std::span<const Vec3>)>;

/// CD-P(De(En(adv)), target) on the tape.
inline ad::Tensor geometry_loss(ad::Tape& tape, const CompletionModel& model, const ad::Tensor& adv,
                                const ad::Tensor& target_gt) {
  return ad::chamfer(tape, model.complete(tape, adv), target_gt);
}

/// ||En(adv) - En(Y^P)||_2 + lambda * KL(softmax En(Y^P) || softmax En(adv)).
inline ad::Tensor latent_loss(ad::Tape& tape, const CompletionModel& model, const ad::Tensor& adv,
                              const ad::Tensor& target_feature, double lambda,
                              LatentTerms terms = LatentTerms::both) {
  if (!(lambda >= 0.0)) throw Error(Errc::InvalidParam, "lambda must be nonnegative");
  const auto f = model.encode(tape, adv);
  if (f.shape() != target_feature.shape()) {
    throw Error(Errc::ShapeMismatch, "target feature " + ad::shape_string(target_feature.shape()) +
                                         " vs encoder output " + ad::shape_string(f.shape()));
  }
  const auto l2 = [&] { return ad::l2_norm_rows(tape, ad::sub(tape, f, target_feature)); };
  const auto kl = [&] { return ad::kl_divergence(tape, target_feature, f); };
  switch (terms) {
    case LatentTerms::l2_only: return l2();
    case LatentTerms::kl_only: return kl();
    case LatentTerms::both: break;
  }
  return ad::add(tape, l2(), ad::scale(tape, kl(), lambda));
}

namespace detail {

/// Projection onto whichever budget the config selects.
class BudgetProjector {
 public:
  BudgetProjector(const PointCloud& clean, const AttackConfig& cfg) : cfg_(cfg) {
    if (cfg.budget_kind == BudgetKind::adaptive) profile_ = build_neighbor_profile(clean, cfg.k, cfg.t, cfg.eta);
  }

  std::vector<Vec3> project(std::vector<Vec3> delta) const {
    Perturbation p{std::move(delta), cfg_.budget_kind};
    switch (cfg_.budget_kind) {
      case BudgetKind::adaptive: p = clip_to_budget(std::move(p), *profile_); break;
      case BudgetKind::pointwise_l2: p = clip_pointwise_l2(std::move(p), cfg_.uniform_epsilon); break;
      case BudgetKind::channelwise_linf: p = clip_channelwise(std::move(p), cfg_.uniform_epsilon); break;
    }
    return std::move(p.delta);
  }

  const std::optional<NeighborProfile>& profile() const { return profile_; }

 private:
  AttackConfig cfg_;
  std::optional<NeighborProfile> profile_;
};

inline std::vector<Vec3> uniform_noise(std::size_t m, double scale, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-scale, scale);
  std::vector<Vec3> d(m);
  for (auto& v : d) v = {u(rng), u(rng), u(rng)};
  return d;
}

inline double sign(double v) { return (v > 0.0) - (v < 0.0); }

inline PointCloud add_delta(const PointCloud& clean, std::span<const Vec3> delta) {
  PointCloud out(clean.points, CloudKind::adversarial, clean.label);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = clean[i] + delta[i];
  return out;
}

// Iterated sign-gradient descent on `loss_of(tape, x)` with per-step projection.
template <typename LossFn>
AttackResult sign_gradient_attack(const PointCloud& clean, const AttackConfig& cfg, LossFn loss_of,
                                  const AttackObserver& observer) {
  BudgetProjector projector(clean, cfg);
  std::mt19937_64 rng(cfg.seed);
  std::vector<Vec3> delta = projector.project(uniform_noise(clean.size(), cfg.init_noise_scale, rng));
  AttackResult result;
  result.loss_trace.reserve(cfg.iterations);
  std::vector<Vec3> adv(clean.size());
  for (std::size_t q = 0; q < cfg.iterations; ++q) {
    for (std::size_t i = 0; i < adv.size(); ++i) adv[i] = clean[i] + delta[i];
    ad::Tape tape;
    auto x = points_tensor(adv, true);
    const auto loss = loss_of(tape, x);
    result.loss_trace.push_back(loss.item());
    tape.backward(loss);
    const double beta = cfg.step_size(q);
    const auto g = x.grad();
    for (std::size_t i = 0; i < adv.size(); ++i) {
      for (int c = 0; c < 3; ++c) adv[i][c] -= beta * sign(g[3 * i + c]);
      delta[i] = adv[i] - clean[i];
    }
    delta = projector.project(std::move(delta));
    if (observer) observer(q, delta);
  }
  result.adversarial = add_delta(clean, delta);
  result.delta = std::move(delta);
  result.config_echo = cfg;
  return result;
}

}  // namespace detail

/// Full attack loop. `target` is the complete target Y in geometry mode and
/// the partial target Y^P in latent mode. The neighbor profile driving the
/// adaptive budget is computed once from the clean source.
inline AttackResult run_pointca(const CompletionModel& model, const PointCloud& source_partial,
                                const PointCloud& target, const AttackConfig& cfg,
                                const AttackObserver& observer = {}) {
  cfg.validate();
  if (!model.trained()) throw Error(Errc::ModelUntrained, "attack needs a trained completion model");
  source_partial.validate();
  target.validate();
  if (cfg.mode == AttackMode::geometry) {
    const auto y = points_tensor(target);
    return detail::sign_gradient_attack(
        source_partial, cfg, [&](ad::Tape& tape, const ad::Tensor& x) { return geometry_loss(tape, model, x, y); },
        observer);
  }
  const auto feature = model.encode(target);
  const ad::Tensor target_feature({feature.size()}, feature);
  return detail::sign_gradient_attack(
      source_partial, cfg,
      [&](ad::Tape& tape, const ad::Tensor& x) {
        return latent_loss(tape, model, x, target_feature, cfg.lambda, cfg.latent_terms);
      },
      observer);
}

inline constexpr double kRandomNoiseSigma = 0.02;

/// Gaussian noise (sigma 0.02 per coordinate) projected onto the same budget.
inline AttackResult random_noise_baseline(const PointCloud& source_partial, const AttackConfig& cfg,
                                          double sigma = kRandomNoiseSigma) {
  cfg.validate();
  source_partial.validate();
  detail::BudgetProjector projector(source_partial, cfg);
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> g(0.0, sigma);
  std::vector<Vec3> delta(source_partial.size());
  for (auto& d : delta) d = {g(rng), g(rng), g(rng)};
  delta = projector.project(std::move(delta));
  AttackResult r;
  r.adversarial = detail::add_delta(source_partial, delta);
  r.delta = std::move(delta);
  r.config_echo = cfg;
  r.config_echo.iterations = 0;
  return r;
}

/// Targeted sign-gradient attack on the classifier toward a random wrong class,
/// under the same budget machinery. The result is meant to be fed to the
/// completion model afterwards.
inline AttackResult classification_noise_baseline(const Classifier& classifier, const CompletionModel& completion,
                                                  const PointCloud& source_partial, int true_label,
                                                  const AttackConfig& cfg, int* chosen_target = nullptr) {
  cfg.validate();
  if (!classifier.trained()) throw Error(Errc::ModelUntrained, "classification noise needs a trained classifier");
  if (!completion.trained()) throw Error(Errc::ModelUntrained, "classification noise needs a trained completion model");
  const auto classes = classifier.class_count();
  if (true_label < 0 || static_cast<std::size_t>(true_label) >= classes || classes < 2) {
    throw Error(Errc::InvalidParam, "true label outside the classifier's classes");
  }
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::size_t target = std::uniform_int_distribution<std::size_t>(0, classes - 2)(rng);
  if (target >= static_cast<std::size_t>(true_label)) ++target;
  if (chosen_target) *chosen_target = static_cast<int>(target);
  return detail::sign_gradient_attack(
      source_partial, cfg,
      [&](ad::Tape& tape, const ad::Tensor& x) {
        return ad::cross_entropy(tape, classifier.logits(tape, x), target);
      },
      {});
}

/// Mean T-RE of `model`'s completions of the adversarial clouds against their targets.
inline double transfer_evaluate(std::span<const PointCloud> adversarial, std::span<const PointCloud> target_gts,
                                const CompletionModel& model) {
  if (!model.trained()) throw Error(Errc::ModelUntrained, "transfer evaluation needs a trained model");
  if (adversarial.size() != target_gts.size()) throw Error(Errc::SizeMismatch, "one target per adversarial cloud");
  if (adversarial.empty()) throw Error(Errc::EmptyInput, "no adversarial clouds");
  double total = 0.0;
  for (std::size_t i = 0; i < adversarial.size(); ++i) total += chamfer(model.complete(adversarial[i]), target_gts[i]);
  return total / static_cast<double>(adversarial.size());
}

}  // namespace pointca
