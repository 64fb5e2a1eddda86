#pragma once

// Campaign orchestration: running an attack over a pair manifest, per-pair
// metrics, resumable CSV output, aggregation, defense sweeps, budget
// matching and transfer matrices.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "pointca/attack.hpp"
#include "pointca/data_io.hpp"
#include "pointca/defense.hpp"
#include "pointca/metrics.hpp"
#include "pointca/models.hpp"

namespace pointca {

// ---------------------------------------------------------------------------
// Training data

/// One sample per (object, view) of the chosen split.
inline std::vector<TrainingSample> completion_samples(const Dataset& ds, bool test_split) {
  std::vector<TrainingSample> out;
  for (const auto& o : ds.objects) {
    if (o.test != test_split) continue;
    for (const auto& p : o.partials) out.push_back({p, o.gt, static_cast<int>(o.cls)});
  }
  return out;
}

/// Classifier samples: every partial plus every complete ground truth, so the
/// classifier also sees the dense clouds the completion model produces.
inline std::vector<TrainingSample> classifier_samples(const Dataset& ds, bool test_split) {
  std::vector<TrainingSample> out;
  for (const auto& o : ds.objects) {
    if (o.test != test_split) continue;
    for (const auto& p : o.partials) out.push_back({p, o.gt, static_cast<int>(o.cls)});
    out.push_back({o.gt, o.gt, static_cast<int>(o.cls)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Denominators

struct Denominators {
  double t_nre = 0.0;  // d(f(Y^P), Y)
  double s_nre = 0.0;  // d(f(X^P), X)
};

inline Denominators compute_denominators(const CompletionModel& model, const AttackPair& pair) {
  if (!model.trained()) throw Error(Errc::ModelUntrained, "denominators need a trained completion model");
  Denominators d;
  d.t_nre = chamfer(model.complete(pair.target_partial), pair.target_gt);
  d.s_nre = chamfer(model.complete(pair.source_partial), pair.source_gt);
  if (!(d.t_nre > 0.0) || !(d.s_nre > 0.0)) {
    throw Error(Errc::ZeroDenominator, pair.entry.pair_id + ": clean reconstruction error is zero");
  }
  return d;
}

/// Fills the cached denominators of every entry that lacks them.
inline void annotate_denominators(PairManifest& manifest, const Dataset& ds, const CompletionModel& model) {
  for (auto& e : manifest.entries) {
    if (e.t_nre_denominator && e.s_nre_denominator) continue;
    const auto d = compute_denominators(model, resolve_pair(ds, e));
    e.t_nre_denominator = d.t_nre;
    e.s_nre_denominator = d.s_nre;
  }
}

// ---------------------------------------------------------------------------
// Campaign specification

enum class AttackMethod { geometry, latent, random_noise, classification_noise };

inline const char* to_string(AttackMethod m) {
  switch (m) {
    case AttackMethod::geometry: return "geometry";
    case AttackMethod::latent: return "latent";
    case AttackMethod::random_noise: return "random_noise";
    case AttackMethod::classification_noise: return "classification_noise";
  }
  return "geometry";
}

inline AttackMethod attack_method_from_string(const std::string& s) {
  if (s == "geometry") return AttackMethod::geometry;
  if (s == "latent") return AttackMethod::latent;
  if (s == "random_noise") return AttackMethod::random_noise;
  if (s == "classification_noise") return AttackMethod::classification_noise;
  throw Error(Errc::InvalidConfig, "unknown attack method '" + s + "'");
}

struct CampaignSpec {
  AttackMethod method = AttackMethod::geometry;
  AttackConfig attack;
};

/// File stem identifying a campaign, e.g. "geometry_adaptive_eta5_k8_t3".
inline std::string campaign_name(const CampaignSpec& spec) {
  char buf[256];
  const auto& a = spec.attack;
  int n = std::snprintf(buf, sizeof(buf), "%s_%s_eta%g_k%zu_t%g", to_string(spec.method), to_string(a.budget_kind),
                        a.eta, a.k, a.t);
  std::string name(buf, static_cast<std::size_t>(n));
  if (spec.method == AttackMethod::latent) {
    n = std::snprintf(buf, sizeof(buf), "_lambda%g_%s", a.lambda, to_string(a.latent_terms));
    name.append(buf, static_cast<std::size_t>(n));
  }
  if (a.budget_kind != BudgetKind::adaptive) {
    n = std::snprintf(buf, sizeof(buf), "_eps%.6g", a.uniform_epsilon);
    name.append(buf, static_cast<std::size_t>(n));
  }
  return name;
}

struct CampaignOptions {
  std::size_t workers = 1;
  bool compute_emd = true;
  std::size_t emd_phases = kDefaultAuctionPhases;
  DefenseConfig defense;  // SOR parameters for outlier counting
  double noise_sigma = kRandomNoiseSigma;
};

// ---------------------------------------------------------------------------
// Rows

struct CampaignRow {
  std::string pair_id;
  std::string source_class;
  std::string target_class;
  AttackMethod method = AttackMethod::geometry;
  BudgetKind budget_kind = BudgetKind::adaptive;
  double eta = 0.0;
  std::size_t k = 0;
  double t = 0.0;
  double lambda = 0.0;
  LatentTerms latent_terms = LatentTerms::both;
  double uniform_epsilon = 0.0;
  std::size_t iterations = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  MetricReport metrics;

  static std::string csv_header() {
    return std::string("pair_id,source_class,target_class,method,budget_kind,eta,k,t,lambda,latent_terms,") +
           "uniform_epsilon,iterations,initial_loss,final_loss," + MetricReport::kCsvHeader;
  }

  std::string csv_row() const {
    std::string s = pair_id + "," + source_class + "," + target_class + "," + to_string(method) + "," +
                    to_string(budget_kind) + "," + format_double(eta) + "," + std::to_string(k) + "," +
                    format_double(t) + "," + format_double(lambda) + "," + to_string(latent_terms) + "," +
                    format_double(uniform_epsilon) + "," + std::to_string(iterations) + "," +
                    format_double(initial_loss) + "," + format_double(final_loss) + ",";
    return s + metrics.csv_row();
  }
};

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_number(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error(Errc::ParseError, "bad number '" + s + "' in column " + what);
  }
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

inline CampaignRow parse_campaign_row(const std::string& line) {
  const auto cells = detail::split_csv(line);
  if (cells.size() != 23) {
    throw Error(Errc::ParseError, "campaign row has " + std::to_string(cells.size()) + " columns, expected 23");
  }
  auto num = [&](std::size_t i, const char* name) { return detail::parse_number(cells[i], name); };
  CampaignRow r;
  r.pair_id = cells[0];
  r.source_class = cells[1];
  r.target_class = cells[2];
  try {
    r.method = attack_method_from_string(cells[3]);
    r.budget_kind = budget_kind_from_string(cells[4]);
    r.latent_terms = latent_terms_from_string(cells[9]);
  } catch (const Error& e) {
    throw Error(Errc::ParseError, e.what());
  }
  r.eta = num(5, "eta");
  r.k = static_cast<std::size_t>(num(6, "k"));
  r.t = num(7, "t");
  r.lambda = num(8, "lambda");
  r.uniform_epsilon = num(10, "uniform_epsilon");
  r.iterations = static_cast<std::size_t>(num(11, "iterations"));
  r.initial_loss = num(12, "initial_loss");
  r.final_loss = num(13, "final_loss");
  auto& m = r.metrics;
  m.t_re_cd = num(14, "t_re_cd");
  m.t_re_emd = num(15, "t_re_emd");
  m.t_nre_cd = num(16, "t_nre_cd");
  m.t_nre_denominator = num(17, "t_nre_denominator");
  m.s_re = num(18, "s_re");
  m.s_nre = num(19, "s_nre");
  m.s_nre_denominator = num(20, "s_nre_denominator");
  m.perturbation_budget_cd = num(21, "perturbation_budget_cd");
  m.outlier_count = static_cast<std::size_t>(num(22, "outlier_count"));
  return r;
}

inline std::vector<CampaignRow> read_campaign_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoError, "cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != CampaignRow::csv_header()) {
    throw Error(Errc::ParseError, path.string() + ": missing or unexpected header");
  }
  std::vector<CampaignRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      rows.push_back(parse_campaign_row(line));
    } catch (const Error& e) {
      throw Error(Errc::ParseError, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return rows;
}

/// Append-only campaign CSV. Opening an existing file keeps its complete rows
/// (a torn final line from an interrupted run is cut off) and reports which
/// pairs are already done.
class CampaignCsv {
 public:
  explicit CampaignCsv(std::filesystem::path path) : path_(std::move(path)) {
    if (std::filesystem::exists(path_)) {
      std::string content;
      {
        std::ifstream in(path_, std::ios::binary);
        content.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
      }
      const auto last_newline = content.rfind('\n');
      const std::size_t keep = last_newline == std::string::npos ? 0 : last_newline + 1;
      if (keep != content.size()) std::filesystem::resize_file(path_, keep);
      if (keep > 0) {
        for (const auto& r : read_campaign_csv(path_)) done_.insert(r.pair_id);
      }
      header_written_ = keep > 0;
    }
    out_.open(path_, std::ios::binary | std::ios::app);
    if (!out_) throw Error(Errc::IoError, "cannot write " + path_.string());
    if (!header_written_) {
      out_ << CampaignRow::csv_header() << '\n';
      out_.flush();
    }
  }

  const std::set<std::string>& completed() const { return done_; }

  void append(const CampaignRow& row) {
    out_ << row.csv_row() << '\n';
    out_.flush();
    if (!out_) throw Error(Errc::IoError, "failed writing " + path_.string());
    done_.insert(row.pair_id);
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  std::set<std::string> done_;
  bool header_written_ = false;
};

// ---------------------------------------------------------------------------
// Per-pair evaluation

/// Metrics of one adversarial partial against the pair's cached denominators.
inline MetricReport evaluate_adversarial(const CompletionModel& model, const AttackPair& pair,
                                         const PointCloud& adversarial, const CampaignOptions& opts = {}) {
  if (!model.trained()) throw Error(Errc::ModelUntrained, "evaluation needs a trained completion model");
  Denominators den;
  if (pair.entry.t_nre_denominator && pair.entry.s_nre_denominator) {
    den = {*pair.entry.t_nre_denominator, *pair.entry.s_nre_denominator};
  } else {
    den = compute_denominators(model, pair);
  }
  const auto out = model.complete(adversarial);
  MetricReport r;
  r.t_re_cd = chamfer(out, pair.target_gt);
  if (opts.compute_emd && out.size() == pair.target_gt.size()) {
    r.t_re_emd = out.size() <= kMaxExactEmdPoints ? emd_exact(out, pair.target_gt)
                                                  : emd_approx(out, pair.target_gt, opts.emd_phases);
  }
  r.t_nre_denominator = den.t_nre;
  r.t_nre_cd = normalized_error(r.t_re_cd, den.t_nre);
  r.s_re = chamfer(out, pair.source_gt);
  r.s_nre_denominator = den.s_nre;
  r.s_nre = normalized_error(r.s_re, den.s_nre);
  r.perturbation_budget_cd = perturbation_budget(adversarial, pair.source_partial);
  r.outlier_count = count_outliers(adversarial, opts.defense);
  return r;
}

/// Per-pair attack seed: the campaign seed mixed with a hash of the pair id,
/// so results do not depend on worker scheduling or on which pairs ran before.
inline std::uint64_t pair_seed(std::uint64_t campaign_seed, const std::string& pair_id) {
  return mix_seed(campaign_seed, {detail::fnv1a(pair_id)});
}

struct PairOutcome {
  CampaignRow row;
  AttackResult attack;
};

/// Runs the attack selected by `spec` on one pair.
inline PairOutcome attack_pair(const CompletionModel& model, const Classifier* classifier, const AttackPair& pair,
                               const CampaignSpec& spec, const CampaignOptions& opts = {}) {
  AttackConfig cfg = spec.attack;
  cfg.seed = pair_seed(spec.attack.seed, pair.entry.pair_id);
  PairOutcome o;
  switch (spec.method) {
    case AttackMethod::geometry:
      cfg.mode = AttackMode::geometry;
      o.attack = run_pointca(model, pair.source_partial, pair.target_gt, cfg);
      break;
    case AttackMethod::latent:
      cfg.mode = AttackMode::latent;
      o.attack = run_pointca(model, pair.source_partial, pair.target_partial, cfg);
      break;
    case AttackMethod::random_noise:
      o.attack = random_noise_baseline(pair.source_partial, cfg, opts.noise_sigma);
      break;
    case AttackMethod::classification_noise:
      if (!classifier) throw Error(Errc::ModelUntrained, "classification noise needs a classifier");
      o.attack = classification_noise_baseline(*classifier, model, pair.source_partial, pair.source_label, cfg);
      break;
  }
  auto& r = o.row;
  r.pair_id = pair.entry.pair_id;
  r.source_class = pair.entry.source_class;
  r.target_class = pair.entry.target_class;
  r.method = spec.method;
  r.budget_kind = cfg.budget_kind;
  r.eta = cfg.eta;
  r.k = cfg.k;
  r.t = cfg.t;
  r.lambda = cfg.lambda;
  r.latent_terms = cfg.latent_terms;
  r.uniform_epsilon = cfg.uniform_epsilon;
  r.iterations = o.attack.config_echo.iterations;
  if (!o.attack.loss_trace.empty()) {
    r.initial_loss = o.attack.loss_trace.front();
    r.final_loss = o.attack.loss_trace.back();
  }
  r.metrics = evaluate_adversarial(model, pair, o.attack.adversarial, opts);
  return o;
}

/// Attacks every pair not listed in `skip`. Pairs are processed by
/// `opts.workers` threads, but `sink` always receives outcomes in manifest
/// order, so the output is identical for any worker count.
inline void run_campaign(const CompletionModel& model, const Classifier* classifier, const std::vector<AttackPair>& pairs,
                         const CampaignSpec& spec, const CampaignOptions& opts,
                         const std::function<void(const PairOutcome&)>& sink, const std::set<std::string>& skip = {}) {
  spec.attack.validate();
  if (!model.trained()) throw Error(Errc::ModelUntrained, "campaign needs a trained completion model");
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (!skip.count(pairs[i].entry.pair_id)) todo.push_back(i);
  }
  std::vector<std::optional<PairOutcome>> done(todo.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex mu;
  std::size_t flushed = 0;

  auto work = [&] {
    while (!failed) {
      const std::size_t slot = next++;
      if (slot >= todo.size()) return;
      try {
        auto outcome = attack_pair(model, classifier, pairs[todo[slot]], spec, opts);
        std::lock_guard lock(mu);
        done[slot] = std::move(outcome);
        while (flushed < done.size() && done[flushed]) {
          if (sink) sink(*done[flushed]);
          done[flushed].reset();
          ++flushed;
        }
      } catch (const Error& e) {
        std::lock_guard lock(mu);
        if (!error) error = std::make_exception_ptr(Error(e.code(), "pair " + pairs[todo[slot]].entry.pair_id + ": " + e.message()));
        failed = true;
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
        failed = true;
      }
    }
  };

  const std::size_t n_workers = std::max<std::size_t>(1, std::min(opts.workers, todo.size()));
  if (n_workers == 1) {
    work();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < n_workers; ++w) threads.emplace_back(work);
    for (auto& th : threads) th.join();
  }
  if (error) std::rethrow_exception(error);
}

/// Convenience wrapper collecting rows in memory.
inline std::vector<PairOutcome> run_campaign(const CompletionModel& model, const Classifier* classifier,
                                             const std::vector<AttackPair>& pairs, const CampaignSpec& spec,
                                             const CampaignOptions& opts = {}) {
  std::vector<PairOutcome> out;
  run_campaign(model, classifier, pairs, spec, opts, [&](const PairOutcome& o) { out.push_back(o); });
  return out;
}

/// Resolves every entry, or `max_pairs` evenly spaced entries so a truncated
/// set still spans every source class.
inline std::vector<AttackPair> resolve_pairs(const Dataset& ds, const PairManifest& manifest, std::size_t max_pairs = 0) {
  const std::size_t n = manifest.entries.size();
  const std::size_t take = max_pairs ? std::min(max_pairs, n) : n;
  std::vector<AttackPair> out;
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) out.push_back(resolve_pair(ds, manifest.entries[i * n / take]));
  return out;
}

// ---------------------------------------------------------------------------
// Parameter grids

/// Cartesian product of sweep values. Method-specific axes only multiply the
/// methods they apply to (lambda and latent terms for latent, uniform epsilon
/// for the non-adaptive budgets).
struct CampaignGrid {
  std::vector<AttackMethod> methods{AttackMethod::geometry};
  std::vector<BudgetKind> budget_kinds{BudgetKind::adaptive};
  std::vector<double> etas{5.0};
  std::vector<std::size_t> ks{kDefaultNeighbors};
  std::vector<double> ts{kDefaultUniformityWeight};
  std::vector<double> lambdas;  // empty: the latent base config's lambda
  std::vector<LatentTerms> latent_terms{LatentTerms::both};
  std::vector<double> uniform_epsilons{0.05};
};

inline std::vector<CampaignSpec> expand_grid(const CampaignGrid& grid, const AttackConfig& base,
                                             const AttackConfig& latent_base) {
  std::vector<CampaignSpec> out;
  std::set<std::string> seen;
  for (auto method : grid.methods) {
    const bool latent = method == AttackMethod::latent;
    for (auto kind : grid.budget_kinds) {
      const std::vector<double> eps = kind == BudgetKind::adaptive ? std::vector<double>{base.uniform_epsilon}
                                                                   : grid.uniform_epsilons;
      for (double eta : grid.etas) {
        for (auto k : grid.ks) {
          for (double t : grid.ts) {
            for (double lambda : latent && !grid.lambdas.empty() ? grid.lambdas : std::vector<double>{latent_base.lambda}) {
              for (auto terms : latent ? grid.latent_terms : std::vector<LatentTerms>{LatentTerms::both}) {
                for (double e : eps) {
                  CampaignSpec s{method, latent ? latent_base : base};
                  s.attack.mode = latent ? AttackMode::latent : AttackMode::geometry;
                  s.attack.budget_kind = kind;
                  s.attack.eta = eta;
                  s.attack.k = k;
                  s.attack.t = t;
                  s.attack.lambda = lambda;
                  s.attack.latent_terms = terms;
                  s.attack.uniform_epsilon = e;
                  if (seen.insert(campaign_name(s)).second) out.push_back(s);
                }
              }
            }
          }
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Budget matching

struct BudgetMatch {
  double uniform_epsilon = 0.0;
  double median_budget = 0.0;
  std::size_t evaluations = 0;
  bool converged = false;
};

/// Searches the uniform epsilon of a non-adaptive campaign whose median
/// perturbation budget lands within `tolerance` (relative) of `target_budget`.
/// The budget grows roughly linearly with epsilon, so proportional updates
/// are tried first and bisection takes over once the target is bracketed.
inline BudgetMatch match_uniform_epsilon(const CompletionModel& model, const Classifier* classifier,
                                         const std::vector<AttackPair>& pairs, CampaignSpec spec, double target_budget,
                                         const CampaignOptions& opts, double tolerance = 0.05,
                                         std::size_t max_evaluations = 12) {
  if (spec.attack.budget_kind == BudgetKind::adaptive) {
    throw Error(Errc::InvalidConfig, "budget matching applies to pointwise_l2 and channelwise_linf campaigns");
  }
  if (!(target_budget > 0.0)) throw Error(Errc::InvalidParam, "target budget must be positive");
  CampaignOptions fast = opts;
  fast.compute_emd = false;
  auto measure = [&](double eps) {
    spec.attack.uniform_epsilon = eps;
    std::vector<double> budgets;
    run_campaign(model, classifier, pairs, spec, fast,
                 [&](const PairOutcome& o) { budgets.push_back(o.row.metrics.perturbation_budget_cd); });
    return median(budgets);
  };
  BudgetMatch best;
  double lo = 0.0, hi = 0.0;
  double eps = spec.attack.uniform_epsilon > 0.0 ? spec.attack.uniform_epsilon : target_budget;
  for (std::size_t i = 0; i < max_evaluations; ++i) {
    const double b = measure(eps);
    ++best.evaluations;
    const double err = std::abs(b - target_budget) / target_budget;
    if (best.evaluations == 1 || err < std::abs(best.median_budget - target_budget) / target_budget) {
      best.uniform_epsilon = eps;
      best.median_budget = b;
    }
    if (err <= tolerance) {
      best.converged = true;
      break;
    }
    if (b < target_budget) lo = eps;
    else hi = eps;
    if (lo > 0.0 && hi > 0.0) eps = 0.5 * (lo + hi);
    else eps = b > 0.0 ? eps * target_budget / b : eps * 2.0;
  }
  return best;
}

// ---------------------------------------------------------------------------
// Aggregation

struct CampaignSummary {
  std::string name;
  std::string method;
  std::string budget_kind;
  double eta = 0.0;
  std::size_t k = 0;
  double t = 0.0;
  double lambda = 0.0;
  std::string latent_terms;
  double uniform_epsilon = 0.0;
  std::size_t pairs = 0;
  double median_t_nre = 0.0;
  double mean_t_nre = 0.0;
  double median_t_re_cd = 0.0;
  double median_t_re_emd = 0.0;
  double median_s_nre = 0.0;
  double median_perturbation_budget = 0.0;
  double median_outlier_count = 0.0;

  bool operator==(const CampaignSummary&) const = default;
};

inline CampaignSummary summarize(const std::string& name, const std::vector<CampaignRow>& rows) {
  if (rows.empty()) throw Error(Errc::EmptyInput, "campaign " + name + " has no rows");
  CampaignSummary s;
  s.name = name;
  const auto& f = rows.front();
  s.method = to_string(f.method);
  s.budget_kind = to_string(f.budget_kind);
  s.eta = f.eta;
  s.k = f.k;
  s.t = f.t;
  s.lambda = f.lambda;
  s.latent_terms = to_string(f.latent_terms);
  s.uniform_epsilon = f.uniform_epsilon;
  s.pairs = rows.size();
  std::vector<double> t_nre, t_cd, t_emd, s_nre, budget, outliers;
  for (const auto& r : rows) {
    t_nre.push_back(r.metrics.t_nre_cd);
    t_cd.push_back(r.metrics.t_re_cd);
    t_emd.push_back(r.metrics.t_re_emd);
    s_nre.push_back(r.metrics.s_nre);
    budget.push_back(r.metrics.perturbation_budget_cd);
    outliers.push_back(static_cast<double>(r.metrics.outlier_count));
  }
  s.median_t_nre = median(t_nre);
  s.mean_t_nre = mean(t_nre);
  s.median_t_re_cd = median(t_cd);
  s.median_t_re_emd = median(t_emd);
  s.median_s_nre = median(s_nre);
  s.median_perturbation_budget = median(budget);
  s.median_outlier_count = median(outliers);
  return s;
}

inline void to_json(nlohmann::json& j, const CampaignSummary& s) {
  j = nlohmann::json{{"name", s.name},
                     {"method", s.method},
                     {"budget_kind", s.budget_kind},
                     {"eta", s.eta},
                     {"k", s.k},
                     {"t", s.t},
                     {"lambda", s.lambda},
                     {"latent_terms", s.latent_terms},
                     {"uniform_epsilon", s.uniform_epsilon},
                     {"pairs", s.pairs},
                     {"median_t_nre", s.median_t_nre},
                     {"mean_t_nre", s.mean_t_nre},
                     {"median_t_re_cd", s.median_t_re_cd},
                     {"median_t_re_emd", s.median_t_re_emd},
                     {"median_s_nre", s.median_s_nre},
                     {"median_perturbation_budget", s.median_perturbation_budget},
                     {"median_outlier_count", s.median_outlier_count}};
}

/// Aggregate report: per-campaign summaries with the rows they were computed
/// from, so a loaded report can be checked for consistency.
inline nlohmann::json build_report(const std::vector<std::pair<std::string, std::vector<CampaignRow>>>& campaigns) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& [name, rows] : campaigns) {
    nlohmann::json entry;
    entry["summary"] = summarize(name, rows);
    nlohmann::json csv = nlohmann::json::array();
    for (const auto& r : rows) csv.push_back(r.csv_row());
    entry["rows"] = csv;
    list.push_back(entry);
  }
  return nlohmann::json{{"version", 1}, {"campaigns", list}};
}

/// Parses a report and recomputes every summary from its embedded rows.
/// Throws ParseError when a stored aggregate disagrees with its rows.
inline std::vector<CampaignSummary> verify_report(const nlohmann::json& report) {
  std::vector<CampaignSummary> out;
  try {
    for (const auto& entry : report.at("campaigns")) {
      std::vector<CampaignRow> rows;
      for (const auto& line : entry.at("rows")) rows.push_back(parse_campaign_row(line.get<std::string>()));
      const auto& stored = entry.at("summary");
      const auto s = summarize(stored.at("name").get<std::string>(), rows);
      nlohmann::json recomputed = s;
      for (const auto& [key, value] : recomputed.items()) {
        const auto& sv = stored.at(key);
        const bool same = value.is_number_float()
                              ? std::abs(value.get<double>() - sv.get<double>()) <=
                                    1e-12 * std::max(1.0, std::abs(value.get<double>()))
                              : value == sv;
        if (!same) throw Error(Errc::ParseError, "report aggregate '" + key + "' of " + s.name + " does not match its rows");
      }
      out.push_back(s);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ParseError, std::string("malformed report: ") + e.what());
  }
  return out;
}

/// Relative-ASR curve rows "campaign,threshold,fraction".
inline std::string relative_asr_csv(const std::vector<std::pair<std::string, std::vector<CampaignRow>>>& campaigns,
                                    const std::vector<double>& thresholds) {
  std::string out = "campaign,threshold,fraction\n";
  for (const auto& [name, rows] : campaigns) {
    std::vector<double> t_nre;
    for (const auto& r : rows) t_nre.push_back(r.metrics.t_nre_cd);
    for (const auto& p : relative_asr(t_nre, thresholds)) {
      out += name + "," + format_double(p.threshold) + "," + format_double(p.fraction) + "\n";
    }
  }
  return out;
}

/// Budget-kind comparison at matched budgets: medians of perturbation budget,
/// outlier count and T-NRE per campaign.
inline std::string budget_comparison_csv(const std::vector<CampaignSummary>& summaries) {
  std::string out = "campaign,method,budget_kind,eta,uniform_epsilon,pairs,median_perturbation_budget,"
                    "median_outlier_count,median_t_nre\n";
  for (const auto& s : summaries) {
    out += s.name + "," + s.method + "," + s.budget_kind + "," + format_double(s.eta) + "," +
           format_double(s.uniform_epsilon) + "," + std::to_string(s.pairs) + "," +
           format_double(s.median_perturbation_budget) + "," + format_double(s.median_outlier_count) + "," +
           format_double(s.median_t_nre) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Defense sweeps

struct DefenseSetting {
  DefenseKind kind = DefenseKind::none;
  std::string param_name;
  double param_value = 0.0;
  DefenseConfig config;
};

struct DefenseSweep {
  std::vector<double> srs_drop_rates{0.3};
  std::vector<double> or_thresholds{0.05};
  std::vector<std::size_t> sor_ks{2};
  std::vector<double> sor_alphas{1.1};
};

/// "none" followed by one setting per swept value; the other parameters stay
/// at `base`.
inline std::vector<DefenseSetting> defense_settings(const DefenseSweep& sweep, const DefenseConfig& base = {}) {
  std::vector<DefenseSetting> out{{DefenseKind::none, "none", 0.0, base}};
  for (double r : sweep.srs_drop_rates) {
    auto c = base;
    c.srs_drop_rate = r;
    out.push_back({DefenseKind::srs, "drop_rate", r, c});
  }
  for (double th : sweep.or_thresholds) {
    auto c = base;
    c.or_threshold = th;
    out.push_back({DefenseKind::outlier_removal, "threshold", th, c});
  }
  for (auto k : sweep.sor_ks) {
    for (double a : sweep.sor_alphas) {
      auto c = base;
      c.sor_k = k;
      c.sor_alpha = a;
      out.push_back({DefenseKind::sor, "k=" + std::to_string(k) + ";alpha", a, c});
    }
  }
  for (const auto& s : out) s.config.validate();
  return out;
}

struct DefenseRow {
  std::string pair_id;
  std::string input;  // "clean" or "adversarial"
  std::string defense;
  std::string param_name;
  double param_value = 0.0;
  std::string status = "ok";
  std::size_t points_kept = 0;
  double s_re = 0.0;
  double s_nre = 0.0;

  static constexpr const char* kCsvHeader = "pair_id,input,defense,param_name,param_value,status,points_kept,s_re,s_nre";

  std::string csv_row() const {
    const bool ok = status == "ok";
    return pair_id + "," + input + "," + defense + "," + param_name + "," + format_double(param_value) + "," + status +
           "," + std::to_string(points_kept) + "," + (ok ? format_double(s_re) : "") + "," +
           (ok ? format_double(s_nre) : "");
  }
};

/// Applies each setting to `cloud` and scores the completion against the
/// source ground truth. SRS seeds are mixed with the pair id.
inline std::vector<DefenseRow> defend_cloud(const CompletionModel& model, const AttackPair& pair,
                                            const PointCloud& cloud, const std::string& input,
                                            const std::vector<DefenseSetting>& settings) {
  if (!model.trained()) throw Error(Errc::ModelUntrained, "defense evaluation needs a trained completion model");
  const double den = pair.entry.s_nre_denominator ? *pair.entry.s_nre_denominator
                                                  : compute_denominators(model, pair).s_nre;
  std::vector<DefenseRow> rows;
  for (const auto& s : settings) {
    DefenseRow r;
    r.pair_id = pair.entry.pair_id;
    r.input = input;
    r.defense = to_string(s.kind);
    r.param_name = s.param_name;
    r.param_value = s.param_value;
    auto cfg = s.config;
    cfg.seed = mix_seed(cfg.seed, {detail::fnv1a(pair.entry.pair_id)});
    try {
      const auto defended = apply_defense(s.kind, cloud, cfg);
      r.points_kept = defended.size();
      r.s_re = chamfer(model.complete(defended), pair.source_gt);
      r.s_nre = normalized_error(r.s_re, den);
    } catch (const Error& e) {
      if (e.code() != Errc::AllPointsRemoved) throw;
      r.status = "all_points_removed";
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Transfer

struct TransferMatrix {
  std::vector<std::string> models;
  /// mean_t_re[i][j]: adversarials crafted on model i, completed by model j.
  std::vector<std::vector<double>> mean_t_re;
};

inline TransferMatrix transfer_matrix(const std::vector<std::pair<std::string, const CompletionModel*>>& models,
                                      const std::vector<AttackPair>& pairs, const CampaignSpec& spec,
                                      const CampaignOptions& opts = {}) {
  if (models.empty()) throw Error(Errc::EmptyInput, "transfer needs at least one model");
  if (pairs.empty()) throw Error(Errc::EmptyInput, "transfer needs at least one pair");
  TransferMatrix m;
  std::vector<PointCloud> targets;
  for (const auto& p : pairs) targets.push_back(p.target_gt);
  for (const auto& [name, source] : models) {
    m.models.push_back(name);
    std::vector<PointCloud> adversarial;
    CampaignOptions fast = opts;
    fast.compute_emd = false;
    run_campaign(*source, nullptr, pairs, spec, fast,
                 [&](const PairOutcome& o) { adversarial.push_back(o.attack.adversarial); });
    std::vector<double> row;
    for (const auto& [other_name, evaluator] : models) row.push_back(transfer_evaluate(adversarial, targets, *evaluator));
    m.mean_t_re.push_back(std::move(row));
  }
  return m;
}

inline std::string transfer_csv(const TransferMatrix& m) {
  std::string out = "crafted_on";
  for (const auto& n : m.models) out += ",evaluated_on_" + n;
  out += "\n";
  for (std::size_t i = 0; i < m.models.size(); ++i) {
    out += m.models[i];
    for (double v : m.mean_t_re[i]) out += "," + format_double(v);
    out += "\n";
  }
  return out;
}

}  // namespace pointca
