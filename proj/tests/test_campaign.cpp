#include <gtest/gtest.h>

#include <fstream>
#include <set>

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

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Short attacks keep the campaign tests fast; the full schedule runs in the
// acceptance suite.
CampaignSpec quick_spec(AttackMethod method = AttackMethod::geometry) {
  const bool latent = method == AttackMethod::latent;
  CampaignSpec s{method, attack_preset("toy", latent ? AttackMode::latent : AttackMode::geometry)};
  s.attack.iterations = 4;
  return s;
}

void run_to_csv(const std::vector<AttackPair>& pairs, const CampaignSpec& spec, const std::filesystem::path& path,
                std::size_t workers = 1) {
  CampaignCsv csv(path);
  CampaignOptions opts;
  opts.workers = workers;
  run_campaign(test::toy_completion(), nullptr, pairs, spec, opts, [&](const PairOutcome& o) { csv.append(o.row); },
               csv.completed());
}

CampaignRow row_with(const std::string& id, double t_nre, double budget, std::size_t outliers) {
  CampaignRow r;
  r.pair_id = id;
  r.source_class = "box";
  r.target_class = "sphere";
  r.eta = 5;
  r.k = 8;
  r.t = 3;
  r.metrics.t_nre_cd = t_nre;
  r.metrics.t_re_cd = t_nre / 10;
  r.metrics.perturbation_budget_cd = budget;
  r.metrics.outlier_count = outliers;
  return r;
}

}  // namespace

TEST(CampaignName, EncodesTheSweptParameters) {
  CampaignSpec s;
  s.attack.eta = 5;
  EXPECT_EQ(campaign_name(s), "geometry_adaptive_eta5_k8_t3");
  s.method = AttackMethod::latent;
  s.attack.lambda = 20;
  EXPECT_EQ(campaign_name(s), "latent_adaptive_eta5_k8_t3_lambda20_both");
  s.method = AttackMethod::geometry;
  s.attack.budget_kind = BudgetKind::pointwise_l2;
  s.attack.uniform_epsilon = 0.0125;
  EXPECT_EQ(campaign_name(s), "geometry_pointwise_l2_eta5_k8_t3_eps0.0125");
}

TEST(CampaignRow, CsvRoundTripAndParseErrors) {
  auto r = row_with("p1", 0.8125, 0.03, 7);
  r.method = AttackMethod::latent;
  r.latent_terms = LatentTerms::kl_only;
  r.lambda = 1000;
  const auto back = parse_campaign_row(r.csv_row());
  EXPECT_EQ(back.csv_row(), r.csv_row());
  EXPECT_EQ(back.method, AttackMethod::latent);
  EXPECT_EQ(back.latent_terms, LatentTerms::kl_only);
  EXPECT_EQ(back.metrics.outlier_count, 7u);
  EXPECT_EQ(code_of([] { parse_campaign_row("a,b,c"); }), Errc::ParseError);
  auto bad = r.csv_row();
  bad.replace(bad.find("latent"), 6, "bogus!");
  EXPECT_EQ(code_of([&] { parse_campaign_row(bad); }), Errc::ParseError);
  auto bad_number = r.csv_row();
  bad_number.replace(bad_number.find(",5,"), 3, ",5x,");
  EXPECT_EQ(code_of([&] { parse_campaign_row(bad_number); }), Errc::ParseError);
}

TEST(CampaignCsv, ReopenDropsTornLineAndReportsDonePairs) {
  test::TempDir dir("csv");
  const auto path = dir.path() / "c.csv";
  {
    CampaignCsv csv(path);
    csv.append(row_with("a", 1, 0.1, 1));
    csv.append(row_with("b", 2, 0.2, 2));
  }
  const auto complete = read_bytes(path);
  {
    std::ofstream out(path, std::ios::binary | std::ios::app);
    out << "c,box,sph";
  }
  CampaignCsv reopened(path);
  EXPECT_EQ(reopened.completed(), (std::set<std::string>{"a", "b"}));
  EXPECT_EQ(read_bytes(path), complete);
  EXPECT_EQ(read_campaign_csv(path).size(), 2u);
}

TEST(CampaignCsv, ReadErrors) {
  test::TempDir dir("csv");
  EXPECT_EQ(code_of([&] { read_campaign_csv(dir.path() / "missing.csv"); }), Errc::IoError);
  const auto path = dir.path() / "bad.csv";
  {
    std::ofstream out(path);
    out << CampaignRow::csv_header() << "\n" << row_with("a", 1, 0.1, 1).csv_row() << "\nnot,a,row\n";
  }
  try {
    read_campaign_csv(path);
    FAIL() << "expected a parse error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ParseError);
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
  }
}

TEST(RunCampaign, ResumedRunMatchesUninterruptedRun) {
  test::TempDir dir("resume");
  const auto pairs = test::toy_pairs(4);
  const auto spec = quick_spec();
  run_to_csv(pairs, spec, dir.path() / "full.csv");
  const std::vector<AttackPair> first_half(pairs.begin(), pairs.begin() + 2);
  run_to_csv(first_half, spec, dir.path() / "resumed.csv");
  {
    std::ofstream out(dir.path() / "resumed.csv", std::ios::binary | std::ios::app);
    out << pairs[2].entry.pair_id << ",half a row";
  }
  run_to_csv(pairs, spec, dir.path() / "resumed.csv");
  EXPECT_EQ(read_bytes(dir.path() / "resumed.csv"), read_bytes(dir.path() / "full.csv"));
}

TEST(RunCampaign, ByteIdenticalAcrossRerunsAndWorkerCounts) {
  test::TempDir dir("determinism");
  const auto pairs = test::toy_pairs(5);
  for (auto method : {AttackMethod::geometry, AttackMethod::latent, AttackMethod::random_noise}) {
    const auto spec = quick_spec(method);
    run_to_csv(pairs, spec, dir.path() / "a.csv");
    run_to_csv(pairs, spec, dir.path() / "b.csv", 3);
    EXPECT_EQ(read_bytes(dir.path() / "a.csv"), read_bytes(dir.path() / "b.csv")) << to_string(method);
    std::filesystem::remove(dir.path() / "a.csv");
    std::filesystem::remove(dir.path() / "b.csv");
  }
}

TEST(RunCampaign, PairResultDoesNotDependOnCampaignMembership) {
  const auto pairs = test::toy_pairs(3);
  const auto spec = quick_spec();
  const auto all = run_campaign(test::toy_completion(), nullptr, pairs, spec);
  const auto alone = run_campaign(test::toy_completion(), nullptr, {pairs[2]}, spec);
  EXPECT_EQ(alone[0].row.csv_row(), all[2].row.csv_row());
  EXPECT_NE(pair_seed(1, pairs[0].entry.pair_id), pair_seed(1, pairs[1].entry.pair_id));
}

TEST(RunCampaign, Errors) {
  const auto pairs = test::toy_pairs(1);
  auto spec = quick_spec();
  spec.attack.iterations = 0;
  EXPECT_EQ(code_of([&] { run_campaign(test::toy_completion(), nullptr, pairs, spec); }), Errc::InvalidConfig);
  EXPECT_EQ(code_of([&] { run_campaign(CompletionModel::create({}, 1), nullptr, pairs, quick_spec()); }),
            Errc::ModelUntrained);
  EXPECT_EQ(code_of([&] {
              run_campaign(test::toy_completion(), nullptr, pairs, quick_spec(AttackMethod::classification_noise));
            }),
            Errc::ModelUntrained);
}

TEST(EvaluateAdversarial, CleanSourceScoresOneAndZeroBudget) {
  const auto pair = test::toy_pairs(1)[0];
  const auto r = evaluate_adversarial(test::toy_completion(), pair, pair.source_partial);
  EXPECT_EQ(r.s_nre, 1.0);
  EXPECT_EQ(r.perturbation_budget_cd, 0.0);
  EXPECT_EQ(r.s_nre_denominator, *pair.entry.s_nre_denominator);
  EXPECT_GT(r.t_re_emd, 0.0);
  const auto tgt = evaluate_adversarial(test::toy_completion(), pair, pair.target_partial);
  EXPECT_EQ(tgt.t_nre_cd, 1.0);
}

TEST(Grid, ExpansionMultipliesOnlyApplicableAxes) {
  CampaignGrid g;
  g.methods = {AttackMethod::geometry, AttackMethod::latent};
  g.budget_kinds = {BudgetKind::adaptive, BudgetKind::pointwise_l2};
  g.etas = {1.5, 5};
  g.lambdas = {1, 20};
  g.uniform_epsilons = {0.01, 0.02};
  const auto specs = expand_grid(g, attack_preset("toy", AttackMode::geometry), attack_preset("toy", AttackMode::latent));
  // geometry: 2 etas x (1 adaptive + 2 epsilons); latent: the same times 2 lambdas
  EXPECT_EQ(specs.size(), 18u);
  std::set<std::string> names;
  for (const auto& s : specs) {
    names.insert(campaign_name(s));
    EXPECT_EQ(s.attack.mode, s.method == AttackMethod::latent ? AttackMode::latent : AttackMode::geometry);
  }
  EXPECT_EQ(names.size(), specs.size());

  CampaignGrid defaults;
  defaults.methods = {AttackMethod::latent};
  const auto latent_base = attack_preset("toy", AttackMode::latent);
  const auto one = expand_grid(defaults, attack_preset("toy", AttackMode::geometry), latent_base);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].attack.lambda, latent_base.lambda);
}

TEST(Report, SummaryHandCaseAndVerification) {
  const std::vector<CampaignRow> rows{row_with("a", 0.5, 0.01, 3), row_with("b", 1.5, 0.03, 1), row_with("c", 1.0, 0.02, 2)};
  const auto s = summarize("toy", rows);
  EXPECT_EQ(s.pairs, 3u);
  EXPECT_DOUBLE_EQ(s.median_t_nre, 1.0);
  EXPECT_DOUBLE_EQ(s.mean_t_nre, 1.0);
  EXPECT_DOUBLE_EQ(s.median_perturbation_budget, 0.02);
  EXPECT_DOUBLE_EQ(s.median_outlier_count, 2.0);

  auto report = build_report({{"toy", rows}});
  const auto verified = verify_report(report);
  ASSERT_EQ(verified.size(), 1u);
  EXPECT_EQ(verified[0], s);

  report["campaigns"][0]["summary"]["median_t_nre"] = 0.9;
  EXPECT_EQ(code_of([&] { verify_report(report); }), Errc::ParseError);
  EXPECT_EQ(code_of([] { verify_report(nlohmann::json{{"version", 1}}); }), Errc::ParseError);
  EXPECT_EQ(code_of([] { summarize("empty", {}); }), Errc::EmptyInput);
}

TEST(Report, RelativeAsrAndComparisonCsv) {
  const std::vector<CampaignRow> rows{row_with("a", 0.5, 0.01, 3), row_with("b", 1.5, 0.03, 1)};
  const auto asr = relative_asr_csv({{"toy", rows}}, {1.0, 2.0});
  EXPECT_EQ(asr, "campaign,threshold,fraction\ntoy,1,0.5\ntoy,2,1\n");
  const auto cmp = budget_comparison_csv({summarize("toy", rows)});
  EXPECT_EQ(cmp.substr(cmp.find('\n') + 1), "toy,geometry,adaptive,5,0,2,0.02,2,1\n");
}

TEST(BudgetMatching, RandomNoiseConvergesWithinTolerance) {
  const auto pairs = test::toy_pairs(6);
  auto spec = quick_spec(AttackMethod::random_noise);
  spec.attack.budget_kind = BudgetKind::pointwise_l2;
  spec.attack.uniform_epsilon = 0.01;
  std::vector<double> budgets;
  for (const auto& o : run_campaign(test::toy_completion(), nullptr, pairs, spec)) {
    budgets.push_back(o.row.metrics.perturbation_budget_cd);
  }
  const double target = median(budgets);
  spec.attack.uniform_epsilon = 0.1;
  const auto m = match_uniform_epsilon(test::toy_completion(), nullptr, pairs, spec, target, {});
  EXPECT_TRUE(m.converged);
  EXPECT_LE(std::abs(m.median_budget - target), 0.05 * target);

  spec.attack.budget_kind = BudgetKind::adaptive;
  EXPECT_EQ(code_of([&] { match_uniform_epsilon(test::toy_completion(), nullptr, pairs, spec, target, {}); }),
            Errc::InvalidConfig);
  spec.attack.budget_kind = BudgetKind::channelwise_linf;
  EXPECT_EQ(code_of([&] { match_uniform_epsilon(test::toy_completion(), nullptr, pairs, spec, 0.0, {}); }),
            Errc::InvalidParam);
}

TEST(DefenseSweep, SettingsAndRows) {
  DefenseSweep sweep;
  sweep.srs_drop_rates = {0.1, 0.3};
  sweep.sor_alphas = {0.5, 1.1, 2.0};
  const auto settings = defense_settings(sweep);
  ASSERT_EQ(settings.size(), 1u + 2u + 1u + 3u);
  EXPECT_EQ(settings[0].kind, DefenseKind::none);

  const auto pair = test::toy_pairs(1)[0];
  const auto rows = defend_cloud(test::toy_completion(), pair, pair.source_partial, "clean", settings);
  ASSERT_EQ(rows.size(), settings.size());
  EXPECT_EQ(rows[0].s_nre, 1.0);
  EXPECT_EQ(rows[0].points_kept, pair.source_partial.size());
  EXPECT_EQ(rows[1].points_kept, static_cast<std::size_t>(std::ceil(0.9 * static_cast<double>(pair.source_partial.size()))));

  DefenseSweep tiny;
  tiny.srs_drop_rates = {};
  tiny.sor_ks = {};
  tiny.or_thresholds = {1e-9};
  const auto emptied = defend_cloud(test::toy_completion(), pair, pair.source_partial, "clean", defense_settings(tiny));
  ASSERT_EQ(emptied.size(), 2u);
  EXPECT_EQ(emptied[1].status, "all_points_removed");
  EXPECT_TRUE(emptied[1].csv_row().ends_with(",,"));

  DefenseSweep bad;
  bad.srs_drop_rates = {1.5};
  EXPECT_EQ(code_of([&] { defense_settings(bad); }), Errc::InvalidConfig);
}

TEST(Transfer, MatrixShapeAndSelfConsistency) {
  const auto pairs = test::toy_pairs(2);
  const auto& m = test::toy_completion();
  const auto t = transfer_matrix({{"a", &m}, {"b", &m}}, pairs, quick_spec());
  ASSERT_EQ(t.mean_t_re.size(), 2u);
  for (const auto& row : t.mean_t_re) {
    ASSERT_EQ(row.size(), 2u);
    EXPECT_EQ(row[0], t.mean_t_re[0][0]);
    EXPECT_EQ(row[1], t.mean_t_re[0][0]);
  }
  const auto csv = transfer_csv(t);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "crafted_on,evaluated_on_a,evaluated_on_b");
  EXPECT_EQ(code_of([&] { transfer_matrix({}, pairs, quick_spec()); }), Errc::EmptyInput);
  EXPECT_EQ(code_of([&] { transfer_matrix({{"a", &m}}, {}, quick_spec()); }), Errc::EmptyInput);
}
