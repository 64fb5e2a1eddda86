// pointca: command-line driver for data generation, training, attack
// campaigns, defense sweeps, reports and transfer matrices.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pointca/campaign.hpp"
#include "pointca/config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pointca;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitRuntime = 4;

int exit_code_for(Errc code) {
  switch (code) {
    case Errc::InvalidConfig:
    case Errc::InvalidParam:
    case Errc::InvalidSpec:
    case Errc::InvalidViewpoint:
      return kExitConfig;
    case Errc::IoError:
    case Errc::ParseError:
    case Errc::VersionMismatch:
    case Errc::EmptyDataset:
    case Errc::EmptyInput:
    case Errc::TooFewClasses:
    case Errc::ModelUntrained:
      return kExitData;
    default:
      return kExitRuntime;
  }
}

// ---------------------------------------------------------------------------
// Key tables

json number_list(std::initializer_list<double> v) { return json(std::vector<double>(v)); }

const ConfigKey kOutputDir{"output_dir", "string", "", "output directory (POINTCA_OUTPUT_DIR overrides the config file)"};

ConfigKey output_dir_key(const std::string& def) {
  auto k = kOutputDir;
  k.default_value = def;
  return k;
}

const ConfigKey kDataset{"dataset", "string", "data", "dataset directory written by gen-data"};
const ConfigKey kManifest{"manifest", "string", "", "pair manifest (default: <dataset>/manifest.json)"};
const ConfigKey kModel{"model", "string", "models/completion.pcaw", "completion model weights"};

KeyTable gen_data_keys() {
  const DatasetConfig d;
  return {output_dir_key("data"),
          {"objects_per_class", "int", d.objects_per_class, "objects generated per shape class"},
          {"test_objects_per_class", "int", d.test_objects_per_class, "of those, objects held out for testing and attacks"},
          {"views_per_object", "int", d.views_per_object, "partial views rendered per object"},
          {"complete_points", "int", d.complete_points, "points per ground-truth cloud"},
          {"partial_points", "int", d.partial_points, "points per partial cloud"},
          {"raster", "int", d.raster, "depth raster resolution per side"},
          {"depth_tolerance", "number", d.depth_tolerance, "depth slack for visibility"},
          {"view_distance", "number", d.view_distance, "camera distance from the origin (> 1)"},
          {"min_scale", "number", d.min_scale, "smallest object half-extent"},
          {"max_scale", "number", d.max_scale, "largest object half-extent"},
          {"seed", "int", d.seed, "dataset seed"},
          {"sources_per_class", "int", 10, "attack sources drawn per class for the manifest"},
          {"targets_top_n", "int", 3, "nearest targets per (source, foreign class)"},
          {"manifest_seed", "int", 11, "source sampling seed"}};
}

KeyTable train_keys() {
  const ModelArch a;
  const TrainConfig t;
  return {kDataset,
          output_dir_key("models"),
          {"name", "string", "completion", "weight file stem"},
          {"seed", "int", 1, "weight initialization seed"},
          {"epochs", "int", t.epochs, "training epochs"},
          {"batch_size", "int", t.batch_size, "samples per Adam step"},
          {"learning_rate", "number", t.learning_rate, "Adam learning rate"},
          {"shuffle_seed", "int", t.seed, "mini-batch shuffling seed"},
          {"point_hidden", "int", a.point_hidden, "hidden width of the shared point MLP"},
          {"feature_dim", "int", a.feature_dim, "global feature width"},
          {"decoder_hidden", "int", a.decoder_hidden, "hidden width of the decoder"},
          {"output_points", "int", a.output_points, "points per completion"}};
}

KeyTable train_classifier_keys() {
  const ClassifierArch a;
  const TrainConfig t;
  return {kDataset,
          output_dir_key("models"),
          {"name", "string", "classifier", "weight file stem"},
          {"seed", "int", 3, "weight initialization seed"},
          {"epochs", "int", 30, "training epochs"},
          {"batch_size", "int", t.batch_size, "samples per Adam step"},
          {"learning_rate", "number", t.learning_rate, "Adam learning rate"},
          {"shuffle_seed", "int", t.seed, "mini-batch shuffling seed"},
          {"point_hidden", "int", a.point_hidden, "hidden width of the shared point MLP"},
          {"feature_dim", "int", a.feature_dim, "global feature width"},
          {"head_hidden", "int", a.head_hidden, "hidden width of the classification head"}};
}

// Keys shared by attack and transfer that adjust the victim preset.
KeyTable schedule_keys() {
  return {{"victim", "string", "toy", "step-schedule preset: toy, pcn, rfa, grnet or vrcnet"},
          {"iterations", "int", 0, "attack iterations (0: preset)"},
          {"base_step", "number", 0.0, "initial step size (0: preset)"},
          {"decay_rate", "number", 0.0, "step decay factor (0: preset)"},
          {"decay_step", "int", 0, "iterations between decays (0: preset)"},
          {"init_noise_scale", "number", 0.01, "half-width of the uniform initial perturbation"},
          {"seed", "int", 0, "campaign seed, mixed with each pair id"},
          {"max_pairs", "int", 0, "evenly spaced subset of the manifest (0: all)"},
          {"workers", "int", 1, "parallel attack threads (results do not depend on it)"}};
}

KeyTable attack_keys() {
  KeyTable t{kDataset,
             kManifest,
             kModel,
             {"classifier", "string", "", "classifier weights (required for classification_noise)"},
             output_dir_key("campaigns"),
             {"methods", "string[]", json{"geometry"}, "geometry, latent, random_noise, classification_noise"},
             {"budget_kinds", "string[]", json{"adaptive"}, "adaptive, pointwise_l2, channelwise_linf"},
             {"etas", "number[]", number_list({5.0}), "adaptive budget scales"},
             {"ks", "int[]", json{kDefaultNeighbors}, "neighborhood sizes of the adaptive budget"},
             {"ts", "number[]", number_list({kDefaultUniformityWeight}), "uniformity weights of the adaptive budget"},
             {"lambdas", "number[]", json::array(), "KL weights for latent campaigns (empty: preset)"},
             {"latent_terms", "string[]", json{"both"}, "latent loss components: both, l2_only, kl_only"},
             {"uniform_epsilons", "number[]", number_list({0.05}), "radii of the non-adaptive budgets"},
             {"match_budget", "bool", false,
              "replace each non-adaptive radius by the one matching the median budget of the adaptive campaign"},
             {"noise_sigma", "number", kRandomNoiseSigma, "standard deviation of the random-noise baseline"},
             {"save_adversarial", "bool", true, "write <campaign>/<pair_id>.xyz per attacked pair"},
             {"compute_emd", "bool", true, "include the EMD column"}};
  for (auto& k : schedule_keys()) t.push_back(k);
  return t;
}

KeyTable defend_keys() {
  return {kDataset,
          kManifest,
          kModel,
          {"campaign", "string", "", "campaign CSV written by attack (its adversarial clouds are read too)"},
          output_dir_key("defense"),
          {"srs_drop_rates", "number[]", number_list({0.1, 0.2, 0.3}), "SRS drop rates"},
          {"or_thresholds", "number[]", number_list({0.03, 0.05, 0.07}), "OR mean-distance thresholds"},
          {"sor_ks", "int[]", json{2, 8, 10}, "SOR neighborhood sizes (OR keeps K = 2)"},
          {"sor_alphas", "number[]", number_list({0.7, 1.1, 1.5}), "SOR interval multipliers"},
          {"seed", "int", 0, "SRS seed, mixed with each pair id"}};
}

KeyTable report_keys() {
  std::vector<double> taus;
  for (int i = 1; i <= 16; ++i) taus.push_back(0.25 * i);
  return {{"campaigns", "string[]", json::array(), "campaign CSVs (positional arguments are appended)"},
          {"defense_results", "string[]", json::array(), "defense CSVs to summarize"},
          output_dir_key("reports"),
          {"thresholds", "number[]", taus, "Relative-ASR success thresholds"},
          {"verify", "string", "", "only check an existing report.json against its rows"}};
}

KeyTable transfer_keys() {
  KeyTable t{kDataset,
             kManifest,
             {"models", "object", json::object(), "name -> completion weights, e.g. {\"a\": \"models/a.pcaw\"}"},
             output_dir_key("transfer"),
             {"method", "string", "geometry", "geometry or latent"},
             {"budget_kind", "string", "adaptive", "adaptive, pointwise_l2 or channelwise_linf"},
             {"eta", "number", 5.0, "adaptive budget scale"},
             {"k", "int", kDefaultNeighbors, "adaptive neighborhood size"},
             {"t", "number", kDefaultUniformityWeight, "adaptive uniformity weight"},
             {"lambda", "number", -1.0, "latent KL weight (negative: preset)"},
             {"uniform_epsilon", "number", 0.05, "radius of a non-adaptive budget"}};
  for (auto& k : schedule_keys()) t.push_back(k);
  for (auto& k : t) {
    if (k.name == "max_pairs") k.default_value = 20;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Shared helpers

template <typename T>
T get(const json& c, const std::string& key) {
  return config_get<T>(c, key);
}

fs::path output_dir(const json& c) {
  const fs::path dir = get<std::string>(c, "output_dir");
  fs::create_directories(dir);
  return dir;
}

fs::path manifest_path(const json& c) {
  const auto m = get<std::string>(c, "manifest");
  return m.empty() ? fs::path(get<std::string>(c, "dataset")) / "manifest.json" : fs::path(m);
}

struct Inputs {
  Dataset dataset;
  PairManifest manifest;
};

Inputs load_inputs(const json& c) {
  const fs::path dir = get<std::string>(c, "dataset");
  Inputs in{read_dataset(dir), read_manifest(manifest_path(c), dir)};
  return in;
}

std::size_t to_size(const json& c, const std::string& key) {
  const auto v = get<long long>(c, key);
  if (v < 0) throw Error(Errc::InvalidConfig, "configuration key '" + key + "' must be nonnegative");
  return static_cast<std::size_t>(v);
}

AttackConfig schedule_from(const json& c, AttackMode mode) {
  auto a = attack_preset(get<std::string>(c, "victim"), mode);
  if (auto n = to_size(c, "iterations")) a.iterations = n;
  if (double b = get<double>(c, "base_step"); b > 0.0) a.base_step = b;
  if (double d = get<double>(c, "decay_rate"); d > 0.0) a.decay_rate = d;
  if (auto s = to_size(c, "decay_step")) a.decay_step = s;
  a.init_noise_scale = get<double>(c, "init_noise_scale");
  a.seed = get<std::uint64_t>(c, "seed");
  return a;
}

template <typename Model>
Model load_model(const std::string& path) {
  auto m = load_weights<Model>(path);
  if (!m.trained()) throw Error(Errc::ModelUntrained, path + " holds untrained weights");
  return m;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::IoError, "cannot write " + path.string());
  out << text;
}

double median_or_nan(const std::vector<double>& v) {
  return v.empty() ? std::numeric_limits<double>::quiet_NaN() : median(v);
}

// ---------------------------------------------------------------------------
// Commands

void cmd_gen_data(const json& c) {
  DatasetConfig d;
  d.objects_per_class = to_size(c, "objects_per_class");
  d.test_objects_per_class = to_size(c, "test_objects_per_class");
  d.views_per_object = to_size(c, "views_per_object");
  d.complete_points = to_size(c, "complete_points");
  d.partial_points = to_size(c, "partial_points");
  d.raster = to_size(c, "raster");
  d.depth_tolerance = get<double>(c, "depth_tolerance");
  d.view_distance = get<double>(c, "view_distance");
  d.min_scale = get<double>(c, "min_scale");
  d.max_scale = get<double>(c, "max_scale");
  d.seed = get<std::uint64_t>(c, "seed");
  const auto dir = output_dir(c);
  const auto ds = generate_dataset(d);
  write_dataset(ds, dir);
  const auto manifest =
      build_pair_manifest(ds, to_size(c, "sources_per_class"), to_size(c, "targets_top_n"), get<std::uint64_t>(c, "manifest_seed"));
  write_manifest(manifest, dir / "manifest.json");
  std::cout << "wrote " << ds.objects.size() << " objects x " << d.views_per_object << " views and "
            << manifest.entries.size() << " attack pairs to " << dir.string() << "\n";
}

void write_loss_csv(const fs::path& path, const TrainHistory& h) {
  std::string csv = "epoch,loss\n0," + format_double(h.initial_loss) + "\n";
  for (std::size_t e = 0; e < h.epoch_loss.size(); ++e) csv += std::to_string(e + 1) + "," + format_double(h.epoch_loss[e]) + "\n";
  write_text(path, csv);
}

TrainConfig train_config_from(const json& c) {
  TrainConfig t;
  t.epochs = to_size(c, "epochs");
  t.batch_size = to_size(c, "batch_size");
  t.learning_rate = get<double>(c, "learning_rate");
  t.seed = get<std::uint64_t>(c, "shuffle_seed");
  return t;
}

auto epoch_logger(std::size_t epochs) {
  return [epochs](std::size_t e, double loss) {
    std::cerr << "epoch " << e + 1 << "/" << epochs << " loss " << format_double(loss) << "\n";
  };
}

void cmd_train(const json& c) {
  ModelArch a;
  a.point_hidden = to_size(c, "point_hidden");
  a.feature_dim = to_size(c, "feature_dim");
  a.decoder_hidden = to_size(c, "decoder_hidden");
  a.output_points = to_size(c, "output_points");
  const auto tc = train_config_from(c);
  const auto ds = read_dataset(get<std::string>(c, "dataset"));
  auto model = CompletionModel::create(a, get<std::uint64_t>(c, "seed"));
  const auto data = completion_samples(ds, false);
  const auto h = train_completion(model, data, tc, epoch_logger(tc.epochs));
  const auto dir = output_dir(c);
  const auto name = get<std::string>(c, "name");
  save_weights(model, (dir / (name + ".pcaw")).string());
  write_loss_csv(dir / (name + "_loss.csv"), h);
  std::vector<double> test_cd;
  for (const auto& s : completion_samples(ds, true)) test_cd.push_back(chamfer(model.complete(s.input), s.complete));
  std::cout << "trained " << name << " on " << data.size() << " samples; median test CD-P "
            << format_double(median_or_nan(test_cd)) << "\n";
}

void cmd_train_classifier(const json& c) {
  ClassifierArch a;
  a.point_hidden = to_size(c, "point_hidden");
  a.feature_dim = to_size(c, "feature_dim");
  a.head_hidden = to_size(c, "head_hidden");
  a.class_count = kShapeClassCount;
  const auto tc = train_config_from(c);
  const auto ds = read_dataset(get<std::string>(c, "dataset"));
  auto model = Classifier::create(a, get<std::uint64_t>(c, "seed"));
  const auto data = classifier_samples(ds, false);
  const auto h = train_classifier(model, data, tc, epoch_logger(tc.epochs));
  const auto dir = output_dir(c);
  const auto name = get<std::string>(c, "name");
  save_weights(model, (dir / (name + ".pcaw")).string());
  write_loss_csv(dir / (name + "_loss.csv"), h);
  const auto test = completion_samples(ds, true);
  std::size_t hits = 0;
  for (const auto& s : test) hits += model.predict(s.input) == static_cast<std::size_t>(s.label);
  std::cout << "trained " << name << " on " << data.size() << " samples; test accuracy on partials "
            << format_double(test.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(test.size())) << "\n";
}

template <typename T, typename F>
std::vector<T> parse_list(const json& c, const std::string& key, F parse) {
  std::vector<T> out;
  for (const auto& s : get<std::vector<std::string>>(c, key)) out.push_back(parse(s));
  return out;
}

void cmd_attack(const json& c) {
  CampaignGrid grid;
  grid.methods = parse_list<AttackMethod>(c, "methods", attack_method_from_string);
  grid.budget_kinds = parse_list<BudgetKind>(c, "budget_kinds", budget_kind_from_string);
  grid.latent_terms = parse_list<LatentTerms>(c, "latent_terms", latent_terms_from_string);
  grid.etas = get<std::vector<double>>(c, "etas");
  grid.ks = get<std::vector<std::size_t>>(c, "ks");
  grid.ts = get<std::vector<double>>(c, "ts");
  grid.lambdas = get<std::vector<double>>(c, "lambdas");
  grid.uniform_epsilons = get<std::vector<double>>(c, "uniform_epsilons");
  const bool match = get<bool>(c, "match_budget");
  auto specs = expand_grid(grid, schedule_from(c, AttackMode::geometry), schedule_from(c, AttackMode::latent));
  for (const auto& s : specs) s.attack.validate();
  if (specs.empty()) throw Error(Errc::InvalidConfig, "the attack grid is empty");
  // Adaptive campaigns first, so matched campaigns can read their budgets.
  std::stable_partition(specs.begin(), specs.end(),
                        [](const CampaignSpec& s) { return s.attack.budget_kind == BudgetKind::adaptive; });

  auto in = load_inputs(c);
  const auto model = load_model<CompletionModel>(get<std::string>(c, "model"));
  std::optional<Classifier> classifier;
  if (const auto p = get<std::string>(c, "classifier"); !p.empty()) classifier = load_model<Classifier>(p);
  annotate_denominators(in.manifest, in.dataset, model);
  const auto pairs = resolve_pairs(in.dataset, in.manifest, to_size(c, "max_pairs"));

  CampaignOptions opts;
  opts.workers = std::max<std::size_t>(1, to_size(c, "workers"));
  opts.compute_emd = get<bool>(c, "compute_emd");
  opts.noise_sigma = get<double>(c, "noise_sigma");
  const bool save_adv = get<bool>(c, "save_adversarial");
  const auto dir = output_dir(c);
  std::map<std::string, double> adaptive_budget;
  json matches = json::object();

  for (auto spec : specs) {
    if (match && spec.attack.budget_kind != BudgetKind::adaptive) {
      auto counterpart = spec;
      counterpart.attack.budget_kind = BudgetKind::adaptive;
      counterpart.attack.uniform_epsilon = schedule_from(c, AttackMode::geometry).uniform_epsilon;
      const auto it = adaptive_budget.find(campaign_name(counterpart));
      if (it == adaptive_budget.end()) {
        throw Error(Errc::InvalidConfig, "match_budget needs \"adaptive\" in budget_kinds for " + campaign_name(spec));
      }
      const auto m = match_uniform_epsilon(model, classifier ? &*classifier : nullptr, pairs, spec, it->second, opts);
      matches[campaign_name(counterpart) + "/" + to_string(spec.attack.budget_kind)] = {
          {"target_budget", it->second}, {"uniform_epsilon", m.uniform_epsilon}, {"median_budget", m.median_budget},
          {"evaluations", m.evaluations}, {"converged", m.converged}};
      std::cerr << to_string(spec.attack.budget_kind) << ": epsilon " << format_double(m.uniform_epsilon)
                << " gives median budget " << format_double(m.median_budget) << " (target " << format_double(it->second)
                << (m.converged ? ")" : ", not within 5%)") << "\n";
      spec.attack.uniform_epsilon = m.uniform_epsilon;
    }
    const auto name = campaign_name(spec);
    const auto csv_path = dir / (name + ".csv");
    const auto adv_dir = dir / name;
    if (save_adv) fs::create_directories(adv_dir);
    CampaignCsv csv(csv_path);
    const auto skipped = csv.completed().size();
    std::size_t done = 0;
    run_campaign(model, classifier ? &*classifier : nullptr, pairs, spec, opts,
                 [&](const PairOutcome& o) {
                   if (save_adv) write_xyz(o.attack.adversarial, (adv_dir / (o.row.pair_id + ".xyz")).string());
                   csv.append(o.row);
                   ++done;
                   std::cerr << "\r" << name << ": " << done + skipped << "/" << pairs.size() << std::flush;
                 },
                 csv.completed());
    std::cerr << "\n";
    const auto rows = read_campaign_csv(csv_path);
    const auto s = summarize(name, rows);
    if (spec.attack.budget_kind == BudgetKind::adaptive) adaptive_budget[name] = s.median_perturbation_budget;
    std::cout << name << ": " << rows.size() << " pairs (" << skipped << " resumed), median T-NRE "
              << format_double(s.median_t_nre) << ", median budget " << format_double(s.median_perturbation_budget)
              << ", median outliers " << format_double(s.median_outlier_count) << "\n";
  }
  if (!matches.empty()) write_json_file(matches, dir / "budget_match.json");
}

void cmd_defend(const json& c) {
  const fs::path campaign = get<std::string>(c, "campaign");
  if (campaign.empty()) throw Error(Errc::InvalidConfig, "defend needs a campaign CSV (--set campaign=...)");
  const auto rows = read_campaign_csv(campaign);
  const fs::path adv_dir = campaign.parent_path() / campaign.stem();
  auto in = load_inputs(c);
  const auto model = load_model<CompletionModel>(get<std::string>(c, "model"));

  DefenseSweep sweep;
  sweep.srs_drop_rates = get<std::vector<double>>(c, "srs_drop_rates");
  sweep.or_thresholds = get<std::vector<double>>(c, "or_thresholds");
  sweep.sor_ks = get<std::vector<std::size_t>>(c, "sor_ks");
  sweep.sor_alphas = get<std::vector<double>>(c, "sor_alphas");
  DefenseConfig base;
  base.seed = get<std::uint64_t>(c, "seed");
  const auto settings = defense_settings(sweep, base);

  std::map<std::string, const PairEntry*> by_id;
  for (const auto& e : in.manifest.entries) by_id[e.pair_id] = &e;
  std::string out = std::string(DefenseRow::kCsvHeader) + "\n";
  std::map<std::string, std::vector<double>> adv_nre;
  for (const auto& r : rows) {
    const auto it = by_id.find(r.pair_id);
    if (it == by_id.end()) throw Error(Errc::ParseError, "pair " + r.pair_id + " is not in the manifest");
    auto entry = *it->second;
    const auto pair = resolve_pair(in.dataset, entry);
    const auto adv = read_xyz((adv_dir / (r.pair_id + ".xyz")).string(), CloudKind::adversarial);
    for (const auto& [cloud, input] : {std::pair{&pair.source_partial, "clean"}, std::pair{&adv, "adversarial"}}) {
      for (const auto& d : defend_cloud(model, pair, *cloud, input, settings)) {
        out += d.csv_row() + "\n";
        if (std::string(input) == "adversarial" && d.status == "ok") {
          adv_nre[d.defense + " " + d.param_name + "=" + format_double(d.param_value)].push_back(d.s_nre);
        }
      }
    }
  }
  const auto dir = output_dir(c);
  const auto path = dir / (campaign.stem().string() + "_defense.csv");
  write_text(path, out);
  std::cout << "wrote " << path.string() << "\n";
  for (const auto& [setting, v] : adv_nre) {
    std::cout << "  adversarial median S-NRE " << setting << ": " << format_double(median(v)) << "\n";
  }
}

// Median S-NRE per (input, defense, parameter) of defense CSVs.
std::string defense_summary_csv(const std::vector<std::string>& paths) {
  std::map<std::string, std::vector<double>> groups;
  std::map<std::string, std::size_t> removed;
  for (const auto& p : paths) {
    std::ifstream in(p);
    if (!in) throw Error(Errc::IoError, "cannot read " + p);
    std::string line;
    if (!std::getline(in, line) || line != DefenseRow::kCsvHeader) throw Error(Errc::ParseError, p + ": unexpected header");
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto cells = detail::split_csv(line);
      if (cells.size() != 9) throw Error(Errc::ParseError, p + ":" + std::to_string(line_no) + ": expected 9 columns");
      const std::string key = fs::path(p).stem().string() + "," + cells[1] + "," + cells[2] + "," + cells[3] + "," + cells[4];
      auto& g = groups[key];
      if (cells[5] == "ok") g.push_back(detail::parse_number(cells[8], "s_nre"));
      else ++removed[key];
    }
  }
  std::string out = "source,input,defense,param_name,param_value,pairs,all_points_removed,median_s_nre\n";
  for (const auto& [key, v] : groups) {
    out += key + "," + std::to_string(v.size() + removed[key]) + "," + std::to_string(removed[key]) + "," +
           (v.empty() ? "" : format_double(median(v))) + "\n";
  }
  return out;
}

void print_summaries(const std::vector<CampaignSummary>& summaries) {
  for (const auto& s : summaries) {
    std::cout << s.name << ": pairs " << s.pairs << ", median T-NRE " << format_double(s.median_t_nre) << ", mean T-NRE "
              << format_double(s.mean_t_nre) << ", median budget " << format_double(s.median_perturbation_budget)
              << ", median outliers " << format_double(s.median_outlier_count) << "\n";
  }
}

void cmd_report(const json& c) {
  if (const auto v = get<std::string>(c, "verify"); !v.empty()) {
    print_summaries(verify_report(read_json_file(v)));
    std::cout << "report aggregates match their rows\n";
    return;
  }
  const auto files = get<std::vector<std::string>>(c, "campaigns");
  if (files.empty()) throw Error(Errc::InvalidConfig, "report needs at least one campaign CSV");
  std::vector<std::pair<std::string, std::vector<CampaignRow>>> campaigns;
  for (const auto& f : files) campaigns.emplace_back(fs::path(f).stem().string(), read_campaign_csv(f));
  const auto dir = output_dir(c);
  const auto report = build_report(campaigns);
  write_json_file(report, dir / "report.json");
  const auto summaries = verify_report(read_json_file(dir / "report.json"));
  write_text(dir / "relative_asr.csv", relative_asr_csv(campaigns, get<std::vector<double>>(c, "thresholds")));
  write_text(dir / "budget_comparison.csv", budget_comparison_csv(summaries));
  std::string written = "report.json, relative_asr.csv, budget_comparison.csv";
  if (const auto d = get<std::vector<std::string>>(c, "defense_results"); !d.empty()) {
    write_text(dir / "defense_summary.csv", defense_summary_csv(d));
    written += ", defense_summary.csv";
  }
  print_summaries(summaries);
  std::cout << "wrote " << written << " to " << dir.string() << "\n";
}

void cmd_transfer(const json& c) {
  const auto paths = get<std::map<std::string, std::string>>(c, "models");
  if (paths.empty()) throw Error(Errc::InvalidConfig, "transfer needs at least one entry in models");
  const auto method = attack_method_from_string(get<std::string>(c, "method"));
  if (method != AttackMethod::geometry && method != AttackMethod::latent) {
    throw Error(Errc::InvalidConfig, "transfer supports the geometry and latent methods");
  }
  const auto mode = method == AttackMethod::latent ? AttackMode::latent : AttackMode::geometry;
  CampaignSpec spec{method, schedule_from(c, mode)};
  spec.attack.budget_kind = budget_kind_from_string(get<std::string>(c, "budget_kind"));
  spec.attack.eta = get<double>(c, "eta");
  spec.attack.k = to_size(c, "k");
  spec.attack.t = get<double>(c, "t");
  if (double l = get<double>(c, "lambda"); l >= 0.0) spec.attack.lambda = l;
  spec.attack.uniform_epsilon = get<double>(c, "uniform_epsilon");
  spec.attack.validate();

  auto in = load_inputs(c);
  std::vector<CompletionModel> models;
  models.reserve(paths.size());
  std::vector<std::pair<std::string, const CompletionModel*>> named;
  for (const auto& [name, path] : paths) models.push_back(load_model<CompletionModel>(path));
  std::size_t i = 0;
  for (const auto& [name, path] : paths) named.emplace_back(name, &models[i++]);
  annotate_denominators(in.manifest, in.dataset, models.front());
  const auto pairs = resolve_pairs(in.dataset, in.manifest, to_size(c, "max_pairs"));
  CampaignOptions opts;
  opts.workers = std::max<std::size_t>(1, to_size(c, "workers"));
  const auto matrix = transfer_matrix(named, pairs, spec, opts);
  const auto path = output_dir(c) / (campaign_name(spec) + "_transfer.csv");
  const auto csv = transfer_csv(matrix);
  write_text(path, csv);
  std::cout << csv << "wrote " << path.string() << "\n";
}

// ---------------------------------------------------------------------------
// Wiring

struct Command {
  Command(std::string n, std::string a, KeyTable k, void (*r)(const json&))
      : name(std::move(n)), about(std::move(a)), keys(std::move(k)), run(r) {}

  std::string name;
  std::string about;
  KeyTable keys;
  void (*run)(const json&);
  std::string config_file;
  std::vector<std::string> overrides;
  std::vector<std::string> positional;
  std::optional<std::size_t> workers;
  bool print_config = false;
  CLI::App* app = nullptr;
};

json build_config(const Command& cmd) {
  json user;
  if (!cmd.config_file.empty()) {
    try {
      user = read_json_file(cmd.config_file);
    } catch (const Error& e) {
      throw Error(Errc::InvalidConfig, e.message());
    }
  }
  auto config = resolve_config(user, cmd.keys, cmd.name);
  if (const char* env = std::getenv("POINTCA_OUTPUT_DIR"); env && *env) config["output_dir"] = env;
  for (const auto& o : cmd.overrides) apply_override(config, o, cmd.keys, cmd.name);
  if (cmd.workers) config["workers"] = *cmd.workers;
  if (!cmd.positional.empty()) {
    auto list = config.at("campaigns");
    for (const auto& p : cmd.positional) list.push_back(p);
    config["campaigns"] = list;
  }
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pointca: adversarial attacks on point-cloud completion at desk scale"};
  app.require_subcommand(1);
  app.footer("Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.\n"
             "POINTCA_OUTPUT_DIR overrides output_dir from a config file; --set still wins.");

  std::vector<Command> commands{
      {"gen-data", "generate the synthetic dataset and the attack-pair manifest", gen_data_keys(), cmd_gen_data},
      {"train", "train the toy completion model", train_keys(), cmd_train},
      {"train-classifier", "train the toy shape classifier", train_classifier_keys(), cmd_train_classifier},
      {"attack", "run attack campaigns over the manifest (resumable)", attack_keys(), cmd_attack},
      {"defend", "apply the SRS, OR and SOR sweeps to a campaign's adversarial clouds", defend_keys(), cmd_defend},
      {"report", "aggregate campaign CSVs into report.json and plot-ready CSVs", report_keys(), cmd_report},
      {"transfer", "craft on each model, evaluate on every model", transfer_keys(), cmd_transfer},
  };
  for (auto& cmd : commands) {
    cmd.app = app.add_subcommand(cmd.name, cmd.about);
    cmd.app->add_option("-c,--config", cmd.config_file, "JSON configuration file");
    cmd.app->add_option("-s,--set", cmd.overrides, "override one key, key=value (value parsed as JSON when possible)");
    const bool has_workers =
        std::any_of(cmd.keys.begin(), cmd.keys.end(), [](const ConfigKey& k) { return k.name == "workers"; });
    if (has_workers) cmd.app->add_option("-w,--workers", cmd.workers, "parallel attack threads");
    cmd.app->add_flag("--print-config", cmd.print_config, "print the resolved configuration and exit");
    if (cmd.name == "report") cmd.app->add_option("campaign_csv", cmd.positional, "campaign CSVs");
    cmd.app->footer(describe_keys(cmd.keys));
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  for (auto& cmd : commands) {
    if (!cmd.app->parsed()) continue;
    try {
      const auto config = build_config(cmd);
      if (cmd.print_config) {
        std::cout << config.dump(2) << "\n";
        return 0;
      }
      cmd.run(config);
      return 0;
    } catch (const Error& e) {
      std::cerr << "pointca " << cmd.name << ": " << e.what() << "\n";
      return exit_code_for(e.code());
    } catch (const fs::filesystem_error& e) {
      std::cerr << "pointca " << cmd.name << ": " << e.what() << "\n";
      return kExitData;
    } catch (const std::exception& e) {
      std::cerr << "pointca " << cmd.name << ": " << e.what() << "\n";
      return kExitRuntime;
    }
  }
  return kExitRuntime;
}
