#pragma once

// Trained toy victims shared by the unit and acceptance suites. The first
// caller trains and writes the weights to the cache directory; later callers
// load them. A ctest fixture runs the training once before the suites.

#include <bit>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <unistd.h>

#include "pointca/campaign.hpp"

#ifndef POINTCA_TEST_CACHE_DIR
#define POINTCA_TEST_CACHE_DIR "test_cache"
#endif

namespace pointca::test {

inline constexpr std::uint64_t kCompletionSeed = 1;
inline constexpr std::uint64_t kClassifierSeed = 3;
inline constexpr std::size_t kClassifierEpochs = 30;

inline std::filesystem::path cache_dir() {
  std::filesystem::path dir(POINTCA_TEST_CACHE_DIR);
  std::filesystem::create_directories(dir);
  return dir;
}

inline const Dataset& toy_dataset() {
  static const Dataset ds = generate_dataset({});
  return ds;
}

// Hash of every dataset coordinate plus the training settings, so a change to
// generation or training never reuses stale weights.
inline std::string fingerprint(std::uint64_t model_seed, std::size_t epochs) {
  std::uint64_t h = mix_seed(model_seed, {epochs});
  auto mix_cloud = [&h](const PointCloud& c) {
    for (const auto& p : c.points) {
      h = mix_seed(h, {std::bit_cast<std::uint64_t>(p[0]), std::bit_cast<std::uint64_t>(p[1]),
                       std::bit_cast<std::uint64_t>(p[2])});
    }
  };
  for (const auto& o : toy_dataset().objects) {
    mix_cloud(o.gt);
    for (const auto& c : o.partials) mix_cloud(c);
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Writes to a process-unique temporary then renames, so concurrent suites
// never observe a half-written file.
template <typename Model>
void save_atomically(const Model& m, const std::filesystem::path& path) {
  const auto tmp = path.string() + ".tmp" + std::to_string(::getpid());
  save_weights(m, tmp);
  std::filesystem::rename(tmp, path);
}

inline const CompletionModel& toy_completion() {
  static const CompletionModel model = [] {
    const auto path = cache_dir() / ("completion_" + fingerprint(kCompletionSeed, TrainConfig{}.epochs) + ".pcaw");
    if (std::filesystem::exists(path)) return load_weights<CompletionModel>(path.string());
    auto m = CompletionModel::create({}, kCompletionSeed);
    const auto data = completion_samples(toy_dataset(), false);
    train_completion(m, data, TrainConfig{});
    save_atomically(m, path);
    return m;
  }();
  return model;
}

inline const Classifier& toy_classifier() {
  static const Classifier model = [] {
    const auto path = cache_dir() / ("classifier_" + fingerprint(kClassifierSeed, kClassifierEpochs) + ".pcaw");
    if (std::filesystem::exists(path)) return load_weights<Classifier>(path.string());
    auto c = Classifier::create({}, kClassifierSeed);
    TrainConfig cfg;
    cfg.epochs = kClassifierEpochs;
    const auto data = classifier_samples(toy_dataset(), false);
    train_classifier(c, data, cfg);
    save_atomically(c, path);
    return c;
  }();
  return model;
}

/// Manifest with one CD-P nearest target per (source, other class): 4 classes
/// x `sources_per_class` x 3 target classes, denominators filled in.
inline const PairManifest& toy_manifest(std::size_t sources_per_class) {
  static std::map<std::size_t, PairManifest> cache;
  auto it = cache.find(sources_per_class);
  if (it == cache.end()) {
    auto m = build_pair_manifest(toy_dataset(), sources_per_class, 1, 11);
    annotate_denominators(m, toy_dataset(), toy_completion());
    it = cache.emplace(sources_per_class, std::move(m)).first;
  }
  return it->second;
}

inline std::vector<AttackPair> toy_pairs(std::size_t count, std::size_t sources_per_class = 5) {
  return resolve_pairs(toy_dataset(), toy_manifest(sources_per_class), count);
}

}  // namespace pointca::test
