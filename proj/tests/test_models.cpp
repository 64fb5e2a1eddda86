#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <random>

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

PointCloud fixed_box() { return generate_shape(random_shape_spec(ShapeClass::box, 5, 256)); }

std::vector<TrainingSample> every_nth(const std::vector<TrainingSample>& all, std::size_t step) {
  std::vector<TrainingSample> out;
  for (std::size_t i = 0; i < all.size(); i += step) out.push_back(all[i]);
  return out;
}

double accuracy(const Classifier& c, const std::vector<TrainingSample>& data) {
  std::size_t hit = 0;
  for (const auto& s : data) hit += c.predict(s.input) == static_cast<std::size_t>(s.label);
  return static_cast<double>(hit) / static_cast<double>(data.size());
}

bool same_parameters(const std::vector<ad::Tensor>& a, const std::vector<ad::Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!std::equal(a[i].values().begin(), a[i].values().end(), b[i].values().begin(), b[i].values().end())) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST(Encoder, PermutationInvariant) {
  const auto m = CompletionModel::create({}, 42);
  auto c = fixed_box();
  const auto f = m.encode(c);
  std::mt19937_64 rng(1);
  std::shuffle(c.points.begin(), c.points.end(), rng);
  EXPECT_EQ(m.encode(c), f);
}

TEST(Encoder, ZeroWeightsGiveZeroFeature) {
  auto m = CompletionModel::create({}, 42);
  for (auto& p : m.parameters()) std::fill(p.mutable_values().begin(), p.mutable_values().end(), 0.0);
  for (double v : m.encode(fixed_box())) EXPECT_EQ(v, 0.0);
}

TEST(Encoder, GoldenFeature) {
  // Recorded from the first verified build; guards against silent changes to
  // initialization, shape sampling or the forward pass.
  const auto f = CompletionModel::create({}, 42).encode(fixed_box());
  ASSERT_EQ(f.size(), 128u);
  EXPECT_NEAR(f[0], 0.1085513264138407, 1e-12);
  EXPECT_NEAR(f[1], 0.01824819912417466, 1e-12);
  EXPECT_NEAR(f[2], 0.23428564271562657, 1e-12);
  EXPECT_NEAR(f[3], 0.15889764814881893, 1e-12);
  double sum = 0.0;
  for (double v : f) sum += v;
  EXPECT_NEAR(sum, 11.73399951132687, 1e-9);
}

TEST(Encoder, RejectsBadShapes) {
  const auto m = CompletionModel::create({}, 1);
  ad::Tape tape;
  EXPECT_EQ(code_of([&] { m.encode(tape, ad::Tensor({4, 2}, std::vector<double>(8, 0.0))); }), Errc::ShapeMismatch);
  EXPECT_EQ(code_of([&] { m.encode(tape, ad::Tensor({0, 3}, {})); }), Errc::ShapeMismatch);
}

TEST(Completion, OutputShapeFixedAndPermutationInvariant) {
  ModelArch arch;
  arch.output_points = 64;
  const auto m = CompletionModel::create(arch, 3);
  std::mt19937_64 rng(2);
  for (std::size_t n : {1u, 7u, 256u}) {
    auto c = test::random_cloud(n, rng);
    const auto out = m.complete(c);
    EXPECT_EQ(out.size(), 64u);
    std::shuffle(c.points.begin(), c.points.end(), rng);
    EXPECT_EQ(m.complete(c).points, out.points);
  }
}

TEST(Completion, TrainedToyModelMeetsReconstructionBound) {
  const auto& m = test::toy_completion();
  const auto test_set = completion_samples(test::toy_dataset(), true);
  std::size_t good = 0;
  for (const auto& s : test_set) good += chamfer(m.complete(s.input), s.complete) < 0.05;
  EXPECT_GE(static_cast<double>(good) / static_cast<double>(test_set.size()), 0.8);
}

TEST(Training, LossStrictlyDecreasesOverFirstTenEpochs) {
  auto m = CompletionModel::create({}, 5);
  TrainConfig cfg;
  cfg.epochs = 10;
  const auto data = completion_samples(test::toy_dataset(), false);
  const auto h = train_completion(m, data, cfg);
  ASSERT_EQ(h.epoch_loss.size(), 10u);
  EXPECT_LT(h.epoch_loss.front(), h.initial_loss);
  for (std::size_t e = 1; e < h.epoch_loss.size(); ++e) EXPECT_LT(h.epoch_loss[e], h.epoch_loss[e - 1]) << "epoch " << e;
  EXPECT_TRUE(m.trained());
}

TEST(Training, ZeroEpochsKeepsInitialWeights) {
  auto m = CompletionModel::create({}, 5);
  const auto before = CompletionModel::create({}, 5);
  TrainConfig cfg;
  cfg.epochs = 0;
  const auto data = every_nth(completion_samples(test::toy_dataset(), false), 40);
  train_completion(m, data, cfg);
  EXPECT_TRUE(same_parameters(m.parameters(), before.parameters()));
  EXPECT_FALSE(m.trained());
}

TEST(Training, SameSeedSameResult) {
  const auto data = every_nth(completion_samples(test::toy_dataset(), false), 20);
  TrainConfig cfg;
  cfg.epochs = 2;
  auto a = CompletionModel::create({}, 9), b = CompletionModel::create({}, 9);
  const auto ha = train_completion(a, data, cfg);
  const auto hb = train_completion(b, data, cfg);
  EXPECT_EQ(ha.epoch_loss, hb.epoch_loss);
  EXPECT_TRUE(same_parameters(a.parameters(), b.parameters()));

  const auto cdata = every_nth(classifier_samples(test::toy_dataset(), false), 20);
  auto c1 = Classifier::create({}, 4), c2 = Classifier::create({}, 4);
  train_classifier(c1, cdata, cfg);
  train_classifier(c2, cdata, cfg);
  EXPECT_TRUE(same_parameters(c1.parameters(), c2.parameters()));
}

TEST(Training, Errors) {
  auto m = CompletionModel::create({}, 1);
  EXPECT_EQ(code_of([&] { train_completion(m, {}, TrainConfig{}); }), Errc::EmptyDataset);
  TrainConfig bad;
  bad.learning_rate = 0.0;
  const auto data = every_nth(completion_samples(test::toy_dataset(), false), 100);
  EXPECT_EQ(code_of([&] { train_completion(m, data, bad); }), Errc::InvalidConfig);
  auto c = Classifier::create({}, 1);
  std::vector<TrainingSample> wrong{{data[0].input, data[0].complete, 4}};
  EXPECT_EQ(code_of([&] { train_classifier(c, wrong, TrainConfig{}); }), Errc::InvalidParam);
}

TEST(Classifier, TrainedAccuracyOnPartials) {
  const auto test_set = completion_samples(test::toy_dataset(), true);
  EXPECT_GE(accuracy(test::toy_classifier(), test_set), 0.9);
}

TEST(Classifier, UntrainedIsNearChance) {
  const auto test_set = completion_samples(test::toy_dataset(), true);
  EXPECT_LE(std::abs(accuracy(Classifier::create({}, 3), test_set) - 0.25), 0.15);
}

TEST(Weights, RoundTripIsBitwise) {
  test::TempDir dir("models");
  const auto& m = test::toy_completion();
  const auto path = (dir.path() / "m.pcaw").string();
  save_weights(m, path);
  const auto back = load_weights<CompletionModel>(path);
  EXPECT_TRUE(back.trained());
  EXPECT_EQ(back.arch(), m.arch());
  const auto c = fixed_box();
  EXPECT_EQ(back.complete(c).points, m.complete(c).points);

  const auto& cls = test::toy_classifier();
  save_weights(cls, path);
  const auto cback = load_weights<Classifier>(path);
  ad::Tape t1, t2;
  const auto x = points_tensor(c);
  const auto za = cls.logits(t1, x), zb = cback.logits(t2, x);
  EXPECT_TRUE(std::equal(za.values().begin(), za.values().end(), zb.values().begin(), zb.values().end()));
}

TEST(Weights, ReloadReproducesGoldenFeature) {
  test::TempDir dir("models");
  const auto path = (dir.path() / "g.pcaw").string();
  save_weights(CompletionModel::create({}, 42), path);
  const auto f = load_weights<CompletionModel>(path).encode(fixed_box());
  EXPECT_NEAR(f[0], 0.1085513264138407, 1e-12);
  EXPECT_NEAR(f[3], 0.15889764814881893, 1e-12);
}

TEST(Weights, Errors) {
  test::TempDir dir("models");
  const auto path = (dir.path() / "m.pcaw").string();
  ModelArch small;
  small.output_points = 8;
  save_weights(CompletionModel::create(small, 1), path);
  EXPECT_EQ(code_of([&] { load_weights<Classifier>(path); }), Errc::VersionMismatch);

  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& b) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << b;
  };
  auto corrupt = bytes;
  corrupt[0] = 'X';
  write(corrupt);
  EXPECT_EQ(code_of([&] { load_weights<CompletionModel>(path); }), Errc::VersionMismatch);
  auto future = bytes;
  future[4] = 9;
  write(future);
  EXPECT_EQ(code_of([&] { load_weights<CompletionModel>(path); }), Errc::VersionMismatch);
  write(bytes.substr(0, bytes.size() / 2));
  EXPECT_EQ(code_of([&] { load_weights<CompletionModel>(path); }), Errc::IoError);
  EXPECT_EQ(code_of([&] { load_weights<CompletionModel>((dir.path() / "missing").string()); }), Errc::IoError);
}
