#pragma once

// Toy point-cloud networks: a completion model f = De(En(.)) built from a
// shared per-point MLP, a max-pool and a fully connected decoder, and a
// classifier sharing the encoder topology.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pointca/autodiff.hpp"
#include "pointca/point_cloud.hpp"

namespace pointca {

static_assert(std::endian::native == std::endian::little, "weight files assume a little-endian host");

inline ad::Tensor points_tensor(std::span<const Vec3> points, bool requires_grad = false) {
  return ad::Tensor({points.size(), 3}, flatten(points), requires_grad);
}

inline ad::Tensor points_tensor(const PointCloud& cloud, bool requires_grad = false) {
  return points_tensor(cloud.span(), requires_grad);
}

struct Dense {
  ad::Tensor weight;  // [in x out]
  ad::Tensor bias;    // [out]

  Dense() = default;
  Dense(ad::Tensor w, ad::Tensor b) : weight(std::move(w)), bias(std::move(b)) {}
  Dense(const Dense& o) : weight(o.weight.clone()), bias(o.bias.clone()) {}
  Dense& operator=(const Dense& o) {
    weight = o.weight.clone();
    bias = o.bias.clone();
    return *this;
  }
  Dense(Dense&&) = default;
  Dense& operator=(Dense&&) = default;

  /// Uniform(-r, r) weights with r = gain * sqrt(6 / (in + out)); zero bias.
  static Dense init(std::size_t in, std::size_t out, std::mt19937_64& rng, double gain = 1.0) {
    const double r = gain * std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> u(-r, r);
    std::vector<double> w(in * out);
    for (double& v : w) v = u(rng);
    return Dense(ad::Tensor({in, out}, std::move(w)), ad::Tensor::zeros({out}));
  }

  std::size_t in() const { return weight.shape()[0]; }
  std::size_t out() const { return weight.shape()[1]; }

  ad::Tensor forward(ad::Tape& tape, const ad::Tensor& x) const {
    return ad::add(tape, ad::matmul(tape, x, weight), bias);
  }
};

/// Shared per-point MLP (3 -> hidden -> feature, ReLU) followed by a max-pool.
struct PointEncoder {
  Dense first;
  Dense second;

  static PointEncoder init(std::size_t hidden, std::size_t feature, std::mt19937_64& rng) {
    return {Dense::init(3, hidden, rng, std::sqrt(2.0)), Dense::init(hidden, feature, rng, std::sqrt(2.0))};
  }

  ad::Tensor forward(ad::Tape& tape, const ad::Tensor& points) const {
    if (points.rank() != 2 || points.cols() != 3 || points.shape()[0] == 0) {
      throw Error(Errc::ShapeMismatch, "encoder expects [m x 3] with m >= 1, got " + ad::shape_string(points.shape()));
    }
    const auto h = ad::relu(tape, first.forward(tape, points));
    const auto f = ad::relu(tape, second.forward(tape, h));
    return ad::max_over_points(tape, f);
  }
};

struct ModelArch {
  std::size_t point_hidden = 64;
  std::size_t feature_dim = 128;
  std::size_t decoder_hidden = 256;
  std::size_t output_points = 1024;

  bool operator==(const ModelArch&) const = default;
};

class CompletionModel {
 public:
  static constexpr std::uint32_t kKind = 1;

  CompletionModel() = default;

  static CompletionModel create(const ModelArch& arch, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    CompletionModel m;
    m.arch_ = arch;
    m.encoder_ = PointEncoder::init(arch.point_hidden, arch.feature_dim, rng);
    m.hidden_ = Dense::init(arch.feature_dim, arch.decoder_hidden, rng, std::sqrt(2.0));
    m.output_ = Dense::init(arch.decoder_hidden, 3 * arch.output_points, rng, 0.5);
    // Start the decoder from a random blob instead of a collapsed point.
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    for (double& v : m.output_.bias.mutable_values()) v = u(rng);
    return m;
  }

  const ModelArch& arch() const { return arch_; }
  bool trained() const { return trained_; }
  void set_trained(bool on) { trained_ = on; }

  ad::Tensor encode(ad::Tape& tape, const ad::Tensor& points) const { return encoder_.forward(tape, points); }

  ad::Tensor decode(ad::Tape& tape, const ad::Tensor& feature) const {
    const auto g = ad::reshape(tape, feature, {1, feature.size()});
    const auto h = ad::relu(tape, hidden_.forward(tape, g));
    return ad::reshape(tape, output_.forward(tape, h), {arch_.output_points, 3});
  }

  ad::Tensor complete(ad::Tape& tape, const ad::Tensor& points) const { return decode(tape, encode(tape, points)); }

  std::vector<double> encode(const PointCloud& cloud) const {
    ad::Tape tape;
    const auto f = encode(tape, points_tensor(cloud));
    return {f.values().begin(), f.values().end()};
  }

  PointCloud complete(const PointCloud& cloud) const {
    ad::Tape tape;
    const auto out = complete(tape, points_tensor(cloud));
    return PointCloud(unflatten(out.values()), CloudKind::reconstructed);
  }

  std::vector<ad::Tensor> parameters() const {
    return {encoder_.first.weight, encoder_.first.bias, encoder_.second.weight, encoder_.second.bias,
            hidden_.weight,        hidden_.bias,        output_.weight,         output_.bias};
  }

  std::vector<std::uint64_t> arch_fields() const {
    return {arch_.point_hidden, arch_.feature_dim, arch_.decoder_hidden, arch_.output_points};
  }

  void set_arch_fields(const std::vector<std::uint64_t>& f) {
    *this = create({f.at(0), f.at(1), f.at(2), f.at(3)}, 0);
  }

 private:
  ModelArch arch_;
  PointEncoder encoder_;
  Dense hidden_;
  Dense output_;
  bool trained_ = false;
};

struct ClassifierArch {
  std::size_t point_hidden = 64;
  std::size_t feature_dim = 128;
  std::size_t head_hidden = 64;
  std::size_t class_count = 4;

  bool operator==(const ClassifierArch&) const = default;
};

class Classifier {
 public:
  static constexpr std::uint32_t kKind = 2;

  Classifier() = default;

  static Classifier create(const ClassifierArch& arch, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Classifier c;
    c.arch_ = arch;
    c.encoder_ = PointEncoder::init(arch.point_hidden, arch.feature_dim, rng);
    c.hidden_ = Dense::init(arch.feature_dim, arch.head_hidden, rng, std::sqrt(2.0));
    c.output_ = Dense::init(arch.head_hidden, arch.class_count, rng);
    return c;
  }

  const ClassifierArch& arch() const { return arch_; }
  std::size_t class_count() const { return arch_.class_count; }
  bool trained() const { return trained_; }
  void set_trained(bool on) { trained_ = on; }

  /// Class logits [C] for an [m x 3] cloud.
  ad::Tensor logits(ad::Tape& tape, const ad::Tensor& points) const {
    const auto f = encoder_.forward(tape, points);
    const auto g = ad::reshape(tape, f, {1, f.size()});
    const auto h = ad::relu(tape, hidden_.forward(tape, g));
    return ad::reshape(tape, output_.forward(tape, h), {arch_.class_count});
  }

  std::size_t predict(const PointCloud& cloud) const {
    ad::Tape tape;
    const auto z = logits(tape, points_tensor(cloud));
    return static_cast<std::size_t>(std::max_element(z.values().begin(), z.values().end()) - z.values().begin());
  }

  std::vector<ad::Tensor> parameters() const {
    return {encoder_.first.weight, encoder_.first.bias, encoder_.second.weight, encoder_.second.bias,
            hidden_.weight,        hidden_.bias,        output_.weight,         output_.bias};
  }

  std::vector<std::uint64_t> arch_fields() const {
    return {arch_.point_hidden, arch_.feature_dim, arch_.head_hidden, arch_.class_count};
  }

  void set_arch_fields(const std::vector<std::uint64_t>& f) { *this = create({f.at(0), f.at(1), f.at(2), f.at(3)}, 0); }

 private:
  ClassifierArch arch_;
  PointEncoder encoder_;
  Dense hidden_;
  Dense output_;
  bool trained_ = false;
};

struct TrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 7;

  void validate() const {
    if (batch_size == 0 || !(learning_rate > 0) || !(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1) ||
        !(adam_eps > 0)) {
      throw Error(Errc::InvalidConfig, "training hyperparameters must be positive (betas in (0,1))");
    }
  }
};

struct TrainingSample {
  PointCloud input;     // partial cloud
  PointCloud complete;  // ground truth for completion
  int label = 0;
};

struct TrainHistory {
  double initial_loss = 0.0;
  std::vector<double> epoch_loss;
};

class Adam {
 public:
  Adam(std::vector<ad::Tensor> params, const TrainConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.has_grad()) continue;
      auto w = p.mutable_values();
      auto g = p.grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        m_[k][i] = cfg_.beta1 * m_[k][i] + (1 - cfg_.beta1) * g[i];
        v_[k][i] = cfg_.beta2 * v_[k][i] + (1 - cfg_.beta2) * g[i] * g[i];
        w[i] -= cfg_.learning_rate * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + cfg_.adam_eps);
      }
      p.zero_grad();
    }
  }

 private:
  std::vector<ad::Tensor> params_;
  TrainConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

namespace detail {

// Shared minibatch loop. `sample_loss` builds the per-sample loss on a fresh tape.
template <typename Model, typename LossFn>
TrainHistory fit(Model& model, std::span<const TrainingSample> data, const TrainConfig& cfg, LossFn sample_loss,
                 const std::function<void(std::size_t, double)>& on_epoch) {
  if (data.empty()) throw Error(Errc::EmptyDataset, "no training samples");
  cfg.validate();
  TrainHistory history;
  auto params = model.parameters();
  for (auto& p : params) p.set_requires_grad(false);
  double total = 0.0;
  for (const auto& s : data) {
    ad::Tape tape;
    total += sample_loss(tape, s).item();
  }
  history.initial_loss = total / static_cast<double>(data.size());

  for (auto& p : params) p.set_requires_grad(true);
  Adam adam(params, cfg);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double w = 1.0 / static_cast<double>(end - start);
      for (std::size_t b = start; b < end; ++b) {
        ad::Tape tape;
        const auto loss = sample_loss(tape, data[order[b]]);
        epoch_total += loss.item();
        tape.backward(loss, w);
      }
      adam.step();
    }
    history.epoch_loss.push_back(epoch_total / static_cast<double>(data.size()));
    if (on_epoch) on_epoch(epoch, history.epoch_loss.back());
  }
  for (auto& p : params) p.set_requires_grad(false);
  if (cfg.epochs > 0) model.set_trained(true);
  return history;
}

}  // namespace detail

/// Minimizes CD-P between the completion of each partial and its ground truth.
inline TrainHistory train_completion(CompletionModel& model, std::span<const TrainingSample> data,
                                     const TrainConfig& cfg,
                                     const std::function<void(std::size_t, double)>& on_epoch = {}) {
  return detail::fit(
      model, data, cfg,
      [&model](ad::Tape& tape, const TrainingSample& s) {
        return ad::chamfer(tape, model.complete(tape, points_tensor(s.input)), points_tensor(s.complete));
      },
      on_epoch);
}

/// Cross-entropy training; samples contribute their `input` cloud and label.
inline TrainHistory train_classifier(Classifier& model, std::span<const TrainingSample> data, const TrainConfig& cfg,
                                     const std::function<void(std::size_t, double)>& on_epoch = {}) {
  for (const auto& s : data) {
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= model.class_count()) {
      throw Error(Errc::InvalidParam, "label " + std::to_string(s.label) + " outside the classifier's classes");
    }
  }
  return detail::fit(
      model, data, cfg,
      [&model](ad::Tape& tape, const TrainingSample& s) {
        return ad::cross_entropy(tape, model.logits(tape, points_tensor(s.input)), static_cast<std::size_t>(s.label));
      },
      on_epoch);
}

// Weight file layout (all little-endian):
//   char[4]  magic "PCAW"
//   u32      format version (1)
//   u32      model kind (1 completion, 2 classifier)
//   u8       trained flag
//   u32      architecture field count, then that many u64 fields
//   u32      tensor count, then per tensor: u32 rank, u64 dims[rank], f64 values
inline constexpr char kWeightMagic[4] = {'P', 'C', 'A', 'W'};
inline constexpr std::uint32_t kWeightVersion = 1;

namespace detail {

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::ifstream& in, const std::string& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw Error(Errc::IoError, "truncated weight file " + path);
  return v;
}

}  // namespace detail

template <typename Model>
void save_weights(const Model& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::IoError, "cannot write " + path);
  out.write(kWeightMagic, 4);
  detail::put<std::uint32_t>(out, kWeightVersion);
  detail::put<std::uint32_t>(out, Model::kKind);
  detail::put<std::uint8_t>(out, model.trained() ? 1 : 0);
  const auto fields = model.arch_fields();
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(fields.size()));
  for (auto f : fields) detail::put<std::uint64_t>(out, f);
  const auto params = model.parameters();
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.rank()));
    for (auto d : p.shape()) detail::put<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(p.values().data()), static_cast<std::streamsize>(p.size() * sizeof(double)));
  }
  if (!out) throw Error(Errc::IoError, "failed writing " + path);
}

template <typename Model>
Model load_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoError, "cannot read " + path);
  char magic[4] = {};
  if (!in.read(magic, 4)) throw Error(Errc::IoError, "truncated weight file " + path);
  if (std::memcmp(magic, kWeightMagic, 4) != 0) throw Error(Errc::VersionMismatch, path + " is not a weight file");
  const auto version = detail::take<std::uint32_t>(in, path);
  if (version != kWeightVersion) {
    throw Error(Errc::VersionMismatch, path + " has format version " + std::to_string(version));
  }
  const auto kind = detail::take<std::uint32_t>(in, path);
  if (kind != Model::kKind) throw Error(Errc::VersionMismatch, path + " holds a different model kind");
  const bool trained = detail::take<std::uint8_t>(in, path) != 0;
  const auto nfields = detail::take<std::uint32_t>(in, path);
  std::vector<std::uint64_t> fields(nfields);
  for (auto& f : fields) f = detail::take<std::uint64_t>(in, path);
  Model model;
  model.set_arch_fields(fields);
  model.set_trained(trained);
  auto params = model.parameters();
  const auto count = detail::take<std::uint32_t>(in, path);
  if (count != params.size()) throw Error(Errc::VersionMismatch, path + " has an unexpected tensor count");
  for (auto& p : params) {
    const auto rank = detail::take<std::uint32_t>(in, path);
    ad::Shape shape(rank);
    for (auto& d : shape) d = detail::take<std::uint64_t>(in, path);
    if (shape != p.shape()) throw Error(Errc::VersionMismatch, path + " tensor shape disagrees with architecture");
    auto v = p.mutable_values();
    if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)))) {
      throw Error(Errc::IoError, "truncated weight file " + path);
    }
  }
  return model;
}

}  // namespace pointca
