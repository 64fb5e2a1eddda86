#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tape records every operation whose inputs require gradients, in creation
// order, so parents always precede children. backward() walks the record in
// reverse exactly once and accumulates gradients into every tensor that
// requires them. Operations on tensors that do not require gradients are not
// recorded, which makes inference free of tape overhead.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pointca/error.hpp"
#include "pointca/knn.hpp"
#include "pointca/metrics.hpp"

namespace pointca::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "x" : "") + std::to_string(shape[i]);
  return s + "]";
}

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    if (shape_size(shape) != values.size()) {
      throw Error(Errc::ShapeMismatch, "shape " + shape_string(shape) + " does not hold " +
                                           std::to_string(values.size()) + " values");
    }
    impl_->shape = std::move(shape);
    impl_->values = std::move(values);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t size() const { return impl_->values.size(); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t rows() const { return impl_->shape.size() == 2 ? impl_->shape[0] : 1; }
  std::size_t cols() const { return impl_->shape.back(); }

  std::span<const double> values() const { return impl_->values; }
  std::span<double> mutable_values() { return impl_->values; }
  double item() const {
    if (size() != 1) throw Error(Errc::NotScalar, "item() on tensor of shape " + shape_string(shape()));
    return impl_->values[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  bool has_grad() const { return !impl_->grad.empty(); }
  /// Accumulated gradient; empty until something flowed into this tensor.
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0); }

  /// Gradient buffer, allocated (zeroed) on first use. Tensors are handles, so this is const.
  std::span<double> grad_buffer() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0);
    return impl_->grad;
  }

  bool same_as(const Tensor& other) const { return impl_ == other.impl_; }

  /// Deep copy of values and flags; the gradient is not carried over.
  Tensor clone() const {
    if (!impl_) return {};
    return Tensor(impl_->shape, impl_->values, impl_->requires_grad);
  }

 private:
  struct Impl {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

class Tape {
 public:
  using Backprop = std::function<void(std::span<const double> out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Wraps a forward result; records it when any parent requires gradients.
  Tensor record(Shape shape, std::vector<double> values, std::vector<Tensor> parents, Backprop backprop) {
    if (consumed_) throw Error(Errc::StaleTape, "tape already ran backward; start a new tape");
    const bool needs = std::any_of(parents.begin(), parents.end(), [](const Tensor& t) { return t.requires_grad(); });
    Tensor out(std::move(shape), std::move(values), needs);
    if (needs) nodes_.push_back(Node{out, std::move(parents), std::move(backprop)});
    return out;
  }

  std::size_t size() const { return nodes_.size(); }
  std::size_t visited() const { return visited_; }
  bool consumed() const { return consumed_; }

  void backward(Tensor loss, double seed = 1.0) {
    if (consumed_) throw Error(Errc::StaleTape, "backward already ran on this tape");
    if (loss.size() != 1) throw Error(Errc::NotScalar, "loss has shape " + shape_string(loss.shape()));
    if (!loss.requires_grad()) throw Error(Errc::InvalidParam, "loss does not depend on any tensor requiring grad");
    const bool recorded =
        std::any_of(nodes_.begin(), nodes_.end(), [&](const Node& n) { return n.out.same_as(loss); });
    if (!recorded) throw Error(Errc::StaleTape, "loss was not produced on this tape");
    consumed_ = true;
    loss.grad_buffer()[0] += seed;
    visited_ = 0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      ++visited_;
      if (it->out.has_grad()) it->backprop(it->out.grad());
    }
    nodes_.clear();
  }

 private:
  struct Node {
    Tensor out;
    std::vector<Tensor> parents;
    Backprop backprop;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
  std::size_t visited_ = 0;
};

namespace detail {

inline void require(bool cond, const std::string& what) {
  if (!cond) throw Error(Errc::ShapeMismatch, what);
}

inline bool row_is_zero(const double* row, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    if (row[j] != 0.0) return false;
  }
  return true;
}

}  // namespace detail

/// [m x k] * [k x n] -> [m x n].
inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.shape()[1] == b.shape()[0],
                  "matmul " + shape_string(a.shape()) + " * " + shape_string(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = &out[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double s = av[i * k + p];
      if (s == 0.0) continue;
      const double* brow = bv + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += s * brow[j];
    }
  }
  return tape.record({m, n}, std::move(out), {a, b}, [a, b, m, k, n](std::span<const double> g) mutable {
    const double* av = a.values().data();
    const double* bv = b.values().data();
    if (a.requires_grad()) {
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = &g[i * n];
        if (detail::row_is_zero(grow, n)) continue;
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = bv + p * n;
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
          ga[i * k + p] += s;
        }
      }
    }
    if (b.requires_grad()) {
      auto gb = b.grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = &g[i * n];
        if (detail::row_is_zero(grow, n)) continue;
        for (std::size_t p = 0; p < k; ++p) {
          const double s = av[i * k + p];
          if (s == 0.0) continue;
          double* gbrow = &gb[p * n];
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += s * grow[j];
        }
      }
    }
  });
}

/// Elementwise sum of equal shapes, or [m x n] + [n] with the vector added to every row.
inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.values().begin(), a.values().end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.values()[i];
    return tape.record(a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) mutable {
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  detail::require(a.rank() == 2 && b.rank() == 1 && b.size() == a.shape()[1],
                  "add " + shape_string(a.shape()) + " + " + shape_string(b.shape()));
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(a.values().begin(), a.values().end());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b.values()[j];
  }
  return tape.record(a.shape(), std::move(out), {a, b}, [a, b, m, n](std::span<const double> g) mutable {
    if (a.requires_grad()) {
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
      }
    }
  });
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(), "sub " + shape_string(a.shape()) + " - " + shape_string(b.shape()));
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  return tape.record(a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) mutable {
    if (a.requires_grad()) {
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(), "mul " + shape_string(a.shape()) + " * " + shape_string(b.shape()));
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return tape.record(a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) mutable {
    if (a.requires_grad()) {
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.values()[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.values()[i];
    }
  });
}

inline Tensor scale(Tape& tape, const Tensor& a, double c) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& v : out) v *= c;
  return tape.record(a.shape(), std::move(out), {a}, [a, c](std::span<const double> g) mutable {
    auto ga = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

inline Tensor relu(Tape& tape, const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
  return tape.record(a.shape(), std::move(out), {a}, [a](std::span<const double> g) mutable {
    auto ga = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (a.values()[i] > 0.0) ga[i] += g[i];
    }
  });
}

/// Column-wise maximum over the rows of [m x c] -> [c]. The gradient goes to
/// the arg-max row of each column, the lowest row index on ties.
inline Tensor max_over_points(Tape& tape, const Tensor& a) {
  detail::require(a.rank() == 2 && a.shape()[0] >= 1, "max_over_points needs [m x c], got " + shape_string(a.shape()));
  const std::size_t m = a.shape()[0], c = a.shape()[1];
  std::vector<double> out(a.values().begin(), a.values().begin() + static_cast<std::ptrdiff_t>(c));
  std::vector<std::size_t> arg(c, 0);
  for (std::size_t i = 1; i < m; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const double v = a.values()[i * c + j];
      if (v > out[j]) {
        out[j] = v;
        arg[j] = i;
      }
    }
  }
  return tape.record({c}, std::move(out), {a}, [a, arg = std::move(arg), c](std::span<const double> g) mutable {
    auto ga = a.grad_buffer();
    for (std::size_t j = 0; j < c; ++j) ga[arg[j] * c + j] += g[j];
  });
}

inline Tensor sum(Tape& tape, const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return tape.record({1}, {s}, {a}, [a](std::span<const double> g) mutable {
    auto ga = a.grad_buffer();
    for (double& v : ga) v += g[0];
  });
}

inline Tensor mean(Tape& tape, const Tensor& a) {
  const double n = static_cast<double>(a.size());
  double s = 0.0;
  for (double v : a.values()) s += v;
  return tape.record({1}, {s / n}, {a}, [a, n](std::span<const double> g) mutable {
    auto ga = a.grad_buffer();
    for (double& v : ga) v += g[0] / n;
  });
}

/// Softmax over the last dimension (each row of a matrix, or the whole vector).
inline Tensor softmax(Tape& tape, const Tensor& a) {
  const std::size_t rows = a.rows(), c = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = &a.values()[r * c];
    const double mx = *std::max_element(in, in + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (out[r * c + j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] /= z;
  }
  std::vector<double> saved = out;
  return tape.record(a.shape(), std::move(out), {a},
                     [a, s = std::move(saved), rows, c](std::span<const double> g) mutable {
                       auto ga = a.grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r) {
                         double dot = 0.0;
                         for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * s[r * c + j];
                         for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += s[r * c + j] * (g[r * c + j] - dot);
                       }
                     });
}

/// Numerically stable log(softmax(a)) over the last dimension.
inline Tensor log_softmax(Tape& tape, const Tensor& a) {
  const std::size_t rows = a.rows(), c = a.cols();
  std::vector<double> out(a.size());
  std::vector<double> probs(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = &a.values()[r * c];
    const double mx = *std::max_element(in, in + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(in[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) {
      out[r * c + j] = in[j] - lse;
      probs[r * c + j] = std::exp(out[r * c + j]);
    }
  }
  return tape.record(a.shape(), std::move(out), {a},
                     [a, p = std::move(probs), rows, c](std::span<const double> g) mutable {
                       auto ga = a.grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r) {
                         double gs = 0.0;
                         for (std::size_t j = 0; j < c; ++j) gs += g[r * c + j];
                         for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += g[r * c + j] - p[r * c + j] * gs;
                       }
                     });
}

inline Tensor log(Tape& tape, const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.values()[i]);
  return tape.record(a.shape(), std::move(out), {a}, [a](std::span<const double> g) mutable {
    auto ga = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / a.values()[i];
  });
}

inline Tensor square(Tape& tape, const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * a.values()[i];
  return tape.record(a.shape(), std::move(out), {a}, [a](std::span<const double> g) mutable {
    auto ga = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * a.values()[i] * g[i];
  });
}

/// Elementwise square root; the derivative at 0 is taken as 0.
inline Tensor sqrt(Tape& tape, const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(a.values()[i]);
  std::vector<double> saved = out;
  return tape.record(a.shape(), std::move(out), {a}, [a, s = std::move(saved)](std::span<const double> g) mutable {
    auto ga = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (s[i] > 0.0) ga[i] += g[i] / (2.0 * s[i]);
    }
  });
}

/// Euclidean norm of each row: [m x c] -> [m]; a vector is one row -> [1].
inline Tensor l2_norm_rows(Tape& tape, const Tensor& a) {
  const std::size_t rows = a.rows(), c = a.cols();
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += a.values()[r * c + j] * a.values()[r * c + j];
    out[r] = std::sqrt(s);
  }
  std::vector<double> saved = out;
  return tape.record({rows}, std::move(out), {a},
                     [a, n = std::move(saved), rows, c](std::span<const double> g) mutable {
                       auto ga = a.grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r) {
                         if (n[r] == 0.0) continue;
                         for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += g[r] * a.values()[r * c + j] / n[r];
                       }
                     });
}

/// Stacks rows: [m x c] ++ [n x c] -> [(m+n) x c]; vectors concatenate directly.
inline Tensor concat(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require(a.rank() == b.rank() && (a.rank() == 1 || a.cols() == b.cols()),
                  "concat " + shape_string(a.shape()) + " ++ " + shape_string(b.shape()));
  std::vector<double> out(a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  Shape shape = a.rank() == 1 ? Shape{a.size() + b.size()} : Shape{a.shape()[0] + b.shape()[0], a.cols()};
  const std::size_t na = a.size();
  return tape.record(std::move(shape), std::move(out), {a, b}, [a, b, na](std::span<const double> g) mutable {
    if (a.requires_grad()) {
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad_buffer();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
    }
  });
}

inline Tensor reshape(Tape& tape, const Tensor& a, Shape shape) {
  detail::require(shape_size(shape) == a.size(), "reshape " + shape_string(a.shape()) + " -> " + shape_string(shape));
  std::vector<double> out(a.values().begin(), a.values().end());
  return tape.record(std::move(shape), std::move(out), {a}, [a](std::span<const double> g) mutable {
    auto ga = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

/// CD-P between [m x 3] and [n x 3] point tensors. Nearest-neighbor
/// correspondences are found on every forward pass and held fixed in backward.
inline Tensor chamfer(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.cols() == 3 && b.cols() == 3,
                  "chamfer needs [m x 3] and [n x 3], got " + shape_string(a.shape()) + " and " +
                      shape_string(b.shape()));
  if (a.shape()[0] == 0 || b.shape()[0] == 0) throw Error(Errc::EmptyCloud, "chamfer of an empty cloud");
  auto pa = unflatten(a.values());
  auto pb = unflatten(b.values());
  auto match = chamfer_match(pa, pb);
  const double value = chamfer_value(match, ChamferVariant::CD_P);
  return tape.record(
      {1}, {value}, {a, b},
      [a, b, pa = std::move(pa), pb = std::move(pb), match = std::move(match)](std::span<const double> g) mutable {
        const double wa = 0.5 * g[0] / static_cast<double>(pa.size());
        const double wb = 0.5 * g[0] / static_cast<double>(pb.size());
        std::span<double> ga, gb;
        if (a.requires_grad()) ga = a.grad_buffer();
        if (b.requires_grad()) gb = b.grad_buffer();
        auto push = [&](std::size_t i, std::size_t j, double d, double w) {
          // d/dx_i |x_i - y_j| = (x_i - y_j) / |x_i - y_j|, zero at coincidence.
          if (d == 0.0) return;
          for (int c = 0; c < 3; ++c) {
            const double u = w * (pa[i][c] - pb[j][c]) / d;
            if (!ga.empty()) ga[3 * i + c] += u;
            if (!gb.empty()) gb[3 * j + c] -= u;
          }
        };
        for (std::size_t i = 0; i < pa.size(); ++i) {
          const auto& nb = match.a_to_b[i];
          push(i, nb.index, std::sqrt(nb.sq_dist), wa);
        }
        for (std::size_t j = 0; j < pb.size(); ++j) {
          const auto& na = match.b_to_a[j];
          push(na.index, j, std::sqrt(na.sq_dist), wb);
        }
      });
}

/// KL(softmax(p) || softmax(q)) over the last dimension, summed.
inline Tensor kl_divergence(Tape& tape, const Tensor& p_logits, const Tensor& q_logits) {
  detail::require(p_logits.shape() == q_logits.shape(),
                  "kl " + shape_string(p_logits.shape()) + " vs " + shape_string(q_logits.shape()));
  const Tensor log_p = log_softmax(tape, p_logits);
  const Tensor log_q = log_softmax(tape, q_logits);
  const Tensor p = softmax(tape, p_logits);
  return sum(tape, mul(tape, p, sub(tape, log_p, log_q)));
}

/// -log softmax(logits)[label] for a single logit vector.
inline Tensor cross_entropy(Tape& tape, const Tensor& logits, std::size_t label) {
  detail::require(logits.rank() == 1 && label < logits.size(), "cross_entropy label out of range");
  std::vector<double> onehot(logits.size(), 0.0);
  onehot[label] = -1.0;
  return sum(tape, mul(tape, log_softmax(tape, logits), Tensor(logits.shape(), std::move(onehot))));
}

}  // namespace pointca::ad
