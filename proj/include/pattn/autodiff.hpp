#pragma once

// Minimal tape-based reverse-mode differentiation over dense row-major
// tensors. A Tape records one backward closure per op during the forward
// pass; Tape::backward replays them in reverse.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace pattn::nn {

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until needed, then same length as values

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> v, bool rg = false)
      : shape(std::move(s)), values(std::move(v)), requires_grad(rg) {
    if (numel(shape) != values.size()) throw std::invalid_argument("tensor shape/value mismatch");
  }

  static std::size_t numel(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
  }

  std::size_t size() const noexcept { return values.size(); }
  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return shape.size() > 1 ? shape[1] : 1; }

  std::vector<double>& ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    return grad;
  }
  void zero_grad() { grad.assign(values.size(), 0.0); }
};

using TensorPtr = std::shared_ptr<Tensor>;

inline TensorPtr make_tensor(std::vector<std::size_t> shape, std::vector<double> values,
                             bool requires_grad = false) {
  return std::make_shared<Tensor>(std::move(shape), std::move(values), requires_grad);
}

inline TensorPtr zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
  const auto n = Tensor::numel(shape);
  return make_tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

class Tape {
 public:
  void record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded op in reverse.
  void backward(const TensorPtr& loss) {
    if (loss->size() != 1) throw std::invalid_argument("backward needs a scalar loss");
    loss->ensure_grad()[0] = 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  std::size_t size() const noexcept { return ops_.size(); }

 private:
  std::vector<std::function<void()>> ops_;
};

// ---------------------------------------------------------------------------
// Ops

/// X[R, in] * W[in, out] + b[out].
inline TensorPtr linear(Tape& tape, const TensorPtr& x, const TensorPtr& w, const TensorPtr& b) {
  const std::size_t rows = x->rows(), in = x->cols(), out = w->cols();
  if (w->rows() != in || b->size() != out) throw std::invalid_argument("linear: shape mismatch");
  auto y = zeros({rows, out}, x->requires_grad || w->requires_grad || b->requires_grad);
  for (std::size_t r = 0; r < rows; ++r) {
    double* yr = y->values.data() + r * out;
    for (std::size_t o = 0; o < out; ++o) yr[o] = b->values[o];
    const double* xr = x->values.data() + r * in;
    for (std::size_t i = 0; i < in; ++i) {
      const double xv = xr[i];
      const double* wr = w->values.data() + i * out;
      for (std::size_t o = 0; o < out; ++o) yr[o] += xv * wr[o];
    }
  }
  if (y->requires_grad) {
    tape.record([x, w, b, y, rows, in, out] {
      const auto& gy = y->ensure_grad();
      if (b->requires_grad) {
        auto& gb = b->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t o = 0; o < out; ++o) gb[o] += gy[r * out + o];
      }
      if (w->requires_grad) {
        auto& gw = w->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t i = 0; i < in; ++i) {
            const double xv = x->values[r * in + i];
            double* gwr = gw.data() + i * out;
            const double* gyr = gy.data() + r * out;
            for (std::size_t o = 0; o < out; ++o) gwr[o] += xv * gyr[o];
          }
      }
      if (x->requires_grad) {
        auto& gx = x->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t i = 0; i < in; ++i) {
            const double* wr = w->values.data() + i * out;
            const double* gyr = gy.data() + r * out;
            double acc = 0.0;
            for (std::size_t o = 0; o < out; ++o) acc += wr[o] * gyr[o];
            gx[r * in + i] += acc;
          }
      }
    });
  }
  return y;
}

inline TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  if (a->size() != b->size()) throw std::invalid_argument("add: shape mismatch");
  auto y = make_tensor(a->shape, a->values, a->requires_grad || b->requires_grad);
  for (std::size_t i = 0; i < y->size(); ++i) y->values[i] += b->values[i];
  if (y->requires_grad) {
    tape.record([a, b, y] {
      const auto& gy = y->ensure_grad();
      for (const auto& t : {a, b})
        if (t->requires_grad) {
          auto& g = t->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
        }
    });
  }
  return y;
}

/// x[B * n, D] + pos[n, D] broadcast over the B blocks of n rows.
inline TensorPtr add_rows_broadcast(Tape& tape, const TensorPtr& x, const TensorPtr& pos) {
  const std::size_t block = pos->size();
  if (x->size() % block != 0) throw std::invalid_argument("add_rows_broadcast: shape mismatch");
  auto y = make_tensor(x->shape, x->values, x->requires_grad || pos->requires_grad);
  for (std::size_t i = 0; i < y->size(); ++i) y->values[i] += pos->values[i % block];
  if (y->requires_grad) {
    tape.record([x, pos, y, block] {
      const auto& gy = y->ensure_grad();
      if (x->requires_grad) {
        auto& gx = x->ensure_grad();
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
      }
      if (pos->requires_grad) {
        auto& gp = pos->ensure_grad();
        for (std::size_t i = 0; i < gy.size(); ++i) gp[i % block] += gy[i];
      }
    });
  }
  return y;
}

/// Exact GELU, x * Phi(x).
inline TensorPtr gelu(Tape& tape, const TensorPtr& x) {
  auto y = make_tensor(x->shape, x->values, x->requires_grad);
  for (auto& v : y->values) v = 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2));
  if (y->requires_grad) {
    tape.record([x, y] {
      const auto& gy = y->ensure_grad();
      auto& gx = x->ensure_grad();
      for (std::size_t i = 0; i < gy.size(); ++i) {
        const double v = x->values[i];
        const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
        gx[i] += gy[i] * (cdf + v * pdf);
      }
    });
  }
  return y;
}

/// Mean over each block of `tokens` rows: [B * tokens, D] -> [B, D].
inline TensorPtr mean_pool(Tape& tape, const TensorPtr& x, std::size_t tokens) {
  const std::size_t d = x->cols();
  const std::size_t batch = x->rows() / tokens;
  auto y = zeros({batch, d}, x->requires_grad);
  const double inv = 1.0 / static_cast<double>(tokens);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < tokens; ++t)
      for (std::size_t c = 0; c < d; ++c)
        y->values[b * d + c] += x->values[(b * tokens + t) * d + c] * inv;
  if (y->requires_grad) {
    tape.record([x, y, tokens, d, batch, inv] {
      const auto& gy = y->ensure_grad();
      auto& gx = x->ensure_grad();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < tokens; ++t)
          for (std::size_t c = 0; c < d; ++c) gx[(b * tokens + t) * d + c] += gy[b * d + c] * inv;
    });
  }
  return y;
}

/// Mean softmax cross-entropy of logits[B, C] against integer labels.
inline TensorPtr cross_entropy(Tape& tape, const TensorPtr& logits,
                               const std::vector<int>& labels) {
  const std::size_t batch = logits->rows(), classes = logits->cols();
  if (labels.size() != batch) throw std::invalid_argument("cross_entropy: label count mismatch");
  auto probs = std::make_shared<std::vector<double>>(batch * classes);
  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = logits->values.data() + b * classes;
    double mx = row[0];
    for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t c = 0; c < classes; ++c) (*probs)[b * classes + c] = std::exp(row[c] - log_z);
    loss += log_z - row[static_cast<std::size_t>(labels[b])];
  }
  auto y = make_tensor({1}, {loss / static_cast<double>(batch)}, logits->requires_grad);
  if (y->requires_grad) {
    tape.record([logits, y, probs, labels, batch, classes] {
      const double g = y->ensure_grad()[0] / static_cast<double>(batch);
      auto& gl = logits->ensure_grad();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < classes; ++c) {
          const double onehot = static_cast<int>(c) == labels[b] ? 1.0 : 0.0;
          gl[b * classes + c] += g * ((*probs)[b * classes + c] - onehot);
        }
    });
  }
  return y;
}

/// 0.5 * sum (pred - target)^2.
inline TensorPtr squared_error(Tape& tape, const TensorPtr& pred, const std::vector<double>& target) {
  if (pred->size() != target.size()) throw std::invalid_argument("squared_error: size mismatch");
  double loss = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double r = pred->values[i] - target[i];
    loss += 0.5 * r * r;
  }
  auto y = make_tensor({1}, {loss}, pred->requires_grad);
  if (y->requires_grad) {
    tape.record([pred, y, target] {
      const double g = y->ensure_grad()[0];
      auto& gp = pred->ensure_grad();
      for (std::size_t i = 0; i < target.size(); ++i) gp[i] += g * (pred->values[i] - target[i]);
    });
  }
  return y;
}

}  // namespace pattn::nn
