#pragma once

// Small vision-transformer demo: patch embedding, a stack of attention + MLP
// blocks with residuals, mean pooling and a linear head. The score function
// inside every attention block is pluggable, and gradient taps can record
// (score input, dL/d score input) pairs during backward.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pattn/analysis.hpp"
#include "pattn/autodiff.hpp"
#include "pattn/random.hpp"
#include "pattn/score_functions.hpp"

namespace pattn::nn {

enum class ScoreScale { InvDModel, InvSqrtDModel };

struct AttentionConfig {
  int embed_dim = 64;
  int num_heads = 4;
  ScoreFunctionKind score_kind{};
  ScoreScale score_scale = ScoreScale::InvDModel;
  bool prenormalize = false;

  double scale_factor() const {
    const double d = static_cast<double>(embed_dim);
    return score_scale == ScoreScale::InvDModel ? 1.0 / d : 1.0 / std::sqrt(d);
  }
};

struct DemoConfig {
  int depth = 1;
  AttentionConfig attention{};
  int patch_size = 4;
  int height = 32;
  int width = 32;
  int channels = 3;
  double mlp_ratio = 2.0;
  int num_classes = 100;

  int tokens() const { return (height / patch_size) * (width / patch_size); }
  int patch_dim() const { return patch_size * patch_size * channels; }
  int hidden_dim() const {
    return std::max(1, static_cast<int>(std::lround(mlp_ratio * attention.embed_dim)));
  }

  /// Defaults for 8x8x1 synthetic inputs.
  static DemoConfig synthetic_default(int num_classes) {
    DemoConfig c;
    c.attention.embed_dim = 32;
    c.attention.num_heads = 2;
    c.patch_size = 2;
    c.height = c.width = 8;
    c.channels = 1;
    c.num_classes = num_classes;
    return c;
  }
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline void validate(const DemoConfig& c) {
  if (c.depth < 1) throw ConfigError("depth must be >= 1");
  if (c.attention.embed_dim < 1 || c.attention.num_heads < 1)
    throw ConfigError("embed_dim and num_heads must be positive");
  if (c.attention.embed_dim % c.attention.num_heads != 0)
    throw ConfigError("embed_dim must be divisible by num_heads");
  if (c.patch_size < 1 || c.height % c.patch_size != 0 || c.width % c.patch_size != 0)
    throw ConfigError("image height and width must be divisible by patch_size");
  if (c.channels < 1) throw ConfigError("channels must be >= 1");
  if (c.tokens() < 2) throw ConfigError("attention needs at least 2 tokens");
  if (!(c.mlp_ratio > 0.0)) throw ConfigError("mlp_ratio must be > 0");
  if (c.num_classes < 2) throw ConfigError("num_classes must be >= 2");
}

/// Raised when a block cannot produce usable scores: a ScoreError, a
/// degenerate pre-normalization row, or non-finite attention output.
class BreakdownSignal : public std::runtime_error {
 public:
  enum class Reason { Score, DegenerateRow, NonFinite };

  BreakdownSignal(int layer, long step, const std::string& what, Reason reason,
                  std::optional<ScoreErrorKind> kind = std::nullopt)
      : std::runtime_error(describe(layer, step, what)),
        layer_(layer), step_(step), reason_(reason), kind_(kind) {}

  int layer() const noexcept { return layer_; }
  long step() const noexcept { return step_; }
  Reason reason() const noexcept { return reason_; }
  std::optional<ScoreErrorKind> score_error() const noexcept { return kind_; }

 private:
  static std::string describe(int layer, long step, const std::string& what) {
    std::ostringstream os;
    os << "breakdown in layer " << layer << " at step " << step << ": " << what;
    return os.str();
  }
  int layer_;
  long step_;
  Reason reason_;
  std::optional<ScoreErrorKind> kind_;
};

// ---------------------------------------------------------------------------
// Gradient taps

struct TapSample {
  double x = 0.0;     // score-function input
  double grad = 0.0;  // dL/dx through the score call
  std::size_t index = 0;  // flat position in the layer's score-input buffer
};

struct GradientTapRecord {
  long step = 0;
  int layer_index = 0;
  std::vector<TapSample> samples;
  std::size_t sample_cap = 0;
};

struct TapSettings {
  bool enabled = false;
  std::size_t sample_cap = 256;
  std::uint64_t seed = 0;
};

// Reservoir sampler (algorithm R) over one layer's score entries.
class Reservoir {
 public:
  Reservoir(std::size_t cap, std::uint64_t seed, std::uint64_t stream) : cap_(cap), rng_(seed, stream) {
    kept_.reserve(cap);
  }

  void offer(const TapSample& s) {
    ++seen_;
    if (kept_.size() < cap_) {
      kept_.push_back(s);
      return;
    }
    const auto j = rng_.below(seen_);
    if (j < cap_) kept_[j] = s;
  }

  std::vector<TapSample> take() && { return std::move(kept_); }

 private:
  std::size_t cap_;
  CounterRng rng_;
  std::size_t seen_ = 0;
  std::vector<TapSample> kept_;
};

/// Adds `delta` to one entry of one layer's score-input buffer before the
/// score function is applied. Test hook for checking tap gradients.
struct ScoreInputPerturbation {
  int layer = 0;
  std::size_t index = 0;
  double delta = 0.0;
};

// ---------------------------------------------------------------------------
// Attention op

struct AttentionContext {
  int layer = 0;
  long step = 0;
  const TapSettings* taps = nullptr;
  std::vector<GradientTapRecord>* tap_sink = nullptr;
  std::vector<Matrix>* score_export = nullptr;  // head-averaged, one per batch item
  const ScoreInputPerturbation* perturbation = nullptr;
};

namespace detail {

inline void row_normalize_vjp(std::span<const double> y, double inv_sd, std::span<const double> gy,
                              std::span<double> gx) {
  const double n = static_cast<double>(y.size());
  double mean_g = 0.0, mean_gy = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    mean_g += gy[i];
    mean_gy += gy[i] * y[i];
  }
  mean_g /= n;
  mean_gy /= n;
  for (std::size_t i = 0; i < y.size(); ++i) gx[i] = inv_sd * (gy[i] - mean_g - y[i] * mean_gy);
}

}  // namespace detail

/// Multi-head attention core on projected Q, K, V of shape [B * n, D].
///
/// Per head: raw = Q_h K_h^T * scale, optionally row-normalized, mapped
/// row-wise by the score function, then multiplied with V_h. Score failures
/// surface as BreakdownSignal.
inline TensorPtr attention_core(Tape& tape, const AttentionConfig& cfg, const TensorPtr& q,
                                const TensorPtr& k, const TensorPtr& v, std::size_t tokens,
                                const AttentionContext& ctx) {
  const std::size_t dm = static_cast<std::size_t>(cfg.embed_dim);
  const std::size_t heads = static_cast<std::size_t>(cfg.num_heads);
  const std::size_t hd = dm / heads;
  const std::size_t n = tokens;
  const std::size_t batch = q->rows() / n;
  const double scale = cfg.scale_factor();
  const std::size_t block = n * n;  // one (batch, head) score matrix

  // Score inputs z (after optional prenorm), scores S, and prenorm 1/sd.
  auto z = std::make_shared<std::vector<double>>(batch * heads * block);
  auto s = std::make_shared<std::vector<double>>(batch * heads * block);
  auto inv_sd = std::make_shared<std::vector<double>>(cfg.prenormalize ? batch * heads * n : 0);
  auto out = zeros({batch * n, dm}, q->requires_grad || k->requires_grad || v->requires_grad);

  std::vector<double> raw(n);
  for (std::size_t b = 0; b < batch; ++b) {
    if (ctx.score_export) ctx.score_export->emplace_back(n, n, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t base = (b * heads + h) * block;
      for (std::size_t i = 0; i < n; ++i) {
        const double* qi = q->values.data() + (b * n + i) * dm + h * hd;
        for (std::size_t j = 0; j < n; ++j) {
          const double* kj = k->values.data() + (b * n + j) * dm + h * hd;
          double acc = 0.0;
          for (std::size_t c = 0; c < hd; ++c) acc += qi[c] * kj[c];
          raw[j] = acc * scale;
        }
        std::span<double> zrow(z->data() + base + i * n, n);
        try {
          if (cfg.prenormalize) {
            const auto y = row_normalize(raw);
            std::copy(y.begin(), y.end(), zrow.begin());
            double mean = 0.0, var = 0.0;
            for (double r : raw) mean += r;
            mean /= static_cast<double>(n);
            for (double r : raw) var += (r - mean) * (r - mean);
            (*inv_sd)[(b * heads + h) * n + i] = 1.0 / std::sqrt(var / static_cast<double>(n));
          } else {
            std::copy(raw.begin(), raw.end(), zrow.begin());
          }
          if (ctx.perturbation && ctx.perturbation->layer == ctx.layer) {
            const auto idx = ctx.perturbation->index;
            if (idx >= base + i * n && idx < base + (i + 1) * n)
              (*z)[idx] += ctx.perturbation->delta;
          }
          const auto eval = scores(cfg.score_kind, std::span<const double>(zrow.data(), n));
          std::copy(eval.scores.begin(), eval.scores.end(), s->begin() + static_cast<long>(base + i * n));
        } catch (const ScoreError& e) {
          throw BreakdownSignal(ctx.layer, ctx.step, e.what(), BreakdownSignal::Reason::Score, e.kind());
        } catch (const DegenerateRow& e) {
          throw BreakdownSignal(ctx.layer, ctx.step, e.what(), BreakdownSignal::Reason::DegenerateRow);
        }
        if (ctx.score_export) {
          auto& m = ctx.score_export->back();
          for (std::size_t j = 0; j < n; ++j)
            m(i, j) += (*s)[base + i * n + j] / static_cast<double>(heads);
        }
      }
      // out_h = S V_h
      for (std::size_t i = 0; i < n; ++i) {
        double* oi = out->values.data() + (b * n + i) * dm + h * hd;
        for (std::size_t j = 0; j < n; ++j) {
          const double sij = (*s)[base + i * n + j];
          const double* vj = v->values.data() + (b * n + j) * dm + h * hd;
          for (std::size_t c = 0; c < hd; ++c) oi[c] += sij * vj[c];
        }
      }
    }
  }
  for (double val : out->values)
    if (!std::isfinite(val))
      throw BreakdownSignal(ctx.layer, ctx.step, "non-finite attention output",
                            BreakdownSignal::Reason::NonFinite);

  if (out->requires_grad) {
    const AttentionConfig cfg_copy = cfg;
    const bool tap = ctx.taps && ctx.taps->enabled && ctx.tap_sink;
    const TapSettings tap_settings = ctx.taps ? *ctx.taps : TapSettings{};
    auto* sink = ctx.tap_sink;
    const int layer = ctx.layer;
    const long step = ctx.step;
    tape.record([=] {
      const auto& gout = out->ensure_grad();
      auto& gq = q->ensure_grad();
      auto& gk = k->ensure_grad();
      auto& gv = v->ensure_grad();
      std::optional<Reservoir> reservoir;
      if (tap)
        reservoir.emplace(tap_settings.sample_cap, tap_settings.seed,
                          static_cast<std::uint64_t>(step) * 4096u + static_cast<std::uint64_t>(layer));
      std::vector<double> gs(n), gz(n), graw(n);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t base = (b * heads + h) * block;
          for (std::size_t i = 0; i < n; ++i) {
            const double* goi = gout.data() + (b * n + i) * dm + h * hd;
            // dS_ij = <dO_i, V_j>, dV_j += S_ij dO_i
            for (std::size_t j = 0; j < n; ++j) {
              const double* vj = v->values.data() + (b * n + j) * dm + h * hd;
              double* gvj = gv.data() + (b * n + j) * dm + h * hd;
              const double sij = (*s)[base + i * n + j];
              double acc = 0.0;
              for (std::size_t c = 0; c < hd; ++c) {
                acc += goi[c] * vj[c];
                gvj[c] += sij * goi[c];
              }
              gs[j] = acc;
            }
            std::span<const double> zrow(z->data() + base + i * n, n);
            const auto gzv = scores_vjp(cfg_copy.score_kind, zrow, gs);
            std::copy(gzv.begin(), gzv.end(), gz.begin());
            if (reservoir)
              for (std::size_t j = 0; j < n; ++j)
                reservoir->offer({zrow[j], gz[j], base + i * n + j});
            if (cfg_copy.prenormalize) {
              detail::row_normalize_vjp(zrow, (*inv_sd)[(b * heads + h) * n + i], gz, graw);
            } else {
              std::copy(gz.begin(), gz.end(), graw.begin());
            }
            // raw_ij = scale <Q_i, K_j>
            double* gqi = gq.data() + (b * n + i) * dm + h * hd;
            const double* qi = q->values.data() + (b * n + i) * dm + h * hd;
            for (std::size_t j = 0; j < n; ++j) {
              const double g = graw[j] * scale;
              const double* kj = k->values.data() + (b * n + j) * dm + h * hd;
              double* gkj = gk.data() + (b * n + j) * dm + h * hd;
              for (std::size_t c = 0; c < hd; ++c) {
                gqi[c] += g * kj[c];
                gkj[c] += g * qi[c];
              }
            }
          }
        }
      if (reservoir) {
        GradientTapRecord rec;
        rec.step = step;
        rec.layer_index = layer;
        rec.sample_cap = tap_settings.sample_cap;
        rec.samples = std::move(*reservoir).take();
        sink->push_back(std::move(rec));
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Demo model

struct BlockParams {
  TensorPtr wq, bq, wk, bk, wv, bv, wo, bo, w1, b1, w2, b2;
  std::vector<TensorPtr> all() const { return {wq, bq, wk, bk, wv, bv, wo, bo, w1, b1, w2, b2}; }
};

struct ForwardResult {
  TensorPtr logits;
  TensorPtr loss;  // null when no labels were given
};

class DemoModel {
 public:
  DemoModel(const DemoConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    validate(cfg_);
    CounterRng rng(seed, 0x5eed);
    const auto dm = static_cast<std::size_t>(cfg_.attention.embed_dim);
    const auto pd = static_cast<std::size_t>(cfg_.patch_dim());
    const auto hidden = static_cast<std::size_t>(cfg_.hidden_dim());
    const auto n = static_cast<std::size_t>(cfg_.tokens());
    const auto classes = static_cast<std::size_t>(cfg_.num_classes);

    patch_w_ = weight(rng, pd, dm);
    patch_b_ = bias(dm);
    pos_ = make_tensor({n, dm}, normals(rng, n * dm, 0.02), true);
    for (int l = 0; l < cfg_.depth; ++l) {
      BlockParams p;
      p.wq = weight(rng, dm, dm);
      p.bq = bias(dm);
      p.wk = weight(rng, dm, dm);
      p.bk = bias(dm);
      p.wv = weight(rng, dm, dm);
      p.bv = bias(dm);
      p.wo = weight(rng, dm, dm);
      p.bo = bias(dm);
      p.w1 = weight(rng, dm, hidden);
      p.b1 = bias(hidden);
      p.w2 = weight(rng, hidden, dm);
      p.b2 = bias(dm);
      blocks_.push_back(std::move(p));
    }
    head_w_ = weight(rng, dm, classes);
    head_b_ = bias(classes);
  }

  const DemoConfig& config() const noexcept { return cfg_; }

  std::vector<TensorPtr> parameters() const {
    std::vector<TensorPtr> ps{patch_w_, patch_b_, pos_};
    for (const auto& b : blocks_)
      for (auto& t : b.all()) ps.push_back(t);
    ps.push_back(head_w_);
    ps.push_back(head_b_);
    return ps;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p->size();
    return n;
  }

  void zero_grad() {
    for (auto& p : parameters()) p->zero_grad();
  }

  // Taps ------------------------------------------------------------------

  void set_taps(const TapSettings& t) { taps_ = t; }
  const TapSettings& taps() const noexcept { return taps_; }
  std::vector<GradientTapRecord> drain_taps() {
    auto out = std::move(tap_records_);
    tap_records_.clear();
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
      return a.step != b.step ? a.step < b.step : a.layer_index < b.layer_index;
    });
    return out;
  }

  void set_step(long step) noexcept { step_ = step; }
  void set_perturbation(std::optional<ScoreInputPerturbation> p) { perturbation_ = p; }

  // Forward ---------------------------------------------------------------

  /// Splits HWC images into non-overlapping patches: [B * tokens, p * p * C],
  /// tokens in raster order, features ordered (dy, dx, c).
  TensorPtr patchify(std::span<const std::vector<double>> images) const {
    const auto p = static_cast<std::size_t>(cfg_.patch_size);
    const auto w = static_cast<std::size_t>(cfg_.width);
    const auto c = static_cast<std::size_t>(cfg_.channels);
    const auto per_row = w / p;
    const auto n = static_cast<std::size_t>(cfg_.tokens());
    const auto pd = static_cast<std::size_t>(cfg_.patch_dim());
    const auto expect = static_cast<std::size_t>(cfg_.height * cfg_.width * cfg_.channels);
    auto x = zeros({images.size() * n, pd});
    for (std::size_t b = 0; b < images.size(); ++b) {
      if (images[b].size() != expect) throw ConfigError("image size does not match config");
      for (std::size_t t = 0; t < n; ++t) {
        const std::size_t py = t / per_row, px = t % per_row;
        double* dst = x->values.data() + (b * n + t) * pd;
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            for (std::size_t ch = 0; ch < c; ++ch)
              *dst++ = images[b][((py * p + dy) * w + (px * p + dx)) * c + ch];
      }
    }
    return x;
  }

  /// Runs the model on a batch of HWC images. With labels, also returns the
  /// mean cross-entropy loss. `attention_export`, when given, receives one
  /// head-averaged score matrix per (layer, image), layer-major.
  ForwardResult forward(Tape& tape, std::span<const std::vector<double>> images,
                        const std::vector<int>* labels = nullptr,
                        std::vector<Matrix>* attention_export = nullptr) {
    const auto n = static_cast<std::size_t>(cfg_.tokens());
    auto h = linear(tape, patchify(images), patch_w_, patch_b_);
    h = add_rows_broadcast(tape, h, pos_);
    for (int l = 0; l < cfg_.depth; ++l) {
      const auto& p = blocks_[static_cast<std::size_t>(l)];
      AttentionContext ctx;
      ctx.layer = l;
      ctx.step = step_;
      ctx.taps = &taps_;
      ctx.tap_sink = &tap_records_;
      ctx.score_export = attention_export;
      ctx.perturbation = perturbation_ ? &*perturbation_ : nullptr;
      auto q = linear(tape, h, p.wq, p.bq);
      auto k = linear(tape, h, p.wk, p.bk);
      auto v = linear(tape, h, p.wv, p.bv);
      auto a = attention_core(tape, cfg_.attention, q, k, v, n, ctx);
      h = add(tape, h, linear(tape, a, p.wo, p.bo));
      auto m = linear(tape, gelu(tape, linear(tape, h, p.w1, p.b1)), p.w2, p.b2);
      h = add(tape, h, m);
    }
    ForwardResult r;
    r.logits = linear(tape, mean_pool(tape, h, n), head_w_, head_b_);
    if (labels) r.loss = cross_entropy(tape, r.logits, *labels);
    return r;
  }

  /// Head-averaged n x n score matrix of every layer for one image.
  std::vector<Matrix> export_attention(const std::vector<double>& image) {
    Tape tape;
    std::vector<Matrix> out;
    const std::vector<std::vector<double>> batch{image};
    const auto saved = taps_.enabled;
    taps_.enabled = false;
    try {
      forward(tape, batch, nullptr, &out);
    } catch (...) {
      taps_.enabled = saved;
      throw;
    }
    taps_.enabled = saved;
    return out;
  }

 private:
  static std::vector<double> normals(CounterRng& rng, std::size_t count, double sd) {
    std::vector<double> v(count);
    for (auto& x : v) x = rng.normal(0.0, sd);
    return v;
  }
  static TensorPtr weight(CounterRng& rng, std::size_t in, std::size_t out) {
    return make_tensor({in, out}, normals(rng, in * out, 1.0 / std::sqrt(static_cast<double>(in))),
                       true);
  }
  static TensorPtr bias(std::size_t n) { return zeros({n}, true); }

  DemoConfig cfg_;
  TensorPtr patch_w_, patch_b_, pos_;
  std::vector<BlockParams> blocks_;
  TensorPtr head_w_, head_b_;
  TapSettings taps_{};
  std::vector<GradientTapRecord> tap_records_;
  long step_ = 0;
  std::optional<ScoreInputPerturbation> perturbation_;
};

inline DemoModel build_demo(const DemoConfig& cfg, std::uint64_t seed) { return DemoModel(cfg, seed); }

}  // namespace pattn::nn
