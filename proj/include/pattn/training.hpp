#pragma once

// Training loop with breakdown detection, run-log and tap serialization, and
// tap aggregation into gradient histograms.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "pattn/curve_io.hpp"
#include "pattn/datasets.hpp"
#include "pattn/demo_model.hpp"
#include "pattn/random.hpp"

namespace pattn {

struct SyntheticSpec {
  int num_classes = 10;
  int samples_per_class = 100;
  double noise_sd = 0.5;
};

struct CifarSpec {
  std::filesystem::path path;
  std::size_t subset_size = 512;
};

struct AdamSpec {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct SgdSpec {
  double lr = 1e-2;
  double momentum = 0.9;
};

struct TrainConfig {
  nn::DemoConfig demo = nn::DemoConfig::synthetic_default(10);
  std::variant<SyntheticSpec, CifarSpec> dataset = SyntheticSpec{};
  std::variant<AdamSpec, SgdSpec> optimizer = AdamSpec{};
  int steps = 500;
  int batch_size = 32;
  std::uint64_t seed = 7;
  int tap_every = 0;  // 0 disables taps
  std::size_t tap_cap = 256;
};

/// Gradient-norm runaway: norm above this for kRunawaySteps consecutive steps.
inline constexpr double kRunawayNorm = 1e6;
inline constexpr int kRunawaySteps = 10;

enum class BreakdownCause { NonFiniteLoss, ScoreError, GradNormRunaway };

inline std::string_view name_of(BreakdownCause c) {
  switch (c) {
    case BreakdownCause::NonFiniteLoss: return "NonFiniteLoss";
    case BreakdownCause::ScoreError: return "ScoreError";
    case BreakdownCause::GradNormRunaway: return "GradNormRunaway";
  }
  return "unknown";
}

struct StepRecord {
  long step = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;
  double grad_norm = 0.0;
};

struct Breakdown {
  long step = 0;
  BreakdownCause cause = BreakdownCause::NonFiniteLoss;
  std::string detail;
};

struct TrainRunLog {
  std::vector<StepRecord> records;
  std::optional<Breakdown> breakdown;
  double final_eval_accuracy = std::numeric_limits<double>::quiet_NaN();
  std::vector<nn::GradientTapRecord> taps;
};

inline void validate(const TrainConfig& cfg) {
  nn::validate(cfg.demo);
  if (cfg.steps < 1) throw nn::ConfigError("steps must be >= 1");
  if (cfg.batch_size < 2) throw nn::ConfigError("batch_size must be >= 2");
  if (cfg.tap_every < 0) throw nn::ConfigError("tap_every must be >= 0");
  if (cfg.tap_every > 0 && cfg.tap_cap < 1) throw nn::ConfigError("tap_cap must be >= 1");
}

inline Dataset load_dataset(const TrainConfig& cfg) {
  if (const auto* syn = std::get_if<SyntheticSpec>(&cfg.dataset))
    return make_synthetic(syn->num_classes, syn->samples_per_class, syn->noise_sd, cfg.seed);
  const auto& cif = std::get<CifarSpec>(cfg.dataset);
  return load_cifar100(cif.path, cif.subset_size);
}

namespace detail {

class Optimizer {
 public:
  Optimizer(std::variant<AdamSpec, SgdSpec> spec, const std::vector<nn::TensorPtr>& params)
      : spec_(spec), params_(params) {
    for (const auto& p : params_) {
      m_.emplace_back(p->size(), 0.0);
      v_.emplace_back(p->size(), 0.0);
    }
  }

  void step() {
    ++t_;
    if (const auto* adam = std::get_if<AdamSpec>(&spec_)) {
      const double c1 = 1.0 - std::pow(adam->beta1, t_);
      const double c2 = 1.0 - std::pow(adam->beta2, t_);
      for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& p = *params_[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
          const double g = p.grad[i];
          m_[k][i] = adam->beta1 * m_[k][i] + (1.0 - adam->beta1) * g;
          v_[k][i] = adam->beta2 * v_[k][i] + (1.0 - adam->beta2) * g * g;
          p.values[i] -= adam->lr * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + adam->eps);
        }
      }
    } else {
      const auto& sgd = std::get<SgdSpec>(spec_);
      for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& p = *params_[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
          m_[k][i] = sgd.momentum * m_[k][i] + p.grad[i];
          p.values[i] -= sgd.lr * m_[k][i];
        }
      }
    }
  }

 private:
  std::variant<AdamSpec, SgdSpec> spec_;
  std::vector<nn::TensorPtr> params_;
  std::vector<std::vector<double>> m_, v_;
  int t_ = 0;
};

inline double accuracy(const nn::Tensor& logits, std::span<const int> labels) {
  const std::size_t classes = logits.cols();
  std::size_t hits = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    std::size_t arg = 0;
    for (std::size_t c = 1; c < classes; ++c)
      if (logits.values[b * classes + c] > logits.values[b * classes + arg]) arg = c;
    hits += static_cast<int>(arg) == labels[b] ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

inline BreakdownCause cause_of(const nn::BreakdownSignal& s) {
  return s.reason() == nn::BreakdownSignal::Reason::NonFinite ? BreakdownCause::NonFiniteLoss
                                                              : BreakdownCause::ScoreError;
}

}  // namespace detail

/// Accuracy of `model` on the given items, evaluated in chunks.
inline double evaluate(nn::DemoModel& model, const Dataset& ds, std::span<const std::size_t> items,
                       std::size_t chunk = 64) {
  if (items.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::size_t hits = 0;
  for (std::size_t start = 0; start < items.size(); start += chunk) {
    const std::size_t end = std::min(items.size(), start + chunk);
    std::vector<std::vector<double>> imgs;
    std::vector<int> labels;
    for (std::size_t i = start; i < end; ++i) {
      imgs.push_back(ds.images[items[i]]);
      labels.push_back(ds.labels[items[i]]);
    }
    nn::Tape tape;
    const auto r = model.forward(tape, imgs);
    hits += static_cast<std::size_t>(
        std::lround(detail::accuracy(*r.logits, labels) * static_cast<double>(labels.size())));
  }
  return static_cast<double>(hits) / static_cast<double>(items.size());
}

/// Minibatch cross-entropy training. Breakdowns are recorded in the log
/// rather than thrown; records cover only the steps completed before it.
inline TrainRunLog train(const TrainConfig& cfg, const Dataset& ds) {
  validate(cfg);
  if (ds.height != cfg.demo.height || ds.width != cfg.demo.width ||
      ds.channels != cfg.demo.channels)
    throw nn::ConfigError("dataset image shape does not match the model config");
  if (ds.train_indices.empty()) throw nn::ConfigError("dataset has no training items");

  auto model = nn::build_demo(cfg.demo, cfg.seed);
  detail::Optimizer opt(cfg.optimizer, model.parameters());
  CounterRng batch_rng(cfg.seed, 0xba7c4);
  TrainRunLog log;
  int runaway = 0;

  for (long step = 1; step <= cfg.steps; ++step) {
    std::vector<std::vector<double>> imgs;
    std::vector<int> labels;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto idx = ds.train_indices[batch_rng.below(ds.train_indices.size())];
      imgs.push_back(ds.images[idx]);
      labels.push_back(ds.labels[idx]);
    }
    const bool tap_now = cfg.tap_every > 0 && (step - 1) % cfg.tap_every == 0;
    model.set_taps({tap_now, cfg.tap_cap, cfg.seed});
    model.set_step(step);
    model.zero_grad();

    nn::Tape tape;
    nn::ForwardResult fr;
    try {
      fr = model.forward(tape, imgs, &labels);
    } catch (const nn::BreakdownSignal& sig) {
      log.breakdown = Breakdown{step, detail::cause_of(sig), sig.what()};
      break;
    }
    const double loss = fr.loss->values[0];
    if (!std::isfinite(loss)) {
      log.breakdown = Breakdown{step, BreakdownCause::NonFiniteLoss, "loss is not finite"};
      break;
    }
    tape.backward(fr.loss);

    double sq = 0.0;
    for (const auto& p : model.parameters())
      for (double g : p->grad) sq += g * g;
    const double grad_norm = std::sqrt(sq);
    if (!std::isfinite(grad_norm)) {
      log.breakdown = Breakdown{step, BreakdownCause::GradNormRunaway, "gradient norm is not finite"};
      break;
    }
    runaway = grad_norm > kRunawayNorm ? runaway + 1 : 0;
    if (runaway >= kRunawaySteps) {
      log.breakdown = Breakdown{step, BreakdownCause::GradNormRunaway,
                                "gradient norm above 1e6 for 10 consecutive steps"};
      break;
    }
    for (auto& rec : model.drain_taps()) log.taps.push_back(std::move(rec));
    log.records.push_back({step, loss, detail::accuracy(*fr.logits, labels), grad_norm});
    opt.step();
  }

  if (!log.breakdown) {
    model.set_taps({});
    try {
      log.final_eval_accuracy = evaluate(model, ds, ds.eval_indices);
    } catch (const nn::BreakdownSignal& sig) {
      log.breakdown = Breakdown{cfg.steps + 1L, detail::cause_of(sig), sig.what()};
    }
  }
  return log;
}

inline TrainRunLog train(const TrainConfig& cfg) { return train(cfg, load_dataset(cfg)); }

// ---------------------------------------------------------------------------
// Serialization

/// One JSON object per step, then a terminal breakdown or final-accuracy object.
inline void write_run_log(const TrainRunLog& log, std::ostream& out) {
  for (const auto& r : log.records) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["loss"] = r.loss;
    j["acc"] = r.train_accuracy;
    j["grad_norm"] = r.grad_norm;
    out << j.dump() << '\n';
  }
  nlohmann::ordered_json term;
  if (log.breakdown) {
    term["breakdown"] = {{"step", log.breakdown->step}, {"cause", name_of(log.breakdown->cause)}};
  } else {
    term["final_eval_accuracy"] = log.final_eval_accuracy;
  }
  out << term.dump() << '\n';
}

inline TrainRunLog read_run_log(std::istream& in) {
  TrainRunLog log;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (j.contains("breakdown")) {
      const auto& b = j["breakdown"];
      Breakdown bd;
      bd.step = b.at("step").get<long>();
      const auto cause = b.at("cause").get<std::string>();
      for (auto c : {BreakdownCause::NonFiniteLoss, BreakdownCause::ScoreError,
                     BreakdownCause::GradNormRunaway})
        if (name_of(c) == cause) bd.cause = c;
      log.breakdown = bd;
    } else if (j.contains("final_eval_accuracy")) {
      log.final_eval_accuracy = j["final_eval_accuracy"].get<double>();
    } else {
      log.records.push_back({j.at("step").get<long>(), j.at("loss").get<double>(),
                             j.at("acc").get<double>(), j.at("grad_norm").get<double>()});
    }
  }
  return log;
}

/// Sidecar file holding a run's tap records.
inline std::filesystem::path taps_path_for(const std::filesystem::path& run_log) {
  auto p = run_log;
  p += ".taps.jsonl";
  return p;
}

/// One object per record: {"step", "layer", "cap", "samples": [[x, grad, index], ...]}.
inline void write_taps(const std::vector<nn::GradientTapRecord>& taps, std::ostream& out) {
  for (const auto& rec : taps) {
    nlohmann::ordered_json j;
    j["step"] = rec.step;
    j["layer"] = rec.layer_index;
    j["cap"] = rec.sample_cap;
    auto samples = nlohmann::json::array();
    for (const auto& s : rec.samples) samples.push_back({s.x, s.grad, s.index});
    j["samples"] = std::move(samples);
    out << j.dump() << '\n';
  }
}

inline std::vector<nn::GradientTapRecord> read_taps(std::istream& in) {
  std::vector<nn::GradientTapRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    nn::GradientTapRecord rec;
    rec.step = j.at("step").get<long>();
    rec.layer_index = j.at("layer").get<int>();
    rec.sample_cap = j.at("cap").get<std::size_t>();
    for (const auto& s : j.at("samples"))
      rec.samples.push_back({s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<std::size_t>()});
    out.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tap aggregation

struct HistogramBin {
  double x_center = 0.0;
  double mean_abs_grad = std::numeric_limits<double>::quiet_NaN();  // NaN when empty
  std::size_t count = 0;
};

struct GradientHistogram {
  long step = 0;
  int layer_index = 0;
  std::vector<HistogramBin> bins;
};

/// Uniform bins over [x_lo, x_hi]; out-of-range samples land in the edge bins.
inline std::vector<GradientHistogram> aggregate_taps(std::span<const nn::GradientTapRecord> taps,
                                                     int bin_count, double x_lo, double x_hi) {
  if (bin_count < 2) throw std::invalid_argument("bin_count must be >= 2");
  if (!(x_lo < x_hi)) throw std::invalid_argument("x range must be increasing");
  const double width = (x_hi - x_lo) / bin_count;
  std::vector<GradientHistogram> out;
  for (const auto& rec : taps) {
    GradientHistogram h;
    h.step = rec.step;
    h.layer_index = rec.layer_index;
    h.bins.resize(static_cast<std::size_t>(bin_count));
    std::vector<double> sums(h.bins.size(), 0.0);
    for (std::size_t b = 0; b < h.bins.size(); ++b)
      h.bins[b].x_center = x_lo + (static_cast<double>(b) + 0.5) * width;
    for (const auto& s : rec.samples) {
      auto b = static_cast<long>(std::floor((s.x - x_lo) / width));
      b = std::clamp(b, 0L, static_cast<long>(bin_count) - 1);
      sums[static_cast<std::size_t>(b)] += std::abs(s.grad);
      ++h.bins[static_cast<std::size_t>(b)].count;
    }
    for (std::size_t b = 0; b < h.bins.size(); ++b)
      if (h.bins[b].count > 0) h.bins[b].mean_abs_grad = sums[b] / static_cast<double>(h.bins[b].count);
    out.push_back(std::move(h));
  }
  return out;
}

inline void write_histograms_csv(const std::vector<GradientHistogram>& hists, std::ostream& out) {
  out << "step,layer,x_center,mean_abs_grad,count\n";
  for (const auto& h : hists)
    for (const auto& b : h.bins)
      out << h.step << ',' << h.layer_index << ',' << format_double(b.x_center) << ','
          << format_double(b.mean_abs_grad) << ',' << b.count << '\n';
}

}  // namespace pattn
