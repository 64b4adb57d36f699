// Acceptance checks: one PASS/FAIL line per criterion, exit 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "pattn/analysis.hpp"
#include "pattn/datasets.hpp"
#include "pattn/training.hpp"

using namespace pattn;
using nn::DemoConfig;

namespace {

struct Outcome {
  bool ok = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string title;
  double budget_s;
  std::function<Outcome()> body;
};

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

std::string fmt(const char* f, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::vector<double> normal_vec(CounterRng& rng, std::size_t d, double sd = 1.0) {
  std::vector<double> x(d);
  for (auto& v : x) v = rng.normal(0.0, sd);
  return x;
}

bool is_periodic(ScoreTag t) {
  switch (t) {
    case ScoreTag::SinMaxConstant:
    case ScoreTag::SinMax:
    case ScoreTag::CosMax:
    case ScoreTag::Sin2Max:
    case ScoreTag::Sin2MaxShifted:
    case ScoreTag::SinSoftmax:
    case ScoreTag::SirenMax:
      return true;
    default:
      return false;
  }
}

Outcome gradient_oracle_suite() {
  double worst = 0.0;
  std::string worst_at = "-";
  long checked = 0, skipped = 0;
  for (auto tag : kAllScoreTags) {
    const auto kind = ScoreFunctionKind::of(tag);
    for (std::size_t d : {2u, 8u, 64u}) {
      CounterRng rng(42, static_cast<std::uint64_t>(tag) * 1000 + d);
      for (int t = 0; t < 100; ++t) {
        const auto x = normal_vec(rng, d);
        try {
          const auto an = jacobian(kind, x);
          const auto fd = finite_diff_jacobian(kind, x, 1e-5, FdStencil::Central4);
          for (std::size_t i = 0; i < an.values().size(); ++i) {
            const double e = rel_err(an.values()[i], fd.values()[i]);
            if (e > worst) {
              worst = e;
              worst_at = fmt("%s d=%zu", std::string(name_of(tag)).c_str(), d);
            }
          }
          ++checked;
        } catch (const ScoreError&) {
          ++skipped;
        }
      }
    }
  }
  return {worst <= 1e-6, fmt("max rel err %.3e at %s; %ld draws checked, %ld skipped", worst,
                             worst_at.c_str(), checked, skipped)};
}

Outcome softmax_extremum() {
  bool ok = true;
  std::string detail;
  for (double m : {0.5, 1.0, 10.0, 100.0}) {
    const double v = softmax_numeric_extreme_gradient(m);
    ok = ok && std::abs(v - 0.25) <= 1e-6;
    detail += fmt("M=%g: %.9f  ", m, v);
  }
  return {ok, detail};
}

Outcome cosmax_interval() {
  bool ok = true;
  std::string detail;
  for (double m : {0.5, 2.0, 5.0, 10.0, -5.0}) {
    const auto [a, b] = cosmax_interval_endpoints(m);
    auto g = [m](double x) { return cosmax_diagonal_gradient(m, x); };
    const double pi = std::numbers::pi;
    const auto hi = maximize(g, -pi, pi);
    const auto lo = minimize(g, -pi, pi);
    auto inside = [&](double v) {
      return std::isfinite(v) && v >= a - 1e-6 && v <= b + 1e-6;
    };
    const bool row_ok = inside(hi.value) && inside(lo.value);
    ok = ok && row_ok;
    detail += fmt("M=%g: [%.4g, %.4g] max %.4g min %.4g %s; ", m, a, b, hi.value, lo.value,
                  row_ok ? "in" : "OUT");
  }
  return {ok, detail};
}

Outcome sin_softmax_bound() {
  const auto kind = ScoreFunctionKind::of(ScoreTag::SinSoftmax);
  CounterRng rng(9);
  const double lo_bound = std::exp(-1.0), hi_bound = std::exp(1.0), ratio_bound = std::exp(2.0);
  long violations = 0;
  double worst_ratio = 0.0;
  for (int t = 0; t < 10000; ++t) {
    const auto x = normal_vec(rng, 16, 10.0);
    const auto ev = scores(kind, x);
    const auto [mn, mx] = std::minmax_element(ev.intermediates.begin(), ev.intermediates.end());
    if (*mn < lo_bound || *mx > hi_bound) ++violations;
    worst_ratio = std::max(worst_ratio, *mx / *mn);
  }
  return {violations == 0 && worst_ratio <= ratio_bound,
          fmt("10000 inputs, %ld bound violations, worst max/min %.6f (e^2 = %.6f)", violations,
              worst_ratio, ratio_bound)};
}

Outcome normalization_invariants() {
  constexpr int draws = 1000;
  constexpr std::size_t d = 8;
  double sum_err = 0.0, col_err = 0.0, period_err = 0.0, phase_err = 0.0;
  std::string sum_at = "-", col_at = "-", period_at = "-";
  long skipped = 0;
  for (auto tag : kAllScoreTags) {
    const auto kind = ScoreFunctionKind::of(tag);
    const std::string name(name_of(tag));
    CounterRng rng(5, static_cast<std::uint64_t>(tag));
    for (int t = 0; t < draws; ++t) {
      auto x = normal_vec(rng, d);
      try {
        const auto s = scores(kind, x).scores;
        double total = 0.0;
        for (double v : s) total += v;
        if (std::abs(total - 1.0) > sum_err) {
          sum_err = std::abs(total - 1.0);
          sum_at = name;
        }
        const auto jac = jacobian(kind, x);
        for (std::size_t k = 0; k < d; ++k) {
          double c = 0.0;
          for (std::size_t j = 0; j < d; ++j) c += jac(j, k);
          if (std::abs(c) > col_err) {
            col_err = std::abs(c);
            col_at = name;
          }
        }
        if (is_periodic(tag)) {
          for (auto& v : x) v += 2.0 * std::numbers::pi;
          const auto s2 = scores(kind, x).scores;
          for (std::size_t j = 0; j < d; ++j)
            if (std::abs(s2[j] - s[j]) > period_err) {
              period_err = std::abs(s2[j] - s[j]);
              period_at = name;
            }
        }
      } catch (const ScoreError&) {
        ++skipped;
      }
    }
  }
  const auto shifted = ScoreFunctionKind::sin2_shifted();
  const auto plain = ScoreFunctionKind::of(ScoreTag::Sin2Max);
  CounterRng rng(6);
  for (int t = 0; t < draws; ++t) {
    auto x = normal_vec(rng, d);
    const auto a = scores(shifted, x).scores;
    for (auto& v : x) v += shifted.phase;
    const auto b = scores(plain, x).scores;
    for (std::size_t j = 0; j < d; ++j) phase_err = std::max(phase_err, std::abs(a[j] - b[j]));
  }
  const bool ok = sum_err <= 1e-12 && col_err <= 1e-9 && period_err <= 1e-12 && phase_err <= 1e-12;
  return {ok, fmt("sum %.2e (%s), column %.2e (%s), period %.2e (%s), phase %.2e; %ld skipped",
                  sum_err, sum_at.c_str(), col_err, col_at.c_str(), period_err, period_at.c_str(),
                  phase_err, skipped)};
}

Outcome saturation_contrast() {
  auto frac = [](ScoreTag t) {
    return saturation_fraction(ScoreFunctionKind::of(t), 64, 1000, 8.0, 1e-4, 7).fraction_saturated;
  };
  const double sm = frac(ScoreTag::Softmax);
  const double ss = frac(ScoreTag::SinSoftmax);
  const double s2 = frac(ScoreTag::Sin2MaxShifted);
  return {sm >= 5.0 * ss && sm >= 5.0 * s2,
          fmt("softmax %.6f, sin-softmax %.6f (x%.1f), sin2-max-shifted %.6f (x%.1f)", sm, ss,
              sm / ss, s2, sm / s2)};
}

Outcome information_submersion_check() {
  const std::vector<int> dims{4, 16, 64, 256};
  const auto v = information_submersion(ScoreFunctionKind::of(ScoreTag::SinMaxConstant), dims, 1000, 7);
  bool ok = true;
  for (std::size_t i = 1; i < v.size(); ++i) ok = ok && v[i] < v[i - 1];
  return {ok, fmt("d=4 %.5f, d=16 %.5f, d=64 %.5f, d=256 %.5f", v[0], v[1], v[2], v[3])};
}

Outcome end_to_end_autodiff() {
  struct Case {
    ScoreTag tag;
    bool prenorm;
  };
  bool ok = true;
  std::string detail;
  for (const auto& cs : {Case{ScoreTag::Softmax, false}, Case{ScoreTag::SinSoftmax, false},
                         Case{ScoreTag::Sin2MaxShifted, false}, Case{ScoreTag::SirenMax, true}}) {
    DemoConfig c = DemoConfig::synthetic_default(3);
    c.depth = 1;
    c.attention.embed_dim = 16;
    c.attention.num_heads = 2;
    c.attention.score_kind = ScoreFunctionKind::of(cs.tag);
    c.attention.prenormalize = cs.prenorm;
    auto model = nn::build_demo(c, 11);
    CounterRng rng(12);
    std::vector<std::vector<double>> imgs(2);
    for (auto& img : imgs) img = normal_vec(rng, static_cast<std::size_t>(c.height * c.width * c.channels));
    const std::vector<int> labels{0, 2};
    auto loss_of = [&] {
      nn::Tape tape;
      return model.forward(tape, imgs, &labels).loss->values[0];
    };

    model.zero_grad();
    {
      nn::Tape tape;
      auto r = model.forward(tape, imgs, &labels);
      tape.backward(r.loss);
    }
    const double h = 1e-4;
    double worst = 0.0;
    for (const auto& p : model.parameters()) {
      const auto analytic = p->grad;
      for (std::size_t i = 0; i < p->size(); ++i) {
        const double keep = p->values[i];
        p->values[i] = keep + h;
        const double up = loss_of();
        p->values[i] = keep - h;
        const double down = loss_of();
        p->values[i] = keep;
        worst = std::max(worst, rel_err(analytic[i], (up - down) / (2.0 * h)));
      }
    }
    ok = ok && worst <= 1e-4;
    detail += fmt("%s%s %.2e (%zu params); ", cs.prenorm ? "prenorm " : "",
                  std::string(name_of(cs.tag)).c_str(), worst, model.parameter_count());
  }
  return {ok, detail};
}

Outcome breakdown_reproduction() {
  struct Run {
    ScoreTag tag;
    int depth;
    bool prenorm;
    bool expect_breakdown;
  };
  const std::vector<Run> runs{{ScoreTag::SinMax, 1, false, true},
                              {ScoreTag::CosMax, 4, false, true},
                              {ScoreTag::Softmax, 1, false, false},
                              {ScoreTag::SinSoftmax, 1, false, false},
                              {ScoreTag::Sin2MaxShifted, 1, false, false},
                              {ScoreTag::SirenMax, 1, true, false}};
  bool ok = true;
  std::string detail;
  for (const auto& r : runs) {
    TrainConfig cfg;
    cfg.demo.depth = r.depth;
    cfg.demo.attention.score_kind = ScoreFunctionKind::of(r.tag);
    cfg.demo.attention.prenormalize = r.prenorm;
    cfg.steps = 500;
    cfg.seed = 7;
    const auto log = train(cfg);
    const std::string name = (r.prenorm ? "prenorm " : "") + std::string(name_of(r.tag)) +
                             (r.depth > 1 ? fmt(" d%d", r.depth) : "");
    bool row_ok;
    if (r.expect_breakdown) {
      row_ok = log.breakdown.has_value();
    } else {
      row_ok = !log.breakdown && log.final_eval_accuracy >= 0.9;
    }
    ok = ok && row_ok;
    if (log.breakdown)
      detail += fmt("%s: breakdown@%d %s", name.c_str(), log.breakdown->step,
                    std::string(name_of(log.breakdown->cause)).c_str());
    else
      detail += fmt("%s: acc %.3f", name.c_str(), log.final_eval_accuracy);
    detail += row_ok ? "; " : " (unexpected); ";
  }
  return {ok, detail};
}

Outcome cifar_statement() {
  std::printf(
      "     note: full-scale CIFAR-100 accuracies (e.g. Softmax 81.12 vs Sin-Softmax 85.14 at depth 8)\n"
      "     are not reproducible at desk scale. Criterion 9 records synthetic-task results instead;\n"
      "     the CIFAR-100 loader is checked below with a bit-exact fixture round trip.\n");
  const auto dir = std::filesystem::temp_directory_path() / "pattn_acceptance_cifar";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  std::vector<CifarRecord> recs(8);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    recs[i].coarse_label = static_cast<std::uint8_t>(i % 20);
    recs[i].fine_label = static_cast<std::uint8_t>((i * 37) % 100);
    recs[i].pixels.resize(3 * kCifarPlane);
    for (std::size_t p = 0; p < recs[i].pixels.size(); ++p)
      recs[i].pixels[p] = static_cast<std::uint8_t>((p * 31 + i * 7) % 256);
  }
  const auto bytes = encode_cifar100(recs);
  {
    std::ofstream out(dir / "train.bin", std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  const auto ds = load_cifar100(dir / "train.bin", recs.size());
  bool exact = ds.size() == recs.size();
  for (std::size_t i = 0; exact && i < recs.size(); ++i) {
    exact = ds.labels[i] == recs[i].fine_label;
    for (std::size_t p = 0; exact && p < kCifarPlane; ++p)
      for (std::size_t c = 0; exact && c < 3; ++c)
        exact = static_cast<std::uint8_t>(std::lround(ds.images[i][p * 3 + c] * 255.0)) ==
                recs[i].pixels[c * kCifarPlane + p];
  }
  std::filesystem::remove_all(dir);
  return {exact, fmt("%zu-record fixture round trip %s", recs.size(), exact ? "bit exact" : "MISMATCH")};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "gradient oracle suite", 30, gradient_oracle_suite},
      {2, "softmax extremum", 5, softmax_extremum},
      {3, "cos-max interval", 10, cosmax_interval},
      {4, "sin-softmax bound", 5, sin_softmax_bound},
      {5, "normalization invariants", 10, normalization_invariants},
      {6, "saturation contrast", 10, saturation_contrast},
      {7, "information submersion", 10, information_submersion_check},
      {8, "end-to-end autodiff", 60, end_to_end_autodiff},
      {9, "breakdown reproduction", 600, breakdown_reproduction},
      {10, "CIFAR-100 non-reproducibility and loader", 1, cifar_statement},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.body();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs < c.budget_s;
    const bool pass = o.ok && in_time;
    failures += pass ? 0 : 1;
    std::printf("%s %2d %-42s %8.2fs / %gs%s\n     %s\n", pass ? "PASS" : "FAIL", c.id,
                c.title.c_str(), secs, c.budget_s, in_time ? "" : " (over budget)", o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failures,
              criteria.size());
  return failures == 0 ? 0 : 1;
}
