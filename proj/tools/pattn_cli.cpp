// pattn: gradient curves, Jacobian checks, analysis sweeps, training runs and
// tap histograms for periodic score functions.
//
// Exit codes: 0 success (a training breakdown counts as success), 1 invalid
// flags or arguments, 2 runtime failure.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pattn/analysis.hpp"
#include "pattn/curve_io.hpp"
#include "pattn/training.hpp"

namespace fs = std::filesystem;
using namespace pattn;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class RunFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string kind_list() {
  std::string s;
  for (const auto& e : kScoreNames) {
    if (!s.empty()) s += ", ";
    s += e.name;
  }
  return s;
}

ScoreFunctionKind parse_kind(const std::string& name) {
  const auto tag = parse_score_tag(name);
  if (!tag) throw UsageError("unknown score function '" + name + "' (known: " + kind_list() + ")");
  return ScoreFunctionKind::of(*tag);
}

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw RunFailure("cannot open " + p.string() + " for writing");
  return out;
}

// ---------------------------------------------------------------------------
// curves

struct CurvesArgs {
  std::string fn;
  double m = 1.0;
  double x_min = -10.0;
  double x_max = 10.0;
  int steps = 1001;
  bool prenorm = false;
  int dim = 8;
  std::string out;
};

int run_curves(const CurvesArgs& a) {
  const auto kind = parse_kind(a.fn);
  if (!(a.x_min < a.x_max)) throw UsageError("--x-min must be below --x-max");
  if (a.steps < 2) throw UsageError("--steps must be >= 2");
  if (a.prenorm && a.dim < 2) throw UsageError("--dim must be >= 2");
  const auto curve = a.prenorm ? prenormed_gradient_curve(kind, a.dim, a.x_min, a.x_max, a.steps)
                               : gradient_curve(kind, a.m, a.x_min, a.x_max, a.steps);
  const auto nan_count = static_cast<std::size_t>(curve.params.at("nan_count"));
  write_curve_csv(curve, a.out);
  std::cout << "wrote " << curve.x_values.size() << " points to " << a.out << " (" << nan_count
            << " guard points)\n";
  if (nan_count == curve.x_values.size()) throw RunFailure("every point tripped a guard");
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckArgs {
  std::string fn = "all";
  int dim = 8;
  int trials = 100;
  std::uint64_t seed = 42;
  double tol = 1e-6;
  double h = 1e-5;
};

int run_gradcheck(const GradcheckArgs& a) {
  if (a.dim < 2) throw UsageError("--dim must be >= 2");
  if (a.trials < 1) throw UsageError("--trials must be >= 1");
  if (!(a.tol > 0.0) || !(a.h > 0.0)) throw UsageError("--tol and --fd-step must be positive");
  std::vector<ScoreFunctionKind> kinds;
  if (a.fn == "all") {
    for (auto tag : kAllScoreTags) kinds.push_back(ScoreFunctionKind::of(tag));
  } else {
    kinds.push_back(parse_kind(a.fn));
  }
  bool all_pass = true;
  std::printf("%-18s %14s %8s %8s  %s\n", "kind", "max_rel_err", "checked", "skipped", "result");
  for (const auto& kind : kinds) {
    CounterRng rng(a.seed, static_cast<std::uint64_t>(kind.tag));
    std::vector<double> x(static_cast<std::size_t>(a.dim));
    double worst = 0.0;
    int checked = 0, skipped = 0;
    for (int t = 0; t < a.trials; ++t) {
      for (auto& v : x) v = rng.normal();
      try {
        const auto an = jacobian(kind, x);
        const auto fd = finite_diff_jacobian(kind, x, a.h, FdStencil::Central4);
        for (std::size_t i = 0; i < an.values().size(); ++i) {
          const double u = an.values()[i], w = fd.values()[i];
          worst = std::max(worst, std::abs(u - w) / std::max({1.0, std::abs(u), std::abs(w)}));
        }
        ++checked;
      } catch (const ScoreError&) {
        ++skipped;
      }
    }
    const bool pass = checked > 0 && worst <= a.tol;
    all_pass = all_pass && pass;
    std::printf("%-18s %14.3e %8d %8d  %s\n", std::string(name_of(kind.tag)).c_str(), worst,
                checked, skipped, pass ? "PASS" : "FAIL");
  }
  return all_pass ? 0 : 2;
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeArgs {
  std::string report;
  std::string out;
  std::uint64_t seed = 7;
  double scale = 8.0;
};

void report_saturation(const AnalyzeArgs& a, std::ostream& out) {
  out << "kind,input_scale,epsilon,fraction_saturated,sample_count,skipped_trials\n";
  for (auto tag : kAllScoreTags) {
    const auto r = saturation_fraction(ScoreFunctionKind::of(tag), 64, 1000, a.scale, 1e-4, a.seed);
    out << name_of(tag) << ',' << format_double(r.input_scale) << ',' << format_double(r.epsilon)
        << ',' << format_double(r.fraction_saturated) << ',' << r.sample_count << ','
        << r.skipped_trials << '\n';
  }
}

void report_extremum_vs_m(std::ostream& out) {
  const std::vector<double> ms{0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0};
  std::vector<CurveSeries> cols;
  out << "M";
  for (auto tag : kAllScoreTags) {
    cols.push_back(extremum_vs_m_curve(ScoreFunctionKind::of(tag), ms));
    out << ',' << name_of(tag);
  }
  out << '\n';
  for (std::size_t i = 0; i < ms.size(); ++i) {
    out << format_double(ms[i]);
    for (const auto& c : cols) out << ',' << format_double(c.y_values[i]);
    out << '\n';
  }
}

void report_submersion(const AnalyzeArgs& a, std::ostream& out) {
  const std::vector<int> dims{4, 16, 64, 256};
  const std::vector<ScoreTag> tags{ScoreTag::SinMaxConstant, ScoreTag::Softmax, ScoreTag::SinSoftmax};
  std::vector<std::vector<double>> cols;
  out << "d";
  for (auto tag : tags) {
    cols.push_back(information_submersion(ScoreFunctionKind::of(tag), dims, 1000, a.seed));
    out << ',' << name_of(tag);
  }
  out << '\n';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    out << dims[i];
    for (const auto& c : cols) out << ',' << format_double(c[i]);
    out << '\n';
  }
}

int run_analyze(const AnalyzeArgs& a) {
  if (a.report != "saturation" && a.report != "extremum-vs-m" && a.report != "submersion")
    throw UsageError("unknown report '" + a.report + "' (known: saturation, extremum-vs-m, submersion)");
  auto out = open_out(a.out);
  if (a.report == "saturation") report_saturation(a, out);
  else if (a.report == "extremum-vs-m") report_extremum_vs_m(out);
  else report_submersion(a, out);
  std::cout << "wrote " << a.report << " report to " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string score = "softmax";
  int depth = 1;
  std::string dataset = "synthetic";
  int steps = 500;
  std::uint64_t seed = 7;
  bool prenorm = false;
  std::string scale = "inv_dmodel";
  int tap_every = 0;
  int tap_cap = 256;
  int batch_size = 32;
  std::string optimizer = "adam";
  double lr = std::numeric_limits<double>::quiet_NaN();
  std::string out;
};

int run_train(const TrainArgs& a) {
  TrainConfig cfg;
  const auto kind = parse_kind(a.score);
  if (a.dataset == "synthetic") {
    cfg.dataset = SyntheticSpec{};
    cfg.demo = nn::DemoConfig::synthetic_default(SyntheticSpec{}.num_classes);
  } else if (a.dataset.rfind("cifar100:", 0) == 0) {
    const std::string rest = a.dataset.substr(9);
    const auto colon = rest.rfind(':');
    if (colon == std::string::npos || colon == 0)
      throw UsageError("--dataset cifar100 expects cifar100:<path>:<subset>");
    std::size_t subset = 0;
    try {
      subset = std::stoul(rest.substr(colon + 1));
    } catch (const std::exception&) {
      throw UsageError("cifar100 subset size must be a positive integer");
    }
    if (subset == 0) throw UsageError("cifar100 subset size must be a positive integer");
    cfg.dataset = CifarSpec{rest.substr(0, colon), subset};
    cfg.demo = nn::DemoConfig{};
  } else {
    throw UsageError("--dataset must be 'synthetic' or 'cifar100:<path>:<subset>'");
  }
  cfg.demo.depth = a.depth;
  cfg.demo.attention.score_kind = kind;
  cfg.demo.attention.prenormalize = a.prenorm;
  if (a.scale == "inv_dmodel") cfg.demo.attention.score_scale = nn::ScoreScale::InvDModel;
  else if (a.scale == "inv_sqrt_dmodel") cfg.demo.attention.score_scale = nn::ScoreScale::InvSqrtDModel;
  else throw UsageError("--scale must be inv_dmodel or inv_sqrt_dmodel");
  if (a.optimizer == "adam") {
    AdamSpec s;
    if (!std::isnan(a.lr)) s.lr = a.lr;
    cfg.optimizer = s;
  } else if (a.optimizer == "sgd") {
    SgdSpec s;
    if (!std::isnan(a.lr)) s.lr = a.lr;
    cfg.optimizer = s;
  } else {
    throw UsageError("--optimizer must be adam or sgd");
  }
  cfg.steps = a.steps;
  cfg.batch_size = a.batch_size;
  cfg.seed = a.seed;
  cfg.tap_every = a.tap_every;
  cfg.tap_cap = static_cast<std::size_t>(std::max(0, a.tap_cap));
  if (a.tap_cap < 1) throw UsageError("--tap-cap must be >= 1");
  try {
    validate(cfg);
  } catch (const nn::ConfigError& e) {
    throw UsageError(e.what());
  }

  Dataset ds;
  try {
    ds = load_dataset(cfg);
  } catch (const std::exception& e) {
    throw RunFailure(std::string("cannot load dataset: ") + e.what());
  }
  const auto log = train(cfg, ds);

  const fs::path out_path = a.out;
  {
    auto out = open_out(out_path);
    write_run_log(log, out);
  }
  if (cfg.tap_every > 0) {
    auto tout = open_out(taps_path_for(out_path));
    write_taps(log.taps, tout);
  }
  std::cout << "steps logged: " << log.records.size() << '\n';
  if (log.breakdown)
    std::cout << "breakdown at step " << log.breakdown->step << ": "
              << name_of(log.breakdown->cause) << " (" << log.breakdown->detail << ")\n";
  else
    std::cout << "final_eval_accuracy: " << log.final_eval_accuracy << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// taps

struct TapsArgs {
  std::string run;
  int bins = 20;
  double x_min = std::numeric_limits<double>::quiet_NaN();
  double x_max = std::numeric_limits<double>::quiet_NaN();
  std::string out;
};

int run_taps(const TapsArgs& a) {
  if (a.bins < 2) throw UsageError("--bins must be >= 2");
  fs::path taps_file = a.run;
  if (!(taps_file.string().size() > 11 &&
        taps_file.string().ends_with(".taps.jsonl")))
    taps_file = taps_path_for(a.run);
  if (!fs::exists(taps_file)) throw UsageError("run has no taps (missing " + taps_file.string() + ")");
  std::ifstream in(taps_file);
  const auto taps = read_taps(in);
  std::size_t total = 0;
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& r : taps)
    for (const auto& s : r.samples) {
      ++total;
      lo = std::min(lo, s.x);
      hi = std::max(hi, s.x);
    }
  if (total == 0) throw UsageError("run has no tap samples");
  if (!std::isnan(a.x_min)) lo = a.x_min;
  if (!std::isnan(a.x_max)) hi = a.x_max;
  if (!(lo < hi)) throw UsageError("x range must be increasing");
  const auto hists = aggregate_taps(taps, a.bins, lo, hi);
  auto out = open_out(a.out);
  write_histograms_csv(hists, out);
  std::cout << "wrote " << hists.size() << " histograms over [" << lo << ", " << hi << "] to "
            << a.out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient analysis and training experiments for periodic attention score functions"};
  app.require_subcommand(1);
  const std::string kinds_help = "score function: " + kind_list();

  CurvesArgs ca;
  auto* curves = app.add_subcommand("curves", "Write the diagonal gradient curve of one score function");
  curves->add_option("--fn", ca.fn, kinds_help)->required();
  curves->add_option("--m", ca.m, "off-sum M held fixed")->capture_default_str();
  curves->add_option("--x-min", ca.x_min, "sweep start")->capture_default_str();
  curves->add_option("--x-max", ca.x_max, "sweep end")->capture_default_str();
  curves->add_option("--steps", ca.steps, "number of points")->capture_default_str();
  curves->add_flag("--prenorm", ca.prenorm, "sweep one element of a row-normalized context instead");
  curves->add_option("--dim", ca.dim, "row width for --prenorm")->capture_default_str();
  curves->add_option("--out", ca.out, "output CSV (a .meta.json is written beside it)")->required();

  GradcheckArgs ga;
  auto* gradcheck = app.add_subcommand("gradcheck", "Compare analytic Jacobians with finite differences");
  gradcheck->add_option("--fn", ga.fn, kinds_help + ", or all")->capture_default_str();
  gradcheck->add_option("--dim", ga.dim, "input dimension")->capture_default_str();
  gradcheck->add_option("--trials", ga.trials, "random inputs per kind")->capture_default_str();
  gradcheck->add_option("--seed", ga.seed, "RNG seed")->capture_default_str();
  gradcheck->add_option("--tol", ga.tol, "max relative error")->capture_default_str();
  gradcheck->add_option("--fd-step", ga.h, "finite-difference step")->capture_default_str();

  AnalyzeArgs aa;
  auto* analyze = app.add_subcommand("analyze", "Run an analysis sweep and write CSV");
  analyze->add_option("--report", aa.report, "saturation, extremum-vs-m or submersion")->required();
  analyze->add_option("--out", aa.out, "output CSV")->required();
  analyze->add_option("--seed", aa.seed, "RNG seed")->capture_default_str();
  analyze->add_option("--scale", aa.scale, "input scale for the saturation report")->capture_default_str();

  TrainArgs ta;
  auto* trainc = app.add_subcommand("train", "Train the demo model and write a JSON Lines run log");
  trainc->add_option("--score", ta.score, kinds_help)->capture_default_str();
  trainc->add_option("--depth", ta.depth, "attention blocks")->capture_default_str();
  trainc->add_option("--dataset", ta.dataset, "synthetic or cifar100:<path>:<subset>")->capture_default_str();
  trainc->add_option("--steps", ta.steps, "training steps")->capture_default_str();
  trainc->add_option("--seed", ta.seed, "RNG seed")->capture_default_str();
  trainc->add_flag("--prenorm", ta.prenorm, "row-normalize raw scores before the score function");
  trainc->add_option("--scale", ta.scale, "inv_dmodel or inv_sqrt_dmodel")->capture_default_str();
  trainc->add_option("--tap-every", ta.tap_every, "record gradient taps every k steps (0 = off)")->capture_default_str();
  trainc->add_option("--tap-cap", ta.tap_cap, "samples kept per layer per tapped step")->capture_default_str();
  trainc->add_option("--batch-size", ta.batch_size, "minibatch size")->capture_default_str();
  trainc->add_option("--optimizer", ta.optimizer, "adam or sgd")->capture_default_str();
  trainc->add_option("--lr", ta.lr, "learning rate (default 1e-3 for adam, 1e-2 for sgd)");
  trainc->add_option("--out", ta.out, "run log path; taps go to <out>.taps.jsonl")->required();

  TapsArgs pa;
  auto* taps = app.add_subcommand("taps", "Aggregate a run's gradient taps into histograms");
  taps->add_option("--run", pa.run, "run log written by train --tap-every")->required();
  taps->add_option("--bins", pa.bins, "number of bins")->capture_default_str();
  taps->add_option("--x-min", pa.x_min, "histogram range start (default: data minimum)");
  taps->add_option("--x-max", pa.x_max, "histogram range end (default: data maximum)");
  taps->add_option("--out", pa.out, "output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*curves) return run_curves(ca);
    if (*gradcheck) return run_gradcheck(ga);
    if (*analyze) return run_analyze(aa);
    if (*trainc) return run_train(ta);
    if (*taps) return run_taps(pa);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
