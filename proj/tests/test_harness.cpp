#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <vector>

#include "pattn/analysis.hpp"
#include "pattn/datasets.hpp"
#include "pattn/training.hpp"

using namespace pattn;
using Catch::Approx;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("pattn_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

CifarRecord make_record(std::uint8_t coarse, std::uint8_t fine, std::uint32_t salt) {
  CifarRecord r;
  r.coarse_label = coarse;
  r.fine_label = fine;
  r.pixels.resize(3072);
  for (std::size_t i = 0; i < r.pixels.size(); ++i)
    r.pixels[i] = static_cast<std::uint8_t>((i * 31 + salt * 17) % 256);
  return r;
}

TrainConfig short_config(ScoreTag tag, int steps) {
  TrainConfig cfg;
  cfg.demo.attention.score_kind = ScoreFunctionKind::of(tag);
  cfg.dataset = SyntheticSpec{4, 20, 0.3};
  cfg.demo.num_classes = 4;
  cfg.steps = steps;
  cfg.batch_size = 8;
  return cfg;
}

}  // namespace

TEST_CASE("synthetic dataset bookkeeping") {
  const auto ds = make_synthetic(10, 100, 0.1, 7);
  CHECK(ds.size() == 1000);
  CHECK(ds.train_indices.size() == 800);
  CHECK(ds.eval_indices.size() == 200);
  CHECK(ds.height == 8);
  CHECK(ds.width == 8);
  CHECK(ds.channels == 1);
  for (const auto& img : ds.images) CHECK(img.size() == 64);
  std::vector<int> per_class(10, 0);
  for (auto i : ds.eval_indices) ++per_class[ds.labels[i]];
  for (int n : per_class) CHECK(n == 20);

  const auto again = make_synthetic(10, 100, 0.1, 7);
  CHECK(again.images == ds.images);
  CHECK(again.labels == ds.labels);
  CHECK(again.eval_indices == ds.eval_indices);
  CHECK(make_synthetic(10, 100, 0.1, 8).images != ds.images);
  CHECK_THROWS_AS(make_synthetic(1, 10, 0.1, 7), std::invalid_argument);
}

TEST_CASE("noiseless synthetic data is separable by nearest template") {
  const auto ds = make_synthetic(10, 20, 0.0, 3);
  std::vector<std::vector<double>> centroid(10, std::vector<double>(64, 0.0));
  std::vector<int> count(10, 0);
  for (auto i : ds.train_indices) {
    for (std::size_t p = 0; p < 64; ++p) centroid[ds.labels[i]][p] += ds.images[i][p];
    ++count[ds.labels[i]];
  }
  for (int c = 0; c < 10; ++c)
    for (auto& v : centroid[c]) v /= count[c];
  int hits = 0;
  for (auto i : ds.eval_indices) {
    int best = 0;
    double best_d = INFINITY;
    for (int c = 0; c < 10; ++c) {
      double d = 0.0;
      for (std::size_t p = 0; p < 64; ++p) d += std::pow(ds.images[i][p] - centroid[c][p], 2);
      if (d < best_d) best_d = d, best = c;
    }
    hits += best == ds.labels[i];
  }
  CHECK(hits == static_cast<int>(ds.eval_indices.size()));
}

TEST_CASE("CIFAR-100 fixture round trip is bit exact") {
  const auto dir = scratch_dir("cifar");
  std::vector<CifarRecord> recs;
  for (std::uint32_t i = 0; i < 7; ++i)
    recs.push_back(make_record(static_cast<std::uint8_t>(i % 20), static_cast<std::uint8_t>(i * 13 % 100), i));
  const auto bytes = encode_cifar100(recs);
  REQUIRE(bytes.size() == 7 * kCifarRecordBytes);
  write_bytes(dir / "train.bin", bytes);

  const auto decoded = decode_cifar100(bytes);
  REQUIRE(decoded.size() == 7);
  for (std::size_t i = 0; i < 7; ++i) {
    CHECK(decoded[i].pixels == recs[i].pixels);
    CHECK(decoded[i].fine_label == recs[i].fine_label);
    CHECK(decoded[i].coarse_label == recs[i].coarse_label);
  }

  const auto ds = load_cifar100(dir, 5);
  REQUIRE(ds.size() == 5);
  CHECK(ds.height == 32);
  CHECK(ds.channels == 3);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(ds.labels[i] == recs[i].fine_label);
    for (std::size_t p = 0; p < 1024; ++p)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = ds.images[i][p * 3 + c];
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        CHECK(static_cast<std::uint8_t>(std::lround(v * 255.0)) == recs[i].pixels[c * 1024 + p]);
      }
  }
  CHECK(ds.eval_indices == std::vector<std::size_t>{4});
  std::filesystem::remove_all(dir);
}

TEST_CASE("CIFAR-100 single crafted record") {
  const auto dir = scratch_dir("cifar_one");
  std::vector<std::uint8_t> bytes(kCifarRecordBytes, 0);
  bytes[0] = 2;
  bytes[1] = 5;
  bytes[2] = 255;              // R at (0, 0)
  bytes[2 + 1024 + 33] = 128;  // G at (1, 1)
  write_bytes(dir / "one.bin", bytes);
  const auto ds = load_cifar100(dir / "one.bin", 512);
  REQUIRE(ds.size() == 1);
  CHECK(ds.labels[0] == 5);
  CHECK(ds.images[0][0] == 1.0);
  CHECK(ds.images[0][(1 * 32 + 1) * 3 + 1] == Approx(128.0 / 255.0).margin(1e-15));
  std::filesystem::remove_all(dir);
}

TEST_CASE("CIFAR-100 format errors") {
  std::vector<std::uint8_t> short_file(kCifarRecordBytes + 10, 0);
  CHECK_THROWS_AS(decode_cifar100(short_file), FormatError);
  std::vector<std::uint8_t> bad_label(kCifarRecordBytes, 0);
  bad_label[1] = 100;
  CHECK_THROWS_AS(decode_cifar100(bad_label), FormatError);
  CHECK_THROWS_AS(load_cifar100("/nonexistent/cifar", 10), std::runtime_error);
}

TEST_CASE("training configuration validation") {
  auto cfg = short_config(ScoreTag::Softmax, 0);
  CHECK_THROWS_AS(train(cfg), nn::ConfigError);
  cfg.steps = 5;
  cfg.batch_size = 1;
  CHECK_THROWS_AS(train(cfg), nn::ConfigError);
  cfg.batch_size = 4;
  cfg.demo.depth = 0;
  CHECK_THROWS_AS(train(cfg), nn::ConfigError);
}

TEST_CASE("training is deterministic and logs every step") {
  const auto cfg = short_config(ScoreTag::SinSoftmax, 15);
  const auto a = train(cfg);
  const auto b = train(cfg);
  REQUIRE(a.records.size() == 15);
  REQUIRE(b.records.size() == 15);
  for (std::size_t i = 0; i < 15; ++i) {
    CHECK(a.records[i].step == static_cast<long>(i + 1));
    CHECK(a.records[i].loss == b.records[i].loss);
    CHECK(a.records[i].grad_norm == b.records[i].grad_norm);
    CHECK(a.records[i].train_accuracy == b.records[i].train_accuracy);
  }
  CHECK_FALSE(a.breakdown.has_value());
  CHECK(a.final_eval_accuracy == b.final_eval_accuracy);
  CHECK(a.final_eval_accuracy >= 0.0);
  CHECK(a.final_eval_accuracy <= 1.0);
  for (const auto& r : a.records) {
    CHECK(std::isfinite(r.loss));
    CHECK(std::isfinite(r.grad_norm));
  }
}

TEST_CASE("SGD and Adam both reduce the loss on the synthetic task") {
  for (bool sgd : {false, true}) {
    auto cfg = short_config(ScoreTag::Softmax, 60);
    if (sgd) cfg.optimizer = SgdSpec{0.05, 0.9};
    const auto log = train(cfg);
    REQUIRE(log.records.size() == 60);
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 10; ++i) {
      head += log.records[i].loss;
      tail += log.records[50 + i].loss;
    }
    INFO((sgd ? "sgd" : "adam"));
    CHECK(tail < head);
  }
}

TEST_CASE("score errors end training with a ScoreError breakdown") {
  // Pre-normalized Siren-max rows reach sin z = 1 within the pole guard.
  auto cfg = short_config(ScoreTag::SirenMax, 20);
  cfg.demo.attention.prenormalize = true;
  cfg.batch_size = 32;
  const auto log = train(cfg);
  REQUIRE(log.breakdown.has_value());
  CHECK(log.breakdown->cause == BreakdownCause::ScoreError);
  CHECK(log.records.size() == static_cast<std::size_t>(log.breakdown->step - 1));
  CHECK(std::isnan(log.final_eval_accuracy));
}

TEST_CASE("gradient norm runaway ends training") {
  TrainConfig cfg;
  cfg.demo.depth = 4;
  cfg.demo.attention.score_kind = ScoreFunctionKind::of(ScoreTag::CosMax);
  cfg.steps = 200;
  const auto log = train(cfg);
  REQUIRE(log.breakdown.has_value());
  CHECK(log.breakdown->cause == BreakdownCause::GradNormRunaway);
  REQUIRE(log.records.size() >= 9);
  // The nine logged steps before the breakdown step are all above threshold.
  for (std::size_t i = log.records.size() - 9; i < log.records.size(); ++i)
    CHECK(log.records[i].grad_norm > kRunawayNorm);
  for (std::size_t i = 1; i < log.records.size(); ++i)
    CHECK(log.records[i].step == log.records[i - 1].step + 1);
}

TEST_CASE("run log JSON lines round trip") {
  TrainRunLog log;
  log.records = {{1, 2.5, 0.25, 3.0}, {2, 2.25, 0.5, 1e7}};
  log.final_eval_accuracy = 0.8125;
  std::stringstream ss;
  write_run_log(log, ss);
  const std::string text = ss.str();
  CHECK(text.find("{\"step\":1,\"loss\":2.5,\"acc\":0.25,\"grad_norm\":3.0}") != std::string::npos);
  CHECK(text.find("{\"final_eval_accuracy\":0.8125}") != std::string::npos);
  const auto back = read_run_log(ss);
  REQUIRE(back.records.size() == 2);
  CHECK(back.records[1].grad_norm == 1e7);
  CHECK(back.final_eval_accuracy == 0.8125);
  CHECK_FALSE(back.breakdown.has_value());

  TrainRunLog broken;
  broken.records = {{1, 2.0, 0.0, 1.0}};
  broken.breakdown = Breakdown{2, BreakdownCause::ScoreError, "x"};
  std::stringstream bs;
  write_run_log(broken, bs);
  CHECK(bs.str().find("{\"breakdown\":{\"step\":2,\"cause\":\"ScoreError\"}}") != std::string::npos);
  const auto bb = read_run_log(bs);
  REQUIRE(bb.breakdown.has_value());
  CHECK(bb.breakdown->step == 2);
  CHECK(bb.breakdown->cause == BreakdownCause::ScoreError);
}

TEST_CASE("tap records from training and their sidecar round trip") {
  auto cfg = short_config(ScoreTag::Softmax, 6);
  cfg.tap_every = 2;
  cfg.tap_cap = 50;
  cfg.demo.depth = 2;
  const auto log = train(cfg);
  REQUIRE(log.taps.size() == 6);  // steps 1, 3, 5 x 2 layers
  CHECK(log.taps[0].step == 1);
  CHECK(log.taps[0].layer_index == 0);
  CHECK(log.taps[1].layer_index == 1);
  CHECK(log.taps[2].step == 3);
  for (const auto& r : log.taps) CHECK(r.samples.size() == 50);

  std::stringstream ss;
  write_taps(log.taps, ss);
  const auto back = read_taps(ss);
  REQUIRE(back.size() == log.taps.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].step == log.taps[i].step);
    CHECK(back[i].sample_cap == 50);
    for (std::size_t j = 0; j < back[i].samples.size(); ++j) {
      CHECK(back[i].samples[j].x == log.taps[i].samples[j].x);
      CHECK(back[i].samples[j].grad == log.taps[i].samples[j].grad);
      CHECK(back[i].samples[j].index == log.taps[i].samples[j].index);
    }
  }
  CHECK(taps_path_for("runs/a.jsonl") == std::filesystem::path("runs/a.jsonl.taps.jsonl"));

  const auto untapped = train(short_config(ScoreTag::Softmax, 3));
  CHECK(untapped.taps.empty());
}

TEST_CASE("tap aggregation basics") {
  CHECK(aggregate_taps({}, 4, -1.0, 1.0).empty());
  CHECK_THROWS_AS(aggregate_taps({}, 1, -1.0, 1.0), std::invalid_argument);

  nn::GradientTapRecord rec;
  rec.step = 3;
  rec.layer_index = 1;
  for (std::size_t i = 0; i < 10; ++i) rec.samples.push_back({0.0, -0.5, i});
  const std::vector<nn::GradientTapRecord> one{rec};
  const auto h = aggregate_taps(one, 5, -1.0, 1.0);
  REQUIRE(h.size() == 1);
  CHECK(h[0].step == 3);
  CHECK(h[0].layer_index == 1);
  REQUIRE(h[0].bins.size() == 5);
  for (std::size_t b = 0; b < 5; ++b) {
    CHECK(h[0].bins[b].count == (b == 2 ? 10u : 0u));
    if (b != 2) CHECK(std::isnan(h[0].bins[b].mean_abs_grad));
  }
  CHECK(h[0].bins[2].x_center == Approx(0.0).margin(1e-15));
  CHECK(h[0].bins[2].mean_abs_grad == 0.5);

  nn::GradientTapRecord wide;
  wide.samples = {{-50.0, 1.0, 0}, {50.0, 3.0, 1}, {0.99, 2.0, 2}};
  const std::vector<nn::GradientTapRecord> w{wide};
  const auto hw = aggregate_taps(w, 4, -1.0, 1.0);
  CHECK(hw[0].bins[0].count == 1);
  CHECK(hw[0].bins[3].count == 2);
  CHECK(hw[0].bins[3].mean_abs_grad == 2.5);

  std::stringstream csv;
  write_histograms_csv(hw, csv);
  std::string header;
  std::getline(csv, header);
  CHECK(header == "step,layer,x_center,mean_abs_grad,count");
  std::string first;
  std::getline(csv, first);
  CHECK(first == "0,0,-0.75,1,1");
}

TEST_CASE("histograms conserve tapped sample counts") {
  auto cfg = short_config(ScoreTag::SinSoftmax, 4);
  cfg.tap_every = 1;
  cfg.tap_cap = 64;
  const auto log = train(cfg);
  const auto hists = aggregate_taps(log.taps, 7, -0.5, 0.5);
  REQUIRE(hists.size() == log.taps.size());
  for (std::size_t i = 0; i < hists.size(); ++i) {
    std::size_t total = 0;
    for (const auto& b : hists[i].bins) total += b.count;
    CHECK(total == log.taps[i].samples.size());
  }
}

TEST_CASE("histogram saturation structure agrees with the saturation measurement") {
  // Tap records built from the same draws saturation_fraction uses: scale-8
  // normal rows of width 64, seed 7, with the diagonal Jacobian as gradient.
  const int dim = 64, trials = 1000;
  for (auto tag : {ScoreTag::Softmax, ScoreTag::SinSoftmax}) {
    const auto kind = ScoreFunctionKind::of(tag);
    CounterRng rng(7);
    nn::GradientTapRecord rec;
    rec.sample_cap = static_cast<std::size_t>(dim * trials);
    std::vector<double> x(dim);
    for (int t = 0; t < trials; ++t) {
      for (auto& v : x) v = rng.normal(0.0, 8.0);
      const auto j = jacobian(kind, x);
      for (int i = 0; i < dim; ++i)
        rec.samples.push_back({x[i], j(i, i), static_cast<std::size_t>(t * dim + i)});
    }
    std::size_t small = 0;
    for (const auto& s : rec.samples) small += std::abs(s.grad) < 1e-4;
    const auto rep = saturation_fraction(kind, dim, trials, 8.0, 1e-4, 7);
    CHECK(static_cast<double>(small) / rec.samples.size() == rep.fraction_saturated);

    const std::vector<nn::GradientTapRecord> recs{rec};
    const auto h = aggregate_taps(recs, 12, -24.0, 24.0);
    std::size_t total = 0, saturated_bins = 0;
    for (const auto& b : h[0].bins) {
      total += b.count;
      if (b.count > 0 && b.mean_abs_grad < 1e-4) ++saturated_bins;
    }
    CHECK(total == rec.samples.size());
    INFO(name_of(tag));
    if (tag == ScoreTag::Softmax) {
      CHECK(h[0].bins.front().mean_abs_grad < 1e-4);
      CHECK(saturated_bins >= 6);
    } else {
      CHECK(saturated_bins == 0);
    }
  }
}
