#pragma once

// Image datasets stored as HWC doubles: a seeded synthetic template task and
// a CIFAR-100 binary reader.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pattn/random.hpp"

namespace pattn {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  int height = 0;
  int width = 0;
  int channels = 0;
  int num_classes = 0;
  std::vector<std::vector<double>> images;  // HWC, row-major
  std::vector<int> labels;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> eval_indices;

  std::size_t size() const noexcept { return images.size(); }
};

namespace detail {

// Every fifth item goes to the eval split, the rest to train.
inline void split_by_index(Dataset& ds, const std::vector<std::size_t>& split_keys) {
  for (std::size_t i = 0; i < ds.size(); ++i)
    (split_keys[i] % 5 == 4 ? ds.eval_indices : ds.train_indices).push_back(i);
}

}  // namespace detail

/// 8x8x1 images: each class is a fixed N(0, 1) template plus N(0, noise_sd^2)
/// pixel noise. Items are laid out sample-major (all classes for sample 0,
/// then sample 1, ...); within-class sample index s goes to eval when
/// s % 5 == 4, giving an exact 80/20 split per class.
inline Dataset make_synthetic(int num_classes, int samples_per_class, double noise_sd,
                              std::uint64_t seed) {
  if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
  if (samples_per_class < 1) throw std::invalid_argument("samples_per_class must be >= 1");
  if (!(noise_sd >= 0.0)) throw std::invalid_argument("noise_sd must be >= 0");
  Dataset ds;
  ds.height = ds.width = 8;
  ds.channels = 1;
  ds.num_classes = num_classes;
  constexpr std::size_t pixels = 64;

  CounterRng template_rng(seed, 1);
  std::vector<std::vector<double>> templates(static_cast<std::size_t>(num_classes),
                                             std::vector<double>(pixels));
  for (auto& t : templates)
    for (auto& p : t) p = template_rng.normal();

  CounterRng noise_rng(seed, 2);
  std::vector<std::size_t> keys;
  for (int s = 0; s < samples_per_class; ++s)
    for (int c = 0; c < num_classes; ++c) {
      auto img = templates[static_cast<std::size_t>(c)];
      for (auto& p : img) p += noise_rng.normal(0.0, noise_sd);
      ds.images.push_back(std::move(img));
      ds.labels.push_back(c);
      keys.push_back(static_cast<std::size_t>(s));
    }
  detail::split_by_index(ds, keys);
  return ds;
}

// ---------------------------------------------------------------------------
// CIFAR-100 binary format: 3074-byte records of
//   [coarse label][fine label][1024 R][1024 G][1024 B], planes row-major 32x32.

inline constexpr std::size_t kCifarRecordBytes = 3074;
inline constexpr std::size_t kCifarPlane = 32 * 32;

struct CifarRecord {
  std::uint8_t coarse_label = 0;
  std::uint8_t fine_label = 0;
  std::vector<std::uint8_t> pixels;  // CHW, 3072 bytes
};

inline std::vector<std::uint8_t> encode_cifar100(std::span<const CifarRecord> records) {
  std::vector<std::uint8_t> out;
  out.reserve(records.size() * kCifarRecordBytes);
  for (const auto& r : records) {
    if (r.pixels.size() != 3 * kCifarPlane) throw FormatError("CIFAR record needs 3072 pixel bytes");
    out.push_back(r.coarse_label);
    out.push_back(r.fine_label);
    out.insert(out.end(), r.pixels.begin(), r.pixels.end());
  }
  return out;
}

inline std::vector<CifarRecord> decode_cifar100(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % kCifarRecordBytes != 0)
    throw FormatError("CIFAR-100 file length " + std::to_string(bytes.size()) +
                      " is not a multiple of 3074");
  std::vector<CifarRecord> out(bytes.size() / kCifarRecordBytes);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto* rec = bytes.data() + i * kCifarRecordBytes;
    if (rec[1] >= 100)
      throw FormatError("record " + std::to_string(i) + " has fine label " +
                        std::to_string(rec[1]) + " >= 100");
    out[i].coarse_label = rec[0];
    out[i].fine_label = rec[1];
    out[i].pixels.assign(rec + 2, rec + kCifarRecordBytes);
  }
  return out;
}

/// Reads the binary file at `path` (or `path/train.bin` for a directory),
/// keeping the first `subset_size` records. Pixels are scaled to [0, 1] and
/// transposed to HWC; fine labels are used.
inline Dataset load_cifar100(const std::filesystem::path& path, std::size_t subset_size) {
  auto file = path;
  if (std::filesystem::is_directory(file)) file /= "train.bin";
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open CIFAR-100 file " + file.string());
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in),
                                        std::istreambuf_iterator<char>()};
  const auto records = decode_cifar100(bytes);

  Dataset ds;
  ds.height = ds.width = 32;
  ds.channels = 3;
  ds.num_classes = 100;
  const std::size_t n = std::min(subset_size, records.size());
  std::vector<std::size_t> keys;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> img(3 * kCifarPlane);
    for (std::size_t p = 0; p < kCifarPlane; ++p)
      for (std::size_t c = 0; c < 3; ++c)
        img[p * 3 + c] = records[i].pixels[c * kCifarPlane + p] / 255.0;
    ds.images.push_back(std::move(img));
    ds.labels.push_back(records[i].fine_label);
    keys.push_back(i);
  }
  detail::split_by_index(ds, keys);
  return ds;
}

}  // namespace pattn
