#pragma once

// Shared fixtures and independent oracles for the test suites.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "vitforge/image_io.hpp"
#include "vitforge/preprocess.hpp"
#include "vitforge/train.hpp"
#include "vitforge/vit.hpp"

namespace vitforge::testing {

namespace fs = std::filesystem;

// Removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("vitforge-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const fs::path& p, const std::string& data) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << data;
}

template <typename T>
Tensor<T> random_tensor(const Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Tensor<T> t(shape);
  for (T& v : t.data()) v = static_cast<T>(d(rng));
  return t;
}

// Adds normal(0, scale) noise to every parameter so no component sits at a
// special value.
template <typename T>
void jitter(ViTParams<T>& p, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, scale);
  for_each_param(
      [&](const std::string&, Tensor<T>& t) {
        for (T& v : t.data()) v = static_cast<T>(v + d(rng));
      },
      p);
}

// Two-class images: class 0 brightens the left half, class 1 the top half,
// plus seeded gaussian noise.
inline RgbImage pattern_image(std::size_t side, int label, std::mt19937_64& rng,
                              double noise = 0.08) {
  std::normal_distribution<double> d(0.0, noise);
  RgbImage img(side, side);
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const bool lit = label == 0 ? x < side / 2 : y < side / 2;
        double v = (lit ? 0.75 : 0.25) + d(rng);
        v = std::clamp(v, 0.0, 1.0);
        img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  return img;
}

// Uniform brightness per class (0.3 vs 0.7) with noise: linearly separable.
inline RgbImage brightness_image(std::size_t side, int label, std::mt19937_64& rng,
                                 double noise = 0.1) {
  std::normal_distribution<double> d(0.0, noise);
  RgbImage img(side, side);
  for (auto& px : img.pixels) {
    const double v = std::clamp((label ? 0.7 : 0.3) + d(rng), 0.0, 1.0);
    px = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return img;
}

inline LabeledDataset pattern_dataset(std::size_t n, std::size_t side, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  LabeledDataset ds;
  ds.num_classes = 2;
  ds.class_names = {"a", "b"};
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    ds.samples.push_back({pattern_image(side, label, rng), label, "s" + std::to_string(i)});
  }
  return ds;
}

// Writes `per_class` PNGs per class plus labels.csv under root.
inline void write_png_dataset(const fs::path& root, std::size_t per_class,
                              std::vector<std::string> names, std::size_t side,
                              std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  fs::create_directories(root / "images");
  std::vector<io::ManifestRow> rows;
  for (std::size_t i = 0; i < per_class * names.size(); ++i) {
    const int label = static_cast<int>(i % names.size());
    const std::string rel = "images/img" + std::to_string(i) + ".png";
    RgbImage img = names.size() == 2 ? brightness_image(side, label, rng)
                                     : brightness_image(side, 0, rng);
    if (names.size() != 2) {
      // Distinct hue per class for multi-class sets.
      for (std::size_t p = 0; p < side * side; ++p)
        img.pixels[p * 3 + static_cast<std::size_t>(label) % 3] = static_cast<std::uint8_t>(
            std::min(255, img.pixels[p * 3 + static_cast<std::size_t>(label) % 3] + 40 * (label + 1)));
    }
    io::write_png(root / rel, img);
    rows.push_back({rel, names[static_cast<std::size_t>(label)]});
  }
  io::write_manifest(root / "labels.csv", rows);
}

// Standard normal CDF via the complementary error function.
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Result of comparing analytic gradients with central differences.
struct GradCheck {
  std::size_t components = 0;
  double max_rel = 0;      // over components whose absolute error exceeds the floor
  double max_abs = 0;
  double max_rel_large = 0;  // over components with max(|a|, |n|) > 1e-6, floor ignored
  std::string worst;       // parameter name and index of the largest relative error
  std::size_t failures = 0;
};

// Central differences with step h on every parameter component of a 64-bit
// model. A component passes when |a - n| <= abs_floor or
// |a - n| / max(|a|, |n|) < rel_tol.
inline GradCheck gradient_check(const ViTConfig& cfg, ViTParams<double> params,
                                const Tensor<double>& images,
                                const std::vector<std::int64_t>& labels, double h = 1e-4,
                                double rel_tol = 1e-4, double abs_floor = 1e-8) {
  auto loss_of = [&](const ViTParams<double>& p) {
    return cross_entropy(forward(cfg, p, images), labels);
  };
  Tape<double> tape;
  auto vars = bind_params(tape, params, true);
  auto loss = ops::cross_entropy(tape, forward(tape, vars, cfg, images), labels);
  tape.backward(loss);
  const ViTParams<double> grads = gradients(tape, vars);

  GradCheck r;
  ViTParams<double> probe = params;
  std::vector<Tensor<double>*> slots = param_pointers(probe);
  std::vector<const Tensor<double>*> gslots = param_pointers(grads);
  std::vector<std::string> names;
  for (const auto& e : manifest(cfg)) names.push_back(e.name);
  for (std::size_t s = 0; s < slots.size(); ++s) {
    for (std::size_t i = 0; i < slots[s]->size(); ++i) {
      double& v = (*slots[s])[i];
      const double orig = v;
      v = orig + h;
      const double up = loss_of(probe);
      v = orig - h;
      const double down = loss_of(probe);
      v = orig;
      const double numeric = (up - down) / (2 * h);
      const double analytic = (*gslots[s])[i];
      const double abs_err = std::abs(analytic - numeric);
      ++r.components;
      r.max_abs = std::max(r.max_abs, abs_err);
      const double mag = std::max(std::abs(analytic), std::abs(numeric));
      if (mag > 1e-6) r.max_rel_large = std::max(r.max_rel_large, abs_err / mag);
      if (abs_err <= abs_floor) continue;
      const double rel = abs_err / mag;
      if (rel > r.max_rel) {
        r.max_rel = rel;
        r.worst = names[s] + "[" + std::to_string(i) + "]";
      }
      if (!(rel < rel_tol)) ++r.failures;
    }
  }
  return r;
}

// Independent scalar Adam: running powers of beta instead of pow().
struct ScalarAdam {
  double lr, b1, b2, eps;
  double m = 0, v = 0, b1t = 1, b2t = 1;

  double step(double theta, double g) {
    b1t *= b1;
    b2t *= b2;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - b1t);
    const double vhat = v / (1 - b2t);
    return theta - lr * mhat / (std::sqrt(vhat) + eps);
  }
};

// All-pairs AUC fraction: P(score_pos > score_neg) + 0.5 P(equal).
inline double all_pairs_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  double wins = 0;
  std::uint64_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!positive[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (positive[j]) continue;
      ++pairs;
      if (scores[i] > scores[j]) wins += 1;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

}  // namespace vitforge::testing
