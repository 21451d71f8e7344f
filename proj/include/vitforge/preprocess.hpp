#pragma once

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stop_token>
#include <string>
#include <thread>
#include <vector>

#include "vitforge/errors.hpp"
#include "vitforge/tensor.hpp"

namespace vitforge {

// Interleaved 8-bit RGB pixels, row-major H x W x 3.
struct RgbImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;

  static constexpr std::size_t kChannels = 3;

  RgbImage() = default;
  RgbImage(std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : height(h), width(w), pixels(h * w * kChannels, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) {
    return pixels[(y * width + x) * kChannels + c];
  }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * kChannels + c];
  }
};

struct ImageSample {
  RgbImage pixels;
  std::int64_t label = 0;
  std::string source_id;
};

struct LabeledDataset {
  std::vector<ImageSample> samples;
  std::size_t num_classes = 0;
  std::vector<std::string> class_names;

  std::size_t size() const noexcept { return samples.size(); }
  bool empty() const noexcept { return samples.empty(); }

  void validate() const {
    if (num_classes == 0) throw ConfigError("dataset needs at least one class");
    if (class_names.size() != num_classes)
      throw ConfigError("dataset has " + std::to_string(class_names.size()) +
                        " class names for " + std::to_string(num_classes) + " classes");
    for (const auto& s : samples) {
      if (s.label < 0 || static_cast<std::size_t>(s.label) >= num_classes)
        throw LabelError("sample '" + s.source_id + "' has label " +
                         std::to_string(s.label) + " outside [0, " +
                         std::to_string(num_classes) + ")");
      const auto& p = s.pixels;
      if (p.height == 0 || p.width == 0 || p.pixels.size() != p.height * p.width * 3)
        throw DimensionError("sample '" + s.source_id + "' has invalid image extents");
    }
  }

  // Same classes, chosen samples in the given order.
  LabeledDataset subset(const std::vector<std::size_t>& indices) const {
    LabeledDataset out{{}, num_classes, class_names};
    out.samples.reserve(indices.size());
    for (auto i : indices) out.samples.push_back(samples.at(i));
    return out;
  }
};

template <typename T>
struct Batch {
  Tensor<T> images;  // B x Ch x S x S, values in [0, 1]
  std::vector<std::int64_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
};

// raw / 255 elementwise, H x W x Ch.
template <typename T = float>
Tensor<T> normalize(const RgbImage& raw) {
  if (raw.height == 0 || raw.width == 0)
    throw DimensionError("normalize: empty image");
  Tensor<T> out({raw.height, raw.width, RgbImage::kChannels});
  for (std::size_t i = 0; i < raw.pixels.size(); ++i)
    out[i] = static_cast<T>(raw.pixels[i]) / T{255};
  return out;
}

template <typename T>
Tensor<T> normalize(const ImageSample& sample) {
  return normalize<T>(sample.pixels);
}

template <typename T>
Tensor<T> permute_hwc_to_chw(const Tensor<T>& x) {
  if (x.rank() != 3)
    throw DimensionError("permute_hwc_to_chw expects rank 3, got " + shape_str(x.shape()));
  const std::size_t h = x.dim(0), w = x.dim(1), ch = x.dim(2);
  Tensor<T> out({ch, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t xx = 0; xx < w; ++xx)
      for (std::size_t c = 0; c < ch; ++c)
        out[(c * h + y) * w + xx] = x[(y * w + xx) * ch + c];
  return out;
}

template <typename T>
Tensor<T> permute_chw_to_hwc(const Tensor<T>& x) {
  if (x.rank() != 3)
    throw DimensionError("permute_chw_to_hwc expects rank 3, got " + shape_str(x.shape()));
  const std::size_t ch = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor<T> out({h, w, ch});
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx)
        out[(y * w + xx) * ch + c] = x[(c * h + y) * w + xx];
  return out;
}

namespace detail {
// Source coordinate and blend weight for output index i along one axis, with
// pixel centers at (i + 0.5) * scale - 0.5 clamped to the edges.
struct Tap {
  std::size_t lo, hi;
  double frac;
};

inline std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    taps[i] = {lo, std::min(lo + 1, in - 1), src - static_cast<double>(lo)};
  }
  return taps;
}
}  // namespace detail

// Bilinear resize of a Ch x H x W image to Ch x side x side.
template <typename T>
Tensor<T> resize(const Tensor<T>& x, std::size_t side) {
  if (x.rank() != 3) throw DimensionError("resize expects Ch x H x W, got " + shape_str(x.shape()));
  if (side == 0) throw ContractError("resize: target side must be positive");
  const std::size_t ch = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h == side && w == side) return x;
  const auto ty = detail::bilinear_taps(h, side);
  const auto tx = detail::bilinear_taps(w, side);
  Tensor<T> out({ch, side, side});
  for (std::size_t c = 0; c < ch; ++c) {
    const T* plane = x.data().data() + c * h * w;
    for (std::size_t i = 0; i < side; ++i) {
      const auto& a = ty[i];
      for (std::size_t j = 0; j < side; ++j) {
        const auto& b = tx[j];
        const double top = plane[a.lo * w + b.lo] * (1 - b.frac) + plane[a.lo * w + b.hi] * b.frac;
        const double bot = plane[a.hi * w + b.lo] * (1 - b.frac) + plane[a.hi * w + b.hi] * b.frac;
        out[(c * side + i) * side + j] = static_cast<T>(top * (1 - a.frac) + bot * a.frac);
      }
    }
  }
  return out;
}

// normalize -> permute -> resize for one sample, Ch x side x side.
template <typename T>
Tensor<T> prepare_image(const RgbImage& raw, std::size_t side) {
  return resize(permute_hwc_to_chw(normalize<T>(raw)), side);
}

struct SplitResult {
  LabeledDataset train;
  LabeledDataset test;
  std::vector<std::size_t> train_indices;  // positions in the source dataset
  std::vector<std::size_t> test_indices;
};

// Train count for a class of n samples: round-half-up of fraction * n, kept
// within [1, n - 1].
inline std::size_t stratified_train_count(std::size_t n, double fraction) {
  // The small epsilon keeps exact halves (8.5 from 0.85 * 10) rounding up
  // despite binary representation error.
  auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 0.5 + 1e-9));
  return std::clamp<std::size_t>(k, 1, n - 1);
}

struct SplitIndices {
  std::vector<std::size_t> train;  // ascending positions in the source
  std::vector<std::size_t> test;
};

// Per-class seeded shuffle; the first round(fraction * n_c) samples of each
// class go to train.
inline SplitIndices stratified_split_indices(std::span<const std::int64_t> labels,
                                             const std::vector<std::string>& class_names,
                                             double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0))
    throw UsageError("split fraction must lie strictly between 0 and 1");
  std::vector<std::vector<std::size_t>> by_class(class_names.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= class_names.size())
      throw LabelError("split: label " + std::to_string(labels[i]) + " at index " +
                       std::to_string(i) + " has no class");
    by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  }
  SplitIndices r;
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    auto& idx = by_class[c];
    if (idx.size() < 2)
      throw SplitError("class '" + class_names[c] + "' has " + std::to_string(idx.size()) +
                       " samples; at least 2 are needed");
    std::seed_seq sseq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                       static_cast<std::uint32_t>(c)};
    std::mt19937_64 rng(sseq);
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t k = stratified_train_count(idx.size(), fraction);
    r.train.insert(r.train.end(), idx.begin(), idx.begin() + k);
    r.test.insert(r.test.end(), idx.begin() + k, idx.end());
  }
  std::sort(r.train.begin(), r.train.end());
  std::sort(r.test.begin(), r.test.end());
  return r;
}

inline SplitResult stratified_split(const LabeledDataset& ds, double fraction,
                                    std::uint64_t seed) {
  ds.validate();
  std::vector<std::int64_t> labels;
  for (const auto& s : ds.samples) labels.push_back(s.label);
  auto idx = stratified_split_indices(labels, ds.class_names, fraction, seed);
  SplitResult r;
  r.train = ds.subset(idx.train);
  r.test = ds.subset(idx.test);
  r.train_indices = std::move(idx.train);
  r.test_indices = std::move(idx.test);
  return r;
}

// Sample visiting order for one epoch: identity without a seed, otherwise a
// permutation drawn from a stream keyed by (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n,
                                            std::optional<std::uint64_t> seed,
                                            std::uint64_t epoch = 0) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (seed) {
    std::seed_seq sseq{static_cast<std::uint32_t>(*seed), static_cast<std::uint32_t>(*seed >> 32),
                       static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
    std::mt19937_64 rng(sseq);
    std::shuffle(order.begin(), order.end(), rng);
  }
  return order;
}

template <typename T>
Batch<T> assemble_batch(const LabeledDataset& ds, std::span<const std::size_t> indices,
                        std::size_t side) {
  const std::size_t per = RgbImage::kChannels * side * side;
  Batch<T> b{Tensor<T>({indices.size(), RgbImage::kChannels, side, side}), {}};
  b.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& s = ds.samples.at(indices[i]);
    Tensor<T> img = prepare_image<T>(s.pixels, side);
    std::copy(img.data().begin(), img.data().end(), b.images.data().begin() + i * per);
    b.labels.push_back(s.label);
  }
  return b;
}

// Start offsets of each batch over n samples.
inline std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n,
                                                                    std::size_t batch) {
  if (batch == 0) throw ConfigError("batch size must be at least 1");
  std::vector<std::pair<std::size_t, std::size_t>> r;
  for (std::size_t lo = 0; lo < n; lo += batch) r.emplace_back(lo, std::min(n, lo + batch));
  return r;
}

template <typename T = float>
std::vector<Batch<T>> make_batches(const LabeledDataset& ds, std::size_t batch,
                                   std::size_t side,
                                   std::optional<std::uint64_t> shuffle_seed = std::nullopt,
                                   std::uint64_t epoch = 0) {
  const auto ranges = batch_ranges(ds.size(), batch);
  const auto order = epoch_order(ds.size(), shuffle_seed, epoch);
  std::vector<Batch<T>> out;
  out.reserve(ranges.size());
  for (auto [lo, hi] : ranges)
    out.push_back(assemble_batch<T>(
        ds, std::span<const std::size_t>(order.data() + lo, hi - lo), side));
  return out;
}

// Assembles batches on a background thread, at most `capacity` ahead of the
// consumer. Batches come out in plan order.
template <typename T>
class BatchPrefetcher {
 public:
  BatchPrefetcher(const LabeledDataset& ds, std::size_t batch, std::size_t side,
                  std::optional<std::uint64_t> shuffle_seed, std::uint64_t epoch,
                  std::size_t capacity = 2)
      : capacity_(std::max<std::size_t>(1, capacity)),
        order_(epoch_order(ds.size(), shuffle_seed, epoch)),
        ranges_(batch_ranges(ds.size(), batch)) {
    worker_ = std::jthread([this, &ds, side](std::stop_token st) {
      for (auto [lo, hi] : ranges_) {
        std::optional<Batch<T>> b;
        std::exception_ptr err;
        try {
          b = assemble_batch<T>(ds, std::span<const std::size_t>(order_.data() + lo, hi - lo), side);
        } catch (...) {
          err = std::current_exception();
        }
        std::unique_lock lock(mu_);
        if (!not_full_.wait(lock, st, [&] { return queue_.size() < capacity_; })) return;
        if (err) {
          error_ = err;
          not_empty_.notify_all();
          return;
        }
        queue_.push_back(std::move(*b));
        not_empty_.notify_all();
      }
    });
  }

  std::size_t num_batches() const noexcept { return ranges_.size(); }

  // Next batch, or nullopt when the epoch is exhausted.
  std::optional<Batch<T>> next() {
    if (served_ == ranges_.size()) return std::nullopt;
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return !queue_.empty() || error_; });
    if (queue_.empty() && error_) std::rethrow_exception(error_);
    Batch<T> b = std::move(queue_.front());
    queue_.pop_front();
    ++served_;
    not_full_.notify_all();
    return b;
  }

 private:
  std::size_t capacity_;
  std::vector<std::size_t> order_;
  std::vector<std::pair<std::size_t, std::size_t>> ranges_;
  std::size_t served_ = 0;
  std::mutex mu_;
  std::condition_variable_any not_full_;
  std::condition_variable not_empty_;
  std::deque<Batch<T>> queue_;
  std::exception_ptr error_;
  std::jthread worker_;
};

}  // namespace vitforge
