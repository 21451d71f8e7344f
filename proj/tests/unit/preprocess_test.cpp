#include <cmath>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "support.hpp"
#include "vitforge/preprocess.hpp"

using namespace vitforge;

namespace {

LabeledDataset counted_dataset(std::vector<std::size_t> per_class) {
  LabeledDataset ds;
  ds.num_classes = per_class.size();
  for (std::size_t c = 0; c < per_class.size(); ++c) ds.class_names.push_back("c" + std::to_string(c));
  std::size_t id = 0;
  // Interleave classes so source order is mixed.
  for (std::size_t round = 0;; ++round) {
    bool any = false;
    for (std::size_t c = 0; c < per_class.size(); ++c) {
      if (round >= per_class[c]) continue;
      any = true;
      RgbImage img(2, 2, static_cast<std::uint8_t>(id % 256));
      ds.samples.push_back({img, static_cast<std::int64_t>(c), std::to_string(id++)});
    }
    if (!any) break;
  }
  return ds;
}

std::vector<std::size_t> class_counts(const LabeledDataset& ds) {
  std::vector<std::size_t> n(ds.num_classes, 0);
  for (const auto& s : ds.samples) ++n[static_cast<std::size_t>(s.label)];
  return n;
}

}  // namespace

TEST(Normalize, ForcedValues) {
  RgbImage img(1, 1);
  img.pixels = {255, 0, 51};
  auto t = normalize<float>(img);
  EXPECT_EQ(t.shape(), (Shape{1, 1, 3}));
  EXPECT_EQ(t[0], 1.0f);
  EXPECT_EQ(t[1], 0.0f);
  EXPECT_EQ(t[2], 0.2f);  // 51/255 is exactly the nearest float to 0.2
  EXPECT_EQ(normalize<double>(img)[2], 0.2);
}

TEST(Permute, ShapeOfMicroscopySlide) {
  auto t = permute_hwc_to_chw(Tensor<float>({460, 700, 3}));
  EXPECT_EQ(t.shape(), (Shape{3, 460, 700}));
}

TEST(Permute, SinglePixelPlanes) {
  auto t = permute_hwc_to_chw(Tensor<double>({1, 1, 3}, std::vector<double>{0.1, 0.2, 0.3}));
  EXPECT_EQ(t.shape(), (Shape{3, 1, 1}));
  EXPECT_EQ(t.vec(), (std::vector<double>{0.1, 0.2, 0.3}));
}

TEST(Permute, InverseRoundTrip) {
  std::mt19937_64 rng(1);
  auto x = vitforge::testing::random_tensor<double>({5, 7, 3}, rng);
  EXPECT_EQ(permute_chw_to_hwc(permute_hwc_to_chw(x)), x);
  auto c = permute_hwc_to_chw(x);
  EXPECT_EQ(c[(2 * 5 + 4) * 7 + 6], x[(4 * 7 + 6) * 3 + 2]);
}

TEST(Resize, ConstantStaysConstant) {
  for (std::size_t side : {1u, 3u, 9u, 16u}) {
    auto y = resize(Tensor<double>({3, 5, 7}, 0.625), side);
    EXPECT_EQ(y.shape(), (Shape{3, side, side}));
    for (double v : y.data()) EXPECT_NEAR(v, 0.625, 1e-12);
  }
}

TEST(Resize, SameSizeIsIdentity) {
  std::mt19937_64 rng(2);
  auto x = vitforge::testing::random_tensor<float>({3, 6, 6}, rng);
  auto y = resize(x, 6);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i], 1e-6);
}

TEST(Resize, CheckerboardMatchesBilinearOracle) {
  // Half-pixel centers map output index i of 4 onto source coordinate
  // (i + 0.5) / 2 - 0.5, clamped: {0, 0.25, 0.75, 1}. Bilinear interpolation of
  // [0 1; 1 0] at (r, c) is r + c - 2rc.
  const double coord[4] = {0.0, 0.25, 0.75, 1.0};
  Tensor<double> x({1, 2, 2}, std::vector<double>{0, 1, 1, 0});
  auto y = resize(x, 4);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      const double r = coord[i], c = coord[j];
      EXPECT_NEAR(y[i * 4 + j], r + c - 2 * r * c, 1e-6) << i << "," << j;
    }
  EXPECT_NEAR(y[1 * 4 + 2], 0.625, 1e-12);
}

TEST(Resize, DownscaleAveragesNeighbours) {
  // 4 -> 2: source coordinates 0.5 and 2.5, midway between pixel pairs.
  auto y = resize(Tensor<double>({1, 4, 4}, [&] {
    std::vector<double> v;
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) v.push_back(c);
    return v;
  }()), 2);
  EXPECT_NEAR(y[0], 0.5, 1e-12);
  EXPECT_NEAR(y[1], 2.5, 1e-12);
}

TEST(Split, PerClassRoundingCounts) {
  auto ds = counted_dataset({60, 40});
  auto r = stratified_split(ds, 0.85, 0);
  EXPECT_EQ(r.train.size(), 85u);
  EXPECT_EQ(r.test.size(), 15u);
  EXPECT_EQ(class_counts(r.train), (std::vector<std::size_t>{51, 34}));
  EXPECT_EQ(class_counts(r.test), (std::vector<std::size_t>{9, 6}));
}

TEST(Split, ExactHalfRoundsUp) {
  EXPECT_EQ(stratified_train_count(10, 0.85), 9u);  // 8.5 -> 9
  EXPECT_EQ(stratified_train_count(2, 0.85), 1u);
  EXPECT_EQ(stratified_train_count(2, 0.01), 1u);
  EXPECT_EQ(stratified_train_count(20, 0.99), 19u);
}

TEST(Split, TwoSampleClass) {
  auto r = stratified_split(counted_dataset({2, 10}), 0.85, 3);
  EXPECT_EQ(class_counts(r.train)[0], 1u);
  EXPECT_EQ(class_counts(r.test)[0], 1u);
}

TEST(Split, DeterministicAndDisjoint) {
  auto ds = counted_dataset({23, 17, 9});
  auto a = stratified_split(ds, 0.7, 7), b = stratified_split(ds, 0.7, 7);
  EXPECT_EQ(a.train_indices, b.train_indices);
  EXPECT_EQ(a.test_indices, b.test_indices);
  std::set<std::size_t> all(a.train_indices.begin(), a.train_indices.end());
  for (auto i : a.test_indices) EXPECT_TRUE(all.insert(i).second);
  EXPECT_EQ(all.size(), ds.size());
  auto c = stratified_split(ds, 0.7, 8);
  EXPECT_NE(a.train_indices, c.train_indices);
}

TEST(Split, Errors) {
  auto ds = counted_dataset({5, 5});
  EXPECT_THROW(stratified_split(ds, 1.0, 0), UsageError);
  EXPECT_THROW(stratified_split(ds, 0.0, 0), UsageError);
  try {
    stratified_split(counted_dataset({5, 1}), 0.85, 0);
    FAIL();
  } catch (const SplitError& e) {
    EXPECT_NE(std::string(e.what()).find("c1"), std::string::npos);
  }
}

TEST(Batches, SizesFollowDivision) {
  auto ds = counted_dataset({5, 5});
  auto b = make_batches<float>(ds, 4, 4);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0].size(), 4u);
  EXPECT_EQ(b[1].size(), 4u);
  EXPECT_EQ(b[2].size(), 2u);
  EXPECT_EQ(b[0].images.shape(), (Shape{4, 3, 4, 4}));
  EXPECT_THROW(make_batches<float>(ds, 0, 4), ConfigError);
}

TEST(Batches, DefaultBatchHoldsThirtyTwo) {
  auto b = make_batches<float>(counted_dataset({16, 16}), 32, 2);
  ASSERT_EQ(b.size(), 1u);
  EXPECT_EQ(b[0].size(), 32u);
}

TEST(Batches, UnshuffledKeepsOrder) {
  auto ds = counted_dataset({4, 3, 3});
  std::vector<std::int64_t> labels;
  for (const auto& b : make_batches<float>(ds, 3, 2))
    labels.insert(labels.end(), b.labels.begin(), b.labels.end());
  std::vector<std::int64_t> expect;
  for (const auto& s : ds.samples) expect.push_back(s.label);
  EXPECT_EQ(labels, expect);
}

TEST(Batches, ShuffleIsSeededPermutation) {
  const auto a = epoch_order(50, 3, 1), b = epoch_order(50, 3, 1), c = epoch_order(50, 3, 2);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, epoch_order(50, std::nullopt));
}

TEST(Batches, PrefetcherMatchesEagerBatches) {
  auto ds = counted_dataset({9, 8});
  auto eager = make_batches<double>(ds, 5, 3, 11, 4);
  BatchPrefetcher<double> pre(ds, 5, 3, 11, 4);
  EXPECT_EQ(pre.num_batches(), eager.size());
  std::size_t i = 0;
  while (auto b = pre.next()) {
    ASSERT_LT(i, eager.size());
    EXPECT_EQ(b->images, eager[i].images);
    EXPECT_EQ(b->labels, eager[i].labels);
    ++i;
  }
  EXPECT_EQ(i, eager.size());
}

TEST(Batches, PrefetcherAbandonedEarlyShutsDown) {
  auto ds = counted_dataset({30, 30});
  for (int rep = 0; rep < 20; ++rep) {
    BatchPrefetcher<float> pre(ds, 2, 4, 1, 0, 1);
    (void)pre.next();
  }
  SUCCEED();
}

TEST(Dataset, ValidateRejectsBadLabels) {
  auto ds = counted_dataset({2, 2});
  ds.samples[0].label = 5;
  EXPECT_THROW(ds.validate(), LabelError);
}
