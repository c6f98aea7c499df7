#include <gtest/gtest.h>

#include <filesystem>

#include "common/oracles.hpp"
#include "raidx/saliency.hpp"

using namespace raidx;
using raidx::testing::max_abs_diff;
using raidx::testing::naive_product;
using raidx::testing::random_row_stochastic;
using raidx::testing::right_fold_product;

TEST(Rollout, SingleLayerIsIdentityCase) {
  Rng rng(1);
  const Tensor a = random_row_stochastic(rng, 5);
  EXPECT_EQ(rollout({a}), a);
}

TEST(Rollout, RowUniformFixedPoint) {
  const Tensor u(4, 4, 0.25);
  const Tensor r = rollout({u, u, u});
  for (double x : r.data()) EXPECT_NEAR(x, 0.25, 1e-15);
  const auto s = cls_to_patch(r);
  ASSERT_EQ(s.size(), 3u);
  for (double x : s) EXPECT_NEAR(x, 0.25, 1e-15);
}

TEST(Rollout, TwoLayerHandExample) {
  const Tensor a1 = Tensor::from_rows({{0.5, 0.5}, {0.25, 0.75}});
  const Tensor a2 = Tensor::from_rows({{1, 0}, {0.5, 0.5}});
  const Tensor r = rollout({a1, a2});
  EXPECT_DOUBLE_EQ(r(0, 0), 0.75);
  EXPECT_DOUBLE_EQ(r(0, 1), 0.25);
  EXPECT_DOUBLE_EQ(r(1, 0), 0.625);
  EXPECT_DOUBLE_EQ(r(1, 1), 0.375);
  const auto s = cls_to_patch(r);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_DOUBLE_EQ(s[0], 0.25);
}

TEST(Rollout, MatchesNaiveOracleAndIsAssociative) {
  Rng rng(2);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng.below(16), layers = 1 + rng.below(6);
    AttentionStack stack;
    for (std::size_t l = 0; l < layers; ++l) stack.push_back(random_row_stochastic(rng, n));
    const Tensor r = rollout(stack);
    EXPECT_LE(max_abs_diff(r, naive_product(stack)), 1e-12);
    EXPECT_LE(max_abs_diff(r, right_fold_product(stack)), 1e-12);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += r(i, j);
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Rollout, ResidualVariant) {
  const Tensor a = Tensor::from_rows({{0, 1}, {1, 0}});
  const Tensor r = rollout({a}, true);
  for (double x : r.data()) EXPECT_DOUBLE_EQ(x, 0.5);
}

TEST(Rollout, Errors) {
  EXPECT_THROW(rollout({}), SaliencyError);
  EXPECT_THROW(rollout({Tensor(3, 3), Tensor(2, 2)}), ShapeError);
  EXPECT_THROW(cls_to_patch(Tensor(2, 3)), ShapeError);
}

TEST(ClsToPatch, IdentityGivesFlatMap) {
  const auto s = cls_to_patch(Tensor::identity(5));
  for (double x : s) EXPECT_EQ(x, 0.0);
  const auto m = upsample_bilinear(s, 2, 8, 8);
  for (double x : m.scores) EXPECT_EQ(x, 0.5);
}

TEST(Upsample, NoUpsamplingReturnsNormalizedScores) {
  const std::vector<double> s{0.1, 0.4, 0.3, 0.2};
  const auto m = upsample_bilinear(s, 2, 2, 2);
  EXPECT_DOUBLE_EQ(m.scores[0], 0.0);
  EXPECT_DOUBLE_EQ(m.scores[1], 1.0);
  EXPECT_NEAR(m.scores[2], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(m.scores[3], 1.0 / 3.0, 1e-15);
}

TEST(Upsample, HotPatchStaysInItsQuadrant) {
  for (std::size_t hot = 0; hot < 4; ++hot) {
    std::vector<double> s(4, 0.1);
    s[hot] = 0.9;
    const auto m = upsample_bilinear(s, 2, 16, 16);
    std::size_t best = 0;
    for (std::size_t i = 1; i < m.scores.size(); ++i)
      if (m.scores[i] > m.scores[best]) best = i;
    EXPECT_EQ((best / 16) / 8 * 2 + (best % 16) / 8, hot);
  }
}

TEST(Upsample, ArgmaxPreservedProperty) {
  Rng rng(3);
  for (int t = 0; t < 200; ++t) {
    // odd cells put one output pixel exactly on each patch centre
    const std::size_t grid = 2 + rng.below(4), cell = 3 + 2 * rng.below(3);
    std::vector<double> s(grid * grid);
    for (double& x : s) x = rng.uniform();
    const auto m = upsample_bilinear(s, grid, grid * cell, grid * cell);
    std::size_t hot = 0, best = 0;
    for (std::size_t i = 1; i < s.size(); ++i)
      if (s[i] > s[hot]) hot = i;
    for (std::size_t i = 1; i < m.scores.size(); ++i)
      if (m.scores[i] > m.scores[best]) best = i;
    const std::size_t r = best / m.width, c = best % m.width;
    EXPECT_EQ((r / cell) * grid + c / cell, hot);
    for (double x : m.scores) {
      EXPECT_GE(x, 0.0);
      EXPECT_LE(x, 1.0);
    }
  }
}

TEST(Upsample, Errors) {
  EXPECT_THROW(upsample_bilinear({1, 2, 3}, 2, 4, 4), ShapeError);
  EXPECT_THROW(upsample_bilinear({1, 2, 3, 4}, 2, 1, 4), ShapeError);
}

TEST(Overlay, AlphaZeroIsGray) {
  const std::vector<double> img{0.0, 0.5, 1.0, 0.25};
  const auto m = upsample_bilinear({0.1, 0.9, 0.3, 0.4}, 2, 2, 2);
  const auto o = jet_overlay(img, 2, 2, m, 0.0);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t ch = 0; ch < 3; ++ch)
      EXPECT_EQ(o.pixels[i * 3 + ch], static_cast<std::uint8_t>(std::lround(255 * img[i])));
}

TEST(Overlay, AlphaOneConstantZeroIsDarkBlue) {
  SaliencyMap m;
  m.height = m.width = 3;
  m.scores.assign(9, 0.0);
  const auto o = jet_overlay(std::vector<double>(9, 0.7), 3, 3, m, 1.0);
  for (std::size_t i = 0; i < 9; ++i) {
    EXPECT_EQ(o.pixels[i * 3], 0);
    EXPECT_EQ(o.pixels[i * 3 + 1], 0);
    EXPECT_EQ(o.pixels[i * 3 + 2], 131);
  }
  EXPECT_THROW(jet_overlay(std::vector<double>(9), 3, 3, m, 1.5), SaliencyError);
  EXPECT_THROW(jet_overlay(std::vector<double>(8), 3, 3, m, 0.5), ShapeError);
}

TEST(Overlay, PpmRoundTrip) {
  Rng rng(4);
  std::vector<double> img(12 * 10);
  for (double& x : img) x = rng.uniform();
  std::vector<double> s(4);
  for (double& x : s) x = rng.uniform();
  const auto o = jet_overlay(img, 12, 10, upsample_bilinear(s, 2, 12, 10), 0.5);
  const auto dir = std::filesystem::temp_directory_path() / "raidx_test_saliency";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "o.ppm").string();
  write_ppm(o, path);
  const auto back = read_ppm(path);
  EXPECT_EQ(back, o);
  EXPECT_EQ(back.height, 12u);
  EXPECT_EQ(back.width, 10u);
  EXPECT_EQ(std::filesystem::file_size(path), std::string("P6\n10 12\n255\n").size() + 360);
}

TEST(BoxMass, CountsTopDecile) {
  SaliencyMap m;
  m.height = m.width = 10;
  m.scores.assign(100, 0.0);
  for (std::size_t c = 0; c < 10; ++c) m.scores[2 * 10 + c] = 1.0;  // row 2 is hot
  EXPECT_DOUBLE_EQ(top_decile_mass_in_box(m, 0, 0, 5, 10), 1.0);
  EXPECT_DOUBLE_EQ(top_decile_mass_in_box(m, 0, 0, 5, 5), 0.5);
  EXPECT_DOUBLE_EQ(top_decile_mass_in_box(m, 5, 0, 10, 10), 0.0);
}
