#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "raidx/numerics/kernels.hpp"
#include "raidx/numerics/tensor.hpp"

namespace raidx {

/// Per-layer attention matrices, first layer first. Row/column 0 is [CLS].
using AttentionStack = std::vector<Tensor>;

struct SaliencyMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> scores;        // height×width, row-major, in [0, 1]
  std::vector<double> patch_scores;  // raw, before upsampling

  double at(std::size_t r, std::size_t c) const { return scores[r * width + c]; }
};

struct RgbImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // RGB triples, row-major

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

class SaliencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Cumulative attention Ã = A(1)·A(2)·…·A(L), multiplied left to right.
///
/// With `residual` set each factor becomes 0.5·(A + I) first; off by default.
inline Tensor rollout(const AttentionStack& stack, bool residual = false) {
  if (stack.empty()) throw SaliencyError("rollout: empty attention stack");
  const std::size_t n = stack.front().rows();
  auto factor = [&](const Tensor& a) {
    if (a.rows() != n || a.cols() != n)
      throw ShapeError("rollout: attention matrix " + a.shape_string() + ", expected " +
                       std::to_string(n) + "x" + std::to_string(n));
    if (!residual) return a;
    Tensor r = a;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) r(i, j) = 0.5 * (a(i, j) + (i == j ? 1.0 : 0.0));
    return r;
  };
  Tensor acc = factor(stack.front());
  for (std::size_t l = 1; l < stack.size(); ++l) acc = kernels::matmul(acc, factor(stack[l]));
  return acc;
}

/// Row 0 of the rollout, columns 1..T.
inline std::vector<double> cls_to_patch(const Tensor& cumulative) {
  if (cumulative.rows() != cumulative.cols() || cumulative.rows() < 2)
    throw ShapeError("cls_to_patch: expected square (T+1)x(T+1), got " +
                     cumulative.shape_string());
  std::vector<double> s(cumulative.cols() - 1);
  for (std::size_t j = 1; j < cumulative.cols(); ++j) s[j - 1] = cumulative(0, j);
  return s;
}

namespace detail {

// All-equal input maps to 0.5 everywhere.
inline void min_max_normalize(std::vector<double>& v) {
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double mn = *lo, mx = *hi;
  if (!(mx > mn)) {
    std::fill(v.begin(), v.end(), 0.5);
    return;
  }
  for (double& x : v) x = (x - mn) / (mx - mn);
}

}  // namespace detail

/// Lays patch scores on a grid×grid lattice at patch centres and bilinearly
/// interpolates (edge-clamped) to height×width, then min-max normalizes.
inline SaliencyMap upsample_bilinear(const std::vector<double>& patch_scores, std::size_t grid,
                                     std::size_t height, std::size_t width) {
  if (grid == 0 || patch_scores.size() != grid * grid)
    throw ShapeError("upsample: " + std::to_string(patch_scores.size()) +
                     " scores do not fill a " + std::to_string(grid) + "x" +
                     std::to_string(grid) + " grid");
  if (height < grid || width < grid)
    throw ShapeError("upsample: target smaller than patch grid");
  SaliencyMap m;
  m.height = height;
  m.width = width;
  m.patch_scores = patch_scores;
  m.scores.resize(height * width);
  const double cell_h = static_cast<double>(height) / static_cast<double>(grid);
  const double cell_w = static_cast<double>(width) / static_cast<double>(grid);
  auto coord = [&](std::size_t px, double cell) {
    // pixel centre in patch-centre coordinates, clamped to the lattice
    const double u = (static_cast<double>(px) + 0.5) / cell - 0.5;
    return std::clamp(u, 0.0, static_cast<double>(grid - 1));
  };
  for (std::size_t r = 0; r < height; ++r) {
    const double v = coord(r, cell_h);
    const auto r0 = static_cast<std::size_t>(std::floor(v));
    const std::size_t r1 = std::min(r0 + 1, grid - 1);
    const double fr = v - static_cast<double>(r0);
    for (std::size_t c = 0; c < width; ++c) {
      const double u = coord(c, cell_w);
      const auto c0 = static_cast<std::size_t>(std::floor(u));
      const std::size_t c1 = std::min(c0 + 1, grid - 1);
      const double fc = u - static_cast<double>(c0);
      const double top = (1 - fc) * patch_scores[r0 * grid + c0] + fc * patch_scores[r0 * grid + c1];
      const double bot = (1 - fc) * patch_scores[r1 * grid + c0] + fc * patch_scores[r1 * grid + c1];
      m.scores[r * width + c] = (1 - fr) * top + fr * bot;
    }
  }
  detail::min_max_normalize(m.scores);
  return m;
}

/// Jet colormap control points (score → RGB).
inline constexpr std::array<std::array<double, 4>, 7> kJetControlPoints = {{
    {0.000, 0, 0, 131},
    {0.125, 0, 0, 255},
    {0.250, 0, 255, 255},
    {0.500, 0, 255, 0},
    {0.750, 255, 255, 0},
    {0.875, 255, 0, 0},
    {1.000, 128, 0, 0},
}};

inline std::array<double, 3> jet(double score) {
  const double s = std::clamp(score, 0.0, 1.0);
  for (std::size_t i = 1; i < kJetControlPoints.size(); ++i) {
    const auto& hi = kJetControlPoints[i];
    if (s <= hi[0]) {
      const auto& lo = kJetControlPoints[i - 1];
      const double t = hi[0] > lo[0] ? (s - lo[0]) / (hi[0] - lo[0]) : 0.0;
      return {lo[1] + t * (hi[1] - lo[1]), lo[2] + t * (hi[2] - lo[2]),
              lo[3] + t * (hi[3] - lo[3])};
    }
  }
  const auto& last = kJetControlPoints.back();
  return {last[1], last[2], last[3]};
}

/// alpha·jet(score) + (1 − alpha)·gray, per pixel. `image` is row-major in [0, 1].
inline RgbImage jet_overlay(const std::vector<double>& image, std::size_t height,
                            std::size_t width, const SaliencyMap& map, double alpha) {
  if (image.size() != height * width || map.height != height || map.width != width)
    throw ShapeError("jet_overlay: image and saliency map sizes differ");
  if (alpha < 0.0 || alpha > 1.0) throw SaliencyError("jet_overlay: alpha outside [0, 1]");
  RgbImage out;
  out.height = height;
  out.width = width;
  out.pixels.resize(height * width * 3);
  for (std::size_t i = 0; i < height * width; ++i) {
    const double gray = 255.0 * std::clamp(image[i], 0.0, 1.0);
    const auto color = jet(map.scores[i]);
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double v = alpha * color[ch] + (1.0 - alpha) * gray;
      out.pixels[i * 3 + ch] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
    }
  }
  return out;
}

inline void write_ppm(const RgbImage& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw SaliencyError("cannot open " + path + " for writing");
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw SaliencyError("write failed for " + path);
}

inline RgbImage read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SaliencyError("cannot open " + path);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || w == 0 || h == 0)
    throw SaliencyError(path + ": not a P6 image with maxval 255");
  in.get();  // single whitespace byte after the header
  RgbImage img;
  img.width = w;
  img.height = h;
  img.pixels.resize(w * h * 3);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
    throw SaliencyError(path + ": truncated pixel data");
  if (in.peek() != std::char_traits<char>::eof()) throw SaliencyError(path + ": trailing bytes");
  return img;
}

/// Fraction of the top-decile saliency mass that falls inside a box
/// [row0, row1) × [col0, col1).
inline double top_decile_mass_in_box(const SaliencyMap& map, std::size_t row0, std::size_t col0,
                                     std::size_t row1, std::size_t col1) {
  std::vector<double> sorted = map.scores;
  const std::size_t n = sorted.size();
  const std::size_t keep = std::max<std::size_t>(1, n / 10);
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(n - keep),
                   sorted.end());
  const double threshold = sorted[n - keep];
  double total = 0.0, inside = 0.0;
  for (std::size_t r = 0; r < map.height; ++r)
    for (std::size_t c = 0; c < map.width; ++c) {
      const double s = map.at(r, c);
      if (s < threshold) continue;
      total += s;
      if (r >= row0 && r < row1 && c >= col0 && c < col1) inside += s;
    }
  return total > 0.0 ? inside / total : 0.0;
}

}  // namespace raidx
