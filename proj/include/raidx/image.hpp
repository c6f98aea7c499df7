#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "raidx/numerics/tensor.hpp"

namespace raidx {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Single-channel image, row-major, pixels in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  double at(std::size_t r, std::size_t c) const { return pixels[r * width + c]; }
  double& at(std::size_t r, std::size_t c) { return pixels[r * width + c]; }

  void validate() const {
    if (height == 0 || width == 0 || pixels.size() != height * width)
      throw ImageError("image buffer does not match " + std::to_string(height) + "x" +
                       std::to_string(width));
    for (double p : pixels)
      if (!(p >= 0.0 && p <= 1.0)) throw ImageError("pixel value outside [0, 1]");
  }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Per-patch input features for the encoder stem: the centred pixels of each
/// patch, then the patch mean and a local high-frequency energy measure
/// (scaled RMS of horizontal and vertical neighbour differences).
inline constexpr std::size_t kPatchStatFeatures = 2;
inline constexpr double kHighFrequencyGain = 4.0;

inline Tensor patch_features(const Image& img, std::size_t patch) {
  if (patch == 0 || img.height % patch != 0 || img.width % patch != 0)
    throw ShapeError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                     " is not divisible into " + std::to_string(patch) + "-pixel patches");
  const std::size_t gh = img.height / patch, gw = img.width / patch;
  const std::size_t f = patch * patch + kPatchStatFeatures;
  Tensor x(gh * gw, f);
  for (std::size_t pr = 0; pr < gh; ++pr)
    for (std::size_t pc = 0; pc < gw; ++pc) {
      const std::size_t row = pr * gw + pc;
      double mean = 0.0, energy = 0.0;
      std::size_t pairs = 0;
      for (std::size_t i = 0; i < patch; ++i)
        for (std::size_t j = 0; j < patch; ++j) {
          const double v = img.at(pr * patch + i, pc * patch + j);
          x(row, i * patch + j) = v - 0.5;
          mean += v;
          if (j + 1 < patch) {
            const double d = img.at(pr * patch + i, pc * patch + j + 1) - v;
            energy += d * d;
            ++pairs;
          }
          if (i + 1 < patch) {
            const double d = img.at(pr * patch + i + 1, pc * patch + j) - v;
            energy += d * d;
            ++pairs;
          }
        }
      mean /= static_cast<double>(patch * patch);
      x(row, patch * patch) = mean - 0.5;
      x(row, patch * patch + 1) =
          pairs ? kHighFrequencyGain * std::sqrt(energy / static_cast<double>(pairs)) : 0.0;
    }
  return x;
}

}  // namespace raidx
