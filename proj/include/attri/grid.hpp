#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "attri/errors.hpp"

namespace attri {

struct Resolution {
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t cells() const noexcept { return height * width; }
  friend bool operator==(const Resolution&, const Resolution&) = default;
};

inline std::string to_string(const Resolution& r) {
  return std::to_string(r.height) + "x" + std::to_string(r.width);
}

/// Row-major H x W grid of doubles.
struct Grid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  Grid() = default;
  Grid(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), values(h * w, fill) {}
  Grid(std::size_t h, std::size_t w, std::vector<double> v) : height(h), width(w), values(std::move(v)) {
    if (values.size() != h * w) {
      throw ShapeMismatch("grid data has " + std::to_string(values.size()) + " cells, expected " +
                          std::to_string(h * w));
    }
  }

  Resolution shape() const noexcept { return {height, width}; }
  std::size_t size() const noexcept { return values.size(); }
  double& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }

  friend bool operator==(const Grid&, const Grid&) = default;
};

struct LatentShape {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t size() const noexcept { return channels * height * width; }
  friend bool operator==(const LatentShape&, const LatentShape&) = default;
};

/// Channel-major C x H x W tensor, the latent code of a denoising backbone.
struct Tensor3 {
  LatentShape shape;
  std::vector<double> values;

  Tensor3() = default;
  explicit Tensor3(LatentShape s, double fill = 0.0) : shape(s), values(s.size(), fill) {}

  std::size_t size() const noexcept { return values.size(); }
  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return values[(c * shape.height + y) * shape.width + x];
  }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return values[(c * shape.height + y) * shape.width + x];
  }

  friend bool operator==(const Tensor3&, const Tensor3&) = default;
};

inline bool all_finite(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace attri
