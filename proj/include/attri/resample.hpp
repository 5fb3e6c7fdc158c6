#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "attri/grid.hpp"

namespace attri {

/// Bilinear resampling with half-pixel centers (align_corners = false), stored as an explicit
/// sparse linear operator so the adjoint is exact.
class BilinearResampler {
 public:
  BilinearResampler(Resolution from, Resolution to) : from_(from), to_(to) {
    if (from.cells() == 0 || to.cells() == 0) {
      throw ShapeMismatch("cannot resample " + to_string(from) + " to " + to_string(to));
    }
    const auto ys = axis(from.height, to.height);
    const auto xs = axis(from.width, to.width);
    taps_.reserve(to.cells());
    for (const auto& y : ys) {
      for (const auto& x : xs) {
        taps_.push_back(std::array<Tap, 4>{{{y.i0 * from.width + x.i0, (1 - y.w) * (1 - x.w)},
                         {y.i0 * from.width + x.i1, (1 - y.w) * x.w},
                         {y.i1 * from.width + x.i0, y.w * (1 - x.w)},
                         {y.i1 * from.width + x.i1, y.w * x.w}}});
      }
    }
  }

  Grid apply(const Grid& in) const {
    check(in.shape(), from_);
    if (from_ == to_) return in;
    Grid out(to_.height, to_.width);
    for (std::size_t o = 0; o < taps_.size(); ++o) {
      double v = 0.0;
      for (const auto& t : taps_[o]) v += t.weight * in.values[t.source];
      out.values[o] = v;
    }
    return out;
  }

  /// Adjoint: maps a gradient on the output grid back to the input grid.
  Grid adjoint(const Grid& grad_out) const {
    check(grad_out.shape(), to_);
    if (from_ == to_) return grad_out;
    Grid grad_in(from_.height, from_.width);
    for (std::size_t o = 0; o < taps_.size(); ++o) {
      for (const auto& t : taps_[o]) grad_in.values[t.source] += t.weight * grad_out.values[o];
    }
    return grad_in;
  }

 private:
  struct Tap {
    std::size_t source;
    double weight;
  };
  struct AxisTap {
    std::size_t i0, i1;
    double w;
  };

  static std::vector<AxisTap> axis(std::size_t in, std::size_t out) {
    std::vector<AxisTap> taps(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      const double src = std::max(0.0, (static_cast<double>(o) + 0.5) * scale - 0.5);
      const auto i0 = std::min(static_cast<std::size_t>(src), in - 1);
      const auto i1 = std::min(i0 + 1, in - 1);
      taps[o] = {i0, i1, i1 == i0 ? 0.0 : src - static_cast<double>(i0)};
    }
    return taps;
  }

  static void check(Resolution got, Resolution want) {
    if (!(got == want)) throw ShapeMismatch("grid is " + to_string(got) + ", expected " + to_string(want));
  }

  Resolution from_;
  Resolution to_;
  std::vector<std::array<Tap, 4>> taps_;
};

}  // namespace attri
