#pragma once

#include "slicetrack/core.hpp"
#include "slicetrack/network.hpp"

namespace slicetrack {

/// Square local window of side 2r+1 centered at the same pixel in the key map.
struct WindowSpec {
  int radius = 7;

  int side() const { return 2 * radius + 1; }
  std::size_t size() const { return static_cast<std::size_t>(side()) * static_cast<std::size_t>(side()); }
};

/// Banded attention weights: row u = y·W + x, column j = (dy+r)·(2r+1) + (dx+r)
/// refers to key pixel (y+dy, x+dx). Out-of-bounds entries are invalid and 0.
template <typename T>
struct AffinityMatrix {
  std::size_t height = 0;
  std::size_t width = 0;
  WindowSpec window;
  PixelMatrix<T> weights;
  Eigen::Matrix<std::uint8_t, Dyn, Dyn, Eigen::RowMajor> valid;
};

/// Softmax over the window of <query(u), key(v)>, restricted to in-bounds v.
template <typename T>
AffinityMatrix<T> compute_affinity(const FeatureMap<T>& key, const FeatureMap<T>& query, const WindowSpec& win);

/// out(u) = sum_v A(u, v) · field(v).
template <typename T>
Plane<T> apply_affinity(const AffinityMatrix<T>& aff, const Plane<T>& field);

template <typename T>
struct AffinityGradients {
  PixelMatrix<T> key;
  PixelMatrix<T> query;
};

/// Reverse mode through apply_affinity(compute_affinity(key, query), field):
/// given dL/d(out), returns dL/d(key) and dL/d(query).
template <typename T>
AffinityGradients<T> affinity_backward(const AffinityMatrix<T>& aff, const FeatureMap<T>& key,
                                       const FeatureMap<T>& query, const Plane<T>& field, const Plane<T>& upstream);

}  // namespace slicetrack
