#include "slicetrack/affinity.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace slicetrack {

namespace {

// Rows of the output are processed in blocks so the (2r + block) key rows a
// block touches stay resident in cache.
constexpr Eigen::Index kRowBlock = 8;

template <typename T, int N>
inline T dot_fixed(const T* a, const T* b) {
  using V = Eigen::Matrix<T, N, 1>;
  return Eigen::Map<const V>(a).dot(Eigen::Map<const V>(b));
}

template <typename T>
inline T dot_dynamic(const T* a, const T* b, Eigen::Index n) {
  return Eigen::Map<const Vec<T>>(a, n).dot(Eigen::Map<const Vec<T>>(b, n));
}

template <typename T>
void check_same_dims(const FeatureMap<T>& key, const FeatureMap<T>& query) {
  if (key.height != query.height || key.width != query.width || key.channels() != query.channels())
    throw DimensionError("affinity: key and query feature maps differ in shape");
  if (static_cast<std::size_t>(key.values.rows()) != key.height * key.width)
    throw DimensionError("affinity: feature map rows do not match its dims");
}

template <typename T>
void check_field(const AffinityMatrix<T>& aff, const Plane<T>& field) {
  if (static_cast<std::size_t>(field.rows()) != aff.height || static_cast<std::size_t>(field.cols()) != aff.width)
    throw DimensionError("affinity: field dims do not match the affinity matrix");
}

template <typename T, typename Dot>
AffinityMatrix<T> affinity_kernel(const FeatureMap<T>& key, const FeatureMap<T>& query, const WindowSpec& win,
                                  Dot dot) {
  const auto H = static_cast<Eigen::Index>(key.height);
  const auto W = static_cast<Eigen::Index>(key.width);
  const Eigen::Index C = key.values.cols();
  const Eigen::Index r = win.radius, side = win.side();
  const auto delta = static_cast<Eigen::Index>(win.size());

  AffinityMatrix<T> aff{key.height, key.width, win, PixelMatrix<T>::Zero(H * W, delta), {}};
  aff.valid.setZero(H * W, delta);

  for (Eigen::Index y0 = 0; y0 < H; y0 += kRowBlock) {
    const Eigen::Index y1 = std::min(H, y0 + kRowBlock);
    for (Eigen::Index y = y0; y < y1; ++y) {
      const Eigen::Index dy_lo = std::max(-r, -y), dy_hi = std::min(r, H - 1 - y);
      for (Eigen::Index x = 0; x < W; ++x) {
        const Eigen::Index u = y * W + x;
        const Eigen::Index dx_lo = std::max(-r, -x), dx_hi = std::min(r, W - 1 - x);
        const T* q = query.values.row(u).data();
        T* logits = aff.weights.row(u).data();
        std::uint8_t* ok = aff.valid.row(u).data();
        T peak = -std::numeric_limits<T>::infinity();
        for (Eigen::Index dy = dy_lo; dy <= dy_hi; ++dy) {
          const Eigen::Index jrow = (dy + r) * side + r;
          const T* krow = key.values.row((y + dy) * W).data();
          for (Eigen::Index dx = dx_lo; dx <= dx_hi; ++dx) {
            const T l = dot(q, krow + (x + dx) * C);
            logits[jrow + dx] = l;
            ok[jrow + dx] = 1;
            peak = std::max(peak, l);
          }
        }
        T total = 0;
        for (Eigen::Index dy = dy_lo; dy <= dy_hi; ++dy) {
          const Eigen::Index jrow = (dy + r) * side + r;
          for (Eigen::Index dx = dx_lo; dx <= dx_hi; ++dx) {
            const T e = std::exp(logits[jrow + dx] - peak);
            logits[jrow + dx] = e;
            total += e;
          }
        }
        const T inv = T(1) / total;
        for (Eigen::Index dy = dy_lo; dy <= dy_hi; ++dy) {
          const Eigen::Index jrow = (dy + r) * side + r;
          for (Eigen::Index dx = dx_lo; dx <= dx_hi; ++dx) logits[jrow + dx] *= inv;
        }
      }
    }
  }
  return aff;
}

}  // namespace

template <typename T>
AffinityMatrix<T> compute_affinity(const FeatureMap<T>& key, const FeatureMap<T>& query, const WindowSpec& win) {
  check_same_dims(key, query);
  if (win.radius < 0) throw SpecError("window radius must be >= 0");
  // Fixed-size dots for the common embedding widths let the reduction vectorize.
  switch (key.values.cols()) {
    case 16: return affinity_kernel(key, query, win, dot_fixed<T, 16>);
    case 32: return affinity_kernel(key, query, win, dot_fixed<T, 32>);
    default: {
      const Eigen::Index C = key.values.cols();
      return affinity_kernel(key, query, win, [C](const T* a, const T* b) { return dot_dynamic(a, b, C); });
    }
  }
}

template <typename T>
Plane<T> apply_affinity(const AffinityMatrix<T>& aff, const Plane<T>& field) {
  check_field(aff, field);
  const auto H = static_cast<Eigen::Index>(aff.height);
  const auto W = static_cast<Eigen::Index>(aff.width);
  const Eigen::Index r = aff.window.radius, side = aff.window.side();
  Plane<T> out(H, W);
  for (Eigen::Index y = 0; y < H; ++y) {
    const Eigen::Index dy_lo = std::max(-r, -y), dy_hi = std::min(r, H - 1 - y);
    for (Eigen::Index x = 0; x < W; ++x) {
      const Eigen::Index dx_lo = std::max(-r, -x), dx_hi = std::min(r, W - 1 - x);
      const T* a = aff.weights.row(y * W + x).data();
      T s = 0;
      for (Eigen::Index dy = dy_lo; dy <= dy_hi; ++dy) {
        const T* f = field.row(y + dy).data() + x;
        const T* arow = a + (dy + r) * side + r;
        for (Eigen::Index dx = dx_lo; dx <= dx_hi; ++dx) s += arow[dx] * f[dx];
      }
      out(y, x) = s;
    }
  }
  return out;
}

template <typename T>
AffinityGradients<T> affinity_backward(const AffinityMatrix<T>& aff, const FeatureMap<T>& key,
                                       const FeatureMap<T>& query, const Plane<T>& field, const Plane<T>& upstream) {
  check_same_dims(key, query);
  check_field(aff, field);
  if (key.height != aff.height || key.width != aff.width)
    throw DimensionError("affinity_backward: features do not match the recorded affinity");
  if (upstream.rows() != field.rows() || upstream.cols() != field.cols())
    throw DimensionError("affinity_backward: upstream gradient dims do not match");

  const auto H = static_cast<Eigen::Index>(aff.height);
  const auto W = static_cast<Eigen::Index>(aff.width);
  const Eigen::Index C = key.values.cols();
  const Eigen::Index r = aff.window.radius, side = aff.window.side();
  const Plane<T> out = apply_affinity(aff, field);

  AffinityGradients<T> g{PixelMatrix<T>::Zero(H * W, C), PixelMatrix<T>::Zero(H * W, C)};
  for (Eigen::Index y = 0; y < H; ++y) {
    const Eigen::Index dy_lo = std::max(-r, -y), dy_hi = std::min(r, H - 1 - y);
    for (Eigen::Index x = 0; x < W; ++x) {
      const Eigen::Index u = y * W + x;
      const T gu = upstream(y, x);
      if (gu == T(0)) continue;
      const Eigen::Index dx_lo = std::max(-r, -x), dx_hi = std::min(r, W - 1 - x);
      const T* a = aff.weights.row(u).data();
      const T* q = query.values.row(u).data();
      T* dq = g.query.row(u).data();
      for (Eigen::Index dy = dy_lo; dy <= dy_hi; ++dy) {
        for (Eigen::Index dx = dx_lo; dx <= dx_hi; ++dx) {
          const Eigen::Index v = (y + dy) * W + (x + dx);
          // Softmax Jacobian: dL/dlogit = A · g · (field(v) - out(u)).
          const T dlogit = a[(dy + r) * side + (dx + r)] * gu * (field(y + dy, x + dx) - out(y, x));
          const T* k = key.values.row(v).data();
          T* dk = g.key.row(v).data();
          for (Eigen::Index c = 0; c < C; ++c) {
            dq[c] += dlogit * k[c];
            dk[c] += dlogit * q[c];
          }
        }
      }
    }
  }
  return g;
}

template AffinityMatrix<float> compute_affinity(const FeatureMap<float>&, const FeatureMap<float>&, const WindowSpec&);
template AffinityMatrix<double> compute_affinity(const FeatureMap<double>&, const FeatureMap<double>&, const WindowSpec&);
template Plane<float> apply_affinity(const AffinityMatrix<float>&, const Plane<float>&);
template Plane<double> apply_affinity(const AffinityMatrix<double>&, const Plane<double>&);
template AffinityGradients<float> affinity_backward(const AffinityMatrix<float>&, const FeatureMap<float>&,
                                                   const FeatureMap<float>&, const Plane<float>&, const Plane<float>&);
template AffinityGradients<double> affinity_backward(const AffinityMatrix<double>&, const FeatureMap<double>&,
                                                    const FeatureMap<double>&, const Plane<double>&,
                                                    const Plane<double>&);

}  // namespace slicetrack
