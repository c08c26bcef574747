#pragma once

#include "slicetrack/core.hpp"

#include <json.hpp>

#include <utility>
#include <vector>

namespace slicetrack {

/// Pixel step (dy, dx).
struct Step {
  int dy = 0;
  int dx = 0;
  friend bool operator==(const Step&, const Step&) = default;
};

/// Geometry of the edge-profile bottleneck: signed directional derivatives for
/// every (scale, direction) pair, softmax-normalized per pixel. When disabled
/// the network sees the raw intensity as a single channel instead.
struct ProfileConfig {
  bool enabled = true;
  std::vector<Step> directions = compass_directions();
  std::vector<int> offsets{1, 2, 4};
  double temperature = 1.0;

  std::size_t channels() const { return enabled ? directions.size() * offsets.size() : 1; }
  int max_offset() const;
  void validate() const;

  /// E, NE, N, NW, W, SW, S, SE with y pointing down. Rotating an image by 90°
  /// counter-clockwise shifts this index by 2.
  static std::vector<Step> compass_directions();

  friend bool operator==(const ProfileConfig&, const ProfileConfig&) = default;
};

void to_json(nlohmann::json& j, const ProfileConfig& c);
void from_json(const nlohmann::json& j, ProfileConfig& c);

/// Per-pixel simplex over d·s channels, stored (H·W)×(d·s); channel index is
/// scale·d + direction.
template <typename T>
struct EdgeProfileMap {
  std::size_t height = 0;
  std::size_t width = 0;
  PixelMatrix<T> values;

  std::size_t channels() const { return static_cast<std::size_t>(values.cols()); }
};

/// The network input for `slice`: the edge profile when enabled, otherwise the
/// raw intensities as one channel.
template <typename T>
EdgeProfileMap<T> compute_edge_profile(const Plane<T>& slice, const ProfileConfig& cfg);

}  // namespace slicetrack
