#include "slicetrack/edge_profile.hpp"

#include <algorithm>
#include <cmath>

namespace slicetrack {

std::vector<Step> ProfileConfig::compass_directions() {
  return {{0, 1}, {-1, 1}, {-1, 0}, {-1, -1}, {0, -1}, {1, -1}, {1, 0}, {1, 1}};
}

int ProfileConfig::max_offset() const {
  return offsets.empty() ? 0 : *std::max_element(offsets.begin(), offsets.end());
}

void ProfileConfig::validate() const {
  if (!enabled) return;
  if (directions.size() < 2) throw SpecError("edge profile needs at least 2 directions");
  if (offsets.empty()) throw SpecError("edge profile needs at least 1 scale");
  for (std::size_t i = 0; i < offsets.size(); ++i) {
    if (offsets[i] <= 0) throw SpecError("edge profile offsets must be positive");
    if (i > 0 && offsets[i] <= offsets[i - 1]) throw SpecError("edge profile offsets must be strictly increasing");
  }
  for (std::size_t i = 0; i < directions.size(); ++i) {
    if (directions[i] == Step{}) throw SpecError("edge profile direction cannot be zero");
    for (std::size_t j = 0; j < i; ++j)
      if (directions[i] == directions[j]) throw SpecError("edge profile directions must be distinct");
  }
  if (!(temperature > 0.0) || !std::isfinite(temperature))
    throw SpecError("edge profile temperature must be positive");
}

void to_json(nlohmann::json& j, const ProfileConfig& c) {
  nlohmann::json dirs = nlohmann::json::array();
  for (const auto& d : c.directions) dirs.push_back({d.dy, d.dx});
  j = nlohmann::json{{"enabled", c.enabled}, {"directions", dirs}, {"offsets", c.offsets},
                     {"temperature", c.temperature}};
}

void from_json(const nlohmann::json& j, ProfileConfig& c) {
  ProfileConfig d;
  c.enabled = j.value("enabled", d.enabled);
  if (j.contains("directions")) {
    c.directions.clear();
    for (const auto& e : j.at("directions")) c.directions.push_back({e.at(0).get<int>(), e.at(1).get<int>()});
  } else {
    c.directions = d.directions;
  }
  c.offsets = j.value("offsets", d.offsets);
  c.temperature = j.value("temperature", d.temperature);
  c.validate();
}

template <typename T>
EdgeProfileMap<T> compute_edge_profile(const Plane<T>& slice, const ProfileConfig& cfg) {
  cfg.validate();
  const auto H = slice.rows();
  const auto W = slice.cols();
  EdgeProfileMap<T> out{static_cast<std::size_t>(H), static_cast<std::size_t>(W), {}};
  if (!cfg.enabled) {
    out.values = Eigen::Map<const PixelMatrix<T>>(slice.data(), H * W, 1);
    return out;
  }
  const int reach = cfg.max_offset();
  if (H < reach + 1 || W < reach + 1)
    throw DimensionError("slice " + std::to_string(H) + "x" + std::to_string(W) +
                         " too small for edge-profile offset " + std::to_string(reach));

  const auto d = static_cast<Eigen::Index>(cfg.directions.size());
  const auto C = d * static_cast<Eigen::Index>(cfg.offsets.size());
  out.values.resize(H * W, C);

  // Precompute 1/(k·|u|/temperature) per channel.
  std::vector<T> inv_len(static_cast<std::size_t>(C));
  for (std::size_t si = 0; si < cfg.offsets.size(); ++si)
    for (Eigen::Index di = 0; di < d; ++di) {
      const auto& u = cfg.directions[static_cast<std::size_t>(di)];
      const double len = cfg.offsets[si] * std::sqrt(double(u.dy * u.dy + u.dx * u.dx));
      inv_len[si * d + di] = static_cast<T>(1.0 / (len * cfg.temperature));
    }

  for (Eigen::Index y = 0; y < H; ++y) {
    for (Eigen::Index x = 0; x < W; ++x) {
      auto row = out.values.row(y * W + x);
      const T center = slice(y, x);
      for (std::size_t si = 0; si < cfg.offsets.size(); ++si) {
        const int k = cfg.offsets[si];
        for (Eigen::Index di = 0; di < d; ++di) {
          const auto& u = cfg.directions[static_cast<std::size_t>(di)];
          const auto yy = std::clamp<Eigen::Index>(y + k * u.dy, 0, H - 1);
          const auto xx = std::clamp<Eigen::Index>(x + k * u.dx, 0, W - 1);
          const auto c = static_cast<Eigen::Index>(si) * d + di;
          row(c) = (slice(yy, xx) - center) * inv_len[static_cast<std::size_t>(c)];
        }
      }
      const T peak = row.maxCoeff();
      row = (row.array() - peak).exp();
      row /= row.sum();
    }
  }
  return out;
}

template EdgeProfileMap<float> compute_edge_profile(const Plane<float>&, const ProfileConfig&);
template EdgeProfileMap<double> compute_edge_profile(const Plane<double>&, const ProfileConfig&);

}  // namespace slicetrack
