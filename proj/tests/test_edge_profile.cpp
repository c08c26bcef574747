#include "slicetrack/edge_profile.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace slicetrack;

namespace {

constexpr std::size_t kE = 0, kN = 2, kS = 6;

// Counter-clockwise quarter turn with y pointing down: R(i, j) = I(j, n-1-i).
template <typename T>
Plane<T> rotate_ccw(const Plane<T>& p) {
  return p.transpose().colwise().reverse();
}

}  // namespace

TEST_CASE("constant slice gives a uniform profile") {
  const ProfileConfig cfg;
  const auto m = compute_edge_profile<float>(SlicePlane::Constant(9, 7, 0.4f), cfg);
  CHECK(m.channels() == 24);
  CHECK(m.values.rows() == 63);
  CHECK((m.values.array() - 1.f / 24.f).abs().maxCoeff() < 1e-7f);
}

TEST_CASE("per-pixel simplex and additive-shift invariance on random slices") {
  std::mt19937_64 rng(1);
  const ProfileConfig cfg;
  for (int i = 0; i < 50; ++i) {
    const SlicePlane s = testing::random_plane<float>(rng, 12, 10, 0.f, 0.7f);
    const auto a = compute_edge_profile<float>(s, cfg);
    CHECK(a.values.minCoeff() >= 0.f);
    CHECK(((a.values.rowwise().sum().array() - 1.f).abs().maxCoeff()) <= 1e-6f);
    const SlicePlane shifted = (s.array() + 0.3f).matrix();
    const auto b = compute_edge_profile<float>(shifted, cfg);
    CHECK((a.values - b.values).cwiseAbs().maxCoeff() <= 1e-6f);
  }
}

TEST_CASE("simplex holds for large-magnitude inputs") {
  std::mt19937_64 rng(2);
  const SlicePlane s = testing::random_plane<float>(rng, 8, 8, -500.f, 500.f);
  const auto a = compute_edge_profile<float>(s, ProfileConfig{});
  CHECK(a.values.allFinite());
  CHECK(((a.values.rowwise().sum().array() - 1.f).abs().maxCoeff()) <= 1e-6f);
}

TEST_CASE("vertical step edge favours the +x channel") {
  SlicePlane s = SlicePlane::Zero(8, 8);
  s.rightCols(4).setOnes();
  const auto m = compute_edge_profile<float>(s, ProfileConfig{});
  for (Eigen::Index y = 0; y < 8; ++y) {
    const auto row = m.values.row(y * 8 + 3);  // left of the edge
    CHECK(row(kE) > row(kN));
    CHECK(row(kE) > row(kS));
  }
}

TEST_CASE("hand-computed channel values at a step-edge pixel") {
  SlicePlane s = SlicePlane::Zero(8, 8);
  s.rightCols(4).setOnes();
  const ProfileConfig cfg;
  const auto m = compute_edge_profile<double>(s.cast<double>(), cfg);
  // Pixel (4, 3): derivatives are 1/(k·|u|) for steps that land in x >= 4, else 0.
  const auto dirs = ProfileConfig::compass_directions();
  std::vector<double> logits;
  for (int k : cfg.offsets)
    for (const Step& u : dirs) {
      const int x = std::clamp(3 + k * u.dx, 0, 7);
      const double len = std::hypot(double(u.dy), double(u.dx)) * k;
      logits.push_back((x >= 4 ? 1.0 : 0.0) / len);
    }
  double total = 0;
  for (double l : logits) total += std::exp(l);
  for (std::size_t c = 0; c < logits.size(); ++c)
    CHECK(m.values(4 * 8 + 3, Eigen::Index(c)) == doctest::Approx(std::exp(logits[c]) / total).epsilon(1e-12));
}

TEST_CASE("quarter-turn equivariance under the compass set") {
  std::mt19937_64 rng(3);
  const ProfileConfig cfg;
  const std::size_t n = 11, d = cfg.directions.size();
  const Plane<double> s = testing::random_plane<double>(rng, n, n);
  const auto a = compute_edge_profile<double>(s, cfg);
  const auto b = compute_edge_profile<double>(rotate_ccw(s), cfg);
  double worst = 0;
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const std::size_t i = n - 1 - x, j = y;  // where (y, x) lands after the turn
      for (std::size_t sc = 0; sc < cfg.offsets.size(); ++sc)
        for (std::size_t u = 0; u < d; ++u) {
          const double va = a.values(Eigen::Index(y * n + x), Eigen::Index(sc * d + u));
          const double vb = b.values(Eigen::Index(i * n + j), Eigen::Index(sc * d + (u + 2) % d));
          worst = std::max(worst, std::abs(va - vb));
        }
    }
  CHECK(worst < 1e-12);
}

TEST_CASE("intensity scaling changes the profile") {
  SlicePlane s = SlicePlane::Zero(8, 8);
  s.rightCols(4).setConstant(0.5f);
  const auto a = compute_edge_profile<float>(s, ProfileConfig{});
  const auto b = compute_edge_profile<float>((s * 2.f).eval(), ProfileConfig{});
  CHECK((a.values - b.values).cwiseAbs().maxCoeff() > 1e-3f);
}

TEST_CASE("temperature sharpens the softmax") {
  SlicePlane s = SlicePlane::Zero(8, 8);
  s.rightCols(4).setOnes();
  ProfileConfig cold;
  cold.temperature = 0.25;
  const auto warm = compute_edge_profile<float>(s, ProfileConfig{});
  const auto sharp = compute_edge_profile<float>(s, cold);
  CHECK(sharp.values(3, kE) > warm.values(3, kE));
}

TEST_CASE("slices smaller than the largest offset are rejected") {
  CHECK_THROWS_AS(compute_edge_profile<float>(SlicePlane::Zero(4, 9), ProfileConfig{}), DimensionError);
  CHECK_NOTHROW(compute_edge_profile<float>(SlicePlane::Zero(5, 5), ProfileConfig{}));
}

TEST_CASE("disabled profile passes raw intensity through") {
  std::mt19937_64 rng(4);
  const SlicePlane s = testing::random_plane<float>(rng, 6, 5);
  ProfileConfig cfg;
  cfg.enabled = false;
  const auto m = compute_edge_profile<float>(s, cfg);
  REQUIRE(m.channels() == 1);
  for (Eigen::Index p = 0; p < s.size(); ++p) CHECK(m.values(p, 0) == s.data()[p]);
}

TEST_CASE("profile config validation and JSON") {
  ProfileConfig c;
  CHECK_NOTHROW(c.validate());
  c.offsets = {1, 1, 2};
  CHECK_THROWS_AS(c.validate(), SpecError);
  c = {};
  c.directions = {{0, 1}};
  CHECK_THROWS_AS(c.validate(), SpecError);
  c = {};
  c.directions = {{0, 1}, {0, 1}};
  CHECK_THROWS_AS(c.validate(), SpecError);
  c = {};
  c.temperature = 0;
  CHECK_THROWS_AS(c.validate(), SpecError);

  ProfileConfig custom;
  custom.offsets = {1, 3};
  custom.temperature = 0.5;
  CHECK(nlohmann::json(custom).get<ProfileConfig>() == custom);
}
