#pragma once

#include "slicetrack/core.hpp"
#include "slicetrack/eval.hpp"
#include "slicetrack/phantom.hpp"
#include "slicetrack/propagator.hpp"
#include "slicetrack/trainer.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

namespace testing {

using namespace slicetrack;

inline Volume random_volume(std::mt19937_64& rng, std::size_t h, std::size_t w, std::size_t d) {
  std::uniform_real_distribution<float> u(0.f, 1.f);
  std::vector<float> v(h * w * d);
  for (auto& x : v) x = u(rng);
  return Volume(h, w, d, std::move(v));
}

inline MaskPlane random_mask(std::mt19937_64& rng, std::size_t h, std::size_t w, double density = 0.3) {
  std::bernoulli_distribution b(density);
  MaskPlane m(h, w);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = b(rng) ? 1 : 0;
  return m;
}

template <typename T>
Plane<T> random_plane(std::mt19937_64& rng, std::size_t h, std::size_t w, T lo = 0, T hi = 1) {
  std::uniform_real_distribution<T> u(lo, hi);
  Plane<T> p(h, w);
  for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = u(rng);
  return p;
}

template <typename T>
FeatureMap<T> random_features(std::mt19937_64& rng, std::size_t h, std::size_t w, std::size_t c, T scale = 1) {
  std::uniform_real_distribution<T> u(-scale, scale);
  FeatureMap<T> f{h, w, PixelMatrix<T>(h * w, c)};
  for (Eigen::Index i = 0; i < f.values.size(); ++i) f.values.data()[i] = u(rng);
  return f;
}

/// True when two forward passes disagree on the sign of any ReLU unit. Central
/// differences straddling such a kink do not estimate the derivative.
template <typename T>
bool relu_pattern_differs(const ForwardTape<T>& a, const ForwardTape<T>& b) {
  for (std::size_t l = 0; l < a.relu_outputs.size(); ++l)
    if (a.relu_outputs[l].size() && ((a.relu_outputs[l].array() > 0) != (b.relu_outputs[l].array() > 0)).any())
      return true;
  return false;
}

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/// Every sign the reconstruction loss branches on: ReLU units of both network
/// passes and the residual S2 - Ŝ2 under |·|.
inline std::vector<bool> loss_kink_signature(const Network<double>& net, const Plane<double>& first,
                                             const Plane<double>& second, const ProfileConfig& profile,
                                             const WindowSpec& win) {
  ForwardTape<double> kt, qt;
  const auto key = forward(net, compute_edge_profile(first, profile), &kt);
  const auto query = forward(net, compute_edge_profile(second, profile), &qt);
  const Plane<double> residual = second - apply_affinity(compute_affinity(key, query, win), first);
  std::vector<bool> sig;
  for (const auto* tape : {&kt, &qt})
    for (const auto& r : tape->relu_outputs)
      for (Eigen::Index i = 0; i < r.size(); ++i) sig.push_back(r.data()[i] > 0);
  for (Eigen::Index i = 0; i < residual.size(); ++i) sig.push_back(residual.data()[i] > 0);
  return sig;
}

struct GradientCheck {
  double worst = 0;
  int measured = 0;
  int redrawn = 0;
};

/// Analytic vs central differences of the reconstruction loss on a random 6×6
/// pair, 2-block net, r = 1. Draws whose ±eps evaluations differ in any kink
/// sign are redrawn; the derivative is undefined across them.
inline GradientCheck composite_gradient_check(std::uint64_t seed, int samples, double eps = 1e-4) {
  std::mt19937_64 rng(seed);
  const ProfileConfig profile;
  const WindowSpec win{1};
  NetworkConfig nc;
  nc.input_channels = profile.channels();
  nc.base_filters = 4;
  nc.embedding_channels = 3;
  nc.residual_blocks = 2;
  nc.block_widths = {4, 5};
  nc.rng_seed = seed;
  auto net = init_network<double>(nc);
  std::uniform_real_distribution<double> bias(-0.1, 0.1);
  for (auto& l : net.layers)
    for (auto& b : l.bias) b = bias(rng);
  const Plane<double> first = random_plane<double>(rng, 6, 6);
  Plane<double> second = first;
  std::normal_distribution<double> jitter(0.0, 0.15);
  for (auto& v : second.reshaped()) v = std::clamp(v + jitter(rng), 0.0, 1.0);

  const auto analytic = reconstruction_loss(net, first, second, profile, win).grads;
  std::uniform_int_distribution<std::size_t> pick(0, net.parameter_count() - 1);
  GradientCheck out;
  while (out.measured < samples && out.redrawn < 10 * samples) {
    const std::size_t i = pick(rng);
    const double keep = net.parameter(i);
    net.parameter(i) = keep + eps;
    const double up = reconstruction_loss_value(net, first, second, profile, win);
    const auto up_sig = loss_kink_signature(net, first, second, profile, win);
    net.parameter(i) = keep - eps;
    const double down = reconstruction_loss_value(net, first, second, profile, win);
    const auto down_sig = loss_kink_signature(net, first, second, profile, win);
    net.parameter(i) = keep;
    if (up_sig != down_sig) {
      ++out.redrawn;
      continue;
    }
    out.worst = std::max(out.worst, relative_error(analytic.parameter(i), (up - down) / (2 * eps)));
    ++out.measured;
  }
  return out;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("slicetrack-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Affinity stub: every row copies the pixel at the same position.
class IdentityProvider : public CorrespondenceProvider {
 public:
  FeatureMap<float> embed(const SlicePlane& s) const override {
    return {std::size_t(s.rows()), std::size_t(s.cols()), PixelMatrix<float>::Zero(s.size(), 1)};
  }
  AffinityMatrix<float> affinity(const FeatureMap<float>& source, const FeatureMap<float>&,
                                 const WindowSpec& win) const override {
    AffinityMatrix<float> a = compute_affinity(source, source, win);
    a.weights.setZero();
    a.weights.col(static_cast<Eigen::Index>(win.size() / 2)).setOnes();
    return a;
  }
};

/// Affinity stub: equal weight on every in-bounds window entry.
class UniformProvider : public CorrespondenceProvider {
 public:
  FeatureMap<float> embed(const SlicePlane& s) const override {
    return {std::size_t(s.rows()), std::size_t(s.cols()), PixelMatrix<float>::Zero(s.size(), 1)};
  }
};

/// out(y, x) = mask(y - dy, x - dx); zero where the source falls outside.
class ShiftProvider : public CorrespondenceProvider {
 public:
  ShiftProvider(int dy, int dx) : dy_(dy), dx_(dx) {}
  FeatureMap<float> embed(const SlicePlane& s) const override {
    return {std::size_t(s.rows()), std::size_t(s.cols()), PixelMatrix<float>::Zero(s.size(), 1)};
  }
  AffinityMatrix<float> affinity(const FeatureMap<float>& source, const FeatureMap<float>&,
                                 const WindowSpec& win) const override {
    AffinityMatrix<float> a = compute_affinity(source, source, win);
    a.weights.setZero();
    const auto j = (-dy_ + win.radius) * win.side() + (-dx_ + win.radius);
    for (Eigen::Index u = 0; u < a.weights.rows(); ++u)
      if (a.valid(u, j)) a.weights(u, j) = 1.f;
    return a;
  }

 private:
  int dy_, dx_;
};

inline MaskPlane box(std::size_t h, std::size_t w, int y0, int x0, int rows, int cols) {
  MaskPlane m = MaskPlane::Zero(h, w);
  m.block(y0, x0, rows, cols).setOnes();
  return m;
}

/// Values drawn from `inside` on the mask and from `outside` elsewhere.
inline SlicePlane banded_slice(std::mt19937_64& rng, const MaskPlane& m, Band inside, Band outside) {
  std::uniform_real_distribution<float> in(inside.lo, inside.hi), out(outside.lo, outside.hi);
  SlicePlane s(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = m.data()[i] ? in(rng) : out(rng);
  return s;
}

/// The shipped desk training config.
inline TrainConfig desk_train_config() {
  std::ifstream in(std::filesystem::path(SLICETRACK_SOURCE_DIR) / "configs" / "train_desk.json");
  return nlohmann::json::parse(in).get<TrainConfig>();
}

/// Ten held-out phantoms seeded 5000 + i; `leak` adds a distractor touching the SOI.
inline std::vector<EvalCase> held_out_cases(bool leak) {
  std::vector<EvalCase> cases;
  for (int i = 0; i < 10; ++i) {
    PhantomSpec s;
    s.rng_seed = 5000 + i;
    s.touching_distractor = leak;
    auto p = synth_generate(s);
    cases.push_back({"phantom-" + std::to_string(i), std::move(p.volume), std::move(p.truth)});
  }
  return cases;
}

inline EvalMethod network_method(std::shared_ptr<const CorrespondenceProvider> provider, bool verification) {
  PropagateOptions o;
  o.verification = verification;
  return {verification ? "verify" : "no-verify", true, verification,
          [provider, o](const Volume& v, const MaskPlane& seed, std::size_t k) {
            return propagate_volume(*provider, v, seed, k, o).masks;
          }};
}

}  // namespace testing
