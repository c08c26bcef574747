#pragma once

#include "slicetrack/core.hpp"

#include <json.hpp>

#include <cstdint>
#include <utility>

namespace slicetrack {

struct Band {
  float lo = 0.f;
  float hi = 1.f;
};

/// Parameters of a synthetic elliptic-tube phantom. Structure 0 is the
/// structure of interest (its support is the ground truth); the others are
/// distractors drawn underneath it.
struct PhantomSpec {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t depth = 16;
  std::uint64_t rng_seed = 0;
  std::size_t ellipsoid_count = 2;
  double drift = 1.0;               // in-plane center displacement per slice, pixels
  double radius_modulation = 0.1;   // relative amplitude of the smooth radius oscillation
  std::pair<double, double> radius_fraction{0.14, 0.20};  // semi-axes as a fraction of min(H, W)
  Band foreground{0.7f, 1.0f};
  Band background{0.0f, 0.3f};
  Band distractor{0.35f, 0.6f};
  double noise_sigma = 0.02;
  bool taper = false;               // cross-section shrinks to nothing at both ends
  bool touching_distractor = false; // distractor 1 rides along the SOI boundary
  bool require_separation = true;   // foreground and background bands must be disjoint

  void validate() const;
};

void to_json(nlohmann::json& j, const PhantomSpec& s);
void from_json(const nlohmann::json& j, PhantomSpec& s);

struct Phantom {
  Volume volume;
  MaskVolume truth;
};

/// Deterministic in `spec`: the same spec always yields bitwise-identical output.
Phantom synth_generate(const PhantomSpec& spec);

}  // namespace slicetrack
