#include "slicetrack/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace slicetrack {

void PhantomSpec::validate() const {
  if (height < 2 || width < 2 || depth < 2) throw SpecError("phantom dims must be at least 2x2x2");
  if (ellipsoid_count < 1) throw SpecError("phantom needs at least one ellipsoid");
  if (touching_distractor && ellipsoid_count < 2)
    throw SpecError("a touching distractor needs ellipsoid_count >= 2");
  if (!(drift >= 0.0)) throw SpecError("drift amplitude must be >= 0");
  if (!(radius_modulation >= 0.0 && radius_modulation < 1.0))
    throw SpecError("radius modulation must lie in [0, 1)");
  if (!(radius_fraction.first > 0.0 && radius_fraction.first <= radius_fraction.second))
    throw SpecError("radius fraction range is invalid");
  if (!(noise_sigma >= 0.0)) throw SpecError("noise sigma must be >= 0");
  for (const Band& b : {foreground, background, distractor})
    if (!(b.lo >= 0.f && b.hi <= 1.f && b.lo <= b.hi)) throw SpecError("intensity bands must lie within [0,1]");
  if (require_separation && !(foreground.hi < background.lo || background.hi < foreground.lo))
    throw SpecError("foreground and background bands overlap");

  // The structure of interest must stay inside the grid for every slice at the
  // largest radius the spec allows.
  const double rmax = radius_fraction.second * double(std::min(height, width)) * (1.0 + radius_modulation);
  const double travel = drift * double(depth - 1);
  if (2.0 * rmax + travel > double(std::min(height, width) - 1))
    throw SpecError("ellipsoid does not fit in the phantom dims");
}

void to_json(nlohmann::json& j, const PhantomSpec& s) {
  j = nlohmann::json{{"height", s.height},
                     {"width", s.width},
                     {"depth", s.depth},
                     {"rng_seed", s.rng_seed},
                     {"ellipsoid_count", s.ellipsoid_count},
                     {"drift", s.drift},
                     {"radius_modulation", s.radius_modulation},
                     {"radius_fraction", {s.radius_fraction.first, s.radius_fraction.second}},
                     {"foreground", {s.foreground.lo, s.foreground.hi}},
                     {"background", {s.background.lo, s.background.hi}},
                     {"distractor", {s.distractor.lo, s.distractor.hi}},
                     {"noise_sigma", s.noise_sigma},
                     {"taper", s.taper},
                     {"touching_distractor", s.touching_distractor},
                     {"require_separation", s.require_separation}};
}

void from_json(const nlohmann::json& j, PhantomSpec& s) {
  PhantomSpec d;
  auto band = [&](const char* key, Band fallback) {
    if (!j.contains(key)) return fallback;
    const auto& a = j.at(key);
    if (!a.is_array() || a.size() != 2) throw SpecError(std::string("band '") + key + "' must be [lo, hi]");
    return Band{a[0].get<float>(), a[1].get<float>()};
  };
  s.height = j.value("height", d.height);
  s.width = j.value("width", d.width);
  s.depth = j.value("depth", d.depth);
  s.rng_seed = j.value("rng_seed", d.rng_seed);
  s.ellipsoid_count = j.value("ellipsoid_count", d.ellipsoid_count);
  s.drift = j.value("drift", d.drift);
  s.radius_modulation = j.value("radius_modulation", d.radius_modulation);
  if (j.contains("radius_fraction")) {
    const auto& a = j.at("radius_fraction");
    s.radius_fraction = {a.at(0).get<double>(), a.at(1).get<double>()};
  } else {
    s.radius_fraction = d.radius_fraction;
  }
  s.foreground = band("foreground", d.foreground);
  s.background = band("background", d.background);
  s.distractor = band("distractor", d.distractor);
  s.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  s.taper = j.value("taper", d.taper);
  s.touching_distractor = j.value("touching_distractor", d.touching_distractor);
  s.require_separation = j.value("require_separation", d.require_separation);
}

namespace {

struct Ellipse {
  double cy, cx;   // center
  double a, b;     // semi-axes
  double angle;    // orientation of the a-axis

  bool contains(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (c * dx + s * dy) / a;
    const double v = (-s * dx + c * dy) / b;
    return u * u + v * v <= 1.0;
  }
  // Distance from the center to the supporting line with outward normal (ny, nx).
  double support(double ny, double nx) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double along_a = c * nx + s * ny;
    const double along_b = -s * nx + c * ny;
    return std::sqrt(a * a * along_a * along_a + b * b * along_b * along_b);
  }
};

/// Smooth texture in [-1, 1]: a sum of two low-frequency plane waves.
struct Texture {
  std::array<double, 2> ky, kx, kz, phase;
  double operator()(double y, double x, double z) const {
    double sum = 0.0;
    for (int i = 0; i < 2; ++i) sum += std::sin(ky[i] * y + kx[i] * x + kz[i] * z + phase[i]);
    return 0.5 * sum;
  }
};

Texture random_texture(std::mt19937_64& rng, double extent) {
  std::uniform_real_distribution<double> freq(0.5, 2.0);
  std::uniform_real_distribution<double> turn(0.0, 2.0 * std::numbers::pi);
  Texture t{};
  for (int i = 0; i < 2; ++i) {
    const double k = 2.0 * std::numbers::pi * freq(rng) / extent;
    const double dir = turn(rng);
    t.ky[i] = k * std::sin(dir);
    t.kx[i] = k * std::cos(dir);
    t.kz[i] = 0.3 * k * std::cos(turn(rng));
    t.phase[i] = turn(rng);
  }
  return t;
}

struct Tube {
  Ellipse base;         // cross-section at the middle slice
  double vy = 0, vx = 0;  // center velocity, pixels per slice
  double mod_amp = 0, mod_freq = 0, mod_phase = 0;
  float level = 0.f;

  Ellipse at(double z, double z_mid, double half_extent, bool taper) const {
    Ellipse e = base;
    e.cy += vy * (z - z_mid);
    e.cx += vx * (z - z_mid);
    double scale = 1.0 + mod_amp * std::sin(mod_freq * z + mod_phase);
    if (taper) {
      const double t = half_extent > 0 ? (z - z_mid) / half_extent : 0.0;
      scale *= std::sqrt(std::max(0.0, 1.0 - t * t));
    }
    e.a *= scale;
    e.b *= scale;
    return e;
  }
};

}  // namespace

Phantom synth_generate(const PhantomSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.rng_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> turn(0.0, 2.0 * std::numbers::pi);

  const double H = double(spec.height), W = double(spec.width);
  const double extent = std::min(H, W);
  const double z_mid = 0.5 * double(spec.depth - 1);
  const double half_extent = z_mid;
  auto radius = [&] {
    return extent * (spec.radius_fraction.first +
                     (spec.radius_fraction.second - spec.radius_fraction.first) * unit(rng));
  };

  // Structure of interest.
  Tube soi;
  soi.base.a = radius();
  soi.base.b = radius();
  soi.base.angle = turn(rng);
  const double heading = turn(rng);
  soi.vy = spec.drift * std::sin(heading);
  soi.vx = spec.drift * std::cos(heading);
  soi.mod_amp = spec.radius_modulation;
  soi.mod_freq = 2.0 * std::numbers::pi / (double(spec.depth) * (1.0 + unit(rng)));
  soi.mod_phase = turn(rng);
  {
    const double rmax = std::max(soi.base.a, soi.base.b) * (1.0 + soi.mod_amp);
    const double span_y = std::abs(soi.vy) * half_extent;
    const double span_x = std::abs(soi.vx) * half_extent;
    const double ylo = rmax + span_y, yhi = H - 1.0 - rmax - span_y;
    const double xlo = rmax + span_x, xhi = W - 1.0 - rmax - span_x;
    soi.base.cy = ylo + (yhi - ylo) * unit(rng);
    soi.base.cx = xlo + (xhi - xlo) * unit(rng);
  }
  soi.level = spec.foreground.lo;

  std::vector<Tube> distractors;
  for (std::size_t i = 1; i < spec.ellipsoid_count; ++i) {
    Tube t;
    t.base.a = 0.8 * radius();
    t.base.b = 0.8 * radius();
    t.base.angle = turn(rng);
    t.base.cy = H * unit(rng);
    t.base.cx = W * unit(rng);
    const double dir = turn(rng);
    const double speed = spec.drift * unit(rng);
    t.vy = speed * std::sin(dir);
    t.vx = speed * std::cos(dir);
    t.level = spec.distractor.lo + (spec.distractor.hi - spec.distractor.lo) * float(unit(rng));
    distractors.push_back(t);
  }
  const Texture bg_tex = random_texture(rng, extent);
  const Texture fg_tex = random_texture(rng, extent);
  std::normal_distribution<double> noise(0.0, 1.0);

  std::vector<float> voxels(spec.height * spec.width * spec.depth);
  std::vector<std::uint8_t> truth(voxels.size(), 0);
  const double bg_span = spec.background.hi - spec.background.lo;
  const double fg_span = spec.foreground.hi - spec.foreground.lo;

  for (std::size_t z = 0; z < spec.depth; ++z) {
    const double zd = double(z);
    const Ellipse soi_z = soi.at(zd, z_mid, half_extent, spec.taper);
    std::vector<Ellipse> dis_z;
    for (std::size_t i = 0; i < distractors.size(); ++i) {
      Ellipse e = distractors[i].at(zd, z_mid, half_extent, false);
      if (i == 0 && spec.touching_distractor) {
        // Ride along the SOI flank, perpendicular to the drift, overlapping
        // it slightly so the two regions always share a boundary.
        const double ny = std::cos(heading), nx = -std::sin(heading);
        const double r = std::min(e.a, e.b);
        e.a = e.b = r;
        const double reach = soi_z.support(ny, nx) + 0.6 * r;
        e.cy = soi_z.cy + reach * ny;
        e.cx = soi_z.cx + reach * nx;
      }
      dis_z.push_back(e);
    }
    for (std::size_t y = 0; y < spec.height; ++y) {
      for (std::size_t x = 0; x < spec.width; ++x) {
        const double yd = double(y), xd = double(x);
        double value;
        const std::size_t idx = (z * spec.height + y) * spec.width + x;
        if (soi_z.a > 0 && soi_z.contains(yd, xd)) {
          value = spec.foreground.lo + fg_span * (0.5 + 0.5 * fg_tex(yd, xd, zd));
          truth[idx] = 1;
        } else {
          value = spec.background.lo + bg_span * (0.5 + 0.5 * bg_tex(yd, xd, zd));
          for (std::size_t i = dis_z.size(); i-- > 0;) {
            if (dis_z[i].contains(yd, xd)) {
              value = distractors[i].level;
              break;
            }
          }
        }
        if (spec.noise_sigma > 0) value += spec.noise_sigma * noise(rng);
        voxels[idx] = static_cast<float>(std::clamp(value, 0.0, 1.0));
      }
    }
  }

  return {Volume(spec.height, spec.width, spec.depth, std::move(voxels)),
          MaskVolume(spec.height, spec.width, spec.depth, std::move(truth))};
}

}  // namespace slicetrack
