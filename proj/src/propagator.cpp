#include "slicetrack/propagator.hpp"

#include "slicetrack/edge_profile.hpp"
#include "slicetrack/volume_ops.hpp"

#include <chrono>

namespace slicetrack {

void PropagateOptions::validate() const {
  if (!(threshold > 0.0 && threshold < 1.0)) throw SpecError("threshold must lie in (0, 1)");
  if (dilation_radius < 1) throw SpecError("dilation radius must be >= 1");
  if (window.radius < 0) throw SpecError("window radius must be >= 0");
}

void to_json(nlohmann::json& j, const PropagateOptions& o) {
  j = nlohmann::json{{"threshold", o.threshold},       {"verification", o.verification},
                     {"dilation_radius", o.dilation_radius}, {"stop_on_empty", o.stop_on_empty},
                     {"window_radius", o.window.radius}, {"edge_profile", o.edge_profile}};
}

void from_json(const nlohmann::json& j, PropagateOptions& o) {
  PropagateOptions d;
  o.threshold = j.value("threshold", d.threshold);
  o.verification = j.value("verification", d.verification);
  o.dilation_radius = j.value("dilation_radius", d.dilation_radius);
  o.stop_on_empty = j.value("stop_on_empty", d.stop_on_empty);
  o.window.radius = j.value("window_radius", d.window.radius);
  o.edge_profile = j.value("edge_profile", d.edge_profile);
  o.validate();
}

MaskPlane dilate_mask(const MaskPlane& m, int radius) {
  if (radius < 1) throw SpecError("dilation radius must be >= 1");
  const Eigen::Index H = m.rows(), W = m.cols();
  // Separable: a square element is a horizontal then a vertical line element.
  auto line_pass = [radius](const MaskPlane& in, bool horizontal) {
    MaskPlane out(in.rows(), in.cols());
    const Eigen::Index lines = horizontal ? in.rows() : in.cols();
    const Eigen::Index len = horizontal ? in.cols() : in.rows();
    std::vector<int> prefix(static_cast<std::size_t>(len) + 1);
    for (Eigen::Index l = 0; l < lines; ++l) {
      for (Eigen::Index i = 0; i < len; ++i)
        prefix[i + 1] = prefix[i] + (horizontal ? in(l, i) : in(i, l));
      for (Eigen::Index i = 0; i < len; ++i) {
        const Eigen::Index lo = std::max<Eigen::Index>(0, i - radius);
        const Eigen::Index hi = std::min<Eigen::Index>(len, i + radius + 1);
        const std::uint8_t hit = prefix[hi] - prefix[lo] > 0 ? 1 : 0;
        (horizontal ? out(l, i) : out(i, l)) = hit;
      }
    }
    return out;
  };
  if (H == 0 || W == 0) return m;
  return line_pass(line_pass(m, true), false);
}

std::optional<RegionStats> region_stats(const MaskPlane& mask, const SlicePlane& slice, int dilation_radius) {
  if (mask.rows() != slice.rows() || mask.cols() != slice.cols())
    throw DimensionError("region_stats: mask and slice dims differ");
  const MaskPlane grown = dilate_mask(mask, dilation_radius);
  RegionStats s;
  double pos = 0.0, neg = 0.0;
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    if (mask.data()[i]) {
      pos += slice.data()[i];
      ++s.positive_count;
    } else if (grown.data()[i]) {
      neg += slice.data()[i];
      ++s.negative_count;
    }
  }
  if (s.positive_count == 0 || s.negative_count == 0) return std::nullopt;
  s.p = pos / double(s.positive_count);
  s.n = neg / double(s.negative_count);
  return s;
}

MaskPlane verify_mask(const MaskPlane& proposed, const SlicePlane& next_slice, const RegionStats& stats) {
  if (proposed.rows() != next_slice.rows() || proposed.cols() != next_slice.cols())
    throw DimensionError("verify_mask: mask and slice dims differ");
  MaskPlane out(proposed.rows(), proposed.cols());
  for (Eigen::Index i = 0; i < proposed.size(); ++i) {
    const double s = next_slice.data()[i];
    out.data()[i] = proposed.data()[i] && std::abs(s - stats.p) < std::abs(s - stats.n) ? 1 : 0;
  }
  return out;
}

NetworkCorrespondence::NetworkCorrespondence(std::shared_ptr<const Network<float>> net, ProfileConfig profile)
    : net_(std::move(net)), profile_(std::move(profile)) {
  require_compatible(*net_, profile_);
}

std::shared_ptr<NetworkCorrespondence> NetworkCorrespondence::from_checkpoint(const Checkpoint& ck) {
  return std::make_shared<NetworkCorrespondence>(std::make_shared<const Network<float>>(ck.network), ck.profile);
}

FeatureMap<float> NetworkCorrespondence::embed(const SlicePlane& slice) const {
  return forward(*net_, compute_edge_profile(slice, profile_));
}

void require_matching_mode(const CorrespondenceProvider& provider, const PropagateOptions& opts) {
  if (const auto* net = dynamic_cast<const NetworkCorrespondence*>(&provider)) {
    if (net->profile().enabled != opts.edge_profile)
      throw ConfigMismatchError(opts.edge_profile
                                    ? "edge profile requested but the checkpoint was trained on raw intensities"
                                    : "raw-intensity input requested but the checkpoint expects edge profiles");
  }
}

StepResult propagate_step(const CorrespondenceProvider& provider, const FeatureMap<float>& source_features,
                          const FeatureMap<float>& target_features, const SlicePlane& target_slice,
                          const MaskPlane& mask, const std::optional<RegionStats>& stats,
                          const PropagateOptions& opts) {
  const auto aff = provider.affinity(source_features, target_features, opts.window);
  const SlicePlane soft = apply_affinity(aff, SlicePlane(mask.cast<float>()));
  const float t = static_cast<float>(opts.threshold);
  StepResult r;
  r.soft_max = soft.size() ? soft.maxCoeff() : 0.f;
  r.mask = (soft.array() >= t).cast<std::uint8_t>();
  if (opts.verification && stats) r.mask = verify_mask(r.mask, target_slice, *stats);
  r.stats = region_stats(r.mask, target_slice, opts.dilation_radius);
  return r;
}

StepResult propagate_step(const CorrespondenceProvider& provider, const SlicePlane& source_slice,
                          const SlicePlane& target_slice, const MaskPlane& mask,
                          const std::optional<RegionStats>& stats, const PropagateOptions& opts) {
  return propagate_step(provider, provider.embed(source_slice), provider.embed(target_slice), target_slice, mask,
                        stats, opts);
}

PropagationResult propagate_volume(const CorrespondenceProvider& provider, const Volume& volume,
                                   const MaskPlane& seed, std::size_t seed_index, const PropagateOptions& opts,
                                   const ProgressCallback& progress) {
  using clock = std::chrono::steady_clock;
  opts.validate();
  require_matching_mode(provider, opts);
  const std::size_t D = volume.depth();
  if (seed_index >= D) throw RangeError("seed index " + std::to_string(seed_index) + " out of range");
  if (static_cast<std::size_t>(seed.rows()) != volume.height() || static_cast<std::size_t>(seed.cols()) != volume.width())
    throw DimensionError("seed mask dims do not match the volume");
  if ((seed.array() != 0).count() == 0) throw SeedError("seed mask is empty");

  const auto started = clock::now();
  PropagationResult result{MaskVolume(volume.height(), volume.width(), D), std::vector<float>(D, 0.f),
                           std::vector<std::optional<RegionStats>>(D), std::nullopt, std::nullopt,
                           std::vector<double>(D, 0.0), 0.0};
  result.masks.set_plane(seed_index, seed);
  result.soft_max[seed_index] = 1.f;
  const SlicePlane seed_slice = extract_slice(volume, seed_index);
  result.stats[seed_index] = region_stats(seed, seed_slice, opts.dilation_radius);
  const FeatureMap<float> seed_features = provider.embed(seed_slice);

  const std::size_t total = D - 1;
  std::size_t done = 0;
  auto report = [&] {
    if (progress) progress(done, total);
  };

  auto sweep = [&](int direction, std::optional<std::size_t>& stop) {
    MaskPlane mask = seed;
    std::optional<RegionStats> stats = result.stats[seed_index];
    FeatureMap<float> source_features = seed_features;
    const auto steps = direction > 0 ? D - 1 - seed_index : seed_index;
    for (std::size_t s = 1; s <= steps; ++s) {
      const std::size_t k = direction > 0 ? seed_index + s : seed_index - s;
      const auto t0 = clock::now();
      if ((mask.array() != 0).count() == 0) {
        // Nothing left to carry; the plane stays empty.
        ++done;
        report();
        continue;
      }
      const SlicePlane target = extract_slice(volume, k);
      FeatureMap<float> target_features = provider.embed(target);
      StepResult step = propagate_step(provider, source_features, target_features, target, mask, stats, opts);
      result.masks.set_plane(k, step.mask);
      result.soft_max[k] = step.soft_max;
      result.stats[k] = step.stats;
      result.slice_seconds[k] = std::chrono::duration<double>(clock::now() - t0).count();
      mask = std::move(step.mask);
      stats = step.stats;
      source_features = std::move(target_features);
      ++done;
      report();
      if (opts.stop_on_empty && (mask.array() != 0).count() == 0) {
        stop = k;
        done += steps - s;
        report();
        break;
      }
    }
  };
  sweep(+1, result.forward_stop);
  sweep(-1, result.backward_stop);
  result.total_seconds = std::chrono::duration<double>(clock::now() - started).count();
  return result;
}

void to_json(nlohmann::json& j, const PropagationResult& r) {
  nlohmann::json stats = nlohmann::json::array();
  for (const auto& s : r.stats) {
    if (s)
      stats.push_back({{"p", s->p}, {"n", s->n}, {"positive", s->positive_count}, {"negative", s->negative_count}});
    else
      stats.push_back(nullptr);
  }
  j = nlohmann::json{{"depth", r.masks.depth()},
                     {"soft_max", r.soft_max},
                     {"stats", stats},
                     {"forward_stop", r.forward_stop ? nlohmann::json(*r.forward_stop) : nlohmann::json(nullptr)},
                     {"backward_stop", r.backward_stop ? nlohmann::json(*r.backward_stop) : nlohmann::json(nullptr)},
                     {"slice_seconds", r.slice_seconds},
                     {"total_seconds", r.total_seconds}};
}

}  // namespace slicetrack
