#pragma once

#include "slicetrack/affinity.hpp"
#include "slicetrack/checkpoint.hpp"
#include "slicetrack/core.hpp"

#include <json.hpp>

#include <functional>
#include <memory>
#include <optional>

namespace slicetrack {

struct PropagateOptions {
  double threshold = 0.5;
  bool verification = true;
  int dilation_radius = 7;
  bool stop_on_empty = true;
  WindowSpec window{7};
  bool edge_profile = true;

  void validate() const;
};

void to_json(nlohmann::json& j, const PropagateOptions& o);
void from_json(const nlohmann::json& j, PropagateOptions& o);

/// Mean intensity inside the mask (p) and inside the surrounding band (n).
struct RegionStats {
  double p = 0.0;
  double n = 0.0;
  std::size_t positive_count = 0;
  std::size_t negative_count = 0;
};

/// Square structuring element of side 2·radius+1.
MaskPlane dilate_mask(const MaskPlane& m, int radius);

/// Empty when the mask or its surrounding band is empty.
std::optional<RegionStats> region_stats(const MaskPlane& mask, const SlicePlane& slice, int dilation_radius);

/// Keeps proposed pixels strictly closer to p than to n.
MaskPlane verify_mask(const MaskPlane& proposed, const SlicePlane& next_slice, const RegionStats& stats);

/// Source of slice-to-slice correspondences. embed() runs once per slice;
/// affinity() pairs the source embedding (key) with the target's (query).
class CorrespondenceProvider {
 public:
  virtual ~CorrespondenceProvider() = default;
  virtual FeatureMap<float> embed(const SlicePlane& slice) const = 0;
  virtual AffinityMatrix<float> affinity(const FeatureMap<float>& source, const FeatureMap<float>& target,
                                         const WindowSpec& win) const {
    return compute_affinity(source, target, win);
  }
};

/// Trained network behind the edge-profile bottleneck. Immutable; safe to
/// share across concurrent jobs.
class NetworkCorrespondence final : public CorrespondenceProvider {
 public:
  NetworkCorrespondence(std::shared_ptr<const Network<float>> net, ProfileConfig profile);
  static std::shared_ptr<NetworkCorrespondence> from_checkpoint(const Checkpoint& ck);

  FeatureMap<float> embed(const SlicePlane& slice) const override;
  const ProfileConfig& profile() const { return profile_; }

 private:
  std::shared_ptr<const Network<float>> net_;
  ProfileConfig profile_;
};

/// Throws ConfigMismatchError when the options ask for an input mode the
/// provider's network was not trained with.
void require_matching_mode(const CorrespondenceProvider& provider, const PropagateOptions& opts);

struct StepResult {
  MaskPlane mask;
  std::optional<RegionStats> stats;
  float soft_max = 0.f;
};

/// One propagation step from slice i to its neighbour. `source_features` and
/// `target_features` are the provider embeddings of the two slices.
StepResult propagate_step(const CorrespondenceProvider& provider, const FeatureMap<float>& source_features,
                          const FeatureMap<float>& target_features, const SlicePlane& target_slice,
                          const MaskPlane& mask, const std::optional<RegionStats>& stats,
                          const PropagateOptions& opts);

/// Convenience overload that embeds both slices.
StepResult propagate_step(const CorrespondenceProvider& provider, const SlicePlane& source_slice,
                          const SlicePlane& target_slice, const MaskPlane& mask,
                          const std::optional<RegionStats>& stats, const PropagateOptions& opts);

struct PropagationResult {
  MaskVolume masks;
  std::vector<float> soft_max;                      // per slice; 1 at the seed, 0 where not reached
  std::vector<std::optional<RegionStats>> stats;    // per slice
  std::optional<std::size_t> forward_stop;          // first slice left empty by the forward sweep
  std::optional<std::size_t> backward_stop;
  std::vector<double> slice_seconds;
  double total_seconds = 0.0;
};

using ProgressCallback = std::function<void(std::size_t done, std::size_t total)>;

/// Seeds plane `seed_index` with `seed` and sweeps forward to D-1 and
/// backward to 0, each direction carrying its own region statistics.
PropagationResult propagate_volume(const CorrespondenceProvider& provider, const Volume& volume,
                                   const MaskPlane& seed, std::size_t seed_index, const PropagateOptions& opts,
                                   const ProgressCallback& progress = {});

void to_json(nlohmann::json& j, const PropagationResult& r);

}  // namespace slicetrack
