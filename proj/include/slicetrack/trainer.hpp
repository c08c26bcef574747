#pragma once

#include "slicetrack/affinity.hpp"
#include "slicetrack/checkpoint.hpp"
#include "slicetrack/edge_profile.hpp"
#include "slicetrack/network.hpp"
#include "slicetrack/phantom.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace slicetrack {

struct TrainConfig {
  std::vector<std::filesystem::path> corpus;
  /// Optional in-memory corpus of generated phantoms: seeds spec.rng_seed .. + count - 1.
  std::optional<PhantomSpec> synthetic_spec;
  std::size_t synthetic_count = 0;

  std::size_t epochs = 3;
  std::size_t batch_size = 10;
  double initial_lr = 1e-4;
  WindowSpec window{7};
  ProfileConfig profile;
  NetworkConfig network = [] {
    NetworkConfig c;
    c.residual_blocks = 2;  // desk-scale default
    c.base_filters = 48;
    c.embedding_channels = 32;
    return c;
  }();
  std::size_t resize_height = 32;
  std::size_t resize_width = 32;
  std::uint64_t rng_seed = 0;
  std::size_t checkpoint_every = 0;  // epochs; 0 writes only the final checkpoint
  std::filesystem::path checkpoint_path;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Slices of each training volume, already resized to the training resolution.
using TrainingCorpus = std::vector<std::vector<SlicePlane>>;

TrainingCorpus build_corpus(const TrainConfig& cfg);
TrainingCorpus build_corpus(const std::vector<Volume>& volumes, std::size_t height, std::size_t width);

struct SlicePair {
  std::size_t volume = 0;
  std::size_t slice = 0;  // first slice; the second is slice + 1
  SlicePlane first;
  SlicePlane second;
};

struct PairBatch {
  std::vector<SlicePair> pairs;
};

/// Uniform over volumes, then uniform over that volume's D-1 adjacent positions.
PairBatch sample_adjacent_pairs(const TrainingCorpus& corpus, std::size_t count, std::mt19937_64& rng);

template <typename T>
struct LossAndGradients {
  T loss = 0;
  GradientSet<T> grads;
};

/// Mean |S2 - Ŝ2| where Ŝ2 copies S1 through the key(S1)/query(S2) affinity,
/// with exact gradients through both network passes.
template <typename T>
LossAndGradients<T> reconstruction_loss(const Network<T>& net, const Plane<T>& first, const Plane<T>& second,
                                        const ProfileConfig& profile, const WindowSpec& win);

/// Loss only (no tape); used by finite-difference checks.
template <typename T>
T reconstruction_loss_value(const Network<T>& net, const Plane<T>& first, const Plane<T>& second,
                            const ProfileConfig& profile, const WindowSpec& win);

struct TrainReport {
  std::vector<double> epoch_loss;
  std::vector<double> lr_trace;
  std::size_t steps = 0;
  double wall_seconds = 0.0;
  std::filesystem::path checkpoint;
};

void to_json(nlohmann::json& j, const TrainReport& r);

struct TrainResult {
  Network<float> network;
  AdamState<float> adam;
  TrainReport report;
};

using EpochCallback = std::function<void(std::size_t epoch, double loss, double lr)>;

/// Runs epochs × ceil(pairs/batch) ADAM steps, halving the learning rate at
/// every epoch boundary. Pairs per epoch = sum over volumes of (D - 1).
TrainResult train(const TrainConfig& cfg, const TrainingCorpus& corpus, const EpochCallback& on_epoch = {});
TrainResult train(const TrainConfig& cfg, const EpochCallback& on_epoch = {});

}  // namespace slicetrack
