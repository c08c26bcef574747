#pragma once

#include "slicetrack/phantom.hpp"
#include "slicetrack/propagator.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace slicetrack {

/// Uniform draw among the slices within ±3 of the largest annotation that
/// also carry a non-empty annotation.
std::size_t select_seed_slice(const MaskVolume& truth, std::mt19937_64& rng);

/// Every plane is the seed mask.
MaskVolume baseline_static_copy(const Volume& volume, const MaskPlane& seed, std::size_t seed_index);

struct EvalCase {
  std::string id;
  Volume volume;
  MaskVolume truth;
};

using MethodRunner = std::function<MaskVolume(const Volume&, const MaskPlane& seed, std::size_t seed_index)>;

struct EvalMethod {
  std::string name;
  bool edge_profile = true;
  bool verification = true;
  MethodRunner run;
};

struct VolumeScore {
  std::string id;
  std::size_t seed_index = 0;
  double dice = 0.0;
  double seconds = 0.0;
};

struct MethodRow {
  std::string name;
  bool baseline = false;
  bool edge_profile = false;
  bool verification = false;
  std::vector<VolumeScore> volumes;
  double mean = 0.0;
  double std_dev = 0.0;  // population
  double slices_per_second = 0.0;
};

struct EvalReport {
  std::vector<MethodRow> rows;  // methods in grid order, then the static-copy baseline
};

/// Population mean and standard deviation of the per-volume Dice scores.
void aggregate(MethodRow& row);

/// Seeds are drawn once per case (in case order) and shared by every method.
/// Up to `threads` volumes run concurrently; per-volume entries keep case order.
EvalReport evaluate(const std::vector<EvalCase>& cases, const std::vector<EvalMethod>& methods, std::uint64_t seed,
                    std::size_t threads = 1);

struct GridPoint {
  bool edge_profile = true;
  bool verification = true;
};

/// The four {edge-profile, verification} combinations.
std::vector<GridPoint> full_ablation_grid();
std::string method_name(const GridPoint& g);

struct EvalConfig {
  std::vector<std::tuple<std::string, std::filesystem::path, std::filesystem::path>> corpus;  // id, volume, truth
  std::optional<PhantomSpec> synthetic_spec;
  std::size_t synthetic_count = 0;
  std::filesystem::path checkpoint;      // edge-profile network
  std::filesystem::path checkpoint_raw;  // raw-intensity network, needed for edge_profile = false rows
  std::vector<GridPoint> grid = full_ablation_grid();
  PropagateOptions options;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::filesystem::path report_path;
  std::filesystem::path table_path;
  std::filesystem::path csv_path;
};

void from_json(const nlohmann::json& j, EvalConfig& c);

std::vector<EvalCase> load_cases(const EvalConfig& cfg);
std::vector<EvalMethod> network_methods(const EvalConfig& cfg);

/// Loads corpus and checkpoints, runs the grid, writes the requested outputs.
EvalReport evaluate(const EvalConfig& cfg);

void to_json(nlohmann::json& j, const EvalReport& r);
std::string format_table(const EvalReport& r);
std::string format_csv(const EvalReport& r);

}  // namespace slicetrack
