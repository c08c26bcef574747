#pragma once

#include "slicetrack/propagator.hpp"
#include "slicetrack/rle.hpp"

#include <json.hpp>

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>

namespace slicetrack {

struct NotFoundError : Error { using Error::Error; };
/// The resource exists but is not in a state that allows the request.
struct ConflictError : Error { using Error::Error; };

/// Linear [0,1] -> 0..255 grayscale, 8-bit PNG.
std::string encode_png(const SlicePlane& slice);

enum class JobState { queued, running, done, failed };
std::string to_string(JobState s);

struct JobRecord {
  std::string id;
  std::string volume_id;
  std::size_t seed_index = 0;
  PropagateOptions options;
  JobState state = JobState::queued;
  std::size_t done = 0;
  std::size_t total = 0;
  std::string error;
  std::shared_ptr<const PropagationResult> result;
};

void to_json(nlohmann::json& j, const JobRecord& r);

struct ServiceConfig {
  std::shared_ptr<const CorrespondenceProvider> model;      // edge-profile jobs
  std::shared_ptr<const CorrespondenceProvider> raw_model;  // optional, jobs with edge_profile = false
  std::size_t workers = 1;
  std::filesystem::path data_dir;  // empty keeps everything in memory
};

/// Volume/job store plus the worker pool. All methods are thread-safe.
class Service {
 public:
  explicit Service(ServiceConfig cfg);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Returns {volume_id, dims}.
  nlohmann::json add_volume(std::span<const std::uint8_t> svl1);
  nlohmann::json volume_info(const std::string& volume_id) const;
  std::string slice_png(const std::string& volume_id, std::size_t k) const;
  void set_groundtruth(const std::string& volume_id, std::span<const std::uint8_t> smk1);

  /// Validates synchronously (seed errors, dims, model availability) and
  /// queues the job.
  std::string submit(const std::string& volume_id, std::size_t seed_index, const MaskPlane& seed,
                     const PropagateOptions& options);
  JobRecord job(const std::string& job_id) const;
  /// Blocks until the job is done or failed.
  JobRecord wait(const std::string& job_id) const;
  RleMask job_mask(const std::string& job_id, std::size_t k) const;
  /// Per-slice and volume Dice against the volume's registered ground truth.
  nlohmann::json job_metrics(const std::string& job_id) const;

 private:
  struct State;
  std::unique_ptr<State> state_;
};

/// HTTP/JSON facade over a Service.
class HttpServer {
 public:
  HttpServer(Service& service, std::filesystem::path ui_dir = {});
  ~HttpServer();
  /// Binds to host:port (port 0 picks a free one) and returns the bound port.
  int bind(const std::string& host, int port);
  /// Serves until stop() is called.
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace slicetrack
