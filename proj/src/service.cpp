#include "slicetrack/service.hpp"

#include "slicetrack/volume_ops.hpp"

#include <httplib.h>
#include <png.h>

#include <condition_variable>
#include <deque>
#include <fstream>
#include <map>
#include <mutex>
#include <thread>

namespace slicetrack {

namespace {

void png_append(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::string*>(png_get_io_ptr(png));
  out->append(reinterpret_cast<const char*>(data), length);
}

}  // namespace

std::string encode_png(const SlicePlane& slice) {
  const auto H = static_cast<png_uint_32>(slice.rows());
  const auto W = static_cast<png_uint_32>(slice.cols());
  std::vector<png_byte> pixels(std::size_t(H) * W);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const float v = std::clamp(slice.data()[i], 0.f, 1.f);
    pixels[i] = static_cast<png_byte>(std::lround(v * 255.f));
  }
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  std::string out;
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, info ? &info : nullptr);
    throw IoError("PNG encoding failed");
  }
  png_set_write_fn(png, &out, png_append, nullptr);
  png_set_IHDR(png, info, W, H, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (png_uint_32 y = 0; y < H; ++y) png_write_row(png, pixels.data() + std::size_t(y) * W);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

std::string to_string(JobState s) {
  switch (s) {
    case JobState::queued: return "queued";
    case JobState::running: return "running";
    case JobState::done: return "done";
    case JobState::failed: return "failed";
  }
  return "unknown";
}

namespace {
JobState parse_state(const std::string& s) {
  if (s == "queued") return JobState::queued;
  if (s == "running") return JobState::running;
  if (s == "done") return JobState::done;
  if (s == "failed") return JobState::failed;
  throw FormatError("unknown job state '" + s + "'");
}
}  // namespace

void to_json(nlohmann::json& j, const JobRecord& r) {
  j = {{"job_id", r.id},
       {"volume_id", r.volume_id},
       {"seed_index", r.seed_index},
       {"options", r.options},
       {"state", to_string(r.state)},
       {"progress", {{"done", r.done}, {"total", r.total}}}};
  if (r.state == JobState::failed) j["error"] = r.error;
}

struct Service::State {
  struct VolumeEntry {
    std::shared_ptr<const Volume> volume;
    std::shared_ptr<const MaskVolume> truth;
  };
  struct JobEntry {
    JobRecord record;
    MaskPlane seed;
  };

  ServiceConfig cfg;
  mutable std::mutex mutex;
  mutable std::condition_variable job_changed;
  std::condition_variable queue_ready;
  std::deque<std::string> queue;
  std::map<std::string, VolumeEntry> volumes;
  std::map<std::string, JobEntry> jobs;
  std::uint64_t next_id = 1;
  bool stopping = false;
  std::vector<std::thread> workers;

  bool persistent() const { return !cfg.data_dir.empty(); }
  std::filesystem::path volume_path(const std::string& id) const { return cfg.data_dir / "volumes" / (id + ".svl"); }
  std::filesystem::path truth_path(const std::string& id) const { return cfg.data_dir / "volumes" / (id + ".gt.smk"); }
  std::filesystem::path result_path(const std::string& id) const { return cfg.data_dir / "jobs" / (id + ".smk"); }
  std::filesystem::path sidecar_path(const std::string& id) const { return cfg.data_dir / "jobs" / (id + ".json"); }

  const VolumeEntry& volume(const std::string& id) const {
    auto it = volumes.find(id);
    if (it == volumes.end()) throw NotFoundError("unknown volume '" + id + "'");
    return it->second;
  }
  const JobEntry& job(const std::string& id) const {
    auto it = jobs.find(id);
    if (it == jobs.end()) throw NotFoundError("unknown job '" + id + "'");
    return it->second;
  }

  // Caller holds the mutex.
  void persist_index() const {
    if (!persistent()) return;
    nlohmann::json index{{"next_id", next_id}, {"volumes", nlohmann::json::array()}, {"jobs", nlohmann::json::array()}};
    for (const auto& [id, v] : volumes) index["volumes"].push_back({{"id", id}, {"groundtruth", bool(v.truth)}});
    for (const auto& [id, j] : jobs) {
      nlohmann::json rec = j.record;
      rec["seed_mask"] = rle_encode(j.seed);
      index["jobs"].push_back(rec);
    }
    const auto path = cfg.data_dir / "index.json";
    const auto tmp = cfg.data_dir / "index.json.tmp";
    {
      std::ofstream out(tmp);
      if (!out) throw IoError("cannot write " + tmp.string());
      out << index.dump(1) << "\n";
    }
    std::filesystem::rename(tmp, path);
  }

  void restore() {
    std::filesystem::create_directories(cfg.data_dir / "volumes");
    std::filesystem::create_directories(cfg.data_dir / "jobs");
    const auto path = cfg.data_dir / "index.json";
    if (!std::filesystem::exists(path)) return;
    std::ifstream in(path);
    const auto index = nlohmann::json::parse(in);
    next_id = index.at("next_id").get<std::uint64_t>();
    for (const auto& v : index.at("volumes")) {
      const auto id = v.at("id").get<std::string>();
      VolumeEntry e{std::make_shared<const Volume>(load_volume(volume_path(id))), nullptr};
      if (v.at("groundtruth").get<bool>()) e.truth = std::make_shared<const MaskVolume>(load_mask(truth_path(id)));
      volumes.emplace(id, std::move(e));
    }
    for (const auto& j : index.at("jobs")) {
      JobEntry e;
      e.record.id = j.at("job_id").get<std::string>();
      e.record.volume_id = j.at("volume_id").get<std::string>();
      e.record.seed_index = j.at("seed_index").get<std::size_t>();
      e.record.options = j.at("options").get<PropagateOptions>();
      e.record.state = parse_state(j.at("state").get<std::string>());
      e.record.total = j.at("progress").at("total").get<std::size_t>();
      e.record.error = j.value("error", std::string{});
      e.seed = rle_decode(j.at("seed_mask").get<RleMask>());
      if (e.record.state == JobState::done) {
        e.record.result = std::make_shared<PropagationResult>(
            PropagationResult{load_mask(result_path(e.record.id)), {}, {}, {}, {}, {}, 0.0});
        e.record.done = e.record.total;
      } else if (e.record.state != JobState::failed) {
        // Interrupted before completion; propagation is deterministic, so rerun.
        e.record.state = JobState::queued;
        queue.push_back(e.record.id);
      }
      jobs.emplace(e.record.id, std::move(e));
    }
  }

  std::shared_ptr<const CorrespondenceProvider> provider_for(const PropagateOptions& opts) const {
    auto p = opts.edge_profile ? cfg.model : cfg.raw_model;
    if (!p)
      throw ConfigMismatchError(std::string("service has no ") + (opts.edge_profile ? "edge-profile" : "raw-intensity") +
                                " model loaded");
    require_matching_mode(*p, opts);
    return p;
  }

  void worker_loop() {
    std::unique_lock lock(mutex);
    while (true) {
      queue_ready.wait(lock, [&] { return stopping || !queue.empty(); });
      if (stopping) return;
      const std::string id = queue.front();
      queue.pop_front();
      auto& entry = jobs.at(id);
      entry.record.state = JobState::running;
      const auto vol = volume(entry.record.volume_id).volume;
      const MaskPlane seed = entry.seed;
      const auto seed_index = entry.record.seed_index;
      const auto opts = entry.record.options;
      job_changed.notify_all();
      lock.unlock();

      std::shared_ptr<PropagationResult> result;
      std::string error;
      try {
        const auto provider = provider_for(opts);
        auto progress = [&](std::size_t done, std::size_t) {
          std::lock_guard g(mutex);
          auto& rec = jobs.at(id).record;
          rec.done = std::max(rec.done, done);
          job_changed.notify_all();
        };
        result = std::make_shared<PropagationResult>(propagate_volume(*provider, *vol, seed, seed_index, opts, progress));
        if (persistent()) {
          save_mask(result->masks, result_path(id));
          std::ofstream(sidecar_path(id)) << nlohmann::json(*result).dump(1) << "\n";
        }
      } catch (const std::exception& e) {
        error = e.what();
      }

      lock.lock();
      auto& rec = jobs.at(id).record;
      if (result) {
        rec.state = JobState::done;
        rec.done = rec.total;
        rec.result = std::move(result);
      } else {
        rec.state = JobState::failed;
        rec.error = error;
      }
      try {
        persist_index();
      } catch (const std::exception&) {
        // The in-memory record stays authoritative.
      }
      job_changed.notify_all();
    }
  }
};

Service::Service(ServiceConfig cfg) : state_(std::make_unique<State>()) {
  state_->cfg = std::move(cfg);
  if (state_->cfg.workers == 0) throw SpecError("service needs at least one worker");
  if (state_->persistent()) state_->restore();
  for (std::size_t i = 0; i < state_->cfg.workers; ++i) state_->workers.emplace_back([s = state_.get()] { s->worker_loop(); });
}

Service::~Service() {
  {
    std::lock_guard lock(state_->mutex);
    state_->stopping = true;
  }
  state_->queue_ready.notify_all();
  for (auto& t : state_->workers) t.join();
}

namespace {
nlohmann::json dims_json(const Volume& v) {
  return {{"height", v.height()}, {"width", v.width()}, {"depth", v.depth()}};
}
}  // namespace

nlohmann::json Service::add_volume(std::span<const std::uint8_t> svl1) {
  auto volume = std::make_shared<const Volume>(decode_volume(svl1));
  std::lock_guard lock(state_->mutex);
  const std::string id = "vol-" + std::to_string(state_->next_id++);
  if (state_->persistent()) save_volume(*volume, state_->volume_path(id));
  state_->volumes.emplace(id, State::VolumeEntry{volume, nullptr});
  state_->persist_index();
  return {{"volume_id", id}, {"dims", dims_json(*volume)}};
}

nlohmann::json Service::volume_info(const std::string& volume_id) const {
  std::lock_guard lock(state_->mutex);
  const auto& e = state_->volume(volume_id);
  return {{"volume_id", volume_id}, {"dims", dims_json(*e.volume)}, {"groundtruth", bool(e.truth)}};
}

std::string Service::slice_png(const std::string& volume_id, std::size_t k) const {
  std::shared_ptr<const Volume> v;
  {
    std::lock_guard lock(state_->mutex);
    v = state_->volume(volume_id).volume;
  }
  if (k >= v->depth()) throw NotFoundError("slice " + std::to_string(k) + " out of range");
  return encode_png(extract_slice(*v, k));
}

void Service::set_groundtruth(const std::string& volume_id, std::span<const std::uint8_t> smk1) {
  auto truth = std::make_shared<const MaskVolume>(decode_mask(smk1));
  std::lock_guard lock(state_->mutex);
  auto it = state_->volumes.find(volume_id);
  if (it == state_->volumes.end()) throw NotFoundError("unknown volume '" + volume_id + "'");
  auto& e = it->second;
  if (!same_dims(*e.volume, *truth)) throw DimensionError("ground truth dims do not match the volume");
  if (state_->persistent()) save_mask(*truth, state_->truth_path(volume_id));
  e.truth = std::move(truth);
  state_->persist_index();
}

std::string Service::submit(const std::string& volume_id, std::size_t seed_index, const MaskPlane& seed,
                            const PropagateOptions& options) {
  options.validate();
  std::lock_guard lock(state_->mutex);
  const auto& v = *state_->volume(volume_id).volume;
  if (std::size_t(seed.rows()) != v.height() || std::size_t(seed.cols()) != v.width())
    throw DimensionError("seed mask dims do not match the volume");
  if (seed_index >= v.depth()) throw RangeError("seed index out of range");
  if ((seed.array() != 0).count() == 0) throw SeedError("seed mask is empty");
  state_->provider_for(options);

  State::JobEntry e;
  e.record.id = "job-" + std::to_string(state_->next_id++);
  e.record.volume_id = volume_id;
  e.record.seed_index = seed_index;
  e.record.options = options;
  e.record.total = v.depth() - 1;  // slices propagated besides the seed
  e.seed = seed;
  const std::string id = e.record.id;
  state_->jobs.emplace(id, std::move(e));
  state_->queue.push_back(id);
  state_->persist_index();
  state_->queue_ready.notify_one();
  return id;
}

JobRecord Service::job(const std::string& job_id) const {
  std::lock_guard lock(state_->mutex);
  return state_->job(job_id).record;
}

JobRecord Service::wait(const std::string& job_id) const {
  std::unique_lock lock(state_->mutex);
  state_->job(job_id);
  state_->job_changed.wait(lock, [&] {
    const auto s = state_->jobs.at(job_id).record.state;
    return s == JobState::done || s == JobState::failed;
  });
  return state_->jobs.at(job_id).record;
}

namespace {
const PropagationResult& finished(const JobRecord& r) {
  if (r.state != JobState::done) throw ConflictError("job '" + r.id + "' is " + to_string(r.state));
  return *r.result;
}
}  // namespace

RleMask Service::job_mask(const std::string& job_id, std::size_t k) const {
  const auto rec = job(job_id);
  const auto& result = finished(rec);
  if (k >= result.masks.depth()) throw NotFoundError("slice " + std::to_string(k) + " out of range");
  return rle_encode(result.masks.plane(k));
}

nlohmann::json Service::job_metrics(const std::string& job_id) const {
  std::shared_ptr<const MaskVolume> truth;
  JobRecord rec;
  {
    std::lock_guard lock(state_->mutex);
    rec = state_->job(job_id).record;
    truth = state_->volume(rec.volume_id).truth;
  }
  const auto& result = finished(rec);
  if (!truth) throw NotFoundError("no ground truth registered for volume '" + rec.volume_id + "'");
  std::vector<double> per_slice;
  for (std::size_t k = 0; k < truth->depth(); ++k) per_slice.push_back(dice(result.masks.plane(k), truth->plane(k)));
  return {{"job_id", job_id}, {"per_slice_dice", per_slice}, {"volume_dice", dice(result.masks, *truth)}};
}

struct HttpServer::Impl {
  Service& service;
  httplib::Server server;

  explicit Impl(Service& s) : service(s) {}
};

namespace {

void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

template <typename F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const NotFoundError& e) {
      send_json(res, 404, {{"error", e.what()}});
    } catch (const ConflictError& e) {
      send_json(res, 409, {{"error", e.what()}});
    } catch (const IoError& e) {
      send_json(res, 500, {{"error", e.what()}});
    } catch (const Error& e) {
      send_json(res, 400, {{"error", e.what()}});
    } catch (const nlohmann::json::exception& e) {
      send_json(res, 400, {{"error", e.what()}});
    } catch (const std::exception& e) {
      send_json(res, 500, {{"error", e.what()}});
    }
  };
}

std::span<const std::uint8_t> body_bytes(const httplib::Request& req) {
  return {reinterpret_cast<const std::uint8_t*>(req.body.data()), req.body.size()};
}

std::size_t index_arg(const httplib::Request& req, std::size_t i) {
  return std::stoull(req.matches[static_cast<int>(i)].str());
}

}  // namespace

HttpServer::HttpServer(Service& service, std::filesystem::path ui_dir) : impl_(std::make_unique<Impl>(service)) {
  auto& svr = impl_->server;
  Service& s = service;

  svr.Post("/volumes", guarded([&s](const httplib::Request& req, httplib::Response& res) {
             send_json(res, 201, s.add_volume(body_bytes(req)));
           }));
  svr.Get(R"(/volumes/([^/]+))", guarded([&s](const httplib::Request& req, httplib::Response& res) {
            send_json(res, 200, s.volume_info(req.matches[1]));
          }));
  svr.Get(R"(/volumes/([^/]+)/slices/(\d+)\.png)", guarded([&s](const httplib::Request& req, httplib::Response& res) {
            res.set_content(s.slice_png(req.matches[1], index_arg(req, 2)), "image/png");
          }));
  svr.Post(R"(/volumes/([^/]+)/groundtruth)", guarded([&s](const httplib::Request& req, httplib::Response& res) {
             s.set_groundtruth(req.matches[1], body_bytes(req));
             send_json(res, 200, s.volume_info(req.matches[1]));
           }));
  svr.Post(R"(/volumes/([^/]+)/jobs)", guarded([&s](const httplib::Request& req, httplib::Response& res) {
             const auto body = nlohmann::json::parse(req.body);
             const auto seed = rle_decode(body.at("seed_mask").get<RleMask>());
             PropagateOptions opts;
             if (body.contains("options")) opts = body.at("options").get<PropagateOptions>();
             const auto id = s.submit(req.matches[1], body.at("seed_index").get<std::size_t>(), seed, opts);
             send_json(res, 202, {{"job_id", id}});
           }));
  svr.Get(R"(/jobs/([^/]+))", guarded([&s](const httplib::Request& req, httplib::Response& res) {
            send_json(res, 200, s.job(req.matches[1]));
          }));
  svr.Get(R"(/jobs/([^/]+)/masks/(\d+))", guarded([&s](const httplib::Request& req, httplib::Response& res) {
            send_json(res, 200, s.job_mask(req.matches[1], index_arg(req, 2)));
          }));
  svr.Get(R"(/jobs/([^/]+)/metrics)", guarded([&s](const httplib::Request& req, httplib::Response& res) {
            send_json(res, 200, s.job_metrics(req.matches[1]));
          }));
  if (!ui_dir.empty() && !svr.set_mount_point("/ui", ui_dir.string()))
    throw IoError("cannot serve UI from " + ui_dir.string());
}

HttpServer::~HttpServer() = default;

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) return impl_->server.bind_to_any_port(host);
  if (!impl_->server.bind_to_port(host, port)) throw IoError("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() { impl_->server.stop(); }

}  // namespace slicetrack
