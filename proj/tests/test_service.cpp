#include "slicetrack/service.hpp"
#include "slicetrack/volume_ops.hpp"
#include "support.hpp"

#include <doctest.h>
#include <httplib.h>
#include <png.h>

#include <chrono>
#include <fstream>
#include <future>
#include <thread>

using namespace slicetrack;
using namespace std::chrono_literals;

namespace {

/// Identity correspondence whose embed() waits for a gate to open.
class GatedProvider : public testing::IdentityProvider {
 public:
  explicit GatedProvider(std::shared_future<void> gate) : gate_(std::move(gate)) {}
  FeatureMap<float> embed(const SlicePlane& s) const override {
    gate_.wait();
    return IdentityProvider::embed(s);
  }

 private:
  std::shared_future<void> gate_;
};

class FailingProvider : public testing::IdentityProvider {
 public:
  FeatureMap<float> embed(const SlicePlane&) const override { throw DataError("embedding exploded"); }
};

std::span<const std::uint8_t> bytes(const std::vector<std::uint8_t>& v) { return {v.data(), v.size()}; }

struct Fixture {
  MaskPlane seed;
  Volume volume;
  MaskVolume truth;
};

/// Static volume whose structure is the seed box, so identity propagation is exact.
Fixture static_fixture(std::uint64_t s, std::size_t h = 12, std::size_t w = 14, std::size_t d = 5) {
  std::mt19937_64 rng(s);
  std::uniform_int_distribution<int> off(1, 4);
  MaskPlane seed = MaskPlane::Zero(h, w);
  seed.block(off(rng), off(rng), 5, 6).setOnes();
  std::uniform_real_distribution<float> fg(0.7f, 1.f), bg(0.f, 0.3f);
  std::vector<float> vox;
  MaskVolume truth(h, w, d);
  for (std::size_t k = 0; k < d; ++k) {
    for (Eigen::Index i = 0; i < seed.size(); ++i) vox.push_back(seed.data()[i] ? fg(rng) : bg(rng));
    truth.set_plane(k, seed);
  }
  return {seed, Volume(h, w, d, std::move(vox)), truth};
}

PropagateOptions small_options() {
  PropagateOptions o;
  o.window.radius = 2;
  o.dilation_radius = 2;
  return o;
}

ServiceConfig identity_config(std::size_t workers = 1, std::filesystem::path dir = {}) {
  ServiceConfig c;
  c.model = std::make_shared<testing::IdentityProvider>();
  c.workers = workers;
  c.data_dir = std::move(dir);
  return c;
}

std::vector<std::uint8_t> decode_png_gray(const std::string& png, std::size_t& h, std::size_t& w) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  REQUIRE(png_image_begin_read_from_memory(&image, png.data(), png.size()));
  image.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(image));
  REQUIRE(png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr));
  h = image.height;
  w = image.width;
  return buf;
}

/// Server on an ephemeral port, stopped and joined on destruction.
struct LiveServer {
  HttpServer server;
  int port;
  std::thread thread;
  explicit LiveServer(Service& s) : server(s), port(server.bind("127.0.0.1", 0)), thread([this] { server.listen(); }) {}
  ~LiveServer() {
    server.stop();
    thread.join();
  }
  httplib::Client client() const { return httplib::Client("127.0.0.1", port); }
};

std::string as_body(const std::vector<std::uint8_t>& v) { return {v.begin(), v.end()}; }

}  // namespace

TEST_CASE("rle examples") {
  CHECK(rle_encode(MaskPlane::Zero(3, 4)).runs == std::vector<std::size_t>{12});
  CHECK(rle_encode(MaskPlane::Ones(3, 4)).runs == std::vector<std::size_t>{0, 12});
  MaskPlane m(2, 3);
  m << 0, 1, 1, 0, 0, 1;
  const auto r = rle_encode(m);
  CHECK(r.height == 2);
  CHECK(r.width == 3);
  CHECK(r.runs == std::vector<std::size_t>{1, 2, 2, 1});
  CHECK(rle_decode(r) == m);
  CHECK(nlohmann::json(r) == nlohmann::json::parse(R"({"height": 2, "width": 3, "runs": [1, 2, 2, 1]})"));
}

TEST_CASE("rle round trips bitwise on random masks") {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> side(1, 40);
  std::uniform_real_distribution<double> dens(0.0, 1.0);
  for (int i = 0; i < 500; ++i) {
    const auto m = testing::random_mask(rng, side(rng), side(rng), dens(rng));
    const auto r = rle_encode(m);
    const auto back = rle_decode(nlohmann::json::parse(nlohmann::json(r).dump()).get<RleMask>());
    CHECK(back == m);
    CHECK(rle_encode(back) == r);
  }
}

TEST_CASE("malformed rle is a wire error") {
  CHECK_THROWS_AS(rle_decode({2, 2, {1, 2}}), WireError);
  CHECK_THROWS_AS(rle_decode({2, 2, {1, 2, 2}}), WireError);
  for (const char* text : {R"({"width": 2, "runs": [4]})", R"({"height": 2, "width": 2, "runs": [5, -1]})",
                           R"({"height": 2, "width": 2, "runs": [1.5, 2.5]})", R"({"height": 2, "width": 2, "runs": "4"})"})
    CHECK_THROWS_AS(nlohmann::json::parse(text).get<RleMask>(), WireError);
}

TEST_CASE("slices encode as 8-bit grayscale PNG") {
  SlicePlane s(3, 5);
  s << 0.f, 0.25f, 0.5f, 0.75f, 1.f, 0.1f, 0.2f, 0.3f, 0.4f, 0.6f, 0.002f, 0.998f, 0.5f, 0.5f, 0.f;
  std::size_t h = 0, w = 0;
  const auto pixels = decode_png_gray(encode_png(s), h, w);
  CHECK(h == 3);
  CHECK(w == 5);
  for (Eigen::Index i = 0; i < s.size(); ++i) CHECK(pixels[std::size_t(i)] == std::lround(s.data()[i] * 255.0));
}

TEST_CASE("service job flow with an identity provider") {
  Service svc(identity_config());
  const auto f = static_fixture(2);
  const auto info = svc.add_volume(bytes(encode_volume(f.volume)));
  const std::string vid = info["volume_id"];
  CHECK(info["dims"] == nlohmann::json{{"height", 12}, {"width", 14}, {"depth", 5}});
  CHECK(svc.volume_info(vid)["dims"] == info["dims"]);
  CHECK(svc.volume_info(vid)["groundtruth"] == false);
  svc.set_groundtruth(vid, bytes(encode_mask(f.truth)));
  CHECK(svc.volume_info(vid)["groundtruth"] == true);

  const auto id = svc.submit(vid, 2, f.seed, small_options());
  const auto rec = svc.wait(id);
  CHECK(rec.state == JobState::done);
  CHECK(rec.done == 4);
  CHECK(rec.total == 4);
  for (std::size_t k = 0; k < 5; ++k) CHECK(rle_decode(svc.job_mask(id, k)) == f.seed);
  const auto metrics = svc.job_metrics(id);
  CHECK(metrics["volume_dice"] == 100.0);
  CHECK(metrics["per_slice_dice"].size() == 5);

  const nlohmann::json j = rec;
  CHECK(j["state"] == "done");
  CHECK(j["progress"] == nlohmann::json{{"done", 4}, {"total", 4}});
  CHECK(j["volume_id"] == vid);
  CHECK_FALSE(j.contains("error"));

  CHECK_THROWS_AS(svc.job_mask(id, 5), NotFoundError);
  CHECK_THROWS_AS(svc.job("job-999"), NotFoundError);
  CHECK_THROWS_AS(svc.volume_info("vol-999"), NotFoundError);
  CHECK_THROWS_AS(svc.slice_png(vid, 5), NotFoundError);
}

TEST_CASE("service rejects bad submissions synchronously") {
  Service svc(identity_config());
  const auto f = static_fixture(3);
  const std::string vid = svc.add_volume(bytes(encode_volume(f.volume)))["volume_id"];
  CHECK_THROWS_AS(svc.submit("vol-999", 0, f.seed, small_options()), NotFoundError);
  CHECK_THROWS_AS(svc.submit(vid, 0, MaskPlane::Zero(12, 14), small_options()), SeedError);
  CHECK_THROWS_AS(svc.submit(vid, 0, MaskPlane::Ones(12, 13), small_options()), DimensionError);
  CHECK_THROWS_AS(svc.submit(vid, 5, f.seed, small_options()), RangeError);
  PropagateOptions raw = small_options();
  raw.edge_profile = false;
  CHECK_THROWS_AS(svc.submit(vid, 0, f.seed, raw), ConfigMismatchError);
  PropagateOptions bad = small_options();
  bad.threshold = 0;
  CHECK_THROWS_AS(svc.submit(vid, 0, f.seed, bad), SpecError);
  CHECK_THROWS_AS(svc.set_groundtruth(vid, bytes(encode_mask(MaskVolume(12, 14, 4)))), DimensionError);
  const std::vector<std::uint8_t> junk{1, 2, 3};
  CHECK_THROWS_AS(svc.add_volume(bytes(junk)), Error);

  const auto id = svc.submit(vid, 1, f.seed, small_options());
  svc.wait(id);
  CHECK_THROWS_AS(svc.job_metrics(id), NotFoundError);  // no ground truth registered
  CHECK_THROWS_AS(Service(identity_config(0)), SpecError);
}

TEST_CASE("queued and running jobs refuse mask requests") {
  std::promise<void> open;
  ServiceConfig cfg = identity_config();
  cfg.model = std::make_shared<GatedProvider>(open.get_future().share());
  Service svc(cfg);
  const auto f = static_fixture(4);
  const std::string vid = svc.add_volume(bytes(encode_volume(f.volume)))["volume_id"];
  const auto first = svc.submit(vid, 0, f.seed, small_options());
  const auto second = svc.submit(vid, 0, f.seed, small_options());
  CHECK(svc.job(second).state == JobState::queued);
  CHECK_THROWS_AS(svc.job_mask(second, 0), ConflictError);
  CHECK_THROWS_AS(svc.job_mask(first, 0), ConflictError);
  open.set_value();
  CHECK(svc.wait(first).state == JobState::done);
  CHECK(svc.wait(second).state == JobState::done);
}

TEST_CASE("a failing provider marks the job failed") {
  ServiceConfig cfg = identity_config();
  cfg.model = std::make_shared<FailingProvider>();
  Service svc(cfg);
  const auto f = static_fixture(5);
  const std::string vid = svc.add_volume(bytes(encode_volume(f.volume)))["volume_id"];
  const auto rec = svc.wait(svc.submit(vid, 0, f.seed, small_options()));
  CHECK(rec.state == JobState::failed);
  CHECK(rec.error.find("embedding exploded") != std::string::npos);
  CHECK(nlohmann::json(rec)["error"] == rec.error);
  CHECK_THROWS_AS(svc.job_mask(rec.id, 0), ConflictError);
}

TEST_CASE("concurrent jobs match direct propagation bitwise") {
  NetworkConfig nc;
  nc.base_filters = 4;
  nc.embedding_channels = 4;
  nc.residual_blocks = 1;
  const auto net =
      std::make_shared<NetworkCorrespondence>(std::make_shared<const Network<float>>(init_network<float>(nc)), ProfileConfig{});
  ServiceConfig cfg;
  cfg.model = net;
  cfg.workers = 2;
  Service svc(cfg);
  std::vector<std::pair<std::string, Fixture>> jobs;
  for (std::uint64_t s = 10; s < 16; ++s) {
    PhantomSpec spec;
    spec.height = spec.width = 20;
    spec.depth = 6;
    spec.rng_seed = s;
    auto p = synth_generate(spec);
    Fixture f{p.truth.plane(3), p.volume, p.truth};
    const std::string vid = svc.add_volume(bytes(encode_volume(f.volume)))["volume_id"];
    jobs.emplace_back(svc.submit(vid, 3, f.seed, small_options()), std::move(f));
  }
  for (const auto& [id, f] : jobs) {
    REQUIRE(svc.wait(id).state == JobState::done);
    const auto direct = propagate_volume(*net, f.volume, f.seed, 3, small_options());
    for (std::size_t k = 0; k < 6; ++k) CHECK(rle_decode(svc.job_mask(id, k)) == direct.masks.plane(k));
  }
}

TEST_CASE("http routes and status codes") {
  Service svc(identity_config());
  LiveServer live(svc);
  auto cli = live.client();
  const auto f = static_fixture(6);

  auto res = cli.Post("/volumes", as_body(encode_volume(f.volume)), "application/octet-stream");
  REQUIRE(res);
  CHECK(res->status == 201);
  const std::string vid = nlohmann::json::parse(res->body)["volume_id"];

  res = cli.Get("/volumes/" + vid);
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(nlohmann::json::parse(res->body)["dims"]["depth"] == 5);

  res = cli.Get("/volumes/" + vid + "/slices/1.png");
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(res->get_header_value("Content-Type") == "image/png");
  CHECK(res->body == svc.slice_png(vid, 1));

  CHECK(cli.Get("/volumes/vol-999")->status == 404);
  CHECK(cli.Get("/volumes/" + vid + "/slices/9.png")->status == 404);
  CHECK(cli.Get("/jobs/job-999")->status == 404);
  CHECK(cli.Post("/volumes", "not a volume", "application/octet-stream")->status == 400);

  res = cli.Post("/volumes/" + vid + "/groundtruth", as_body(encode_mask(f.truth)), "application/octet-stream");
  REQUIRE(res);
  CHECK(res->status == 200);

  const nlohmann::json empty_seed{{"seed_index", 0}, {"seed_mask", rle_encode(MaskPlane::Zero(12, 14))}};
  CHECK(cli.Post("/volumes/" + vid + "/jobs", empty_seed.dump(), "application/json")->status == 400);
  const nlohmann::json bad_rle{{"seed_index", 0}, {"seed_mask", {{"height", 12}, {"width", 14}, {"runs", {3, 4}}}}};
  CHECK(cli.Post("/volumes/" + vid + "/jobs", bad_rle.dump(), "application/json")->status == 400);
  CHECK(cli.Post("/volumes/" + vid + "/jobs", "{not json", "application/json")->status == 400);
  CHECK(cli.Post("/volumes/vol-999/jobs", empty_seed.dump(), "application/json")->status == 404);

  const nlohmann::json body{{"seed_index", 2}, {"seed_mask", rle_encode(f.seed)}, {"options", small_options()}};
  res = cli.Post("/volumes/" + vid + "/jobs", body.dump(), "application/json");
  REQUIRE(res);
  CHECK(res->status == 202);
  const std::string jid = nlohmann::json::parse(res->body)["job_id"];

  nlohmann::json rec;
  for (int i = 0; i < 500; ++i) {
    rec = nlohmann::json::parse(cli.Get("/jobs/" + jid)->body);
    if (rec["state"] == "done" || rec["state"] == "failed") break;
    std::this_thread::sleep_for(10ms);
  }
  REQUIRE(rec["state"] == "done");
  CHECK(rec["progress"]["done"] == rec["progress"]["total"]);
  for (std::size_t k = 0; k < 5; ++k) {
    res = cli.Get("/jobs/" + jid + "/masks/" + std::to_string(k));
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(rle_decode(nlohmann::json::parse(res->body).get<RleMask>()) == f.seed);
  }
  CHECK(cli.Get("/jobs/" + jid + "/masks/5")->status == 404);
  res = cli.Get("/jobs/" + jid + "/metrics");
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(nlohmann::json::parse(res->body) == svc.job_metrics(jid));
}

TEST_CASE("http reports conflicts for unfinished jobs") {
  std::promise<void> open;
  ServiceConfig cfg = identity_config();
  cfg.model = std::make_shared<GatedProvider>(open.get_future().share());
  Service svc(cfg);
  LiveServer live(svc);
  auto cli = live.client();
  const auto f = static_fixture(7);
  const std::string vid = svc.add_volume(bytes(encode_volume(f.volume)))["volume_id"];
  const auto id = svc.submit(vid, 0, f.seed, small_options());
  CHECK(cli.Get("/jobs/" + id + "/masks/0")->status == 409);
  open.set_value();
  svc.wait(id);
  CHECK(cli.Get("/jobs/" + id + "/masks/0")->status == 200);
}

TEST_CASE("state survives a restart") {
  testing::TempDir dir("service");
  const auto f = static_fixture(8);
  std::string vid, done_id;
  nlohmann::json metrics;
  {
    Service svc(identity_config(1, dir.path()));
    vid = svc.add_volume(bytes(encode_volume(f.volume)))["volume_id"];
    svc.set_groundtruth(vid, bytes(encode_mask(f.truth)));
    done_id = svc.submit(vid, 1, f.seed, small_options());
    svc.wait(done_id);
    metrics = svc.job_metrics(done_id);
  }
  Service again(identity_config(1, dir.path()));
  CHECK(again.volume_info(vid)["dims"]["depth"] == 5);
  const auto rec = again.job(done_id);
  CHECK(rec.state == JobState::done);
  CHECK(rec.options.window.radius == 2);
  for (std::size_t k = 0; k < 5; ++k) CHECK(rle_decode(again.job_mask(done_id, k)) == f.seed);
  CHECK(again.job_metrics(done_id) == metrics);
  const auto fresh = again.submit(vid, 0, f.seed, small_options());
  CHECK(fresh != done_id);
  CHECK(again.wait(fresh).state == JobState::done);
}

TEST_CASE("queued jobs resume after a restart") {
  testing::TempDir dir("service-requeue");
  const auto f = static_fixture(9);
  std::string vid, first, second;
  {
    std::promise<void> open;
    ServiceConfig cfg = identity_config(1, dir.path());
    cfg.model = std::make_shared<GatedProvider>(open.get_future().share());
    auto svc = std::make_unique<Service>(cfg);
    vid = svc->add_volume(bytes(encode_volume(f.volume)))["volume_id"];
    first = svc->submit(vid, 0, f.seed, small_options());
    second = svc->submit(vid, 0, f.seed, small_options());
    // Shut down while the first job holds the only worker.
    std::thread closer([&] { svc.reset(); });
    std::this_thread::sleep_for(200ms);
    open.set_value();
    closer.join();
  }
  const auto index = nlohmann::json::parse(std::ifstream(dir / "index.json"));
  std::map<std::string, std::string> states;
  for (const auto& j : index["jobs"]) states[j["job_id"]] = j["state"];
  CHECK(states[second] == "queued");

  Service again(identity_config(1, dir.path()));
  CHECK(again.wait(second).state == JobState::done);
  CHECK(rle_decode(again.job_mask(second, 4)) == f.seed);
}
