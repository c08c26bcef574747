// Command-line front end: train, propagate, eval, synth, serve.

#include "slicetrack/eval.hpp"
#include "slicetrack/phantom.hpp"
#include "slicetrack/service.hpp"
#include "slicetrack/trainer.hpp"
#include "slicetrack/volume_ops.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace slicetrack;

namespace {

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return nlohmann::json::parse(in);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

int run_train(const fs::path& config, const fs::path& out) {
  TrainConfig cfg = read_json(config).get<TrainConfig>();
  cfg.checkpoint_path = out;
  const auto result = train(cfg, [](std::size_t epoch, double loss, double lr) {
    std::cerr << "epoch=" << epoch << " loss=" << loss << " lr=" << lr << "\n";
  });
  std::cout << nlohmann::json(result.report).dump(2) << "\n";
  return 0;
}

struct PropagateArgs {
  fs::path model, volume, seed_mask, out, groundtruth;
  std::size_t seed_index = 0;
  bool no_verify = false;
  bool no_edge_profile = false;
  PropagateOptions options;
};

int run_propagate(PropagateArgs a) {
  a.options.verification = !a.no_verify;
  a.options.edge_profile = !a.no_edge_profile;
  a.options.validate();
  const auto provider = NetworkCorrespondence::from_checkpoint(load_checkpoint(a.model));
  const Volume volume = load_volume(a.volume);
  const MaskVolume seeds = load_mask(a.seed_mask);
  if (seeds.height() != volume.height() || seeds.width() != volume.width())
    throw DimensionError("seed mask dims do not match the volume");
  // Single-plane seed file, or a full annotation volume read at the seed index.
  const MaskPlane seed = seeds.plane(seeds.depth() == 1 ? 0 : a.seed_index);

  const auto result = propagate_volume(*provider, volume, seed, a.seed_index, a.options,
                                       [](std::size_t done, std::size_t total) {
                                         std::cerr << "\rslice " << done << "/" << total << std::flush;
                                       });
  std::cerr << "\n";
  fs::create_directories(a.out);
  save_mask(result.masks, a.out / "masks.smk");
  nlohmann::json sidecar = result;
  sidecar["seed_index"] = a.seed_index;
  sidecar["options"] = a.options;
  sidecar["model"] = a.model.string();
  sidecar["volume"] = a.volume.string();
  if (!a.groundtruth.empty()) {
    const MaskVolume truth = load_mask(a.groundtruth);
    if (!same_dims(volume, truth)) throw DimensionError("ground truth dims do not match the volume");
    std::vector<double> per_slice;
    for (std::size_t k = 0; k < truth.depth(); ++k) per_slice.push_back(dice(result.masks.plane(k), truth.plane(k)));
    sidecar["per_slice_dice"] = per_slice;
    sidecar["volume_dice"] = dice(result.masks, truth);
  }
  sidecar["slices_per_second"] = result.total_seconds > 0 ? double(volume.depth()) / result.total_seconds : 0.0;
  write_json(a.out / "result.json", sidecar);
  return 0;
}

int run_eval(const fs::path& config) {
  const EvalConfig cfg = read_json(config).get<EvalConfig>();
  std::cout << format_table(evaluate(cfg));
  return 0;
}

int run_synth(const fs::path& spec_path, const fs::path& out, std::size_t count) {
  const PhantomSpec base = read_json(spec_path).get<PhantomSpec>();
  fs::create_directories(out);
  nlohmann::json manifest = nlohmann::json::array();
  for (std::size_t i = 0; i < count; ++i) {
    PhantomSpec s = base;
    s.rng_seed += i;
    const auto p = synth_generate(s);
    const std::string stem = "phantom-" + std::to_string(s.rng_seed);
    save_volume(p.volume, out / (stem + ".svl"));
    save_mask(p.truth, out / (stem + ".gt.smk"));
    manifest.push_back({{"id", stem}, {"volume", stem + ".svl"}, {"groundtruth", stem + ".gt.smk"}, {"spec", s}});
  }
  write_json(out / "manifest.json", manifest);
  return 0;
}

HttpServer* active_server = nullptr;

void on_signal(int) {
  if (active_server) active_server->stop();
}

int run_serve(const std::string& host, int port, fs::path data, std::size_t workers, const fs::path& model,
              const fs::path& raw_model, const fs::path& ui) {
  if (const char* env = std::getenv("SLI2VOL_DATA"); env && *env) data = env;
  ServiceConfig cfg;
  cfg.model = NetworkCorrespondence::from_checkpoint(load_checkpoint(model));
  if (!raw_model.empty()) cfg.raw_model = NetworkCorrespondence::from_checkpoint(load_checkpoint(raw_model));
  cfg.workers = workers;
  cfg.data_dir = data;
  Service service(cfg);
  HttpServer server(service, ui);
  const int bound = server.bind(host, port);
  std::cerr << "listening on " << host << ":" << bound << "\n";
  active_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  server.listen();
  active_server = nullptr;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Slice-to-volume propagation of a single-slice annotation"};
  app.require_subcommand(1);

  fs::path train_config, train_out;
  auto* train_cmd = app.add_subcommand("train", "Self-supervised training from a JSON config");
  train_cmd->add_option("--config", train_config, "Training config JSON")->required();
  train_cmd->add_option("--out", train_out, "Checkpoint path")->required();

  PropagateArgs prop;
  auto* prop_cmd = app.add_subcommand("propagate", "Propagate a seed mask through a volume");
  prop_cmd->add_option("--model", prop.model, "Checkpoint")->required();
  prop_cmd->add_option("--volume", prop.volume, "SVL1 volume")->required();
  prop_cmd->add_option("--seed-mask", prop.seed_mask, "SMK1 seed mask (one plane or full depth)")->required();
  prop_cmd->add_option("--seed-index", prop.seed_index, "Seed slice index")->required();
  prop_cmd->add_option("--out", prop.out, "Output directory")->required();
  prop_cmd->add_option("--groundtruth", prop.groundtruth, "SMK1 ground truth; adds Dice to the sidecar");
  prop_cmd->add_flag("--no-verify", prop.no_verify, "Disable intensity verification");
  prop_cmd->add_flag("--no-edge-profile", prop.no_edge_profile, "Raw-intensity network input");
  prop_cmd->add_option("--threshold", prop.options.threshold, "Binarization threshold");
  prop_cmd->add_option("--dilate", prop.options.dilation_radius, "Dilation radius for the verification band");
  prop_cmd->add_option("--radius", prop.options.window.radius, "Affinity window radius");

  fs::path eval_config;
  auto* eval_cmd = app.add_subcommand("eval", "Dice evaluation over a corpus and ablation grid");
  eval_cmd->add_option("--config", eval_config, "Evaluation config JSON")->required();

  fs::path synth_spec, synth_out;
  std::size_t synth_count = 1;
  auto* synth_cmd = app.add_subcommand("synth", "Generate synthetic phantoms with ground truth");
  synth_cmd->add_option("--spec", synth_spec, "Phantom spec JSON")->required();
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();
  synth_cmd->add_option("--count", synth_count, "Number of phantoms (seeds spec.rng_seed + i)");

  std::string host = "127.0.0.1";
  int port = 8080;
  fs::path data, model, raw_model, ui;
  std::size_t workers = 1;
  auto* serve_cmd = app.add_subcommand("serve", "HTTP service");
  serve_cmd->add_option("--host", host, "Bind address");
  serve_cmd->add_option("--port", port, "Port (0 picks a free one)");
  serve_cmd->add_option("--data", data, "Persistence directory (SLI2VOL_DATA overrides)");
  serve_cmd->add_option("--workers", workers, "Concurrent propagation jobs");
  serve_cmd->add_option("--model", model, "Edge-profile checkpoint")->required();
  serve_cmd->add_option("--model-raw", raw_model, "Raw-intensity checkpoint for edge_profile=false jobs");
  serve_cmd->add_option("--ui", ui, "Static UI directory mounted at /ui");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) return run_train(train_config, train_out);
    if (*prop_cmd) return run_propagate(prop);
    if (*eval_cmd) return run_eval(eval_config);
    if (*synth_cmd) return run_synth(synth_spec, synth_out, synth_count);
    if (*serve_cmd) return run_serve(host, port, data, workers, model, raw_model, ui);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
