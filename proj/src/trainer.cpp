#include "slicetrack/trainer.hpp"

#include "slicetrack/volume_ops.hpp"

#include <chrono>
#include <cmath>

namespace slicetrack {

void TrainConfig::validate() const {
  if (epochs < 1) throw SpecError("epochs must be >= 1");
  if (batch_size < 1) throw SpecError("batch_size must be >= 1");
  if (!(initial_lr > 0.0)) throw SpecError("initial learning rate must be positive");
  if (window.radius < 0) throw SpecError("window radius must be >= 0");
  if (resize_height < 2 || resize_width < 2) throw SpecError("training resolution must be at least 2x2");
  if (corpus.empty() && (!synthetic_spec || synthetic_count == 0)) throw SpecError("training corpus is empty");
  profile.validate();
  network.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  std::vector<std::string> paths;
  for (const auto& p : c.corpus) paths.push_back(p.string());
  j = nlohmann::json{{"corpus", paths},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"initial_lr", c.initial_lr},
                     {"window_radius", c.window.radius},
                     {"profile", c.profile},
                     {"network", c.network},
                     {"resize", {c.resize_height, c.resize_width}},
                     {"rng_seed", c.rng_seed},
                     {"checkpoint_every", c.checkpoint_every},
                     {"checkpoint_path", c.checkpoint_path.string()}};
  if (c.synthetic_spec) j["synthetic"] = {{"spec", *c.synthetic_spec}, {"count", c.synthetic_count}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.corpus.clear();
  for (const auto& p : j.value("corpus", std::vector<std::string>{})) c.corpus.emplace_back(p);
  if (j.contains("synthetic")) {
    c.synthetic_spec = j.at("synthetic").at("spec").get<PhantomSpec>();
    c.synthetic_count = j.at("synthetic").at("count").get<std::size_t>();
  }
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.initial_lr = j.value("initial_lr", d.initial_lr);
  c.window.radius = j.value("window_radius", d.window.radius);
  c.profile = j.contains("profile") ? j.at("profile").get<ProfileConfig>() : d.profile;
  c.network = j.contains("network") ? j.at("network").get<NetworkConfig>() : d.network;
  if (j.contains("resize")) {
    c.resize_height = j.at("resize").at(0).get<std::size_t>();
    c.resize_width = j.at("resize").at(1).get<std::size_t>();
  }
  c.rng_seed = j.value("rng_seed", d.rng_seed);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.checkpoint_path = j.value("checkpoint_path", std::string{});
  // The input width always follows the bottleneck.
  c.network.input_channels = c.profile.channels();
}

void to_json(nlohmann::json& j, const TrainReport& r) {
  j = nlohmann::json{{"epoch_loss", r.epoch_loss},
                     {"lr_trace", r.lr_trace},
                     {"steps", r.steps},
                     {"wall_seconds", r.wall_seconds},
                     {"checkpoint", r.checkpoint.string()}};
}

TrainingCorpus build_corpus(const std::vector<Volume>& volumes, std::size_t height, std::size_t width) {
  TrainingCorpus corpus;
  for (const auto& v : volumes) {
    std::vector<SlicePlane> slices;
    for (std::size_t k = 0; k < v.depth(); ++k) slices.push_back(resize_bilinear(extract_slice(v, k), height, width));
    corpus.push_back(std::move(slices));
  }
  return corpus;
}

TrainingCorpus build_corpus(const TrainConfig& cfg) {
  std::vector<Volume> volumes;
  for (const auto& p : cfg.corpus) volumes.push_back(load_volume(p));
  if (cfg.synthetic_spec) {
    for (std::size_t i = 0; i < cfg.synthetic_count; ++i) {
      PhantomSpec s = *cfg.synthetic_spec;
      s.rng_seed += i;
      volumes.push_back(synth_generate(s).volume);
    }
  }
  return build_corpus(volumes, cfg.resize_height, cfg.resize_width);
}

PairBatch sample_adjacent_pairs(const TrainingCorpus& corpus, std::size_t count, std::mt19937_64& rng) {
  if (corpus.empty()) throw SpecError("cannot sample pairs from an empty corpus");
  for (const auto& v : corpus)
    if (v.size() < 2) throw SpecError("every training volume needs at least 2 slices");
  std::uniform_int_distribution<std::size_t> pick_volume(0, corpus.size() - 1);
  PairBatch batch;
  batch.pairs.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t v = pick_volume(rng);
    std::uniform_int_distribution<std::size_t> pick_slice(0, corpus[v].size() - 2);
    const std::size_t k = pick_slice(rng);
    batch.pairs.push_back({v, k, corpus[v][k], corpus[v][k + 1]});
  }
  return batch;
}

namespace {

template <typename T>
void require_same_dims(const Plane<T>& a, const Plane<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("slice pair dims differ");
}

}  // namespace

template <typename T>
T reconstruction_loss_value(const Network<T>& net, const Plane<T>& first, const Plane<T>& second,
                            const ProfileConfig& profile, const WindowSpec& win) {
  require_same_dims(first, second);
  const auto key = forward(net, compute_edge_profile(first, profile));
  const auto query = forward(net, compute_edge_profile(second, profile));
  const Plane<T> recon = apply_affinity(compute_affinity(key, query, win), first);
  return (second - recon).cwiseAbs().mean();
}

template <typename T>
LossAndGradients<T> reconstruction_loss(const Network<T>& net, const Plane<T>& first, const Plane<T>& second,
                                        const ProfileConfig& profile, const WindowSpec& win) {
  require_same_dims(first, second);
  ForwardTape<T> key_tape, query_tape;
  const auto key = forward(net, compute_edge_profile(first, profile), &key_tape);
  const auto query = forward(net, compute_edge_profile(second, profile), &query_tape);
  const auto aff = compute_affinity(key, query, win);
  const Plane<T> recon = apply_affinity(aff, first);
  const Plane<T> residual = second - recon;

  LossAndGradients<T> out;
  out.loss = residual.cwiseAbs().mean();
  // d mean|S2 - Ŝ2| / dŜ2 = -sign(S2 - Ŝ2) / HW, with sign(0) = 0.
  const T scale = T(-1) / static_cast<T>(residual.size());
  const Plane<T> upstream = residual.unaryExpr([&](T x) { return x > T(0) ? scale : (x < T(0) ? -scale : T(0)); });
  const auto g = affinity_backward(aff, key, query, first, upstream);
  out.grads = backward(net, key_tape, g.key);
  out.grads += backward(net, query_tape, g.query);
  return out;
}

template LossAndGradients<float> reconstruction_loss(const Network<float>&, const Plane<float>&, const Plane<float>&,
                                                     const ProfileConfig&, const WindowSpec&);
template LossAndGradients<double> reconstruction_loss(const Network<double>&, const Plane<double>&,
                                                      const Plane<double>&, const ProfileConfig&, const WindowSpec&);
template float reconstruction_loss_value(const Network<float>&, const Plane<float>&, const Plane<float>&,
                                         const ProfileConfig&, const WindowSpec&);
template double reconstruction_loss_value(const Network<double>&, const Plane<double>&, const Plane<double>&,
                                          const ProfileConfig&, const WindowSpec&);

TrainResult train(const TrainConfig& cfg, const TrainingCorpus& corpus, const EpochCallback& on_epoch) {
  cfg.validate();
  const auto started = std::chrono::steady_clock::now();
  NetworkConfig net_cfg = cfg.network;
  net_cfg.input_channels = cfg.profile.channels();

  TrainResult result{init_network<float>(net_cfg), {}, {}};
  result.adam = AdamState<float>::fresh(result.network, AdamHyper{cfg.initial_lr});
  std::mt19937_64 rng(cfg.rng_seed);

  std::size_t pairs_per_epoch = 0;
  for (const auto& v : corpus) pairs_per_epoch += v.size() - 1;
  if (pairs_per_epoch == 0) throw SpecError("training corpus has no adjacent slice pairs");

  auto write_checkpoint = [&] {
    if (cfg.checkpoint_path.empty()) return;
    save_checkpoint(result.network, &result.adam, cfg.profile, cfg.checkpoint_path);
    result.report.checkpoint = cfg.checkpoint_path;
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.initial_lr * std::pow(0.5, double(epoch));
    result.adam.hyper.learning_rate = lr;
    double loss_sum = 0.0;
    for (std::size_t done = 0; done < pairs_per_epoch;) {
      const std::size_t n = std::min(cfg.batch_size, pairs_per_epoch - done);
      const PairBatch batch = sample_adjacent_pairs(corpus, n, rng);
      auto grads = GradientSet<float>::zeros_like(result.network);
      for (const auto& pair : batch.pairs) {
        auto lg = reconstruction_loss(result.network, pair.first, pair.second, cfg.profile, cfg.window);
        if (!std::isfinite(lg.loss))
          throw TrainingError("non-finite loss at epoch " + std::to_string(epoch + 1) + " on volume " +
                              std::to_string(pair.volume) + " slices " + std::to_string(pair.slice) + "/" +
                              std::to_string(pair.slice + 1));
        loss_sum += lg.loss;
        grads += lg.grads;
      }
      grads *= 1.0f / static_cast<float>(n);
      adam_step(result.network, grads, result.adam);
      ++result.report.steps;
      done += n;
    }
    const double mean = loss_sum / double(pairs_per_epoch);
    result.report.epoch_loss.push_back(mean);
    result.report.lr_trace.push_back(lr);
    if (on_epoch) on_epoch(epoch + 1, mean, lr);
    if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) write_checkpoint();
  }
  write_checkpoint();
  result.report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

TrainResult train(const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  return train(cfg, build_corpus(cfg), on_epoch);
}

}  // namespace slicetrack
