#include "slicetrack/eval.hpp"

#include "slicetrack/checkpoint.hpp"
#include "slicetrack/volume_ops.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

namespace slicetrack {

std::size_t select_seed_slice(const MaskVolume& truth, std::mt19937_64& rng) {
  const std::size_t D = truth.depth();
  std::size_t best = 0, best_area = 0;
  for (std::size_t k = 0; k < D; ++k) {
    const std::size_t area = truth.count(k);
    if (area > best_area) {
      best_area = area;
      best = k;
    }
  }
  if (best_area == 0) throw SeedError("ground truth is empty on every slice");
  std::vector<std::size_t> candidates;
  const std::size_t lo = best >= 3 ? best - 3 : 0;
  const std::size_t hi = std::min(D - 1, best + 3);
  for (std::size_t k = lo; k <= hi; ++k)
    if (truth.count(k) > 0) candidates.push_back(k);
  std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
  return candidates[pick(rng)];
}

MaskVolume baseline_static_copy(const Volume& volume, const MaskPlane& seed, std::size_t seed_index) {
  if (seed_index >= volume.depth()) throw RangeError("seed index out of range");
  MaskVolume out(volume.height(), volume.width(), volume.depth());
  for (std::size_t k = 0; k < volume.depth(); ++k) out.set_plane(k, seed);
  return out;
}

void aggregate(MethodRow& row) {
  if (row.volumes.empty()) return;
  double sum = 0.0;
  for (const auto& v : row.volumes) sum += v.dice;
  row.mean = sum / double(row.volumes.size());
  double sq = 0.0;
  for (const auto& v : row.volumes) sq += (v.dice - row.mean) * (v.dice - row.mean);
  row.std_dev = std::sqrt(sq / double(row.volumes.size()));
}

std::vector<GridPoint> full_ablation_grid() {
  return {{false, false}, {true, false}, {false, true}, {true, true}};
}

std::string method_name(const GridPoint& g) {
  std::string name = "network";
  if (g.verification) name += "+verification";
  if (g.edge_profile) name += "+edge-profile";
  return name;
}

EvalReport evaluate(const std::vector<EvalCase>& cases, const std::vector<EvalMethod>& methods, std::uint64_t seed,
                    std::size_t threads) {
  using clock = std::chrono::steady_clock;
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> seeds;
  for (const auto& c : cases) {
    if (!same_dims(c.volume, c.truth)) throw DimensionError("ground truth dims do not match volume " + c.id);
    seeds.push_back(select_seed_slice(c.truth, rng));
  }

  EvalReport report;
  auto run_row = [&](MethodRow row, const MethodRunner& run) {
    row.volumes.resize(cases.size());
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
      for (std::size_t i; (i = next++) < cases.size();) {
        try {
          const auto& c = cases[i];
          const MaskPlane seed_mask = c.truth.plane(seeds[i]);
          const auto t0 = clock::now();
          const MaskVolume predicted = run(c.volume, seed_mask, seeds[i]);
          const double seconds = std::chrono::duration<double>(clock::now() - t0).count();
          row.volumes[i] = {c.id, seeds[i], dice(predicted, c.truth), seconds};
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    };
    const auto t0 = clock::now();
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < std::min(std::max<std::size_t>(threads, 1), cases.size()); ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
    const double wall = std::chrono::duration<double>(clock::now() - t0).count();
    std::size_t total_slices = 0;
    for (const auto& c : cases) total_slices += c.volume.depth();
    aggregate(row);
    row.slices_per_second = wall > 0 ? double(total_slices) / wall : 0.0;
    report.rows.push_back(std::move(row));
  };

  for (const auto& m : methods) {
    MethodRow row;
    row.name = m.name;
    row.edge_profile = m.edge_profile;
    row.verification = m.verification;
    run_row(std::move(row), m.run);
  }
  MethodRow baseline;
  baseline.name = "static-copy";
  baseline.baseline = true;
  run_row(std::move(baseline), baseline_static_copy);
  return report;
}

void from_json(const nlohmann::json& j, EvalConfig& c) {
  c.corpus.clear();
  for (const auto& e : j.value("corpus", nlohmann::json::array()))
    c.corpus.emplace_back(e.at("id").get<std::string>(), e.at("volume").get<std::string>(),
                          e.at("groundtruth").get<std::string>());
  if (j.contains("synthetic")) {
    c.synthetic_spec = j.at("synthetic").at("spec").get<PhantomSpec>();
    c.synthetic_count = j.at("synthetic").at("count").get<std::size_t>();
  }
  c.checkpoint = j.value("checkpoint", std::string{});
  c.checkpoint_raw = j.value("checkpoint_raw", std::string{});
  if (j.contains("grid")) {
    c.grid.clear();
    for (const auto& g : j.at("grid"))
      c.grid.push_back({g.value("edge_profile", true), g.value("verification", true)});
  }
  if (j.contains("options")) c.options = j.at("options").get<PropagateOptions>();
  c.seed = j.value("seed", std::uint64_t{0});
  c.threads = j.value("threads", std::size_t{1});
  c.report_path = j.value("report", std::string{});
  c.table_path = j.value("table", std::string{});
  c.csv_path = j.value("csv", std::string{});
}

std::vector<EvalCase> load_cases(const EvalConfig& cfg) {
  std::vector<EvalCase> cases;
  for (const auto& [id, volume, truth] : cfg.corpus) {
    EvalCase c{id, load_volume(volume), load_mask(truth)};
    if (!same_dims(c.volume, c.truth)) throw DimensionError("ground truth dims do not match volume " + id);
    cases.push_back(std::move(c));
  }
  if (cfg.synthetic_spec) {
    for (std::size_t i = 0; i < cfg.synthetic_count; ++i) {
      PhantomSpec s = *cfg.synthetic_spec;
      s.rng_seed += i;
      auto p = synth_generate(s);
      cases.push_back({"phantom-" + std::to_string(s.rng_seed), std::move(p.volume), std::move(p.truth)});
    }
  }
  if (cases.empty()) throw SpecError("evaluation corpus is empty");
  return cases;
}

std::vector<EvalMethod> network_methods(const EvalConfig& cfg) {
  std::shared_ptr<NetworkCorrespondence> with_profile, raw;
  for (const auto& g : cfg.grid) {
    auto& slot = g.edge_profile ? with_profile : raw;
    if (slot) continue;
    const auto& path = g.edge_profile ? cfg.checkpoint : cfg.checkpoint_raw;
    if (path.empty())
      throw ConfigMismatchError(std::string("grid needs a ") + (g.edge_profile ? "edge-profile" : "raw-intensity") +
                                " checkpoint but none was configured");
    slot = NetworkCorrespondence::from_checkpoint(load_checkpoint(path));
    if (slot->profile().enabled != g.edge_profile)
      throw ConfigMismatchError("checkpoint " + path.string() + " does not match the requested input mode");
  }
  std::vector<EvalMethod> methods;
  for (const auto& g : cfg.grid) {
    PropagateOptions opts = cfg.options;
    opts.edge_profile = g.edge_profile;
    opts.verification = g.verification;
    std::shared_ptr<const CorrespondenceProvider> provider = g.edge_profile ? with_profile : raw;
    methods.push_back({method_name(g), g.edge_profile, g.verification,
                       [provider, opts](const Volume& v, const MaskPlane& seed, std::size_t k) {
                         return propagate_volume(*provider, v, seed, k, opts).masks;
                       }});
  }
  return methods;
}

namespace {
void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}
}  // namespace

EvalReport evaluate(const EvalConfig& cfg) {
  const auto methods = network_methods(cfg);
  const auto report = evaluate(load_cases(cfg), methods, cfg.seed, cfg.threads);
  if (!cfg.report_path.empty()) write_text(cfg.report_path, nlohmann::json(report).dump(2) + "\n");
  if (!cfg.table_path.empty()) write_text(cfg.table_path, format_table(report));
  if (!cfg.csv_path.empty()) write_text(cfg.csv_path, format_csv(report));
  return report;
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json::object();
  auto& rows = j["rows"] = nlohmann::json::array();
  for (const auto& row : r.rows) {
    nlohmann::json vols = nlohmann::json::array();
    for (const auto& v : row.volumes)
      vols.push_back({{"id", v.id}, {"seed_index", v.seed_index}, {"dice", v.dice}, {"seconds", v.seconds}});
    rows.push_back({{"name", row.name},
                    {"baseline", row.baseline},
                    {"edge_profile", row.edge_profile},
                    {"verification", row.verification},
                    {"mean", row.mean},
                    {"std", row.std_dev},
                    {"slices_per_second", row.slices_per_second},
                    {"volumes", vols}});
  }
}

std::string format_table(const EvalReport& r) {
  std::size_t width = 6;
  for (const auto& row : r.rows) width = std::max(width, row.name.size());
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(width)) << "method" << "  " << std::right << std::setw(8) << "mean"
      << std::setw(8) << "std" << std::setw(12) << "slices/s" << "\n";
  out << std::fixed;
  for (const auto& row : r.rows)
    out << std::left << std::setw(static_cast<int>(width)) << row.name << "  " << std::right << std::setprecision(1)
        << std::setw(8) << row.mean << std::setw(8) << row.std_dev << std::setprecision(2) << std::setw(12)
        << row.slices_per_second << "\n";
  return out.str();
}

std::string format_csv(const EvalReport& r) {
  std::ostringstream out;
  out << "method,volume,seed_index,dice,seconds\n";
  out << std::setprecision(17);
  for (const auto& row : r.rows)
    for (const auto& v : row.volumes)
      out << row.name << ',' << v.id << ',' << v.seed_index << ',' << v.dice << ',' << v.seconds << "\n";
  return out.str();
}

}  // namespace slicetrack
