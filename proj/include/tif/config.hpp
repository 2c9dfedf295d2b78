#pragma once

// Experiment configuration: one JSON document that fully determines a run.
// Every key is optional; missing keys take the defaults below. Unknown keys
// are rejected so typos do not silently fall back to defaults.

#include "tif/denoiser.hpp"
#include "tif/inference.hpp"
#include "tif/schedule.hpp"
#include "tif/worldgen.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace tif {

inline constexpr int kSchemaVersion = 1;

struct ScheduleConfig {
  int T{1000};
  double beta_start{1e-4};
  double beta_end{0.02};
  [[nodiscard]] Schedule make() const { return make_linear_schedule(T, beta_start, beta_end); }
};

struct TaskConfig {
  int K{4};
  std::vector<int> N{4};
  double rho{1.0};
  TestMode test_mode{TestMode::anti};
  int test_size{25};  // per class
};

struct PretrainConfig {
  OptimizerConfig opt{OptimizerConfig::Kind::adam, 1e-3, 0.9, 0.999, 1e-8, 12000, 64};
  std::string pool{"combos"};  // combos | broad
  int pool_size{4096};        // broad
  int pool_per_combo{8};      // combos
  std::uint64_t seed{7};
};

struct AdapterConfig {
  int rank{4};
  std::string subset{"last+w1"};
  float scale{1.0f};
  OptimizerConfig opt{OptimizerConfig::Kind::sgd_momentum, 0.3, 0.9, 0.999, 1e-8, 200, 32};
};

struct InferenceConfig {
  std::string scheme{"tif"};
  int grid_size{20};
  int n_noise{4};
};

struct BaselineConfig {
  double lr{0.5};
  int max_steps{5000};
};

struct AblationConfig {
  std::vector<std::string> schemes{"tif", "uniform", "snr_gamma(1)", "snr_gamma(0.1)"};
  std::vector<int> ranks{1, 2, 4, 8, 16};
  std::vector<std::string> subsets{"last", "last+w1", "last+w1+w0"};
  int samples_per_class{4};
  int sample_steps{100};
  double glyph_corr_threshold{0.8};
};

struct CurvesConfig {
  std::vector<double> distances{0.5, 1.0, 2.0, 4.0, 8.0};
};

struct ExperimentConfig {
  int schema_version{kSchemaVersion};
  WorldSpec world;
  ScheduleConfig schedule;
  TaskConfig task;
  Architecture arch;
  PretrainConfig pretrain;
  AdapterConfig adapter;
  InferenceConfig inference;
  BaselineConfig baseline;
  AblationConfig ablation;
  CurvesConfig curves;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};

  void validate() const {
    if (schema_version != kSchemaVersion) {
      throw std::invalid_argument("config: schema_version " + std::to_string(schema_version) + " unsupported (expected " +
                                  std::to_string(kSchemaVersion) + ")");
    }
    if (task.N.empty()) throw std::invalid_argument("config: task.N must list at least one shot count");
    if (seeds.empty()) throw std::invalid_argument("config: seeds must be non-empty");
    if (pretrain.pool != "broad" && pretrain.pool != "combos") {
      throw std::invalid_argument("config: pretrain.pool must be broad or combos");
    }
    if (task.test_size < 1) throw std::invalid_argument("config: task.test_size must be >= 1");
    if (inference.grid_size < 1 || inference.grid_size > schedule.T) {
      throw std::invalid_argument("config: inference.grid_size must lie in [1, T]");
    }
    if (!(arch.image == world.shape)) throw std::invalid_argument("config: denoiser image shape must match world shape");
    (void)parse_scheme(inference.scheme);
    (void)parse_subset(adapter.subset);
    for (const auto& s : ablation.schemes) (void)parse_scheme(s);
    for (const auto& s : ablation.subsets) (void)parse_subset(s);
    arch.validate();
  }
};

/// Evaluation time-steps: `count` points spaced T/count apart, ending at T.
/// t = 1 is excluded; there the noise is too small for any attribute to be
/// lost and the weighted score would be dominated by a single step.
inline std::vector<int> inference_grid(const Schedule& s, int count) {
  if (count < 1 || count > s.T()) throw std::invalid_argument("inference_grid: count must be in [1, T]");
  std::vector<int> grid;
  grid.reserve(static_cast<std::size_t>(count));
  for (int k = 1; k <= count; ++k) {
    grid.push_back(static_cast<int>(std::lround(static_cast<double>(k) * s.T() / count)));
  }
  return grid;
}

inline std::vector<Image> make_pretrain_pool(const World& world, const PretrainConfig& p) {
  return p.pool == "broad" ? make_broad_pool(world, p.pool_size, p.seed)
                           : make_pool(world, p.pool_per_combo, p.seed);
}

// ------------------------------------------------------------ JSON I/O ---

namespace detail {

using json = nlohmann::ordered_json;

/// Reads keys from a JSON object and rejects any key that was never read.
class Reader {
 public:
  Reader(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw std::invalid_argument("config: " + where_ + " must be an object");
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw std::invalid_argument("config: unknown key " + where_ + "." + key);
    }
  }
  Reader(const Reader&) = delete;
  Reader& operator=(const Reader&) = delete;

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument("config: bad value for " + where_ + "." + key + ": " + e.what());
    }
  }
  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const nlohmann::json& at(const char* key) const { return j_.at(key); }
  std::string path(const char* key) const { return where_ + "." + key; }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline void read_optimizer(const nlohmann::json& j, const std::string& where, OptimizerConfig& o) {
  Reader r(j, where);
  std::string kind = to_string(o.kind);
  r.get("optimizer", kind);
  o.kind = parse_optimizer(kind);
  r.get("lr", o.lr);
  r.get("momentum", o.momentum);
  r.get("beta2", o.beta2);
  r.get("eps", o.eps);
  r.get("steps", o.steps);
  r.get("batch", o.batch);
}

inline json write_optimizer(const OptimizerConfig& o) {
  return {{"optimizer", to_string(o.kind)}, {"lr", o.lr},   {"momentum", o.momentum}, {"beta2", o.beta2},
          {"eps", o.eps},                   {"steps", o.steps}, {"batch", o.batch}};
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  {
    detail::Reader r(j, "config");
    r.get("schema_version", c.schema_version);
    if (c.schema_version != kSchemaVersion) {
      throw std::invalid_argument("config: schema_version " + std::to_string(c.schema_version) +
                                  " unsupported (expected " + std::to_string(kSchemaVersion) + ")");
    }
    if (r.has("world")) {
      detail::Reader w(r.at("world"), "world");
      auto& s = c.world;
      w.get("channels", s.shape.channels);
      w.get("height", s.shape.height);
      w.get("width", s.shape.width);
      w.get("num_classes", s.num_classes);
      w.get("num_envs", s.num_envs);
      w.get("glyph_row", s.glyph_row);
      w.get("glyph_col", s.glyph_col);
      w.get("glyph_height", s.glyph_height);
      w.get("glyph_width", s.glyph_width);
      w.get("footprint_ratio", s.footprint_ratio);
      w.get("jitter", s.jitter);
      w.get("seed", s.seed);
    }
    if (r.has("schedule")) {
      detail::Reader s(r.at("schedule"), "schedule");
      s.get("T", c.schedule.T);
      s.get("beta_start", c.schedule.beta_start);
      s.get("beta_end", c.schedule.beta_end);
    }
    if (r.has("task")) {
      detail::Reader t(r.at("task"), "task");
      t.get("K", c.task.K);
      t.get("N", c.task.N);
      t.get("rho", c.task.rho);
      std::string mode = to_string(c.task.test_mode);
      t.get("test_mode", mode);
      c.task.test_mode = parse_test_mode(mode);
      t.get("test_size", c.task.test_size);
    }
    if (r.has("denoiser")) {
      detail::Reader d(r.at("denoiser"), "denoiser");
      d.get("time_dim", c.arch.time_dim);
      d.get("cond_dim", c.arch.cond_dim);
      d.get("hidden0", c.arch.hidden0);
      d.get("hidden1", c.arch.hidden1);
      d.get("data_std", c.arch.data_std);
    }
    c.arch.image = c.world.shape;
    if (r.has("pretrain")) {
      const auto& pj = r.at("pretrain");
      nlohmann::json opt = pj;
      detail::Reader p(pj, "pretrain");
      p.get("pool", c.pretrain.pool);
      p.get("pool_size", c.pretrain.pool_size);
      p.get("pool_per_combo", c.pretrain.pool_per_combo);
      p.get("seed", c.pretrain.seed);
      for (const char* k : {"optimizer", "lr", "momentum", "beta2", "eps", "steps", "batch"}) (void)p.has(k);
      opt.erase("pool");
      opt.erase("pool_size");
      opt.erase("pool_per_combo");
      opt.erase("seed");
      detail::read_optimizer(opt, "pretrain", c.pretrain.opt);
    }
    if (r.has("adapter")) {
      const auto& aj = r.at("adapter");
      nlohmann::json opt = aj;
      detail::Reader a(aj, "adapter");
      a.get("rank", c.adapter.rank);
      a.get("subset", c.adapter.subset);
      a.get("scale", c.adapter.scale);
      for (const char* k : {"optimizer", "lr", "momentum", "beta2", "eps", "steps", "batch"}) (void)a.has(k);
      opt.erase("rank");
      opt.erase("subset");
      opt.erase("scale");
      detail::read_optimizer(opt, "adapter", c.adapter.opt);
    }
    if (r.has("inference")) {
      detail::Reader i(r.at("inference"), "inference");
      i.get("scheme", c.inference.scheme);
      i.get("grid_size", c.inference.grid_size);
      i.get("n_noise", c.inference.n_noise);
    }
    if (r.has("baseline")) {
      detail::Reader b(r.at("baseline"), "baseline");
      b.get("lr", c.baseline.lr);
      b.get("max_steps", c.baseline.max_steps);
    }
    if (r.has("ablation")) {
      detail::Reader a(r.at("ablation"), "ablation");
      a.get("schemes", c.ablation.schemes);
      a.get("ranks", c.ablation.ranks);
      a.get("subsets", c.ablation.subsets);
      a.get("samples_per_class", c.ablation.samples_per_class);
      a.get("sample_steps", c.ablation.sample_steps);
      a.get("glyph_corr_threshold", c.ablation.glyph_corr_threshold);
    }
    if (r.has("curves")) {
      detail::Reader cv(r.at("curves"), "curves");
      cv.get("distances", c.curves.distances);
    }
    r.get("seeds", c.seeds);
  }
  c.validate();
  return c;
}

inline nlohmann::ordered_json config_to_json(const ExperimentConfig& c) {
  detail::json j;
  j["schema_version"] = c.schema_version;
  const auto& w = c.world;
  j["world"] = {{"channels", w.shape.channels},
                {"height", w.shape.height},
                {"width", w.shape.width},
                {"num_classes", w.num_classes},
                {"num_envs", w.num_envs},
                {"glyph_row", w.glyph_row},
                {"glyph_col", w.glyph_col},
                {"glyph_height", w.glyph_height},
                {"glyph_width", w.glyph_width},
                {"footprint_ratio", w.footprint_ratio},
                {"jitter", w.jitter},
                {"seed", w.seed}};
  j["schedule"] = {{"T", c.schedule.T}, {"beta_start", c.schedule.beta_start}, {"beta_end", c.schedule.beta_end}};
  j["task"] = {{"K", c.task.K},
               {"N", c.task.N},
               {"rho", c.task.rho},
               {"test_mode", to_string(c.task.test_mode)},
               {"test_size", c.task.test_size}};
  j["denoiser"] = {{"time_dim", c.arch.time_dim},
                   {"cond_dim", c.arch.cond_dim},
                   {"hidden0", c.arch.hidden0},
                   {"hidden1", c.arch.hidden1},
                   {"data_std", c.arch.data_std}};
  auto pre = detail::write_optimizer(c.pretrain.opt);
  pre["pool"] = c.pretrain.pool;
  pre["pool_size"] = c.pretrain.pool_size;
  pre["pool_per_combo"] = c.pretrain.pool_per_combo;
  pre["seed"] = c.pretrain.seed;
  j["pretrain"] = pre;
  auto ad = detail::write_optimizer(c.adapter.opt);
  ad["rank"] = c.adapter.rank;
  ad["subset"] = c.adapter.subset;
  ad["scale"] = c.adapter.scale;
  j["adapter"] = ad;
  j["inference"] = {{"scheme", c.inference.scheme},
                    {"grid_size", c.inference.grid_size},
                    {"n_noise", c.inference.n_noise}};
  j["baseline"] = {{"lr", c.baseline.lr}, {"max_steps", c.baseline.max_steps}};
  j["ablation"] = {{"schemes", c.ablation.schemes},
                   {"ranks", c.ablation.ranks},
                   {"subsets", c.ablation.subsets},
                   {"samples_per_class", c.ablation.samples_per_class},
                   {"sample_steps", c.ablation.sample_steps},
                   {"glyph_corr_threshold", c.ablation.glyph_corr_threshold}};
  j["curves"] = {{"distances", c.curves.distances}};
  j["seeds"] = c.seeds;
  return j;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

inline void save_config(const std::filesystem::path& path, const ExperimentConfig& c) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << config_to_json(c).dump(2) << '\n';
}

}  // namespace tif
