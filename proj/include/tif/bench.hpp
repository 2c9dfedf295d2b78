#pragma once

// The five bench commands behind tif_bench. Every command writes the exact
// config it ran with to <out>/config.json.
//
//   gen-world   <out>/world.json, <out>/tasks/<task_id>/ (see dataset.hpp)
//   pretrain    <out>/base.bin, <out>/base.json, <out>/pretrain_loss.csv
//   run         appends to <out>/results.csv
//   curves      <out>/curves_err.csv, or <out>/weights_<scheme>.csv per
//               ablation scheme (snr_gamma(0.1) -> weights_snr_gamma_0.1.csv)
//   ablate      <out>/ablate_<axis>.csv; the rank axis also writes
//               <out>/samples/rank_<r>/*.pgm and <out>/rank_selection.csv
//
// Tasks are regenerated from the config on every command, so run and ablate
// only need the pretrained base.

#include "tif/attrloss.hpp"
#include "tif/config.hpp"
#include "tif/container.hpp"
#include "tif/dataset.hpp"
#include "tif/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tif::bench {

namespace fs = std::filesystem;

/// A required input file is absent; the message says how to produce it.
class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void prepare_out(const ExperimentConfig& cfg, const fs::path& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw std::runtime_error("cannot create output directory " + out.string());
  save_config(out / "config.json", cfg);
}

inline FewShotTask make_task(const World& world, const ExperimentConfig& cfg, int N, std::uint64_t seed) {
  return sample_task(world, cfg.task.K, N, cfg.task.rho, cfg.task.test_size, cfg.task.test_mode, seed);
}

/// File-name form of a scheme: snr_gamma(0.1) -> snr_gamma_0.1.
inline std::string scheme_slug(const std::string& name) {
  std::string out;
  for (const char c : name) {
    if (c == '(') out += '_';
    else if (c != ')') out += c;
  }
  return out;
}

inline std::string make_task_id(const ExperimentConfig& cfg, int N, std::uint64_t seed) {
  return task_id(cfg.task.K, N, cfg.task.rho, cfg.task.test_mode, seed);
}

// ------------------------------------------------------------ gen-world ---

struct WorldSummary {
  PremiseCheck premise;
  double env_amplitude{0.0};
  std::vector<std::string> task_ids;
};

inline WorldSummary cmd_gen_world(const ExperimentConfig& cfg, const fs::path& out, std::ostream& log) {
  prepare_out(cfg, out);
  const World world = build_world(cfg.world);
  WorldSummary sum;
  sum.premise = check_premise(world, 2048, cfg.world.seed);
  sum.env_amplitude = world.env_amplitude();
  log << "world: env amplitude " << sum.env_amplitude << ", flip distance medians nuance "
      << sum.premise.nuance_median << " env " << sum.premise.env_median << ", fosd "
      << (sum.premise.holds ? "holds" : "FAILS") << '\n';
  for (const int N : cfg.task.N) {
    for (const auto seed : cfg.seeds) {
      const auto id = make_task_id(cfg, N, seed);
      write_task(out / "tasks" / id, make_task(world, cfg, N, seed));
      sum.task_ids.push_back(id);
    }
  }
  nlohmann::ordered_json j = {{"env_amplitude", sum.env_amplitude},
                              {"glyph_pixels", world.glyph_elements().size()},
                              {"env_pixels", world.env_elements().size()},
                              {"nuance_flip_median", sum.premise.nuance_median},
                              {"env_flip_median", sum.premise.env_median},
                              {"fosd_holds", sum.premise.holds},
                              {"tasks", sum.task_ids}};
  std::ofstream(out / "world.json") << j.dump(2) << '\n';
  log << "wrote " << sum.task_ids.size() << " tasks under " << (out / "tasks").string() << '\n';
  return sum;
}

// ------------------------------------------------------------- pretrain ---

/// The part of the config a base checkpoint depends on.
inline nlohmann::ordered_json base_fingerprint(const ExperimentConfig& cfg) {
  const auto j = config_to_json(cfg);
  return {{"world", j["world"]}, {"schedule", j["schedule"]}, {"denoiser", j["denoiser"]}, {"pretrain", j["pretrain"]}};
}

inline Params cmd_pretrain(const ExperimentConfig& cfg, const fs::path& out, std::ostream& log) {
  prepare_out(cfg, out);
  const World world = build_world(cfg.world);
  const auto s = cfg.schedule.make();
  const auto pool = make_pretrain_pool(world, cfg.pretrain);
  log << "pretrain: " << pool.size() << " pool images, " << cfg.pretrain.opt.steps << " steps\n";
  TrainLog tl;
  const auto start = std::chrono::steady_clock::now();
  const int every = std::max(1, cfg.pretrain.opt.steps / 10);
  const auto params = pretrain_base(cfg.arch, pool, s, cfg.pretrain.opt, cfg.pretrain.seed, &tl, [&](int step, double) {
    if ((step + 1) % every == 0) {
      log << "  step " << step + 1 << " loss " << tl.tail(static_cast<std::size_t>(every)) << " ("
          << seconds_since(start) << " s)\n";
    }
  });
  save_base(out / "base.bin", params);
  std::ofstream(out / "base.json") << base_fingerprint(cfg).dump(2) << '\n';
  std::ofstream csv(out / "pretrain_loss.csv");
  csv << "step,loss\n";
  csv.precision(9);
  for (std::size_t i = 0; i < tl.loss.size(); ++i) csv << i + 1 << ',' << tl.loss[i] << '\n';
  log << "saved " << (out / "base.bin").string() << '\n';
  return params;
}

/// Loads <out>/base.bin and checks it was trained under this config.
inline Params load_pretrained(const ExperimentConfig& cfg, const fs::path& out) {
  const auto bin = out / "base.bin";
  if (!fs::exists(bin)) {
    throw MissingArtifact("missing " + bin.string() + "; run `tif_bench pretrain --config <cfg> --out " +
                          out.string() + "` first");
  }
  std::ifstream fp(out / "base.json");
  if (fp) {
    const auto stored = nlohmann::ordered_json::parse(fp);
    if (stored != base_fingerprint(cfg)) {
      throw MissingArtifact(bin.string() + " was pretrained under a different world/schedule/denoiser/pretrain "
                            "config; rerun `tif_bench pretrain` for this config");
    }
  }
  return load_base(bin, cfg.arch);
}

// ------------------------------------------------------------------ run ---

inline void append_rows(const fs::path& csv, const std::vector<ResultRow>& rows) {
  const bool fresh = !fs::exists(csv) || fs::file_size(csv) == 0;
  std::ofstream os(csv, std::ios::app);
  if (!os) throw std::runtime_error("cannot write " + csv.string());
  os.precision(10);
  if (fresh) os << kResultHeader << '\n';
  for (const auto& r : rows) write_result_row(os, r);
}

inline std::vector<ResultRow> cmd_run(const ExperimentConfig& cfg, const fs::path& out, std::ostream& log) {
  const auto params = load_pretrained(cfg, out);
  prepare_out(cfg, out);
  const World world = build_world(cfg.world);
  const auto s = cfg.schedule.make();
  std::vector<ResultRow> rows;
  for (const int N : cfg.task.N) {
    for (const auto seed : cfg.seeds) {
      const auto task = make_task(world, cfg, N, seed);
      const auto id = make_task_id(cfg, N, seed);
      for (auto& r : run_baselines(task, cfg.baseline, id)) rows.push_back(std::move(r));
      const auto ev = evaluate_tif(params, task, s, cfg, cfg.adapter.rank, cfg.adapter.subset);
      rows.push_back(tif_row(ev, task, s, cfg.inference.scheme, cfg.adapter.rank, cfg.adapter.subset, id));
      log << id << ": tif " << rows.back().accuracy << ", prototype " << rows[rows.size() - 3].accuracy
          << ", linear " << rows[rows.size() - 2].accuracy << '\n';
    }
  }
  append_rows(out / "results.csv", rows);
  return rows;
}

// --------------------------------------------------------------- curves ---

enum class CurveKind { err, weights };

inline CurveKind parse_curve_kind(const std::string& s) {
  if (s == "err") return CurveKind::err;
  if (s == "weights") return CurveKind::weights;
  throw std::invalid_argument("unknown curve '" + s + "' (expected err|weights)");
}

/// err: Err over the configured distances and every t. weights: each
/// ablation scheme over every t, with delta* from the first configured task.
inline std::vector<fs::path> cmd_curves(const ExperimentConfig& cfg, const fs::path& out, CurveKind which,
                                        std::ostream& log) {
  prepare_out(cfg, out);
  const auto s = cfg.schedule.make();
  std::vector<int> all(static_cast<std::size_t>(s.T()));
  for (int t = 1; t <= s.T(); ++t) all[static_cast<std::size_t>(t - 1)] = t;
  std::vector<fs::path> written;
  if (which == CurveKind::err) {
    const auto path = out / "curves_err.csv";
    std::ofstream os(path);
    make_loss_curve(s, cfg.curves.distances, all).write_csv(os);
    written.push_back(path);
  } else {
    const World world = build_world(cfg.world);
    const auto task = make_task(world, cfg, cfg.task.N.front(), cfg.seeds.front());
    const double delta = estimate_delta_star(task.train);
    log << "delta* = " << delta << " from task " << make_task_id(cfg, cfg.task.N.front(), cfg.seeds.front())
        << '\n';
    for (const auto& name : cfg.ablation.schemes) {
      const auto w = timestep_weights(s, delta, all, parse_scheme(name));
      const auto path = out / ("weights_" + scheme_slug(w.scheme.name()) + ".csv");
      std::ofstream os(path);
      write_weight_csv(os, s, w);
      written.push_back(path);
    }
  }
  for (const auto& p : written) log << "wrote " << p.string() << '\n';
  return written;
}

// --------------------------------------------------------------- ablate ---

enum class Axis { weights, rank, subset };

inline Axis parse_axis(const std::string& s) {
  if (s == "weights") return Axis::weights;
  if (s == "rank") return Axis::rank;
  if (s == "subset") return Axis::subset;
  throw std::invalid_argument("unknown axis '" + s + "' (expected weights|rank|subset)");
}

struct RankInspection {
  int rank{0};
  double mean_glyph_corr{0.0};
  double mean_accuracy{0.0};
};

struct AblationResult {
  std::vector<ResultRow> rows;
  std::vector<RankInspection> ranks;  // rank axis only
  int selected_rank{0};               // rank axis only
};

inline AblationResult cmd_ablate(const ExperimentConfig& cfg, const fs::path& out, Axis axis, std::ostream& log) {
  const auto params = load_pretrained(cfg, out);
  prepare_out(cfg, out);
  const World world = build_world(cfg.world);
  const auto s = cfg.schedule.make();
  AblationResult res;

  auto for_tasks = [&](auto&& body) {
    for (const int N : cfg.task.N) {
      for (const auto seed : cfg.seeds) body(make_task(world, cfg, N, seed), make_task_id(cfg, N, seed));
    }
  };

  switch (axis) {
    case Axis::weights:
      for_tasks([&](const FewShotTask& task, const std::string& id) {
        const auto ev = evaluate_tif(params, task, s, cfg, cfg.adapter.rank, cfg.adapter.subset);
        for (const auto& scheme : cfg.ablation.schemes) {
          res.rows.push_back(tif_row(ev, task, s, scheme, cfg.adapter.rank, cfg.adapter.subset, id));
          log << id << ' ' << res.rows.back().scheme << ": " << res.rows.back().accuracy << '\n';
        }
      });
      break;
    case Axis::subset:
      for (const auto& subset : cfg.ablation.subsets) {
        for_tasks([&](const FewShotTask& task, const std::string& id) {
          const auto ev = evaluate_tif(params, task, s, cfg, cfg.adapter.rank, subset);
          res.rows.push_back(tif_row(ev, task, s, cfg.inference.scheme, cfg.adapter.rank, subset, id));
          log << id << ' ' << subset << ": " << res.rows.back().accuracy << '\n';
        });
      }
      break;
    case Axis::rank: {
      std::vector<double> corr;
      for (const int rank : cfg.ablation.ranks) {
        const auto dir = out / "samples" / ("rank_" + std::to_string(rank));
        fs::create_directories(dir);
        double corr_sum = 0.0, acc_sum = 0.0;
        int n_samples = 0, n_tasks = 0;
        for_tasks([&](const FewShotTask& task, const std::string& id) {
          const auto ev = evaluate_tif(params, task, s, cfg, rank, cfg.adapter.subset);
          res.rows.push_back(tif_row(ev, task, s, cfg.inference.scheme, rank, cfg.adapter.subset, id));
          acc_sum += res.rows.back().accuracy;
          ++n_tasks;
          for (int c = 0; c < task.K; ++c) {
            for (int k = 0; k < cfg.ablation.samples_per_class; ++k) {
              const auto img = sample_image(params, &ev.bank[static_cast<std::size_t>(c)], s, cfg.ablation.sample_steps,
                                            derive_seed(task.seed, {0x73616D70ULL, static_cast<std::uint64_t>(c),
                                                                    static_cast<std::uint64_t>(k)}));
              write_pgm(dir / (id + "_class" + std::to_string(c) + "_" + std::to_string(k) + ".pgm"), img);
              corr_sum += glyph_correlation(world, img, task.class_ids[static_cast<std::size_t>(c)]);
              ++n_samples;
            }
          }
        });
        RankInspection ri{rank, n_samples > 0 ? corr_sum / n_samples : 0.0, acc_sum / std::max(1, n_tasks)};
        corr.push_back(ri.mean_glyph_corr);
        res.ranks.push_back(ri);
        log << "rank " << rank << ": mean glyph correlation " << ri.mean_glyph_corr << ", mean accuracy "
            << ri.mean_accuracy << '\n';
      }
      res.selected_rank = select_rank(cfg.ablation.ranks, corr, cfg.ablation.glyph_corr_threshold);
      std::ofstream sel(out / "rank_selection.csv");
      sel << "rank,mean_glyph_corr,mean_accuracy,selected\n";
      for (const auto& ri : res.ranks) {
        sel << ri.rank << ',' << ri.mean_glyph_corr << ',' << ri.mean_accuracy << ','
            << (ri.rank == res.selected_rank ? 1 : 0) << '\n';
      }
      log << "selected rank " << res.selected_rank << '\n';
      break;
    }
  }
  const char* name = axis == Axis::weights ? "weights" : axis == Axis::rank ? "rank" : "subset";
  const auto csv = out / (std::string("ablate_") + name + ".csv");
  fs::remove(csv);
  append_rows(csv, res.rows);
  return res;
}

}  // namespace tif::bench
