#pragma once

// End-to-end experiment steps shared by the CLI and the acceptance suite.

#include "tif/baseline.hpp"
#include "tif/config.hpp"
#include "tif/denoiser.hpp"
#include "tif/inference.hpp"
#include "tif/metrics.hpp"
#include "tif/parallel.hpp"
#include "tif/worldgen.hpp"

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace tif {

inline std::vector<Image> class_images(const FewShotTask& task, int label) {
  std::vector<Image> out;
  for (const auto& s : task.train) {
    if (s.label == label) out.push_back(s.image);
  }
  return out;
}

/// One adapter per task label, each trained on its own derived seed stream,
/// so the result does not depend on how classes are spread over workers.
inline AdapterBank train_bank(const Params& params, const FewShotTask& task, const Schedule& s, int rank,
                              const std::vector<LayerId>& subset, float scale, const OptimizerConfig& opt,
                              std::uint64_t seed) {
  AdapterBank bank(static_cast<std::size_t>(task.K));
  parallel_for(bank.size(), [&](std::size_t c) {
    const auto images = class_images(task, static_cast<int>(c));
    const auto cs = derive_seed(seed, {0x6164617074ULL, c});
    Adapter ad = inject_lora(params, rank, subset, derive_seed(cs, {1}), scale);
    bank[c] = train_adapter(params, std::move(ad), images, s, opt, derive_seed(cs, {2}));
  });
  return bank;
}

/// class_losses for every test image, on a seed derived per image.
inline std::vector<Eigen::MatrixXd> loss_tables(const Params& params, const AdapterBank& bank,
                                                std::span<const Sample> test, const Schedule& s,
                                                std::span<const int> grid, int n_noise, std::uint64_t seed) {
  std::vector<Eigen::MatrixXd> tables(test.size());
  parallel_for(test.size(), [&](std::size_t i) {
    tables[i] = class_losses(params, bank, test[i].image, s, grid, n_noise, derive_seed(seed, {0x696D67ULL, i}));
  });
  return tables;
}

inline std::vector<int> predict(const std::vector<Eigen::MatrixXd>& tables, const TimestepWeights& w) {
  std::vector<int> out;
  out.reserve(tables.size());
  for (const auto& t : tables) out.push_back(classify(weighted_scores(t, w)));
  return out;
}

inline std::vector<int> labels_of(std::span<const Sample> samples) {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

struct ResultRow {
  std::string task_id;
  std::string method;
  std::string scheme;
  int rank{0};
  std::string subset;
  int K{0};
  int N{0};
  double rho{0.0};
  std::string test_mode;
  std::uint64_t seed{0};
  double accuracy{0.0};
  double macro_f1{0.0};
  double wall_time_seconds{0.0};
};

inline constexpr const char* kResultHeader =
    "task_id,method,scheme,rank,subset,K,N,rho,test_mode,seed,accuracy,macro_f1,wall_time_seconds";

inline void write_result_row(std::ostream& os, const ResultRow& r) {
  os << r.task_id << ',' << r.method << ',' << r.scheme << ',' << r.rank << ',' << r.subset << ',' << r.K << ','
     << r.N << ',' << r.rho << ',' << r.test_mode << ',' << r.seed << ',' << r.accuracy << ',' << r.macro_f1 << ','
     << r.wall_time_seconds << '\n';
}

inline std::string task_id(int K, int N, double rho, TestMode mode, std::uint64_t seed) {
  std::ostringstream os;
  os << "K" << K << "_N" << N << "_rho" << rho << '_' << to_string(mode) << "_s" << seed;
  return os.str();
}

inline double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

/// Baseline rows for one task.
inline std::vector<ResultRow> run_baselines(const FewShotTask& task, const BaselineConfig& cfg,
                                            const std::string& id) {
  std::vector<ResultRow> rows;
  const auto truth = labels_of(task.test);
  for (const auto mode : {BaselineMode::prototype, BaselineMode::linear}) {
    const auto start = std::chrono::steady_clock::now();
    const auto model = fit_baseline(task.train, task.K, mode, {cfg.lr, cfg.max_steps, 0.99});
    std::vector<int> pred;
    pred.reserve(task.test.size());
    for (const auto& s : task.test) pred.push_back(classify_baseline(model, s.image));
    ResultRow r;
    r.task_id = id;
    r.method = to_string(mode);
    r.scheme = "none";
    r.subset = "none";
    r.K = task.K;
    r.N = task.N;
    r.rho = task.rho;
    r.test_mode = to_string(task.test_mode);
    r.seed = task.seed;
    r.accuracy = accuracy(truth, pred);
    r.macro_f1 = macro_f1(truth, pred, task.K);
    r.wall_time_seconds = std::max(seconds_since(start), 1e-9);
    rows.push_back(r);
  }
  return rows;
}

/// Everything needed to score one task under any weight scheme.
struct TifEvaluation {
  AdapterBank bank;
  std::vector<int> grid;
  std::vector<Eigen::MatrixXd> tables;
  double delta_star{0.0};
  double train_seconds{0.0};
  double score_seconds{0.0};
};

inline TifEvaluation evaluate_tif(const Params& params, const FewShotTask& task, const Schedule& s,
                                  const ExperimentConfig& cfg, int rank, const std::string& subset) {
  TifEvaluation ev;
  auto start = std::chrono::steady_clock::now();
  ev.bank = train_bank(params, task, s, rank, parse_subset(subset), cfg.adapter.scale, cfg.adapter.opt,
                       derive_seed(task.seed, {0x62616E6BULL}));
  ev.train_seconds = seconds_since(start);
  start = std::chrono::steady_clock::now();
  ev.grid = inference_grid(s, cfg.inference.grid_size);
  ev.delta_star = estimate_delta_star(task.train);
  ev.tables = loss_tables(params, ev.bank, task.test, s, ev.grid, cfg.inference.n_noise,
                          derive_seed(task.seed, {0x73636F7265ULL}));
  ev.score_seconds = seconds_since(start);
  return ev;
}

inline ResultRow tif_row(const TifEvaluation& ev, const FewShotTask& task, const Schedule& s,
                         const std::string& scheme, int rank, const std::string& subset, const std::string& id) {
  const auto start = std::chrono::steady_clock::now();
  const auto w = timestep_weights(s, ev.delta_star, ev.grid, parse_scheme(scheme));
  const auto pred = predict(ev.tables, w);
  const auto truth = labels_of(task.test);
  ResultRow r;
  r.task_id = id;
  r.method = "tif";
  r.scheme = w.scheme.name();
  r.rank = rank;
  r.subset = subset;
  r.K = task.K;
  r.N = task.N;
  r.rho = task.rho;
  r.test_mode = to_string(task.test_mode);
  r.seed = task.seed;
  r.accuracy = accuracy(truth, pred);
  r.macro_f1 = macro_f1(truth, pred, task.K);
  r.wall_time_seconds = ev.train_seconds + ev.score_seconds + seconds_since(start);
  return r;
}

/// Pearson correlation between an image's glyph pixels and a reference glyph.
inline double glyph_correlation(const World& world, const Image& img, int class_id) {
  const auto& ref = world.glyph(class_id);
  const auto& idx = world.glyph_elements();
  const auto n = static_cast<double>(idx.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    ma += img[idx[k]];
    mb += ref[k];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const double a = img[idx[k]] - ma;
    const double b = ref[k] - mb;
    sab += a * b;
    saa += a * a;
    sbb += b * b;
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

/// Rank selection from generated samples: the smallest rank whose samples'
/// mean glyph correlation reaches `threshold`; the best-correlated rank when
/// none does.
inline int select_rank(std::span<const int> ranks, std::span<const double> mean_corr, double threshold) {
  if (ranks.empty() || ranks.size() != mean_corr.size()) throw std::invalid_argument("select_rank: bad input");
  std::size_t best = 0;
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    if (mean_corr[i] >= threshold) {
      std::size_t pick = i;
      for (std::size_t j = 0; j < ranks.size(); ++j) {
        if (mean_corr[j] >= threshold && ranks[j] < ranks[pick]) pick = j;
      }
      return ranks[pick];
    }
    if (mean_corr[i] > mean_corr[best]) best = i;
  }
  return ranks[best];
}

}  // namespace tif
