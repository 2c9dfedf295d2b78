// Acceptance run: criteria 1-11 against the default configuration.
// Prints one "criterion N PASS|FAIL ..." line each and exits nonzero on any
// failure. argv[1] is the working directory for the pretrained base.

#include "oracles.hpp"

#include "tif/bench.hpp"
#include "tif/metrics.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

using namespace tif;

namespace {

// Seed-averaged TiF accuracy of the first verified run (default config,
// N = 4, seeds 1..5).
constexpr double kPinnedTifAccuracy = 0.698;

struct Outcome {
  bool pass{false};
  std::string detail;
  double seconds{0.0};
};

using Clock = std::chrono::steady_clock;

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Image two_pixel(double a) {
  Image img(Shape{1, 1, 2});
  img[0] = static_cast<float>(a);
  img[1] = 0.0f;
  return img;
}

Outcome closed_form_vs_monte_carlo() {
  const auto s = default_schedule();
  const std::size_t n = 100000;
  int bad = 0;
  double worst = 0.0;
  for (const double d : {0.1, 0.5, 1.0, 2.0, 4.0}) {
    for (int k = 0; k < 10; ++k) {
      const int t = k == 0 ? 1 : 100 * k + 50;
      const double p = reconstruction_err(d, s, t);
      // The estimator averages n draws from each side of the pair.
      const double se = std::sqrt(p * (1.0 - p) / (2.0 * static_cast<double>(n)));
      const double mc = mc_reconstruction_err(two_pixel(d / 2), two_pixel(-d / 2), s, t, n,
                                              derive_seed(101, {static_cast<std::uint64_t>(k),
                                                                static_cast<std::uint64_t>(d * 1000)}));
      const double dev = std::abs(mc - p);
      if (se > 0.0) worst = std::max(worst, dev / se);
      if (dev > 3.0 * se) ++bad;
    }
  }
  return {bad == 0, fmt("50 cells, %d outside 3 se, worst %.2f se", bad, worst)};
}

Outcome strict_increase_and_onset() {
  const auto s = default_schedule();
  int not_increasing = 0, onset_mismatch = 0;
  const double dists[] = {0.01, 0.1, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 64.0};
  for (const double d : dists) {
    // Err underflows to 0 for large d at small t, so order is checked on log Err.
    for (int t = 2; t <= s.T(); ++t) {
      if (!(log_reconstruction_err(d, s, t) > log_reconstruction_err(d, s, t - 1))) ++not_increasing;
    }
    for (const double tau : {0.05, 0.2, 0.4, 0.49}) {
      std::optional<int> scan;
      for (int t = 1; t <= s.T() && !scan; ++t) {
        if (reconstruction_err(d, s, t) >= tau) scan = t;
      }
      if (loss_onset(d, s, tau) != scan) ++onset_mismatch;
    }
  }
  return {not_increasing == 0 && onset_mismatch == 0,
          fmt("9 distances: %d non-increasing steps, %d onset mismatches in 36", not_increasing, onset_mismatch)};
}

Outcome ordering_on_worlds() {
  const auto s = default_schedule();
  std::vector<int> grid{1};
  for (int t = 50; t <= s.T(); t += 50) grid.push_back(t);
  int ok = 0;
  std::string notes;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    WorldSpec spec;
    spec.seed = seed;
    spec.footprint_ratio = 4.0;
    const World world = build_world(spec);
    const auto prem = check_premise(world, 2048, seed);
    const auto on_n = loss_onset(prem.nuance_median, s, 0.2);
    const auto on_e = loss_onset(prem.env_median, s, 0.2);
    const auto deg_n = attribute_loss_degree(make_flip_sampler(world, Attribute::nuance), s, grid, 512, seed);
    const auto deg_e = attribute_loss_degree(make_flip_sampler(world, Attribute::env), s, grid, 512, seed);
    bool dominates = true;
    for (std::size_t i = 0; i < grid.size(); ++i) dominates = dominates && deg_n[i] >= deg_e[i];
    const bool earlier = on_n && on_e && *on_n < *on_e;
    if (prem.holds && earlier && dominates) ++ok;
    notes += fmt(" [%d<%d]", on_n.value_or(-1), on_e.value_or(-1));
  }
  return {ok == 5, fmt("%d/5 worlds ordered, onsets nuance<env:", ok) + notes};
}

// Int_0^inf erfc(gamma * d) dd by composite Simpson on [0, 12 / gamma].
double erfc_integral(double gamma) {
  const int n = 20000;
  const double h = 12.0 / gamma / n;
  double acc = 1.0 + std::erfc(12.0);
  for (int i = 1; i < n; ++i) acc += (i % 2 ? 4.0 : 2.0) * std::erfc(gamma * i * h);
  return acc * h / 3.0;
}

Outcome weight_shape() {
  const auto s = default_schedule();
  std::vector<int> all(static_cast<std::size_t>(s.T()));
  for (int t = 1; t <= s.T(); ++t) all[static_cast<std::size_t>(t - 1)] = t;
  int nonfinite = 0, tail_violations = 0;
  for (const double delta : {0.1, 1.0, 5.0, 50.0}) {
    const auto w = timestep_weights(s, delta, all, WeightScheme::tif());
    double top = 0.0;
    for (std::size_t i = 0; i < all.size(); ++i) {
      if (!std::isfinite(w.raw[i]) || !std::isfinite(w.weights[i])) ++nonfinite;
      top = std::max(top, w.weights[i]);
    }
    for (std::size_t i = 0; i < all.size(); ++i) {
      if (s.alpha_bar(all[i]) < 0.01 && !(w.weights[i] < 1e-3 * top)) ++tail_violations;
    }
  }
  double worst = 0.0;
  for (const int t : all) {
    const double g = s.gamma(t);
    const double reference = std::erfc(0.0) / erfc_integral(g);
    const double closed = g * std::sqrt(std::numbers::pi);
    const double got = tif_weight_raw(g, 0.0);
    worst = std::max({worst, std::abs(got - reference) / reference, std::abs(closed - reference) / reference});
  }
  return {nonfinite == 0 && tail_violations == 0 && worst <= 1e-6,
          fmt("non-finite %d, tail violations %d, delta*=0 worst rel err vs quadrature %.2e", nonfinite,
              tail_violations, worst)};
}

Sample pixel_sample(std::vector<float> v, int label) {
  Image img(Shape{1, 1, static_cast<int>(v.size())});
  for (std::size_t i = 0; i < v.size(); ++i) img[i] = v[i];
  return {std::move(img), label, 0};
}

Outcome delta_star_oracle() {
  int mismatches = 0;
  Rng rng(2024);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (int trial = 0; trial < 20; ++trial) {
    const int K = 2 + static_cast<int>(rng() % 4);
    const int n = K + static_cast<int>(rng() % static_cast<std::uint64_t>(65 - K));
    std::vector<Sample> train;
    for (int i = 0; i < n; ++i) {
      Image img(Shape{1, 16, 16});
      for (std::size_t k = 0; k < img.size(); ++k) img[k] = u(rng);
      train.push_back({std::move(img), i % K, 0});
    }
    if (estimate_delta_star(train) != oracle::brute_force_delta_star(train)) ++mismatches;
  }
  const double a = estimate_delta_star(std::vector<Sample>{pixel_sample({3}, 0), pixel_sample({7}, 1)});
  const double b = estimate_delta_star(std::vector<Sample>{pixel_sample({1, 5}, 0), pixel_sample({2, 9}, 1)});
  const bool hand = a == 4.0 && b == std::sqrt(17.0);
  return {mismatches == 0 && hand, fmt("%d/20 random tasks differ from brute force; hand examples %.6f, %.6f",
                                       mismatches, a, b)};
}

Outcome gradient_check() {
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto gc = oracle::adapter_gradient_check(seed);
    worst = std::max(worst, gc.max_rel);
    checked += gc.checked;
  }
  return {worst <= 1e-4 && checked > 0, fmt("10 instances, %zu entries, worst relative error %.2e", checked, worst)};
}

struct ShotResult {
  std::vector<double> tif, prototype, linear;
  std::map<std::string, std::vector<double>> by_scheme;
};

ShotResult evaluate_shots(const Params& params, const World& world, const ExperimentConfig& cfg, int N) {
  const auto s = cfg.schedule.make();
  ShotResult r;
  for (const auto seed : cfg.seeds) {
    const auto task = bench::make_task(world, cfg, N, seed);
    const auto id = bench::make_task_id(cfg, N, seed);
    for (const auto& row : run_baselines(task, cfg.baseline, id)) {
      (row.method == "baseline_prototype" ? r.prototype : r.linear).push_back(row.accuracy);
    }
    const auto ev = evaluate_tif(params, task, s, cfg, cfg.adapter.rank, cfg.adapter.subset);
    for (const auto& scheme : cfg.ablation.schemes) {
      r.by_scheme[scheme].push_back(tif_row(ev, task, s, scheme, cfg.adapter.rank, cfg.adapter.subset, id).accuracy);
    }
    r.tif.push_back(tif_row(ev, task, s, cfg.inference.scheme, cfg.adapter.rank, cfg.adapter.subset, id).accuracy);
    std::cerr << "  " << id << " tif " << r.tif.back() << '\n';
  }
  return r;
}

double mean_of(const std::vector<double>& v) { return mean_stderr(v).mean; }

}  // namespace

int main(int argc, char** argv) {
  const std::filesystem::path out = argc > 1 ? argv[1] : "acceptance_out";
  std::map<int, Outcome> results;
  auto timed = [&](int id, auto&& fn) {
    const auto start = Clock::now();
    std::cerr << "criterion " << id << " ...\n";
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    o.seconds = seconds_since(start);
    results[id] = o;
  };

  timed(1, closed_form_vs_monte_carlo);
  timed(2, strict_increase_and_onset);
  timed(3, ordering_on_worlds);
  timed(4, weight_shape);
  timed(5, delta_star_oracle);
  timed(6, gradient_check);

  ExperimentConfig cfg;
  cfg.validate();
  const World world = build_world(cfg.world);

  // Base pretraining counts toward criterion 8.
  auto start8 = Clock::now();
  std::filesystem::remove_all(out);
  std::cerr << "pretraining base into " << out.string() << " ...\n";
  std::ostringstream pretrain_log;
  const Params params = bench::cmd_pretrain(cfg, out, pretrain_log);
  const double pretrain_seconds = seconds_since(start8);
  const auto hash_before = weights_hash(params);

  {
    const auto s = cfg.schedule.make();
    const auto task = bench::make_task(world, cfg, 4, cfg.seeds.front());
    const auto ad = inject_lora(params, cfg.adapter.rank, parse_subset(cfg.adapter.subset), 1, cfg.adapter.scale);
    bool identical = true;
    for (const auto& sample : task.test) {
      for (const int t : {1, 100, 500, 1000}) {
        identical = identical && predict_x0(params, &ad, sample.image, t, s).data() ==
                                     predict_x0(params, nullptr, sample.image, t, s).data();
      }
    }
    results[7].pass = identical;
    results[7].detail = fmt("fresh adapter matches base on %zu images x 4 steps: %s", task.test.size(),
                            identical ? "yes" : "no");
  }

  const auto start_eval = Clock::now();
  const auto n4 = evaluate_shots(params, world, cfg, 4);
  const double eval_seconds = seconds_since(start_eval);
  {
    const double proto = mean_of(n4.prototype), lin = mean_of(n4.linear), tif = mean_of(n4.tif);
    const double chance = 1.0 / cfg.task.K;
    const bool pinned = std::abs(tif - kPinnedTifAccuracy) < 1e-9;
    const double minutes = (pretrain_seconds + eval_seconds) / 60.0;
    results[8].pass = proto < chance && lin < chance && tif - std::max(proto, lin) >= 0.20 && pinned && minutes <= 30.0;
    results[8].detail = fmt("tif %.3f (pinned %.3f%s), prototype %.3f, linear %.3f, margin %.1f pts, %.1f min",
                            tif, kPinnedTifAccuracy, pinned ? "" : " MISMATCH", proto, lin,
                            100.0 * (tif - std::max(proto, lin)), minutes);
    results[8].seconds = pretrain_seconds + eval_seconds;
  }
  {
    const double tif = mean_of(n4.by_scheme.at("tif"));
    const double uni = mean_of(n4.by_scheme.at("uniform"));
    const double snr = mean_of(n4.by_scheme.at("snr_gamma(1)"));
    results[9].pass = tif - uni >= 0.03 && tif - snr >= 0.03;
    results[9].detail = fmt("tif %.3f, uniform %.3f, snr_gamma(1) %.3f, snr_gamma(0.1) %.3f", tif, uni, snr,
                            mean_of(n4.by_scheme.at("snr_gamma(0.1)")));
    results[9].seconds = eval_seconds;
  }
  {
    const auto start = Clock::now();
    const auto n1 = evaluate_shots(params, world, cfg, 1);
    const auto n16 = evaluate_shots(params, world, cfg, 16);
    const MeanStderr m[] = {mean_stderr(n1.tif), mean_stderr(n4.tif), mean_stderr(n16.tif)};
    bool ok = true;
    for (int i = 0; i + 1 < 3; ++i) ok = ok && m[i + 1].mean >= m[i].mean - std::max(m[i].stderr_, m[i + 1].stderr_);
    const double minutes = (seconds_since(start) + eval_seconds) / 60.0;
    results[10].pass = ok && minutes <= 45.0;
    results[10].detail = fmt("N=1 %.3f +- %.3f, N=4 %.3f +- %.3f, N=16 %.3f +- %.3f, %.1f min", m[0].mean,
                             m[0].stderr_, m[1].mean, m[1].stderr_, m[2].mean, m[2].stderr_, minutes);
    results[10].seconds = minutes * 60.0;
  }
  {
    const auto start = Clock::now();
    std::ostringstream log;
    const auto ab = bench::cmd_ablate(cfg, out, bench::Axis::rank, log);
    double best = 0.0, chosen = -1.0;
    std::string per_rank;
    bool samples = true;
    for (const auto& ri : ab.ranks) {
      best = std::max(best, ri.mean_accuracy);
      if (ri.rank == ab.selected_rank) chosen = ri.mean_accuracy;
      per_rank += fmt(" r%d %.3f/%.2f", ri.rank, ri.mean_accuracy, ri.mean_glyph_corr);
      const auto dir = out / "samples" / ("rank_" + std::to_string(ri.rank));
      samples = samples && std::filesystem::is_directory(dir) && !std::filesystem::is_empty(dir);
    }
    results[11].pass = samples && chosen >= 0.0 && best - chosen <= 0.02;
    results[11].detail = fmt("selected rank %d acc %.3f, best %.3f; acc/glyph corr:", ab.selected_rank, chosen, best) +
                         per_rank;
    results[11].seconds = seconds_since(start);
  }

  results[7].pass = results[7].pass && weights_hash(params) == hash_before;
  results[7].detail += fmt(", base hash unchanged after every adapter fit: %s",
                           weights_hash(params) == hash_before ? "yes" : "no");

  bool all = true;
  for (const auto& [id, o] : results) {
    std::cout << "criterion " << id << ' ' << (o.pass ? "PASS" : "FAIL") << ' ' << o.detail
              << fmt(" (%.1f s)", o.seconds) << '\n';
    all = all && o.pass;
  }
  return all ? 0 : 1;
}
