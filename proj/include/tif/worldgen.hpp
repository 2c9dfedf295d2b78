#pragma once

// Parametric worlds x = Phi(c, e).
//
// The class attribute c is a small glyph: a fixed block of pixels whose
// intensities encode the class. Every glyph pixel takes a different level for
// every class, so any two classes differ at every glyph pixel. The
// environment e is a binary texture of amplitude `env_amplitude` over every
// other pixel. The texture amplitude is chosen so that the mean environment
// flip distance is `footprint_ratio` times the mean class flip distance.

#include "tif/attrloss.hpp"
#include "tif/image.hpp"
#include "tif/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace tif {

struct WorldSpec {
  Shape shape{1, 16, 16};
  int num_classes{8};
  int num_envs{4};
  // Glyph footprint: a glyph_height x glyph_width block at (glyph_row, glyph_col).
  int glyph_row{7};
  int glyph_col{6};
  int glyph_height{2};
  int glyph_width{3};
  double footprint_ratio{4.0};
  double jitter{0.25};
  std::uint64_t seed{20240601};
};

enum class Attribute { nuance, env };

inline const char* to_string(Attribute a) { return a == Attribute::nuance ? "nuance" : "env"; }

class World {
 public:
  explicit World(WorldSpec spec) : spec_(spec) {
    validate();
    build_footprints();
    build_glyphs();
    build_textures();
    calibrate_amplitude();
  }

  [[nodiscard]] const WorldSpec& spec() const { return spec_; }
  [[nodiscard]] const Shape& shape() const { return spec_.shape; }
  [[nodiscard]] int num_classes() const { return spec_.num_classes; }
  [[nodiscard]] int num_envs() const { return spec_.num_envs; }
  [[nodiscard]] double env_amplitude() const { return env_amplitude_; }

  /// True for flat element indices inside the glyph footprint.
  [[nodiscard]] bool in_glyph(std::size_t element) const { return glyph_mask_[element]; }
  [[nodiscard]] const std::vector<std::size_t>& glyph_elements() const { return glyph_elements_; }
  [[nodiscard]] const std::vector<std::size_t>& env_elements() const { return env_elements_; }

  /// Glyph intensities of class c, aligned with glyph_elements().
  [[nodiscard]] const std::vector<float>& glyph(int c) const {
    check_class(c);
    return glyphs_[static_cast<std::size_t>(c)];
  }

  /// Deterministic in (spec, c, e, jitter_seed); values clamped to [-1, 1].
  /// Jitter is uniform in [-jitter, jitter] on environment pixels only.
  [[nodiscard]] Image render(int c, int e, std::uint64_t jitter_seed) const {
    Image img = render_clean(c, e);
    if (spec_.jitter > 0.0) {
      Rng rng(jitter_seed);
      std::uniform_real_distribution<double> u(-spec_.jitter, spec_.jitter);
      for (const auto idx : env_elements_) {
        img[idx] = static_cast<float>(std::clamp(static_cast<double>(img[idx]) + u(rng), -1.0, 1.0));
      }
    }
    return img;
  }

  [[nodiscard]] Image render_clean(int c, int e) const {
    check_class(c);
    check_env(e);
    Image img(spec_.shape);
    const auto& g = glyphs_[static_cast<std::size_t>(c)];
    for (std::size_t k = 0; k < glyph_elements_.size(); ++k) img[glyph_elements_[k]] = g[k];
    const auto& tex = textures_[static_cast<std::size_t>(e)];
    for (std::size_t k = 0; k < env_elements_.size(); ++k) {
      img[env_elements_[k]] = static_cast<float>(std::clamp(env_amplitude_ * tex[k], -1.0, 1.0));
    }
    return img;
  }

  /// An image from the broad family around the world: every glyph element
  /// takes a random class level and every environment element a random sign
  /// at the world's texture amplitude, so neither the world's class glyphs
  /// nor its environment textures are favoured.
  [[nodiscard]] Image render_random(Rng& rng) const {
    const int n = spec_.num_classes;
    std::uniform_int_distribution<int> level(0, n - 1);
    std::bernoulli_distribution coin(0.5);
    std::uniform_real_distribution<double> u(-spec_.jitter, spec_.jitter);
    Image img(spec_.shape);
    for (const auto idx : glyph_elements_) {
      img[idx] = static_cast<float>(n == 1 ? 1.0 : -1.0 + 2.0 * level(rng) / (n - 1));
    }
    for (const auto idx : env_elements_) {
      const double v = (coin(rng) ? env_amplitude_ : -env_amplitude_) + (spec_.jitter > 0.0 ? u(rng) : 0.0);
      img[idx] = static_cast<float>(std::clamp(v, -1.0, 1.0));
    }
    return img;
  }

  void check_class(int c) const {
    if (c < 0 || c >= spec_.num_classes) {
      throw std::out_of_range("World: class index " + std::to_string(c) + " outside [0, " +
                              std::to_string(spec_.num_classes) + ")");
    }
  }
  void check_env(int e) const {
    if (e < 0 || e >= spec_.num_envs) {
      throw std::out_of_range("World: env index " + std::to_string(e) + " outside [0, " +
                              std::to_string(spec_.num_envs) + ")");
    }
  }

 private:
  void validate() const {
    const auto& s = spec_;
    if (s.shape.channels <= 0 || s.shape.height <= 0 || s.shape.width <= 0) {
      throw std::invalid_argument("WorldSpec: bad shape");
    }
    if (s.num_classes < 1 || s.num_envs < 1) {
      throw std::invalid_argument("WorldSpec: need at least one class and one environment");
    }
    if (s.glyph_row < 0 || s.glyph_col < 0 || s.glyph_height < 1 || s.glyph_width < 1 ||
        s.glyph_row + s.glyph_height > s.shape.height || s.glyph_col + s.glyph_width > s.shape.width) {
      throw std::invalid_argument("WorldSpec: glyph footprint outside the image");
    }
    if (static_cast<std::size_t>(s.glyph_height * s.glyph_width) >= s.shape.pixels()) {
      throw std::invalid_argument("WorldSpec: glyph leaves no environment pixels");
    }
    if (!(s.footprint_ratio > 0.0) || !(s.jitter >= 0.0) || s.jitter >= 1.0) {
      throw std::invalid_argument("WorldSpec: footprint_ratio must be > 0 and jitter in [0, 1)");
    }
  }

  void build_footprints() {
    const auto& s = spec_.shape;
    glyph_mask_.assign(s.size(), false);
    for (int ch = 0; ch < s.channels; ++ch) {
      for (int i = 0; i < s.height; ++i) {
        for (int j = 0; j < s.width; ++j) {
          const auto idx = (static_cast<std::size_t>(ch) * s.height + i) * s.width + j;
          const bool g = i >= spec_.glyph_row && i < spec_.glyph_row + spec_.glyph_height &&
                         j >= spec_.glyph_col && j < spec_.glyph_col + spec_.glyph_width;
          glyph_mask_[idx] = g;
          (g ? glyph_elements_ : env_elements_).push_back(idx);
        }
      }
    }
  }

  // Each glyph element gets an independent permutation of evenly spaced
  // levels in [-1, 1], so distinct classes never share a level there.
  void build_glyphs() {
    const int n = spec_.num_classes;
    Rng rng(derive_seed(spec_.seed, {0x61797068ULL}));
    glyphs_.assign(static_cast<std::size_t>(n), std::vector<float>(glyph_elements_.size()));
    std::vector<int> perm(static_cast<std::size_t>(n));
    for (std::size_t k = 0; k < glyph_elements_.size(); ++k) {
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      for (int c = 0; c < n; ++c) {
        const double level = n == 1 ? 1.0 : -1.0 + 2.0 * perm[static_cast<std::size_t>(c)] / (n - 1);
        glyphs_[static_cast<std::size_t>(c)][k] = static_cast<float>(level);
      }
    }
  }

  void build_textures() {
    Rng rng(derive_seed(spec_.seed, {0x74657874ULL}));
    std::bernoulli_distribution coin(0.5);
    textures_.assign(static_cast<std::size_t>(spec_.num_envs), std::vector<double>(env_elements_.size()));
    for (auto& tex : textures_) {
      for (auto& v : tex) v = coin(rng) ? 1.0 : -1.0;
    }
  }

  void calibrate_amplitude() {
    const auto mean_pair = [](int count, const auto& dist) {
      double acc = 0.0;
      int pairs = 0;
      for (int a = 0; a < count; ++a) {
        for (int b = 0; b < count; ++b) {
          if (a == b) continue;
          acc += dist(a, b);
          ++pairs;
        }
      }
      return pairs == 0 ? 0.0 : acc / pairs;
    };
    const double nuance = mean_pair(spec_.num_classes, [&](int a, int b) {
      double acc = 0.0;
      for (std::size_t k = 0; k < glyph_elements_.size(); ++k) {
        const double d = glyphs_[static_cast<std::size_t>(a)][k] - glyphs_[static_cast<std::size_t>(b)][k];
        acc += d * d;
      }
      return std::sqrt(acc);
    });
    const double env_unit = mean_pair(spec_.num_envs, [&](int a, int b) {
      double acc = 0.0;
      for (std::size_t k = 0; k < env_elements_.size(); ++k) {
        const double d = textures_[static_cast<std::size_t>(a)][k] - textures_[static_cast<std::size_t>(b)][k];
        acc += d * d;
      }
      return std::sqrt(acc);
    });
    if (nuance <= 0.0 || env_unit <= 0.0) {
      // Degenerate family (a single class or environment): nothing to match.
      env_amplitude_ = 0.5;
      return;
    }
    env_amplitude_ = spec_.footprint_ratio * nuance / env_unit;
    if (env_amplitude_ + spec_.jitter > 1.0) {
      throw std::invalid_argument("WorldSpec: footprint_ratio " + std::to_string(spec_.footprint_ratio) +
                                  " needs texture amplitude " + std::to_string(env_amplitude_) +
                                  ", which leaves [-1, 1]");
    }
  }

  WorldSpec spec_;
  std::vector<bool> glyph_mask_;
  std::vector<std::size_t> glyph_elements_;
  std::vector<std::size_t> env_elements_;
  std::vector<std::vector<float>> glyphs_;
  std::vector<std::vector<double>> textures_;
  double env_amplitude_{0.0};
};

/// Pairs differing only in `which`: the other attribute and the jitter draw
/// are shared, and the flipped attribute takes a different value (when the
/// family has more than one).
inline PairSampler make_flip_sampler(const World& world, Attribute which) {
  return [&world, which](Rng& rng) {
    const int nc = world.num_classes();
    const int ne = world.num_envs();
    std::uniform_int_distribution<int> pick_c(0, nc - 1);
    std::uniform_int_distribution<int> pick_e(0, ne - 1);
    const int c = pick_c(rng);
    const int e = pick_e(rng);
    const std::uint64_t jitter_seed = rng();
    int c2 = c;
    int e2 = e;
    if (which == Attribute::nuance && nc > 1) {
      c2 = std::uniform_int_distribution<int>(0, nc - 2)(rng);
      if (c2 >= c) ++c2;
    } else if (which == Attribute::env && ne > 1) {
      e2 = std::uniform_int_distribution<int>(0, ne - 2)(rng);
      if (e2 >= e) ++e2;
    }
    return std::pair{world.render(c, e, jitter_seed), world.render(c2, e2, jitter_seed)};
  };
}

inline std::vector<double> flip_distance_samples(const World& world, Attribute which, std::size_t n,
                                                 std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("flip_distance_samples: n must be >= 1");
  const auto sampler = make_flip_sampler(world, which);
  Rng rng(seed);
  std::vector<double> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto [a, b] = sampler(rng);
    out.push_back(distance(a, b));
  }
  return out;
}

struct PremiseCheck {
  bool holds{false};
  double nuance_median{0.0};
  double env_median{0.0};
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median: empty sample");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Environment flip distances FOSD-dominate class flip distances.
inline PremiseCheck check_premise(const World& world, std::size_t n, std::uint64_t seed) {
  const auto env = flip_distance_samples(world, Attribute::env, n, derive_seed(seed, {1}));
  const auto nuance = flip_distance_samples(world, Attribute::nuance, n, derive_seed(seed, {2}));
  return {fosd_check(env, nuance), median(nuance), median(env)};
}

/// Builds a world and, when footprint_ratio > 1, asserts the dominance premise.
inline World build_world(const WorldSpec& spec, std::size_t premise_samples = 512) {
  World world(spec);
  if (spec.footprint_ratio > 1.0 && spec.num_classes > 1 && spec.num_envs > 1) {
    const auto check = check_premise(world, premise_samples, spec.seed);
    if (!check.holds) {
      throw std::runtime_error("build_world: environment flip distances do not dominate class flip "
                               "distances (footprint_ratio " +
                               std::to_string(spec.footprint_ratio) + ")");
    }
  }
  return world;
}

// ---------------------------------------------------------------- tasks ---

enum class TestMode { balanced, anti };

inline const char* to_string(TestMode m) { return m == TestMode::balanced ? "balanced" : "anti"; }

inline TestMode parse_test_mode(const std::string& s) {
  if (s == "balanced") return TestMode::balanced;
  if (s == "anti") return TestMode::anti;
  throw std::invalid_argument("unknown test_mode '" + s + "' (expected balanced|anti)");
}

struct Sample {
  Image image;
  int label{0};
  int env{0};
};

/// A K-way N-shot task. Labels are 0..K-1; class_ids maps a label to the
/// world's glyph index. Label c's linked environment is c mod M.
struct FewShotTask {
  int K{0};
  int N{0};
  double rho{0.0};
  TestMode test_mode{TestMode::balanced};
  std::uint64_t seed{0};
  std::vector<int> class_ids;
  std::vector<Sample> train;
  std::vector<Sample> test;
};

inline int linked_env(int label, int num_envs) { return label % num_envs; }

/// Environment for an anti-correlated test image of `label`: the linked
/// environment of the next label whose environment differs.
inline int anti_env(int label, int K, int num_envs) {
  const int own = linked_env(label, num_envs);
  for (int k = 1; k < K; ++k) {
    const int e = linked_env((label + k) % K, num_envs);
    if (e != own) return e;
  }
  throw std::invalid_argument("anti_env: every class shares one environment");
}

inline constexpr std::uint64_t kTrainStream = 0x747261696EULL;
inline constexpr std::uint64_t kTestStream = 0x74657374ULL;
inline constexpr std::uint64_t kPoolStream = 0x706F6F6CULL;

inline FewShotTask sample_task(const World& world, int K, int N, double rho, int test_size,
                               TestMode test_mode, std::uint64_t seed) {
  if (K < 1 || K > world.num_classes()) {
    throw std::invalid_argument("sample_task: K = " + std::to_string(K) + " exceeds the " +
                                std::to_string(world.num_classes()) + " available classes");
  }
  if (world.num_envs() < 2) throw std::invalid_argument("sample_task: need at least 2 environments");
  if (N < 1 || test_size < 0) throw std::invalid_argument("sample_task: N must be >= 1, test_size >= 0");
  if (!(rho >= 0.0 && rho <= 1.0)) throw std::invalid_argument("sample_task: rho must lie in [0, 1]");
  if (test_mode == TestMode::anti && K < 2) {
    throw std::invalid_argument("sample_task: anti-correlated test needs K >= 2");
  }

  FewShotTask task;
  task.K = K;
  task.N = N;
  task.rho = rho;
  task.test_mode = test_mode;
  task.seed = seed;

  Rng rng(derive_seed(seed, {0x636C6173ULL}));
  std::vector<int> ids(static_cast<std::size_t>(world.num_classes()));
  std::iota(ids.begin(), ids.end(), 0);
  std::shuffle(ids.begin(), ids.end(), rng);
  task.class_ids.assign(ids.begin(), ids.begin() + K);

  const int M = world.num_envs();
  std::uniform_int_distribution<int> any_env(0, M - 1);
  std::bernoulli_distribution linked(rho);

  Rng env_rng(derive_seed(seed, {0x656E76ULL}));
  for (int c = 0; c < K; ++c) {
    for (int i = 0; i < N; ++i) {
      const int e = linked(env_rng) ? linked_env(c, M) : any_env(env_rng);
      const auto js = derive_seed(seed, {kTrainStream, static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(i)});
      task.train.push_back({world.render(task.class_ids[static_cast<std::size_t>(c)], e, js), c, e});
    }
  }
  for (int c = 0; c < K; ++c) {
    for (int i = 0; i < test_size; ++i) {
      const int e = test_mode == TestMode::anti ? anti_env(c, K, M) : any_env(env_rng);
      const auto js = derive_seed(seed, {kTestStream, static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(i)});
      task.test.push_back({world.render(task.class_ids[static_cast<std::size_t>(c)], e, js), c, e});
    }
  }
  return task;
}

/// Broad pretraining pool of render_random images.
inline std::vector<Image> make_broad_pool(const World& world, int size, std::uint64_t seed) {
  if (size < 1) throw std::invalid_argument("make_broad_pool: size must be >= 1");
  Rng rng(derive_seed(seed, {kPoolStream, 0x62726F6164ULL}));
  std::vector<Image> pool;
  pool.reserve(static_cast<std::size_t>(size));
  for (int i = 0; i < size; ++i) pool.push_back(world.render_random(rng));
  return pool;
}

/// Pretraining pool of the world itself: every class x environment, `per_combo` jitter
/// draws each, from a stream disjoint from task train/test streams.
inline std::vector<Image> make_pool(const World& world, int per_combo, std::uint64_t seed) {
  if (per_combo < 1) throw std::invalid_argument("make_pool: per_combo must be >= 1");
  std::vector<Image> pool;
  pool.reserve(static_cast<std::size_t>(world.num_classes() * world.num_envs() * per_combo));
  for (int c = 0; c < world.num_classes(); ++c) {
    for (int e = 0; e < world.num_envs(); ++e) {
      for (int i = 0; i < per_combo; ++i) {
        const auto js = derive_seed(seed, {kPoolStream, static_cast<std::uint64_t>(c),
                                           static_cast<std::uint64_t>(e), static_cast<std::uint64_t>(i)});
        pool.push_back(world.render(c, e, js));
      }
    }
  }
  return pool;
}

}  // namespace tif
