#include "oracles.hpp"

#include "tif/container.hpp"
#include "tif/denoiser.hpp"
#include "tif/worldgen.hpp"

#include <Eigen/SVD>
#include <gtest/gtest.h>

#include <filesystem>

using namespace tif;

namespace {

Architecture tiny_arch() {
  Architecture a;
  a.image = Shape{1, 4, 4};
  a.time_dim = 8;
  a.cond_dim = 4;
  a.hidden0 = 24;
  a.hidden1 = 20;
  return a;
}

std::vector<Image> tiny_pool(int n, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<float> u(-0.8f, 0.8f);
  std::vector<Image> pool;
  for (int i = 0; i < n; ++i) {
    Image img(Shape{1, 4, 4});
    const float level = (i % 2 == 0) ? 0.5f : -0.5f;
    for (std::size_t k = 0; k < img.size(); ++k) img[k] = level + 0.1f * u(rng);
    pool.push_back(std::move(img));
  }
  return pool;
}

}  // namespace

TEST(Subset, ParseAndName) {
  const auto s = parse_subset("last+w1");
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0], LayerId::last);
  EXPECT_EQ(s[1], LayerId::w1);
  EXPECT_EQ(subset_name(s), "last+w1");
  EXPECT_THROW((void)parse_subset("last+last"), std::invalid_argument);
  EXPECT_THROW((void)parse_subset("w9"), std::invalid_argument);
  EXPECT_THROW((void)parse_subset(""), std::invalid_argument);
}

TEST(Preconditioning, CoefficientsMatchSkipOutputForm) {
  const auto s = default_schedule();
  const double sd = 0.5;
  for (const int t : {1, 20, 300, 999}) {
    const auto pc = preconditioning(s, t, sd);
    const double ab = s.alpha_bar(t);
    const double sigma = std::sqrt(1 - ab);
    const double se2 = (1 - ab) / ab;
    const double k = sd * sd / (se2 + sd * sd);
    const double o = std::sqrt(se2) * sd / std::sqrt(se2 + sd * sd);
    // eps^ = (x - sqrt(ab) x0^) / sigma with x0^ = k x / sqrt(ab) + o F.
    EXPECT_NEAR(pc.skip, (1 - k) / sigma, 1e-12 * std::max(1.0, pc.skip));
    EXPECT_NEAR(pc.gain, -std::sqrt(ab) * o / sigma, 1e-12);
    // c_t normalizes the network input to unit variance for data of scale sd.
    EXPECT_NEAR(pc.input * std::sqrt(ab * sd * sd + 1 - ab), 1.0, 1e-12);
  }
  const auto off = preconditioning(s, 10, 0.0);
  EXPECT_EQ(off.skip, 0.0);
  EXPECT_EQ(off.gain, 1.0);
  EXPECT_EQ(off.input, 1.0);
}

TEST(Denoiser, EpsToX0RecoversCleanImageFromTrueNoise) {
  const auto s = default_schedule();
  Rng rng(4);
  std::normal_distribution<double> normal(0, 1);
  Mat<double> x0(5, 3), eps(5, 3);
  for (Eigen::Index i = 0; i < x0.size(); ++i) {
    x0.data()[i] = 0.9 * std::tanh(normal(rng));
    eps.data()[i] = normal(rng);
  }
  const std::vector<int> ts{1, 400, 900};
  Mat<double> xt(5, 3);
  for (int j = 0; j < 3; ++j) {
    const double ab = s.alpha_bar(ts[static_cast<std::size_t>(j)]);
    xt.col(j) = std::sqrt(ab) * x0.col(j) + std::sqrt(1 - ab) * eps.col(j);
  }
  EXPECT_LT((eps_to_x0(s, xt, eps, ts) - x0).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Denoiser, AdapterGradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    const auto gc = oracle::adapter_gradient_check(seed);
    EXPECT_GT(gc.checked, 0u);
    EXPECT_LT(gc.max_rel, 1e-4) << "seed " << seed;
    EXPECT_LT(gc.norm_rel, 1e-6) << "seed " << seed;
  }
}

TEST(Denoiser, BaseGradientsMatchFiniteDifferences) {
  Architecture arch;
  arch.image = Shape{1, 1, 3};
  arch.time_dim = 4;
  arch.cond_dim = 2;
  arch.hidden0 = 4;
  arch.hidden1 = 3;
  const auto s = make_linear_schedule(20, 1e-3, 0.3);
  auto p = init_params<double>(arch, 12);
  Rng rng(5);
  std::normal_distribution<double> normal(0, 1);
  for (const auto id : kAllLayers) {
    for (Eigen::Index i = 0; i < p.layer(id).b.size(); ++i) p.layer(id).b[i] = 0.3 * normal(rng);
  }
  Mat<double> xt(3, 2), eps(3, 2);
  for (Eigen::Index i = 0; i < 6; ++i) {
    xt.data()[i] = normal(rng);
    eps.data()[i] = normal(rng);
  }
  const std::vector<int> ts{3, 17};
  Activations<double> act;
  forward(p, static_cast<const LoraAdapter<double>*>(nullptr), s, xt, ts, act);
  const Mat<double> d_out = 2.0 * (act.out - eps) / 6.0;
  auto grads = p.zeros_like();
  backward(p, static_cast<const LoraAdapter<double>*>(nullptr), act, d_out, &grads,
           static_cast<LoraAdapter<double>*>(nullptr));

  double worst = 0.0;
  for_each_tensor(
      [&](auto& param, auto& g) {
        for (Eigen::Index i = 0; i < param.size(); ++i) {
          const double keep = param.data()[i];
          param.data()[i] = keep + 1e-6;
          const double up = oracle::eps_loss(p, nullptr, s, xt, ts, eps);
          param.data()[i] = keep - 1e-6;
          const double down = oracle::eps_loss(p, nullptr, s, xt, ts, eps);
          param.data()[i] = keep;
          const double fd = (up - down) / 2e-6;
          worst = std::max(worst, std::abs(fd - g.data()[i]) / std::max({std::abs(fd), std::abs(g.data()[i]), 1e-7}));
        }
      },
      p, grads);
  EXPECT_LT(worst, 1e-4);
}

TEST(Denoiser, FreshAdapterReproducesBaseExactly) {
  const auto arch = tiny_arch();
  const auto s = default_schedule();
  const auto p = init_params<float>(arch, 3);
  const std::vector<LayerId> all(kAllLayers.begin(), kAllLayers.end());
  const auto ad = inject_lora(p, 2, all, 9);
  const auto img = tiny_pool(1, 2).front();
  for (const int t : {1, 250, 1000}) {
    EXPECT_EQ(predict_x0(p, &ad, img, t, s).data(), predict_x0(p, nullptr, img, t, s).data());
  }
}

TEST(Denoiser, DeltaRankAndParameterCounts) {
  const auto arch = tiny_arch();
  auto p = init_params<float>(arch, 3);
  const auto last = parse_subset("last");
  const std::vector<LayerId> all(kAllLayers.begin(), kAllLayers.end());
  auto ad = inject_lora(p, 3, all, 1);
  Rng rng(2);
  std::normal_distribution<float> normal(0, 1);
  for (auto& f : ad.factors) {
    for (Eigen::Index i = 0; i < f.B.size(); ++i) f.B.data()[i] = normal(rng);
  }
  for (const auto id : kAllLayers) {
    const Eigen::MatrixXd delta = ad.delta(id).cast<double>();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(delta);
    const auto sv = svd.singularValues();
    for (Eigen::Index i = 3; i < sv.size(); ++i) EXPECT_LT(sv[i], 1e-5 * sv[0]);
  }
  std::size_t expected = 0;
  for (const auto id : kAllLayers) expected += 3u * static_cast<std::size_t>(arch.in_dim(id) + arch.out_dim(id));
  EXPECT_EQ(ad.parameter_count(), expected);
  const auto small = inject_lora(p, 3, last, 1);
  EXPECT_EQ(small.parameter_count(), 3u * static_cast<std::size_t>(arch.hidden1 + arch.image_dim()));
  EXPECT_LT(small.parameter_count(), ad.parameter_count());
  EXPECT_THROW((void)inject_lora(p, 0, last, 1), std::invalid_argument);
  EXPECT_THROW((void)inject_lora(p, 100, last, 1), std::invalid_argument);
}

TEST(Denoiser, PretrainingReducesLossAndIsReproducible) {
  const auto arch = tiny_arch();
  const auto s = default_schedule();
  const auto pool = tiny_pool(16, 1);
  OptimizerConfig opt{OptimizerConfig::Kind::adam, 2e-3, 0.9, 0.999, 1e-8, 300, 16};
  TrainLog log;
  const auto p = pretrain_base(arch, pool, s, opt, 5, &log);
  EXPECT_LT(log.tail(50), 0.8 * log.head(50));
  EXPECT_TRUE(pretrain_base(arch, pool, s, opt, 5) == p);

  const auto untrained = init_params<float>(arch, derive_seed(5, {0x696E6974ULL}));
  const auto held_out = tiny_pool(8, 99);
  double trained_loss = 0.0, raw_loss = 0.0;
  for (const auto& img : held_out) {
    trained_loss += recon_loss(p, nullptr, img, 200, s, 8, 3);
    raw_loss += recon_loss(untrained, nullptr, img, 200, s, 8, 3);
  }
  EXPECT_LT(trained_loss, raw_loss);
}

TEST(Denoiser, AdapterTrainingLeavesBaseUntouchedAndFitsClass) {
  const auto arch = tiny_arch();
  const auto s = default_schedule();
  const auto pool = tiny_pool(16, 1);
  const auto p = pretrain_base(arch, pool, s, {OptimizerConfig::Kind::adam, 2e-3, 0.9, 0.999, 1e-8, 200, 16}, 5);
  const auto hash = weights_hash(p);
  const auto bytes = encode_base(p);

  std::vector<Image> shot{tiny_pool(1, 42).front()};
  for (std::size_t k = 0; k < shot[0].size(); ++k) shot[0][k] = (k % 3 == 0) ? 0.9f : -0.2f;
  auto ad = inject_lora(p, 4, parse_subset("last+w1"), 3);
  TrainLog log;
  ad = train_adapter(p, ad, shot, s, {OptimizerConfig::Kind::adam, 3e-3, 0.9, 0.999, 1e-8, 300, 16}, 8, &log);
  EXPECT_EQ(weights_hash(p), hash);
  EXPECT_EQ(encode_base(p), bytes);

  double base = 0.0, adapted = 0.0;
  for (const int t : {50, 150, 300}) {
    base += recon_loss(p, nullptr, shot[0], t, s, 16, 1);
    adapted += recon_loss(p, &ad, shot[0], t, s, 16, 1);
  }
  EXPECT_LT(adapted, 0.8 * base);
}

TEST(Denoiser, ReconLossAndSamplingAreDeterministic) {
  const auto arch = tiny_arch();
  const auto s = default_schedule();
  const auto p = init_params<float>(arch, 2);
  const auto img = tiny_pool(1, 3).front();
  EXPECT_EQ(recon_loss(p, nullptr, img, 10, s, 1, 7), recon_loss(p, nullptr, img, 10, s, 1, 7));
  EXPECT_THROW((void)recon_loss(p, nullptr, img, 10, s, 0, 7), std::invalid_argument);
  EXPECT_EQ(sample_image(p, nullptr, s, 20, 4).data(), sample_image(p, nullptr, s, 20, 4).data());
  EXPECT_THROW((void)sample_image(p, nullptr, s, 1001, 4), std::invalid_argument);
}

TEST(Container, AdapterRoundTripIsBitExact) {
  const auto arch = tiny_arch();
  const auto p = init_params<float>(arch, 3);
  auto ad = inject_lora(p, 2, parse_subset("w1+last"), 4);
  for (auto& f : ad.factors) f.B.setConstant(0.25f);
  const auto bytes = encode_adapter(ad);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "TIFADPT1");
  const auto back = decode_adapter(bytes, 1.0f);
  EXPECT_TRUE(back == ad);
  EXPECT_EQ(encode_adapter(back), bytes);

  const auto path = std::filesystem::temp_directory_path() / "tif_test_adapter.bin";
  save_adapter(path, ad);
  EXPECT_TRUE(load_adapter(path, 1.0f) == ad);
  std::filesystem::remove(path);
}

TEST(Container, BaseRoundTripAndCorruption) {
  const auto arch = tiny_arch();
  const auto p = init_params<float>(arch, 3);
  auto bytes = encode_base(p);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "TIFBASE1");
  EXPECT_TRUE(decode_base(bytes, arch) == p);

  auto wrong = arch;
  wrong.hidden0 += 1;
  EXPECT_THROW((void)decode_base(bytes, wrong), FormatError);
  EXPECT_THROW((void)decode_adapter(bytes, 1.0f), FormatError);

  bytes[bytes.size() / 2] ^= 0x01;
  EXPECT_THROW((void)decode_base(bytes, arch), FormatError);
  bytes.resize(6);
  EXPECT_THROW((void)decode_base(bytes, arch), FormatError);
}

TEST(Container, CrcMatchesZlibReference) {
  const std::string text = "123456789";
  const std::vector<unsigned char> v(text.begin(), text.end());
  EXPECT_EQ(detail::crc32_of(v), 0xCBF43926u);
}
