#pragma once

// Conditional denoising MLP d(x_t, y, t) with low-rank adapters.
//
//   input  = x_t (flattened) ++ time embedding(t) ++ cond(y)
//   cond   = Wc y + bc                       (condition projection)
//   h0     = silu(W0 input + b0)
//   h1     = silu(W1 h0 + b1)
//   F      = Wl h1 + bl
//   eps^   = a_t x_t + b_t F
//
// The first image block of `input` is c_t x_t rather than x_t. a_t, b_t and
// c_t are fixed functions of the schedule and a nominal data scale s_d:
// with x0^ = k_t x_t / sqrt(ab) + o_t F the usual skip/output preconditioned
// x0 estimate (k_t = s_d^2 / (s_e^2 + s_d^2), o_t = s_e s_d / sqrt(s_e^2 +
// s_d^2), s_e = sqrt((1 - ab) / ab)), eps^ = (x_t - sqrt(ab) x0^) / sqrt(1 - ab).
// The network therefore only has to model the residual F, and near t = 1 the
// skip path carries x_t unchanged. data_std <= 0 turns this off (a = 0,
// b = c = 1).
//
// Every dense layer may carry an adapter factor (A: r x in, B: out x r) that
// adds scale * B A to its weight. Gradients are derived by hand; see
// backward().

#include "tif/image.hpp"
#include "tif/rng.hpp"
#include "tif/schedule.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tif {

enum class LayerId : std::uint16_t { cond = 0, w0 = 1, w1 = 2, last = 3 };

inline constexpr std::array<LayerId, 4> kAllLayers{LayerId::cond, LayerId::w0, LayerId::w1, LayerId::last};

inline std::string_view layer_name(LayerId id) {
  switch (id) {
    case LayerId::cond: return "cond";
    case LayerId::w0: return "w0";
    case LayerId::w1: return "w1";
    case LayerId::last: return "last";
  }
  return "?";
}

inline LayerId parse_layer(std::string_view name) {
  for (const auto id : kAllLayers) {
    if (layer_name(id) == name) return id;
  }
  throw std::invalid_argument("unknown layer '" + std::string(name) + "' (expected cond|w0|w1|last)");
}

/// Parses an injection subset such as "last", "last+w1" or "last+w1+w0+cond".
inline std::vector<LayerId> parse_subset(std::string_view spec) {
  std::vector<LayerId> out;
  std::size_t start = 0;
  while (start <= spec.size()) {
    const auto end = std::min(spec.find('+', start), spec.size());
    const auto id = parse_layer(spec.substr(start, end - start));
    if (std::find(out.begin(), out.end(), id) != out.end()) {
      throw std::invalid_argument("duplicate layer in subset '" + std::string(spec) + "'");
    }
    out.push_back(id);
    start = end + 1;
  }
  return out;
}

inline std::string subset_name(std::span<const LayerId> subset) {
  std::string s;
  for (const auto id : subset) {
    if (!s.empty()) s += '+';
    s += layer_name(id);
  }
  return s;
}

struct Architecture {
  Shape image{1, 16, 16};
  int time_dim{32};
  int cond_dim{16};
  int hidden0{512};
  int hidden1{512};
  double data_std{0.5};  // s_d of the preconditioning; <= 0 disables it

  [[nodiscard]] int image_dim() const { return static_cast<int>(image.size()); }
  [[nodiscard]] int input_dim() const { return image_dim() + time_dim + cond_dim; }
  [[nodiscard]] int in_dim(LayerId id) const {
    switch (id) {
      case LayerId::cond: return cond_dim;
      case LayerId::w0: return input_dim();
      case LayerId::w1: return hidden0;
      case LayerId::last: return hidden1;
    }
    return 0;
  }
  [[nodiscard]] int out_dim(LayerId id) const {
    switch (id) {
      case LayerId::cond: return cond_dim;
      case LayerId::w0: return hidden0;
      case LayerId::w1: return hidden1;
      case LayerId::last: return image_dim();
    }
    return 0;
  }
  void validate() const {
    if (image.size() == 0 || time_dim < 2 || time_dim % 2 != 0 || cond_dim < 1 || hidden0 < 1 ||
        hidden1 < 1) {
      throw std::invalid_argument("Architecture: dimensions must be positive and time_dim even");
    }
  }
  bool operator==(const Architecture&) const = default;
};

template <class Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <class Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <class Scalar>
struct DenseLayer {
  Mat<Scalar> W;
  Vec<Scalar> b;
};

template <class Scalar>
struct DenoiserParams {
  Architecture arch;
  Vec<Scalar> y;  // shared condition embedding
  DenseLayer<Scalar> cond, w0, w1, last;

  DenseLayer<Scalar>& layer(LayerId id) {
    switch (id) {
      case LayerId::cond: return cond;
      case LayerId::w0: return w0;
      case LayerId::w1: return w1;
      case LayerId::last: return last;
    }
    throw std::invalid_argument("bad layer id");
  }
  const DenseLayer<Scalar>& layer(LayerId id) const {
    return const_cast<DenoiserParams*>(this)->layer(id);
  }

  /// Same shapes, all zeros (gradient and optimizer-state buffers).
  [[nodiscard]] DenoiserParams zeros_like() const {
    DenoiserParams z;
    z.arch = arch;
    z.y = Vec<Scalar>::Zero(y.size());
    for (const auto id : kAllLayers) {
      z.layer(id).W = Mat<Scalar>::Zero(layer(id).W.rows(), layer(id).W.cols());
      z.layer(id).b = Vec<Scalar>::Zero(layer(id).b.size());
    }
    return z;
  }

  template <class Other>
  [[nodiscard]] DenoiserParams<Other> cast() const {
    DenoiserParams<Other> o;
    o.arch = arch;
    o.y = y.template cast<Other>();
    for (const auto id : kAllLayers) {
      o.layer(id).W = layer(id).W.template cast<Other>();
      o.layer(id).b = layer(id).b.template cast<Other>();
    }
    return o;
  }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = static_cast<std::size_t>(y.size());
    for (const auto id : kAllLayers) {
      n += static_cast<std::size_t>(layer(id).W.size() + layer(id).b.size());
    }
    return n;
  }

  bool operator==(const DenoiserParams& o) const {
    if (!(arch == o.arch) || y != o.y) return false;
    for (const auto id : kAllLayers) {
      if (layer(id).W != o.layer(id).W || layer(id).b != o.layer(id).b) return false;
    }
    return true;
  }
};

/// Applies f to corresponding tensors of every argument, in a fixed order.
template <class F, class P, class... Ps>
void for_each_tensor(F&& f, P& p, Ps&... ps) {
  f(p.y, ps.y...);
  for (const auto id : kAllLayers) {
    f(p.layer(id).W, ps.layer(id).W...);
    f(p.layer(id).b, ps.layer(id).b...);
  }
}

template <class Scalar>
DenoiserParams<Scalar> init_params(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  DenoiserParams<Scalar> p;
  p.arch = arch;
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  p.y = Vec<Scalar>(arch.cond_dim);
  for (Eigen::Index i = 0; i < p.y.size(); ++i) p.y[i] = static_cast<Scalar>(normal(rng));
  for (const auto id : kAllLayers) {
    const int in = arch.in_dim(id);
    const int out = arch.out_dim(id);
    const double stddev = 1.0 / std::sqrt(static_cast<double>(in));
    auto& L = p.layer(id);
    L.W = Mat<Scalar>(out, in);
    for (Eigen::Index i = 0; i < L.W.size(); ++i) L.W.data()[i] = static_cast<Scalar>(stddev * normal(rng));
    L.b = Vec<Scalar>::Zero(out);
  }
  return p;
}

// ------------------------------------------------------------- adapters ---

template <class Scalar>
struct LoraFactor {
  LayerId layer{LayerId::last};
  Mat<Scalar> A;  // rank x in
  Mat<Scalar> B;  // out x rank
};

template <class Scalar>
struct LoraAdapter {
  int rank{0};
  Scalar scale{1};
  std::vector<LoraFactor<Scalar>> factors;

  [[nodiscard]] const LoraFactor<Scalar>* find(LayerId id) const {
    for (const auto& f : factors) {
      if (f.layer == id) return &f;
    }
    return nullptr;
  }
  LoraFactor<Scalar>* find(LayerId id) {
    for (auto& f : factors) {
      if (f.layer == id) return &f;
    }
    return nullptr;
  }

  /// Effective weight delta scale * B * A for one adapted layer.
  [[nodiscard]] Mat<Scalar> delta(LayerId id) const {
    const auto* f = find(id);
    if (f == nullptr) throw std::invalid_argument("LoraAdapter: layer not adapted");
    return scale * f->B * f->A;
  }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& f : factors) n += static_cast<std::size_t>(f.A.size() + f.B.size());
    return n;
  }

  [[nodiscard]] LoraAdapter zeros_like() const {
    LoraAdapter z{rank, scale, {}};
    for (const auto& f : factors) {
      z.factors.push_back({f.layer, Mat<Scalar>::Zero(f.A.rows(), f.A.cols()),
                           Mat<Scalar>::Zero(f.B.rows(), f.B.cols())});
    }
    return z;
  }

  template <class Other>
  [[nodiscard]] LoraAdapter<Other> cast() const {
    LoraAdapter<Other> o{rank, static_cast<Other>(scale), {}};
    for (const auto& f : factors) {
      o.factors.push_back({f.layer, f.A.template cast<Other>(), f.B.template cast<Other>()});
    }
    return o;
  }

  bool operator==(const LoraAdapter& o) const {
    if (rank != o.rank || scale != o.scale || factors.size() != o.factors.size()) return false;
    for (std::size_t i = 0; i < factors.size(); ++i) {
      if (factors[i].layer != o.factors[i].layer || factors[i].A != o.factors[i].A ||
          factors[i].B != o.factors[i].B) {
        return false;
      }
    }
    return true;
  }
};

template <class F, class A, class... As>
void for_each_factor_tensor(F&& f, A& a, As&... as) {
  for (std::size_t i = 0; i < a.factors.size(); ++i) {
    f(a.factors[i].A, as.factors[i].A...);
    f(a.factors[i].B, as.factors[i].B...);
  }
}

/// Zero-initialized adapter: A ~ N(0, 1/in), B = 0, so the adapted network
/// starts out identical to the base.
template <class Scalar>
LoraAdapter<Scalar> inject_lora(const DenoiserParams<Scalar>& params, int rank, std::span<const LayerId> subset,
                                std::uint64_t seed, Scalar scale = Scalar(1)) {
  if (rank < 1) throw std::invalid_argument("inject_lora: rank must be >= 1");
  if (subset.empty()) throw std::invalid_argument("inject_lora: empty layer subset");
  LoraAdapter<Scalar> ad{rank, scale, {}};
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const auto id : subset) {
    if (ad.find(id) != nullptr) throw std::invalid_argument("inject_lora: duplicate layer in subset");
    const int in = params.arch.in_dim(id);
    const int out = params.arch.out_dim(id);
    if (rank > std::min(in, out)) {
      throw std::invalid_argument("inject_lora: rank " + std::to_string(rank) + " exceeds min(in, out) = " +
                                  std::to_string(std::min(in, out)) + " for layer " +
                                  std::string(layer_name(id)));
    }
    LoraFactor<Scalar> f{id, Mat<Scalar>(rank, in), Mat<Scalar>::Zero(out, rank)};
    const double stddev = 1.0 / std::sqrt(static_cast<double>(in));
    for (Eigen::Index i = 0; i < f.A.size(); ++i) f.A.data()[i] = static_cast<Scalar>(stddev * normal(rng));
    ad.factors.push_back(std::move(f));
  }
  // Canonical order, so serialization and visiting do not depend on how the
  // subset was spelled.
  std::sort(ad.factors.begin(), ad.factors.end(),
            [](const auto& a, const auto& b) { return a.layer < b.layer; });
  return ad;
}

// --------------------------------------------------------- forward pass ---

template <class Scalar>
void time_embedding(int t, int dim, Scalar* out) {
  const int half = dim / 2;
  for (int k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
    out[k] = static_cast<Scalar>(std::sin(t * freq));
    out[half + k] = static_cast<Scalar>(std::cos(t * freq));
  }
}

template <class Scalar>
struct Activations {
  Vec<Scalar> cond_out;
  Mat<Scalar> input, z0, h0, z1, h1, f, out;
  Vec<Scalar> out_gain;  // b_t per column
  // A * layer_input for each adapted layer, indexed by LayerId.
  std::array<Mat<Scalar>, 4> lora_mid;
};

namespace detail {

template <class Scalar>
Scalar sigmoid(Scalar z) {
  return Scalar(1) / (Scalar(1) + std::exp(-z));
}

template <class Scalar>
void silu(const Mat<Scalar>& z, Mat<Scalar>& h) {
  h = z.unaryExpr([](Scalar v) { return v * sigmoid(v); });
}

template <class Scalar>
Mat<Scalar> silu_grad(const Mat<Scalar>& z) {
  return z.unaryExpr([](Scalar v) {
    const Scalar s = sigmoid(v);
    return s * (Scalar(1) + v * (Scalar(1) - s));
  });
}

// Z = W In + b 1^T (+ scale B (A In))
template <class Scalar>
void dense_forward(const DenseLayer<Scalar>& L, const LoraFactor<Scalar>* f, Scalar scale, const Mat<Scalar>& in,
                   Mat<Scalar>& z, Mat<Scalar>& mid) {
  z.noalias() = L.W * in;
  z.colwise() += L.b;
  if (f != nullptr) {
    mid.noalias() = f->A * in;
    z.noalias() += scale * (f->B * mid);
  }
}

// Gradients of a dense layer given dZ. Any output pointer may be null.
template <class Scalar>
void dense_backward(const DenseLayer<Scalar>& L, const LoraFactor<Scalar>* f, Scalar scale, const Mat<Scalar>& in,
                    const Mat<Scalar>& mid, const Mat<Scalar>& dz, DenseLayer<Scalar>* g_layer,
                    LoraFactor<Scalar>* g_factor, Mat<Scalar>* d_in) {
  if (g_layer != nullptr) {
    g_layer->W.noalias() += dz * in.transpose();
    g_layer->b += dz.rowwise().sum();
  }
  Mat<Scalar> bt_dz;
  if (f != nullptr && (g_factor != nullptr || d_in != nullptr)) {
    bt_dz.noalias() = f->B.transpose() * dz;  // r x batch
  }
  if (f != nullptr && g_factor != nullptr) {
    g_factor->B.noalias() += scale * (dz * mid.transpose());
    g_factor->A.noalias() += scale * (bt_dz * in.transpose());
  }
  if (d_in != nullptr) {
    d_in->noalias() = L.W.transpose() * dz;
    if (f != nullptr) d_in->noalias() += scale * (f->A.transpose() * bt_dz);
  }
}

}  // namespace detail

struct Preconditioning {
  double skip{0.0};   // a_t
  double gain{1.0};   // b_t
  double input{1.0};  // c_t
};

inline Preconditioning preconditioning(const Schedule& s, int t, double data_std) {
  if (!(data_std > 0.0)) return {};
  const double ab = s.alpha_bar(t);
  const double sigma = std::sqrt(1.0 - ab);
  const double se2 = (1.0 - ab) / ab;
  const double sd2 = data_std * data_std;
  return {sigma / (ab * (se2 + sd2)), -data_std / std::sqrt(se2 + sd2), 1.0 / std::sqrt(1.0 - ab + ab * sd2)};
}

/// Batched forward pass. x holds one flattened noisy image per column and
/// ts the matching time-steps. Result (predicted noise) lands in act.out.
template <class Scalar>
void forward(const DenoiserParams<Scalar>& p, const LoraAdapter<Scalar>* ad, const Schedule& s,
             const Mat<Scalar>& x, std::span<const int> ts, Activations<Scalar>& act) {
  const auto& arch = p.arch;
  const Eigen::Index batch = x.cols();
  if (x.rows() != arch.image_dim() || static_cast<Eigen::Index>(ts.size()) != batch) {
    throw std::invalid_argument("forward: input is " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()) +
                                " with " + std::to_string(ts.size()) + " time-steps; expected " +
                                std::to_string(arch.image_dim()) + " rows");
  }
  const Scalar scale = ad != nullptr ? ad->scale : Scalar(1);
  auto factor = [&](LayerId id) -> const LoraFactor<Scalar>* { return ad != nullptr ? ad->find(id) : nullptr; };

  {
    Mat<Scalar> y = p.y;
    Mat<Scalar> c;
    detail::dense_forward(p.cond, factor(LayerId::cond), scale, y, c, act.lora_mid[0]);
    act.cond_out = c.col(0);
  }

  const int d = arch.image_dim();
  act.input.resize(arch.input_dim(), batch);
  act.out_gain.resize(batch);
  Vec<Scalar> skip(batch);
  for (Eigen::Index j = 0; j < batch; ++j) {
    const int t = ts[static_cast<std::size_t>(j)];
    const auto pc = preconditioning(s, t, arch.data_std);
    skip[j] = static_cast<Scalar>(pc.skip);
    act.out_gain[j] = static_cast<Scalar>(pc.gain);
    act.input.col(j).head(d) = static_cast<Scalar>(pc.input) * x.col(j);
    time_embedding<Scalar>(t, arch.time_dim, act.input.col(j).data() + d);
  }
  act.input.bottomRows(arch.cond_dim).colwise() = act.cond_out;

  detail::dense_forward(p.w0, factor(LayerId::w0), scale, act.input, act.z0, act.lora_mid[1]);
  detail::silu(act.z0, act.h0);
  detail::dense_forward(p.w1, factor(LayerId::w1), scale, act.h0, act.z1, act.lora_mid[2]);
  detail::silu(act.z1, act.h1);
  detail::dense_forward(p.last, factor(LayerId::last), scale, act.h1, act.f, act.lora_mid[3]);
  act.out = act.f * act.out_gain.asDiagonal();
  act.out += x * skip.asDiagonal();
}

/// Back-propagates d_out (gradient of the loss w.r.t. act.out). Base
/// gradients accumulate into base_grad and adapter gradients into
/// lora_grad; either may be null. Propagation stops below the lowest layer
/// that still needs a gradient.
template <class Scalar>
void backward(const DenoiserParams<Scalar>& p, const LoraAdapter<Scalar>* ad, const Activations<Scalar>& act,
              const Mat<Scalar>& d_out, DenoiserParams<Scalar>* base_grad, LoraAdapter<Scalar>* lora_grad) {
  const Scalar scale = ad != nullptr ? ad->scale : Scalar(1);
  auto factor = [&](LayerId id) -> const LoraFactor<Scalar>* { return ad != nullptr ? ad->find(id) : nullptr; };
  auto gfactor = [&](LayerId id) -> LoraFactor<Scalar>* {
    return lora_grad != nullptr ? lora_grad->find(id) : nullptr;
  };
  auto glayer = [&](LayerId id) -> DenseLayer<Scalar>* {
    return base_grad != nullptr ? &base_grad->layer(id) : nullptr;
  };
  // Lowest layer whose parameters receive a gradient.
  int lowest = 4;
  if (base_grad != nullptr) {
    lowest = 0;
  } else if (lora_grad != nullptr) {
    for (const auto& f : lora_grad->factors) lowest = std::min(lowest, static_cast<int>(f.layer));
  }

  Mat<Scalar> dh1, dz1, dh0, dz0, d_input;
  const Mat<Scalar> d_f = d_out * act.out_gain.asDiagonal();
  detail::dense_backward(p.last, factor(LayerId::last), scale, act.h1, act.lora_mid[3], d_f, glayer(LayerId::last),
                         gfactor(LayerId::last), lowest < 3 ? &dh1 : nullptr);
  if (lowest >= 3) return;
  dz1 = dh1.cwiseProduct(detail::silu_grad(act.z1));
  detail::dense_backward(p.w1, factor(LayerId::w1), scale, act.h0, act.lora_mid[2], dz1, glayer(LayerId::w1),
                         gfactor(LayerId::w1), lowest < 2 ? &dh0 : nullptr);
  if (lowest >= 2) return;
  dz0 = dh0.cwiseProduct(detail::silu_grad(act.z0));
  detail::dense_backward(p.w0, factor(LayerId::w0), scale, act.input, act.lora_mid[1], dz0, glayer(LayerId::w0),
                         gfactor(LayerId::w0), lowest < 1 ? &d_input : nullptr);
  if (lowest >= 1) return;

  // The condition vector is broadcast to every column, so its gradient is the
  // row-sum of the matching input rows.
  const Mat<Scalar> d_cond = d_input.bottomRows(p.arch.cond_dim).rowwise().sum();
  const Mat<Scalar> y = p.y;
  Mat<Scalar> dy;
  detail::dense_backward(p.cond, factor(LayerId::cond), scale, y, act.lora_mid[0], d_cond, glayer(LayerId::cond),
                         gfactor(LayerId::cond), base_grad != nullptr ? &dy : nullptr);
  if (base_grad != nullptr) base_grad->y += dy.col(0);
}

/// Predicted noise for a batch.
template <class Scalar>
Mat<Scalar> predict_eps(const DenoiserParams<Scalar>& p, const LoraAdapter<Scalar>* ad, const Schedule& s,
                        const Mat<Scalar>& x, std::span<const int> ts) {
  Activations<Scalar> act;
  forward(p, ad, s, x, ts, act);
  return std::move(act.out);
}

inline constexpr float kX0Clamp = 1.5f;

/// x0^ = (x_t - sqrt(1 - ab) eps^) / sqrt(ab), clamped to [-1.5, 1.5].
template <class Scalar>
Mat<Scalar> eps_to_x0(const Schedule& s, const Mat<Scalar>& xt, const Mat<Scalar>& eps, std::span<const int> ts) {
  Mat<Scalar> x0(xt.rows(), xt.cols());
  for (Eigen::Index j = 0; j < xt.cols(); ++j) {
    const double ab = s.alpha_bar(ts[static_cast<std::size_t>(j)]);
    const auto a = static_cast<Scalar>(1.0 / std::sqrt(ab));
    const auto b = static_cast<Scalar>(std::sqrt(1.0 - ab));
    x0.col(j) = ((xt.col(j) - b * eps.col(j)) * a)
                    .cwiseMax(static_cast<Scalar>(-kX0Clamp))
                    .cwiseMin(static_cast<Scalar>(kX0Clamp));
  }
  return x0;
}

using Params = DenoiserParams<float>;
using Adapter = LoraAdapter<float>;

inline Image predict_x0(const Params& p, const Adapter* ad, const Image& xt, int t, const Schedule& s) {
  if (static_cast<int>(xt.size()) != p.arch.image_dim() || !(xt.shape() == p.arch.image)) {
    throw std::invalid_argument("predict_x0: image shape " + to_string(xt.shape()) + " does not match network " +
                                to_string(p.arch.image));
  }
  s.check_t(t);
  const Mat<float> x = xt.data();
  const std::array<int, 1> ts{t};
  const Mat<float> eps = predict_eps(p, ad, s, x, ts);
  return Image(xt.shape(), eps_to_x0(s, x, eps, ts).col(0));
}

// ------------------------------------------------------------- training ---

struct OptimizerConfig {
  enum class Kind { sgd_momentum, adam };
  Kind kind{Kind::sgd_momentum};
  double lr{0.01};
  double momentum{0.9};  // sgd_momentum; beta1 for adam
  double beta2{0.999};
  double eps{1e-8};
  int steps{1000};
  int batch{32};
};

inline OptimizerConfig::Kind parse_optimizer(const std::string& s) {
  if (s == "sgd_momentum") return OptimizerConfig::Kind::sgd_momentum;
  if (s == "adam") return OptimizerConfig::Kind::adam;
  throw std::invalid_argument("unknown optimizer '" + s + "' (expected sgd_momentum|adam)");
}

inline const char* to_string(OptimizerConfig::Kind k) {
  return k == OptimizerConfig::Kind::adam ? "adam" : "sgd_momentum";
}

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

/// One optimizer state per trainable tensor set; `visit(f, params, grads,
/// state...)` walks matching tensors.
template <class Model, class Visit>
class Optimizer {
 public:
  Optimizer(const OptimizerConfig& cfg, const Model& shape, Visit visit)
      : cfg_(cfg), m_(shape.zeros_like()), v_(shape.zeros_like()), visit_(visit) {}

  void step(Model& params, Model& grads) {
    ++t_;
    if (cfg_.kind == OptimizerConfig::Kind::sgd_momentum) {
      const auto lr = static_cast<float>(cfg_.lr);
      const auto mu = static_cast<float>(cfg_.momentum);
      visit_(
          [&](auto& p, auto& g, auto& m, auto&) {
            m = mu * m + g;
            p -= lr * m;
          },
          params, grads, m_, v_);
    } else {
      const double b1 = cfg_.momentum;
      const double b2 = cfg_.beta2;
      const auto c1 = static_cast<float>(1.0 - std::pow(b1, t_));
      const auto c2 = static_cast<float>(1.0 - std::pow(b2, t_));
      const auto lr = static_cast<float>(cfg_.lr);
      const auto eps = static_cast<float>(cfg_.eps);
      visit_(
          [&](auto& p, auto& g, auto& m, auto& v) {
            m = static_cast<float>(b1) * m + static_cast<float>(1.0 - b1) * g;
            v = static_cast<float>(b2) * v + static_cast<float>(1.0 - b2) * g.cwiseProduct(g);
            p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
          },
          params, grads, m_, v_);
    }
  }

 private:
  OptimizerConfig cfg_;
  Model m_, v_;
  Visit visit_;
  int t_{0};
};

struct BaseVisit {
  template <class F, class... Ps>
  void operator()(F&& f, Ps&... ps) const {
    for_each_tensor(f, ps...);
  }
};
struct AdapterVisit {
  template <class F, class... Ps>
  void operator()(F&& f, Ps&... ps) const {
    for_each_factor_tensor(f, ps...);
  }
};

/// Fills one training batch: clean images x0, noise eps, noisy x_t and t.
struct Batch {
  Mat<float> x0, eps, xt;
  std::vector<int> ts;
};

inline void draw_batch(std::span<const Image* const> images, const Schedule& s, int batch, Rng& rng, Batch& out) {
  const auto d = static_cast<Eigen::Index>(images.front()->size());
  out.x0.resize(d, batch);
  out.eps.resize(d, batch);
  out.xt.resize(d, batch);
  out.ts.resize(static_cast<std::size_t>(batch));
  std::uniform_int_distribution<std::size_t> pick(0, images.size() - 1);
  std::uniform_int_distribution<int> pick_t(1, s.T());
  std::normal_distribution<float> normal(0.0f, 1.0f);
  for (int j = 0; j < batch; ++j) {
    const auto& img = *images[pick(rng)];
    const int t = pick_t(rng);
    out.ts[static_cast<std::size_t>(j)] = t;
    out.x0.col(j) = img.data();
    for (Eigen::Index i = 0; i < d; ++i) out.eps(i, j) = normal(rng);
    const double ab = s.alpha_bar(t);
    out.xt.col(j) = static_cast<float>(std::sqrt(ab)) * out.x0.col(j) + static_cast<float>(std::sqrt(1.0 - ab)) * out.eps.col(j);
  }
}

/// Mean-squared eps error over all elements and its gradient w.r.t. the output.
inline double eps_mse(const Mat<float>& pred, const Mat<float>& eps, Mat<float>& d_out) {
  d_out = pred - eps;
  const double n = static_cast<double>(pred.size());
  const double loss = static_cast<double>(d_out.squaredNorm()) / n;
  d_out *= static_cast<float>(2.0 / n);
  return loss;
}

inline std::vector<const Image*> pointers(std::span<const Image> images) {
  std::vector<const Image*> out;
  out.reserve(images.size());
  for (const auto& img : images) out.push_back(&img);
  return out;
}

}  // namespace detail

struct TrainLog {
  std::vector<double> loss;  // per-step batch loss

  /// Mean loss over the first / last `window` steps.
  [[nodiscard]] double head(std::size_t window) const { return mean(0, std::min(window, loss.size())); }
  [[nodiscard]] double tail(std::size_t window) const {
    const auto w = std::min(window, loss.size());
    return mean(loss.size() - w, loss.size());
  }

 private:
  [[nodiscard]] double mean(std::size_t a, std::size_t b) const {
    if (a >= b) return 0.0;
    double acc = 0.0;
    for (auto i = a; i < b; ++i) acc += loss[i];
    return acc / static_cast<double>(b - a);
  }
};

using ProgressFn = std::function<void(int step, double loss)>;

/// Trains the base network on a pool with the uniform-weight eps
/// objective. Deterministic in (arch, pool, opt, seed).
inline Params pretrain_base(const Architecture& arch, std::span<const Image> pool, const Schedule& s,
                            const OptimizerConfig& opt, std::uint64_t seed, TrainLog* log = nullptr,
                            const ProgressFn& progress = {}) {
  if (pool.empty()) throw std::invalid_argument("pretrain_base: empty pool");
  for (const auto& img : pool) {
    if (!(img.shape() == arch.image)) throw std::invalid_argument("pretrain_base: pool image shape mismatch");
  }
  Params p = init_params<float>(arch, derive_seed(seed, {0x696E6974ULL}));
  detail::Optimizer optimizer(opt, p, detail::BaseVisit{});
  Rng rng(derive_seed(seed, {0x74726EULL}));
  const auto imgs = detail::pointers(pool);
  detail::Batch batch;
  Activations<float> act;
  Mat<float> d_out;
  for (int step = 0; step < opt.steps; ++step) {
    detail::draw_batch(imgs, s, opt.batch, rng, batch);
    forward(p, static_cast<const Adapter*>(nullptr), s, batch.xt, batch.ts, act);
    const double loss = detail::eps_mse(act.out, batch.eps, d_out);
    if (!std::isfinite(loss)) {
      throw DivergenceError("pretrain_base: loss became non-finite at step " + std::to_string(step));
    }
    Params grads = p.zeros_like();
    backward(p, static_cast<const Adapter*>(nullptr), act, d_out, &grads, static_cast<Adapter*>(nullptr));
    optimizer.step(p, grads);
    if (log != nullptr) log->loss.push_back(loss);
    if (progress) progress(step, loss);
  }
  return p;
}

/// Fits one class adapter on that class's few-shot images. Only the adapter
/// factors change; params is read-only.
inline Adapter train_adapter(const Params& params, Adapter adapter, std::span<const Image> class_images,
                             const Schedule& s, const OptimizerConfig& opt, std::uint64_t seed,
                             TrainLog* log = nullptr) {
  if (class_images.empty()) throw std::invalid_argument("train_adapter: no class images");
  if (adapter.factors.empty()) throw std::invalid_argument("train_adapter: adapter has no factors");
  detail::Optimizer optimizer(opt, adapter, detail::AdapterVisit{});
  Rng rng(seed);
  const auto imgs = detail::pointers(class_images);
  detail::Batch batch;
  Activations<float> act;
  Mat<float> d_out;
  for (int step = 0; step < opt.steps; ++step) {
    detail::draw_batch(imgs, s, opt.batch, rng, batch);
    forward(params, &adapter, s, batch.xt, batch.ts, act);
    const double loss = detail::eps_mse(act.out, batch.eps, d_out);
    if (!std::isfinite(loss)) {
      throw DivergenceError("train_adapter: loss became non-finite at step " + std::to_string(step) +
                            " (lr " + std::to_string(opt.lr) + ", rank " + std::to_string(adapter.rank) + ")");
    }
    Adapter grads = adapter.zeros_like();
    backward(params, &adapter, act, d_out, static_cast<Params*>(nullptr), &grads);
    optimizer.step(adapter, grads);
    if (log != nullptr) log->loss.push_back(loss);
  }
  return adapter;
}

/// Noise draws used by recon_loss for a given seed; shared by every class
/// scored against the same image.
inline Mat<float> recon_noise(Eigen::Index dim, int n_noise, std::uint64_t seed) {
  Mat<float> eps(dim, n_noise);
  Rng rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  for (Eigen::Index j = 0; j < n_noise; ++j) {
    for (Eigen::Index i = 0; i < dim; ++i) eps(i, j) = normal(rng);
  }
  return eps;
}

/// L_t without the w_t factor: mean over n_noise draws of ||x0 - x0^||^2.
inline double recon_loss(const Params& p, const Adapter* ad, const Image& x0, int t, const Schedule& s, int n_noise,
                         std::uint64_t seed) {
  if (n_noise < 1) throw std::invalid_argument("recon_loss: n_noise must be >= 1");
  if (!(x0.shape() == p.arch.image)) throw std::invalid_argument("recon_loss: image shape mismatch");
  s.check_t(t);
  const Mat<float> eps = recon_noise(static_cast<Eigen::Index>(x0.size()), n_noise, seed);
  const double ab = s.alpha_bar(t);
  Mat<float> xt = (static_cast<float>(std::sqrt(1.0 - ab)) * eps).colwise() +
                  static_cast<float>(std::sqrt(ab)) * x0.data();
  const std::vector<int> ts(static_cast<std::size_t>(n_noise), t);
  const Mat<float> x0_hat = eps_to_x0(s, xt, predict_eps(p, ad, s, xt, ts), ts);
  double acc = 0.0;
  for (Eigen::Index j = 0; j < x0_hat.cols(); ++j) {
    acc += static_cast<double>((x0_hat.col(j) - x0.data()).squaredNorm());
  }
  return acc / n_noise;
}

/// Ancestral sampling from pure noise over `steps` evenly strided time-steps
/// ending at t = 1. Each transition samples q(x_prev | x_t, x0^) with x0^
/// clamped to [-1, 1]; the returned image is the last x0^.
inline Image sample_image(const Params& p, const Adapter* ad, const Schedule& s, int steps, std::uint64_t seed) {
  if (steps < 1 || steps > s.T()) throw std::invalid_argument("sample_image: steps must be in [1, T]");
  const auto grid = even_grid(s, steps);
  Rng rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  const Eigen::Index d = p.arch.image_dim();
  Mat<float> x(d, 1);
  for (Eigen::Index i = 0; i < d; ++i) x(i, 0) = normal(rng);
  Mat<float> x0_hat;
  for (auto it = grid.rbegin(); it != grid.rend(); ++it) {
    const int t = *it;
    const std::array<int, 1> ts{t};
    x0_hat = eps_to_x0(s, x, predict_eps(p, ad, s, x, ts), ts).cwiseMax(-1.0f).cwiseMin(1.0f);
    if (std::next(it) == grid.rend()) break;
    const int t_prev = *std::next(it);
    const double ab = s.alpha_bar(t);
    const double ab_prev = s.alpha_bar(t_prev);
    const double alpha_eff = ab / ab_prev;
    const double beta_eff = 1.0 - alpha_eff;
    const auto c0 = static_cast<float>(std::sqrt(ab_prev) * beta_eff / (1.0 - ab));
    const auto ct = static_cast<float>(std::sqrt(alpha_eff) * (1.0 - ab_prev) / (1.0 - ab));
    const auto sigma = static_cast<float>(std::sqrt((1.0 - ab_prev) / (1.0 - ab) * beta_eff));
    Mat<float> z(d, 1);
    for (Eigen::Index i = 0; i < d; ++i) z(i, 0) = normal(rng);
    x = c0 * x0_hat + ct * x + sigma * z;
  }
  return Image(p.arch.image, x0_hat.col(0));
}

}  // namespace tif
