#pragma once

// Residual encoder-decoder generators and PatchGAN discriminators as flat
// layer lists with hand-written backward passes. Parameters live in a
// name -> tensor map so they can be checkpointed and optimized by name.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "hetfuse/degrade.hpp"
#include "hetfuse/errors.hpp"
#include "hetfuse/tensor.hpp"

namespace hetfuse {

struct GeneratorSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t n_res_blocks = 6;
  std::size_t base_width = 64;

  void validate() const {
    if (in_channels < 1 || out_channels < 1 || n_res_blocks < 1 || base_width < 1) {
      throw Error("generator spec needs in/out channels, residual blocks and width >= 1");
    }
  }
  friend bool operator==(const GeneratorSpec&, const GeneratorSpec&) = default;
};

struct DiscriminatorSpec {
  static constexpr std::size_t kKernel = 4;
  static constexpr std::array<std::size_t, 5> kStrides{2, 2, 2, 1, 1};

  std::size_t in_channels = 1;
  std::array<std::size_t, 4> widths{64, 128, 256, 512};
  double leaky_slope = 0.2;

  void validate() const {
    if (in_channels < 1) throw Error("discriminator needs >= 1 input channel");
    for (auto w : widths) {
      if (w < 1) throw Error("discriminator widths must be >= 1");
    }
  }
  friend bool operator==(const DiscriminatorSpec&, const DiscriminatorSpec&) = default;
};

/// How a forward pass treats batch normalization.
enum class Pass {
  Train,  ///< batch statistics, running averages updated, caches kept for backward
  Probe,  ///< batch statistics, running averages untouched, caches kept for backward
  Infer,  ///< running averages, no caches
};

template <typename T>
struct NetworkParams {
  std::variant<GeneratorSpec, DiscriminatorSpec> spec;
  std::string prefix;
  std::map<std::string, Tensor<T>> params;   ///< trainable
  std::map<std::string, Tensor<T>> buffers;  ///< batch-norm running statistics

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params) n += t.size();
    return n;
  }
  bool all_finite() const {
    for (const auto& [name, t] : params) {
      if (!t.all_finite()) return false;
    }
    for (const auto& [name, t] : buffers) {
      if (!t.all_finite()) return false;
    }
    return true;
  }
  friend bool operator==(const NetworkParams&, const NetworkParams&) = default;
};

namespace layers {

enum class Padding { Zero, Reflect };

/// Source index for each (kernel tap, output position) along one axis, -1
/// where zero padding applies. `lo[tap]..hi[tap]` is the run of outputs whose
/// source is the plain strided index o * stride + tap - pad.
struct TapTable {
  std::vector<std::ptrdiff_t> index;
  std::vector<std::size_t> lo, hi;
  std::size_t out = 0, k = 0, stride = 1;
  std::ptrdiff_t pad = 0;

  const std::ptrdiff_t* row(std::size_t tap) const { return index.data() + tap * out; }
};

inline TapTable tap_table(std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                          std::size_t pad, Padding mode) {
  TapTable t{std::vector<std::ptrdiff_t>(k * out), std::vector<std::size_t>(k, 0),
             std::vector<std::size_t>(k, 0), out, k, stride, static_cast<std::ptrdiff_t>(pad)};
  const auto n = static_cast<std::ptrdiff_t>(in);
  for (std::size_t tap = 0; tap < k; ++tap) {
    std::size_t lo = out, hi = out;
    for (std::size_t o = 0; o < out; ++o) {
      const auto plain =
          static_cast<std::ptrdiff_t>(o * stride + tap) - static_cast<std::ptrdiff_t>(pad);
      auto i = plain;
      if (mode == Padding::Reflect) {
        i = detail::mirror_index(i, n);
      } else if (i < 0 || i >= n) {
        i = -1;
      }
      t.index[tap * out + o] = i;
      if (plain >= 0 && plain < n) {
        if (lo == out) lo = o;
        hi = o + 1;
      }
    }
    t.lo[tap] = lo == out ? 0 : lo;
    t.hi[tap] = lo == out ? 0 : hi;
  }
  return t;
}

/// Patch matrix for a convolution over one C x H x W sample: row
/// (c * k + ky) * k + kx, column oy * Wo + ox.
template <typename T>
void im2col(const T* src, std::size_t channels, std::size_t h, std::size_t w,
            const TapTable& ty, const TapTable& tx, T* cols) {
  const std::size_t k = tx.k, ho = ty.out, wo = tx.out;
  for (std::size_t c = 0; c < channels; ++c) {
    const T* plane = src + c * h * w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      const std::ptrdiff_t* ys = ty.row(ky);
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((c * k + ky) * k + kx) * ho * wo;
        const std::ptrdiff_t* xs = tx.row(kx);
        const std::size_t lo = tx.lo[kx], hi = tx.hi[kx];
        const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kx) - tx.pad;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          T* dst = row + oy * wo;
          if (ys[oy] < 0) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* line = plane + ys[oy] * static_cast<std::ptrdiff_t>(w);
          for (std::size_t ox = 0; ox < lo; ++ox) dst[ox] = xs[ox] < 0 ? T(0) : line[xs[ox]];
          if (tx.stride == 1) {
            std::copy(line + static_cast<std::ptrdiff_t>(lo) + off,
                      line + static_cast<std::ptrdiff_t>(hi) + off, dst + lo);
          } else {
            const T* s = line + off;
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = s[ox * tx.stride];
          }
          for (std::size_t ox = hi; ox < wo; ++ox) dst[ox] = xs[ox] < 0 ? T(0) : line[xs[ox]];
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters-adds a patch matrix back onto the image.
template <typename T>
void col2im(const T* cols, std::size_t channels, std::size_t h, std::size_t w,
            const TapTable& ty, const TapTable& tx, T* dst) {
  const std::size_t k = tx.k, ho = ty.out, wo = tx.out;
  for (std::size_t c = 0; c < channels; ++c) {
    T* plane = dst + c * h * w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      const std::ptrdiff_t* ys = ty.row(ky);
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((c * k + ky) * k + kx) * ho * wo;
        const std::ptrdiff_t* xs = tx.row(kx);
        const std::size_t lo = tx.lo[kx], hi = tx.hi[kx];
        const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kx) - tx.pad;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          if (ys[oy] < 0) continue;
          T* line = plane + ys[oy] * static_cast<std::ptrdiff_t>(w);
          const T* src = row + oy * wo;
          for (std::size_t ox = 0; ox < lo; ++ox) {
            if (xs[ox] >= 0) line[xs[ox]] += src[ox];
          }
          T* d = line + off;
          if (tx.stride == 1) {
            for (std::size_t ox = lo; ox < hi; ++ox) d[ox] += src[ox];
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) d[ox * tx.stride] += src[ox];
          }
          for (std::size_t ox = hi; ox < wo; ++ox) {
            if (xs[ox] >= 0) line[xs[ox]] += src[ox];
          }
        }
      }
    }
  }
}

inline std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < k) return 0;
  return (in + 2 * pad - k) / stride + 1;
}

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct Conv {
  std::string name;
  std::size_t cin, cout, k, stride, pad;
  Padding padding;
  bool bias;
  Tensor<T> input;
};

/// Transposed convolution that exactly doubles the spatial size
/// (kernel 3, stride 2, padding 1, output padding 1). Weight is cin x cout x k x k.
template <typename T>
struct ConvT {
  std::string name;
  std::size_t cin, cout;
  Tensor<T> input;
  static constexpr std::size_t k = 3, stride = 2, pad = 1;
};

template <typename T>
struct BatchNorm {
  std::string name;
  std::size_t channels;
  Tensor<T> xhat;
  std::vector<T> inv_std;
  Pass pass = Pass::Infer;
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;
};

enum class ActKind { ReLU, LeakyReLU, Tanh, Sigmoid };

template <typename T>
struct Activation {
  ActKind kind;
  double slope = 0.0;
  Tensor<T> output;
};

struct SkipBegin {};
struct SkipAdd {};

template <typename T>
using Layer = std::variant<Conv<T>, ConvT<T>, BatchNorm<T>, Activation<T>, SkipBegin, SkipAdd>;

}  // namespace layers

/// Evaluates one network over NCHW batches. Owns its parameters and the
/// gradient accumulators; `backward` must follow a `forward` with
/// Pass::Train or Pass::Probe.
template <typename T>
class Network {
 public:
  explicit Network(NetworkParams<T> params) : params_(std::move(params)) {
    layers_ = make_layers(params_.spec, params_.prefix);
    check_params();
    zero_grad();
  }

  const NetworkParams<T>& params() const noexcept { return params_; }
  NetworkParams<T>& params() noexcept { return params_; }
  const std::map<std::string, Tensor<T>>& grads() const noexcept { return grads_; }

  std::size_t in_channels() const {
    return std::visit([](const auto& s) { return s.in_channels; }, params_.spec);
  }

  void zero_grad() {
    for (const auto& [name, t] : params_.params) {
      auto& g = grads_[name];
      if (!g.same_shape(t)) g = Tensor<T>(t.n(), t.c(), t.h(), t.w());
      g.fill(T(0));
    }
  }

  /// Runs the network. When `trace` is given it receives the output of every layer.
  Tensor<T> forward(const Tensor<T>& x, Pass pass, std::vector<Tensor<T>>* trace = nullptr) {
    check_input(x);
    pass_ = pass;
    skips_.clear();
    Tensor<T> cur = x;
    if (trace) trace->clear();
    for (auto& layer : layers_) {
      cur = std::visit([&](auto& l) { return fwd(l, std::move(cur)); }, layer);
      if (trace) trace->push_back(cur);
    }
    return cur;
  }

  /// Back-propagates `grad_out`; accumulates parameter gradients and returns
  /// the gradient with respect to the forward input.
  Tensor<T> backward(const Tensor<T>& grad_out) {
    if (pass_ == Pass::Infer) throw Error("backward after an inference pass");
    skips_.clear();
    Tensor<T> g = grad_out;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
      g = std::visit([&](auto& l) { return bwd(l, std::move(g)); }, *it);
    }
    return g;
  }

  /// Drops forward caches.
  void release() {
    for (auto& layer : layers_) {
      std::visit(
          [](auto& l) {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, layers::Conv<T>> ||
                          std::is_same_v<L, layers::ConvT<T>>) {
              l.input = Tensor<T>();
            } else if constexpr (std::is_same_v<L, layers::BatchNorm<T>>) {
              l.xhat = Tensor<T>();
            } else if constexpr (std::is_same_v<L, layers::Activation<T>>) {
              l.output = Tensor<T>();
            }
          },
          layer);
    }
  }

  static std::vector<layers::Layer<T>> make_layers(
      const std::variant<GeneratorSpec, DiscriminatorSpec>& spec, const std::string& prefix) {
    using namespace layers;
    std::vector<Layer<T>> out;
    auto conv = [&](std::string n, std::size_t ci, std::size_t co, std::size_t k,
                    std::size_t s, std::size_t p, Padding pad, bool bias) {
      out.push_back(Conv<T>{prefix + "/" + n, ci, co, k, s, p, pad, bias, {}});
    };
    auto bn = [&](std::string n, std::size_t c) {
      out.push_back(BatchNorm<T>{prefix + "/" + n, c, {}, {}, Pass::Infer});
    };
    auto act = [&](ActKind kind, double slope = 0.0) {
      out.push_back(Activation<T>{kind, slope, {}});
    };

    if (const auto* g = std::get_if<GeneratorSpec>(&spec)) {
      g->validate();
      const std::size_t w = g->base_width;
      conv("ext/conv", g->in_channels, w, 7, 1, 3, Padding::Reflect, false);
      bn("ext/bn", w);
      act(ActKind::ReLU);
      conv("enc1/conv", w, 2 * w, 3, 2, 1, Padding::Zero, false);
      bn("enc1/bn", 2 * w);
      act(ActKind::ReLU);
      conv("enc2/conv", 2 * w, 4 * w, 3, 2, 1, Padding::Zero, false);
      bn("enc2/bn", 4 * w);
      act(ActKind::ReLU);
      for (std::size_t r = 0; r < g->n_res_blocks; ++r) {
        const std::string blk = "res" + std::to_string(r) + "/";
        out.push_back(SkipBegin{});
        conv(blk + "conv1", 4 * w, 4 * w, 3, 1, 1, Padding::Zero, false);
        bn(blk + "bn1", 4 * w);
        act(ActKind::ReLU);
        conv(blk + "conv2", 4 * w, 4 * w, 3, 1, 1, Padding::Zero, false);
        bn(blk + "bn2", 4 * w);
        out.push_back(SkipAdd{});
      }
      out.push_back(ConvT<T>{prefix + "/dec1/deconv", 4 * w, 2 * w, {}});
      bn("dec1/bn", 2 * w);
      act(ActKind::ReLU);
      out.push_back(ConvT<T>{prefix + "/dec2/deconv", 2 * w, w, {}});
      bn("dec2/bn", w);
      act(ActKind::ReLU);
      conv("out/conv", w, g->out_channels, 7, 1, 3, Padding::Reflect, true);
      act(ActKind::Tanh);
    } else {
      const auto& d = std::get<DiscriminatorSpec>(spec);
      d.validate();
      const auto& s = DiscriminatorSpec::kStrides;
      constexpr std::size_t k = DiscriminatorSpec::kKernel;
      conv("l1/conv", d.in_channels, d.widths[0], k, s[0], 1, Padding::Zero, true);
      act(ActKind::LeakyReLU, d.leaky_slope);
      for (std::size_t i = 1; i < 4; ++i) {
        const std::string blk = "l" + std::to_string(i + 1) + "/";
        conv(blk + "conv", d.widths[i - 1], d.widths[i], k, s[i], 1, Padding::Zero, false);
        bn(blk + "bn", d.widths[i]);
        act(ActKind::LeakyReLU, d.leaky_slope);
      }
      conv("l5/conv", d.widths[3], 1, k, s[4], 1, Padding::Zero, true);
      act(ActKind::Sigmoid);
    }
    return out;
  }

 private:
  using Mat = layers::Mat<T>;
  using CMap = Eigen::Map<const Mat>;
  using MMap = Eigen::Map<Mat>;

  void check_input(const Tensor<T>& x) const {
    if (x.c() != in_channels()) {
      throw ShapeError("network " + params_.prefix + " expects " + std::to_string(in_channels()) +
                       " channels, got " + std::to_string(x.c()));
    }
    if (x.n() == 0) throw ShapeError("empty batch");
    if (std::holds_alternative<GeneratorSpec>(params_.spec)) {
      if (x.h() == 0 || x.w() == 0 || x.h() % 4 != 0 || x.w() % 4 != 0) {
        throw ShapeError("generator input " + std::to_string(x.h()) + "x" +
                         std::to_string(x.w()) + " must be a positive multiple of 4");
      }
    } else {
      std::size_t h = x.h(), w = x.w();
      for (auto s : DiscriminatorSpec::kStrides) {
        h = layers::conv_out(h, DiscriminatorSpec::kKernel, s, 1);
        w = layers::conv_out(w, DiscriminatorSpec::kKernel, s, 1);
        if (h == 0 || w == 0) {
          throw ShapeError("discriminator input " + std::to_string(x.h()) + "x" +
                           std::to_string(x.w()) + " is too small");
        }
      }
    }
  }

  void check_params() const {
    for (const auto& layer : layers_) {
      std::visit(
          [&](const auto& l) {
            for (const auto& [name, shape] : shapes_of(l)) {
              const bool is_buffer = name.ends_with("running_mean") ||
                                     name.ends_with("running_var");
              const auto& map = is_buffer ? params_.buffers : params_.params;
              auto it = map.find(name);
              if (it == map.end()) throw FormatError("missing parameter " + name);
              if (it->second.shape() != shape) throw FormatError("shape mismatch for " + name);
            }
          },
          layer);
    }
  }

 public:
  /// Named tensors a layer owns, with their shapes.
  static std::vector<std::pair<std::string, std::array<std::size_t, 4>>> shapes_of(
      const layers::Layer<T>& layer) {
    std::vector<std::pair<std::string, std::array<std::size_t, 4>>> out;
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, layers::Conv<T>>) {
            out.push_back({l.name + "/weight", {l.cout, l.cin, l.k, l.k}});
            if (l.bias) out.push_back({l.name + "/bias", {l.cout, 1, 1, 1}});
          } else if constexpr (std::is_same_v<L, layers::ConvT<T>>) {
            out.push_back({l.name + "/weight", {l.cin, l.cout, L::k, L::k}});
          } else if constexpr (std::is_same_v<L, layers::BatchNorm<T>>) {
            out.push_back({l.name + "/weight", {l.channels, 1, 1, 1}});
            out.push_back({l.name + "/bias", {l.channels, 1, 1, 1}});
            out.push_back({l.name + "/running_mean", {l.channels, 1, 1, 1}});
            out.push_back({l.name + "/running_var", {l.channels, 1, 1, 1}});
          }
        },
        layer);
    return out;
  }

 private:
  // Patch-matrix workspace, grown on demand and reused across layers.
  static T* scratch(std::vector<T>& buf, std::size_t n) {
    if (buf.size() < n) buf.resize(n);
    return buf.data();
  }

  // --- convolution -------------------------------------------------------
  Tensor<T> fwd(layers::Conv<T>& l, Tensor<T> x) {
    const std::size_t ho = layers::conv_out(x.h(), l.k, l.stride, l.pad);
    const std::size_t wo = layers::conv_out(x.w(), l.k, l.stride, l.pad);
    const auto ty = layers::tap_table(x.h(), ho, l.k, l.stride, l.pad, l.padding);
    const auto tx = layers::tap_table(x.w(), wo, l.k, l.stride, l.pad, l.padding);
    const std::size_t kk = l.cin * l.k * l.k;
    T* cols = scratch(scratch_a_, kk * ho * wo);
    const auto& weight = params_.params.at(l.name + "/weight");
    CMap wm(weight.data(), l.cout, kk);
    Tensor<T> out(x.n(), l.cout, ho, wo);
    for (std::size_t i = 0; i < x.n(); ++i) {
      layers::im2col(x.sample(i), l.cin, x.h(), x.w(), ty, tx, cols);
      MMap om(out.sample(i), l.cout, ho * wo);
      om.noalias() = wm * CMap(cols, kk, ho * wo);
      if (l.bias) {
        const auto& b = params_.params.at(l.name + "/bias");
        for (std::size_t c = 0; c < l.cout; ++c) om.row(c).array() += b.data()[c];
      }
    }
    if (pass_ != Pass::Infer) l.input = std::move(x);
    return out;
  }

  Tensor<T> bwd(layers::Conv<T>& l, Tensor<T> g) {
    const Tensor<T>& x = l.input;
    const std::size_t ho = g.h(), wo = g.w();
    const auto ty = layers::tap_table(x.h(), ho, l.k, l.stride, l.pad, l.padding);
    const auto tx = layers::tap_table(x.w(), wo, l.k, l.stride, l.pad, l.padding);
    const std::size_t kk = l.cin * l.k * l.k;
    T* cols = scratch(scratch_a_, kk * ho * wo);
    T* dcols = scratch(scratch_b_, kk * ho * wo);
    const auto& weight = params_.params.at(l.name + "/weight");
    CMap wm(weight.data(), l.cout, kk);
    MMap dw(grads_.at(l.name + "/weight").data(), l.cout, kk);
    Tensor<T> dx(x.n(), l.cin, x.h(), x.w());
    for (std::size_t i = 0; i < x.n(); ++i) {
      layers::im2col(x.sample(i), l.cin, x.h(), x.w(), ty, tx, cols);
      CMap gm(g.sample(i), l.cout, ho * wo);
      dw.noalias() += gm * CMap(cols, kk, ho * wo).transpose();
      MMap(dcols, kk, ho * wo).noalias() = wm.transpose() * gm;
      layers::col2im(dcols, l.cin, x.h(), x.w(), ty, tx, dx.sample(i));
      if (l.bias) {
        auto& db = grads_.at(l.name + "/bias");
        const T* gp = g.sample(i);
        for (std::size_t c = 0; c < l.cout; ++c) {
          db.data()[c] = std::accumulate(gp + c * ho * wo, gp + (c + 1) * ho * wo, db.data()[c]);
        }
      }
    }
    return dx;
  }

  // --- transposed convolution ---------------------------------------------
  Tensor<T> fwd(layers::ConvT<T>& l, Tensor<T> x) {
    using L = layers::ConvT<T>;
    const std::size_t ho = 2 * x.h(), wo = 2 * x.w();
    const auto ty = layers::tap_table(ho, x.h(), L::k, L::stride, L::pad, layers::Padding::Zero);
    const auto tx = layers::tap_table(wo, x.w(), L::k, L::stride, L::pad, layers::Padding::Zero);
    const std::size_t kk = l.cout * L::k * L::k;
    T* cols = scratch(scratch_a_, kk * x.plane());
    CMap wm(params_.params.at(l.name + "/weight").data(), l.cin, kk);
    Tensor<T> out(x.n(), l.cout, ho, wo);
    for (std::size_t i = 0; i < x.n(); ++i) {
      MMap(cols, kk, x.plane()).noalias() = wm.transpose() * CMap(x.sample(i), l.cin, x.plane());
      layers::col2im(cols, l.cout, ho, wo, ty, tx, out.sample(i));
    }
    if (pass_ != Pass::Infer) l.input = std::move(x);
    return out;
  }

  Tensor<T> bwd(layers::ConvT<T>& l, Tensor<T> g) {
    using L = layers::ConvT<T>;
    const Tensor<T>& x = l.input;
    const auto ty = layers::tap_table(g.h(), x.h(), L::k, L::stride, L::pad, layers::Padding::Zero);
    const auto tx = layers::tap_table(g.w(), x.w(), L::k, L::stride, L::pad, layers::Padding::Zero);
    const std::size_t kk = l.cout * L::k * L::k;
    T* dcols = scratch(scratch_a_, kk * x.plane());
    CMap wm(params_.params.at(l.name + "/weight").data(), l.cin, kk);
    MMap dw(grads_.at(l.name + "/weight").data(), l.cin, kk);
    Tensor<T> dx(x.n(), l.cin, x.h(), x.w());
    for (std::size_t i = 0; i < x.n(); ++i) {
      layers::im2col(g.sample(i), l.cout, g.h(), g.w(), ty, tx, dcols);
      CMap dc(dcols, kk, x.plane());
      CMap xm(x.sample(i), l.cin, x.plane());
      dw.noalias() += xm * dc.transpose();
      MMap(dx.sample(i), l.cin, x.plane()).noalias() = wm * dc;
    }
    return dx;
  }

  // --- batch normalization ------------------------------------------------
  Tensor<T> fwd(layers::BatchNorm<T>& l, Tensor<T> x) {
    using L = layers::BatchNorm<T>;
    const auto& gamma = params_.params.at(l.name + "/weight");
    const auto& beta = params_.params.at(l.name + "/bias");
    auto& rmean = params_.buffers.at(l.name + "/running_mean");
    auto& rvar = params_.buffers.at(l.name + "/running_var");
    const std::size_t plane = x.plane();
    const double m = static_cast<double>(x.n() * plane);
    l.pass = pass_;
    if (pass_ == Pass::Infer) {
      for (std::size_t c = 0; c < l.channels; ++c) {
        const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rvar.data()[c]) + L::kEps));
        const T mu = rmean.data()[c];
        for (std::size_t i = 0; i < x.n(); ++i) {
          for (T& v : x.channel(i, c)) v = gamma.data()[c] * (v - mu) * inv + beta.data()[c];
        }
      }
      return x;
    }
    l.inv_std.assign(l.channels, T(0));
    for (std::size_t c = 0; c < l.channels; ++c) {
      double sum = 0.0;
      for (std::size_t i = 0; i < x.n(); ++i) {
        for (T v : x.channel(i, c)) sum += v;
      }
      const double mean = sum / m;
      double sq = 0.0;
      for (std::size_t i = 0; i < x.n(); ++i) {
        for (T v : x.channel(i, c)) sq += (v - mean) * (v - mean);
      }
      const double var = sq / m;
      const double inv = 1.0 / std::sqrt(var + L::kEps);
      l.inv_std[c] = static_cast<T>(inv);
      for (std::size_t i = 0; i < x.n(); ++i) {
        for (T& v : x.channel(i, c)) v = static_cast<T>((v - mean) * inv);
      }
      if (pass_ == Pass::Train) {
        const double unbiased = m > 1.0 ? sq / (m - 1.0) : var;
        rmean.data()[c] = static_cast<T>((1.0 - L::kMomentum) * rmean.data()[c] + L::kMomentum * mean);
        rvar.data()[c] = static_cast<T>((1.0 - L::kMomentum) * rvar.data()[c] + L::kMomentum * unbiased);
      }
    }
    l.xhat = x;
    for (std::size_t c = 0; c < l.channels; ++c) {
      for (std::size_t i = 0; i < x.n(); ++i) {
        for (T& v : x.channel(i, c)) v = gamma.data()[c] * v + beta.data()[c];
      }
    }
    return x;
  }

  Tensor<T> bwd(layers::BatchNorm<T>& l, Tensor<T> g) {
    const auto& gamma = params_.params.at(l.name + "/weight");
    auto& dgamma = grads_.at(l.name + "/weight");
    auto& dbeta = grads_.at(l.name + "/bias");
    const double m = static_cast<double>(g.n() * g.plane());
    for (std::size_t c = 0; c < l.channels; ++c) {
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::size_t i = 0; i < g.n(); ++i) {
        auto gc = g.channel(i, c);
        auto xc = l.xhat.channel(i, c);
        for (std::size_t k = 0; k < gc.size(); ++k) {
          sum_g += gc[k];
          sum_gx += static_cast<double>(gc[k]) * xc[k];
        }
      }
      dgamma.data()[c] += static_cast<T>(sum_gx);
      dbeta.data()[c] += static_cast<T>(sum_g);
      const double scale = gamma.data()[c] * static_cast<double>(l.inv_std[c]) / m;
      for (std::size_t i = 0; i < g.n(); ++i) {
        auto gc = g.channel(i, c);
        auto xc = l.xhat.channel(i, c);
        for (std::size_t k = 0; k < gc.size(); ++k) {
          gc[k] = static_cast<T>(scale * (m * gc[k] - sum_g - xc[k] * sum_gx));
        }
      }
    }
    return g;
  }

  // --- activations --------------------------------------------------------
  Tensor<T> fwd(layers::Activation<T>& l, Tensor<T> x) {
    using layers::ActKind;
    const T slope = static_cast<T>(l.slope);
    for (T& v : x.storage()) {
      switch (l.kind) {
        case ActKind::ReLU: v = v > T(0) ? v : T(0); break;
        case ActKind::LeakyReLU: v = v > T(0) ? v : slope * v; break;
        case ActKind::Tanh: v = std::tanh(v); break;
        case ActKind::Sigmoid: v = T(1) / (T(1) + std::exp(-v)); break;
      }
    }
    if (pass_ != Pass::Infer) l.output = x;
    return x;
  }

  Tensor<T> bwd(layers::Activation<T>& l, Tensor<T> g) {
    using layers::ActKind;
    const T slope = static_cast<T>(l.slope);
    const auto& y = l.output.storage();
    auto& d = g.storage();
    for (std::size_t i = 0; i < d.size(); ++i) {
      switch (l.kind) {
        case ActKind::ReLU: d[i] = y[i] > T(0) ? d[i] : T(0); break;
        case ActKind::LeakyReLU: d[i] = y[i] > T(0) ? d[i] : slope * d[i]; break;
        case ActKind::Tanh: d[i] *= T(1) - y[i] * y[i]; break;
        case ActKind::Sigmoid: d[i] *= y[i] * (T(1) - y[i]); break;
      }
    }
    return g;
  }

  // --- residual skip ------------------------------------------------------
  Tensor<T> fwd(layers::SkipBegin&, Tensor<T> x) {
    skips_.push_back(x);
    return x;
  }
  Tensor<T> fwd(layers::SkipAdd&, Tensor<T> x) {
    x += skips_.back();
    skips_.pop_back();
    return x;
  }
  Tensor<T> bwd(layers::SkipAdd&, Tensor<T> g) {
    skips_.push_back(g);
    return g;
  }
  Tensor<T> bwd(layers::SkipBegin&, Tensor<T> g) {
    g += skips_.back();
    skips_.pop_back();
    return g;
  }

  NetworkParams<T> params_;
  std::map<std::string, Tensor<T>> grads_;
  std::vector<layers::Layer<T>> layers_;
  std::vector<Tensor<T>> skips_;
  std::vector<T> scratch_a_, scratch_b_;
  Pass pass_ = Pass::Infer;
};

namespace detail {

template <typename T>
NetworkParams<T> build_network(std::variant<GeneratorSpec, DiscriminatorSpec> spec,
                               const std::string& prefix, std::uint64_t seed) {
  NetworkParams<T> p{spec, prefix, {}, {}};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  for (const auto& layer : Network<T>::make_layers(spec, prefix)) {
    const bool is_bn = std::holds_alternative<layers::BatchNorm<T>>(layer);
    for (const auto& [name, shape] : Network<T>::shapes_of(layer)) {
      Tensor<T> t(shape[0], shape[1], shape[2], shape[3]);
      if (name.ends_with("running_mean")) {
        p.buffers.emplace(name, std::move(t));
      } else if (name.ends_with("running_var")) {
        t.fill(T(1));
        p.buffers.emplace(name, std::move(t));
      } else {
        if (name.ends_with("/weight")) {
          if (is_bn) {
            t.fill(T(1));
          } else {
            for (T& v : t.storage()) v = static_cast<T>(normal(rng));
          }
        }
        p.params.emplace(name, std::move(t));
      }
    }
  }
  return p;
}

}  // namespace detail

/// Residual encoder-decoder generator, Gaussian(0, 0.02) weights from `seed`.
template <typename T = float>
NetworkParams<T> build_generator(const GeneratorSpec& spec, std::uint64_t seed,
                                 const std::string& prefix = "g_f") {
  return detail::build_network<T>(spec, prefix, seed);
}

/// PatchGAN discriminator, Gaussian(0, 0.02) weights from `seed`.
template <typename T = float>
NetworkParams<T> build_discriminator(const DiscriminatorSpec& spec, std::uint64_t seed,
                                     const std::string& prefix = "d_f") {
  return detail::build_network<T>(spec, prefix, seed);
}

/// Inference-mode generator pass (batch-norm running statistics).
template <typename T>
Tensor<T> generator_forward(const NetworkParams<T>& params, const Tensor<T>& input) {
  if (!std::holds_alternative<GeneratorSpec>(params.spec)) throw ShapeError("not a generator");
  Network<T> net(params);
  return net.forward(input, Pass::Infer);
}

/// Inference-mode discriminator pass; returns the patch probability map.
template <typename T>
Tensor<T> discriminator_forward(const NetworkParams<T>& params, const Tensor<T>& input) {
  if (!std::holds_alternative<DiscriminatorSpec>(params.spec)) {
    throw ShapeError("not a discriminator");
  }
  Network<T> net(params);
  return net.forward(input, Pass::Infer);
}

/// Spatial size of the patch map for an h x w discriminator input.
inline std::pair<std::size_t, std::size_t> discriminator_map_size(std::size_t h, std::size_t w) {
  for (auto s : DiscriminatorSpec::kStrides) {
    h = layers::conv_out(h, DiscriminatorSpec::kKernel, s, 1);
    w = layers::conv_out(w, DiscriminatorSpec::kKernel, s, 1);
  }
  return {h, w};
}

}  // namespace hetfuse
