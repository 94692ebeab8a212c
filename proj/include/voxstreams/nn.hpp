#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "voxstreams/rng.hpp"
#include "voxstreams/tensor.hpp"

namespace voxstreams::nn {

// ---------------------------------------------------------------------------
// Input masking
// ---------------------------------------------------------------------------

struct MaskingPolicy {
  double mask_ratio = 0.15;
  double mask_value = 0.0;

  void validate() const {
    check(mask_ratio >= 0.0 && mask_ratio <= 1.0, "MaskingPolicy: mask_ratio must be in [0,1]");
  }
};

// Replaces exactly round(mask_ratio * n) coordinates, chosen uniformly
// without replacement by the seeded generator, with mask_value.
inline std::vector<double> apply_input_mask(const std::vector<double>& voxels,
                                            const MaskingPolicy& policy, std::uint64_t rng_seed) {
  policy.validate();
  check(!voxels.empty(), "apply_input_mask: input vector must be nonempty");
  const auto n = voxels.size();
  const auto k = static_cast<std::size_t>(
      std::llround(policy.mask_ratio * static_cast<double>(n)));
  std::vector<double> out = voxels;
  if (k == 0) return out;
  Rng rng(rng_seed);
  for (std::size_t i : rng.sample_without_replacement(n, std::min(k, n))) {
    out[i] = policy.mask_value;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameter registry
// ---------------------------------------------------------------------------

struct ParamRef {
  std::string name;
  Tensor* value;
  Tensor* grad;
};

// ---------------------------------------------------------------------------
// Layers. Each caches what its backward pass needs; backward must follow the
// matching forward. Gradients accumulate until zero_grad().
// ---------------------------------------------------------------------------

class Linear {
 public:
  Linear() = default;
  Linear(std::int64_t in_dim, std::int64_t out_dim, Rng& rng)
      : W_({in_dim, out_dim}), b_({out_dim}), gW_({in_dim, out_dim}), gb_({out_dim}) {
    const double std = std::sqrt(2.0 / static_cast<double>(in_dim + out_dim));
    for (auto& v : W_.data) v = std * rng.normal();
  }

  // x: (B, in) -> (B, out)
  Tensor forward(const Tensor& x) {
    check(x.rank() == 2 && x.shape[1] == W_.shape[0],
          "Linear: input dim mismatch, got " + x.shape_str());
    input_ = x;
    Tensor y = matmul(x, W_);
    for (std::int64_t i = 0; i < y.shape[0]; ++i) {
      for (std::int64_t j = 0; j < y.shape[1]; ++j) y.at2(i, j) += b_[j];
    }
    return y;
  }

  Tensor backward(const Tensor& grad_out) {
    add_inplace(gW_, matmul_at(input_, grad_out));
    for (std::int64_t i = 0; i < grad_out.shape[0]; ++i) {
      for (std::int64_t j = 0; j < grad_out.shape[1]; ++j) gb_[j] += grad_out.at2(i, j);
    }
    return matmul_bt(grad_out, W_);
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
    out.push_back({prefix + ".W", &W_, &gW_});
    out.push_back({prefix + ".b", &b_, &gb_});
  }

  Tensor& weight() { return W_; }
  Tensor& bias() { return b_; }
  std::int64_t in_dim() const { return W_.shape[0]; }
  std::int64_t out_dim() const { return W_.shape[1]; }

 private:
  Tensor W_, b_, gW_, gb_;
  Tensor input_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::int64_t dim)
      : gamma_(Tensor::full({dim}, 1.0)), beta_({dim}), ggamma_({dim}), gbeta_({dim}) {}

  Tensor forward(const Tensor& x) {
    check(x.rank() == 2 && x.shape[1] == gamma_.shape[0], "LayerNorm: dim mismatch");
    const std::int64_t batch = x.shape[0], d = x.shape[1];
    xhat_ = Tensor({batch, d});
    inv_std_.assign(static_cast<std::size_t>(batch), 0.0);
    Tensor y({batch, d});
    for (std::int64_t i = 0; i < batch; ++i) {
      double mean = 0.0;
      for (std::int64_t j = 0; j < d; ++j) mean += x.at2(i, j);
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (std::int64_t j = 0; j < d; ++j) {
        const double c = x.at2(i, j) - mean;
        var += c * c;
      }
      var /= static_cast<double>(d);
      const double inv = 1.0 / std::sqrt(var + 1e-8);
      inv_std_[static_cast<std::size_t>(i)] = inv;
      for (std::int64_t j = 0; j < d; ++j) {
        const double xh = (x.at2(i, j) - mean) * inv;
        xhat_.at2(i, j) = xh;
        y.at2(i, j) = gamma_[j] * xh + beta_[j];
      }
    }
    return y;
  }

  Tensor backward(const Tensor& grad_out) {
    const std::int64_t batch = grad_out.shape[0], d = grad_out.shape[1];
    Tensor grad_in({batch, d});
    for (std::int64_t i = 0; i < batch; ++i) {
      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
      for (std::int64_t j = 0; j < d; ++j) {
        const double dxh = grad_out.at2(i, j) * gamma_[j];
        sum_dxhat += dxh;
        sum_dxhat_xhat += dxh * xhat_.at2(i, j);
        ggamma_[j] += grad_out.at2(i, j) * xhat_.at2(i, j);
        gbeta_[j] += grad_out.at2(i, j);
      }
      const double inv = inv_std_[static_cast<std::size_t>(i)];
      for (std::int64_t j = 0; j < d; ++j) {
        const double dxh = grad_out.at2(i, j) * gamma_[j];
        grad_in.at2(i, j) = inv / static_cast<double>(d) *
                            (static_cast<double>(d) * dxh - sum_dxhat -
                             xhat_.at2(i, j) * sum_dxhat_xhat);
      }
    }
    return grad_in;
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
    out.push_back({prefix + ".gamma", &gamma_, &ggamma_});
    out.push_back({prefix + ".beta", &beta_, &gbeta_});
  }

 private:
  Tensor gamma_, beta_, ggamma_, gbeta_;
  Tensor xhat_;
  std::vector<double> inv_std_;
};

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_grad(double x) {
  const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * 3.14159265358979323846);
  return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * phi;
}

class Gelu {
 public:
  Tensor forward(const Tensor& x) {
    input_ = x;
    Tensor y = x;
    for (auto& v : y.data) v = gelu(v);
    return y;
  }

  Tensor backward(const Tensor& grad_out) {
    Tensor grad_in = grad_out;
    for (std::size_t i = 0; i < grad_in.data.size(); ++i) {
      grad_in.data[i] *= gelu_grad(input_.data[i]);
    }
    return grad_in;
  }

 private:
  Tensor input_;
};

// Inverted dropout. Active only when a step rng is supplied to forward.
class Dropout {
 public:
  Dropout() = default;
  explicit Dropout(double rate) : rate_(rate) {
    check(rate >= 0.0 && rate < 1.0, "Dropout: rate must be in [0,1)");
  }

  Tensor forward(const Tensor& x, Rng* rng) {
    if (rng == nullptr || rate_ == 0.0) {
      mask_.data.clear();
      return x;
    }
    mask_ = Tensor(x.shape);
    Tensor y = x;
    const double keep = 1.0 - rate_;
    for (std::size_t i = 0; i < y.data.size(); ++i) {
      const double m = rng->uniform() < rate_ ? 0.0 : 1.0 / keep;
      mask_.data[i] = m;
      y.data[i] *= m;
    }
    return y;
  }

  Tensor backward(const Tensor& grad_out) {
    if (mask_.data.empty()) return grad_out;
    Tensor grad_in = grad_out;
    for (std::size_t i = 0; i < grad_in.data.size(); ++i) grad_in.data[i] *= mask_.data[i];
    return grad_in;
  }

 private:
  double rate_ = 0.0;
  Tensor mask_;
};

// ---------------------------------------------------------------------------
// MLP backbone: [Linear -> LayerNorm -> GELU -> Dropout]* -> Linear.
// LayerNorm/activation are configuration, not contract.
// ---------------------------------------------------------------------------

enum class Activation { Gelu, Identity };

struct MlpBackboneConfig {
  std::int64_t input_dim = 0;
  std::vector<std::int64_t> hidden_dims;
  std::int64_t output_dim = 0;
  double dropout_rate = 0.0;
  double mask_ratio = 0.15;
  bool layer_norm = true;
  Activation activation = Activation::Gelu;

  void validate() const {
    check(input_dim >= 1, "MlpBackboneConfig: input_dim must be >= 1");
    check(output_dim >= 1, "MlpBackboneConfig: output_dim must be >= 1");
    check(!hidden_dims.empty(), "MlpBackboneConfig: hidden_dims must be nonempty");
    for (auto d : hidden_dims) check(d >= 1, "MlpBackboneConfig: hidden dims must be >= 1");
    check(dropout_rate >= 0.0 && dropout_rate < 1.0,
          "MlpBackboneConfig: dropout_rate must be in [0,1)");
    check(mask_ratio >= 0.0 && mask_ratio <= 1.0,
          "MlpBackboneConfig: mask_ratio must be in [0,1]");
  }
};

class MlpBackbone {
 public:
  MlpBackbone() = default;

  MlpBackbone(MlpBackboneConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(derive_seed(seed, "mlp_init"));
    std::int64_t prev = cfg_.input_dim;
    for (auto h : cfg_.hidden_dims) {
      linears_.emplace_back(prev, h, rng);
      norms_.emplace_back(h);
      gelus_.emplace_back();
      dropouts_.emplace_back(cfg_.dropout_rate);
      prev = h;
    }
    out_ = Linear(prev, cfg_.output_dim, rng);
  }

  // x: (B, input_dim) -> (B, output_dim). A non-null dropout rng marks
  // training mode; evaluation-mode calls are deterministic.
  Tensor forward(const Tensor& x, Rng* dropout_rng = nullptr) {
    Tensor h = x;
    for (std::size_t i = 0; i < linears_.size(); ++i) {
      h = linears_[i].forward(h);
      if (cfg_.layer_norm) h = norms_[i].forward(h);
      if (cfg_.activation == Activation::Gelu) h = gelus_[i].forward(h);
      h = dropouts_[i].forward(h, dropout_rng);
    }
    return out_.forward(h);
  }

  Tensor backward(const Tensor& grad_out) {
    Tensor g = out_.backward(grad_out);
    for (std::size_t i = linears_.size(); i-- > 0;) {
      g = dropouts_[i].backward(g);
      if (cfg_.activation == Activation::Gelu) g = gelus_[i].backward(g);
      if (cfg_.layer_norm) g = norms_[i].backward(g);
      g = linears_[i].backward(g);
    }
    return g;
  }

  std::vector<ParamRef> params() {
    std::vector<ParamRef> out;
    for (std::size_t i = 0; i < linears_.size(); ++i) {
      linears_[i].collect_params("lin" + std::to_string(i), out);
      if (cfg_.layer_norm) norms_[i].collect_params("ln" + std::to_string(i), out);
    }
    out_.collect_params("out", out);
    return out;
  }

  const MlpBackboneConfig& config() const { return cfg_; }
  Linear& output_layer() { return out_; }
  Linear& hidden_layer(std::size_t i) { return linears_[i]; }

 private:
  MlpBackboneConfig cfg_;
  std::vector<Linear> linears_;
  std::vector<LayerNorm> norms_;
  std::vector<Gelu> gelus_;
  std::vector<Dropout> dropouts_;
  Linear out_;
};

// ---------------------------------------------------------------------------
// Convolutional pieces for the upsampling decoder. Single-sample (H,W,C)
// tensors, stride 1, same padding, odd kernels.
// ---------------------------------------------------------------------------

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::int64_t in_ch, std::int64_t out_ch, std::int64_t kernel, Rng& rng)
      : W_({kernel, kernel, in_ch, out_ch}),
        b_({out_ch}),
        gW_({kernel, kernel, in_ch, out_ch}),
        gb_({out_ch}) {
    check(kernel >= 1 && kernel % 2 == 1, "Conv2d: kernel must be odd");
    const double std = std::sqrt(2.0 / static_cast<double>(kernel * kernel * (in_ch + out_ch)));
    for (auto& v : W_.data) v = std * rng.normal();
  }

  Tensor forward(const Tensor& x) {
    check(x.rank() == 3 && x.shape[2] == W_.shape[2],
          "Conv2d: input channels mismatch, got " + x.shape_str());
    input_ = x;
    const std::int64_t h = x.shape[0], w = x.shape[1], in_ch = W_.shape[2];
    const std::int64_t k = W_.shape[0], out_ch = W_.shape[3], pad = k / 2;
    Tensor y({h, w, out_ch});
    for (std::int64_t yy = 0; yy < h; ++yy) {
      for (std::int64_t xx = 0; xx < w; ++xx) {
        for (std::int64_t o = 0; o < out_ch; ++o) y.at3(yy, xx, o) = b_[o];
        for (std::int64_t dy = 0; dy < k; ++dy) {
          const std::int64_t sy = yy + dy - pad;
          if (sy < 0 || sy >= h) continue;
          for (std::int64_t dx = 0; dx < k; ++dx) {
            const std::int64_t sx = xx + dx - pad;
            if (sx < 0 || sx >= w) continue;
            for (std::int64_t c = 0; c < in_ch; ++c) {
              const double xv = x.at3(sy, sx, c);
              if (xv == 0.0) continue;
              const double* wrow = W_.data.data() + ((dy * k + dx) * in_ch + c) * out_ch;
              double* yrow = y.data.data() + (yy * w + xx) * out_ch;
              for (std::int64_t o = 0; o < out_ch; ++o) yrow[o] += xv * wrow[o];
            }
          }
        }
      }
    }
    return y;
  }

  Tensor backward(const Tensor& grad_out) {
    const Tensor& x = input_;
    const std::int64_t h = x.shape[0], w = x.shape[1], in_ch = W_.shape[2];
    const std::int64_t k = W_.shape[0], out_ch = W_.shape[3], pad = k / 2;
    Tensor grad_in(x.shape);
    for (std::int64_t yy = 0; yy < h; ++yy) {
      for (std::int64_t xx = 0; xx < w; ++xx) {
        const double* grow = grad_out.data.data() + (yy * w + xx) * out_ch;
        for (std::int64_t o = 0; o < out_ch; ++o) gb_[o] += grow[o];
        for (std::int64_t dy = 0; dy < k; ++dy) {
          const std::int64_t sy = yy + dy - pad;
          if (sy < 0 || sy >= h) continue;
          for (std::int64_t dx = 0; dx < k; ++dx) {
            const std::int64_t sx = xx + dx - pad;
            if (sx < 0 || sx >= w) continue;
            for (std::int64_t c = 0; c < in_ch; ++c) {
              const double xv = x.at3(sy, sx, c);
              double* wrow = gW_.data.data() + ((dy * k + dx) * in_ch + c) * out_ch;
              const double* wsrc = W_.data.data() + ((dy * k + dx) * in_ch + c) * out_ch;
              double acc = 0.0;
              for (std::int64_t o = 0; o < out_ch; ++o) {
                wrow[o] += xv * grow[o];
                acc += wsrc[o] * grow[o];
              }
              grad_in.at3(sy, sx, c) += acc;
            }
          }
        }
      }
    }
    return grad_in;
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
    out.push_back({prefix + ".W", &W_, &gW_});
    out.push_back({prefix + ".b", &b_, &gb_});
  }

  Tensor& weight() { return W_; }
  Tensor& bias() { return b_; }

 private:
  Tensor W_, b_, gW_, gb_;
  Tensor input_;
};

class Upsample2xNearest {
 public:
  Tensor forward(const Tensor& x) {
    check(x.rank() == 3, "Upsample2x: rank-3 tensor required");
    in_shape_ = x.shape;
    Tensor y({x.shape[0] * 2, x.shape[1] * 2, x.shape[2]});
    for (std::int64_t yy = 0; yy < y.shape[0]; ++yy) {
      for (std::int64_t xx = 0; xx < y.shape[1]; ++xx) {
        for (std::int64_t c = 0; c < y.shape[2]; ++c) {
          y.at3(yy, xx, c) = x.at3(yy / 2, xx / 2, c);
        }
      }
    }
    return y;
  }

  Tensor backward(const Tensor& grad_out) {
    Tensor grad_in(in_shape_);
    for (std::int64_t yy = 0; yy < grad_out.shape[0]; ++yy) {
      for (std::int64_t xx = 0; xx < grad_out.shape[1]; ++xx) {
        for (std::int64_t c = 0; c < grad_out.shape[2]; ++c) {
          grad_in.at3(yy / 2, xx / 2, c) += grad_out.at3(yy, xx, c);
        }
      }
    }
    return grad_in;
  }

 private:
  std::vector<std::int64_t> in_shape_;
};

class AvgPool2x {
 public:
  Tensor forward(const Tensor& x) {
    check(x.rank() == 3 && x.shape[0] % 2 == 0 && x.shape[1] % 2 == 0,
          "AvgPool2x: even spatial dims required");
    in_shape_ = x.shape;
    Tensor y({x.shape[0] / 2, x.shape[1] / 2, x.shape[2]});
    for (std::int64_t yy = 0; yy < y.shape[0]; ++yy) {
      for (std::int64_t xx = 0; xx < y.shape[1]; ++xx) {
        for (std::int64_t c = 0; c < y.shape[2]; ++c) {
          y.at3(yy, xx, c) = 0.25 * (x.at3(2 * yy, 2 * xx, c) + x.at3(2 * yy, 2 * xx + 1, c) +
                                     x.at3(2 * yy + 1, 2 * xx, c) + x.at3(2 * yy + 1, 2 * xx + 1, c));
        }
      }
    }
    return y;
  }

  Tensor backward(const Tensor& grad_out) {
    Tensor grad_in(in_shape_);
    for (std::int64_t yy = 0; yy < grad_out.shape[0]; ++yy) {
      for (std::int64_t xx = 0; xx < grad_out.shape[1]; ++xx) {
        for (std::int64_t c = 0; c < grad_out.shape[2]; ++c) {
          const double g = 0.25 * grad_out.at3(yy, xx, c);
          grad_in.at3(2 * yy, 2 * xx, c) = g;
          grad_in.at3(2 * yy, 2 * xx + 1, c) = g;
          grad_in.at3(2 * yy + 1, 2 * xx, c) = g;
          grad_in.at3(2 * yy + 1, 2 * xx + 1, c) = g;
        }
      }
    }
    return grad_in;
  }

 private:
  std::vector<std::int64_t> in_shape_;
};

// ---------------------------------------------------------------------------
// Upsampling CNN decoder: (16,16,64) -> (64,64,4), spatial side doubling
// exactly twice.
// ---------------------------------------------------------------------------

struct CnnDecoderConfig {
  std::int64_t in_side = 16;
  std::int64_t in_channels = 64;
  std::int64_t out_channels = 4;
  std::vector<std::int64_t> stage_channels = {32, 16};  // one entry per upsampling stage
  std::int64_t kernel = 3;

  void validate() const {
    check(in_side >= 1 && in_channels >= 1 && out_channels >= 1,
          "CnnDecoderConfig: dims must be >= 1");
    check(stage_channels.size() == 2, "CnnDecoderConfig: exactly two upsampling stages");
    for (auto c : stage_channels) check(c >= 1, "CnnDecoderConfig: stage channels must be >= 1");
    check(kernel >= 1 && kernel % 2 == 1, "CnnDecoderConfig: kernel must be odd");
  }
};

class CnnDecoder {
 public:
  CnnDecoder() = default;

  CnnDecoder(CnnDecoderConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(derive_seed(seed, "cnn_init"));
    conv0_ = Conv2d(cfg_.in_channels, cfg_.stage_channels[0], cfg_.kernel, rng);
    conv1_ = Conv2d(cfg_.stage_channels[0], cfg_.stage_channels[1], cfg_.kernel, rng);
    conv_out_ = Conv2d(cfg_.stage_channels[1], cfg_.out_channels, cfg_.kernel, rng);
  }

  // (in_side, in_side, in_channels) -> (4*in_side, 4*in_side, out_channels)
  Tensor forward(const Tensor& x) {
    check(x.rank() == 3 && x.shape[0] == cfg_.in_side && x.shape[1] == cfg_.in_side &&
              x.shape[2] == cfg_.in_channels,
          "CnnDecoder: expected (" + std::to_string(cfg_.in_side) + "," +
              std::to_string(cfg_.in_side) + "," + std::to_string(cfg_.in_channels) +
              ") input, got " + x.shape_str());
    Tensor h = act0_.forward(conv0_.forward(x));
    h = up0_.forward(h);
    h = act1_.forward(conv1_.forward(h));
    h = up1_.forward(h);
    return conv_out_.forward(h);
  }

  Tensor backward(const Tensor& grad_out) {
    Tensor g = conv_out_.backward(grad_out);
    g = up1_.backward(g);
    g = conv1_.backward(act1_.backward(g));
    g = up0_.backward(g);
    return conv0_.backward(act0_.backward(g));
  }

  std::vector<ParamRef> params() {
    std::vector<ParamRef> out;
    conv0_.collect_params("conv0", out);
    conv1_.collect_params("conv1", out);
    conv_out_.collect_params("conv_out", out);
    return out;
  }

  const CnnDecoderConfig& config() const { return cfg_; }

 private:
  CnnDecoderConfig cfg_;
  Conv2d conv0_, conv1_, conv_out_;
  Gelu act0_, act1_;
  Upsample2xNearest up0_, up1_;
};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<ParamRef> params, AdamConfig cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.value->shape);
      v_.emplace_back(p.value->shape);
    }
  }

  void zero_grad() {
    for (auto& p : params_) {
      for (auto& g : p.grad->data) g = 0.0;
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& value = params_[i].value->data;
      const auto& grad = params_[i].grad->data;
      auto& m = m_[i].data;
      auto& v = v_[i].data;
      for (std::size_t j = 0; j < value.size(); ++j) {
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * grad[j];
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * grad[j] * grad[j];
        value[j] -= cfg_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
      }
    }
  }

  std::int64_t step_count() const { return t_; }

  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }

 private:
  std::vector<ParamRef> params_;
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace voxstreams::nn
