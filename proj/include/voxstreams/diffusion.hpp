#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxstreams/losses.hpp"
#include "voxstreams/nn.hpp"
#include "voxstreams/rng.hpp"
#include "voxstreams/serialize.hpp"
#include "voxstreams/tensor.hpp"

// Denoising diffusion over flat embedding vectors with an unnoised-target
// (x0) prediction objective and conditional ancestral sampling.
namespace voxstreams::diffusion {

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

struct NoiseSchedule {
  std::vector<double> betas;
  std::vector<double> alphas_cumprod;

  static NoiseSchedule linear(int steps, double beta_start = 1e-4, double beta_end = 0.02) {
    check(steps >= 1, "NoiseSchedule: step count must be >= 1");
    check(beta_start > 0.0 && beta_end > 0.0 && beta_start < 1.0 && beta_end < 1.0,
          "NoiseSchedule: betas must lie in (0,1)");
    NoiseSchedule s;
    s.betas.resize(static_cast<std::size_t>(steps));
    s.alphas_cumprod.resize(static_cast<std::size_t>(steps));
    double abar = 1.0;
    for (int t = 0; t < steps; ++t) {
      const double frac = steps == 1 ? 0.0 : static_cast<double>(t) / (steps - 1);
      const double beta = beta_start + (beta_end - beta_start) * frac;
      s.betas[static_cast<std::size_t>(t)] = beta;
      abar *= 1.0 - beta;
      s.alphas_cumprod[static_cast<std::size_t>(t)] = abar;
    }
    s.validate();
    return s;
  }

  int step_count() const { return static_cast<int>(betas.size()); }

  void validate() const {
    check(!betas.empty(), "NoiseSchedule: empty");
    check(betas.size() == alphas_cumprod.size(), "NoiseSchedule: length mismatch");
    double prev = 1.0 + 1e-15;
    double abar = 1.0;
    for (std::size_t t = 0; t < betas.size(); ++t) {
      check(betas[t] > 0.0 && betas[t] < 1.0, "NoiseSchedule: beta out of (0,1)");
      abar *= 1.0 - betas[t];
      check(std::abs(abar - alphas_cumprod[t]) <= 1e-12 * std::max(1.0, std::abs(abar)),
            "NoiseSchedule: alphas_cumprod inconsistent with betas");
      check(alphas_cumprod[t] > 0.0 && alphas_cumprod[t] <= 1.0,
            "NoiseSchedule: alpha_cumprod out of (0,1]");
      check(alphas_cumprod[t] < prev, "NoiseSchedule: alpha_cumprod must strictly decrease");
      prev = alphas_cumprod[t];
    }
  }
};

// ---------------------------------------------------------------------------
// Forward process, loss, reverse step
// ---------------------------------------------------------------------------

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
inline Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps,
                            const NoiseSchedule& schedule) {
  check(t >= 0 && t < schedule.step_count(), "forward_noise: t out of range");
  require_same_shape(x0, eps, "forward_noise");
  const double abar = schedule.alphas_cumprod[static_cast<std::size_t>(t)];
  const double signal = std::sqrt(abar);
  const double noise = std::sqrt(1.0 - abar);
  Tensor x = x0;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    x.data[i] = signal * x0.data[i] + noise * eps.data[i];
  }
  return x;
}

// MSE between predicted and true unnoised embedding.
inline double ddpm_loss(const Tensor& x0_hat, const Tensor& x0) { return losses::mse(x0_hat, x0); }

inline Tensor ddpm_loss_grad(const Tensor& x0_hat, const Tensor& x0) {
  return losses::mse_grad(x0_hat, x0);
}

// One reverse step via the q(x_{t-1} | x_t, x0) posterior with x0 replaced
// by the prediction. Noise is added for t > 0 only. At t == 0 the posterior
// coefficients collapse to (1, 0), so the output is exactly x0_hat.
inline Tensor denoise_step(const Tensor& x_t, int t, const Tensor& x0_hat,
                           const NoiseSchedule& schedule, std::uint64_t eps_seed) {
  check(t >= 0 && t < schedule.step_count(), "denoise_step: t out of range");
  require_same_shape(x_t, x0_hat, "denoise_step");
  const double beta = schedule.betas[static_cast<std::size_t>(t)];
  const double alpha = 1.0 - beta;
  const double abar = schedule.alphas_cumprod[static_cast<std::size_t>(t)];
  const double abar_prev = t > 0 ? schedule.alphas_cumprod[static_cast<std::size_t>(t - 1)] : 1.0;
  // At t == 0 the coefficients collapse symbolically: 1 - abar_0 == beta_0,
  // so the mean is exactly x0_hat with zero variance.
  const double coef_x0 = t == 0 ? 1.0 : std::sqrt(abar_prev) * beta / (1.0 - abar);
  const double coef_xt = t == 0 ? 0.0 : std::sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar);
  const double post_var = t == 0 ? 0.0 : (1.0 - abar_prev) / (1.0 - abar) * beta;

  Tensor out = x_t;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = coef_x0 * x0_hat.data[i] + coef_xt * x_t.data[i];
  }
  if (t > 0) {
    Rng rng(eps_seed);
    const double sigma = std::sqrt(post_var);
    for (auto& v : out.data) v += sigma * rng.normal();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Denoiser network: MLP over the flat embedding with a sinusoidal step
// embedding and additive condition injection at the input.
// ---------------------------------------------------------------------------

struct DenoiserConfig {
  std::int64_t dim = 0;
  std::int64_t cond_dim = 0;  // 0 = unconditional
  std::vector<std::int64_t> hidden_dims = {64};
  std::int64_t time_embed_dim = 32;

  void validate() const {
    check(dim >= 1, "DenoiserConfig: dim must be >= 1");
    check(cond_dim >= 0, "DenoiserConfig: cond_dim must be >= 0");
    check(!hidden_dims.empty(), "DenoiserConfig: hidden_dims must be nonempty");
    check(time_embed_dim >= 2 && time_embed_dim % 2 == 0,
          "DenoiserConfig: time_embed_dim must be even and >= 2");
  }
};

inline Tensor sinusoidal_time_embedding(const std::vector<int>& t, std::int64_t embed_dim) {
  Tensor emb({static_cast<std::int64_t>(t.size()), embed_dim});
  const std::int64_t half = embed_dim / 2;
  for (std::size_t r = 0; r < t.size(); ++r) {
    for (std::int64_t i = 0; i < half; ++i) {
      const double freq =
          std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double angle = static_cast<double>(t[r]) * freq;
      emb.at2(static_cast<std::int64_t>(r), 2 * i) = std::sin(angle);
      emb.at2(static_cast<std::int64_t>(r), 2 * i + 1) = std::cos(angle);
    }
  }
  return emb;
}

class DenoiserNet {
 public:
  DenoiserNet() = default;

  DenoiserNet(DenoiserConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(derive_seed(seed, "denoiser_init"));
    const std::int64_t h0 = cfg_.hidden_dims.front();
    in_proj_ = nn::Linear(cfg_.dim, h0, rng);
    time_proj_ = nn::Linear(cfg_.time_embed_dim, h0, rng);
    if (cfg_.cond_dim > 0) cond_proj_ = nn::Linear(cfg_.cond_dim, h0, rng);
    for (std::size_t i = 0; i + 1 < cfg_.hidden_dims.size(); ++i) {
      hidden_.emplace_back(cfg_.hidden_dims[i], cfg_.hidden_dims[i + 1], rng);
      hidden_act_.emplace_back();
    }
    out_ = nn::Linear(cfg_.hidden_dims.back(), cfg_.dim, rng);
  }

  // x: (B, dim), t: per-row step indices, cond: (B, cond_dim) or empty tensor.
  Tensor forward(const Tensor& x, const std::vector<int>& t, const Tensor& cond) {
    check(x.rank() == 2 && x.shape[1] == cfg_.dim, "DenoiserNet: bad input shape");
    check(static_cast<std::int64_t>(t.size()) == x.shape[0], "DenoiserNet: t size mismatch");
    Tensor h = in_proj_.forward(x);
    add_inplace(h, time_proj_.forward(sinusoidal_time_embedding(t, cfg_.time_embed_dim)));
    has_cond_ = cond.numel() > 0;
    if (has_cond_) {
      check(cfg_.cond_dim > 0, "DenoiserNet: condition supplied to unconditional net");
      add_inplace(h, cond_proj_.forward(cond));
    }
    h = act0_.forward(h);
    for (std::size_t i = 0; i < hidden_.size(); ++i) {
      h = hidden_act_[i].forward(hidden_[i].forward(h));
    }
    return out_.forward(h);
  }

  // Accumulates parameter gradients. The returned gradient w.r.t. x is not
  // used by callers (x_t is data), so backward only propagates internally.
  void backward(const Tensor& grad_out) {
    Tensor g = out_.backward(grad_out);
    for (std::size_t i = hidden_.size(); i-- > 0;) {
      g = hidden_[i].backward(hidden_act_[i].backward(g));
    }
    g = act0_.backward(g);
    in_proj_.backward(g);
    time_proj_.backward(g);
    if (has_cond_) cond_proj_.backward(g);
  }

  std::vector<nn::ParamRef> params() {
    std::vector<nn::ParamRef> out;
    in_proj_.collect_params("in_proj", out);
    time_proj_.collect_params("time_proj", out);
    if (cfg_.cond_dim > 0) cond_proj_.collect_params("cond_proj", out);
    for (std::size_t i = 0; i < hidden_.size(); ++i) {
      hidden_[i].collect_params("hidden" + std::to_string(i), out);
    }
    out_.collect_params("out", out);
    return out;
  }

  const DenoiserConfig& config() const { return cfg_; }

 private:
  DenoiserConfig cfg_;
  nn::Linear in_proj_, time_proj_, cond_proj_, out_;
  nn::Gelu act0_;
  std::vector<nn::Linear> hidden_;
  std::vector<nn::Gelu> hidden_act_;
  bool has_cond_ = false;
};

// ---------------------------------------------------------------------------
// Prior model = denoiser + schedule (+ optional x0 clamp during sampling).
// ---------------------------------------------------------------------------

struct PriorModel {
  DenoiserNet net;
  NoiseSchedule schedule;
  bool clamp_x0 = false;
  double clamp_lo = -1.0;
  double clamp_hi = 1.0;
  std::uint64_t seed = 0;
  std::int64_t train_steps = 0;
};

// Ancestral sampling. steps == 0 returns the condition unchanged (bypass).
// Otherwise the reverse chain runs over timesteps steps-1 .. 0 of the stored
// schedule starting from seeded Gaussian noise; steps == T is the full chain.
// Conditioning, when present, is injected at every denoising step.
inline Tensor sample(PriorModel& prior, const Tensor& condition, int steps, std::uint64_t seed) {
  const int max_steps = prior.schedule.step_count();
  check(steps >= 0 && steps <= max_steps, "sample: steps out of [0, T]");
  if (steps == 0) {
    check(condition.numel() > 0, "sample: bypass (steps == 0) requires a condition");
    return condition;
  }
  const std::int64_t dim = prior.net.config().dim;
  Rng init_rng(derive_seed(seed, "ddpm_sample_init"));
  Tensor x = Tensor::gaussian({1, dim}, init_rng);
  Tensor cond_row;
  if (condition.numel() > 0) {
    check(condition.numel() == prior.net.config().cond_dim, "sample: condition dim mismatch");
    cond_row = condition.reshaped({1, condition.numel()});
  }
  for (int t = steps - 1; t >= 0; --t) {
    Tensor x0_hat = prior.net.forward(x, {t}, cond_row);
    if (prior.clamp_x0) {
      for (auto& v : x0_hat.data) v = std::clamp(v, prior.clamp_lo, prior.clamp_hi);
    }
    x = denoise_step(x, t, x0_hat, prior.schedule,
                     derive_seed(seed, "ddpm_sample_step", static_cast<std::uint64_t>(t)));
  }
  return x.reshaped({dim});
}

// ---------------------------------------------------------------------------
// Standalone prior training on a fixed set of embeddings (used by the toy
// recovery setups; the mid stream embeds the same update inside its own
// joint loop).
// ---------------------------------------------------------------------------

struct PriorTrainConfig {
  int steps = 2000;
  std::int64_t batch_size = 16;
  double lr = 1e-3;
};

inline PriorModel train_prior(const Tensor& x0_rows, const Tensor& cond_rows,
                              const DenoiserConfig& net_cfg, const NoiseSchedule& schedule,
                              const PriorTrainConfig& cfg, std::uint64_t seed) {
  check(x0_rows.rank() == 2 && x0_rows.shape[0] >= 1, "train_prior: (N,dim) data required");
  const bool conditional = cond_rows.numel() > 0;
  if (conditional) {
    check(cond_rows.rank() == 2 && cond_rows.shape[0] == x0_rows.shape[0],
          "train_prior: condition rows misaligned");
  }
  PriorModel prior;
  prior.net = DenoiserNet(net_cfg, seed);
  prior.schedule = schedule;
  prior.seed = seed;

  nn::Adam opt(prior.net.params(), {.lr = cfg.lr});
  Rng data_rng(derive_seed(seed, "prior_train_data"));
  Rng noise_rng(derive_seed(seed, "prior_train_noise"));
  const std::int64_t n = x0_rows.shape[0], dim = x0_rows.shape[1];
  const std::int64_t batch = std::min<std::int64_t>(cfg.batch_size, n);

  for (int step = 0; step < cfg.steps; ++step) {
    Tensor x0({batch, dim});
    Tensor cond = conditional ? Tensor({batch, cond_rows.shape[1]}) : Tensor();
    std::vector<int> t(static_cast<std::size_t>(batch));
    Tensor x_t({batch, dim});
    for (std::int64_t b = 0; b < batch; ++b) {
      const auto row = static_cast<std::int64_t>(data_rng.uniform_int(static_cast<std::uint64_t>(n)));
      t[static_cast<std::size_t>(b)] =
          static_cast<int>(data_rng.uniform_int(static_cast<std::uint64_t>(schedule.step_count())));
      const double abar =
          schedule.alphas_cumprod[static_cast<std::size_t>(t[static_cast<std::size_t>(b)])];
      const double signal = std::sqrt(abar), noise = std::sqrt(1.0 - abar);
      for (std::int64_t j = 0; j < dim; ++j) {
        const double v = x0_rows.at2(row, j);
        x0.at2(b, j) = v;
        x_t.at2(b, j) = signal * v + noise * noise_rng.normal();
      }
      if (conditional) {
        for (std::int64_t j = 0; j < cond_rows.shape[1]; ++j) {
          cond.at2(b, j) = cond_rows.at2(row, j);
        }
      }
    }
    opt.zero_grad();
    const Tensor x0_hat = prior.net.forward(x_t, t, cond);
    prior.net.backward(ddpm_loss_grad(x0_hat, x0));
    opt.step();
    ++prior.train_steps;
  }
  return prior;
}

// ---------------------------------------------------------------------------
// Checkpointing (shared container format; schedule serialized inside).
// ---------------------------------------------------------------------------

inline serialize::Checkpoint prior_to_checkpoint(DenoiserNet& net, const PriorModel& prior) {
  serialize::Checkpoint ckpt;
  const auto& cfg = net.config();
  ckpt.meta = {
      {"kind", "diffusion_prior"},
      {"dim", cfg.dim},
      {"cond_dim", cfg.cond_dim},
      {"hidden_dims", cfg.hidden_dims},
      {"time_embed_dim", cfg.time_embed_dim},
      {"clamp_x0", prior.clamp_x0},
      {"clamp_lo", prior.clamp_lo},
      {"clamp_hi", prior.clamp_hi},
      {"seed", prior.seed},
      {"step", prior.train_steps},
  };
  for (const auto& p : net.params()) ckpt.tensors.emplace_back(p.name, *p.value);
  ckpt.tensors.emplace_back("schedule.betas", Tensor::from_vector(prior.schedule.betas));
  return ckpt;
}

inline PriorModel prior_from_checkpoint(const serialize::Checkpoint& ckpt) {
  check(ckpt.meta.value("kind", "") == "diffusion_prior", "checkpoint is not a diffusion prior");
  DenoiserConfig cfg;
  cfg.dim = ckpt.meta.at("dim").get<std::int64_t>();
  cfg.cond_dim = ckpt.meta.at("cond_dim").get<std::int64_t>();
  cfg.hidden_dims = ckpt.meta.at("hidden_dims").get<std::vector<std::int64_t>>();
  cfg.time_embed_dim = ckpt.meta.at("time_embed_dim").get<std::int64_t>();
  PriorModel prior;
  prior.seed = ckpt.meta.at("seed").get<std::uint64_t>();
  prior.train_steps = ckpt.meta.at("step").get<std::int64_t>();
  prior.clamp_x0 = ckpt.meta.at("clamp_x0").get<bool>();
  prior.clamp_lo = ckpt.meta.at("clamp_lo").get<double>();
  prior.clamp_hi = ckpt.meta.at("clamp_hi").get<double>();
  prior.net = DenoiserNet(cfg, prior.seed);
  for (auto& p : prior.net.params()) {
    const Tensor& stored = ckpt.tensor(p.name);
    check(stored.shape == p.value->shape, "prior checkpoint: tensor shape mismatch for " + p.name);
    *p.value = stored;
  }
  const Tensor& betas = ckpt.tensor("schedule.betas");
  prior.schedule.betas = betas.data;
  prior.schedule.alphas_cumprod.resize(betas.data.size());
  double abar = 1.0;
  for (std::size_t t = 0; t < betas.data.size(); ++t) {
    abar *= 1.0 - betas.data[t];
    prior.schedule.alphas_cumprod[t] = abar;
  }
  prior.schedule.validate();
  return prior;
}

}  // namespace voxstreams::diffusion
