#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "voxstreams/data.hpp"
#include "voxstreams/diffusion.hpp"
#include "voxstreams/losses.hpp"
#include "voxstreams/nn.hpp"
#include "voxstreams/plugins.hpp"
#include "voxstreams/serialize.hpp"
#include "voxstreams/stream_high.hpp"

// Mid-level visual guidance: nsdgeneral-ROI voxels -> 257x768 image
// embedding, trained jointly with the diffusion prior under the composite
// DDPM + Huber + NCE objective.
namespace voxstreams::mid {

inline constexpr std::int64_t kRows = plugins::kEmbeddingRows;
inline constexpr std::int64_t kCols = plugins::kEmbeddingCols;
inline constexpr std::int64_t kDim = kRows * kCols;
inline constexpr const char* kRoi = "nsdgeneral";

struct MidLossWeights {
  double ddpm = 1.0;
  double huber = 1.0;
  double nce = 0.1;

  void validate() const {
    check(ddpm >= 0.0 && huber >= 0.0 && nce >= 0.0, "MidLossWeights: gammas must be >= 0");
    check(ddpm > 0.0 || huber > 0.0 || nce > 0.0,
          "MidLossWeights: at least one gamma must be positive");
  }
};

// Ground-truth embedding of a stimulus: the encoder interpolates to 512x512
// internally, so any input size is accepted.
inline Tensor compute_target_embedding(const Tensor& image, const plugins::ImageEncoder& encoder) {
  img::require_image(image, "compute_target_embedding");
  Tensor m = encoder.encode(image);
  check(m.rank() == 2 && m.shape[0] == kRows && m.shape[1] == kCols,
        "compute_target_embedding: encoder returned " + m.shape_str() + ", expected (257,768)");
  return m;
}

struct MidModel {
  nn::MlpBackbone mlp;
  std::uint64_t seed = 0;
  std::int64_t train_steps = 0;
};

// MLP estimate of the embedding; flat output reshaped so flat index
// 768*i + j lands at row i, column j.
inline Tensor predict_m_mlp(const std::vector<float>& nsdgeneral_voxels, MidModel& model) {
  const auto dim = model.mlp.config().input_dim;
  check(static_cast<std::int64_t>(nsdgeneral_voxels.size()) == dim,
        "predict_m_mlp: voxel length " + std::to_string(nsdgeneral_voxels.size()) +
            " does not match checkpoint input_dim " + std::to_string(dim));
  Tensor x({1, dim});
  for (std::int64_t i = 0; i < dim; ++i) x[i] = nsdgeneral_voxels[static_cast<std::size_t>(i)];
  return model.mlp.forward(x).reshaped({kRows, kCols});
}

// Composite mid-level objective over batches of flattened embeddings
// (each argument is (B, 197376)). Decomposes exactly into the gamma-weighted
// sum of the three terms.
inline double mid_loss(const Tensor& x0_hat, const Tensor& m_mlp, const Tensor& m_gt,
                       const MidLossWeights& weights, double temperature = 0.05,
                       double huber_delta = 1.0) {
  weights.validate();
  require_same_shape(m_mlp, m_gt, "mid_loss");
  double total = 0.0;
  if (weights.ddpm > 0.0) {
    require_same_shape(x0_hat, m_gt, "mid_loss(ddpm)");
    total += weights.ddpm * diffusion::ddpm_loss(x0_hat, m_gt);
  }
  if (weights.huber > 0.0) total += weights.huber * losses::huber(m_mlp, m_gt, huber_delta);
  if (weights.nce > 0.0) total += weights.nce * losses::info_nce(m_mlp, m_gt, temperature);
  return total;
}

struct MidTrainConfig {
  std::vector<std::int64_t> hidden_dims = {32};
  double dropout_rate = 0.0;
  nn::MaskingPolicy masking;
  std::vector<std::int64_t> denoiser_hidden = {32};
  std::int64_t time_embed_dim = 32;
  int schedule_steps = 100;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  MidLossWeights weights;
  double temperature = 0.05;
  double huber_delta = 1.0;
  std::int64_t epochs = 8;
  std::int64_t batch_size = 4;
  double lr = 1e-3;
  double prior_lr = 0.0;  // 0 = same as lr
  double lr_decay = 1.0;  // multiplicative, applied after each epoch
};

struct MidTrainResult {
  MidModel model;
  diffusion::PriorModel prior;
  high::TrainTrace trace;  // epoch_loss = composite; val_loss = Huber(m_mlp, m_gt)
};

inline MidTrainResult train_mid(const data::PreparedDataset& ds,
                                const plugins::ImageEncoder& encoder, const MidTrainConfig& cfg,
                                std::uint64_t seed) {
  cfg.weights.validate();
  auto train = high::detail::records_with_roi(ds.train_records, kRoi, "train_mid");
  const auto input_dim = static_cast<std::int64_t>(train.front()->voxels_by_roi.at(kRoi).size());

  nn::MlpBackboneConfig mlp_cfg;
  mlp_cfg.input_dim = input_dim;
  mlp_cfg.hidden_dims = cfg.hidden_dims;
  mlp_cfg.output_dim = kDim;
  mlp_cfg.dropout_rate = cfg.dropout_rate;
  mlp_cfg.mask_ratio = cfg.masking.mask_ratio;

  MidTrainResult result;
  result.model.mlp = nn::MlpBackbone(mlp_cfg, derive_seed(seed, "mid_mlp"));
  result.model.seed = seed;

  diffusion::DenoiserConfig den_cfg;
  den_cfg.dim = kDim;
  den_cfg.cond_dim = kDim;
  den_cfg.hidden_dims = cfg.denoiser_hidden;
  den_cfg.time_embed_dim = cfg.time_embed_dim;
  result.prior.net = diffusion::DenoiserNet(den_cfg, derive_seed(seed, "mid_prior"));
  result.prior.schedule = diffusion::NoiseSchedule::linear(cfg.schedule_steps, cfg.beta_start,
                                                           cfg.beta_end);
  result.prior.seed = seed;

  // Target embeddings cached once per stimulus (float32, they are large).
  std::map<std::string, std::vector<float>> target_cache;
  auto target_of = [&](const std::string& stimulus_id) -> const std::vector<float>& {
    auto it = target_cache.find(stimulus_id);
    if (it == target_cache.end()) {
      const Tensor m = compute_target_embedding(ds.stimuli.at(stimulus_id).image, encoder);
      std::vector<float> flat(m.data.begin(), m.data.end());
      it = target_cache.emplace(stimulus_id, std::move(flat)).first;
    }
    return it->second;
  };

  // Start the output layer at the best constant predictor: zero weights,
  // bias at the mean training target.
  {
    std::set<std::string> seen;
    std::size_t n_unique = 0;
    for (const auto* rec : train) {
      if (seen.insert(rec->stimulus_id).second) ++n_unique;
    }
    Tensor& bias = result.model.mlp.output_layer().bias();
    for (const auto& id : seen) {
      const auto& target = target_of(id);
      for (std::int64_t j = 0; j < kDim; ++j) {
        bias[j] += target[static_cast<std::size_t>(j)] / static_cast<double>(n_unique);
      }
    }
    for (auto& w : result.model.mlp.output_layer().weight().data) w = 0.0;
  }

  nn::Adam mlp_opt(result.model.mlp.params(), {.lr = cfg.lr});
  nn::Adam prior_opt(result.prior.net.params(),
                     {.lr = cfg.prior_lr > 0.0 ? cfg.prior_lr : cfg.lr});
  Rng order_rng(derive_seed(seed, "mid_order"));
  Rng dropout_rng(derive_seed(seed, "mid_dropout"));
  Rng diffusion_rng(derive_seed(seed, "mid_diffusion"));

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  const int T = result.prior.schedule.step_count();
  std::uint64_t step_counter = 0;
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const auto batch =
          std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), order.size() - start);
      const auto b64 = static_cast<std::int64_t>(batch);
      Tensor x({b64, input_dim});
      Tensor m_gt({b64, kDim});
      for (std::size_t b = 0; b < batch; ++b) {
        const auto* rec = train[order[start + b]];
        std::vector<double> voxels(rec->voxels_by_roi.at(kRoi).begin(),
                                   rec->voxels_by_roi.at(kRoi).end());
        const auto masked =
            nn::apply_input_mask(voxels, cfg.masking, derive_seed(seed, "mid_mask", step_counter));
        for (std::int64_t j = 0; j < input_dim; ++j) {
          x.at2(static_cast<std::int64_t>(b), j) = masked[static_cast<std::size_t>(j)];
        }
        const auto& target = target_of(rec->stimulus_id);
        for (std::int64_t j = 0; j < kDim; ++j) {
          m_gt.at2(static_cast<std::int64_t>(b), j) = target[static_cast<std::size_t>(j)];
        }
        ++step_counter;
      }

      mlp_opt.zero_grad();
      prior_opt.zero_grad();
      const Tensor m_mlp = result.model.mlp.forward(x, &dropout_rng);

      double loss = 0.0;
      Tensor mlp_grad({b64, kDim});

      if (cfg.weights.ddpm > 0.0) {
        // The condition is the detached MLP output: the DDPM term trains
        // only the prior; Huber and NCE train only the MLP.
        std::vector<int> t(batch);
        Tensor x_t({b64, kDim});
        for (std::size_t b = 0; b < batch; ++b) {
          t[b] = static_cast<int>(diffusion_rng.uniform_int(static_cast<std::uint64_t>(T)));
          const double abar = result.prior.schedule.alphas_cumprod[static_cast<std::size_t>(t[b])];
          const double signal = std::sqrt(abar), noise = std::sqrt(1.0 - abar);
          for (std::int64_t j = 0; j < kDim; ++j) {
            x_t.at2(static_cast<std::int64_t>(b), j) =
                signal * m_gt.at2(static_cast<std::int64_t>(b), j) +
                noise * diffusion_rng.normal();
          }
        }
        const Tensor x0_hat = result.prior.net.forward(x_t, t, m_mlp);
        loss += cfg.weights.ddpm * diffusion::ddpm_loss(x0_hat, m_gt);
        Tensor g = diffusion::ddpm_loss_grad(x0_hat, m_gt);
        scale_inplace(g, cfg.weights.ddpm);
        result.prior.net.backward(g);
      }
      if (cfg.weights.huber > 0.0) {
        loss += cfg.weights.huber * losses::huber(m_mlp, m_gt, cfg.huber_delta);
        add_inplace(mlp_grad, losses::huber_grad(m_mlp, m_gt, cfg.huber_delta), cfg.weights.huber);
      }
      if (cfg.weights.nce > 0.0) {
        const auto nce = losses::info_nce_with_grad(m_mlp, m_gt, cfg.temperature);
        loss += cfg.weights.nce * nce.value;
        add_inplace(mlp_grad, nce.grad_pred, cfg.weights.nce);
      }
      result.model.mlp.backward(mlp_grad);
      mlp_opt.step();
      prior_opt.step();
      ++result.model.train_steps;
      ++result.prior.train_steps;
      epoch_loss += loss * static_cast<double>(batch);
      seen += batch;
    }
    result.trace.epoch_loss.push_back(epoch_loss / static_cast<double>(seen));
    mlp_opt.set_lr(mlp_opt.lr() * cfg.lr_decay);
    prior_opt.set_lr(prior_opt.lr() * cfg.lr_decay);

    if (!ds.test_records.empty()) {
      auto val = high::detail::records_with_roi(ds.test_records, kRoi, "train_mid(validation)");
      double vloss = 0.0;
      for (const auto* rec : val) {
        Tensor pred = predict_m_mlp(rec->voxels_by_roi.at(kRoi), result.model);
        Tensor target({kRows, kCols});
        const auto& flat = target_of(rec->stimulus_id);
        for (std::int64_t j = 0; j < kDim; ++j) target[j] = flat[static_cast<std::size_t>(j)];
        vloss += losses::huber(pred, target, cfg.huber_delta);
      }
      result.trace.val_loss.push_back(vloss / static_cast<double>(val.size()));
    }
  }

  for (auto& p : result.model.mlp.params()) serialize::round_to_f32(*p.value);
  for (auto& p : result.prior.net.params()) serialize::round_to_f32(*p.value);
  return result;
}

// Best-constant-predictor Huber baseline on the validation targets.
inline double constant_baseline_huber(const data::PreparedDataset& ds,
                                      const plugins::ImageEncoder& encoder,
                                      double huber_delta = 1.0) {
  check(!ds.test_records.empty(), "constant_baseline_huber: no validation records");
  std::vector<Tensor> targets;
  for (const auto& rec : ds.test_records) {
    targets.push_back(compute_target_embedding(ds.stimuli.at(rec.stimulus_id).image, encoder));
  }
  // The per-coordinate optimum of a mean Huber loss solves a monotone
  // 1-d condition; bisection on the subgradient finds it exactly.
  Tensor best(targets.front().shape);
  for (std::int64_t j = 0; j < best.numel(); ++j) {
    double lo = 1e300, hi = -1e300;
    for (const auto& t : targets) {
      lo = std::min(lo, t[j]);
      hi = std::max(hi, t[j]);
    }
    for (int iter = 0; iter < 60 && hi - lo > 1e-12; ++iter) {
      const double mid = 0.5 * (lo + hi);
      double slope = 0.0;
      for (const auto& t : targets) {
        const double e = mid - t[j];
        slope += std::abs(e) <= huber_delta ? e : huber_delta * (e > 0 ? 1.0 : -1.0);
      }
      (slope > 0.0 ? hi : lo) = mid;
    }
    best[j] = 0.5 * (lo + hi);
  }
  double acc = 0.0;
  for (const auto& t : targets) acc += losses::huber(best, t, huber_delta);
  return acc / static_cast<double>(targets.size());
}

// Full mid-level prediction: MLP estimate refined by the conditional prior
// sampler. steps == 0 bypasses the prior and returns the MLP output.
inline Tensor predict_m(const std::vector<float>& nsdgeneral_voxels, MidModel& model,
                        diffusion::PriorModel& prior, int steps, std::uint64_t seed) {
  const Tensor m_mlp = predict_m_mlp(nsdgeneral_voxels, model);
  const Tensor refined = diffusion::sample(prior, m_mlp.reshaped({kDim}), steps, seed);
  return refined.reshaped({kRows, kCols});
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

inline serialize::Checkpoint to_checkpoint(MidModel& model) {
  serialize::Checkpoint ckpt;
  const auto& cfg = model.mlp.config();
  ckpt.meta = {
      {"kind", "stream_mid"},
      {"roi", kRoi},
      {"input_dim", cfg.input_dim},
      {"hidden_dims", cfg.hidden_dims},
      {"output_dim", cfg.output_dim},
      {"dropout_rate", cfg.dropout_rate},
      {"mask_ratio", cfg.mask_ratio},
      {"seed", model.seed},
      {"step", model.train_steps},
  };
  for (const auto& p : model.mlp.params()) ckpt.tensors.emplace_back(p.name, *p.value);
  return ckpt;
}

inline MidModel from_checkpoint(const serialize::Checkpoint& ckpt) {
  check(ckpt.meta.value("kind", "") == "stream_mid", "checkpoint is not a stream_mid model");
  nn::MlpBackboneConfig cfg;
  cfg.input_dim = ckpt.meta.at("input_dim").get<std::int64_t>();
  cfg.hidden_dims = ckpt.meta.at("hidden_dims").get<std::vector<std::int64_t>>();
  cfg.output_dim = ckpt.meta.at("output_dim").get<std::int64_t>();
  cfg.dropout_rate = ckpt.meta.at("dropout_rate").get<double>();
  cfg.mask_ratio = ckpt.meta.at("mask_ratio").get<double>();
  MidModel model;
  model.seed = ckpt.meta.at("seed").get<std::uint64_t>();
  model.train_steps = ckpt.meta.at("step").get<std::int64_t>();
  model.mlp = nn::MlpBackbone(cfg, model.seed);
  for (auto& p : model.mlp.params()) {
    const Tensor& stored = ckpt.tensor(p.name);
    check(stored.shape == p.value->shape, "stream_mid checkpoint: shape mismatch for " + p.name);
    *p.value = stored;
  }
  return model;
}

}  // namespace voxstreams::mid
