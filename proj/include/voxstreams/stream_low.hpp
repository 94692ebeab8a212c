#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "voxstreams/data.hpp"
#include "voxstreams/losses.hpp"
#include "voxstreams/nn.hpp"
#include "voxstreams/plugins.hpp"
#include "voxstreams/serialize.hpp"
#include "voxstreams/stream_high.hpp"

// Low-level perceptual guidance: early-visual-cortex voxels -> MLP ->
// (16,16,64) -> CNN decoder -> (64,64,4) generator latent, trained with
// Huber plus an image-space feature-distillation auxiliary.
namespace voxstreams::low {

inline constexpr std::int64_t kMlpSide = 16;
inline constexpr std::int64_t kMlpChannels = 64;
inline constexpr std::int64_t kMlpDim = kMlpSide * kMlpSide * kMlpChannels;
inline constexpr std::int64_t kLatentSide = plugins::kLayoutSide;
inline constexpr std::int64_t kLatentChannels = plugins::kLayoutChannels;
inline constexpr const char* kRoi = "early";

inline Tensor compute_target_latent(const Tensor& image, const plugins::LatentCodec& codec) {
  img::require_image(image, "compute_target_latent");
  Tensor l = codec.encode(image);
  check(l.rank() == 3 && l.shape[0] == kLatentSide && l.shape[1] == kLatentSide &&
            l.shape[2] == kLatentChannels,
        "compute_target_latent: codec returned " + l.shape_str() + ", expected (64,64,4)");
  return l;
}

// Mean-squared discrepancy between two feature maps (teacher features of the
// target image vs. teacher features of the decoded prediction).
inline double aux_distill_loss(const Tensor& pred_image_features,
                               const Tensor& teacher_features) {
  return losses::mse(pred_image_features, teacher_features);
}

struct LowModel {
  nn::MlpBackbone mlp;
  nn::CnnDecoder decoder;
  std::uint64_t seed = 0;
  std::int64_t train_steps = 0;
};

// voxels -> (16,16,64) -> (64,64,4); both stage shapes are asserted.
inline Tensor predict_l(const std::vector<float>& early_voxels, LowModel& model) {
  const auto dim = model.mlp.config().input_dim;
  check(static_cast<std::int64_t>(early_voxels.size()) == dim,
        "predict_l: voxel length " + std::to_string(early_voxels.size()) +
            " does not match checkpoint input_dim " + std::to_string(dim));
  Tensor x({1, dim});
  for (std::int64_t i = 0; i < dim; ++i) x[i] = early_voxels[static_cast<std::size_t>(i)];
  const Tensor l_mlp = model.mlp.forward(x).reshaped({kMlpSide, kMlpSide, kMlpChannels});
  const Tensor l_pred = model.decoder.forward(l_mlp);
  check(l_pred.shape[0] == kLatentSide && l_pred.shape[1] == kLatentSide &&
            l_pred.shape[2] == kLatentChannels,
        "predict_l: decoder output " + l_pred.shape_str() + ", expected (64,64,4)");
  return l_pred;
}

struct LowLossWeights {
  double huber = 1.0;
  double aux = 0.1;

  void validate() const {
    check(huber >= 0.0 && aux >= 0.0, "LowLossWeights: gammas must be >= 0");
    check(huber > 0.0 || aux > 0.0, "LowLossWeights: at least one gamma must be positive");
  }
};

// Composite low-level objective for one sample, with its gradient w.r.t. the
// predicted latent. The auxiliary term runs image-space: teacher features of
// decode(l_pred) against teacher features of the target image. The teacher
// is only invoked when gamma_aux > 0.
struct LowLossResult {
  double total = 0.0;
  double huber_term = 0.0;
  double aux_term = 0.0;
  Tensor grad_latent;
};

inline LowLossResult low_loss_with_grad(const Tensor& l_pred, const Tensor& l_gt,
                                        const Tensor& target_image,
                                        const plugins::LatentCodec& codec,
                                        const plugins::FeatureTeacher& teacher,
                                        const LowLossWeights& weights, double huber_delta = 1.0) {
  weights.validate();
  LowLossResult result;
  result.grad_latent = Tensor(l_pred.shape);
  if (weights.huber > 0.0) {
    result.huber_term = losses::huber(l_pred, l_gt, huber_delta);
    add_inplace(result.grad_latent, losses::huber_grad(l_pred, l_gt, huber_delta), weights.huber);
  }
  if (weights.aux > 0.0) {
    const Tensor decoded = codec.decode(l_pred);
    const Tensor pred_features = teacher.features(decoded);
    const Tensor target_features = teacher.features(target_image);
    result.aux_term = aux_distill_loss(pred_features, target_features);
    const Tensor grad_features = losses::mse_grad(pred_features, target_features);
    const Tensor grad_image = teacher.features_vjp(decoded, grad_features);
    add_inplace(result.grad_latent, codec.decode_vjp(l_pred, grad_image), weights.aux);
  }
  result.total = weights.huber * result.huber_term + weights.aux * result.aux_term;
  return result;
}

struct LowTrainConfig {
  std::vector<std::int64_t> hidden_dims = {64};
  double dropout_rate = 0.0;
  nn::MaskingPolicy masking;
  nn::CnnDecoderConfig decoder;
  LowLossWeights weights;
  double huber_delta = 1.0;
  std::int64_t epochs = 12;
  std::int64_t batch_size = 8;
  double lr = 1e-3;
  double lr_decay = 1.0;  // multiplicative, applied after each epoch
};

struct LowTrainResult {
  LowModel model;
  high::TrainTrace trace;  // epoch_loss = composite; val_loss = Huber(l_pred, l_gt)
};

inline LowTrainResult train_low(const data::PreparedDataset& ds,
                                const plugins::LatentCodec& codec,
                                const plugins::FeatureTeacher& teacher, const LowTrainConfig& cfg,
                                std::uint64_t seed) {
  cfg.weights.validate();
  auto train = high::detail::records_with_roi(ds.train_records, kRoi, "train_low");
  const auto input_dim = static_cast<std::int64_t>(train.front()->voxels_by_roi.at(kRoi).size());

  nn::MlpBackboneConfig mlp_cfg;
  mlp_cfg.input_dim = input_dim;
  mlp_cfg.hidden_dims = cfg.hidden_dims;
  mlp_cfg.output_dim = kMlpDim;
  mlp_cfg.dropout_rate = cfg.dropout_rate;
  mlp_cfg.mask_ratio = cfg.masking.mask_ratio;

  LowTrainResult result;
  result.model.mlp = nn::MlpBackbone(mlp_cfg, derive_seed(seed, "low_mlp"));
  result.model.decoder = nn::CnnDecoder(cfg.decoder, derive_seed(seed, "low_decoder"));
  result.model.seed = seed;

  // Start the decoder's output bias at the per-channel mean of the training
  // latents.
  {
    std::vector<double> channel_mean(static_cast<std::size_t>(kLatentChannels), 0.0);
    std::size_t n_values = 0;
    std::set<std::string> seen;
    for (const auto* rec : train) {
      if (!seen.insert(rec->stimulus_id).second) continue;
      const Tensor& l_gt = compute_target_latent(ds.stimuli.at(rec->stimulus_id).image, codec);
      for (std::int64_t y = 0; y < kLatentSide; ++y) {
        for (std::int64_t x = 0; x < kLatentSide; ++x) {
          for (std::int64_t c = 0; c < kLatentChannels; ++c) {
            channel_mean[static_cast<std::size_t>(c)] += l_gt.at3(y, x, c);
          }
        }
      }
      ++n_values;
    }
    for (auto& p : result.model.decoder.params()) {
      if (p.name == "conv_out.b") {
        for (std::int64_t c = 0; c < kLatentChannels; ++c) {
          (*p.value)[c] = channel_mean[static_cast<std::size_t>(c)] /
                          static_cast<double>(n_values * kLatentSide * kLatentSide);
        }
      }
    }
  }

  std::vector<nn::ParamRef> params = result.model.mlp.params();
  for (auto& p : result.model.decoder.params()) params.push_back(p);
  nn::Adam opt(std::move(params), {.lr = cfg.lr});
  Rng order_rng(derive_seed(seed, "low_order"));
  Rng dropout_rng(derive_seed(seed, "low_dropout"));

  std::map<std::string, Tensor> latent_cache;
  auto latent_of = [&](const std::string& stimulus_id) -> const Tensor& {
    auto it = latent_cache.find(stimulus_id);
    if (it == latent_cache.end()) {
      it = latent_cache
               .emplace(stimulus_id,
                        compute_target_latent(ds.stimuli.at(stimulus_id).image, codec))
               .first;
    }
    return it->second;
  };

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

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
      for (std::size_t b = 0; b < batch; ++b) {
        const auto* rec = train[order[start + b]];
        std::vector<double> voxels(rec->voxels_by_roi.at(kRoi).begin(),
                                   rec->voxels_by_roi.at(kRoi).end());
        const auto masked =
            nn::apply_input_mask(voxels, cfg.masking, derive_seed(seed, "low_mask", step_counter));
        for (std::int64_t j = 0; j < input_dim; ++j) {
          x.at2(static_cast<std::int64_t>(b), j) = masked[static_cast<std::size_t>(j)];
        }
        ++step_counter;
      }

      opt.zero_grad();
      const Tensor l_mlp_batch = result.model.mlp.forward(x, &dropout_rng);
      Tensor mlp_grad({b64, kMlpDim});
      double batch_loss = 0.0;
      const double inv_b = 1.0 / static_cast<double>(batch);
      for (std::size_t b = 0; b < batch; ++b) {
        const auto* rec = train[order[start + b]];
        Tensor l_mlp({kMlpSide, kMlpSide, kMlpChannels});
        for (std::int64_t j = 0; j < kMlpDim; ++j) {
          l_mlp[j] = l_mlp_batch.at2(static_cast<std::int64_t>(b), j);
        }
        const Tensor l_pred = result.model.decoder.forward(l_mlp);
        auto loss = low_loss_with_grad(l_pred, latent_of(rec->stimulus_id),
                                       ds.stimuli.at(rec->stimulus_id).image, codec, teacher,
                                       cfg.weights, cfg.huber_delta);
        batch_loss += loss.total;
        scale_inplace(loss.grad_latent, inv_b);
        const Tensor g_mlp = result.model.decoder.backward(loss.grad_latent);
        for (std::int64_t j = 0; j < kMlpDim; ++j) {
          mlp_grad.at2(static_cast<std::int64_t>(b), j) = g_mlp[j];
        }
      }
      result.model.mlp.backward(mlp_grad);
      opt.step();
      ++result.model.train_steps;
      epoch_loss += batch_loss;
      seen += batch;
    }
    result.trace.epoch_loss.push_back(epoch_loss / static_cast<double>(seen));
    opt.set_lr(opt.lr() * cfg.lr_decay);

    if (!ds.test_records.empty()) {
      auto val = high::detail::records_with_roi(ds.test_records, kRoi, "train_low(validation)");
      double vloss = 0.0;
      for (const auto* rec : val) {
        const Tensor pred = predict_l(rec->voxels_by_roi.at(kRoi), result.model);
        vloss += losses::huber(pred, latent_of(rec->stimulus_id), cfg.huber_delta);
      }
      result.trace.val_loss.push_back(vloss / static_cast<double>(val.size()));
    }
  }

  for (auto& p : result.model.mlp.params()) serialize::round_to_f32(*p.value);
  for (auto& p : result.model.decoder.params()) serialize::round_to_f32(*p.value);
  return result;
}

// Best-constant Huber baseline on validation latents (per-coordinate exact
// minimizer via bisection on the monotone subgradient).
inline double constant_baseline_huber(const data::PreparedDataset& ds,
                                      const plugins::LatentCodec& codec,
                                      double huber_delta = 1.0) {
  check(!ds.test_records.empty(), "constant_baseline_huber: no validation records");
  std::vector<Tensor> targets;
  for (const auto& rec : ds.test_records) {
    targets.push_back(compute_target_latent(ds.stimuli.at(rec.stimulus_id).image, codec));
  }
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

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

inline serialize::Checkpoint to_checkpoint(LowModel& model) {
  serialize::Checkpoint ckpt;
  const auto& mlp_cfg = model.mlp.config();
  const auto& dec_cfg = model.decoder.config();
  ckpt.meta = {
      {"kind", "stream_low"},
      {"roi", kRoi},
      {"input_dim", mlp_cfg.input_dim},
      {"hidden_dims", mlp_cfg.hidden_dims},
      {"output_dim", mlp_cfg.output_dim},
      {"dropout_rate", mlp_cfg.dropout_rate},
      {"mask_ratio", mlp_cfg.mask_ratio},
      {"decoder_stage_channels", dec_cfg.stage_channels},
      {"decoder_kernel", dec_cfg.kernel},
      {"seed", model.seed},
      {"step", model.train_steps},
  };
  for (const auto& p : model.mlp.params()) ckpt.tensors.emplace_back("mlp." + p.name, *p.value);
  for (const auto& p : model.decoder.params()) {
    ckpt.tensors.emplace_back("decoder." + p.name, *p.value);
  }
  return ckpt;
}

inline LowModel from_checkpoint(const serialize::Checkpoint& ckpt) {
  check(ckpt.meta.value("kind", "") == "stream_low", "checkpoint is not a stream_low model");
  nn::MlpBackboneConfig mlp_cfg;
  mlp_cfg.input_dim = ckpt.meta.at("input_dim").get<std::int64_t>();
  mlp_cfg.hidden_dims = ckpt.meta.at("hidden_dims").get<std::vector<std::int64_t>>();
  mlp_cfg.output_dim = ckpt.meta.at("output_dim").get<std::int64_t>();
  mlp_cfg.dropout_rate = ckpt.meta.at("dropout_rate").get<double>();
  mlp_cfg.mask_ratio = ckpt.meta.at("mask_ratio").get<double>();
  nn::CnnDecoderConfig dec_cfg;
  dec_cfg.stage_channels = ckpt.meta.at("decoder_stage_channels").get<std::vector<std::int64_t>>();
  dec_cfg.kernel = ckpt.meta.at("decoder_kernel").get<std::int64_t>();
  LowModel model;
  model.seed = ckpt.meta.at("seed").get<std::uint64_t>();
  model.train_steps = ckpt.meta.at("step").get<std::int64_t>();
  model.mlp = nn::MlpBackbone(mlp_cfg, model.seed);
  model.decoder = nn::CnnDecoder(dec_cfg, model.seed);
  for (auto& p : model.mlp.params()) {
    const Tensor& stored = ckpt.tensor("mlp." + p.name);
    check(stored.shape == p.value->shape, "stream_low checkpoint: shape mismatch for " + p.name);
    *p.value = stored;
  }
  for (auto& p : model.decoder.params()) {
    const Tensor& stored = ckpt.tensor("decoder." + p.name);
    check(stored.shape == p.value->shape, "stream_low checkpoint: shape mismatch for " + p.name);
    *p.value = stored;
  }
  return model;
}

}  // namespace voxstreams::low
