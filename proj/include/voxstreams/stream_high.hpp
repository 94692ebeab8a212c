#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "voxstreams/data.hpp"
#include "voxstreams/losses.hpp"
#include "voxstreams/nn.hpp"
#include "voxstreams/plugins.hpp"
#include "voxstreams/serialize.hpp"

// High-level textual guidance: ventral-ROI voxels -> 768-d text latent,
// decoded at inference into several candidate captions refined to one.
namespace voxstreams::high {

inline constexpr std::int64_t kLatentDim = plugins::kTextLatentDim;
inline constexpr const char* kRoi = "ventral";

// Uniform pick out of the stimulus's five captions, deterministic per seed.
inline std::string select_training_caption(const std::vector<std::string>& captions,
                                           std::uint64_t rng_seed) {
  check(captions.size() == 5, "select_training_caption: exactly 5 captions required, got " +
                                  std::to_string(captions.size()));
  Rng rng(rng_seed);
  return captions[rng.uniform_int(5)];
}

struct HighTrainConfig {
  std::vector<std::int64_t> hidden_dims = {64};
  double dropout_rate = 0.1;
  nn::MaskingPolicy masking;  // fresh mask per training step
  std::int64_t epochs = 20;
  std::int64_t batch_size = 8;
  double lr = 1e-3;
  double lr_decay = 1.0;  // multiplicative, applied after each epoch
};

struct HighModel {
  nn::MlpBackbone mlp;
  std::uint64_t seed = 0;
  std::int64_t train_steps = 0;
};

struct TrainTrace {
  std::vector<double> epoch_loss;
  std::vector<double> val_loss;
};

struct HighTrainResult {
  HighModel model;
  TrainTrace trace;
};

// Length-768 text latent for one voxel vector. Inference never masks.
inline Tensor predict_h(const std::vector<float>& ventral_voxels, HighModel& model) {
  const auto dim = model.mlp.config().input_dim;
  check(static_cast<std::int64_t>(ventral_voxels.size()) == dim,
        "predict_h: voxel length " + std::to_string(ventral_voxels.size()) +
            " does not match checkpoint input_dim " + std::to_string(dim));
  Tensor x({1, dim});
  for (std::int64_t i = 0; i < dim; ++i) x[i] = ventral_voxels[static_cast<std::size_t>(i)];
  Tensor h = model.mlp.forward(x).reshaped({kLatentDim});
  check(h.all_finite(), "predict_h: non-finite output");
  return h;
}

namespace detail {

inline Tensor mean_caption_latent(const plugins::TextCodec& codec,
                                  const std::vector<std::string>& captions) {
  Tensor h({kLatentDim});
  for (const auto& caption : captions) {
    add_inplace(h, codec.encode(caption), 1.0 / static_cast<double>(captions.size()));
  }
  return h;
}

inline Tensor voxel_matrix(const std::vector<const data::FmriRecord*>& records,
                           const std::string& roi) {
  const auto dim = static_cast<std::int64_t>(records.front()->voxels_by_roi.at(roi).size());
  Tensor x({static_cast<std::int64_t>(records.size()), dim});
  for (std::size_t r = 0; r < records.size(); ++r) {
    const auto& v = records[r]->voxels_by_roi.at(roi);
    check(static_cast<std::int64_t>(v.size()) == dim,
          "voxel_matrix: inconsistent voxel length for roi " + roi);
    for (std::int64_t j = 0; j < dim; ++j) {
      x.at2(static_cast<std::int64_t>(r), j) = v[static_cast<std::size_t>(j)];
    }
  }
  return x;
}

inline std::vector<const data::FmriRecord*> records_with_roi(
    const std::vector<data::FmriRecord>& records, const std::string& roi, const char* who) {
  check(!records.empty(), std::string(who) + ": empty dataset");
  std::vector<const data::FmriRecord*> out;
  out.reserve(records.size());
  for (const auto& rec : records) {
    check(rec.voxels_by_roi.count(roi) == 1,
          std::string(who) + ": record for stimulus '" + rec.stimulus_id + "' is missing roi '" +
              roi + "'");
    out.push_back(&rec);
  }
  return out;
}

// Mean loss of the best constant predictor (the target mean) on a target set.
inline double constant_baseline_mse(const std::vector<Tensor>& targets) {
  check(!targets.empty(), "constant_baseline_mse: empty targets");
  Tensor mean(targets.front().shape);
  for (const auto& t : targets) add_inplace(mean, t, 1.0 / static_cast<double>(targets.size()));
  double acc = 0.0;
  for (const auto& t : targets) acc += losses::mse(mean, t);
  return acc / static_cast<double>(targets.size());
}

}  // namespace detail

inline HighTrainResult train_high(const data::PreparedDataset& ds,
                                  const plugins::TextCodec& codec, const HighTrainConfig& cfg,
                                  std::uint64_t seed) {
  auto train = detail::records_with_roi(ds.train_records, kRoi, "train_high");
  const auto input_dim = static_cast<std::int64_t>(train.front()->voxels_by_roi.at(kRoi).size());

  nn::MlpBackboneConfig mlp_cfg;
  mlp_cfg.input_dim = input_dim;
  mlp_cfg.hidden_dims = cfg.hidden_dims;
  mlp_cfg.output_dim = kLatentDim;
  mlp_cfg.dropout_rate = cfg.dropout_rate;
  mlp_cfg.mask_ratio = cfg.masking.mask_ratio;

  HighTrainResult result;
  result.model.mlp = nn::MlpBackbone(mlp_cfg, derive_seed(seed, "high_mlp"));
  result.model.seed = seed;

  // Start the output layer at the best constant predictor: zero weights,
  // bias at the mean training target. Optimization then only has to grow
  // deviations that actually reduce the loss.
  {
    Tensor mean({kLatentDim});
    for (const auto* rec : train) {
      add_inplace(mean, detail::mean_caption_latent(codec, ds.stimuli.at(rec->stimulus_id).captions),
                  1.0 / static_cast<double>(train.size()));
    }
    result.model.mlp.output_layer().bias() = mean;
    for (auto& w : result.model.mlp.output_layer().weight().data) w = 0.0;
  }

  nn::Adam opt(result.model.mlp.params(), {.lr = cfg.lr});
  Rng order_rng(derive_seed(seed, "high_order"));
  Rng dropout_rng(derive_seed(seed, "high_dropout"));

  // Validation targets are the deterministic mean over the five captions.
  std::vector<const data::FmriRecord*> val;
  std::vector<Tensor> val_targets;
  if (!ds.test_records.empty()) {
    val = detail::records_with_roi(ds.test_records, kRoi, "train_high(validation)");
    for (const auto* rec : val) {
      val_targets.push_back(
          detail::mean_caption_latent(codec, ds.stimuli.at(rec->stimulus_id).captions));
    }
  }

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::uint64_t step_counter = 0;
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t batch =
          std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), order.size() - start);
      Tensor x({static_cast<std::int64_t>(batch), input_dim});
      Tensor target({static_cast<std::int64_t>(batch), kLatentDim});
      for (std::size_t b = 0; b < batch; ++b) {
        const auto* rec = train[order[start + b]];
        const auto& stim = ds.stimuli.at(rec->stimulus_id);
        // Fresh caption selection and fresh input mask on every step.
        const std::string caption = select_training_caption(
            stim.captions, derive_seed(seed, "high_caption", step_counter));
        const Tensor h_gt = codec.encode(caption);
        std::vector<double> voxels(rec->voxels_by_roi.at(kRoi).begin(),
                                   rec->voxels_by_roi.at(kRoi).end());
        const auto masked =
            nn::apply_input_mask(voxels, cfg.masking, derive_seed(seed, "high_mask", step_counter));
        for (std::int64_t j = 0; j < input_dim; ++j) {
          x.at2(static_cast<std::int64_t>(b), j) = masked[static_cast<std::size_t>(j)];
        }
        for (std::int64_t j = 0; j < kLatentDim; ++j) {
          target.at2(static_cast<std::int64_t>(b), j) = h_gt[j];
        }
        ++step_counter;
      }
      opt.zero_grad();
      const Tensor pred = result.model.mlp.forward(x, &dropout_rng);
      epoch_loss += losses::mse(pred, target) * static_cast<double>(batch);
      seen += batch;
      result.model.mlp.backward(losses::mse_grad(pred, target));
      opt.step();
      ++result.model.train_steps;
    }
    result.trace.epoch_loss.push_back(epoch_loss / static_cast<double>(seen));
    opt.set_lr(opt.lr() * cfg.lr_decay);
    if (!val.empty()) {
      const Tensor vx = detail::voxel_matrix(val, kRoi);
      const Tensor vp = result.model.mlp.forward(vx);
      double vloss = 0.0;
      for (std::size_t r = 0; r < val.size(); ++r) {
        Tensor row({kLatentDim});
        for (std::int64_t j = 0; j < kLatentDim; ++j) row[j] = vp.at2(static_cast<std::int64_t>(r), j);
        vloss += losses::mse(row, val_targets[r]);
      }
      result.trace.val_loss.push_back(vloss / static_cast<double>(val.size()));
    }
  }

  for (auto& p : result.model.mlp.params()) serialize::round_to_f32(*p.value);
  return result;
}

// Validation MSE of the best constant predictor, for learnability gates.
inline double constant_baseline_mse(const data::PreparedDataset& ds,
                                    const plugins::TextCodec& codec) {
  std::vector<Tensor> targets;
  for (const auto& rec : ds.test_records) {
    targets.push_back(detail::mean_caption_latent(codec, ds.stimuli.at(rec.stimulus_id).captions));
  }
  return detail::constant_baseline_mse(targets);
}

// n_samples stochastic decodes of one latent; sample k uses seed base+k.
inline std::vector<std::string> decode_captions(const Tensor& h, int n_samples,
                                                const plugins::TextCodec& codec,
                                                std::uint64_t base_seed) {
  check(n_samples >= 1, "decode_captions: n_samples must be >= 1");
  std::vector<std::string> out;
  out.reserve(static_cast<std::size_t>(n_samples));
  for (int k = 0; k < n_samples; ++k) {
    out.push_back(codec.decode(h, base_seed + static_cast<std::uint64_t>(k)));
  }
  return out;
}

inline std::string refine_to_caption(const std::vector<std::string>& candidates,
                                     const plugins::CaptionRefiner& refiner) {
  check(!candidates.empty(), "refine_to_caption: empty candidate list");
  const std::string refined = refiner.refine(candidates);
  check(!refined.empty(), "refine_to_caption: refiner produced an empty caption");
  return refined;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

inline serialize::Checkpoint to_checkpoint(HighModel& model) {
  serialize::Checkpoint ckpt;
  const auto& cfg = model.mlp.config();
  ckpt.meta = {
      {"kind", "stream_high"},
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

inline HighModel from_checkpoint(const serialize::Checkpoint& ckpt) {
  check(ckpt.meta.value("kind", "") == "stream_high", "checkpoint is not a stream_high model");
  nn::MlpBackboneConfig cfg;
  cfg.input_dim = ckpt.meta.at("input_dim").get<std::int64_t>();
  cfg.hidden_dims = ckpt.meta.at("hidden_dims").get<std::vector<std::int64_t>>();
  cfg.output_dim = ckpt.meta.at("output_dim").get<std::int64_t>();
  cfg.dropout_rate = ckpt.meta.at("dropout_rate").get<double>();
  cfg.mask_ratio = ckpt.meta.at("mask_ratio").get<double>();
  HighModel model;
  model.seed = ckpt.meta.at("seed").get<std::uint64_t>();
  model.train_steps = ckpt.meta.at("step").get<std::int64_t>();
  model.mlp = nn::MlpBackbone(cfg, model.seed);
  for (auto& p : model.mlp.params()) {
    const Tensor& stored = ckpt.tensor(p.name);
    check(stored.shape == p.value->shape, "stream_high checkpoint: shape mismatch for " + p.name);
    *p.value = stored;
  }
  return model;
}

}  // namespace voxstreams::high
