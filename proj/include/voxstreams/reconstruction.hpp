#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "voxstreams/data.hpp"
#include "voxstreams/diffusion.hpp"
#include "voxstreams/plugins.hpp"
#include "voxstreams/png.hpp"
#include "voxstreams/serialize.hpp"
#include "voxstreams/stream_high.hpp"
#include "voxstreams/stream_low.hpp"
#include "voxstreams/stream_mid.hpp"

// Composes the guidance levels and drives a pluggable generator via an
// img2img procedure; supports guidance-subset ablations.
namespace voxstreams::recon {

using plugins::GuidanceBundle;

// Layout image from the predicted latent via the codec's decoder.
inline Tensor decode_layout(const Tensor& l_pred, const plugins::LatentCodec& codec) {
  check(l_pred.rank() == 3 && l_pred.shape[0] == plugins::kLayoutSide &&
            l_pred.shape[1] == plugins::kLayoutSide &&
            l_pred.shape[2] == plugins::kLayoutChannels,
        "decode_layout: latent must be (64,64,4), got " + l_pred.shape_str());
  return codec.decode(l_pred);
}

struct GuidanceFlags {
  bool high = true;
  bool mid = true;
  bool low = true;

  std::string name() const {
    if (high && mid && low) return "full";
    std::string n;
    if (low) n += n.empty() ? "low" : "-low";
    if (mid) n += n.empty() ? "mid" : "-mid";
    if (high) n += n.empty() ? "high" : "-high";
    return n.empty() ? "none" : n;
  }
};

// The seven non-empty guidance subsets, full configuration last.
inline std::vector<GuidanceFlags> ablation_flag_sets() {
  return {
      {true, false, false},  // only high
      {false, true, false},  // only mid
      {false, false, true},  // only low
      {true, true, false},   // mid-high
      {true, false, true},   // low-high
      {false, true, true},   // low-mid
      {true, true, true},    // full
  };
}

// Bundle with exactly the requested levels; payloads for disabled levels
// are dropped, enabled levels must have one.
inline GuidanceBundle build_guidance(const std::optional<std::string>& caption,
                                     const std::optional<Tensor>& image_embedding,
                                     const std::optional<Tensor>& layout_image,
                                     const GuidanceFlags& flags) {
  GuidanceBundle bundle;
  bundle.high = flags.high;
  bundle.mid = flags.mid;
  bundle.low = flags.low;
  if (flags.high) bundle.caption = caption;
  if (flags.mid) bundle.image_embedding = image_embedding;
  if (flags.low) bundle.layout_image = layout_image;
  bundle.validate();
  return bundle;
}

// img2img dispatch: with the low level enabled generation starts from the
// layout image at the given strength; otherwise from seeded noise.
inline Tensor reconstruct(const GuidanceBundle& bundle, const plugins::Generator& generator,
                          double strength, int steps, std::uint64_t seed) {
  bundle.validate();
  check(strength >= 0.0 && strength <= 1.0, "reconstruct: strength must lie in [0,1]");
  check(steps >= 0, "reconstruct: steps must be >= 0");
  return generator.generate(bundle, strength, steps, seed);
}

// ---------------------------------------------------------------------------
// Full inference pipeline over a prepared test set.
// ---------------------------------------------------------------------------

struct InferencePlugins {
  const plugins::TextCodec* text_codec = nullptr;
  const plugins::CaptionRefiner* refiner = nullptr;
  const plugins::LatentCodec* latent_codec = nullptr;
  const plugins::Generator* generator = nullptr;
};

struct InferenceConfig {
  GuidanceFlags guidance;
  int n_caption_samples = 15;
  double strength = 0.75;
  int generator_steps = 30;
  int prior_sample_steps = 100;
  std::uint64_t base_seed = 0;
  int workers = 1;  // >1 enables record-parallel inference
};

struct InferenceResult {
  std::string stimulus_id;
  Tensor image;
  std::string caption;  // empty when the high level is disabled
};

namespace detail {

struct ModelSet {
  high::HighModel* high_model = nullptr;
  mid::MidModel* mid_model = nullptr;
  diffusion::PriorModel* prior = nullptr;
  low::LowModel* low_model = nullptr;
};

inline InferenceResult infer_one(const data::FmriRecord& rec, ModelSet models,
                                 const InferencePlugins& plug, const InferenceConfig& cfg) {
  // Determinism is keyed by (base_seed, stimulus_id) so parallel and serial
  // schedules agree.
  const std::uint64_t rec_seed = derive_seed(cfg.base_seed, rec.stimulus_id);
  InferenceResult result;
  result.stimulus_id = rec.stimulus_id;

  std::optional<std::string> caption;
  std::optional<Tensor> embedding;
  std::optional<Tensor> layout;
  if (cfg.guidance.high) {
    const Tensor h = high::predict_h(rec.voxels_by_roi.at(high::kRoi), *models.high_model);
    const auto candidates = high::decode_captions(h, cfg.n_caption_samples, *plug.text_codec,
                                                  derive_seed(rec_seed, "captions"));
    caption = high::refine_to_caption(candidates, *plug.refiner);
    result.caption = *caption;
  }
  if (cfg.guidance.mid) {
    embedding = mid::predict_m(rec.voxels_by_roi.at(mid::kRoi), *models.mid_model, *models.prior,
                               cfg.prior_sample_steps, derive_seed(rec_seed, "prior_sample"));
  }
  if (cfg.guidance.low) {
    const Tensor l = low::predict_l(rec.voxels_by_roi.at(low::kRoi), *models.low_model);
    layout = decode_layout(l, *plug.latent_codec);
  }
  const GuidanceBundle bundle = build_guidance(caption, embedding, layout, cfg.guidance);
  result.image = reconstruct(bundle, *plug.generator, cfg.strength, cfg.generator_steps,
                             derive_seed(rec_seed, "generate"));
  return result;
}

}  // namespace detail

// Runs the three prediction paths plus the generator over every test record;
// results are order-stable (test-record order) regardless of worker count.
inline std::vector<InferenceResult> run_inference(const data::PreparedDataset& ds,
                                                  high::HighModel* high_model,
                                                  mid::MidModel* mid_model,
                                                  diffusion::PriorModel* prior,
                                                  low::LowModel* low_model,
                                                  const InferencePlugins& plug,
                                                  const InferenceConfig& cfg) {
  check(cfg.guidance.high || cfg.guidance.mid || cfg.guidance.low,
        "run_inference: no guidance level enabled");
  check(!ds.test_records.empty(), "run_inference: empty test set");
  if (cfg.guidance.high) {
    check(high_model != nullptr, "run_inference: high level enabled but checkpoint missing");
    check(plug.text_codec && plug.refiner, "run_inference: text codec/refiner plugin missing");
  }
  if (cfg.guidance.mid) {
    check(mid_model != nullptr && prior != nullptr,
          "run_inference: mid level enabled but checkpoint missing");
  }
  if (cfg.guidance.low) {
    check(low_model != nullptr, "run_inference: low level enabled but checkpoint missing");
    check(plug.latent_codec != nullptr, "run_inference: latent codec plugin missing");
  }
  check(plug.generator != nullptr, "run_inference: generator plugin missing");

  const auto& records = ds.test_records;
  std::vector<InferenceResult> results(records.size());
  const int workers =
      std::max(1, std::min<int>(cfg.workers, static_cast<int>(records.size())));

  if (workers == 1) {
    detail::ModelSet models{high_model, mid_model, prior, low_model};
    for (std::size_t i = 0; i < records.size(); ++i) {
      results[i] = detail::infer_one(records[i], models, plug, cfg);
    }
    return results;
  }

  // Record-parallel: each worker runs on private model copies (forward
  // passes cache activations, so models are not shareable across threads).
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      high::HighModel high_copy;
      mid::MidModel mid_copy;
      diffusion::PriorModel prior_copy;
      low::LowModel low_copy;
      detail::ModelSet models;
      if (cfg.guidance.high) {
        high_copy = *high_model;
        models.high_model = &high_copy;
      }
      if (cfg.guidance.mid) {
        mid_copy = *mid_model;
        prior_copy = *prior;
        models.mid_model = &mid_copy;
        models.prior = &prior_copy;
      }
      if (cfg.guidance.low) {
        low_copy = *low_model;
        models.low_model = &low_copy;
      }
      for (std::size_t i = static_cast<std::size_t>(w); i < records.size();
           i += static_cast<std::size_t>(workers)) {
        results[i] = detail::infer_one(records[i], models, plug, cfg);
      }
    });
  }
  for (auto& t : pool) t.join();
  return results;
}

// Writes out/<stimulus_id>.png plus a sidecar caption file per result (the
// sidecar is omitted when captions are disabled).
inline void write_outputs(const std::vector<InferenceResult>& results,
                          const std::filesystem::path& out_dir, bool with_captions) {
  std::filesystem::create_directories(out_dir);
  for (const auto& r : results) {
    png::write_file(out_dir / (r.stimulus_id + ".png"), r.image);
    if (with_captions) {
      serialize::atomic_write(out_dir / (r.stimulus_id + ".caption.txt"), r.caption + "\n");
    }
  }
}

}  // namespace voxstreams::recon
