#pragma once

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxstreams/data.hpp"
#include "voxstreams/metrics.hpp"
#include "voxstreams/reconstruction.hpp"
#include "voxstreams/serialize.hpp"
#include "voxstreams/stream_high.hpp"
#include "voxstreams/stream_low.hpp"
#include "voxstreams/stream_mid.hpp"

// Configuration, seeding, checkpoint lifecycle and experiment orchestration.
// The config file is strict JSON: unknown keys are rejected, defaults are
// filled in, and the effective (normalized) config serializes byte-stably.
namespace voxstreams::harness {

using nlohmann::json;

namespace detail {

inline void check_keys(const json& obj, const std::string& path,
                       const std::set<std::string>& allowed) {
  check(obj.is_object(), "config: expected an object at '" + path + "'");
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    if (!allowed.count(key)) {
      throw ValidationError("config: unknown key '" + path + key + "'");
    }
  }
}

template <typename T>
T get_or(const json& obj, const std::string& key, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError("config: bad value for '" + key + "': " + e.what());
  }
}

inline std::string iso_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm_utc{};
  gmtime_r(&t, &tm_utc);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  std::uint64_t seed = 7;
  std::optional<std::string> manifest_path;
  std::optional<data::SynthConfig> synth;

  high::HighTrainConfig high;
  mid::MidTrainConfig mid;
  low::LowTrainConfig low;

  recon::InferenceConfig inference;
  metrics::EvaluateOptions evaluate;
  std::vector<std::string> twoway_extractors = {"alex2", "alex5", "incep", "clip"};
  std::vector<std::string> distance_extractors = {"eff", "swav"};

  // Plugin selection per interface. Only the in-tree "reference" stubs ship
  // with the library; other names are looked up on VOXSTREAMS_PLUGIN_PATH,
  // where out-of-tree adapters would live.
  std::map<std::string, std::string> plugin_selection = {
      {"text_codec", "reference"},   {"refiner", "reference"},
      {"image_encoder", "reference"}, {"latent_codec", "reference"},
      {"teacher", "reference"},      {"generator", "reference"}};
  std::string output_dir = "out";

  // Normalized (defaults-filled) form; dump() of this is byte-stable.
  json to_json() const {
    json j;
    j["seed"] = seed;
    json dataset = json::object();
    if (manifest_path) dataset["manifest"] = *manifest_path;
    if (synth) {
      dataset["synth"] = {{"train_stimuli", synth->n_train_stimuli},
                          {"test_stimuli", synth->n_test_stimuli},
                          {"repeats", synth->test_repeats},
                          {"sessions", synth->n_sessions},
                          {"image_size", synth->image_size},
                          {"noise_scale", synth->noise_scale},
                          {"signal_scale", synth->signal_scale},
                          {"pooled_dim", synth->pooled_dim},
                          {"subject", synth->subject_id},
                          {"voxels",
                           {{"ventral", synth->voxels_per_roi.at("ventral")},
                            {"early", synth->voxels_per_roi.at("early")},
                            {"nsdgeneral", synth->voxels_per_roi.at("nsdgeneral")}}}};
    }
    j["dataset"] = dataset;
    j["streams"] = {
        {"high",
         {{"hidden_dims", high.hidden_dims},
          {"dropout", high.dropout_rate},
          {"lr_decay", high.lr_decay},
          {"mask_ratio", high.masking.mask_ratio},
          {"mask_value", high.masking.mask_value},
          {"epochs", high.epochs},
          {"batch_size", high.batch_size},
          {"lr", high.lr}}},
        {"mid",
         {{"hidden_dims", mid.hidden_dims},
          {"dropout", mid.dropout_rate},
          {"lr_decay", mid.lr_decay},
          {"mask_ratio", mid.masking.mask_ratio},
          {"mask_value", mid.masking.mask_value},
          {"epochs", mid.epochs},
          {"batch_size", mid.batch_size},
          {"lr", mid.lr},
          {"loss_weights",
           {{"ddpm", mid.weights.ddpm}, {"huber", mid.weights.huber}, {"nce", mid.weights.nce}}},
          {"temperature", mid.temperature},
          {"huber_delta", mid.huber_delta},
          {"prior",
           {{"steps", mid.schedule_steps},
            {"beta_start", mid.beta_start},
            {"beta_end", mid.beta_end},
            {"hidden_dims", mid.denoiser_hidden},
            {"time_embed_dim", mid.time_embed_dim},
            {"lr", mid.prior_lr}}}}},
        {"low",
         {{"hidden_dims", low.hidden_dims},
          {"dropout", low.dropout_rate},
          {"lr_decay", low.lr_decay},
          {"mask_ratio", low.masking.mask_ratio},
          {"mask_value", low.masking.mask_value},
          {"epochs", low.epochs},
          {"batch_size", low.batch_size},
          {"lr", low.lr},
          {"loss_weights", {{"huber", low.weights.huber}, {"aux", low.weights.aux}}},
          {"huber_delta", low.huber_delta},
          {"decoder_channels", low.decoder.stage_channels},
          {"decoder_kernel", low.decoder.kernel}}},
    };
    j["inference"] = {{"guidance",
                       {{"high", inference.guidance.high},
                        {"mid", inference.guidance.mid},
                        {"low", inference.guidance.low}}},
                      {"caption_samples", inference.n_caption_samples},
                      {"strength", inference.strength},
                      {"generator_steps", inference.generator_steps},
                      {"prior_sample_steps", inference.prior_sample_steps},
                      {"workers", inference.workers}};
    j["evaluate"] = {{"resolution", evaluate.eval_resolution},
                     {"distance", metrics::to_string(evaluate.distance)},
                     {"twoway_extractors", twoway_extractors},
                     {"distance_extractors", distance_extractors}};
    j["plugins"] = plugin_selection;
    j["output_dir"] = output_dir;
    return j;
  }

  void validate() const {
    check(high.epochs >= 1 && mid.epochs >= 1 && low.epochs >= 1, "config: epochs must be >= 1");
    check(high.batch_size >= 1 && mid.batch_size >= 1 && low.batch_size >= 1,
          "config: batch_size must be >= 1");
    high.masking.validate();
    mid.masking.validate();
    low.masking.validate();
    mid.weights.validate();
    low.weights.validate();
    low.decoder.validate();
    check(mid.schedule_steps >= 1, "config: prior steps must be >= 1");
    check(mid.temperature > 0.0, "config: temperature must be positive");
    check(mid.huber_delta > 0.0 && low.huber_delta > 0.0, "config: huber_delta must be positive");
    check(inference.n_caption_samples >= 1, "config: caption_samples must be >= 1");
    check(inference.strength >= 0.0 && inference.strength <= 1.0,
          "config: strength must lie in [0,1]");
    check(inference.prior_sample_steps >= 0 && inference.prior_sample_steps <= mid.schedule_steps,
          "config: prior_sample_steps must lie in [0, prior steps]");
    check(inference.workers >= 1, "config: workers must be >= 1");
    check(evaluate.eval_resolution >= 16, "config: evaluate resolution must be >= 16");
    if (synth) synth->validate();
  }
};

inline ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig cfg;
  detail::check_keys(j, "",
                     {"seed", "dataset", "streams", "inference", "evaluate", "plugins",
                      "output_dir"});
  cfg.seed = detail::get_or<std::uint64_t>(j, "seed", cfg.seed);

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    detail::check_keys(d, "dataset.", {"manifest", "synth"});
    if (d.contains("manifest")) cfg.manifest_path = d.at("manifest").get<std::string>();
    if (d.contains("synth")) {
      const auto& s = d.at("synth");
      detail::check_keys(s, "dataset.synth.",
                         {"train_stimuli", "test_stimuli", "repeats", "sessions", "image_size",
                          "noise_scale", "signal_scale", "pooled_dim", "subject", "voxels"});
      data::SynthConfig sc;
      sc.n_train_stimuli = detail::get_or<std::int64_t>(s, "train_stimuli", sc.n_train_stimuli);
      sc.n_test_stimuli = detail::get_or<std::int64_t>(s, "test_stimuli", sc.n_test_stimuli);
      sc.test_repeats = detail::get_or<std::int64_t>(s, "repeats", sc.test_repeats);
      sc.n_sessions = detail::get_or<std::int64_t>(s, "sessions", sc.n_sessions);
      sc.image_size = detail::get_or<std::int64_t>(s, "image_size", sc.image_size);
      sc.noise_scale = detail::get_or<double>(s, "noise_scale", sc.noise_scale);
      sc.signal_scale = detail::get_or<double>(s, "signal_scale", sc.signal_scale);
      sc.pooled_dim = detail::get_or<std::int64_t>(s, "pooled_dim", sc.pooled_dim);
      sc.subject_id = detail::get_or<std::string>(s, "subject", sc.subject_id);
      if (s.contains("voxels")) {
        const auto& v = s.at("voxels");
        detail::check_keys(v, "dataset.synth.voxels.", {"ventral", "early", "nsdgeneral"});
        for (const auto& roi : data::known_rois()) {
          sc.voxels_per_roi[roi] =
              detail::get_or<std::int64_t>(v, roi, sc.voxels_per_roi.at(roi));
        }
      }
      cfg.synth = sc;
    }
  }

  if (j.contains("streams")) {
    const auto& s = j.at("streams");
    detail::check_keys(s, "streams.", {"high", "mid", "low"});
    if (s.contains("high")) {
      const auto& h = s.at("high");
      detail::check_keys(h, "streams.high.",
                         {"hidden_dims", "dropout", "mask_ratio", "mask_value", "epochs",
                          "batch_size", "lr", "lr_decay"});
      cfg.high.hidden_dims =
          detail::get_or<std::vector<std::int64_t>>(h, "hidden_dims", cfg.high.hidden_dims);
      cfg.high.dropout_rate = detail::get_or<double>(h, "dropout", cfg.high.dropout_rate);
      cfg.high.masking.mask_ratio =
          detail::get_or<double>(h, "mask_ratio", cfg.high.masking.mask_ratio);
      cfg.high.masking.mask_value =
          detail::get_or<double>(h, "mask_value", cfg.high.masking.mask_value);
      cfg.high.epochs = detail::get_or<std::int64_t>(h, "epochs", cfg.high.epochs);
      cfg.high.batch_size = detail::get_or<std::int64_t>(h, "batch_size", cfg.high.batch_size);
      cfg.high.lr = detail::get_or<double>(h, "lr", cfg.high.lr);
      cfg.high.lr_decay = detail::get_or<double>(h, "lr_decay", cfg.high.lr_decay);
    }
    if (s.contains("mid")) {
      const auto& m = s.at("mid");
      detail::check_keys(m, "streams.mid.",
                         {"hidden_dims", "dropout", "mask_ratio", "mask_value", "epochs",
                          "batch_size", "lr", "lr_decay", "loss_weights", "temperature",
                          "huber_delta", "prior"});
      cfg.mid.hidden_dims =
          detail::get_or<std::vector<std::int64_t>>(m, "hidden_dims", cfg.mid.hidden_dims);
      cfg.mid.dropout_rate = detail::get_or<double>(m, "dropout", cfg.mid.dropout_rate);
      cfg.mid.masking.mask_ratio =
          detail::get_or<double>(m, "mask_ratio", cfg.mid.masking.mask_ratio);
      cfg.mid.masking.mask_value =
          detail::get_or<double>(m, "mask_value", cfg.mid.masking.mask_value);
      cfg.mid.epochs = detail::get_or<std::int64_t>(m, "epochs", cfg.mid.epochs);
      cfg.mid.batch_size = detail::get_or<std::int64_t>(m, "batch_size", cfg.mid.batch_size);
      cfg.mid.lr = detail::get_or<double>(m, "lr", cfg.mid.lr);
      cfg.mid.lr_decay = detail::get_or<double>(m, "lr_decay", cfg.mid.lr_decay);
      if (m.contains("loss_weights")) {
        const auto& w = m.at("loss_weights");
        detail::check_keys(w, "streams.mid.loss_weights.", {"ddpm", "huber", "nce"});
        cfg.mid.weights.ddpm = detail::get_or<double>(w, "ddpm", cfg.mid.weights.ddpm);
        cfg.mid.weights.huber = detail::get_or<double>(w, "huber", cfg.mid.weights.huber);
        cfg.mid.weights.nce = detail::get_or<double>(w, "nce", cfg.mid.weights.nce);
      }
      cfg.mid.temperature = detail::get_or<double>(m, "temperature", cfg.mid.temperature);
      cfg.mid.huber_delta = detail::get_or<double>(m, "huber_delta", cfg.mid.huber_delta);
      if (m.contains("prior")) {
        const auto& p = m.at("prior");
        detail::check_keys(p, "streams.mid.prior.",
                           {"steps", "beta_start", "beta_end", "hidden_dims", "time_embed_dim",
                            "lr"});
        cfg.mid.schedule_steps =
            static_cast<int>(detail::get_or<std::int64_t>(p, "steps", cfg.mid.schedule_steps));
        cfg.mid.beta_start = detail::get_or<double>(p, "beta_start", cfg.mid.beta_start);
        cfg.mid.beta_end = detail::get_or<double>(p, "beta_end", cfg.mid.beta_end);
        cfg.mid.denoiser_hidden =
            detail::get_or<std::vector<std::int64_t>>(p, "hidden_dims", cfg.mid.denoiser_hidden);
        cfg.mid.time_embed_dim =
            detail::get_or<std::int64_t>(p, "time_embed_dim", cfg.mid.time_embed_dim);
        cfg.mid.prior_lr = detail::get_or<double>(p, "lr", cfg.mid.prior_lr);
      }
    }
    if (s.contains("low")) {
      const auto& l = s.at("low");
      detail::check_keys(l, "streams.low.",
                         {"hidden_dims", "dropout", "mask_ratio", "mask_value", "epochs",
                          "batch_size", "lr", "lr_decay", "loss_weights", "huber_delta",
                          "decoder_channels", "decoder_kernel"});
      cfg.low.hidden_dims =
          detail::get_or<std::vector<std::int64_t>>(l, "hidden_dims", cfg.low.hidden_dims);
      cfg.low.dropout_rate = detail::get_or<double>(l, "dropout", cfg.low.dropout_rate);
      cfg.low.masking.mask_ratio =
          detail::get_or<double>(l, "mask_ratio", cfg.low.masking.mask_ratio);
      cfg.low.masking.mask_value =
          detail::get_or<double>(l, "mask_value", cfg.low.masking.mask_value);
      cfg.low.epochs = detail::get_or<std::int64_t>(l, "epochs", cfg.low.epochs);
      cfg.low.batch_size = detail::get_or<std::int64_t>(l, "batch_size", cfg.low.batch_size);
      cfg.low.lr = detail::get_or<double>(l, "lr", cfg.low.lr);
      cfg.low.lr_decay = detail::get_or<double>(l, "lr_decay", cfg.low.lr_decay);
      if (l.contains("loss_weights")) {
        const auto& w = l.at("loss_weights");
        detail::check_keys(w, "streams.low.loss_weights.", {"huber", "aux"});
        cfg.low.weights.huber = detail::get_or<double>(w, "huber", cfg.low.weights.huber);
        cfg.low.weights.aux = detail::get_or<double>(w, "aux", cfg.low.weights.aux);
      }
      cfg.low.huber_delta = detail::get_or<double>(l, "huber_delta", cfg.low.huber_delta);
      cfg.low.decoder.stage_channels = detail::get_or<std::vector<std::int64_t>>(
          l, "decoder_channels", cfg.low.decoder.stage_channels);
      cfg.low.decoder.kernel =
          detail::get_or<std::int64_t>(l, "decoder_kernel", cfg.low.decoder.kernel);
    }
  }

  if (j.contains("inference")) {
    const auto& i = j.at("inference");
    detail::check_keys(i, "inference.",
                       {"guidance", "caption_samples", "strength", "generator_steps",
                        "prior_sample_steps", "workers"});
    if (i.contains("guidance")) {
      const auto& g = i.at("guidance");
      detail::check_keys(g, "inference.guidance.", {"high", "mid", "low"});
      cfg.inference.guidance.high = detail::get_or<bool>(g, "high", cfg.inference.guidance.high);
      cfg.inference.guidance.mid = detail::get_or<bool>(g, "mid", cfg.inference.guidance.mid);
      cfg.inference.guidance.low = detail::get_or<bool>(g, "low", cfg.inference.guidance.low);
    }
    cfg.inference.n_caption_samples =
        static_cast<int>(detail::get_or<std::int64_t>(i, "caption_samples",
                                                      cfg.inference.n_caption_samples));
    cfg.inference.strength = detail::get_or<double>(i, "strength", cfg.inference.strength);
    cfg.inference.generator_steps = static_cast<int>(
        detail::get_or<std::int64_t>(i, "generator_steps", cfg.inference.generator_steps));
    cfg.inference.prior_sample_steps = static_cast<int>(
        detail::get_or<std::int64_t>(i, "prior_sample_steps", cfg.inference.prior_sample_steps));
    cfg.inference.workers =
        static_cast<int>(detail::get_or<std::int64_t>(i, "workers", cfg.inference.workers));
  }

  if (j.contains("evaluate")) {
    const auto& e = j.at("evaluate");
    detail::check_keys(e, "evaluate.",
                       {"resolution", "distance", "twoway_extractors", "distance_extractors"});
    cfg.evaluate.eval_resolution =
        detail::get_or<std::int64_t>(e, "resolution", cfg.evaluate.eval_resolution);
    cfg.evaluate.distance = metrics::distance_kind_from_string(
        detail::get_or<std::string>(e, "distance", metrics::to_string(cfg.evaluate.distance)));
    cfg.twoway_extractors =
        detail::get_or<std::vector<std::string>>(e, "twoway_extractors", cfg.twoway_extractors);
    cfg.distance_extractors = detail::get_or<std::vector<std::string>>(e, "distance_extractors",
                                                                       cfg.distance_extractors);
  }

  if (j.contains("plugins")) {
    const auto& p = j.at("plugins");
    detail::check_keys(p, "plugins.",
                       {"text_codec", "refiner", "image_encoder", "latent_codec", "teacher",
                        "generator"});
    for (auto& [name, sel] : cfg.plugin_selection) {
      sel = detail::get_or<std::string>(p, name, sel);
    }
  }
  cfg.output_dir = detail::get_or<std::string>(j, "output_dir", cfg.output_dir);

  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw RuntimeError("load_config: missing config file " + path.string());
  }
  json j;
  try {
    j = json::parse(serialize::read_all(path));
  } catch (const json::exception& e) {
    throw ValidationError("load_config: malformed JSON in " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

inline std::string config_digest(const ExperimentConfig& cfg) {
  return serialize::hex_digest(fnv1a64(cfg.to_json().dump()));
}

inline void save_config(const ExperimentConfig& cfg, const std::filesystem::path& path) {
  serialize::atomic_write(path, cfg.to_json().dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

struct RunRecord {
  std::string command;
  std::string config_digest;
  std::string started_at;
  std::string finished_at;
  std::map<std::string, std::vector<double>> curves;
  std::vector<std::string> artifacts;
  json extra = json::object();

  json to_json() const {
    return {{"command", command},       {"config_digest", config_digest},
            {"started_at", started_at}, {"finished_at", finished_at},
            {"curves", curves},         {"artifacts", artifacts},
            {"extra", extra}};
  }

  void save(const std::filesystem::path& path) const {
    serialize::atomic_write(path, to_json().dump(2) + "\n");
  }
};

// ---------------------------------------------------------------------------
// Orchestration (shared by the CLI and the test suites)
// ---------------------------------------------------------------------------

// The dataset is either loaded from a manifest directory or synthesized
// in memory from the config's synth block.
inline data::DatasetManifest resolve_dataset(const ExperimentConfig& cfg) {
  if (cfg.manifest_path) return data::load_manifest(*cfg.manifest_path);
  if (cfg.synth) return data::generate_synthetic_dataset(*cfg.synth, cfg.seed);
  throw ValidationError("config: dataset requires either 'manifest' or 'synth'");
}

// Reference plugin set wired for a dataset (codec vocabulary = all captions
// in the manifest; latent codec / generator sized to the stimulus images).
struct ReferencePlugins {
  std::unique_ptr<plugins::HashTextCodec> text_codec;
  std::unique_ptr<plugins::ConsensusCaptionRefiner> refiner;
  std::unique_ptr<plugins::PatchStatsImageEncoder> image_encoder;
  std::unique_ptr<plugins::ResampleLatentCodec> latent_codec;
  std::unique_ptr<plugins::RandomConvFeatureTeacher> teacher;
  std::unique_ptr<plugins::CompositorGenerator> generator;

  recon::InferencePlugins inference_view() const {
    return {text_codec.get(), refiner.get(), latent_codec.get(), generator.get()};
  }
};

// Out-of-tree plugin adapters are discovered on this search path. None ship
// with the library, so any non-"reference" selection resolves to a clear
// error that names the path consulted.
inline constexpr const char* kPluginPathEnv = "VOXSTREAMS_PLUGIN_PATH";

inline void require_reference_plugins(const ExperimentConfig& cfg) {
  for (const auto& [name, selection] : cfg.plugin_selection) {
    if (selection == "reference") continue;
    const char* search_path = std::getenv(kPluginPathEnv);
    throw ValidationError("plugin '" + selection + "' for '" + name + "' not found (searched " +
                          std::string(kPluginPathEnv) + "=" +
                          (search_path ? search_path : "<unset>") +
                          "); only the in-tree 'reference' plugins ship with this build");
  }
}

inline ReferencePlugins make_reference_plugins(const data::DatasetManifest& manifest) {
  ReferencePlugins p;
  std::vector<std::string> vocabulary;
  for (const auto& [id, stim] : manifest.stimuli) {
    (void)id;
    for (const auto& c : stim.captions) vocabulary.push_back(c);
  }
  std::sort(vocabulary.begin(), vocabulary.end());
  vocabulary.erase(std::unique(vocabulary.begin(), vocabulary.end()), vocabulary.end());
  std::int64_t image_h = 64, image_w = 64;
  if (!manifest.stimuli.empty()) {
    image_h = manifest.stimuli.begin()->second.image.shape[0];
    image_w = manifest.stimuli.begin()->second.image.shape[1];
  }
  p.text_codec = std::make_unique<plugins::HashTextCodec>(vocabulary);
  p.refiner = std::make_unique<plugins::ConsensusCaptionRefiner>();
  p.image_encoder = std::make_unique<plugins::PatchStatsImageEncoder>();
  p.latent_codec = std::make_unique<plugins::ResampleLatentCodec>(image_h, image_w);
  p.teacher = std::make_unique<plugins::RandomConvFeatureTeacher>();
  p.generator = std::make_unique<plugins::CompositorGenerator>(image_h, image_w);
  return p;
}

}  // namespace voxstreams::harness
