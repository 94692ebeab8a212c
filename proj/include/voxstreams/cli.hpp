#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "voxstreams/harness.hpp"

// Subcommands: synth | train-high | train-mid | train-low | infer | evaluate
// | ablate. Exit codes: 0 ok, 1 usage, 2 validation, 3 runtime.
namespace voxstreams::cli {

namespace detail {

inline harness::ExperimentConfig effective_config(const std::string& config_path,
                                                  const std::string& manifest_path,
                                                  std::int64_t seed_override) {
  harness::ExperimentConfig cfg =
      config_path.empty() ? harness::ExperimentConfig{} : harness::load_config(config_path);
  if (!manifest_path.empty()) cfg.manifest_path = manifest_path;
  if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
  cfg.validate();
  return cfg;
}

inline recon::GuidanceFlags parse_guidance(const std::string& spec) {
  recon::GuidanceFlags flags{false, false, false};
  std::string token;
  std::istringstream is(spec);
  while (std::getline(is, token, ',')) {
    if (token == "high") {
      flags.high = true;
    } else if (token == "mid") {
      flags.mid = true;
    } else if (token == "low") {
      flags.low = true;
    } else if (!token.empty()) {
      throw ValidationError("infer: unknown guidance level '" + token + "'");
    }
  }
  check(flags.high || flags.mid || flags.low, "infer: guidance must enable at least one level");
  return flags;
}

inline std::vector<std::pair<std::string, Tensor>> read_image_dir(
    const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw RuntimeError("evaluate: not a directory: " + dir.string());
  }
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() == ".png") {
      out.emplace_back(entry.path().stem().string(), png::read_file(entry.path()));
    }
  }
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  return out;
}

struct LoadedModels {
  std::optional<high::HighModel> high_model;
  std::optional<mid::MidModel> mid_model;
  std::optional<diffusion::PriorModel> prior;
  std::optional<low::LowModel> low_model;
  std::map<std::string, std::string> digests;
};

inline LoadedModels load_models(const recon::GuidanceFlags& flags, const std::string& high_path,
                                const std::string& mid_path, const std::string& prior_path,
                                const std::string& low_path) {
  LoadedModels m;
  if (flags.high) {
    check(!high_path.empty(), "high guidance enabled but --ckpt-high missing");
    m.high_model = high::from_checkpoint(serialize::load_checkpoint(high_path));
    m.digests["high"] = serialize::file_digest(high_path);
  }
  if (flags.mid) {
    check(!mid_path.empty() && !prior_path.empty(),
          "mid guidance enabled but --ckpt-mid/--ckpt-mid-prior missing");
    m.mid_model = mid::from_checkpoint(serialize::load_checkpoint(mid_path));
    m.prior = diffusion::prior_from_checkpoint(serialize::load_checkpoint(prior_path));
    m.digests["mid"] = serialize::file_digest(mid_path);
    m.digests["mid_prior"] = serialize::file_digest(prior_path);
  }
  if (flags.low) {
    check(!low_path.empty(), "low guidance enabled but --ckpt-low missing");
    m.low_model = low::from_checkpoint(serialize::load_checkpoint(low_path));
    m.digests["low"] = serialize::file_digest(low_path);
  }
  return m;
}

inline metrics::MetricReport evaluate_sets(const harness::ExperimentConfig& cfg,
                                           const std::vector<Tensor>& recon_set,
                                           const std::vector<Tensor>& gt_set) {
  auto twoway = plugins::make_reference_extractors(cfg.twoway_extractors);
  auto dist = plugins::make_reference_extractors(cfg.distance_extractors);
  std::vector<const plugins::FeatureExtractor*> twoway_view, dist_view;
  for (const auto& e : twoway) twoway_view.push_back(e.get());
  for (const auto& e : dist) dist_view.push_back(e.get());
  return metrics::evaluate(recon_set, gt_set, twoway_view, dist_view, cfg.evaluate);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands (throw on failure; run_cli maps exceptions to exit codes)
// ---------------------------------------------------------------------------

inline void cmd_synth(const data::SynthConfig& synth_cfg, std::uint64_t seed,
                      const std::filesystem::path& out_dir) {
  const auto result = data::generate_synthetic_dataset_full(synth_cfg, seed);
  data::save_manifest(result.manifest, out_dir);
  for (const auto& mask : result.masks) {
    data::save_atlas(out_dir / ("atlas_" + mask.roi_name + ".txt"), mask);
  }
  nlohmann::json meta = {{"seed", seed},
                         {"volume_length", result.volume_length},
                         {"records", result.manifest.records.size()},
                         {"stimuli", result.manifest.stimuli.size()}};
  serialize::atomic_write(out_dir / "synth.json", meta.dump(2) + "\n");
  std::cout << "synth: wrote " << result.manifest.records.size() << " records, "
            << result.manifest.stimuli.size() << " stimuli to " << out_dir.string() << "\n";
}

inline void cmd_train_high(const harness::ExperimentConfig& cfg,
                           const std::filesystem::path& out_path) {
  harness::RunRecord record;
  record.command = "train-high";
  record.config_digest = harness::config_digest(cfg);
  record.extra["config"] = cfg.to_json();
  record.started_at = harness::detail::iso_timestamp();
  const auto manifest = harness::resolve_dataset(cfg);
  const auto prepared = data::prepare_for_training(manifest);
  harness::require_reference_plugins(cfg);
  const auto refs = harness::make_reference_plugins(manifest);
  auto result = high::train_high(prepared, *refs.text_codec, cfg.high,
                                 derive_seed(cfg.seed, "train_high"));
  serialize::save_checkpoint(out_path, high::to_checkpoint(result.model));
  record.finished_at = harness::detail::iso_timestamp();
  record.curves["train_loss"] = result.trace.epoch_loss;
  record.curves["val_loss"] = result.trace.val_loss;
  record.artifacts.push_back(out_path.string());
  record.extra["checkpoint_digest"] = serialize::file_digest(out_path);
  record.save(out_path.string() + ".run.json");
  std::cout << "train-high: final loss " << result.trace.epoch_loss.back() << ", wrote "
            << out_path.string() << "\n";
}

inline void cmd_train_mid(const harness::ExperimentConfig& cfg,
                          const std::filesystem::path& out_path,
                          const std::filesystem::path& prior_path) {
  harness::RunRecord record;
  record.command = "train-mid";
  record.config_digest = harness::config_digest(cfg);
  record.extra["config"] = cfg.to_json();
  record.started_at = harness::detail::iso_timestamp();
  const auto manifest = harness::resolve_dataset(cfg);
  const auto prepared = data::prepare_for_training(manifest);
  harness::require_reference_plugins(cfg);
  const auto refs = harness::make_reference_plugins(manifest);
  auto result =
      mid::train_mid(prepared, *refs.image_encoder, cfg.mid, derive_seed(cfg.seed, "train_mid"));
  serialize::save_checkpoint(out_path, mid::to_checkpoint(result.model));
  serialize::save_checkpoint(prior_path,
                             diffusion::prior_to_checkpoint(result.prior.net, result.prior));
  record.finished_at = harness::detail::iso_timestamp();
  record.curves["train_loss"] = result.trace.epoch_loss;
  record.curves["val_huber"] = result.trace.val_loss;
  record.artifacts = {out_path.string(), prior_path.string()};
  record.extra["checkpoint_digest"] = serialize::file_digest(out_path);
  record.extra["prior_checkpoint_digest"] = serialize::file_digest(prior_path);
  record.save(out_path.string() + ".run.json");
  std::cout << "train-mid: final loss " << result.trace.epoch_loss.back() << ", wrote "
            << out_path.string() << " and " << prior_path.string() << "\n";
}

inline void cmd_train_low(const harness::ExperimentConfig& cfg,
                          const std::filesystem::path& out_path) {
  harness::RunRecord record;
  record.command = "train-low";
  record.config_digest = harness::config_digest(cfg);
  record.extra["config"] = cfg.to_json();
  record.started_at = harness::detail::iso_timestamp();
  const auto manifest = harness::resolve_dataset(cfg);
  const auto prepared = data::prepare_for_training(manifest);
  harness::require_reference_plugins(cfg);
  const auto refs = harness::make_reference_plugins(manifest);
  auto result = low::train_low(prepared, *refs.latent_codec, *refs.teacher, cfg.low,
                               derive_seed(cfg.seed, "train_low"));
  serialize::save_checkpoint(out_path, low::to_checkpoint(result.model));
  record.finished_at = harness::detail::iso_timestamp();
  record.curves["train_loss"] = result.trace.epoch_loss;
  record.curves["val_huber"] = result.trace.val_loss;
  record.artifacts.push_back(out_path.string());
  record.extra["checkpoint_digest"] = serialize::file_digest(out_path);
  record.save(out_path.string() + ".run.json");
  std::cout << "train-low: final loss " << result.trace.epoch_loss.back() << ", wrote "
            << out_path.string() << "\n";
}

inline void cmd_infer(const harness::ExperimentConfig& cfg, const detail::LoadedModels& models_in,
                      const std::filesystem::path& out_dir,
                      const std::filesystem::path& export_gt_dir) {
  harness::RunRecord record;
  record.command = "infer";
  record.config_digest = harness::config_digest(cfg);
  record.extra["config"] = cfg.to_json();
  record.started_at = harness::detail::iso_timestamp();
  const auto manifest = harness::resolve_dataset(cfg);
  const auto prepared = data::prepare_for_training(manifest);
  harness::require_reference_plugins(cfg);
  const auto refs = harness::make_reference_plugins(manifest);

  detail::LoadedModels models = models_in;  // model forward passes mutate caches
  recon::InferenceConfig icfg = cfg.inference;
  icfg.base_seed = derive_seed(cfg.seed, "inference");
  auto results = recon::run_inference(
      prepared, models.high_model ? &*models.high_model : nullptr,
      models.mid_model ? &*models.mid_model : nullptr, models.prior ? &*models.prior : nullptr,
      models.low_model ? &*models.low_model : nullptr, refs.inference_view(), icfg);
  recon::write_outputs(results, out_dir, icfg.guidance.high);

  if (!export_gt_dir.empty()) {
    std::filesystem::create_directories(export_gt_dir);
    for (const auto& rec : prepared.test_records) {
      png::write_file(export_gt_dir / (rec.stimulus_id + ".png"),
                      prepared.stimuli.at(rec.stimulus_id).image);
    }
  }

  record.finished_at = harness::detail::iso_timestamp();
  record.extra["guidance"] = icfg.guidance.name();
  record.extra["base_seed"] = icfg.base_seed;
  record.extra["checkpoint_digests"] = models.digests;
  record.extra["outputs"] = results.size();
  record.save(out_dir / "run.json");
  std::cout << "infer: wrote " << results.size() << " reconstructions to " << out_dir.string()
            << "\n";
}

inline metrics::MetricReport cmd_evaluate(const harness::ExperimentConfig& cfg,
                                          const std::filesystem::path& recon_dir,
                                          const std::filesystem::path& gt_dir,
                                          const std::filesystem::path& report_path,
                                          bool print_table = true) {
  const auto recon_files = detail::read_image_dir(recon_dir);
  const auto gt_files = detail::read_image_dir(gt_dir);
  check(!recon_files.empty(), "evaluate: no .png files in " + recon_dir.string());
  std::vector<Tensor> recon_set, gt_set;
  std::map<std::string, const Tensor*> gt_by_stem;
  for (const auto& [stem, image] : gt_files) gt_by_stem[stem] = &image;
  for (const auto& [stem, image] : recon_files) {
    auto it = gt_by_stem.find(stem);
    check(it != gt_by_stem.end(), "evaluate: no ground-truth image for '" + stem + "'");
    recon_set.push_back(image);
    gt_set.push_back(*it->second);
  }
  auto report = detail::evaluate_sets(cfg, recon_set, gt_set);
  if (!report_path.empty()) {
    serialize::atomic_write(report_path, report.to_json().dump(2) + "\n");
  }
  if (print_table) std::cout << report.render_table();
  return report;
}

inline void cmd_ablate(const harness::ExperimentConfig& cfg, const detail::LoadedModels& models_in,
                       const std::filesystem::path& out_dir) {
  const auto manifest = harness::resolve_dataset(cfg);
  const auto prepared = data::prepare_for_training(manifest);
  harness::require_reference_plugins(cfg);
  const auto refs = harness::make_reference_plugins(manifest);

  std::vector<Tensor> gt_set;
  for (const auto& rec : prepared.test_records) {
    gt_set.push_back(prepared.stimuli.at(rec.stimulus_id).image);
  }

  nlohmann::json combined = nlohmann::json::array();
  std::filesystem::create_directories(out_dir);
  for (const auto& flags : recon::ablation_flag_sets()) {
    detail::LoadedModels models = models_in;
    recon::InferenceConfig icfg = cfg.inference;
    icfg.guidance = flags;
    icfg.base_seed = derive_seed(cfg.seed, "inference");
    auto results = recon::run_inference(
        prepared, models.high_model ? &*models.high_model : nullptr,
        models.mid_model ? &*models.mid_model : nullptr, models.prior ? &*models.prior : nullptr,
        models.low_model ? &*models.low_model : nullptr, refs.inference_view(), icfg);
    recon::write_outputs(results, out_dir / flags.name(), flags.high);
    std::vector<Tensor> recon_set;
    for (const auto& r : results) recon_set.push_back(r.image);
    const auto report = detail::evaluate_sets(cfg, recon_set, gt_set);
    std::cout << "--- guidance: " << flags.name() << " ---\n"
              << report.render_table(flags.name());
    combined.push_back({{"guidance", flags.name()}, {"report", report.to_json()}});
  }
  serialize::atomic_write(out_dir / "ablation.json", combined.dump(2) + "\n");
  std::cout << "ablate: wrote " << (out_dir / "ablation.json").string() << "\n";
}

// ---------------------------------------------------------------------------
// Argument parsing
// ---------------------------------------------------------------------------

inline int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"voxstreams: region-wise fMRI-to-image guidance pipeline"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset directory");
  std::string synth_out;
  std::int64_t synth_seed = 7;
  data::SynthConfig synth_cfg;
  synth->add_option("--out", synth_out, "output dataset directory")->required();
  synth->add_option("--seed", synth_seed, "generation seed");
  synth->add_option("--train", synth_cfg.n_train_stimuli, "number of train stimuli");
  synth->add_option("--test", synth_cfg.n_test_stimuli, "number of test stimuli");
  synth->add_option("--repeats", synth_cfg.test_repeats, "repeats per test stimulus");
  synth->add_option("--sessions", synth_cfg.n_sessions, "number of scan sessions");
  synth->add_option("--image-size", synth_cfg.image_size, "stimulus image side length");
  synth->add_option("--noise", synth_cfg.noise_scale, "voxel noise scale");
  synth->add_option("--signal", synth_cfg.signal_scale, "voxel signal scale");
  synth->add_option("--pooled-dim", synth_cfg.pooled_dim, "latent sketch dimension");
  synth->add_option("--voxels-ventral", synth_cfg.voxels_per_roi["ventral"], "ventral voxels");
  synth->add_option("--voxels-early", synth_cfg.voxels_per_roi["early"], "early voxels");
  synth->add_option("--voxels-nsdgeneral", synth_cfg.voxels_per_roi["nsdgeneral"],
                    "nsdgeneral voxels");
  synth->add_option("--subject", synth_cfg.subject_id, "subject id");
  synth->callback([&] {
    cmd_synth(synth_cfg, static_cast<std::uint64_t>(synth_seed), synth_out);
  });

  // shared train/infer options
  std::string config_path, manifest_path;
  std::int64_t seed_override = -1;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config JSON");
    sub->add_option("--manifest", manifest_path, "dataset manifest directory");
    sub->add_option("--seed", seed_override, "seed override");
  };

  auto* train_high = app.add_subcommand("train-high", "train the textual (ventral) stream");
  std::string high_out = "high.ckpt";
  add_common(train_high);
  train_high->add_option("--out", high_out, "checkpoint output path");
  train_high->callback([&] {
    cmd_train_high(detail::effective_config(config_path, manifest_path, seed_override), high_out);
  });

  auto* train_mid = app.add_subcommand("train-mid", "train the embedding (nsdgeneral) stream");
  std::string mid_out = "mid.ckpt", mid_prior_out = "mid_prior.ckpt";
  add_common(train_mid);
  train_mid->add_option("--out", mid_out, "MLP checkpoint output path");
  train_mid->add_option("--out-prior", mid_prior_out, "prior checkpoint output path");
  train_mid->callback([&] {
    cmd_train_mid(detail::effective_config(config_path, manifest_path, seed_override), mid_out,
                  mid_prior_out);
  });

  auto* train_low = app.add_subcommand("train-low", "train the layout (early) stream");
  std::string low_out = "low.ckpt";
  add_common(train_low);
  train_low->add_option("--out", low_out, "checkpoint output path");
  train_low->callback([&] {
    cmd_train_low(detail::effective_config(config_path, manifest_path, seed_override), low_out);
  });

  // infer
  auto* infer = app.add_subcommand("infer", "reconstruct the test set");
  std::string infer_out, guidance_spec = "high,mid,low";
  std::string ckpt_high, ckpt_mid, ckpt_mid_prior, ckpt_low, export_gt;
  double strength = -1.0;
  std::int64_t caption_samples = -1, prior_steps = -1, workers = -1;
  add_common(infer);
  infer->add_option("--out", infer_out, "output directory");
  infer->add_option("--guidance", guidance_spec, "comma list of enabled levels (high,mid,low)");
  infer->add_option("--ckpt-high", ckpt_high, "high-stream checkpoint");
  infer->add_option("--ckpt-mid", ckpt_mid, "mid-stream MLP checkpoint");
  infer->add_option("--ckpt-mid-prior", ckpt_mid_prior, "mid-stream prior checkpoint");
  infer->add_option("--ckpt-low", ckpt_low, "low-stream checkpoint");
  infer->add_option("--export-gt", export_gt, "also write ground-truth PNGs here");
  infer->add_option("--strength", strength, "img2img strength in [0,1]");
  infer->add_option("--caption-samples", caption_samples, "caption decodes per record");
  infer->add_option("--prior-steps", prior_steps, "prior sampling steps (0 = bypass)");
  infer->add_option("--workers", workers, "record-parallel workers");
  infer->callback([&] {
    auto cfg = detail::effective_config(config_path, manifest_path, seed_override);
    cfg.inference.guidance = detail::parse_guidance(guidance_spec);
    if (strength >= 0.0) cfg.inference.strength = strength;
    if (caption_samples >= 0) cfg.inference.n_caption_samples = static_cast<int>(caption_samples);
    if (prior_steps >= 0) cfg.inference.prior_sample_steps = static_cast<int>(prior_steps);
    if (workers >= 1) cfg.inference.workers = static_cast<int>(workers);
    cfg.validate();
    const auto models = detail::load_models(cfg.inference.guidance, ckpt_high, ckpt_mid,
                                            ckpt_mid_prior, ckpt_low);
    cmd_infer(cfg, models, infer_out.empty() ? cfg.output_dir : infer_out, export_gt);
  });

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "score reconstructions against ground truth");
  std::string recon_dir, gt_dir, report_out = "report.json";
  std::int64_t resolution = -1;
  std::string distance_kind;
  evaluate->add_option("--config", config_path, "experiment config JSON");
  evaluate->add_option("--recon", recon_dir, "reconstruction image directory")->required();
  evaluate->add_option("--gt", gt_dir, "ground-truth image directory")->required();
  evaluate->add_option("--out", report_out, "report JSON output path");
  evaluate->add_option("--resolution", resolution, "common evaluation resolution");
  evaluate->add_option("--distance", distance_kind, "distance kind: correlation|cosine|euclidean");
  evaluate->callback([&] {
    auto cfg = detail::effective_config(config_path, "", -1);
    if (resolution > 0) cfg.evaluate.eval_resolution = resolution;
    if (!distance_kind.empty()) {
      cfg.evaluate.distance = metrics::distance_kind_from_string(distance_kind);
    }
    cmd_evaluate(cfg, recon_dir, gt_dir, report_out);
  });

  // ablate
  auto* ablate = app.add_subcommand("ablate", "run all guidance subsets and score each");
  std::string ablate_out;
  add_common(ablate);
  ablate->add_option("--out", ablate_out, "output directory");
  ablate->add_option("--ckpt-high", ckpt_high, "high-stream checkpoint")->required();
  ablate->add_option("--ckpt-mid", ckpt_mid, "mid-stream MLP checkpoint")->required();
  ablate->add_option("--ckpt-mid-prior", ckpt_mid_prior, "mid-stream prior checkpoint")
      ->required();
  ablate->add_option("--ckpt-low", ckpt_low, "low-stream checkpoint")->required();
  ablate->callback([&] {
    auto cfg = detail::effective_config(config_path, manifest_path, seed_override);
    const auto models = detail::load_models({true, true, true}, ckpt_high, ckpt_mid,
                                            ckpt_mid_prior, ckpt_low);
    cmd_ablate(cfg, models, ablate_out.empty() ? cfg.output_dir + "_ablation" : ablate_out);
  });

  std::vector<std::string> argv_strings = args;
  argv_strings.insert(argv_strings.begin(), "voxstreams");
  std::vector<const char*> argv;
  argv.reserve(argv_strings.size());
  for (const auto& s : argv_strings) argv.push_back(s.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    app.exit(e);
    return 0;
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}

}  // namespace voxstreams::cli
