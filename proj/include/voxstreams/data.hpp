#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxstreams/image.hpp"
#include "voxstreams/plugins.hpp"
#include "voxstreams/rng.hpp"
#include "voxstreams/serialize.hpp"
#include "voxstreams/tensor.hpp"

// Ingest, normalize, split and synthesize ROI-partitioned fMRI/stimulus
// datasets. On disk a dataset is a directory: manifest.json (records index,
// captions, split) plus one little-endian float32 raw array per (record,
// roi) and per stimulus image.
namespace voxstreams::data {

inline const std::vector<std::string>& known_rois() {
  static const std::vector<std::string> rois = {"ventral", "early", "nsdgeneral"};
  return rois;
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

struct AtlasMask {
  std::string roi_name;
  std::vector<std::int64_t> voxel_indices;

  void validate(std::int64_t volume_length) const {
    const auto& rois = known_rois();
    check(std::find(rois.begin(), rois.end(), roi_name) != rois.end(),
          "AtlasMask: unknown roi '" + roi_name + "'");
    check(!voxel_indices.empty(), "AtlasMask: empty index list for " + roi_name);
    std::int64_t prev = -1;
    for (auto i : voxel_indices) {
      check(i > prev, "AtlasMask: indices must be strictly increasing in " + roi_name);
      check(i >= 0 && i < volume_length, "AtlasMask: index out of volume range in " + roi_name);
      prev = i;
    }
  }
};

struct FmriRecord {
  std::string subject_id;
  std::int64_t session_id = 0;
  std::int64_t trial_id = 0;
  std::string stimulus_id;
  std::map<std::string, std::vector<float>> voxels_by_roi;

  bool operator==(const FmriRecord&) const = default;
};

struct StimulusRecord {
  std::string stimulus_id;
  Tensor image;  // (H,W,3), values in [0,1]
  std::vector<std::string> captions;

  void validate() const {
    check(!stimulus_id.empty(), "StimulusRecord: empty stimulus_id");
    img::require_image(image, "StimulusRecord");
    check(captions.size() == 5,
          "StimulusRecord: stimulus '" + stimulus_id + "' must carry exactly 5 captions, has " +
              std::to_string(captions.size()));
    for (double v : image.data) {
      check(v >= 0.0 && v <= 1.0, "StimulusRecord: pixel outside [0,1] in " + stimulus_id);
    }
  }

  bool operator==(const StimulusRecord& o) const {
    return stimulus_id == o.stimulus_id && image.shape == o.image.shape &&
           image.data == o.image.data && captions == o.captions;
  }
};

enum class Split { train, test };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw ValidationError("split must be 'train' or 'test', got '" + s + "'");
}

struct DatasetManifest {
  std::vector<FmriRecord> records;
  std::map<std::string, StimulusRecord> stimuli;
  std::map<std::string, Split> split;

  void validate() const {
    for (const auto& [id, stim] : stimuli) {
      check(id == stim.stimulus_id, "DatasetManifest: stimulus key/id mismatch for '" + id + "'");
      stim.validate();
    }
    for (const auto& rec : records) {
      check(!rec.stimulus_id.empty(), "DatasetManifest: record with empty stimulus_id");
      check(stimuli.count(rec.stimulus_id) == 1,
            "DatasetManifest: record cites unknown stimulus '" + rec.stimulus_id + "'");
      check(split.count(rec.stimulus_id) == 1,
            "DatasetManifest: no split assignment for stimulus '" + rec.stimulus_id + "'");
    }
    for (const auto& [id, s] : split) {
      (void)s;
      check(stimuli.count(id) == 1, "DatasetManifest: split cites unknown stimulus '" + id + "'");
    }
  }

  bool operator==(const DatasetManifest&) const = default;
};

// ---------------------------------------------------------------------------
// Atlas file I/O: one decimal voxel index per line.
// ---------------------------------------------------------------------------

inline void save_atlas(const std::filesystem::path& path, const AtlasMask& mask) {
  std::string out;
  for (auto i : mask.voxel_indices) {
    out += std::to_string(i);
    out.push_back('\n');
  }
  serialize::atomic_write(path, out);
}

inline AtlasMask load_atlas(const std::filesystem::path& path, const std::string& roi_name) {
  std::ifstream f(path);
  if (!f) throw RuntimeError("load_atlas: cannot open " + path.string());
  AtlasMask mask;
  mask.roi_name = roi_name;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    mask.voxel_indices.push_back(std::stoll(line));
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Core operations
// ---------------------------------------------------------------------------

// Gather of the masked coordinates out of a flattened whole-volume vector.
inline std::vector<float> extract_roi(const std::vector<float>& whole_volume_betas,
                                      const AtlasMask& mask) {
  std::vector<float> out;
  out.reserve(mask.voxel_indices.size());
  for (auto i : mask.voxel_indices) {
    check(i >= 0 && i < static_cast<std::int64_t>(whole_volume_betas.size()),
          "extract_roi: index " + std::to_string(i) + " out of range for volume of length " +
              std::to_string(whole_volume_betas.size()));
    out.push_back(whole_volume_betas[static_cast<std::size_t>(i)]);
  }
  return out;
}

// Scatter back to volume positions; inverse direction of extract_roi.
inline void scatter_roi(const std::vector<float>& roi_values, const AtlasMask& mask,
                        std::vector<float>& whole_volume) {
  check(roi_values.size() == mask.voxel_indices.size(), "scatter_roi: length mismatch");
  for (std::size_t k = 0; k < roi_values.size(); ++k) {
    whole_volume[static_cast<std::size_t>(mask.voxel_indices[k])] = roi_values[k];
  }
}

// Session-wise z-scoring: within each (subject, session, roi) group every
// voxel coordinate is normalized to mean 0, population std 1 (eps = 1e-8
// guard maps constant voxels to 0). Records carrying the averaged-test
// sentinel session (-1) pass through untouched; that is the guard against
// re-normalizing averaged records as if they formed a session.
inline std::vector<FmriRecord> zscore_by_session(const std::vector<FmriRecord>& records) {
  constexpr double kEps = 1e-8;
  std::vector<FmriRecord> out = records;
  std::map<std::pair<std::string, std::int64_t>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i].session_id < 0) continue;
    groups[{out[i].subject_id, out[i].session_id}].push_back(i);
  }
  for (const auto& [key, members] : groups) {
    (void)key;
    for (const auto& [roi, first_vec] : out[members.front()].voxels_by_roi) {
      const std::size_t n = first_vec.size();
      std::vector<double> mean(n, 0.0), sq(n, 0.0);
      for (auto idx : members) {
        const auto& v = out[idx].voxels_by_roi.at(roi);
        check(v.size() == n, "zscore_by_session: inconsistent roi length in group");
        for (std::size_t j = 0; j < n; ++j) {
          mean[j] += v[j];
          sq[j] += static_cast<double>(v[j]) * v[j];
        }
      }
      const double inv_m = 1.0 / static_cast<double>(members.size());
      for (std::size_t j = 0; j < n; ++j) {
        mean[j] *= inv_m;
        const double var = std::max(0.0, sq[j] * inv_m - mean[j] * mean[j]);
        sq[j] = std::sqrt(var);  // reuse as std
      }
      for (auto idx : members) {
        auto& v = out[idx].voxels_by_roi.at(roi);
        for (std::size_t j = 0; j < n; ++j) {
          v[j] = sq[j] < kEps
                     ? 0.0f
                     : static_cast<float>((static_cast<double>(v[j]) - mean[j]) / sq[j]);
        }
      }
    }
  }
  return out;
}

// Element-wise mean of repeats grouped by (subject, stimulus). Outputs carry
// the sentinel session_id -1; group order follows first appearance.
inline std::vector<FmriRecord> average_repeats(const std::vector<FmriRecord>& test_records) {
  std::vector<FmriRecord> out;
  std::map<std::pair<std::string, std::string>, std::size_t> group_of;
  std::vector<std::vector<const FmriRecord*>> groups;
  for (const auto& rec : test_records) {
    const auto key = std::make_pair(rec.subject_id, rec.stimulus_id);
    auto it = group_of.find(key);
    if (it == group_of.end()) {
      group_of.emplace(key, groups.size());
      groups.push_back({&rec});
    } else {
      groups[it->second].push_back(&rec);
    }
  }
  out.reserve(groups.size());
  for (const auto& members : groups) {
    FmriRecord avg = *members.front();
    avg.session_id = -1;
    const double inv_m = 1.0 / static_cast<double>(members.size());
    for (auto& [roi, vec] : avg.voxels_by_roi) {
      std::vector<double> acc(vec.size(), 0.0);
      for (const auto* rec : members) {
        const auto& v = rec->voxels_by_roi.at(roi);
        check(v.size() == vec.size(), "average_repeats: inconsistent roi length in group");
        for (std::size_t j = 0; j < v.size(); ++j) acc[j] += v[j];
      }
      for (std::size_t j = 0; j < vec.size(); ++j) {
        vec[j] = static_cast<float>(acc[j] * inv_m);
      }
    }
    out.push_back(std::move(avg));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest I/O
// ---------------------------------------------------------------------------

namespace detail {

inline std::string record_array_name(const FmriRecord& rec, const std::string& roi) {
  return "arrays/" + rec.subject_id + "_" + std::to_string(rec.session_id) + "_" +
         std::to_string(rec.trial_id) + "_" + roi + ".f32";
}

}  // namespace detail

inline void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& dir) {
  manifest.validate();
  std::filesystem::create_directories(dir / "arrays");
  std::filesystem::create_directories(dir / "stimuli");

  nlohmann::json index;
  index["format_version"] = 1;
  auto& stim_json = index["stimuli"] = nlohmann::json::object();
  for (const auto& [id, stim] : manifest.stimuli) {
    const std::string rel = "stimuli/" + id + ".f32";
    std::vector<float> px(stim.image.data.begin(), stim.image.data.end());
    serialize::write_f32_file(dir / rel, px);
    stim_json[id] = {{"image", rel},
                     {"height", stim.image.shape[0]},
                     {"width", stim.image.shape[1]},
                     {"captions", stim.captions}};
  }
  auto& records_json = index["records"] = nlohmann::json::array();
  for (const auto& rec : manifest.records) {
    nlohmann::json arrays = nlohmann::json::object();
    for (const auto& [roi, vec] : rec.voxels_by_roi) {
      const std::string rel = detail::record_array_name(rec, roi);
      serialize::write_f32_file(dir / rel, vec);
      arrays[roi] = rel;
    }
    records_json.push_back({{"subject_id", rec.subject_id},
                            {"session_id", rec.session_id},
                            {"trial_id", rec.trial_id},
                            {"stimulus_id", rec.stimulus_id},
                            {"arrays", arrays}});
  }
  auto& split_json = index["split"] = nlohmann::json::object();
  for (const auto& [id, s] : manifest.split) split_json[id] = to_string(s);

  serialize::atomic_write(dir / "manifest.json", index.dump(2) + "\n");
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  const std::filesystem::path dir =
      std::filesystem::is_directory(path) ? path : path.parent_path();
  const std::filesystem::path index_path =
      std::filesystem::is_directory(path) ? path / "manifest.json" : path;
  if (!std::filesystem::exists(index_path)) {
    throw RuntimeError("load_manifest: missing manifest file " + index_path.string());
  }
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(serialize::read_all(index_path));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("load_manifest: malformed JSON in " + index_path.string() + ": " +
                          e.what());
  }

  DatasetManifest manifest;
  try {
    for (const auto& [id, sj] : index.at("stimuli").items()) {
      StimulusRecord stim;
      stim.stimulus_id = id;
      const auto h = sj.at("height").get<std::int64_t>();
      const auto w = sj.at("width").get<std::int64_t>();
      check(h >= 1 && w >= 1, "load_manifest: bad image dims for stimulus '" + id + "'");
      const auto px = serialize::read_f32_file(dir / sj.at("image").get<std::string>());
      check(static_cast<std::int64_t>(px.size()) == h * w * 3,
            "load_manifest: image array size mismatch for stimulus '" + id + "'");
      stim.image = Tensor({h, w, 3});
      for (std::size_t i = 0; i < px.size(); ++i) stim.image.data[i] = px[i];
      stim.captions = sj.at("captions").get<std::vector<std::string>>();
      check(stim.captions.size() == 5, "load_manifest: stimulus '" + id +
                                           "' must carry exactly 5 captions, has " +
                                           std::to_string(stim.captions.size()));
      manifest.stimuli.emplace(id, std::move(stim));
    }
    for (const auto& rj : index.at("records")) {
      FmriRecord rec;
      rec.subject_id = rj.at("subject_id").get<std::string>();
      rec.session_id = rj.at("session_id").get<std::int64_t>();
      rec.trial_id = rj.at("trial_id").get<std::int64_t>();
      rec.stimulus_id = rj.at("stimulus_id").get<std::string>();
      for (const auto& [roi, rel] : rj.at("arrays").items()) {
        rec.voxels_by_roi[roi] = serialize::read_f32_file(dir / rel.get<std::string>());
      }
      manifest.records.push_back(std::move(rec));
    }
    for (const auto& [id, s] : index.at("split").items()) {
      manifest.split[id] = split_from_string(s.get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("load_manifest: schema violation in " + index_path.string() + ": " +
                          e.what());
  }
  manifest.validate();
  return manifest;
}

// ---------------------------------------------------------------------------
// Training view: z-score everything session-wise, then average test repeats.
// ---------------------------------------------------------------------------

struct PreparedDataset {
  std::vector<FmriRecord> train_records;
  std::vector<FmriRecord> test_records;  // one averaged record per (subject, stimulus)
  std::map<std::string, StimulusRecord> stimuli;
};

inline PreparedDataset prepare_for_training(const DatasetManifest& manifest) {
  manifest.validate();
  PreparedDataset out;
  out.stimuli = manifest.stimuli;
  const auto zscored = zscore_by_session(manifest.records);
  std::vector<FmriRecord> test_raw;
  for (const auto& rec : zscored) {
    if (manifest.split.at(rec.stimulus_id) == Split::train) {
      out.train_records.push_back(rec);
    } else {
      test_raw.push_back(rec);
    }
  }
  out.test_records = average_repeats(test_raw);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic dataset: deterministic procedural scenes whose voxels are a
// fixed linear projection of the ground-truth latents (pooled to a small
// sketch) plus isotropic Gaussian noise, so every stream has learnable
// signal.
// ---------------------------------------------------------------------------

struct SynthConfig {
  std::map<std::string, std::int64_t> voxels_per_roi = {
      {"ventral", 512}, {"early", 512}, {"nsdgeneral", 768}};
  std::int64_t n_train_stimuli = 40;
  std::int64_t n_test_stimuli = 10;
  std::int64_t test_repeats = 3;
  std::int64_t n_sessions = 4;
  std::int64_t image_size = 64;
  double noise_scale = 0.05;
  double signal_scale = 1.0;  // 0 yields pure-noise voxels (no learnable signal)
  std::int64_t pooled_dim = 32;
  std::string subject_id = "subj01";

  void validate() const {
    check(n_train_stimuli >= 0 && n_test_stimuli >= 0, "SynthConfig: negative stimulus count");
    check(n_train_stimuli + n_test_stimuli >= 1, "SynthConfig: zero stimulus count");
    check(test_repeats >= 1, "SynthConfig: test_repeats must be >= 1");
    check(n_sessions >= 1, "SynthConfig: n_sessions must be >= 1");
    check(image_size >= 8, "SynthConfig: image_size must be >= 8");
    check(pooled_dim >= 1, "SynthConfig: pooled_dim must be >= 1");
    check(noise_scale >= 0.0 && signal_scale >= 0.0, "SynthConfig: negative scale");
    for (const auto& roi : known_rois()) {
      check(voxels_per_roi.count(roi) == 1 && voxels_per_roi.at(roi) >= 1,
            "SynthConfig: missing voxel count for roi '" + roi + "'");
    }
  }
};

struct SynthResult {
  DatasetManifest manifest;
  std::vector<AtlasMask> masks;
  std::int64_t volume_length = 0;
};

namespace detail {

// Fixed sparse pooling of a flat latent down to pooled_dim coordinates:
// each pooled entry is a signed mean over a seeded coordinate subset.
struct PooledProjection {
  std::vector<std::vector<std::int64_t>> indices;
  std::vector<std::vector<double>> signs;

  static PooledProjection make(std::int64_t latent_dim, std::int64_t pooled_dim,
                               std::uint64_t seed) {
    PooledProjection p;
    p.indices.resize(static_cast<std::size_t>(pooled_dim));
    p.signs.resize(static_cast<std::size_t>(pooled_dim));
    const std::int64_t fan_in = std::min<std::int64_t>(latent_dim, 32);
    for (std::int64_t k = 0; k < pooled_dim; ++k) {
      Rng rng(derive_seed(seed, "pooled_proj", static_cast<std::uint64_t>(k)));
      auto& idx = p.indices[static_cast<std::size_t>(k)];
      auto& sgn = p.signs[static_cast<std::size_t>(k)];
      for (std::int64_t j = 0; j < fan_in; ++j) {
        idx.push_back(static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(latent_dim))));
        sgn.push_back(rng.uniform() < 0.5 ? -1.0 : 1.0);
      }
    }
    return p;
  }

  std::vector<double> apply(const Tensor& latent) const {
    std::vector<double> out(indices.size(), 0.0);
    for (std::size_t k = 0; k < indices.size(); ++k) {
      double acc = 0.0;
      for (std::size_t j = 0; j < indices[k].size(); ++j) {
        acc += signs[k][j] * latent[indices[k][j]];
      }
      out[k] = acc / std::sqrt(static_cast<double>(indices[k].size()));
    }
    return out;
  }
};

struct Scene {
  std::string shape;
  std::string color;
  std::string background;
  std::string size;
  double cx, cy, radius;
};

inline const std::vector<std::pair<std::string, std::array<double, 3>>>& palette() {
  static const std::vector<std::pair<std::string, std::array<double, 3>>> colors = {
      {"red", {0.85, 0.15, 0.15}},   {"green", {0.15, 0.75, 0.2}}, {"blue", {0.15, 0.25, 0.85}},
      {"yellow", {0.9, 0.85, 0.15}}, {"purple", {0.6, 0.2, 0.7}},
  };
  return colors;
}

inline const std::vector<std::pair<std::string, std::array<double, 3>>>& backgrounds() {
  static const std::vector<std::pair<std::string, std::array<double, 3>>> colors = {
      {"white", {0.95, 0.95, 0.95}}, {"black", {0.06, 0.06, 0.06}}, {"gray", {0.5, 0.5, 0.5}},
  };
  return colors;
}

inline Scene make_scene(std::uint64_t seed, std::int64_t index) {
  Rng rng(derive_seed(seed, "scene", static_cast<std::uint64_t>(index)));
  static const std::vector<std::string> shapes = {"circle", "square", "diamond"};
  static const std::vector<std::pair<std::string, double>> sizes = {
      {"tiny", 0.10}, {"small", 0.15}, {"medium", 0.20}, {"large", 0.26}, {"huge", 0.32}};
  Scene s;
  s.shape = shapes[rng.uniform_int(shapes.size())];
  s.color = palette()[rng.uniform_int(palette().size())].first;
  s.background = backgrounds()[rng.uniform_int(backgrounds().size())].first;
  const auto& [size_word, radius] = sizes[rng.uniform_int(sizes.size())];
  s.size = size_word;
  s.radius = radius;
  s.cx = 0.35 + 0.3 * rng.uniform();
  s.cy = 0.35 + 0.3 * rng.uniform();
  return s;
}

inline Tensor render_scene(const Scene& s, std::int64_t size) {
  std::array<double, 3> fg{}, bg{};
  for (const auto& [name, rgb] : palette()) {
    if (name == s.color) fg = rgb;
  }
  for (const auto& [name, rgb] : backgrounds()) {
    if (name == s.background) bg = rgb;
  }
  Tensor image({size, size, 3});
  for (std::int64_t y = 0; y < size; ++y) {
    for (std::int64_t x = 0; x < size; ++x) {
      const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(size);
      const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(size);
      const double dx = u - s.cx, dy = v - s.cy;
      bool inside = false;
      if (s.shape == "circle") {
        inside = dx * dx + dy * dy <= s.radius * s.radius;
      } else if (s.shape == "square") {
        inside = std::abs(dx) <= s.radius && std::abs(dy) <= s.radius;
      } else {
        inside = std::abs(dx) + std::abs(dy) <= s.radius;
      }
      for (int c = 0; c < 3; ++c) {
        image.at3(y, x, c) =
            static_cast<double>(static_cast<float>(inside ? fg[c] : bg[c]));
      }
    }
  }
  return image;
}

inline std::string stimulus_name(std::int64_t index) {
  std::string digits = std::to_string(index);
  while (digits.size() < 4) digits.insert(digits.begin(), '0');
  return "stim" + digits;
}

// Five word-order paraphrases over one token multiset. Distinct strings,
// same bag of tokens: the per-step caption draw then perturbs hash-based
// text latents not at all, while scene identity still moves them.
inline std::vector<std::string> scene_captions(const Scene& s) {
  const std::string tail = "on a " + s.background + " background";
  return {
      "a " + s.size + " " + s.color + " " + s.shape + " " + tail,
      tail + " a " + s.size + " " + s.color + " " + s.shape,
      "a " + s.color + " " + s.size + " " + s.shape + " " + tail,
      "a " + s.shape + " " + s.size + " " + s.color + " " + tail,
      tail + " a " + s.color + " " + s.shape + " " + s.size,
  };
}

}  // namespace detail

inline SynthResult generate_synthetic_dataset_full(const SynthConfig& config,
                                                   std::uint64_t seed) {
  config.validate();
  SynthResult result;

  // Disjoint ROI masks drawn from a seeded permutation of the whole volume.
  std::int64_t volume_length = 0;
  for (const auto& roi : known_rois()) volume_length += config.voxels_per_roi.at(roi);
  result.volume_length = volume_length;
  std::vector<std::int64_t> perm(static_cast<std::size_t>(volume_length));
  for (std::int64_t i = 0; i < volume_length; ++i) perm[static_cast<std::size_t>(i)] = i;
  Rng mask_rng(derive_seed(seed, "atlas_masks"));
  mask_rng.shuffle(perm);
  std::size_t cursor = 0;
  for (const auto& roi : known_rois()) {
    AtlasMask mask;
    mask.roi_name = roi;
    const auto count = static_cast<std::size_t>(config.voxels_per_roi.at(roi));
    mask.voxel_indices.assign(perm.begin() + static_cast<std::ptrdiff_t>(cursor),
                              perm.begin() + static_cast<std::ptrdiff_t>(cursor + count));
    std::sort(mask.voxel_indices.begin(), mask.voxel_indices.end());
    cursor += count;
    mask.validate(volume_length);
    result.masks.push_back(std::move(mask));
  }

  // Reference plugins provide the ground-truth latents behind the voxels.
  const plugins::HashTextCodec codec({});
  const plugins::PatchStatsImageEncoder image_encoder;
  const plugins::ResampleLatentCodec latent_codec(config.image_size, config.image_size);

  const std::int64_t n_stimuli = config.n_train_stimuli + config.n_test_stimuli;
  struct StimLatents {
    std::vector<double> h_pooled, m_pooled, l_pooled;
  };
  std::vector<StimLatents> latents(static_cast<std::size_t>(n_stimuli));

  const auto h_pool = detail::PooledProjection::make(plugins::kTextLatentDim, config.pooled_dim,
                                                     derive_seed(seed, "pool_h"));
  const auto m_pool = detail::PooledProjection::make(
      plugins::kEmbeddingRows * plugins::kEmbeddingCols, config.pooled_dim,
      derive_seed(seed, "pool_m"));
  const auto l_pool = detail::PooledProjection::make(
      plugins::kLayoutSide * plugins::kLayoutSide * plugins::kLayoutChannels, config.pooled_dim,
      derive_seed(seed, "pool_l"));

  DatasetManifest& manifest = result.manifest;
  for (std::int64_t i = 0; i < n_stimuli; ++i) {
    const auto scene = detail::make_scene(seed, i);
    StimulusRecord stim;
    stim.stimulus_id = detail::stimulus_name(i);
    stim.image = detail::render_scene(scene, config.image_size);
    stim.captions = detail::scene_captions(scene);

    Tensor h_mean({plugins::kTextLatentDim});
    for (const auto& caption : stim.captions) add_inplace(h_mean, codec.encode(caption), 0.2);
    latents[static_cast<std::size_t>(i)].h_pooled = h_pool.apply(h_mean);
    latents[static_cast<std::size_t>(i)].m_pooled = m_pool.apply(image_encoder.encode(stim.image));
    latents[static_cast<std::size_t>(i)].l_pooled = l_pool.apply(latent_codec.encode(stim.image));

    manifest.split[stim.stimulus_id] = i < config.n_train_stimuli ? Split::train : Split::test;
    manifest.stimuli.emplace(stim.stimulus_id, std::move(stim));
  }

  // Fixed dense maps from pooled latents to ROI voxels.
  std::map<std::string, Tensor> roi_maps;
  std::map<std::string, const detail::PooledProjection*> roi_pool = {
      {"ventral", &h_pool}, {"nsdgeneral", &m_pool}, {"early", &l_pool}};
  std::map<std::string, std::size_t> roi_latent = {
      {"ventral", 0}, {"nsdgeneral", 1}, {"early", 2}};
  for (const auto& roi : known_rois()) {
    Rng rng(derive_seed(seed, "roi_map_" + roi));
    Tensor a({config.voxels_per_roi.at(roi), config.pooled_dim});
    for (auto& v : a.data) v = rng.normal() / std::sqrt(static_cast<double>(config.pooled_dim));
    roi_maps.emplace(roi, std::move(a));
  }

  auto make_record = [&](std::int64_t stim_index, std::int64_t trial, std::int64_t session)
      -> FmriRecord {
    FmriRecord rec;
    rec.subject_id = config.subject_id;
    rec.session_id = session;
    rec.trial_id = trial;
    rec.stimulus_id = detail::stimulus_name(stim_index);
    Rng noise_rng(derive_seed(seed, "trial_noise", static_cast<std::uint64_t>(trial)));
    std::vector<float> volume(static_cast<std::size_t>(volume_length), 0.0f);
    const auto& lat = latents[static_cast<std::size_t>(stim_index)];
    for (const auto& mask : result.masks) {
      const Tensor& a = roi_maps.at(mask.roi_name);
      const std::vector<double>* pooled = nullptr;
      if (mask.roi_name == "ventral") pooled = &lat.h_pooled;
      if (mask.roi_name == "nsdgeneral") pooled = &lat.m_pooled;
      if (mask.roi_name == "early") pooled = &lat.l_pooled;
      std::vector<float> roi_values(mask.voxel_indices.size());
      for (std::size_t v = 0; v < roi_values.size(); ++v) {
        double acc = 0.0;
        for (std::int64_t k = 0; k < config.pooled_dim; ++k) {
          acc += a.at2(static_cast<std::int64_t>(v), k) * (*pooled)[static_cast<std::size_t>(k)];
        }
        roi_values[v] = static_cast<float>(config.signal_scale * acc +
                                           config.noise_scale * noise_rng.normal());
      }
      scatter_roi(roi_values, mask, volume);
    }
    for (const auto& mask : result.masks) {
      rec.voxels_by_roi[mask.roi_name] = extract_roi(volume, mask);
    }
    return rec;
  };

  std::int64_t trial = 0;
  for (std::int64_t i = 0; i < config.n_train_stimuli; ++i) {
    manifest.records.push_back(make_record(i, trial, 1 + trial % config.n_sessions));
    ++trial;
  }
  for (std::int64_t i = 0; i < config.n_test_stimuli; ++i) {
    for (std::int64_t r = 0; r < config.test_repeats; ++r) {
      manifest.records.push_back(
          make_record(config.n_train_stimuli + i, trial, 1 + trial % config.n_sessions));
      ++trial;
    }
  }

  manifest.validate();
  return result;
}

inline DatasetManifest generate_synthetic_dataset(const SynthConfig& config, std::uint64_t seed) {
  return generate_synthetic_dataset_full(config, seed).manifest;
}

}  // namespace voxstreams::data
