#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxstreams/image.hpp"
#include "voxstreams/plugins.hpp"
#include "voxstreams/rng.hpp"
#include "voxstreams/serialize.hpp"
#include "voxstreams/tensor.hpp"

// Reconstruction-quality battery: pixelwise correlation, SSIM, feature-space
// two-way identification rates and feature distance metrics, plus the
// report generator.
namespace voxstreams::metrics {

// ---------------------------------------------------------------------------
// Scalar metrics
// ---------------------------------------------------------------------------

namespace detail {

struct CenteredRow {
  std::vector<double> values;  // mean-removed
  double norm = 0.0;
};

inline CenteredRow center(const double* row, std::int64_t n, const char* who) {
  CenteredRow out;
  out.values.resize(static_cast<std::size_t>(n));
  double mean = 0.0;
  for (std::int64_t i = 0; i < n; ++i) mean += row[i];
  mean /= static_cast<double>(n);
  double sq = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double c = row[i] - mean;
    out.values[static_cast<std::size_t>(i)] = c;
    sq += c * c;
  }
  out.norm = std::sqrt(sq);
  check(out.norm > 0.0, std::string(who) + ": zero-variance input (correlation undefined)");
  return out;
}

inline double pearson(const CenteredRow& a, const CenteredRow& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) acc += a.values[i] * b.values[i];
  return acc / (a.norm * b.norm);
}

}  // namespace detail

// Pearson correlation over flattened pixels. Inputs must already share a
// shape; evaluate() resizes to the common evaluation resolution first.
inline double pixcorr(const Tensor& recon, const Tensor& gt) {
  img::require_image(recon, "pixcorr");
  img::require_image(gt, "pixcorr");
  require_same_shape(recon, gt, "pixcorr");
  const auto a = detail::center(recon.data.data(), recon.numel(), "pixcorr");
  const auto b = detail::center(gt.data.data(), gt.numel(), "pixcorr");
  return detail::pearson(a, b);
}

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

// Mean local SSIM on grayscale with a Gaussian window over all fully-valid
// window positions.
inline double ssim(const Tensor& recon, const Tensor& gt, const SsimOptions& opt = {}) {
  img::require_image(recon, "ssim");
  img::require_image(gt, "ssim");
  require_same_shape(recon, gt, "ssim");
  const Tensor x = img::to_gray(recon);
  const Tensor y = img::to_gray(gt);
  const std::int64_t h = x.shape[0], w = x.shape[1], win = opt.window;
  check(h >= win && w >= win, "ssim: image smaller than the " + std::to_string(win) + "x" +
                                  std::to_string(win) + " window");

  std::vector<double> kernel(static_cast<std::size_t>(win));
  {
    double sum = 0.0;
    const double half = static_cast<double>(win - 1) / 2.0;
    for (std::int64_t i = 0; i < win; ++i) {
      const double d = static_cast<double>(i) - half;
      kernel[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * opt.sigma * opt.sigma));
      sum += kernel[static_cast<std::size_t>(i)];
    }
    for (auto& k : kernel) k /= sum;
  }

  // Separable weighted local sums of x, y, x^2, y^2, xy over valid windows.
  const std::int64_t oh = h - win + 1, ow = w - win + 1;
  auto filter = [&](auto&& value_at) {
    // Horizontal pass (h rows x ow cols), then vertical (oh x ow).
    std::vector<double> tmp(static_cast<std::size_t>(h * ow));
    for (std::int64_t r = 0; r < h; ++r) {
      for (std::int64_t c = 0; c < ow; ++c) {
        double acc = 0.0;
        for (std::int64_t k = 0; k < win; ++k) {
          acc += kernel[static_cast<std::size_t>(k)] * value_at(r, c + k);
        }
        tmp[static_cast<std::size_t>(r * ow + c)] = acc;
      }
    }
    std::vector<double> out(static_cast<std::size_t>(oh * ow));
    for (std::int64_t r = 0; r < oh; ++r) {
      for (std::int64_t c = 0; c < ow; ++c) {
        double acc = 0.0;
        for (std::int64_t k = 0; k < win; ++k) {
          acc += kernel[static_cast<std::size_t>(k)] * tmp[static_cast<std::size_t>((r + k) * ow + c)];
        }
        out[static_cast<std::size_t>(r * ow + c)] = acc;
      }
    }
    return out;
  };

  const auto mu_x = filter([&](std::int64_t r, std::int64_t c) { return x.at2(r, c); });
  const auto mu_y = filter([&](std::int64_t r, std::int64_t c) { return y.at2(r, c); });
  const auto xx = filter([&](std::int64_t r, std::int64_t c) { return x.at2(r, c) * x.at2(r, c); });
  const auto yy = filter([&](std::int64_t r, std::int64_t c) { return y.at2(r, c) * y.at2(r, c); });
  const auto xy = filter([&](std::int64_t r, std::int64_t c) { return x.at2(r, c) * y.at2(r, c); });

  const double c1 = (opt.k1 * opt.dynamic_range) * (opt.k1 * opt.dynamic_range);
  const double c2 = (opt.k2 * opt.dynamic_range) * (opt.k2 * opt.dynamic_range);
  double total = 0.0;
  for (std::size_t i = 0; i < mu_x.size(); ++i) {
    const double mx = mu_x[i], my = mu_y[i];
    const double var_x = xx[i] - mx * mx;
    const double var_y = yy[i] - my * my;
    const double cov = xy[i] - mx * my;
    total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) /
             ((mx * mx + my * my + c1) * (var_x + var_y + c2));
  }
  return total / static_cast<double>(mu_x.size());
}

// Percentage of ordered pairs (i, j), i != j, where recon_i correlates
// more with its own gt_i than with the distractor gt_j.
inline double two_way_identification(const Tensor& recon_feats, const Tensor& gt_feats) {
  check(recon_feats.rank() == 2 && gt_feats.rank() == 2, "two_way_identification: (N,D) required");
  require_same_shape(recon_feats, gt_feats, "two_way_identification");
  const std::int64_t n = recon_feats.shape[0], d = recon_feats.shape[1];
  check(n >= 2, "two_way_identification: needs at least 2 pairs");
  std::vector<detail::CenteredRow> r(static_cast<std::size_t>(n)), g(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    r[static_cast<std::size_t>(i)] =
        detail::center(recon_feats.data.data() + i * d, d, "two_way_identification");
    g[static_cast<std::size_t>(i)] =
        detail::center(gt_feats.data.data() + i * d, d, "two_way_identification");
  }
  std::int64_t successes = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double own = detail::pearson(r[static_cast<std::size_t>(i)], g[static_cast<std::size_t>(i)]);
    for (std::int64_t j = 0; j < n; ++j) {
      if (i == j) continue;
      if (own > detail::pearson(r[static_cast<std::size_t>(i)], g[static_cast<std::size_t>(j)])) {
        ++successes;
      }
    }
  }
  return 100.0 * static_cast<double>(successes) / static_cast<double>(n * (n - 1));
}

enum class DistanceKind { correlation, cosine, euclidean };

inline DistanceKind distance_kind_from_string(const std::string& s) {
  if (s == "correlation") return DistanceKind::correlation;
  if (s == "cosine") return DistanceKind::cosine;
  if (s == "euclidean") return DistanceKind::euclidean;
  throw ValidationError("unknown distance kind '" + s + "'");
}

inline std::string to_string(DistanceKind k) {
  switch (k) {
    case DistanceKind::correlation: return "correlation";
    case DistanceKind::cosine: return "cosine";
    default: return "euclidean";
  }
}

// Mean over aligned rows of the selected distance (default: 1 - Pearson).
inline double feature_distance(const Tensor& recon_feats, const Tensor& gt_feats,
                               DistanceKind kind = DistanceKind::correlation) {
  check(recon_feats.rank() == 2 && gt_feats.rank() == 2, "feature_distance: (N,D) required");
  require_same_shape(recon_feats, gt_feats, "feature_distance");
  const std::int64_t n = recon_feats.shape[0], d = recon_feats.shape[1];
  check(n >= 1, "feature_distance: empty feature set");
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double* a = recon_feats.data.data() + i * d;
    const double* b = gt_feats.data.data() + i * d;
    if (kind == DistanceKind::correlation) {
      total += 1.0 - detail::pearson(detail::center(a, d, "feature_distance"),
                                     detail::center(b, d, "feature_distance"));
    } else if (kind == DistanceKind::cosine) {
      double ab = 0.0, aa = 0.0, bb = 0.0;
      for (std::int64_t k = 0; k < d; ++k) {
        ab += a[k] * b[k];
        aa += a[k] * a[k];
        bb += b[k] * b[k];
      }
      check(aa > 0.0 && bb > 0.0, "feature_distance: zero-norm row");
      total += 1.0 - ab / std::sqrt(aa * bb);
    } else {
      double sq = 0.0;
      for (std::int64_t k = 0; k < d; ++k) sq += (a[k] - b[k]) * (a[k] - b[k]);
      total += std::sqrt(sq);
    }
  }
  return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

// Published full-scale reference results, rendered in the report footer for
// context. Desk-scale runs are not expected to approach them.
inline const std::map<std::string, double>& published_reference_row() {
  static const std::map<std::string, double> row = {
      {"pixcorr", 0.342}, {"ssim", 0.365}, {"alex2", 94.7}, {"alex5", 97.0},
      {"incep", 94.0},    {"clip", 95.2},  {"eff", 0.651},  {"swav", 0.357},
  };
  return row;
}

struct MetricReport {
  double pixcorr = 0.0;
  double ssim = 0.0;
  std::map<std::string, double> twoway;  // extractor name -> percentage
  std::map<std::string, double> dist;    // extractor name -> distance
  std::int64_t n_pairs = 0;
  std::string config_digest;

  void validate() const {
    check(std::isfinite(pixcorr) && pixcorr >= -1.0 - 1e-12 && pixcorr <= 1.0 + 1e-12,
          "MetricReport: pixcorr out of range");
    check(std::isfinite(ssim) && ssim >= -1.0 - 1e-12 && ssim <= 1.0 + 1e-12,
          "MetricReport: ssim out of range");
    for (const auto& [name, v] : twoway) {
      check(std::isfinite(v) && v >= 0.0 && v <= 100.0,
            "MetricReport: two-way rate out of [0,100] for " + name);
    }
    for (const auto& [name, v] : dist) {
      check(std::isfinite(v), "MetricReport: non-finite distance for " + name);
    }
  }

  nlohmann::json to_json() const {
    return {{"pixcorr", pixcorr}, {"ssim", ssim},       {"twoway", twoway},
            {"dist", dist},       {"n_pairs", n_pairs}, {"config_digest", config_digest}};
  }

  static MetricReport from_json(const nlohmann::json& j) {
    MetricReport r;
    r.pixcorr = j.at("pixcorr").get<double>();
    r.ssim = j.at("ssim").get<double>();
    r.twoway = j.at("twoway").get<std::map<std::string, double>>();
    r.dist = j.at("dist").get<std::map<std::string, double>>();
    r.n_pairs = j.at("n_pairs").get<std::int64_t>();
    r.config_digest = j.at("config_digest").get<std::string>();
    return r;
  }

  // Fixed column order matching the conventional reporting layout, with the
  // published full-scale reference row as a comparison footer.
  std::string render_table(const std::string& label = "this run") const {
    static const std::vector<std::pair<std::string, std::string>> columns = {
        {"alex2", "Alex(2)"}, {"alex5", "Alex(5)"}, {"incep", "Incep"},
        {"clip", "CLIP"},     {"eff", "Eff"},       {"swav", "SwAV"},
    };
    std::ostringstream os;
    os << std::left << std::setw(28) << "Method" << std::right << std::setw(9) << "PixCorr"
       << std::setw(8) << "SSIM";
    for (const auto& [key, header] : columns) {
      (void)key;
      os << std::setw(9) << header;
    }
    os << "\n";
    auto row = [&](const std::string& name, double pc, double ss,
                   const std::map<std::string, double>& tw,
                   const std::map<std::string, double>& ds) {
      os << std::left << std::setw(28) << name << std::right << std::fixed << std::setprecision(3)
         << std::setw(9) << pc << std::setw(8) << ss;
      for (const auto& [key, header] : columns) {
        (void)header;
        if (tw.count(key)) {
          os << std::setprecision(1) << std::setw(8) << tw.at(key) << "%";
        } else if (ds.count(key)) {
          os << std::setprecision(3) << std::setw(9) << ds.at(key);
        } else {
          os << std::setw(9) << "-";
        }
      }
      os << "\n";
    };
    row(label, pixcorr, ssim, twoway, dist);
    const auto& ref = published_reference_row();
    row("reference (full scale)", ref.at("pixcorr"), ref.at("ssim"),
        {{"alex2", ref.at("alex2")},
         {"alex5", ref.at("alex5")},
         {"incep", ref.at("incep")},
         {"clip", ref.at("clip")}},
        {{"eff", ref.at("eff")}, {"swav", ref.at("swav")}});
    return os.str();
  }
};

struct EvaluateOptions {
  std::int64_t eval_resolution = 425;  // common resize before PixCorr/SSIM
  DistanceKind distance = DistanceKind::correlation;
  SsimOptions ssim_options;
};

// Full battery over aligned reconstruction/ground-truth sets. Feature
// extraction is per-extractor; PixCorr/SSIM average per-pair values at the
// common evaluation resolution.
inline MetricReport evaluate(
    const std::vector<Tensor>& recon_set, const std::vector<Tensor>& gt_set,
    const std::vector<const plugins::FeatureExtractor*>& twoway_extractors,
    const std::vector<const plugins::FeatureExtractor*>& distance_extractors,
    const EvaluateOptions& opts = {}) {
  check(recon_set.size() == gt_set.size(),
        "evaluate: set size mismatch (" + std::to_string(recon_set.size()) + " vs " +
            std::to_string(gt_set.size()) + ")");
  check(recon_set.size() >= 2, "evaluate: need at least 2 aligned pairs");

  MetricReport report;
  report.n_pairs = static_cast<std::int64_t>(recon_set.size());

  double pc = 0.0, ss = 0.0;
  for (std::size_t i = 0; i < recon_set.size(); ++i) {
    const Tensor r = img::resize_bilinear(recon_set[i], opts.eval_resolution, opts.eval_resolution);
    const Tensor g = img::resize_bilinear(gt_set[i], opts.eval_resolution, opts.eval_resolution);
    pc += pixcorr(r, g);
    ss += ssim(r, g, opts.ssim_options);
  }
  report.pixcorr = pc / static_cast<double>(recon_set.size());
  report.ssim = ss / static_cast<double>(recon_set.size());

  auto feature_matrix = [&](const plugins::FeatureExtractor& ex, const std::vector<Tensor>& set) {
    const Tensor first = ex.features(set.front());
    Tensor m({static_cast<std::int64_t>(set.size()), first.numel()});
    for (std::size_t i = 0; i < set.size(); ++i) {
      const Tensor f = i == 0 ? first : ex.features(set[i]);
      check(f.numel() == first.numel(), "evaluate: extractor output length changed");
      for (std::int64_t j = 0; j < f.numel(); ++j) {
        m.at2(static_cast<std::int64_t>(i), j) = f[j];
      }
    }
    return m;
  };

  nlohmann::json digest_src = {{"resolution", opts.eval_resolution},
                               {"distance", to_string(opts.distance)},
                               {"n_pairs", report.n_pairs}};
  for (const auto* ex : twoway_extractors) {
    report.twoway[ex->name()] =
        two_way_identification(feature_matrix(*ex, recon_set), feature_matrix(*ex, gt_set));
    digest_src["twoway"].push_back(ex->name());
  }
  for (const auto* ex : distance_extractors) {
    report.dist[ex->name()] =
        feature_distance(feature_matrix(*ex, recon_set), feature_matrix(*ex, gt_set),
                         opts.distance);
    digest_src["dist"].push_back(ex->name());
  }
  report.config_digest = serialize::hex_digest(fnv1a64(digest_src.dump()));
  report.validate();
  return report;
}

}  // namespace voxstreams::metrics
