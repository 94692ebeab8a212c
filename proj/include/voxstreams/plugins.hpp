#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxstreams/image.hpp"
#include "voxstreams/nn.hpp"
#include "voxstreams/rng.hpp"
#include "voxstreams/tensor.hpp"

// Plugin boundaries for the pretrained models this pipeline drives: text
// autoencoder, caption refiner, image-embedding encoder, latent autoencoder,
// distillation teacher, generator, metric feature extractors. Adapters to
// real model weights live out of tree; each interface ships a deterministic
// reference stub so the full pipeline runs and is testable at desk scale.
namespace voxstreams::plugins {

inline constexpr std::int64_t kTextLatentDim = 768;
inline constexpr std::int64_t kEmbeddingRows = 257;
inline constexpr std::int64_t kEmbeddingCols = 768;
inline constexpr std::int64_t kLayoutSide = 64;
inline constexpr std::int64_t kLayoutChannels = 4;

inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : text) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    } else if (!cur.empty()) {
      tokens.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(cur);
  return tokens;
}

// ---------------------------------------------------------------------------
// Interfaces
// ---------------------------------------------------------------------------

class TextCodec {
 public:
  virtual ~TextCodec() = default;
  // Deterministic caption -> 768-d latent.
  virtual Tensor encode(const std::string& caption) const = 0;
  // Stochastic latent -> caption; deterministic given the seed.
  virtual std::string decode(const Tensor& latent, std::uint64_t seed) const = 0;
};

class CaptionRefiner {
 public:
  virtual ~CaptionRefiner() = default;
  // Candidate captions -> one caption; nonempty output for nonempty input.
  virtual std::string refine(const std::vector<std::string>& candidates) const = 0;
};

class ImageEncoder {
 public:
  virtual ~ImageEncoder() = default;
  // (H,W,3) image -> (257,768) embedding; the encoder interpolates its
  // input to 512x512 before encoding.
  virtual Tensor encode(const Tensor& image) const = 0;
};

class LatentCodec {
 public:
  virtual ~LatentCodec() = default;
  virtual Tensor encode(const Tensor& image) const = 0;   // -> (64,64,4)
  virtual Tensor decode(const Tensor& latent) const = 0;  // -> (H,W,3)
  // Adjoint of decode as a linear map, needed to train through the decoder.
  // Adapters without gradients may leave this unimplemented; training with
  // an auxiliary image-space loss then rejects them up front.
  virtual Tensor decode_vjp(const Tensor& latent, const Tensor& grad_image) const {
    (void)latent;
    (void)grad_image;
    throw RuntimeError("LatentCodec: decode_vjp not supported by this plugin");
  }
};

class FeatureTeacher {
 public:
  virtual ~FeatureTeacher() = default;
  virtual Tensor features(const Tensor& image) const = 0;  // -> flat feature vector
  virtual Tensor features_vjp(const Tensor& image, const Tensor& grad_features) const {
    (void)image;
    (void)grad_features;
    throw RuntimeError("FeatureTeacher: features_vjp not supported by this plugin");
  }
  // Free-form provenance of the teacher weights (e.g. training recipe
  // settings of an external model). Recorded into run metadata.
  virtual nlohmann::json metadata() const { return nlohmann::json::object(); }
};

struct GuidanceBundle {
  std::optional<std::string> caption;
  std::optional<Tensor> image_embedding;  // (257,768)
  std::optional<Tensor> layout_image;     // (H,W,3)
  bool high = false;
  bool mid = false;
  bool low = false;

  void validate() const {
    check(high || mid || low, "GuidanceBundle: at least one guidance level must be enabled");
    if (high) check(caption.has_value(), "GuidanceBundle: high level enabled without caption");
    if (mid) {
      check(image_embedding.has_value(), "GuidanceBundle: mid level enabled without embedding");
      check(image_embedding->rank() == 2 && image_embedding->shape[0] == kEmbeddingRows &&
                image_embedding->shape[1] == kEmbeddingCols,
            "GuidanceBundle: embedding must be (257,768)");
    }
    if (low) {
      check(layout_image.has_value(), "GuidanceBundle: low level enabled without layout image");
      img::require_image(*layout_image, "GuidanceBundle");
    }
  }
};

class Generator {
 public:
  virtual ~Generator() = default;
  // Deterministic given the seed. When the low level is enabled, generation
  // starts from the layout image and strength controls the departure from
  // it; without the low level it starts from seeded noise.
  virtual Tensor generate(const GuidanceBundle& bundle, double strength, int steps,
                          std::uint64_t seed) const = 0;
};

class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual const std::string& name() const = 0;
  virtual Tensor features(const Tensor& image) const = 0;  // fixed-length flat vector
};

// ---------------------------------------------------------------------------
// Reference stub: text codec (seeded hash embeddings + nearest-neighbor
// vocabulary decoding).
// ---------------------------------------------------------------------------

class HashTextCodec : public TextCodec {
 public:
  explicit HashTextCodec(std::vector<std::string> vocabulary, double decode_noise_scale = 0.25,
                         std::uint64_t seed = 0x7e57c0dec0ffee11ull)
      : vocabulary_(std::move(vocabulary)), decode_noise_scale_(decode_noise_scale), seed_(seed) {
    vocab_embeddings_.reserve(vocabulary_.size());
    for (const auto& caption : vocabulary_) vocab_embeddings_.push_back(embed(caption));
  }

  Tensor encode(const std::string& caption) const override {
    ++encode_calls;
    return embed(caption);
  }

  std::string decode(const Tensor& latent, std::uint64_t seed) const override {
    ++decode_calls;
    check(!vocabulary_.empty(), "HashTextCodec: empty vocabulary");
    check(latent.numel() == kTextLatentDim, "HashTextCodec: latent must be 768-d");
    Rng rng(derive_seed(seed, "codec_decode"));
    Tensor probe = latent;
    // decode_noise_scale_ is the expected norm of the whole perturbation,
    // sized against unit-norm embeddings.
    const double sigma = decode_noise_scale_ / std::sqrt(static_cast<double>(kTextLatentDim));
    for (auto& v : probe.data) v += sigma * rng.normal();
    const double probe_norm = std::max(l2_norm(probe), 1e-30);
    std::size_t best = 0;
    double best_cos = -2.0;
    for (std::size_t i = 0; i < vocab_embeddings_.size(); ++i) {
      const double c = dot(probe, vocab_embeddings_[i]) / probe_norm;
      if (c > best_cos) {
        best_cos = c;
        best = i;
      }
    }
    return vocabulary_[best];
  }

  const std::vector<std::string>& vocabulary() const { return vocabulary_; }

  mutable std::size_t encode_calls = 0;
  mutable std::size_t decode_calls = 0;

 private:
  Tensor embed(const std::string& caption) const {
    auto tokens = tokenize(caption);
    if (tokens.empty()) tokens.push_back("<empty>");
    Tensor v({kTextLatentDim});
    for (const auto& token : tokens) {
      Rng rng(derive_seed(seed_, "token_vec", fnv1a64(token)));
      for (auto& x : v.data) x += rng.normal();
    }
    const double norm = l2_norm(v);
    if (norm > 0.0) scale_inplace(v, 1.0 / norm);
    return v;
  }

  std::vector<std::string> vocabulary_;
  std::vector<Tensor> vocab_embeddings_;
  double decode_noise_scale_;
  std::uint64_t seed_;
};

// ---------------------------------------------------------------------------
// Reference stub: caption refiner (position-wise majority-token consensus;
// invariant under permutation of the candidates).
// ---------------------------------------------------------------------------

class ConsensusCaptionRefiner : public CaptionRefiner {
 public:
  std::string refine(const std::vector<std::string>& candidates) const override {
    ++refine_calls;
    check(!candidates.empty(), "ConsensusCaptionRefiner: empty candidate list");
    // A unanimous candidate set passes through verbatim.
    bool all_equal = true;
    for (const auto& c : candidates) all_equal = all_equal && c == candidates.front();
    if (all_equal) {
      check(!candidates.front().empty(), "ConsensusCaptionRefiner: empty caption");
      return candidates.front();
    }
    std::vector<std::vector<std::string>> token_lists;
    token_lists.reserve(candidates.size());
    for (const auto& c : candidates) token_lists.push_back(tokenize(c));

    // Consensus length: most frequent token count, ties to the shortest.
    std::map<std::size_t, std::size_t> length_votes;
    for (const auto& t : token_lists) ++length_votes[t.size()];
    std::size_t length = 0, best_votes = 0;
    for (const auto& [len, votes] : length_votes) {
      if (votes > best_votes) {
        best_votes = votes;
        length = len;
      }
    }

    std::string out;
    for (std::size_t k = 0; k < length; ++k) {
      std::map<std::string, std::size_t> votes;
      for (const auto& t : token_lists) {
        if (k < t.size()) ++votes[t[k]];
      }
      if (votes.empty()) break;
      // std::map iteration is lexicographic, so ties resolve deterministically.
      const std::string* winner = nullptr;
      std::size_t top = 0;
      for (const auto& [token, n] : votes) {
        if (n > top) {
          top = n;
          winner = &token;
        }
      }
      if (!out.empty()) out.push_back(' ');
      out += *winner;
    }
    if (out.empty()) out = candidates.front();
    check(!out.empty(), "ConsensusCaptionRefiner: produced empty caption");
    return out;
  }

  mutable std::size_t refine_calls = 0;
};

// ---------------------------------------------------------------------------
// Reference stub: image encoder (bilinear 512x512 interpolation, then
// per-patch statistics pushed through a fixed seeded projection).
// ---------------------------------------------------------------------------

class PatchStatsImageEncoder : public ImageEncoder {
 public:
  explicit PatchStatsImageEncoder(std::uint64_t seed = 0x9a7c4e11d2b30657ull)
      : proj_({kStatDim, kEmbeddingCols}), positional_({kEmbeddingRows, kEmbeddingCols}) {
    Rng rng(derive_seed(seed, "patch_encoder"));
    for (auto& v : proj_.data) v = rng.normal() / std::sqrt(static_cast<double>(kStatDim));
    for (auto& v : positional_.data) v = 0.1 * rng.normal();
  }

  Tensor encode(const Tensor& image) const override {
    ++encode_calls;
    img::require_image(image, "PatchStatsImageEncoder");
    const Tensor resized = img::resize_bilinear(image, 512, 512);
    Tensor out({kEmbeddingRows, kEmbeddingCols});
    // Row 0: whole-image statistics. Rows 1..256: 16x16 grid of 32x32 patches.
    write_row(out, 0, stats(resized, 0, 0, 512, 512));
    for (std::int64_t py = 0; py < 16; ++py) {
      for (std::int64_t px = 0; px < 16; ++px) {
        write_row(out, 1 + py * 16 + px, stats(resized, py * 32, px * 32, 32, 32));
      }
    }
    return out;
  }

  mutable std::size_t encode_calls = 0;

 private:
  static constexpr std::int64_t kStatDim = 8;

  std::vector<double> stats(const Tensor& image, std::int64_t y0, std::int64_t x0, std::int64_t h,
                            std::int64_t w) const {
    double mean[3] = {0, 0, 0};
    double lo = 1e300, hi = -1e300;
    for (std::int64_t y = y0; y < y0 + h; ++y) {
      for (std::int64_t x = x0; x < x0 + w; ++x) {
        double gray = 0.0;
        for (int c = 0; c < 3; ++c) {
          const double v = image.at3(y, x, c);
          mean[c] += v;
          gray += v;
        }
        lo = std::min(lo, gray / 3.0);
        hi = std::max(hi, gray / 3.0);
      }
    }
    const double inv_n = 1.0 / static_cast<double>(h * w);
    for (double& m : mean) m *= inv_n;
    double var = 0.0, grad_x = 0.0, grad_y = 0.0;
    for (std::int64_t y = y0; y < y0 + h; ++y) {
      for (std::int64_t x = x0; x < x0 + w; ++x) {
        const double gray =
            (image.at3(y, x, 0) + image.at3(y, x, 1) + image.at3(y, x, 2)) / 3.0;
        const double gm = (mean[0] + mean[1] + mean[2]) / 3.0;
        var += (gray - gm) * (gray - gm);
        if (x + 1 < x0 + w) {
          grad_x += std::abs((image.at3(y, x + 1, 0) + image.at3(y, x + 1, 1) +
                              image.at3(y, x + 1, 2)) /
                                 3.0 -
                             gray);
        }
        if (y + 1 < y0 + h) {
          grad_y += std::abs((image.at3(y + 1, x, 0) + image.at3(y + 1, x, 1) +
                              image.at3(y + 1, x, 2)) /
                                 3.0 -
                             gray);
        }
      }
    }
    return {mean[0], mean[1], mean[2], std::sqrt(var * inv_n), grad_x * inv_n, grad_y * inv_n,
            lo, hi};
  }

  void write_row(Tensor& out, std::int64_t row, const std::vector<double>& s) const {
    for (std::int64_t j = 0; j < kEmbeddingCols; ++j) {
      double acc = positional_.at2(row, j);
      for (std::int64_t i = 0; i < kStatDim; ++i) {
        acc += s[static_cast<std::size_t>(i)] * proj_.at2(i, j);
      }
      out.at2(row, j) = acc;
    }
  }

  Tensor proj_;
  Tensor positional_;
};

// ---------------------------------------------------------------------------
// Reference stub: latent codec. encode = bilinear downsample to a 64x64 RGB
// + luma stack; decode = bilinear upsample of the RGB channels. Both linear,
// so decode has an exact adjoint and decode(encode(x)) is a fixed blur.
// ---------------------------------------------------------------------------

class ResampleLatentCodec : public LatentCodec {
 public:
  ResampleLatentCodec(std::int64_t image_h = 64, std::int64_t image_w = 64)
      : image_h_(image_h), image_w_(image_w) {}

  Tensor encode(const Tensor& image) const override {
    ++encode_calls;
    img::require_image(image, "ResampleLatentCodec::encode");
    const Tensor small = img::resize_bilinear(image, kLayoutSide, kLayoutSide);
    Tensor latent({kLayoutSide, kLayoutSide, kLayoutChannels});
    for (std::int64_t y = 0; y < kLayoutSide; ++y) {
      for (std::int64_t x = 0; x < kLayoutSide; ++x) {
        for (int c = 0; c < 3; ++c) latent.at3(y, x, c) = small.at3(y, x, c);
        latent.at3(y, x, 3) = 0.299 * small.at3(y, x, 0) + 0.587 * small.at3(y, x, 1) +
                              0.114 * small.at3(y, x, 2);
      }
    }
    return latent;
  }

  Tensor decode(const Tensor& latent) const override {
    ++decode_calls;
    require_latent(latent);
    Tensor rgb({kLayoutSide, kLayoutSide, 3});
    for (std::int64_t y = 0; y < kLayoutSide; ++y) {
      for (std::int64_t x = 0; x < kLayoutSide; ++x) {
        for (int c = 0; c < 3; ++c) rgb.at3(y, x, c) = latent.at3(y, x, c);
      }
    }
    return img::resize_bilinear(rgb, image_h_, image_w_);
  }

  Tensor decode_vjp(const Tensor& latent, const Tensor& grad_image) const override {
    require_latent(latent);
    const Tensor grad_rgb = img::resize_bilinear_adjoint(grad_image, kLayoutSide, kLayoutSide);
    Tensor grad_latent({kLayoutSide, kLayoutSide, kLayoutChannels});
    for (std::int64_t y = 0; y < kLayoutSide; ++y) {
      for (std::int64_t x = 0; x < kLayoutSide; ++x) {
        for (int c = 0; c < 3; ++c) grad_latent.at3(y, x, c) = grad_rgb.at3(y, x, c);
      }
    }
    return grad_latent;
  }

  std::int64_t image_height() const { return image_h_; }
  std::int64_t image_width() const { return image_w_; }

  mutable std::size_t encode_calls = 0;
  mutable std::size_t decode_calls = 0;

 private:
  static void require_latent(const Tensor& latent) {
    check(latent.rank() == 3 && latent.shape[0] == kLayoutSide && latent.shape[1] == kLayoutSide &&
              latent.shape[2] == kLayoutChannels,
          "ResampleLatentCodec: latent must be (64,64,4)");
  }

  std::int64_t image_h_, image_w_;
};

// ---------------------------------------------------------------------------
// Reference stub: distillation teacher (fixed seeded convolutional features
// over a 64x64 resample; differentiable for training through it).
// ---------------------------------------------------------------------------

class RandomConvFeatureTeacher : public FeatureTeacher {
 public:
  explicit RandomConvFeatureTeacher(std::uint64_t seed = 0xfeedd15711e60b21ull) {
    Rng rng(derive_seed(seed, "teacher_init"));
    conv0_ = nn::Conv2d(3, 8, 3, rng);
    conv1_ = nn::Conv2d(8, 8, 3, rng);
  }

  Tensor features(const Tensor& image) const override {
    ++feature_calls;
    return run(image);
  }

  Tensor features_vjp(const Tensor& image, const Tensor& grad_features) const override {
    run(image);  // repopulate layer caches for this input
    Tensor g = grad_features.reshaped({16, 16, 8});
    g = pool1_.backward(g);
    g = conv1_.backward(act1_.backward(g));
    g = pool0_.backward(g);
    g = conv0_.backward(act0_.backward(g));
    return img::resize_bilinear_adjoint(g.reshaped({64, 64, 3}), image.shape[0], image.shape[1]);
  }

  nlohmann::json metadata() const override {
    return {{"kind", "reference-stub"}, {"features", "seeded-random-conv"}, {"dim", 2048}};
  }

  mutable std::size_t feature_calls = 0;

 private:
  Tensor run(const Tensor& image) const {
    img::require_image(image, "RandomConvFeatureTeacher");
    Tensor h = img::resize_bilinear(image, 64, 64);
    h = pool0_.forward(act0_.forward(conv0_.forward(h)));
    h = pool1_.forward(act1_.forward(conv1_.forward(h)));
    return h.reshaped({16 * 16 * 8});
  }

  mutable nn::Conv2d conv0_, conv1_;
  mutable nn::Gelu act0_, act1_;
  mutable nn::AvgPool2x pool0_, pool1_;
};

// ---------------------------------------------------------------------------
// Reference stub: generator. Deterministic compositor blending the layout
// image with a caption-keyed color field and an embedding-projected texture.
// Fixed channel weights keep every enabled level visible in the output, so
// guidance-subset ablations remain distinguishable.
// ---------------------------------------------------------------------------

class CompositorGenerator : public Generator {
 public:
  CompositorGenerator(std::int64_t out_h = 64, std::int64_t out_w = 64,
                      std::uint64_t seed = 0x6e6e7a2090c0de42ull)
      : out_h_(out_h), out_w_(out_w), seed_(seed) {}

  Tensor generate(const GuidanceBundle& bundle, double strength, int steps,
                  std::uint64_t seed) const override {
    (void)steps;  // the compositor has no iterative refinement
    ++generate_calls;
    bundle.validate();
    check(strength >= 0.0 && strength <= 1.0, "CompositorGenerator: strength out of [0,1]");

    Tensor composite({out_h_, out_w_, 3});
    double total_weight = 0.0;
    Tensor layout;
    if (bundle.low) {
      layout = img::resize_bilinear(*bundle.layout_image, out_h_, out_w_);
      add_inplace(composite, layout, kLowWeight);
      total_weight += kLowWeight;
    }
    if (bundle.mid) {
      add_inplace(composite, embedding_texture(*bundle.image_embedding), kMidWeight);
      total_weight += kMidWeight;
    }
    if (bundle.high) {
      add_inplace(composite, caption_field(*bundle.caption), kHighWeight);
      total_weight += kHighWeight;
    }
    scale_inplace(composite, 1.0 / total_weight);

    Rng rng(derive_seed(seed, "generator_noise"));
    Tensor styled({out_h_, out_w_, 3});
    for (std::size_t i = 0; i < styled.data.size(); ++i) {
      styled.data[i] = 0.85 * composite.data[i] + 0.15 * rng.uniform();
    }

    if (bundle.low) {
      Tensor out({out_h_, out_w_, 3});
      for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = (1.0 - strength) * layout.data[i] + strength * styled.data[i];
      }
      return img::clamp01(std::move(out));
    }
    return img::clamp01(std::move(styled));
  }

  mutable std::size_t generate_calls = 0;

 private:
  static constexpr double kLowWeight = 0.5;
  static constexpr double kMidWeight = 0.3;
  static constexpr double kHighWeight = 0.2;

  Tensor caption_field(const std::string& caption) const {
    const std::uint64_t h = fnv1a64(caption);
    Rng rng(derive_seed(seed_ ^ h, "caption_field"));
    double c0[3], c1[3];
    for (double& v : c0) v = rng.uniform();
    for (double& v : c1) v = rng.uniform();
    const double fx = 1.0 + static_cast<double>(rng.uniform_int(4));
    const double fy = 1.0 + static_cast<double>(rng.uniform_int(4));
    Tensor field({out_h_, out_w_, 3});
    for (std::int64_t y = 0; y < out_h_; ++y) {
      for (std::int64_t x = 0; x < out_w_; ++x) {
        const double phase =
            fx * static_cast<double>(x) / static_cast<double>(out_w_) +
            fy * static_cast<double>(y) / static_cast<double>(out_h_);
        const double mix = 0.5 + 0.5 * std::sin(2.0 * 3.14159265358979323846 * phase);
        for (int c = 0; c < 3; ++c) field.at3(y, x, c) = (1.0 - mix) * c0[c] + mix * c1[c];
      }
    }
    return field;
  }

  Tensor embedding_texture(const Tensor& embedding) const {
    // Sparse seeded projection of the 257x768 embedding to a 16x16 RGB tile.
    Tensor tile({16, 16, 3});
    const std::int64_t flat = embedding.numel();
    double lo = 1e300, hi = -1e300;
    for (std::int64_t i = 0; i < tile.numel(); ++i) {
      Rng rng(derive_seed(seed_, "embed_texture", static_cast<std::uint64_t>(i)));
      double acc = 0.0;
      for (int k = 0; k < 64; ++k) {
        const auto idx = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(flat)));
        acc += (rng.uniform() < 0.5 ? 1.0 : -1.0) * embedding[idx];
      }
      tile[i] = acc;
      lo = std::min(lo, acc);
      hi = std::max(hi, acc);
    }
    if (hi - lo < 1e-12) {
      for (auto& v : tile.data) v = 0.5;
    } else {
      for (auto& v : tile.data) v = (v - lo) / (hi - lo);
    }
    return img::resize_bilinear(tile, out_h_, out_w_);
  }

  std::int64_t out_h_, out_w_;
  std::uint64_t seed_;
};

// ---------------------------------------------------------------------------
// Reference stub: metric feature extractor (random projection of a 32x32
// resample; one fixed projection per extractor name).
// ---------------------------------------------------------------------------

class RandomProjectionExtractor : public FeatureExtractor {
 public:
  explicit RandomProjectionExtractor(std::string name, std::int64_t out_dim = 256)
      : name_(std::move(name)), proj_({kInputDim, out_dim}) {
    Rng rng(derive_seed(fnv1a64(name_), "feature_extractor"));
    for (auto& v : proj_.data) v = rng.normal() / std::sqrt(static_cast<double>(kInputDim));
  }

  const std::string& name() const override { return name_; }

  Tensor features(const Tensor& image) const override {
    img::require_image(image, "RandomProjectionExtractor");
    const Tensor small = img::resize_bilinear(image, 32, 32);
    return matmul(small.reshaped({1, kInputDim}), proj_).reshaped({proj_.shape[1]});
  }

 private:
  static constexpr std::int64_t kInputDim = 32 * 32 * 3;

  std::string name_;
  Tensor proj_;
};

inline std::vector<std::unique_ptr<FeatureExtractor>> make_reference_extractors(
    const std::vector<std::string>& names) {
  std::vector<std::unique_ptr<FeatureExtractor>> out;
  out.reserve(names.size());
  for (const auto& n : names) out.push_back(std::make_unique<RandomProjectionExtractor>(n));
  return out;
}

}  // namespace voxstreams::plugins
