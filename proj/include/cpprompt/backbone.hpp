#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cpprompt/io.hpp"
#include "cpprompt/ops.hpp"

namespace cpprompt {

/// Hyperparameters of the desk-scale dual encoder.
struct BackboneConfig {
  std::size_t dim = 64;
  std::size_t vision_layers = 4;
  std::size_t text_layers = 2;
  std::size_t heads = 4;
  std::size_t image_size = 16;
  std::size_t channels = 1;
  std::size_t patch = 4;
  std::size_t vocab = 32;
  std::size_t classes = 5;
  std::size_t label_tokens = 2;  ///< tokens per class name
  std::size_t mlp_ratio = 4;
  double ln_eps = 1e-5;
  double max_logit_scale = 100.0;

  std::size_t patches() const { return (image_size / patch) * (image_size / patch); }
  std::size_t patch_width() const { return patch * patch * channels; }

  void validate() const {
    if (dim == 0 || heads == 0 || dim % heads != 0) throw ConfigError("backbone: dim must be a positive multiple of heads");
    if (patch == 0 || image_size % patch != 0) {
      throw ConfigError("backbone: image size " + std::to_string(image_size) + " not divisible by patch " +
                        std::to_string(patch));
    }
    if (vision_layers == 0 || text_layers == 0) throw ConfigError("backbone: need at least one layer per tower");
    if (classes < 2) throw ConfigError("backbone: need at least 2 classes");
    if (label_tokens == 0) throw ConfigError("backbone: class names need at least one token");
    if (classes * label_tokens >= vocab) throw ConfigError("backbone: vocabulary too small for the class names");
  }
};

/// Weights of one pre-layer-norm transformer block.
struct TransformerLayer {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gain, ln2_bias;
  Tensor w1, b1, w2, b2;

  template <typename Rng>
  static TransformerLayer init(std::size_t d, std::size_t hidden, std::size_t depth, Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    const double s_out = s / std::sqrt(2.0 * static_cast<double>(depth));
    const double s_mlp_out = 1.0 / std::sqrt(static_cast<double>(hidden)) / std::sqrt(2.0 * static_cast<double>(depth));
    TransformerLayer l;
    l.ln1_gain = Tensor::from({d}, std::vector<double>(d, 1.0));
    l.ln1_bias = Tensor::zeros({d});
    l.wq = Tensor::randn({d, d}, s, rng);
    l.bq = Tensor::zeros({d});
    l.wk = Tensor::randn({d, d}, s, rng);
    l.bk = Tensor::zeros({d});
    l.wv = Tensor::randn({d, d}, s, rng);
    l.bv = Tensor::zeros({d});
    l.wo = Tensor::randn({d, d}, s_out, rng);
    l.bo = Tensor::zeros({d});
    l.ln2_gain = Tensor::from({d}, std::vector<double>(d, 1.0));
    l.ln2_bias = Tensor::zeros({d});
    l.w1 = Tensor::randn({d, hidden}, s, rng);
    l.b1 = Tensor::zeros({hidden});
    l.w2 = Tensor::randn({hidden, d}, s_mlp_out, rng);
    l.b2 = Tensor::zeros({d});
    return l;
  }

  void append_named(const std::string& prefix, std::vector<NamedTensor>& out) const {
    for (const auto& [name, t] : std::initializer_list<std::pair<const char*, const Tensor&>>{
             {"ln1_gain", ln1_gain}, {"ln1_bias", ln1_bias}, {"wq", wq}, {"bq", bq}, {"wk", wk}, {"bk", bk},
             {"wv", wv}, {"bv", bv}, {"wo", wo}, {"bo", bo}, {"ln2_gain", ln2_gain}, {"ln2_bias", ln2_bias},
             {"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}})
      out.push_back({prefix + name, t});
  }
};

struct VisionEncoderParams {
  Tensor patch_projection;     ///< (P²·C)×D
  Tensor patch_bias;           ///< D
  Tensor positional_embedding; ///< (E_I+1)×D; row 0 belongs to the class token
  Tensor cls_token;            ///< 1×D
  std::vector<TransformerLayer> layers;
  Tensor ln_post_gain, ln_post_bias;
  Tensor projection;           ///< D×D
};

struct TextEncoderParams {
  Tensor vocab_embedding;      ///< V×D
  Tensor positional_embedding; ///< label_tokens×D, position within a class name
  Tensor cls_token;            ///< 1×D
  std::vector<TransformerLayer> layers;
  Tensor ln_post_gain, ln_post_bias;
  Tensor projection;           ///< D×D
};

/// Learned CLIP-style logit scale, stored as its logarithm.
struct Temperature {
  Tensor log_scale;  ///< one element
  double max_scale = 100.0;

  double value() const { return std::min(std::exp(log_scale[0]), max_scale); }
};

/// Token ids of each class name; one row per class.
using ClassTokens = std::vector<std::vector<int>>;

inline ClassTokens default_class_tokens(const BackboneConfig& cfg) {
  ClassTokens tokens(cfg.classes);
  for (std::size_t j = 0; j < cfg.classes; ++j)
    for (std::size_t t = 0; t < cfg.label_tokens; ++t)
      tokens[j].push_back(static_cast<int>(1 + j * cfg.label_tokens + t));
  return tokens;
}

/// The frozen dual encoder plus its class vocabulary.
struct Backbone {
  BackboneConfig config;
  VisionEncoderParams vision;
  TextEncoderParams text;
  Temperature temperature;
  ClassTokens class_tokens;

  static Backbone init(const BackboneConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = cfg.dim, hidden = cfg.dim * cfg.mlp_ratio;
    Backbone b;
    b.config = cfg;
    auto& v = b.vision;
    v.patch_projection = Tensor::randn({cfg.patch_width(), d}, 1.0 / std::sqrt(double(cfg.patch_width())), rng);
    v.patch_bias = Tensor::zeros({d});
    v.positional_embedding = Tensor::randn({cfg.patches() + 1, d}, 0.1, rng);
    v.cls_token = Tensor::randn({1, d}, 0.1, rng);
    for (std::size_t l = 0; l < cfg.vision_layers; ++l)
      v.layers.push_back(TransformerLayer::init(d, hidden, cfg.vision_layers, rng));
    v.ln_post_gain = Tensor::from({d}, std::vector<double>(d, 1.0));
    v.ln_post_bias = Tensor::zeros({d});
    v.projection = Tensor::randn({d, d}, 1.0 / std::sqrt(double(d)), rng);

    auto& t = b.text;
    t.vocab_embedding = Tensor::randn({cfg.vocab, d}, 0.5, rng);
    t.positional_embedding = Tensor::randn({cfg.label_tokens, d}, 0.1, rng);
    t.cls_token = Tensor::randn({1, d}, 0.1, rng);
    for (std::size_t l = 0; l < cfg.text_layers; ++l)
      t.layers.push_back(TransformerLayer::init(d, hidden, cfg.text_layers, rng));
    t.ln_post_gain = Tensor::from({d}, std::vector<double>(d, 1.0));
    t.ln_post_bias = Tensor::zeros({d});
    t.projection = Tensor::randn({d, d}, 1.0 / std::sqrt(double(d)), rng);

    b.temperature.log_scale = Tensor::from({1}, {std::log(1.0 / 0.07)});
    b.temperature.max_scale = cfg.max_logit_scale;
    b.class_tokens = default_class_tokens(cfg);
    return b;
  }

  /// Every parameter tensor under a stable, hierarchical name.
  std::vector<NamedTensor> named_tensors() const {
    std::vector<NamedTensor> out{
        {"vision/patch_projection", vision.patch_projection},
        {"vision/patch_bias", vision.patch_bias},
        {"vision/positional_embedding", vision.positional_embedding},
        {"vision/cls_token", vision.cls_token},
    };
    for (std::size_t l = 0; l < vision.layers.size(); ++l)
      vision.layers[l].append_named("vision/layer" + std::to_string(l) + "/", out);
    out.push_back({"vision/ln_post_gain", vision.ln_post_gain});
    out.push_back({"vision/ln_post_bias", vision.ln_post_bias});
    out.push_back({"vision/projection", vision.projection});
    out.push_back({"text/vocab_embedding", text.vocab_embedding});
    out.push_back({"text/positional_embedding", text.positional_embedding});
    out.push_back({"text/cls_token", text.cls_token});
    for (std::size_t l = 0; l < text.layers.size(); ++l)
      text.layers[l].append_named("text/layer" + std::to_string(l) + "/", out);
    out.push_back({"text/ln_post_gain", text.ln_post_gain});
    out.push_back({"text/ln_post_bias", text.ln_post_bias});
    out.push_back({"text/projection", text.projection});
    out.push_back({"temperature/log_scale", temperature.log_scale});
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& nt : named_tensors()) out.push_back(nt.tensor);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& nt : named_tensors()) n += nt.tensor.size();
    return n;
  }

  void set_trainable(bool on) const {
    for (auto nt : named_tensors()) nt.tensor.set_requires_grad(on);
  }
  void freeze() const { set_trainable(false); }

  bool frozen() const {
    for (const auto& nt : named_tensors())
      if (nt.tensor.requires_grad()) return false;
    return true;
  }

  std::uint32_t checksum() const { return content_checksum(named_tensors()); }
};

// ---------------------------------------------------------------------------
// Persistence

inline void save_params(const std::filesystem::path& path, const Backbone& b) { cppm::save(path, b.named_tensors()); }

/// Loads a backbone whose architecture is described by `cfg`. Every stored
/// tensor must match the shape `cfg` implies; the result is frozen.
inline Backbone load_params(const std::filesystem::path& path, const BackboneConfig& cfg) {
  Backbone b = Backbone::init(cfg, 0);
  auto stored = cppm::load(path);
  std::map<std::string, Tensor> by_name;
  for (auto& nt : stored) by_name.emplace(nt.name, nt.tensor);
  for (auto nt : b.named_tensors()) {
    auto it = by_name.find(nt.name);
    if (it == by_name.end()) throw ShapeError("parameter file lacks field " + nt.name);
    if (it->second.shape() != nt.tensor.shape()) {
      throw ShapeError("field " + nt.name + ": expected shape " + to_string(nt.tensor.shape()) + ", file has " +
                       to_string(it->second.shape()));
    }
    auto src = it->second.data();
    std::copy(src.begin(), src.end(), nt.tensor.data().begin());
    by_name.erase(it);
  }
  if (!by_name.empty()) throw ShapeError("parameter file has unexpected field " + by_name.begin()->first);
  b.freeze();
  return b;
}

// ---------------------------------------------------------------------------
// Forward passes

enum class PrefixVariant { PrefixOne, SplitPrefix };

/// Per-layer key/value prefixes for the vision transformer.
struct KVPrefixProvider {
  std::map<std::size_t, Tensor> layers;
  PrefixVariant variant = PrefixVariant::PrefixOne;

  const Tensor* at(std::size_t layer) const {
    auto it = layers.find(layer);
    return it == layers.end() ? nullptr : &it->second;
  }
};

/// Attention probabilities of every layer of one forward pass.
using AttentionTrace = std::vector<AttentionMap>;

/// Patch embedding for a batch: [(B·E_I)×D], positional rows 1..E_I added.
inline Tensor embed_patches(Tape& tape, std::span<const std::span<const float>> images, const Backbone& bb) {
  const auto& cfg = bb.config;
  const std::size_t side = cfg.image_size, p = cfg.patch, c = cfg.channels;
  const std::size_t grid = side / p, e = cfg.patches(), pw = cfg.patch_width();
  Tensor patches = Tensor::zeros({images.size() * e, pw});
  for (std::size_t b = 0; b < images.size(); ++b) {
    const auto& img = images[b];
    if (img.size() != side * side * c) {
      throw ConfigError("embed_patches: image of " + std::to_string(img.size()) + " values does not fit " +
                        std::to_string(side) + "x" + std::to_string(side) + "x" + std::to_string(c) +
                        " with patch " + std::to_string(p));
    }
    for (std::size_t py = 0; py < grid; ++py)
      for (std::size_t px = 0; px < grid; ++px) {
        double* row = patches.data().data() + (b * e + py * grid + px) * pw;
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            for (std::size_t ch = 0; ch < c; ++ch)
              row[(dy * p + dx) * c + ch] = img[((py * p + dy) * side + (px * p + dx)) * c + ch];
      }
  }
  Tensor x = linear(tape, patches, bb.vision.patch_projection, bb.vision.patch_bias);
  Tensor pos = slice_rows(tape, bb.vision.positional_embedding, 1, e);
  return add_tiled(tape, x, pos);
}

/// Single image [H×W×C] -> [E_I×D]. Checks divisibility of H, W by the patch size.
inline Tensor embed_patches(Tape& tape, std::span<const float> image, std::size_t height, std::size_t width,
                            const Backbone& bb) {
  const auto& cfg = bb.config;
  if (height % cfg.patch != 0 || width % cfg.patch != 0) {
    throw ConfigError("embed_patches: " + std::to_string(height) + "x" + std::to_string(width) +
                      " image is not divisible by patch " + std::to_string(cfg.patch));
  }
  if (height != cfg.image_size || width != cfg.image_size) {
    throw ConfigError("embed_patches: backbone expects " + std::to_string(cfg.image_size) + "x" +
                      std::to_string(cfg.image_size) + " images");
  }
  std::span<const float> one[1] = {image};
  return embed_patches(tape, std::span<const std::span<const float>>(one), bb);
}

/// Multi-head self-attention sublayer (input already layer-normed), with an
/// optional prefix joining the keys and values.
///
/// PrefixOne: the whole prefix extends both K and V inputs.
/// SplitPrefix: the first half extends K, the second half extends V.
inline Tensor attention_sublayer(Tape& tape, const Tensor& h, const Tensor* prefix, const TransformerLayer& w,
                                 std::size_t heads, PrefixVariant variant, std::size_t block_rows,
                                 AttentionMap* capture = nullptr) {
  Tensor q = linear(tape, h, w.wq, w.bq);
  Tensor k = linear(tape, h, w.wk, w.bk);
  Tensor v = linear(tape, h, w.wv, w.bv);
  Tensor kp, vp;
  if (prefix && prefix->defined() && prefix->dim(0) > 0) {
    if (prefix->dim(1) != h.dim(1)) {
      throw DimensionError("prefix width " + std::to_string(prefix->dim(1)) + " differs from token width " +
                           std::to_string(h.dim(1)));
    }
    const std::size_t len = prefix->dim(0);
    if (variant == PrefixVariant::PrefixOne) {
      kp = linear(tape, *prefix, w.wk, w.bk);
      vp = linear(tape, *prefix, w.wv, w.bv);
    } else {
      if (len % 2 != 0) throw ConfigError("split prefix needs an even prefix length, got " + std::to_string(len));
      kp = linear(tape, slice_rows(tape, *prefix, 0, len / 2), w.wk, w.bk);
      vp = linear(tape, slice_rows(tape, *prefix, len / 2, len / 2), w.wv, w.bv);
    }
  }
  Tensor a = multi_head_attention(tape, q, k, v, kp, vp, block_rows, heads, capture);
  return linear(tape, a, w.wo, w.bo);
}

/// Runs pre-LN transformer blocks over [(B·M)×D] tokens (B blocks of M rows).
/// Layers with a prefix use prefix attention; the rest run vanilla attention.
/// The row count is preserved.
inline Tensor transformer_forward(Tape& tape, const Tensor& tokens, const std::vector<TransformerLayer>& layers,
                                  std::size_t heads, double eps, std::size_t block_rows,
                                  const KVPrefixProvider& prefixes = {}, AttentionTrace* trace = nullptr) {
  for (const auto& [layer, t] : prefixes.layers) {
    if (layer >= layers.size()) {
      throw ConfigError("prefix for layer " + std::to_string(layer) + " but the encoder has " +
                        std::to_string(layers.size()) + " layers");
    }
  }
  if (!layers.empty() && tokens.dim(1) != layers.front().wq.dim(0)) {
    throw DimensionError("transformer: token width " + std::to_string(tokens.dim(1)) + " does not match model width " +
                         std::to_string(layers.front().wq.dim(0)));
  }
  if (trace) trace->assign(layers.size(), AttentionMap{});
  Tensor x = tokens;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& w = layers[l];
    Tensor h = layer_norm(tape, x, w.ln1_gain, w.ln1_bias, eps);
    Tensor a = attention_sublayer(tape, h, prefixes.at(l), w, heads, prefixes.variant, block_rows,
                                  trace ? &(*trace)[l] : nullptr);
    x = add(tape, x, a);
    Tensor h2 = layer_norm(tape, x, w.ln2_gain, w.ln2_bias, eps);
    Tensor m = linear(tape, gelu(tape, linear(tape, h2, w.w1, w.b1)), w.w2, w.b2);
    x = add(tape, x, m);
  }
  return x;
}

/// Class embeddings [U×D], unit rows. With a prompt the sequence is
/// [Tex_CLS; prompt; Y_emb] of 1+L_PT+U rows; each class is read at its own
/// position. Class rows carry no cross-class position, so the class set is
/// treated as a set.
inline Tensor encode_text(Tape& tape, const ClassTokens& labels, const Backbone& bb, const Tensor& prompt = {}) {
  const auto& cfg = bb.config;
  const auto& t = bb.text;
  const std::size_t u = labels.size();
  if (u < 2) throw DataError("encode_text: need at least 2 classes");
  const std::size_t len = t.positional_embedding.dim(0);
  std::vector<std::size_t> ids;
  for (const auto& name : labels) {
    if (name.size() != len) {
      throw DataError("encode_text: class names must have " + std::to_string(len) + " tokens");
    }
    for (int tok : name) {
      if (tok < 0 || static_cast<std::size_t>(tok) >= cfg.vocab) {
        throw DataError("encode_text: token id " + std::to_string(tok) + " outside vocabulary of " +
                        std::to_string(cfg.vocab));
      }
      ids.push_back(static_cast<std::size_t>(tok));
    }
  }
  Tensor y = take_rows(tape, t.vocab_embedding, std::move(ids));
  y = add_tiled(tape, y, t.positional_embedding);
  y = block_mean(tape, y, len);

  const std::size_t lp = prompt.defined() ? prompt.dim(0) : 0;
  std::vector<Tensor> parts{t.cls_token};
  if (lp > 0) parts.push_back(prompt);
  parts.push_back(y);
  Tensor seq = concat_rows(tape, parts);
  Tensor h = transformer_forward(tape, seq, t.layers, cfg.heads, cfg.ln_eps, seq.dim(0));
  std::vector<std::size_t> rows(u);
  for (std::size_t j = 0; j < u; ++j) rows[j] = 1 + lp + j;
  Tensor cls = take_rows(tape, h, std::move(rows));
  cls = layer_norm(tape, cls, t.ln_post_gain, t.ln_post_bias, cfg.ln_eps);
  return l2_normalize_rows(tape, matmul(tape, cls, t.projection));
}

/// Final vision head: class-token row of each block -> LN -> projection -> unit rows.
inline Tensor vision_head(Tape& tape, const Tensor& h, std::size_t block_rows, const Backbone& bb) {
  const std::size_t bsz = h.dim(0) / block_rows;
  std::vector<std::size_t> rows(bsz);
  for (std::size_t b = 0; b < bsz; ++b) rows[b] = b * block_rows;
  Tensor cls = take_rows(tape, h, std::move(rows));
  cls = layer_norm(tape, cls, bb.vision.ln_post_gain, bb.vision.ln_post_bias, bb.config.ln_eps);
  return l2_normalize_rows(tape, matmul(tape, cls, bb.vision.projection));
}

/// Class token with its positional embedding (row 0).
inline Tensor image_cls_row(Tape& tape, const Backbone& bb) {
  return add(tape, bb.vision.cls_token, slice_rows(tape, bb.vision.positional_embedding, 0, 1));
}

}  // namespace cpprompt
