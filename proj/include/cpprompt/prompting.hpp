#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cpprompt/backbone.hpp"

namespace cpprompt {

enum class LossMode { SoftmaxCE, PerClassBCE };

/// Prompt lengths, insertion range and objective.
struct PromptConfig {
  std::size_t common_length = 4;        ///< L_C
  std::size_t image_prompt_length = 8;  ///< L_PI
  std::size_t text_prompt_length = 4;   ///< L_PT
  std::size_t layer_start = 0;
  std::size_t layer_end = 3;
  LossMode loss_mode = LossMode::SoftmaxCE;
  PrefixVariant prefix_variant = PrefixVariant::PrefixOne;
  double init_std = 0.02;

  std::size_t prompted_layers() const { return image_prompt_length == 0 ? 0 : layer_end - layer_start + 1; }

  void validate(std::size_t vision_layers) const {
    if (layer_start > layer_end || layer_end >= vision_layers) {
      throw ConfigError("prompt insertion range [" + std::to_string(layer_start) + "," + std::to_string(layer_end) +
                        "] must satisfy 0 <= start <= end < " + std::to_string(vision_layers));
    }
    if (prefix_variant == PrefixVariant::SplitPrefix && image_prompt_length % 2 != 0) {
      throw ConfigError("split prefix needs an even image prompt length");
    }
  }
};

/// P_C: rows appended after the image tokens.
struct CommonPrompt {
  Tensor values;  ///< L_C×D

  std::size_t length() const { return values.defined() ? values.dim(0) : 0; }
};

/// P_P,img: one prefix per prompted layer, all of the same length.
struct PersonalizedImagePrompts {
  std::map<std::size_t, Tensor> layers;

  std::size_t length() const { return layers.empty() ? 0 : layers.begin()->second.dim(0); }
};

/// P_P,tex: rows inserted between the text class token and the class names.
struct PersonalizedTextPrompt {
  Tensor values;  ///< L_PT×D

  std::size_t length() const { return values.defined() ? values.dim(0) : 0; }
};

/// Frozen per-domain snapshot of everything a domain needs at inference.
struct DomainPromptSet {
  CommonPrompt common;
  PersonalizedImagePrompts image;
  PersonalizedTextPrompt text;

  std::vector<NamedTensor> named_tensors(const std::string& prefix) const {
    std::vector<NamedTensor> out{{prefix + "common", common.values}};
    for (const auto& [l, t] : image.layers) out.push_back({prefix + "img/layer" + std::to_string(l), t});
    out.push_back({prefix + "text", text.values});
    return out;
  }

  /// Deep, frozen copy.
  DomainPromptSet snapshot() const {
    DomainPromptSet s;
    s.common.values = common.values.clone();
    for (const auto& [l, t] : image.layers) s.image.layers[l] = t.clone();
    s.text.values = text.values.clone();
    return s;
  }

  std::uint32_t checksum() const { return content_checksum(named_tensors("")); }
};

template <typename Rng>
CommonPrompt init_common_prompt(const PromptConfig& cfg, std::size_t dim, Rng& rng) {
  return {Tensor::randn({cfg.common_length, dim}, cfg.init_std, rng, true)};
}

template <typename Rng>
PersonalizedImagePrompts init_image_prompts(const PromptConfig& cfg, std::size_t dim, Rng& rng) {
  PersonalizedImagePrompts p;
  if (cfg.image_prompt_length == 0) return p;
  for (std::size_t l = cfg.layer_start; l <= cfg.layer_end; ++l)
    p.layers[l] = Tensor::randn({cfg.image_prompt_length, dim}, cfg.init_std, rng, true);
  return p;
}

template <typename Rng>
PersonalizedTextPrompt init_text_prompt(const PromptConfig& cfg, std::size_t dim, Rng& rng) {
  return {Tensor::randn({cfg.text_prompt_length, dim}, cfg.init_std, rng, true)};
}

// ---------------------------------------------------------------------------
// Image side

/// [Img_CLS; x_emb; P_C] with M = E_I + L_C + 1 rows.
inline Tensor compose_image_input(Tape& tape, const Tensor& x_emb, const Tensor& cls, const CommonPrompt& common) {
  if (cls.cols() != x_emb.cols() || (common.length() > 0 && common.values.cols() != x_emb.cols())) {
    throw DimensionError("compose_image_input: widths differ (cls " + to_string(cls.shape()) + ", tokens " +
                         to_string(x_emb.shape()) + ")");
  }
  std::vector<Tensor> parts{cls, x_emb};
  if (common.length() > 0) parts.push_back(common.values);
  return concat_rows(tape, parts);
}

/// Batched composition over B stacked [E_I×D] patch blocks.
inline Tensor compose_image_batch(Tape& tape, const Tensor& x_emb, std::size_t batch, const Tensor& cls,
                                  const CommonPrompt& common) {
  const std::size_t e = x_emb.dim(0) / batch;
  std::vector<Tensor> parts;
  parts.reserve(3 * batch);
  for (std::size_t b = 0; b < batch; ++b) {
    parts.push_back(cls);
    parts.push_back(slice_rows(tape, x_emb, b * e, e));
    if (common.length() > 0) parts.push_back(common.values);
  }
  if (common.length() > 0 && common.values.cols() != x_emb.cols()) {
    throw DimensionError("compose_image_batch: common prompt width " + std::to_string(common.values.cols()) +
                         " differs from token width " + std::to_string(x_emb.cols()));
  }
  return concat_rows(tape, parts);
}

/// One sample's Prefix-One attention: queries from h_m only, keys and values
/// from [h_m; prefix]. Returns M×D after the output projection.
inline Tensor prefix_one_attention(Tape& tape, const Tensor& h_m, const Tensor& prefix, const TransformerLayer& w,
                                   std::size_t heads, AttentionMap* capture = nullptr) {
  return attention_sublayer(tape, h_m, &prefix, w, heads, PrefixVariant::PrefixOne, h_m.dim(0), capture);
}

/// Split-prefix baseline: first half of the prefix joins the keys, second half
/// the values.
inline Tensor split_prefix_attention(Tape& tape, const Tensor& h_m, const Tensor& prefix, const TransformerLayer& w,
                                     std::size_t heads, AttentionMap* capture = nullptr) {
  return attention_sublayer(tape, h_m, &prefix, w, heads, PrefixVariant::SplitPrefix, h_m.dim(0), capture);
}

/// Unit image embeddings [B×D] under the given prompts.
inline Tensor image_forward(Tape& tape, std::span<const std::span<const float>> images, const Backbone& bb,
                            const CommonPrompt& common, const PersonalizedImagePrompts& pers,
                            PrefixVariant variant = PrefixVariant::PrefixOne, AttentionTrace* trace = nullptr) {
  const std::size_t batch = images.size();
  if (batch == 0) throw DataError("image_forward: empty batch");
  Tensor x_emb = embed_patches(tape, images, bb);
  Tensor cls = image_cls_row(tape, bb);
  Tensor tokens = compose_image_batch(tape, x_emb, batch, cls, common);
  const std::size_t m = tokens.dim(0) / batch;
  KVPrefixProvider prefixes{{}, variant};
  for (const auto& [l, t] : pers.layers)
    if (t.dim(0) > 0) prefixes.layers[l] = t;
  Tensor h = transformer_forward(tape, tokens, bb.vision.layers, bb.config.heads, bb.config.ln_eps, m, prefixes, trace);
  return vision_head(tape, h, m, bb);
}

// ---------------------------------------------------------------------------
// Text side, logits, objective

/// Class embeddings [U×D] for the backbone's class names under a text prompt.
inline Tensor text_forward(Tape& tape, const Backbone& bb, const PersonalizedTextPrompt& prompt) {
  return encode_text(tape, bb.class_tokens, bb, prompt.values);
}

/// z = logit_scale · img · textᵀ, [B×U].
inline Tensor logits(Tape& tape, const Tensor& img, const Tensor& text, const Temperature& temperature) {
  if (img.cols() != text.cols()) {
    throw DimensionError("logits: image width " + std::to_string(img.cols()) + " vs text width " +
                         std::to_string(text.cols()));
  }
  return scale_by_exp(tape, matmul(tape, img, transpose(tape, text)), temperature.log_scale, temperature.max_scale);
}

/// Objective over a batch of logits with one-hot targets.
inline Tensor loss(Tape& tape, const Tensor& z, const Tensor& onehot, LossMode mode) {
  if (onehot.shape() != z.shape()) {
    throw DimensionError("loss: targets " + to_string(onehot.shape()) + " vs logits " + to_string(z.shape()));
  }
  const std::size_t n = z.cols();
  for (std::size_t i = 0; i < z.rows(); ++i) {
    int ones = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = onehot[i * n + j];
      if (v == 1.0) {
        ++ones;
      } else if (v != 0.0) {
        ones = -1;
        break;
      }
    }
    if (ones != 1) throw DataError("loss: target row " + std::to_string(i) + " is not one-hot");
  }
  return mode == LossMode::SoftmaxCE ? soft_cross_entropy(tape, z, onehot) : binary_cross_entropy(tape, z, onehot);
}

inline Tensor one_hot(std::span<const int> labels, std::size_t classes) {
  Tensor t = Tensor::zeros({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw DataError("label " + std::to_string(labels[i]) + " outside [0," + std::to_string(classes) + ")");
    }
    t.at(i, static_cast<std::size_t>(labels[i])) = 1.0;
  }
  return t;
}

inline Tensor loss(Tape& tape, const Tensor& z, std::span<const int> labels, LossMode mode) {
  return loss(tape, z, one_hot(labels, z.cols()), mode);
}

/// The tensors tuned while training one domain: the evolving common prompt and
/// that domain's image and text prompts. Zero-length prompts are omitted.
inline std::vector<Tensor> trainable_params(const CommonPrompt& common, const PersonalizedImagePrompts& image,
                                            const PersonalizedTextPrompt& text) {
  std::vector<Tensor> out;
  if (common.length() > 0) out.push_back(common.values);
  for (const auto& [l, t] : image.layers)
    if (t.dim(0) > 0) out.push_back(t);
  if (text.length() > 0) out.push_back(text.values);
  return out;
}

inline std::size_t count_elements(const std::vector<Tensor>& ts) {
  std::size_t n = 0;
  for (const auto& t : ts) n += t.size();
  return n;
}

}  // namespace cpprompt
