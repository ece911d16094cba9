#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <utility>
#include <vector>

#include "cpprompt/evaluation.hpp"
#include "cpprompt/optim.hpp"

namespace cpprompt {

struct PretrainConfig {
  std::size_t epochs = 8;
  std::size_t batch = 32;
  double lr = 2e-3;
  std::uint64_t seed = 7;
  /// Extra captioned styles. Each base image is rendered in one of these or
  /// left clean; its caption swaps the last class-name token for a word
  /// naming the style, so clean captions equal the downstream class names.
  std::vector<DomainTransform> styles = default_pretrain_styles();

  static std::vector<DomainTransform> default_pretrain_styles() {
    using T = DomainTransform;
    return {T::blur(3), T::quantize(3), T::noise(0.1, 101), T::noise(0.2, 102), T::stripes(3), T::stripes(4)};
  }
};

struct PretrainReport {
  std::vector<double> epoch_loss;
  double train_accuracy = 0.0;
};

/// Symmetric image/text InfoNCE for one batch. Image rows are classified
/// against all U class embeddings; each class present in the batch is matched
/// against the batch images, with its target mass spread evenly over the
/// images of that class.
inline Tensor contrastive_loss(Tape& tape, const Tensor& z, std::span<const int> labels) {
  Tensor i2t = cross_entropy(tape, z, labels);
  const std::size_t u = z.cols(), b = z.rows();
  std::vector<std::size_t> present;
  std::vector<std::vector<std::size_t>> members(u);
  for (std::size_t i = 0; i < b; ++i) members[static_cast<std::size_t>(labels[i])].push_back(i);
  for (std::size_t j = 0; j < u; ++j)
    if (!members[j].empty()) present.push_back(j);
  Tensor targets = Tensor::zeros({present.size(), b});
  for (std::size_t r = 0; r < present.size(); ++r) {
    const auto& m = members[present[r]];
    for (auto i : m) targets.at(r, i) = 1.0 / static_cast<double>(m.size());
  }
  Tensor t2i = soft_cross_entropy(tape, take_rows(tape, transpose(tape, z), present), targets);
  return scale(tape, add(tape, i2t, t2i), 0.5);
}

/// Captions for every (style, class) pair, style-major; style 0 is clean.
inline ClassTokens style_captions(const BackboneConfig& cfg, std::size_t styles) {
  ClassTokens names = default_class_tokens(cfg);
  const std::size_t first_word = 1 + cfg.classes * cfg.label_tokens;
  if (first_word + styles > cfg.vocab) {
    throw ConfigError("pretraining: vocabulary of " + std::to_string(cfg.vocab) + " cannot hold " +
                      std::to_string(styles) + " style words");
  }
  ClassTokens out = names;
  for (std::size_t k = 1; k <= styles; ++k)
    for (auto name : names) {
      name.back() = static_cast<int>(first_word + k - 1);
      out.push_back(std::move(name));
    }
  return out;
}

/// Renders each image of `base` in a seeded choice of clean or one of the
/// styles; returns the restyled corpus and each image's caption index.
inline std::pair<Dataset, std::vector<int>> stylize_corpus(const Dataset& base, const std::vector<DomainTransform>& styles,
                                                           std::uint64_t seed) {
  Dataset out = base;
  std::vector<int> captions(base.size());
  std::mt19937_64 rng(detail::mix_seed(seed, 0x5157));
  std::uniform_int_distribution<std::size_t> pick(0, styles.size());
  std::vector<std::vector<std::size_t>> members(styles.size() + 1);
  for (std::size_t i = 0; i < base.size(); ++i) {
    const std::size_t k = pick(rng);
    members[k].push_back(i);
    captions[i] = static_cast<int>(k * base.classes) + base.labels[i];
  }
  for (std::size_t k = 1; k <= styles.size(); ++k) {
    if (members[k].empty()) continue;
    Dataset part = base;
    part.labels.clear();
    part.pixels.clear();
    for (auto i : members[k]) {
      part.labels.push_back(base.labels[i]);
      auto img = base.image(i);
      part.pixels.insert(part.pixels.end(), img.begin(), img.end());
    }
    DomainTransform t = styles[k - 1];
    t.seed = detail::mix_seed(t.seed, seed + k);
    apply_transform(part, t);
    for (std::size_t j = 0; j < members[k].size(); ++j) {
      auto src = part.image(j);
      std::copy(src.begin(), src.end(), out.image(members[k][j]).begin());
    }
  }
  return {std::move(out), std::move(captions)};
}

/// Trains both towers and the temperature from scratch on a styled copy of
/// `base`, then freezes everything.
inline Backbone contrastive_pretrain(const Dataset& base, const BackboneConfig& bcfg, const PretrainConfig& cfg,
                                     PretrainReport* report = nullptr) {
  bcfg.validate();
  if (base.empty()) throw DataError("contrastive_pretrain: empty base dataset");
  if (base.classes != bcfg.classes) {
    throw DataError("contrastive_pretrain: dataset has " + std::to_string(base.classes) + " classes, backbone " +
                    std::to_string(bcfg.classes));
  }
  for (auto c : base.class_counts())
    if (c == 0) throw DataError("contrastive_pretrain: base dataset does not cover every class");

  const ClassTokens captions = style_captions(bcfg, cfg.styles.size());
  const auto [corpus, caption_of] = stylize_corpus(base, cfg.styles, cfg.seed);
  Backbone bb = Backbone::init(bcfg, cfg.seed);
  bb.set_trainable(true);
  Adam opt(bb.parameters(), cfg.lr);
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  auto order = all_indices(base);
  const std::size_t steps_per_epoch = (order.size() + cfg.batch - 1) / cfg.batch;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      // cosine decay
      opt.set_lr(cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps))));
      ++step;
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(caption_of[i]);
      Tape tape;
      auto views = image_views(corpus, idx);
      Tensor img = image_forward(tape, views, bb, {}, {});
      Tensor text = encode_text(tape, captions, bb);
      Tensor l = contrastive_loss(tape, logits(tape, img, text, bb.temperature), labels);
      if (!std::isfinite(l.item())) {
        std::ostringstream os;
        os << "contrastive pretraining diverged at epoch " << epoch << " (seed " << cfg.seed << ", lr " << cfg.lr
           << ", batch " << cfg.batch << ", dim " << bcfg.dim << ")";
        throw TrainingError(os.str());
      }
      loss_sum += l.item();
      ++batches;
      tape.backward(l);
      opt.step();
    }
    if (report) report->epoch_loss.push_back(loss_sum / static_cast<double>(batches));
  }
  bb.freeze();
  if (report) report->train_accuracy = zero_shot_accuracy(bb, base);
  return bb;
}

}  // namespace cpprompt
