#pragma once

#include <span>
#include <vector>

#include "cpprompt/data.hpp"
#include "cpprompt/parallel.hpp"
#include "cpprompt/prompting.hpp"

namespace cpprompt {

inline constexpr std::size_t kEvalBatch = 32;

inline std::vector<std::span<const float>> image_views(const Dataset& ds, std::span<const std::size_t> index) {
  std::vector<std::span<const float>> out;
  out.reserve(index.size());
  for (auto i : index) out.push_back(ds.image(i));
  return out;
}

inline std::vector<std::size_t> all_indices(const Dataset& ds) {
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

/// Unit image embeddings [N×D] for the selected samples, computed in parallel
/// over frozen tensors.
inline Tensor embed_images(const Backbone& bb, const Dataset& ds, std::span<const std::size_t> index,
                           const CommonPrompt& common = {}, const PersonalizedImagePrompts& pers = {},
                           PrefixVariant variant = PrefixVariant::PrefixOne) {
  const std::size_t d = bb.config.dim;
  Tensor out = Tensor::zeros({index.size(), d});
  parallel_chunks(index.size(), kEvalBatch, [&](std::size_t begin, std::size_t end) {
    Tape tape;
    auto views = image_views(ds, index.subspan(begin, end - begin));
    Tensor e = image_forward(tape, views, bb, common, pers, variant);
    auto src = e.data();
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(begin * d));
  });
  return out;
}

inline int argmax_row(std::span<const double> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

/// Predicted classes given precomputed unit image embeddings and class embeddings.
inline std::vector<int> classify_embeddings(const Tensor& images, const Tensor& text, const Temperature& temperature) {
  Tape tape;
  Tensor z = logits(tape, images, text, temperature);
  std::vector<int> out(z.rows());
  for (std::size_t i = 0; i < z.rows(); ++i) out[i] = argmax_row(z.data().subspan(i * z.cols(), z.cols()));
  return out;
}

inline double accuracy(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hit += predicted[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(predicted.size());
}

/// Frozen zero-shot accuracy (no prompts at all).
inline double zero_shot_accuracy(const Backbone& bb, const Dataset& ds) {
  auto idx = all_indices(ds);
  Tensor img = embed_images(bb, ds, idx);
  Tape tape;
  Tensor text = encode_text(tape, bb.class_tokens, bb);
  return accuracy(classify_embeddings(img, text, bb.temperature), ds.labels);
}

}  // namespace cpprompt
