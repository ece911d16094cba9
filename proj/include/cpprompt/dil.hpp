#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cpprompt/evaluation.hpp"
#include "cpprompt/kmeans.hpp"
#include "cpprompt/optim.hpp"

namespace cpprompt {

struct TrainConfig {
  std::size_t epochs = 30;
  double lr = 0.05;
  double momentum = 0.9;
  std::size_t batch = 16;
  std::size_t kmeans_k = 5;
  std::size_t kmeans_iters = 100;
};

/// Evolving common prompt plus the append-only per-domain snapshots.
struct PromptBank {
  CommonPrompt evolving;
  std::map<int, DomainPromptSet> snapshots;
  std::map<int, std::uint32_t> checksums;  ///< taken when each snapshot was stored
  std::map<int, Tensor> class_embeddings;  ///< cached text side of each snapshot

  static PromptBank init(const PromptConfig& cfg, std::size_t dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    PromptBank bank;
    bank.evolving = init_common_prompt(cfg, dim, rng);
    return bank;
  }

  /// Throws if any stored snapshot no longer matches its checksum.
  void verify() const {
    for (const auto& [id, set] : snapshots) {
      if (set.checksum() != checksums.at(id)) {
        throw Error("snapshot of domain " + std::to_string(id) + " was modified after it was stored");
      }
    }
  }

  std::vector<NamedTensor> named_tensors() const {
    std::vector<NamedTensor> out;
    for (const auto& [id, set] : snapshots) {
      auto part = set.named_tensors("domain" + std::to_string(id) + "/");
      out.insert(out.end(), part.begin(), part.end());
    }
    return out;
  }
};

/// K centroids of prompt-free image features per trained domain.
struct FeaturePool {
  std::map<int, Tensor> centroids;  ///< domain id -> K×D

  bool empty() const { return centroids.empty(); }
};

enum class SelectorMode { KMeans, Oracle };

// ---------------------------------------------------------------------------
// Training

/// Minibatch SGD over `data`, updating only the given prompt tensors.
inline void fit_prompts(const Backbone& bb, const Dataset& data, const CommonPrompt& common,
                        const PersonalizedImagePrompts& image, const PersonalizedTextPrompt& text,
                        const PromptConfig& pcfg, const TrainConfig& tcfg, std::uint64_t seed) {
  if (data.empty()) throw DataError("training data for domain " + std::to_string(data.domain_id) + " is empty");
  auto params = trainable_params(common, image, text);
  if (params.empty()) return;
  for (auto& p : params) p.set_requires_grad(true);
  Sgd opt(params, tcfg.lr, tcfg.momentum);
  std::mt19937_64 rng(seed);
  auto order = all_indices(data);
  for (std::size_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += tcfg.batch) {
      const std::size_t end = std::min(order.size(), start + tcfg.batch);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(data.labels[i]);
      Tape tape;
      auto views = image_views(data, idx);
      auto diverged = [&] {
        std::ostringstream os;
        os << "prompt training diverged on domain " << data.domain_id << " epoch " << epoch << " (lr " << tcfg.lr
           << ", seed " << seed << ")";
        return TrainingError(os.str());
      };
      Tensor l;
      try {
        Tensor t = text_forward(tape, bb, text);
        Tensor img = image_forward(tape, views, bb, common, image, pcfg.prefix_variant);
        l = loss(tape, logits(tape, img, t, bb.temperature), labels, pcfg.loss_mode);
      } catch (const NumericError&) {
        throw diverged();
      }
      if (!std::isfinite(l.item())) throw diverged();
      tape.backward(l);
      opt.step();
    }
  }
  for (auto& p : params) {
    p.drop_grad();
    p.set_requires_grad(false);
  }
}

/// Trains domain `s`: fresh personalized prompts, the evolving common prompt
/// continued from its current state. Stores a frozen snapshot in the bank and
/// returns it.
inline DomainPromptSet train_domain(int s, const Dataset& data, PromptBank& bank, const Backbone& bb,
                                    const PromptConfig& pcfg, const TrainConfig& tcfg, std::uint64_t seed) {
  if (bank.snapshots.count(s)) throw UsageError("domain " + std::to_string(s) + " was already trained");
  if (!bb.frozen()) throw UsageError("train_domain: backbone must be frozen");
  if (data.empty()) throw DataError("training data for domain " + std::to_string(s) + " is empty");
  pcfg.validate(bb.config.vision_layers);
  std::mt19937_64 rng(detail::mix_seed(seed, static_cast<std::uint64_t>(s)));
  DomainPromptSet live;
  live.common = bank.evolving;  // shares storage: updates carry forward
  live.image = init_image_prompts(pcfg, bb.config.dim, rng);
  live.text = init_text_prompt(pcfg, bb.config.dim, rng);
  fit_prompts(bb, data, live.common, live.image, live.text, pcfg, tcfg, rng());

  DomainPromptSet snap = live.snapshot();
  bank.snapshots[s] = snap;
  bank.checksums[s] = snap.checksum();
  Tape tape;
  bank.class_embeddings[s] = text_forward(tape, bb, snap.text);
  return snap;
}

// ---------------------------------------------------------------------------
// Domain selection

/// Prompt-free frozen features used by the selector.
inline Tensor selector_features(const Backbone& bb, const Dataset& ds) {
  auto idx = all_indices(ds);
  return embed_images(bb, ds, idx);
}

inline void build_feature_pool(FeaturePool& pool, int s, const Tensor& features, std::size_t k,
                               std::size_t max_iters, std::uint64_t seed) {
  if (k > features.dim(0)) {
    throw ConfigError("feature pool: K=" + std::to_string(k) + " exceeds the " + std::to_string(features.dim(0)) +
                      " samples of domain " + std::to_string(s));
  }
  pool.centroids[s] = kmeans(features, k, max_iters, seed).centroids;
}

inline void build_feature_pool(FeaturePool& pool, int s, const Dataset& data, const Backbone& bb, std::size_t k,
                               std::uint64_t seed, std::size_t max_iters = 100) {
  if (k > data.size()) {
    throw ConfigError("feature pool: K=" + std::to_string(k) + " exceeds the " + std::to_string(data.size()) +
                      " samples of domain " + std::to_string(s));
  }
  build_feature_pool(pool, s, selector_features(bb, data), k, max_iters, seed);
}

/// Domain owning the nearest centroid; ties go to the lower domain id.
inline int select_domain(std::span<const double> feature, const FeaturePool& pool) {
  if (pool.empty()) throw UsageError("select_domain: feature pool is empty");
  int best = pool.centroids.begin()->first;
  double best_d = std::numeric_limits<double>::infinity();
  for (const auto& [id, c] : pool.centroids) {
    if (c.dim(1) != feature.size()) throw DimensionError("select_domain: feature width mismatch");
    double dist;
    detail::nearest(feature.data(), c, &dist);
    if (dist < best_d) {
      best_d = dist;
      best = id;
    }
  }
  return best;
}

inline int select_domain(std::span<const float> image, const FeaturePool& pool, const Backbone& bb) {
  Tape tape;
  std::span<const float> one[1] = {image};
  Tensor f = image_forward(tape, std::span<const std::span<const float>>(one), bb, {}, {});
  return select_domain(f.data(), pool);
}

// ---------------------------------------------------------------------------
// Inference

struct Prediction {
  int label = -1;
  int domain = -1;
};

/// Classifies every sample of `ds`. In KMeans mode each sample picks its
/// snapshot through the feature pool (`features` are the prompt-free selector
/// features of `ds`); in Oracle mode every sample uses `oracle_domain`.
inline std::vector<Prediction> infer(const Dataset& ds, const Tensor& features, const PromptBank& bank,
                                     const FeaturePool& pool, const Backbone& bb, SelectorMode mode,
                                     int oracle_domain, PrefixVariant variant) {
  if (bank.snapshots.empty()) throw UsageError("infer: prompt bank has no snapshots");
  std::vector<Prediction> out(ds.size());
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    int s = oracle_domain;
    if (mode == SelectorMode::KMeans) {
      s = select_domain(features.data().subspan(i * features.cols(), features.cols()), pool);
    } else if (!bank.snapshots.count(s)) {
      throw UsageError("infer: oracle domain " + std::to_string(s) + " has no snapshot");
    }
    out[i].domain = s;
    groups[s].push_back(i);
  }
  for (const auto& [s, idx] : groups) {
    const auto& snap = bank.snapshots.at(s);
    Tensor img = embed_images(bb, ds, idx, snap.common, snap.image, variant);
    auto labels = classify_embeddings(img, bank.class_embeddings.at(s), bb.temperature);
    for (std::size_t j = 0; j < idx.size(); ++j) out[idx[j]].label = labels[j];
  }
  return out;
}

/// Single-image convenience form of infer().
inline Prediction infer(std::span<const float> image, const PromptBank& bank, const FeaturePool& pool,
                        const Backbone& bb, SelectorMode mode, int oracle_domain = -1,
                        PrefixVariant variant = PrefixVariant::PrefixOne) {
  Dataset one;
  one.height = one.width = bb.config.image_size;
  one.channels = bb.config.channels;
  one.classes = bb.config.classes;
  one.labels = {0};
  one.pixels.assign(image.begin(), image.end());
  Tensor f;
  if (mode == SelectorMode::KMeans) f = selector_features(bb, one);
  return infer(one, f, bank, pool, bb, mode, oracle_domain, variant).front();
}

// ---------------------------------------------------------------------------
// Metrics

/// a[t][i]: accuracy on domain i after training through domain t (1-based,
/// defined for i <= t).
class AccuracyMatrix {
 public:
  explicit AccuracyMatrix(std::size_t domains = 0)
      : s_(domains), a_(domains, std::vector<std::optional<double>>(domains)) {}

  std::size_t domains() const { return s_; }

  void set(std::size_t t, std::size_t i, double acc) {
    check(t, i);
    if (acc < 0.0 || acc > 1.0) throw UsageError("accuracy outside [0,1]");
    a_[t - 1][i - 1] = acc;
  }
  std::optional<double> get(std::size_t t, std::size_t i) const {
    check(t, i);
    return a_[t - 1][i - 1];
  }
  double at(std::size_t t, std::size_t i) const {
    auto v = get(t, i);
    if (!v) throw UsageError("accuracy a[" + std::to_string(t) + "][" + std::to_string(i) + "] not recorded");
    return *v;
  }

  /// Mean of row t over the domains seen so far.
  double average_accuracy(std::size_t t) const {
    double sum = 0.0;
    for (std::size_t i = 1; i <= t; ++i) sum += at(t, i);
    return sum / static_cast<double>(t);
  }
  double average_accuracy() const { return average_accuracy(s_); }

  /// Mean over i < t of a[t][i] − max_{i<=t'<=t} a[t'][i]; non-positive,
  /// zero means no forgetting. Zero by convention for t = 1.
  double average_forgetting(std::size_t t) const {
    if (t <= 1) return 0.0;
    double sum = 0.0;
    for (std::size_t i = 1; i < t; ++i) {
      double best = -1.0;
      for (std::size_t u = i; u <= t; ++u) best = std::max(best, at(u, i));
      sum += at(t, i) - best;
    }
    return sum / static_cast<double>(t - 1);
  }
  double average_forgetting() const { return average_forgetting(s_); }

  /// Rows t, columns i; entries with i > t are left empty.
  std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "t";
    for (std::size_t i = 1; i <= s_; ++i) os << ",domain" << i;
    os << '\n';
    for (std::size_t t = 1; t <= s_; ++t) {
      os << t;
      for (std::size_t i = 1; i <= s_; ++i) {
        os << ',';
        if (auto v = a_[t - 1][i - 1]) os << *v;
      }
      os << '\n';
    }
    return os.str();
  }

  bool operator==(const AccuracyMatrix&) const = default;

 private:
  void check(std::size_t t, std::size_t i) const {
    if (t < 1 || t > s_ || i < 1 || i > t) {
      throw UsageError("accuracy index (" + std::to_string(t) + "," + std::to_string(i) + ") outside the lower triangle");
    }
  }

  std::size_t s_;
  std::vector<std::vector<std::optional<double>>> a_;
};

}  // namespace cpprompt
