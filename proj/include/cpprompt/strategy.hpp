#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cpprompt/dil.hpp"

namespace cpprompt {

enum class StrategyId { CpPrompt, CommonOnly, PersonalizedOnly, ZeroShot, SingleSharedContinual, SplitPrefixVariant };

inline constexpr std::array<StrategyId, 6> kAllStrategies = {
    StrategyId::CpPrompt, StrategyId::CommonOnly, StrategyId::PersonalizedOnly,
    StrategyId::ZeroShot, StrategyId::SingleSharedContinual, StrategyId::SplitPrefixVariant};

inline std::string strategy_name(StrategyId id) {
  switch (id) {
    case StrategyId::CpPrompt: return "cp_prompt";
    case StrategyId::CommonOnly: return "common_only";
    case StrategyId::PersonalizedOnly: return "personalized_only";
    case StrategyId::ZeroShot: return "zero_shot";
    case StrategyId::SingleSharedContinual: return "single_shared_continual";
    case StrategyId::SplitPrefixVariant: return "split_prefix_variant";
  }
  return "unknown";
}

inline StrategyId parse_strategy(const std::string& name) {
  for (auto id : kAllStrategies)
    if (strategy_name(id) == name) return id;
  throw UsageError("unknown strategy '" + name + "'");
}

inline std::string selector_name(SelectorMode m) { return m == SelectorMode::KMeans ? "kmeans" : "oracle"; }

inline SelectorMode parse_selector(const std::string& name) {
  if (name == "kmeans") return SelectorMode::KMeans;
  if (name == "oracle") return SelectorMode::Oracle;
  throw UsageError("unknown selector '" + name + "' (expected kmeans or oracle)");
}

/// Prompt configuration a strategy actually trains with.
inline PromptConfig strategy_prompts(StrategyId id, PromptConfig cfg) {
  switch (id) {
    case StrategyId::CommonOnly:
      cfg.image_prompt_length = 0;
      cfg.text_prompt_length = 0;
      break;
    case StrategyId::PersonalizedOnly: cfg.common_length = 0; break;
    case StrategyId::SplitPrefixVariant: cfg.prefix_variant = PrefixVariant::SplitPrefix; break;
    case StrategyId::ZeroShot:
      cfg.common_length = cfg.image_prompt_length = cfg.text_prompt_length = 0;
      break;
    default: break;
  }
  return cfg;
}

struct StrategyReport {
  StrategyId strategy = StrategyId::CpPrompt;
  SelectorMode selector = SelectorMode::KMeans;
  std::uint64_t seed = 0;
  AccuracyMatrix matrix;
  double aa = 0.0;
  double af = 0.0;
  /// Fraction of each domain's test samples routed to their own snapshot
  /// after the last domain; empty for strategies without snapshots.
  std::map<int, double> selector_accuracy;
  std::size_t trainable_param_count = 0;  ///< tensors tuned while training one domain
  std::size_t stored_param_count = 0;     ///< all prompt elements kept after the stream
  std::size_t backbone_param_count = 0;
  double trainable_fraction = 0.0;
  PromptBank bank;
  FeaturePool pool;
};

/// Per-domain test features for the selector, computed once per stream.
inline std::vector<Tensor> stream_test_features(const Backbone& bb, const std::vector<DomainSplits>& stream) {
  std::vector<Tensor> out;
  for (const auto& d : stream) out.push_back(selector_features(bb, d.test));
  return out;
}

inline double prediction_accuracy(const std::vector<Prediction>& pred, const Dataset& ds) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i].label == ds.labels[i];
  return pred.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(pred.size());
}

/// Fills the accuracy matrix of a snapshot bank: row t uses the snapshots
/// and pool entries of domains 1..t only.
inline void evaluate_snapshots(StrategyReport& rep, const Backbone& bb, const std::vector<DomainSplits>& stream,
                               const std::vector<Tensor>& test_features, PrefixVariant variant) {
  const std::size_t n = stream.size();
  rep.matrix = AccuracyMatrix(n);
  for (std::size_t t = 1; t <= n; ++t) {
    PromptBank seen;
    FeaturePool pool;
    for (std::size_t j = 0; j < t; ++j) {
      const int id = stream[j].id;
      seen.snapshots[id] = rep.bank.snapshots.at(id);
      seen.class_embeddings[id] = rep.bank.class_embeddings.at(id);
      if (rep.selector == SelectorMode::KMeans) pool.centroids[id] = rep.pool.centroids.at(id);
    }
    for (std::size_t i = 1; i <= t; ++i) {
      const auto& d = stream[i - 1];
      auto pred = infer(d.test, test_features[i - 1], seen, pool, bb, rep.selector, d.id, variant);
      rep.matrix.set(t, i, prediction_accuracy(pred, d.test));
      if (t == n) {
        std::size_t own = 0;
        for (const auto& p : pred) own += p.domain == d.id;
        rep.selector_accuracy[d.id] = static_cast<double>(own) / static_cast<double>(pred.size());
      }
    }
  }
  rep.aa = rep.matrix.average_accuracy();
  rep.af = rep.matrix.average_forgetting();
}

/// Replaces the feature pool with K centroids per domain and re-evaluates the
/// existing bank. Training is untouched: K only affects selection.
inline StrategyReport reevaluate_with_k(const StrategyReport& base, const Backbone& bb,
                                        const std::vector<DomainSplits>& stream,
                                        const std::vector<Tensor>& test_features, std::size_t k,
                                        std::size_t max_iters, PrefixVariant variant) {
  StrategyReport rep = base;
  rep.selector = SelectorMode::KMeans;
  rep.pool = {};
  rep.selector_accuracy.clear();
  for (const auto& d : stream)
    build_feature_pool(rep.pool, d.id, d.train, bb, k, detail::mix_seed(rep.seed, 1000 + d.id), max_iters);
  evaluate_snapshots(rep, bb, stream, test_features, variant);
  return rep;
}

/// Trains and evaluates one strategy over the stream with a frozen backbone.
/// `test_features` may be passed in to reuse the selector features of a
/// previous run on the same stream.
inline StrategyReport run_strategy(StrategyId id, const std::vector<DomainSplits>& stream, const Backbone& bb,
                                   const PromptConfig& base_prompts, const TrainConfig& tcfg, SelectorMode selector,
                                   std::uint64_t seed, const std::vector<Tensor>* test_features = nullptr) {
  if (stream.empty()) throw ConfigError("run_strategy: empty domain stream");
  if (!bb.frozen()) throw UsageError("run_strategy: backbone must be frozen");
  const PromptConfig pcfg = strategy_prompts(id, base_prompts);
  pcfg.validate(bb.config.vision_layers);

  StrategyReport rep;
  rep.strategy = id;
  rep.selector = selector;
  rep.seed = seed;
  rep.backbone_param_count = bb.parameter_count();
  const std::size_t n = stream.size();
  rep.matrix = AccuracyMatrix(n);

  if (id == StrategyId::ZeroShot) {
    std::vector<double> acc;
    for (const auto& d : stream) acc.push_back(zero_shot_accuracy(bb, d.test));
    for (std::size_t t = 1; t <= n; ++t)
      for (std::size_t i = 1; i <= t; ++i) rep.matrix.set(t, i, acc[i - 1]);
    rep.aa = rep.matrix.average_accuracy();
    rep.af = rep.matrix.average_forgetting();
    return rep;
  }

  if (id == StrategyId::SingleSharedContinual) {
    std::mt19937_64 rng(seed);
    DomainPromptSet live;
    live.common = init_common_prompt(pcfg, bb.config.dim, rng);
    live.image = init_image_prompts(pcfg, bb.config.dim, rng);
    live.text = init_text_prompt(pcfg, bb.config.dim, rng);
    for (std::size_t t = 1; t <= n; ++t) {
      fit_prompts(bb, stream[t - 1].train, live.common, live.image, live.text, pcfg, tcfg,
                  detail::mix_seed(seed, t));
      PromptBank current;
      current.snapshots[0] = live.snapshot();
      Tape tape;
      current.class_embeddings[0] = text_forward(tape, bb, live.text);
      for (std::size_t i = 1; i <= t; ++i) {
        const auto& d = stream[i - 1];
        auto pred = infer(d.test, {}, current, {}, bb, SelectorMode::Oracle, 0, pcfg.prefix_variant);
        rep.matrix.set(t, i, prediction_accuracy(pred, d.test));
      }
    }
    rep.trainable_param_count = rep.stored_param_count =
        count_elements(trainable_params(live.common, live.image, live.text));
    rep.trainable_fraction = static_cast<double>(rep.trainable_param_count) /
                             static_cast<double>(rep.backbone_param_count + rep.trainable_param_count);
    rep.bank.snapshots[1] = live.snapshot();
    rep.bank.checksums[1] = rep.bank.snapshots[1].checksum();
    rep.aa = rep.matrix.average_accuracy();
    rep.af = rep.matrix.average_forgetting();
    return rep;
  }

  rep.bank = PromptBank::init(pcfg, bb.config.dim, seed);
  for (const auto& d : stream) {
    auto snap = train_domain(d.id, d.train, rep.bank, bb, pcfg, tcfg, seed);
    rep.bank.verify();
    rep.trainable_param_count =
        std::max(rep.trainable_param_count, count_elements(trainable_params(snap.common, snap.image, snap.text)));
    rep.stored_param_count += count_elements(trainable_params(snap.common, snap.image, snap.text));
    if (selector == SelectorMode::KMeans) {
      build_feature_pool(rep.pool, d.id, d.train, bb, tcfg.kmeans_k, detail::mix_seed(seed, 1000 + d.id),
                         tcfg.kmeans_iters);
    }
  }
  rep.trainable_fraction = static_cast<double>(rep.trainable_param_count) /
                           static_cast<double>(rep.backbone_param_count + rep.trainable_param_count);
  if (test_features) {
    evaluate_snapshots(rep, bb, stream, *test_features, pcfg.prefix_variant);
  } else {
    evaluate_snapshots(rep, bb, stream, stream_test_features(bb, stream), pcfg.prefix_variant);
  }
  return rep;
}

}  // namespace cpprompt
