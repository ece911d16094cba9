#include <gtest/gtest.h>

#include <filesystem>

#include "support.hpp"

using namespace cpprompt;
using testing_support::tiny_backbone;
using testing_support::tiny_prompts;

namespace {

namespace fs = std::filesystem;

struct Fixture {
  Backbone bb;
  std::vector<DomainSplits> stream;
  PromptConfig prompts = tiny_prompts();
  TrainConfig train;
};

Fixture make_fixture(std::uint64_t seed = 1) {
  Fixture f;
  BackboneConfig cfg = tiny_backbone();
  f.bb = Backbone::init(cfg, 3);
  f.bb.freeze();
  StreamSpec spec = default_stream();
  spec.classes = cfg.classes;
  spec.height = spec.width = cfg.image_size;
  spec.train_per_class = 8;
  spec.test_per_class = 6;
  f.stream = generate_stream(spec, seed);
  f.train.epochs = 2;
  f.train.batch = 8;
  f.train.kmeans_k = 3;
  return f;
}

bool same_snapshot(const DomainPromptSet& a, const DomainPromptSet& b) {
  auto x = a.named_tensors(""), y = b.named_tensors("");
  if (x.size() != y.size()) return false;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i].name != y[i].name || !bit_equal(x[i].tensor, y[i].tensor)) return false;
  return true;
}

}  // namespace

TEST(TrainDomain, SnapshotsAreAppendOnly) {
  Fixture f = make_fixture();
  PromptBank bank = PromptBank::init(f.prompts, f.bb.config.dim, 1);
  train_domain(1, f.stream[0].train, bank, f.bb, f.prompts, f.train, 1);
  ASSERT_EQ(bank.snapshots.size(), 1u);
  EXPECT_EQ(bank.snapshots.begin()->first, 1);
  const DomainPromptSet before = bank.snapshots.at(1).snapshot();
  const Tensor common_after_one = bank.evolving.values.clone();

  train_domain(2, f.stream[1].train, bank, f.bb, f.prompts, f.train, 1);
  EXPECT_EQ(bank.snapshots.size(), 2u);
  EXPECT_TRUE(same_snapshot(bank.snapshots.at(1), before));
  EXPECT_NO_THROW(bank.verify());
  // The evolving common prompt carried on from domain 1.
  EXPECT_TRUE(bit_equal(bank.snapshots.at(1).common.values, common_after_one));
  EXPECT_FALSE(bit_equal(bank.evolving.values, common_after_one));
  EXPECT_TRUE(bit_equal(bank.snapshots.at(2).common.values, bank.evolving.values));
  for (const auto& [id, set] : bank.snapshots)
    for (const auto& nt : set.named_tensors("")) EXPECT_FALSE(nt.tensor.requires_grad());
}

TEST(TrainDomain, TamperedSnapshotFailsVerification) {
  Fixture f = make_fixture();
  PromptBank bank = PromptBank::init(f.prompts, f.bb.config.dim, 1);
  train_domain(1, f.stream[0].train, bank, f.bb, f.prompts, f.train, 1);
  bank.snapshots.at(1).text.values[0] += 1e-9;
  EXPECT_THROW(bank.verify(), Error);
}

TEST(TrainDomain, PreconditionsAreEnforced) {
  Fixture f = make_fixture();
  PromptBank bank = PromptBank::init(f.prompts, f.bb.config.dim, 1);
  Dataset empty = f.stream[0].train;
  empty.labels.clear();
  empty.pixels.clear();
  EXPECT_THROW(train_domain(1, empty, bank, f.bb, f.prompts, f.train, 1), DataError);
  train_domain(1, f.stream[0].train, bank, f.bb, f.prompts, f.train, 1);
  EXPECT_THROW(train_domain(1, f.stream[0].train, bank, f.bb, f.prompts, f.train, 1), UsageError);
  Backbone live = Backbone::init(f.bb.config, 3);
  live.set_trainable(true);
  EXPECT_THROW(train_domain(2, f.stream[1].train, bank, live, f.prompts, f.train, 1), UsageError);
}

TEST(TrainDomain, DivergenceIsTrainingError) {
  Fixture f = make_fixture();
  PromptBank bank = PromptBank::init(f.prompts, f.bb.config.dim, 1);
  bank.evolving.values[0] = std::nan("");
  EXPECT_THROW(train_domain(1, f.stream[0].train, bank, f.bb, f.prompts, f.train, 1), TrainingError);
}

TEST(TrainDomain, BackboneChecksumUnchanged) {
  Fixture f = make_fixture();
  const auto before = f.bb.checksum();
  run_strategy(StrategyId::CpPrompt, f.stream, f.bb, f.prompts, f.train, SelectorMode::KMeans, 1);
  EXPECT_EQ(f.bb.checksum(), before);
  for (const auto& nt : f.bb.named_tensors()) EXPECT_FALSE(nt.tensor.has_grad()) << nt.name;
}

TEST(AccuracyMatrix, SingleDomain) {
  AccuracyMatrix m(1);
  m.set(1, 1, 0.75);
  EXPECT_EQ(m.average_accuracy(), 0.75);
  EXPECT_EQ(m.average_forgetting(), 0.0);
}

TEST(AccuracyMatrix, HandComputedExample) {
  AccuracyMatrix m(3);
  m.set(1, 1, 0.9);
  m.set(2, 1, 0.7);
  m.set(2, 2, 0.8);
  m.set(3, 1, 0.6);
  m.set(3, 2, 0.85);
  m.set(3, 3, 0.5);
  EXPECT_NEAR(m.average_accuracy(), (0.6 + 0.85 + 0.5) / 3.0, 1e-15);
  // domain 1: 0.6 − 0.9; domain 2: 0.85 − 0.85
  EXPECT_NEAR(m.average_forgetting(), (-0.3 + 0.0) / 2.0, 1e-15);
  EXPECT_THROW(m.set(1, 2, 0.5), UsageError);
  EXPECT_THROW(m.set(2, 1, 1.5), UsageError);
  EXPECT_THROW(AccuracyMatrix(2).at(2, 2), UsageError);
}

TEST(AccuracyMatrix, ForgettingIsNeverPositive) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t s = 1 + rng() % 6;
    AccuracyMatrix m(s);
    for (std::size_t t = 1; t <= s; ++t)
      for (std::size_t i = 1; i <= t; ++i) m.set(t, i, u(rng));
    for (std::size_t t = 1; t <= s; ++t) {
      EXPECT_LE(m.average_forgetting(t), 0.0);
      EXPECT_GE(m.average_accuracy(t), 0.0);
      EXPECT_LE(m.average_accuracy(t), 1.0);
    }
  }
}

TEST(AccuracyMatrix, CsvHasLowerTriangle) {
  AccuracyMatrix m(2);
  m.set(1, 1, 0.5);
  m.set(2, 1, 0.25);
  m.set(2, 2, 1.0);
  EXPECT_EQ(m.to_csv(), "t,domain1,domain2\n1,0.5,\n2,0.25,1\n");
}

TEST(RunStrategy, OracleSelectionNeverForgets) {
  Fixture f = make_fixture();
  for (auto id : {StrategyId::CpPrompt, StrategyId::PersonalizedOnly}) {
    auto rep = run_strategy(id, f.stream, f.bb, f.prompts, f.train, SelectorMode::Oracle, 2);
    for (std::size_t i = 1; i <= 3; ++i)
      for (std::size_t t = i; t <= 3; ++t) EXPECT_EQ(rep.matrix.at(t, i), rep.matrix.at(i, i));
    EXPECT_EQ(rep.af, 0.0);
  }
}

TEST(RunStrategy, FixedSeedIsDeterministic) {
  Fixture f = make_fixture();
  auto a = run_strategy(StrategyId::CpPrompt, f.stream, f.bb, f.prompts, f.train, SelectorMode::KMeans, 4);
  auto b = run_strategy(StrategyId::CpPrompt, f.stream, f.bb, f.prompts, f.train, SelectorMode::KMeans, 4);
  EXPECT_EQ(a.matrix, b.matrix);
  EXPECT_EQ(a.selector_accuracy, b.selector_accuracy);
  for (const auto& [id, c] : a.pool.centroids) EXPECT_TRUE(bit_equal(c, b.pool.centroids.at(id)));
}

TEST(RunStrategy, PerfectSelectorMatchesOracle) {
  Fixture f = make_fixture();
  auto features = stream_test_features(f.bb, f.stream);
  auto oracle = run_strategy(StrategyId::CpPrompt, f.stream, f.bb, f.prompts, f.train, SelectorMode::Oracle, 5);
  // Every test feature is its own centroid, so routing is exact.
  StrategyReport routed = oracle;
  routed.selector = SelectorMode::KMeans;
  for (std::size_t s = 0; s < f.stream.size(); ++s) routed.pool.centroids[f.stream[s].id] = features[s];
  evaluate_snapshots(routed, f.bb, f.stream, features, f.prompts.prefix_variant);
  for (const auto& [id, acc] : routed.selector_accuracy) ASSERT_EQ(acc, 1.0) << "domain " << id;
  EXPECT_EQ(routed.matrix, oracle.matrix);
  EXPECT_EQ(routed.aa, oracle.aa);
}

TEST(RunStrategy, ZeroShotMatchesDirectEvaluation) {
  Fixture f = make_fixture();
  auto rep = run_strategy(StrategyId::ZeroShot, f.stream, f.bb, f.prompts, f.train, SelectorMode::KMeans, 1);
  for (std::size_t i = 1; i <= 3; ++i) EXPECT_EQ(rep.matrix.at(3, i), zero_shot_accuracy(f.bb, f.stream[i - 1].test));
  EXPECT_EQ(rep.af, 0.0);
  EXPECT_EQ(rep.trainable_param_count, 0u);
  EXPECT_TRUE(rep.bank.snapshots.empty());
}

TEST(RunStrategy, SingleSharedKeepsOnePromptSet) {
  Fixture f = make_fixture();
  auto rep =
      run_strategy(StrategyId::SingleSharedContinual, f.stream, f.bb, f.prompts, f.train, SelectorMode::KMeans, 1);
  EXPECT_EQ(rep.bank.snapshots.size(), 1u);
  EXPECT_TRUE(rep.selector_accuracy.empty());
  EXPECT_EQ(rep.trainable_param_count, rep.stored_param_count);
  for (std::size_t t = 1; t <= 3; ++t)
    for (std::size_t i = 1; i <= t; ++i) EXPECT_TRUE(rep.matrix.get(t, i).has_value());
  EXPECT_LE(rep.af, 0.0);
}

TEST(RunStrategy, AblationsTuneTheRightTensors) {
  Fixture f = make_fixture();
  const std::size_t d = f.bb.config.dim, layers = f.prompts.layer_end - f.prompts.layer_start + 1;
  struct Want {
    StrategyId id;
    std::size_t count;
  };
  const PromptConfig& p = f.prompts;
  for (auto w : {Want{StrategyId::CpPrompt, (p.common_length + layers * p.image_prompt_length + p.text_prompt_length) * d},
                 Want{StrategyId::CommonOnly, p.common_length * d},
                 Want{StrategyId::PersonalizedOnly, (layers * p.image_prompt_length + p.text_prompt_length) * d}}) {
    auto rep = run_strategy(w.id, f.stream, f.bb, p, f.train, SelectorMode::Oracle, 1);
    EXPECT_EQ(rep.trainable_param_count, w.count) << strategy_name(w.id);
    EXPECT_EQ(rep.stored_param_count, 3 * w.count) << strategy_name(w.id);
    EXPECT_DOUBLE_EQ(rep.trainable_fraction,
                     double(w.count) / double(w.count + f.bb.parameter_count()));
  }
}

TEST(Infer, UnknownOracleDomainIsUsageError) {
  Fixture f = make_fixture();
  auto rep = run_strategy(StrategyId::CpPrompt, f.stream, f.bb, f.prompts, f.train, SelectorMode::Oracle, 1);
  EXPECT_THROW(infer(f.stream[0].test, {}, rep.bank, {}, f.bb, SelectorMode::Oracle, 7, PrefixVariant::PrefixOne),
               UsageError);
  EXPECT_THROW(infer(f.stream[0].test.image(0), rep.bank, {}, f.bb, SelectorMode::Oracle, 0), UsageError);
}

TEST(Infer, SingleImageMatchesBatchAndRepeats) {
  Fixture f = make_fixture();
  auto rep = run_strategy(StrategyId::CpPrompt, f.stream, f.bb, f.prompts, f.train, SelectorMode::KMeans, 1);
  const auto& test = f.stream[1].test;
  auto batch = infer(test, selector_features(f.bb, test), rep.bank, rep.pool, f.bb, SelectorMode::KMeans, 0,
                     PrefixVariant::PrefixOne);
  for (std::size_t i = 0; i < test.size(); ++i) {
    auto one = infer(test.image(i), rep.bank, rep.pool, f.bb, SelectorMode::KMeans);
    EXPECT_EQ(one.label, batch[i].label);
    EXPECT_EQ(one.domain, batch[i].domain);
    EXPECT_EQ(one.domain, select_domain(test.image(i), rep.pool, f.bb));
  }
}

TEST(Infer, OracleReproducesEndOfTrainingAccuracy) {
  Fixture f = make_fixture();
  auto rep = run_strategy(StrategyId::CpPrompt, f.stream, f.bb, f.prompts, f.train, SelectorMode::Oracle, 3);
  for (const auto& d : f.stream) {
    auto pred = infer(d.test, {}, rep.bank, {}, f.bb, SelectorMode::Oracle, d.id, PrefixVariant::PrefixOne);
    EXPECT_EQ(prediction_accuracy(pred, d.test), rep.matrix.at(d.id, d.id));
  }
}

TEST(Report, PromptBankRoundTripsThroughCppm) {
  Fixture f = make_fixture();
  auto rep = run_strategy(StrategyId::CpPrompt, f.stream, f.bb, f.prompts, f.train, SelectorMode::KMeans, 1);
  fs::path dir = fs::temp_directory_path() / "cpprompt_tests" / "report";
  fs::remove_all(dir);
  auto paths = write_report(dir, "cp_prompt_kmeans_seed1", rep, "deadbeef");
  ASSERT_TRUE(fs::exists(paths.matrix_csv));
  ASSERT_TRUE(fs::exists(paths.summary_json));
  PromptBank back = load_prompt_bank(paths.prompt_bank, f.bb);
  ASSERT_EQ(back.snapshots.size(), rep.bank.snapshots.size());
  for (const auto& [id, set] : rep.bank.snapshots) {
    EXPECT_TRUE(same_snapshot(back.snapshots.at(id), set));
    EXPECT_EQ(back.checksums.at(id), rep.bank.checksums.at(id));
    EXPECT_TRUE(bit_equal(back.class_embeddings.at(id), rep.bank.class_embeddings.at(id)));
  }
  auto j = detail::read_json(paths.summary_json);
  for (const char* key : {"strategy", "seed", "AA", "AF", "selector_accuracy", "trainable_param_count",
                          "trainable_fraction", "config_hash"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(j["config_hash"], "deadbeef");
  EXPECT_EQ(j["AA"].get<double>(), rep.aa);
}
