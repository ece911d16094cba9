#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "support.hpp"

using namespace cpprompt;

namespace {

namespace fs = std::filesystem;

Json default_json() {
  RunConfig c;
  return to_json(c);
}

std::string error_of(const Json& j) {
  try {
    run_config_from_json(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(RunConfig, JsonRoundTrip) {
  RunConfig c;
  c.train.epochs = 7;
  c.prompts.loss_mode = LossMode::PerClassBCE;
  c.prompts.prefix_variant = PrefixVariant::SplitPrefix;
  c.seeds = {4, 9};
  RunConfig back = run_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
}

TEST(RunConfig, MissingFieldIsNamed) {
  Json j = default_json();
  j["train"].erase("lr");
  EXPECT_NE(error_of(j).find("missing config field 'train.lr'"), std::string::npos) << error_of(j);
}

TEST(RunConfig, UnknownFieldIsRejected) {
  Json j = default_json();
  j["prompts"]["colour"] = 3;
  EXPECT_NE(error_of(j).find("unknown config field 'prompts.colour'"), std::string::npos) << error_of(j);
}

TEST(RunConfig, InvalidValuesAreConfigErrors) {
  Json j = default_json();
  j["prompts"]["layer_end"] = 9;
  EXPECT_FALSE(error_of(j).empty());
  j = default_json();
  j["backbone"]["heads"] = 5;
  EXPECT_FALSE(error_of(j).empty());
  j = default_json();
  j["prompts"]["loss"] = "hinge";
  EXPECT_FALSE(error_of(j).empty());
  j = default_json();
  j["train"]["epochs"] = -1;
  EXPECT_FALSE(error_of(j).empty());
}

TEST(RunConfig, PathsResolveAgainstTheConfigFile) {
  fs::path dir = fs::temp_directory_path() / "cpprompt_tests" / "cfg";
  fs::create_directories(dir);
  Json j = default_json();
  j["stream"] = "s.json";
  j["backbone_file"] = "../bb.cppm";
  std::ofstream(dir / "c.json") << j.dump();
  RunConfig c = load_run_config(dir / "c.json");
  EXPECT_EQ(c.stream_manifest, dir / "s.json");
  EXPECT_EQ(c.backbone_file, dir / "../bb.cppm");
}

TEST(StreamManifest, RoundTrip) {
  StreamSpec s = default_stream();
  s.train_per_class = 17;
  s.domains.push_back(DomainTransform::quantize(3));
  StreamSpec back = stream_from_json(stream_to_json(s));
  EXPECT_EQ(stream_to_json(back), stream_to_json(s));
  Json bad = stream_to_json(s);
  bad["domains"][0]["transform"] = "swirl";
  EXPECT_THROW(stream_from_json(bad), ConfigError);
}

TEST(Overrides, AliasesAndDottedPaths) {
  RunConfig c;
  EXPECT_EQ(apply_override(c, "L_PI", "6").prompts.image_prompt_length, 6u);
  EXPECT_EQ(apply_override(c, "K", "10").train.kmeans_k, 10u);
  EXPECT_EQ(apply_override(c, "prompts.init_std", "0.5").prompts.init_std, 0.5);
  EXPECT_EQ(apply_override(c, "prompts.prefix_variant", "split_prefix").prompts.prefix_variant,
            PrefixVariant::SplitPrefix);
  EXPECT_THROW(apply_override(c, "nonsense", "1"), UsageError);
  EXPECT_THROW(apply_override(c, "prompts", "1"), UsageError);
  EXPECT_THROW(apply_override(c, "layer_end", "8"), ConfigError);
}

TEST(Overrides, ParseSweep) {
  auto [key, values] = parse_sweep("K=1,3,5,10");
  EXPECT_EQ(key, "K");
  EXPECT_EQ(values, (std::vector<std::string>{"1", "3", "5", "10"}));
  EXPECT_THROW(parse_sweep("K"), UsageError);
  EXPECT_THROW(parse_sweep("=1"), UsageError);
  EXPECT_THROW(parse_sweep("K=,"), UsageError);
}

TEST(ConfigHash, StableAndSensitive) {
  RunConfig c;
  const auto h = config_hash(c, default_stream());
  EXPECT_EQ(h.size(), 8u);
  EXPECT_EQ(h, config_hash(c, default_stream()));
  RunConfig moved = c;
  moved.output_dir = "/elsewhere";
  EXPECT_EQ(config_hash(moved, default_stream()), h);
  EXPECT_NE(config_hash(apply_override(c, "lr", "0.01"), default_stream()), h);
  StreamSpec s = default_stream();
  s.domains.pop_back();
  EXPECT_NE(config_hash(c, s), h);
}

TEST(Strategies, NamesRoundTrip) {
  for (auto id : kAllStrategies) EXPECT_EQ(parse_strategy(strategy_name(id)), id);
  EXPECT_THROW(parse_strategy("ewc"), UsageError);
  EXPECT_EQ(parse_selector("oracle"), SelectorMode::Oracle);
  EXPECT_THROW(parse_selector("random"), UsageError);
}
