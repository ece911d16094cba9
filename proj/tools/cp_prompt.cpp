// Command-line driver: pretrain, generate data, run domain streams, layer
// grids and attention dumps.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cpprompt/cpprompt.hpp"

namespace fs = std::filesystem;
using namespace cpprompt;

namespace {

enum Exit { kOk = 0, kFailure = 1, kUsage = 2, kTraining = 3 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

RunConfig load(const Common& c) {
  RunConfig cfg = load_run_config(c.config);
  if (!c.out.empty()) cfg.output_dir = c.out;
  return cfg;
}

std::vector<std::uint64_t> seeds_for(const Common& c, const RunConfig& cfg) {
  return c.seed ? std::vector<std::uint64_t>{*c.seed} : cfg.seeds;
}

Backbone load_backbone(const RunConfig& cfg) {
  if (!fs::exists(cfg.backbone_file)) {
    throw UsageError("backbone file " + cfg.backbone_file.string() + " not found; run `cp_prompt pretrain` first");
  }
  return load_params(cfg.backbone_file, cfg.backbone);
}

std::string hex32(std::uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

void log(const std::string& msg) { std::cerr << msg << '\n'; }

// ---------------------------------------------------------------------------

int cmd_default_config(const std::string& out) {
  const fs::path dir = out.empty() ? fs::path(".") : fs::path(out);
  RunConfig cfg;
  cfg.train.epochs = 10;
  write_json(dir / "config.json", to_json(cfg));
  write_json(dir / "stream.json", stream_to_json(default_stream()));
  std::cout << (dir / "config.json").string() << '\n' << (dir / "stream.json").string() << '\n';
  return kOk;
}

int cmd_pretrain(const Common& c) {
  RunConfig cfg = load(c);
  if (c.seed) cfg.pretrain.config.seed = *c.seed;
  DatasetSpec spec;
  spec.classes = cfg.backbone.classes;
  spec.per_class = cfg.pretrain.base_per_class;
  spec.height = spec.width = cfg.backbone.image_size;
  const Dataset base = generate_base(spec, cfg.pretrain.data_seed);
  PretrainReport report;
  const auto t0 = std::chrono::steady_clock::now();
  Backbone bb = contrastive_pretrain(base, cfg.backbone, cfg.pretrain.config, &report);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (cfg.backbone_file.has_parent_path()) fs::create_directories(cfg.backbone_file.parent_path());
  save_params(cfg.backbone_file, bb);

  const auto stream = generate_stream(load_stream(cfg.stream_manifest), cfg.pretrain.data_seed);
  Json zs = Json::object();
  for (const auto& d : stream) zs[std::to_string(d.id)] = zero_shot_accuracy(bb, d.test);
  Json metrics = {{"seed", cfg.pretrain.config.seed},
                  {"epochs", cfg.pretrain.config.epochs},
                  {"epoch_loss", report.epoch_loss},
                  {"train_accuracy", report.train_accuracy},
                  {"stream_zero_shot_accuracy", zs},
                  {"parameter_count", bb.parameter_count()},
                  {"checksum", hex32(bb.checksum())},
                  {"seconds", secs}};
  write_json(cfg.output_dir / "pretrain_metrics.json", metrics);
  std::cout << cfg.backbone_file.string() << " checksum " << hex32(bb.checksum()) << " train accuracy "
            << report.train_accuracy << '\n';
  return kOk;
}

int cmd_generate(const Common& c) {
  RunConfig cfg = load(c);
  const StreamSpec spec = load_stream(cfg.stream_manifest);
  for (auto seed : seeds_for(c, cfg)) {
    const fs::path dir = cfg.output_dir / ("data_seed" + std::to_string(seed));
    fs::create_directories(dir);
    for (const auto& d : generate_stream(spec, seed)) {
      const std::string stem = "domain" + std::to_string(d.id);
      dild::save(dir / (stem + "_train.dild"), d.train);
      dild::save(dir / (stem + "_test.dild"), d.test);
    }
    write_json(dir / "manifest.json", {{"seed", seed}, {"stream", stream_to_json(spec)}});
    std::cout << dir.string() << '\n';
  }
  return kOk;
}

int cmd_run(const Common& c, const std::string& strategy, const std::string& selector,
            const std::vector<std::string>& sweep_args) {
  RunConfig cfg = load(c);
  const SelectorMode mode = parse_selector(selector);
  std::vector<StrategyId> strategies;
  if (strategy == "all") {
    strategies.assign(kAllStrategies.begin(), kAllStrategies.end());
  } else {
    strategies.push_back(parse_strategy(strategy));
  }

  // A sweep may be given as `KEY=V1,V2` optionally preceded by a label.
  std::string sweep_key;
  std::vector<std::string> sweep_values;
  for (const auto& a : sweep_args) {
    if (a.find('=') == std::string::npos) continue;
    if (!sweep_key.empty()) throw UsageError("only one KEY=V1,... sweep is supported per run");
    std::tie(sweep_key, sweep_values) = parse_sweep(a);
  }
  if (!sweep_args.empty() && sweep_key.empty()) throw UsageError("--sweep needs KEY=V1,V2,...");

  std::vector<std::pair<std::string, RunConfig>> variants;
  if (sweep_key.empty()) {
    variants.emplace_back("", cfg);
  } else {
    for (const auto& v : sweep_values) variants.emplace_back("_" + sweep_key + "=" + v, apply_override(cfg, sweep_key, v));
  }

  const StreamSpec spec = load_stream(cfg.stream_manifest);
  const Backbone bb = load_backbone(cfg);
  for (auto seed : seeds_for(c, cfg)) {
    const auto stream = generate_stream(spec, seed);
    const auto features = stream_test_features(bb, stream);
    for (const auto& [suffix, vcfg] : variants) {
      const std::string hash = config_hash(vcfg, spec);
      for (auto id : strategies) {
        const auto t0 = std::chrono::steady_clock::now();
        auto rep = run_strategy(id, stream, bb, vcfg.prompts, vcfg.train, mode, seed, &features);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const std::string stem = strategy_name(id) + suffix + "_" + selector + "_seed" + std::to_string(seed);
        auto paths = write_report(cfg.output_dir, stem, rep, hash);
        std::cout << stem << " AA " << rep.aa << " AF " << rep.af << " (" << secs << " s) -> "
                  << paths.summary_json.string() << '\n';
      }
    }
  }
  return kOk;
}

int cmd_layer_grid(const Common& c, const std::string& selector) {
  RunConfig cfg = load(c);
  const SelectorMode mode = parse_selector(selector);
  const StreamSpec spec = load_stream(cfg.stream_manifest);
  const Backbone bb = load_backbone(cfg);
  const std::size_t r = bb.config.vision_layers;
  for (auto seed : seeds_for(c, cfg)) {
    const auto stream = generate_stream(spec, seed);
    const auto features = stream_test_features(bb, stream);
    std::vector<std::vector<std::optional<double>>> grid(r, std::vector<std::optional<double>>(r));
    for (std::size_t s = 0; s < r; ++s)
      for (std::size_t e = s; e < r; ++e) {
        PromptConfig p = cfg.prompts;
        p.layer_start = s;
        p.layer_end = e;
        auto rep = run_strategy(StrategyId::CpPrompt, stream, bb, p, cfg.train, mode, seed, &features);
        grid[s][e] = rep.aa;
        log("layers " + std::to_string(s) + ".." + std::to_string(e) + " AA " + std::to_string(rep.aa));
      }
    std::ostringstream os;
    os.precision(17);
    os << "start\\end";
    for (std::size_t e = 0; e < r; ++e) os << ',' << e;
    os << '\n';
    for (std::size_t s = 0; s < r; ++s) {
      os << s;
      for (std::size_t e = 0; e < r; ++e) {
        os << ',';
        if (grid[s][e]) os << *grid[s][e];
      }
      os << '\n';
    }
    const fs::path path = cfg.output_dir / ("layer_grid_" + selector + "_seed" + std::to_string(seed) + ".csv");
    write_text(path, os.str());
    std::cout << path.string() << '\n';
  }
  return kOk;
}

int cmd_dump_attention(const Common& c, const std::string& bank_path, int domain, long sample) {
  RunConfig cfg = load(c);
  const Backbone bb = load_backbone(cfg);
  const PromptBank bank = load_prompt_bank(bank_path, bb);
  if (!bank.snapshots.count(domain)) throw UsageError("prompt bank has no domain " + std::to_string(domain));
  const std::uint64_t seed = c.seed.value_or(cfg.seeds.front());
  const auto stream = generate_stream(load_stream(cfg.stream_manifest), seed);
  const DomainSplits* splits = nullptr;
  for (const auto& d : stream)
    if (d.id == domain) splits = &d;
  if (!splits) throw UsageError("stream has no domain " + std::to_string(domain));
  if (sample < 0 || static_cast<std::size_t>(sample) >= splits->test.size()) {
    throw UsageError("unknown sample " + std::to_string(sample) + " (domain " + std::to_string(domain) + " has " +
                     std::to_string(splits->test.size()) + " test samples)");
  }
  const auto& snap = bank.snapshots.at(domain);
  std::span<const float> one[1] = {splits->test.image(static_cast<std::size_t>(sample))};
  Tape tape;
  AttentionTrace trace;
  image_forward(tape, std::span<const std::span<const float>>(one), bb, snap.common, snap.image,
                cfg.prompts.prefix_variant, &trace);
  const std::size_t m = trace.front().rows;
  const fs::path dir = cfg.output_dir / ("attention_domain" + std::to_string(domain) + "_sample" + std::to_string(sample));
  for (std::size_t l = 0; l < trace.size(); ++l) {
    const auto& a = trace[l];
    std::ostringstream os;
    os.precision(17);
    os << "head";
    for (std::size_t j = 0; j < a.cols; ++j) os << ',' << (j < m ? "t" + std::to_string(j) : "p" + std::to_string(j - m));
    os << '\n';
    for (std::size_t h = 0; h < a.heads; ++h) {
      os << h;
      for (std::size_t j = 0; j < a.cols; ++j) os << ',' << a.at(0, h, 0, j);
      os << '\n';
    }
    write_text(dir / ("layer" + std::to_string(l) + ".csv"), os.str());
  }
  std::cout << dir.string() << '\n';
  return kOk;
}

void add_common(CLI::App* cmd, Common& c, bool need_config = true) {
  auto* opt = cmd->add_option("--config", c.config, "Run configuration JSON");
  if (need_config) opt->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Seed (default: every seed in the config)");
  cmd->add_option("--out", c.out, "Output directory (overrides output_dir)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CP-Prompt domain-incremental learning at desk scale"};
  app.require_subcommand(1);

  Common c;
  std::string strategy = "cp_prompt", selector = "kmeans", bank;
  std::vector<std::string> sweep;
  int domain = 1;
  long sample = 0;

  auto* def = app.add_subcommand("default-config", "Write config.json and stream.json with default settings");
  def->add_option("--out", c.out, "Directory to write into");

  auto* pre = app.add_subcommand("pretrain", "Contrastively pretrain and save the frozen backbone");
  add_common(pre, c);

  auto* gen = app.add_subcommand("generate", "Write the domain stream as DILD files");
  add_common(gen, c);

  auto* run = app.add_subcommand("run", "Run the domain stream under a strategy");
  add_common(run, c);
  run->add_option("--strategy", strategy, "Strategy name or 'all'");
  run->add_option("--selector", selector, "kmeans or oracle")->check(CLI::IsMember({"kmeans", "oracle"}));
  run->add_option("--sweep", sweep, "KEY=V1,V2,... (one report per value)")->expected(1, 2);

  auto* grid = app.add_subcommand("layer-grid", "AA for every personalized-prompt layer range");
  add_common(grid, c);
  grid->add_option("--selector", selector, "kmeans or oracle")->check(CLI::IsMember({"kmeans", "oracle"}));

  auto* dump = app.add_subcommand("dump-attention", "Write per-layer class-token attention for one test sample");
  add_common(dump, c);
  dump->add_option("--bank", bank, "Prompt-bank file written by run")->required()->check(CLI::ExistingFile);
  dump->add_option("--domain", domain, "Domain id")->required();
  dump->add_option("--sample", sample, "Test sample index")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*def) return cmd_default_config(c.out);
    if (*pre) return cmd_pretrain(c);
    if (*gen) return cmd_generate(c);
    if (*run) return cmd_run(c, strategy, selector, sweep);
    if (*grid) return cmd_layer_grid(c, selector);
    if (*dump) return cmd_dump_attention(c, bank, domain, sample);
  } catch (const TrainingError& e) {
    std::cerr << "training error: " << e.what() << '\n';
    return kTraining;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}
