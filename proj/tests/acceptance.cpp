// End-to-end acceptance run on the default desk-scale configuration. Prints
// one PASS/FAIL line per criterion and exits nonzero if any fails.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <sys/wait.h>

#include "pretrained.hpp"
#include "support.hpp"

using namespace cpprompt;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string pts(double x) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * x;
  return os.str();
}

int failures = 0;

void verdict(int n, bool ok, const std::string& what, const std::string& detail) {
  std::cout << (ok ? "PASS" : "FAIL") << " criterion " << n << " (" << what << "): " << detail << std::endl;
  failures += !ok;
}

void criterion(int n, const std::string& what, const std::function<std::pair<bool, std::string>()>& body) {
  try {
    auto [ok, detail] = body();
    verdict(n, ok, what, detail);
  } catch (const std::exception& e) {
    verdict(n, false, what, std::string("threw: ") + e.what());
  }
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

struct Runs {
  std::vector<std::uint64_t> seeds;
  std::map<std::uint64_t, std::vector<DomainSplits>> streams;
  std::map<std::uint64_t, std::vector<Tensor>> features;
  std::map<StrategyId, std::map<std::uint64_t, StrategyReport>> reports;
  double first_run_seconds = 0.0;

  std::vector<double> aa(StrategyId id) const {
    std::vector<double> out;
    for (const auto& [seed, r] : reports.at(id)) out.push_back(r.aa);
    return out;
  }
  std::vector<double> af(StrategyId id) const {
    std::vector<double> out;
    for (const auto& [seed, r] : reports.at(id)) out.push_back(r.af);
    return out;
  }
};

std::string list(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : " ") + pts(x);
  return "[" + s + "]";
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream f(p);
  std::string line;
  while (std::getline(f, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

int main() {
  const RunConfig cfg = testing_support::default_run_config();
  const StreamSpec stream_spec = load_stream(cfg.stream_manifest);
  const Backbone bb = testing_support::pretrained_backbone(cfg);
  const std::uint32_t checksum_before = bb.checksum();
  std::cout << "backbone " << bb.parameter_count() << " parameters, checksum " << checksum_before << std::endl;

  criterion(1, "prompt gradients vs central differences", [&] {
    const auto t0 = Clock::now();
    const auto stream = generate_stream(stream_spec, 1);
    const Dataset& d = stream.front().train;
    std::mt19937_64 rng(17);
    CommonPrompt common = init_common_prompt(cfg.prompts, bb.config.dim, rng);
    PersonalizedImagePrompts image = init_image_prompts(cfg.prompts, bb.config.dim, rng);
    PersonalizedTextPrompt text = init_text_prompt(cfg.prompts, bb.config.dim, rng);
    std::uniform_int_distribution<std::size_t> pick(0, d.size() - 1);
    const std::size_t idx[2] = {pick(rng), pick(rng)};
    const auto views = image_views(d, idx);
    const int labels[2] = {d.labels[idx[0]], d.labels[idx[1]]};
    auto forward = [&](Tape& t) {
      Tensor img = image_forward(t, views, bb, common, image, cfg.prompts.prefix_variant);
      return loss(t, logits(t, img, text_forward(t, bb, text), bb.temperature), labels, cfg.prompts.loss_mode);
    };
    Tape tape;
    backward(forward(tape), tape);
    auto f = [&] {
      Tape t;
      return forward(t).item();
    };
    double worst = 0.0;
    const auto params = trainable_params(common, image, text);
    for (const auto& p : params) worst = std::max(worst, testing_support::fd_relative_error(p, f, 1e-6));
    const double secs = seconds_since(t0);
    std::ostringstream os;
    os << count_elements(params) << " prompt parameters in " << params.size() << " tensors, worst relative error "
       << worst << " (limit 1e-4), " << secs << " s (limit 60 s)";
    return std::pair{worst < 1e-4 && secs < 60.0, os.str()};
  });

  criterion(3, "zero-length prompts reproduce zero-shot logits", [&] {
    DatasetSpec spec{bb.config.classes, 20, bb.config.image_size, bb.config.image_size};
    const Dataset ds = generate_base(spec, 77, Split::Test);
    PromptConfig empty = cfg.prompts;
    empty.common_length = empty.image_prompt_length = empty.text_prompt_length = 0;
    std::mt19937_64 rng(3);
    const CommonPrompt common = init_common_prompt(empty, bb.config.dim, rng);
    const PersonalizedImagePrompts image = init_image_prompts(empty, bb.config.dim, rng);
    const PersonalizedTextPrompt text = init_text_prompt(empty, bb.config.dim, rng);
    const auto idx = all_indices(ds);
    const auto views = image_views(ds, idx);

    Tape tp;
    Tensor prompted = logits(tp, image_forward(tp, views, bb, common, image, cfg.prompts.prefix_variant),
                             text_forward(tp, bb, text), bb.temperature);

    // Zero-shot path assembled from backbone pieces, one image at a time.
    Tape tz;
    const Tensor class_emb = encode_text(tz, bb.class_tokens, bb);
    std::vector<Tensor> rows;
    for (const auto& v : views) {
      Tensor x = embed_patches(tz, v, bb.config.image_size, bb.config.image_size, bb);
      Tensor tokens = concat_rows(tz, {image_cls_row(tz, bb), x});
      Tensor h = transformer_forward(tz, tokens, bb.vision.layers, bb.config.heads, bb.config.ln_eps, tokens.dim(0),
                                     KVPrefixProvider{}, nullptr);
      rows.push_back(logits(tz, vision_head(tz, h, tokens.dim(0), bb), class_emb, bb.temperature));
    }
    const Tensor zero_shot = concat_rows(tz, rows);
    const bool same = bit_equal(prompted, zero_shot);
    return std::pair{same, std::to_string(ds.size()) + " samples, logits " + (same ? "bit-identical" : "differ")};
  });

  // Every strategy on every seed; criteria 2 and 4-9 read from these runs.
  Runs runs;
  runs.seeds = cfg.seeds;
  const auto t_all = Clock::now();
  for (auto seed : runs.seeds) {
    runs.streams[seed] = generate_stream(stream_spec, seed);
    runs.features[seed] = stream_test_features(bb, runs.streams[seed]);
    for (auto id : kAllStrategies) {
      const auto t0 = Clock::now();
      auto rep = run_strategy(id, runs.streams[seed], bb, cfg.prompts, cfg.train, SelectorMode::KMeans, seed,
                              &runs.features[seed]);
      const double secs = seconds_since(t0);
      if (id == StrategyId::CpPrompt && seed == runs.seeds.front()) runs.first_run_seconds = secs;
      std::cout << "  seed " << seed << ' ' << std::setw(24) << std::left << strategy_name(id) << std::right
                << " AA " << pts(rep.aa) << " AF " << pts(rep.af) << "  (" << std::fixed << std::setprecision(1)
                << secs << " s)" << std::defaultfloat << std::setprecision(6) << std::endl;
      runs.reports[id].emplace(seed, std::move(rep));
    }
  }
  std::cout << "  all runs: " << seconds_since(t_all) << " s" << std::endl;

  criterion(2, "frozen backbone", [&] {
    const std::uint32_t after = bb.checksum();
    std::ostringstream os;
    os << "checksum " << checksum_before << " -> " << after << " after " << runs.seeds.size() * kAllStrategies.size()
       << " runs; 3-domain cp_prompt run " << runs.first_run_seconds << " s (limit 600 s)";
    return std::pair{after == checksum_before && runs.first_run_seconds < 600.0, os.str()};
  });

  criterion(4, "oracle selection never forgets", [&] {
    bool ok = true;
    std::ostringstream os;
    for (auto seed : runs.seeds) {
      StrategyReport rep = runs.reports.at(StrategyId::CpPrompt).at(seed);
      rep.selector = SelectorMode::Oracle;
      evaluate_snapshots(rep, bb, runs.streams.at(seed), runs.features.at(seed), cfg.prompts.prefix_variant);
      const std::size_t s = rep.matrix.domains();
      for (std::size_t i = 1; i <= s; ++i)
        for (std::size_t t = i; t <= s; ++t) ok = ok && rep.matrix.at(t, i) == rep.matrix.at(i, i);
      ok = ok && rep.af == 0.0;
      os << "seed " << seed << " AA " << pts(rep.aa) << " AF " << rep.af << "; ";
    }
    os << (ok ? "every column constant" : "a column changed");
    return std::pair{ok, os.str()};
  });

  criterion(5, "ablation ordering of mean AA", [&] {
    std::map<StrategyId, double> m;
    for (auto id : kAllStrategies) m[id] = mean(runs.aa(id));
    const double tol = 0.01, cp = m[StrategyId::CpPrompt], zs = m[StrategyId::ZeroShot];
    bool ok = cp >= m[StrategyId::CommonOnly] - tol && cp >= m[StrategyId::PersonalizedOnly] - tol;
    std::ostringstream os;
    for (auto id : kAllStrategies) {
      ok = ok && m[id] >= zs - tol;
      os << strategy_name(id) << ' ' << pts(m[id]) << ' ' << list(runs.aa(id)) << "; ";
    }
    return std::pair{ok, os.str()};
  });

  criterion(6, "forgetting of a single shared prompt", [&] {
    const double shared = mean(runs.af(StrategyId::SingleSharedContinual));
    const double cp = mean(runs.af(StrategyId::CpPrompt));
    std::ostringstream os;
    os << "single_shared_continual AF " << pts(shared) << ' ' << list(runs.af(StrategyId::SingleSharedContinual))
       << " (limit < -2); cp_prompt AF " << pts(cp) << ' ' << list(runs.af(StrategyId::CpPrompt))
       << " (limit |AF| <= 1)";
    return std::pair{shared < -0.02 && std::abs(cp) <= 0.01, os.str()};
  });

  criterion(7, "Prefix-One vs split prefix", [&] {
    const double cp = mean(runs.aa(StrategyId::CpPrompt));
    const double split = mean(runs.aa(StrategyId::SplitPrefixVariant));
    std::ostringstream os;
    os << "prefix_one AA " << pts(cp) << ' ' << list(runs.aa(StrategyId::CpPrompt)) << ", split_prefix AA "
       << pts(split) << ' ' << list(runs.aa(StrategyId::SplitPrefixVariant));
    return std::pair{cp >= split - 0.01, os.str()};
  });

  criterion(8, "selector quality and K insensitivity", [&] {
    std::ostringstream os;
    // Routing on mutually distinct domains.
    StreamSpec separated = stream_spec;
    separated.domains = {DomainTransform::stripes(2), DomainTransform::noise(0.5, 11), DomainTransform::blur(5)};
    double worst = 1.0;
    for (auto seed : runs.seeds) {
      const auto stream = generate_stream(separated, seed);
      FeaturePool pool;
      for (const auto& d : stream) build_feature_pool(pool, d.id, d.train, bb, 5, detail::mix_seed(seed, 1000 + d.id));
      for (const auto& d : stream) {
        const Tensor f = selector_features(bb, d.test);
        std::size_t own = 0;
        for (std::size_t i = 0; i < f.rows(); ++i) own += select_domain(f.data().subspan(i * f.cols(), f.cols()), pool) == d.id;
        worst = std::min(worst, static_cast<double>(own) / static_cast<double>(f.rows()));
      }
    }
    os << "separated stream worst per-domain routing " << pts(worst) << "% (limit 90)";
    std::string default_routing;
    for (const auto& [seed, rep] : runs.reports.at(StrategyId::CpPrompt))
      for (const auto& [id, acc] : rep.selector_accuracy) default_routing += ' ' + pts(acc);
    os << "; default stream routing at K=5:" << default_routing;
    // K sweep on the trained banks.
    std::vector<double> per_k;
    for (std::size_t k : {1u, 3u, 5u, 10u}) {
      std::vector<double> aa;
      for (auto seed : runs.seeds)
        aa.push_back(reevaluate_with_k(runs.reports.at(StrategyId::CpPrompt).at(seed), bb, runs.streams.at(seed),
                                       runs.features.at(seed), k, cfg.train.kmeans_iters, cfg.prompts.prefix_variant)
                         .aa);
      per_k.push_back(mean(aa));
      os << "; K=" << k << " AA " << pts(per_k.back()) << ' ' << list(aa);
    }
    const double spread = *std::max_element(per_k.begin(), per_k.end()) - *std::min_element(per_k.begin(), per_k.end());
    os << "; spread " << pts(spread) << " (limit < 5)";
    return std::pair{worst >= 0.9 && spread < 0.05, os.str()};
  });

  criterion(9, "trainable fraction", [&] {
    const fs::path dir = fs::temp_directory_path() / "cpprompt_acceptance";
    const auto seed = runs.seeds.front();
    auto paths = write_report(dir, "cp_prompt_kmeans_seed" + std::to_string(seed),
                              runs.reports.at(StrategyId::CpPrompt).at(seed), config_hash(cfg, stream_spec));
    const Json j = detail::read_json(paths.summary_json);
    const double frac = j.at("trainable_fraction").get<double>();
    std::ostringstream os;
    os << j.at("trainable_param_count") << " tuned of " << j.at("backbone_param_count") << " backbone parameters, "
       << "fraction " << frac * 100.0 << "% (limit < 2%)";
    return std::pair{frac < 0.02, os.str()};
  });

  criterion(10, "layer-range grid", [&] {
    const fs::path dir = fs::temp_directory_path() / "cpprompt_acceptance" / "grid";
    fs::remove_all(dir);
    fs::create_directories(dir);
    Json j = to_json(cfg);
    j["stream"] = fs::absolute(cfg.stream_manifest).string();
    j["backbone_file"] = testing_support::cached_backbone_path(cfg).string();
    j["output_dir"] = dir.string();
    std::ofstream(dir / "config.json") << j.dump(2);
    const auto seed = runs.seeds.front();
    const std::string cmd = std::string(CP_PROMPT_CLI) + " layer-grid --config " + (dir / "config.json").string() +
                            " --seed " + std::to_string(seed) + " > " + (dir / "log.txt").string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) return std::pair{false, "cp_prompt layer-grid failed: " + cmd};
    const auto rows = read_csv(dir / ("layer_grid_kmeans_seed" + std::to_string(seed) + ".csv"));
    const double floor = runs.reports.at(StrategyId::ZeroShot).at(seed).aa - 0.01;
    std::size_t cells = 0;
    double lowest = 1.0;
    for (std::size_t r = 1; r < rows.size(); ++r)
      for (std::size_t c = 1; c < rows[r].size(); ++c)
        if (!rows[r][c].empty()) {
          ++cells;
          lowest = std::min(lowest, std::stod(rows[r][c]));
        }
    const std::size_t r = bb.config.vision_layers, expected = r * (r + 1) / 2;
    std::ostringstream os;
    os << cells << " cells (expected " << expected << "), lowest AA " << pts(lowest) << " vs zero-shot "
       << pts(floor + 0.01) << " - 1";
    return std::pair{cells == expected && lowest >= floor, os.str()};
  });

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
