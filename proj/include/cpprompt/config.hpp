#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cpprompt/pretrain.hpp"
#include "cpprompt/strategy.hpp"

namespace cpprompt {

using Json = nlohmann::ordered_json;

struct PretrainSettings {
  PretrainConfig config;
  std::size_t base_per_class = 500;
  std::uint64_t data_seed = 1;
};

/// Everything a CLI command needs. Paths are resolved against the config
/// file's directory.
struct RunConfig {
  BackboneConfig backbone;
  PromptConfig prompts;
  TrainConfig train;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  PretrainSettings pretrain;
  std::filesystem::path stream_manifest = "stream.json";
  std::filesystem::path backbone_file = "backbone.cppm";
  std::filesystem::path output_dir = "out";
};

namespace detail {

/// Strict object reader: every key is required, unknown keys are rejected.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }
  ~ObjectReader() = default;

  const Json& operator[](const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) throw ConfigError("missing config field '" + field(key) + "'");
    return *it;
  }

  template <typename T>
  T get(const std::string& key) {
    const Json& v = (*this)[key];
    try {
      return v.get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config field '" + field(key) + "' has the wrong type");
    }
  }

  std::size_t count(const std::string& key) {
    const Json& v = (*this)[key];
    if (!v.is_number_integer() || v.get<long long>() < 0) {
      throw ConfigError("config field '" + field(key) + "' must be a non-negative integer");
    }
    return v.get<std::size_t>();
  }

  double number(const std::string& key) {
    const Json& v = (*this)[key];
    if (!v.is_number()) throw ConfigError("config field '" + field(key) + "' must be a number");
    return v.get<double>();
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  /// Call once every expected key has been read.
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown config field '" + field(it.key()) + "'");
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config" : "config field '" + path_ + "'"; }

  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline Json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline Json transform_to_json(const DomainTransform& t) {
  return {{"transform", transform_name(t.kind)}, {"strength", t.strength}, {"seed", t.seed}};
}

inline DomainTransform transform_from_json(const Json& j, const std::string& path) {
  ObjectReader r(j, path);
  DomainTransform t;
  t.kind = parse_transform_kind(r.get<std::string>("transform"));
  t.strength = r.number("strength");
  t.seed = r.get<std::uint64_t>("seed");
  r.finish();
  return t;
}

inline std::string loss_name(LossMode m) { return m == LossMode::SoftmaxCE ? "softmax_ce" : "per_class_bce"; }
inline std::string variant_name(PrefixVariant v) { return v == PrefixVariant::PrefixOne ? "prefix_one" : "split_prefix"; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Stream manifest

inline Json stream_to_json(const StreamSpec& s) {
  Json domains = Json::array();
  for (const auto& t : s.domains) domains.push_back(detail::transform_to_json(t));
  return {{"classes", s.classes},         {"train_per_class", s.train_per_class},
          {"test_per_class", s.test_per_class}, {"height", s.height},
          {"width", s.width},             {"domains", domains}};
}

inline StreamSpec stream_from_json(const Json& j) {
  detail::ObjectReader r(j, "");
  StreamSpec s;
  s.classes = r.count("classes");
  s.train_per_class = r.count("train_per_class");
  s.test_per_class = r.count("test_per_class");
  s.height = r.count("height");
  s.width = r.count("width");
  const Json& d = r["domains"];
  if (!d.is_array() || d.empty()) throw ConfigError("config field 'domains' must be a non-empty array");
  for (std::size_t i = 0; i < d.size(); ++i)
    s.domains.push_back(detail::transform_from_json(d[i], "domains[" + std::to_string(i) + "]"));
  r.finish();
  if (s.classes < 2) throw ConfigError("stream needs at least 2 classes");
  if (s.train_per_class == 0 || s.test_per_class == 0) throw ConfigError("stream splits must be non-empty");
  return s;
}

inline StreamSpec load_stream(const std::filesystem::path& path) { return stream_from_json(detail::read_json(path)); }

// ---------------------------------------------------------------------------
// RunConfig

inline Json to_json(const RunConfig& c) {
  const auto& b = c.backbone;
  const auto& p = c.prompts;
  const auto& t = c.train;
  Json styles = Json::array();
  for (const auto& s : c.pretrain.config.styles) styles.push_back(detail::transform_to_json(s));
  return {
      {"backbone",
       {{"dim", b.dim},
        {"vision_layers", b.vision_layers},
        {"text_layers", b.text_layers},
        {"heads", b.heads},
        {"image_size", b.image_size},
        {"channels", b.channels},
        {"patch", b.patch},
        {"vocab", b.vocab},
        {"classes", b.classes},
        {"label_tokens", b.label_tokens},
        {"mlp_ratio", b.mlp_ratio}}},
      {"prompts",
       {{"common_length", p.common_length},
        {"image_prompt_length", p.image_prompt_length},
        {"text_prompt_length", p.text_prompt_length},
        {"layer_start", p.layer_start},
        {"layer_end", p.layer_end},
        {"loss", detail::loss_name(p.loss_mode)},
        {"prefix_variant", detail::variant_name(p.prefix_variant)},
        {"init_std", p.init_std}}},
      {"train",
       {{"epochs", t.epochs},
        {"lr", t.lr},
        {"momentum", t.momentum},
        {"batch", t.batch},
        {"kmeans_k", t.kmeans_k},
        {"kmeans_iters", t.kmeans_iters},
        {"seeds", c.seeds}}},
      {"pretrain",
       {{"epochs", c.pretrain.config.epochs},
        {"batch", c.pretrain.config.batch},
        {"lr", c.pretrain.config.lr},
        {"seed", c.pretrain.config.seed},
        {"base_per_class", c.pretrain.base_per_class},
        {"data_seed", c.pretrain.data_seed},
        {"styles", styles}}},
      {"stream", c.stream_manifest.generic_string()},
      {"backbone_file", c.backbone_file.generic_string()},
      {"output_dir", c.output_dir.generic_string()},
  };
}

inline RunConfig run_config_from_json(const Json& j, const std::filesystem::path& base_dir = {}) {
  detail::ObjectReader root(j, "");
  RunConfig c;
  {
    detail::ObjectReader r(root["backbone"], "backbone");
    auto& b = c.backbone;
    b.dim = r.count("dim");
    b.vision_layers = r.count("vision_layers");
    b.text_layers = r.count("text_layers");
    b.heads = r.count("heads");
    b.image_size = r.count("image_size");
    b.channels = r.count("channels");
    b.patch = r.count("patch");
    b.vocab = r.count("vocab");
    b.classes = r.count("classes");
    b.label_tokens = r.count("label_tokens");
    b.mlp_ratio = r.count("mlp_ratio");
    r.finish();
  }
  {
    detail::ObjectReader r(root["prompts"], "prompts");
    auto& p = c.prompts;
    p.common_length = r.count("common_length");
    p.image_prompt_length = r.count("image_prompt_length");
    p.text_prompt_length = r.count("text_prompt_length");
    p.layer_start = r.count("layer_start");
    p.layer_end = r.count("layer_end");
    const auto loss = r.get<std::string>("loss");
    if (loss == "softmax_ce") {
      p.loss_mode = LossMode::SoftmaxCE;
    } else if (loss == "per_class_bce") {
      p.loss_mode = LossMode::PerClassBCE;
    } else {
      throw ConfigError("config field 'prompts.loss' must be softmax_ce or per_class_bce");
    }
    const auto variant = r.get<std::string>("prefix_variant");
    if (variant == "prefix_one") {
      p.prefix_variant = PrefixVariant::PrefixOne;
    } else if (variant == "split_prefix") {
      p.prefix_variant = PrefixVariant::SplitPrefix;
    } else {
      throw ConfigError("config field 'prompts.prefix_variant' must be prefix_one or split_prefix");
    }
    p.init_std = r.number("init_std");
    r.finish();
  }
  {
    detail::ObjectReader r(root["train"], "train");
    auto& t = c.train;
    t.epochs = r.count("epochs");
    t.lr = r.number("lr");
    t.momentum = r.number("momentum");
    t.batch = r.count("batch");
    t.kmeans_k = r.count("kmeans_k");
    t.kmeans_iters = r.count("kmeans_iters");
    c.seeds = r.get<std::vector<std::uint64_t>>("seeds");
    r.finish();
    if (t.batch == 0) throw ConfigError("config field 'train.batch' must be positive");
    if (t.kmeans_k == 0) throw ConfigError("config field 'train.kmeans_k' must be positive");
    if (!(t.lr > 0.0)) throw ConfigError("config field 'train.lr' must be positive");
    if (c.seeds.empty()) throw ConfigError("config field 'train.seeds' must not be empty");
  }
  {
    detail::ObjectReader r(root["pretrain"], "pretrain");
    auto& p = c.pretrain;
    p.config.epochs = r.count("epochs");
    p.config.batch = r.count("batch");
    p.config.lr = r.number("lr");
    p.config.seed = r.get<std::uint64_t>("seed");
    p.base_per_class = r.count("base_per_class");
    p.data_seed = r.get<std::uint64_t>("data_seed");
    const Json& styles = r["styles"];
    if (!styles.is_array()) throw ConfigError("config field 'pretrain.styles' must be an array");
    p.config.styles.clear();
    for (std::size_t i = 0; i < styles.size(); ++i)
      p.config.styles.push_back(detail::transform_from_json(styles[i], "pretrain.styles[" + std::to_string(i) + "]"));
    r.finish();
    if (p.config.batch == 0) throw ConfigError("config field 'pretrain.batch' must be positive");
  }
  auto resolve = [&](const std::string& key) {
    std::filesystem::path p = root.get<std::string>(key);
    return p.is_relative() && !base_dir.empty() ? base_dir / p : p;
  };
  c.stream_manifest = resolve("stream");
  c.backbone_file = resolve("backbone_file");
  c.output_dir = resolve("output_dir");
  root.finish();

  try {
    c.backbone.validate();
    c.prompts.validate(c.backbone.vision_layers);
  } catch (const Error& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  return run_config_from_json(detail::read_json(path), path.parent_path());
}

/// CRC-32 of the canonical JSON of the config and its stream, as 8 hex digits.
inline std::string config_hash(const RunConfig& c, const StreamSpec& stream) {
  Json j = to_json(c);
  j.erase("stream");
  j.erase("backbone_file");
  j.erase("output_dir");
  j["stream"] = stream_to_json(stream);
  const std::string text = j.dump();
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", crc32({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()}));
  return buf;
}

/// Applies one `KEY=VALUE` override. Keys are the short names L_C, L_PI,
/// L_PT, K, epochs, lr, batch, layer_start, layer_end, or any dotted path
/// into the JSON form such as `prompts.init_std`.
inline RunConfig apply_override(const RunConfig& c, const std::string& key, const std::string& value) {
  static const std::map<std::string, std::string> aliases = {
      {"L_C", "prompts.common_length"},  {"L_PI", "prompts.image_prompt_length"},
      {"L_PT", "prompts.text_prompt_length"}, {"K", "train.kmeans_k"},
      {"epochs", "train.epochs"},        {"lr", "train.lr"},
      {"batch", "train.batch"},          {"layer_start", "prompts.layer_start"},
      {"layer_end", "prompts.layer_end"}};
  const auto it = aliases.find(key);
  const std::string path = it == aliases.end() ? key : it->second;
  Json j = to_json(c);
  Json* node = &j;
  std::stringstream ss(path);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!node->is_object() || !node->contains(part)) throw UsageError("unknown sweep key '" + key + "'");
    node = &(*node)[part];
  }
  if (node->is_object() || node->is_array()) throw UsageError("sweep key '" + key + "' is not a scalar");
  Json parsed;
  try {
    parsed = Json::parse(value);
  } catch (const nlohmann::json::parse_error&) {
    parsed = value;  // bare string
  }
  *node = parsed;
  return run_config_from_json(j);
}

/// Parses `KEY=V1,V2,...`.
inline std::pair<std::string, std::vector<std::string>> parse_sweep(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size()) {
    throw UsageError("sweep must look like KEY=V1,V2,... (got '" + spec + "')");
  }
  std::vector<std::string> values;
  std::stringstream ss(spec.substr(eq + 1));
  std::string v;
  while (std::getline(ss, v, ','))
    if (!v.empty()) values.push_back(v);
  if (values.empty()) throw UsageError("sweep '" + spec + "' lists no values");
  return {spec.substr(0, eq), values};
}

}  // namespace cpprompt
