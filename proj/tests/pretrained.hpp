#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <unistd.h>

#include "cpprompt/cpprompt.hpp"

namespace testing_support {

using namespace cpprompt;

/// The checked-in default configuration.
inline RunConfig default_run_config() {
  return load_run_config(std::filesystem::path(CP_PROMPT_SOURCE_DIR) / "configs" / "default.json");
}

inline Dataset pretrain_base(const RunConfig& cfg) {
  DatasetSpec spec;
  spec.classes = cfg.backbone.classes;
  spec.per_class = cfg.pretrain.base_per_class;
  spec.height = spec.width = cfg.backbone.image_size;
  return generate_base(spec, cfg.pretrain.data_seed);
}

/// Cache file for the pretrained backbone of `cfg`, named after the backbone
/// and pretraining settings.
inline std::filesystem::path cached_backbone_path(const RunConfig& cfg) {
  Json key = to_json(cfg);
  const std::string text = key["backbone"].dump() + key["pretrain"].dump();
  char hash[9];
  std::snprintf(hash, sizeof hash, "%08x", crc32({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()}));
  return std::filesystem::path(CP_PROMPT_CACHE_DIR) / ("backbone_" + std::string(hash) + ".cppm");
}

/// Pretrained, frozen backbone for `cfg`, read from the build-tree cache.
/// Slow (minutes) the first time.
inline Backbone pretrained_backbone(const RunConfig& cfg) {
  const auto path = cached_backbone_path(cfg);
  if (std::filesystem::exists(path)) {
    try {
      return load_params(path, cfg.backbone);
    } catch (const Error& e) {
      std::cerr << "ignoring cached backbone: " << e.what() << '\n';
    }
  }
  std::cerr << "pretraining backbone (cached at " << path.string() << ")...\n";
  const auto t0 = std::chrono::steady_clock::now();
  Backbone bb = contrastive_pretrain(pretrain_base(cfg), cfg.backbone, cfg.pretrain.config);
  bb.freeze();
  std::cerr << "pretraining took "
            << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s\n";
  std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp" + std::to_string(::getpid());
  save_params(tmp, bb);
  std::filesystem::rename(tmp, path);
  return bb;
}

}  // namespace testing_support
