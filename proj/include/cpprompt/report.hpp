#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include "cpprompt/config.hpp"

namespace cpprompt {

inline Json summary_json(const StrategyReport& r, const std::string& config_hash) {
  Json sel = Json::object();
  for (const auto& [id, acc] : r.selector_accuracy) sel[std::to_string(id)] = acc;
  Json matrix = Json::array();
  for (std::size_t t = 1; t <= r.matrix.domains(); ++t) {
    Json row = Json::array();
    for (std::size_t i = 1; i <= t; ++i) row.push_back(r.matrix.at(t, i));
    matrix.push_back(row);
  }
  Json j = {{"strategy", strategy_name(r.strategy)},
            {"selector", selector_name(r.selector)},
            {"seed", r.seed},
            {"AA", r.aa},
            {"AF", r.af},
            {"selector_accuracy", r.selector_accuracy.empty() ? Json(nullptr) : sel},
            {"trainable_param_count", r.trainable_param_count},
            {"stored_param_count", r.stored_param_count},
            {"backbone_param_count", r.backbone_param_count},
            {"trainable_fraction", r.trainable_fraction},
            {"config_hash", config_hash},
            {"accuracy_matrix", matrix}};
  return j;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error("cannot write " + path.string());
}

inline void write_json(const std::filesystem::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

struct ReportPaths {
  std::filesystem::path matrix_csv, summary_json, prompt_bank;
};

/// Writes `<stem>_matrix.csv`, `<stem>_summary.json` and, when the strategy
/// stored prompts, `<stem>_prompts.cppm` under `dir`.
inline ReportPaths write_report(const std::filesystem::path& dir, const std::string& stem, const StrategyReport& r,
                                const std::string& config_hash) {
  ReportPaths p{dir / (stem + "_matrix.csv"), dir / (stem + "_summary.json"), {}};
  write_text(p.matrix_csv, r.matrix.to_csv());
  write_json(p.summary_json, summary_json(r, config_hash));
  auto tensors = r.bank.named_tensors();
  if (!tensors.empty()) {
    p.prompt_bank = dir / (stem + "_prompts.cppm");
    std::filesystem::create_directories(dir);
    cppm::save(p.prompt_bank, tensors);
  }
  return p;
}

/// Reads a prompt-bank file written by write_report and rebuilds the cached
/// class embeddings against `bb`.
inline PromptBank load_prompt_bank(const std::filesystem::path& path, const Backbone& bb) {
  PromptBank bank;
  for (auto& nt : cppm::load(path)) {
    const auto slash = nt.name.find('/');
    if (nt.name.rfind("domain", 0) != 0 || slash == std::string::npos) {
      throw FormatError(path.string() + ": unexpected tensor '" + nt.name + "' in prompt bank");
    }
    int id = 0;
    try {
      id = std::stoi(nt.name.substr(6, slash - 6));
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": bad domain id in '" + nt.name + "'");
    }
    const std::string field = nt.name.substr(slash + 1);
    if (nt.tensor.rank() != 2 || nt.tensor.dim(1) != bb.config.dim) {
      throw ShapeError(path.string() + ": '" + nt.name + "' has shape " + to_string(nt.tensor.shape()));
    }
    auto& set = bank.snapshots[id];
    if (field == "common") {
      set.common.values = nt.tensor;
    } else if (field == "text") {
      set.text.values = nt.tensor;
    } else if (field.rfind("img/layer", 0) == 0) {
      set.image.layers[std::stoul(field.substr(9))] = nt.tensor;
    } else {
      throw FormatError(path.string() + ": unexpected tensor '" + nt.name + "' in prompt bank");
    }
  }
  for (auto& [id, set] : bank.snapshots) {
    if (!set.common.values.defined() || !set.text.values.defined()) {
      throw FormatError(path.string() + ": domain " + std::to_string(id) + " is incomplete");
    }
    bank.checksums[id] = set.checksum();
    Tape tape;
    bank.class_embeddings[id] = text_forward(tape, bb, set.text);
  }
  return bank;
}

}  // namespace cpprompt
