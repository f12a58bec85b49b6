#pragma once

// Run configuration: a flat key = value file (TOML subset), CLI overrides,
// and validation across module invariants.

#include <map>
#include <string>
#include <vector>

#include "fgvl/model.hpp"

namespace fgvl::config {

// Flat TOML subset: `key = value` lines, # comments, quoted strings,
// integers, floats, booleans.
std::map<std::string, std::string> parse_flat_toml(const std::string& text);

struct RunConfig {
  model::TrainConfig train;
  std::string corpus_kind = "synthetic";  // or "manifest"
  std::string manifest_path;
  std::string eval_manifest_path;
  std::string dictionary_path = "data/dictionary.json";
  size_t synthetic_n_train = 2000;
  size_t synthetic_n_eval = 400;
  uint32_t image_size = 64;
  std::string out_dir = "runs/out";

  static RunConfig from_file(const std::string& path);
  static RunConfig from_map(const std::map<std::string, std::string>& kv);
  std::string to_toml() const;
  std::vector<std::string> violations() const;
};

}  // namespace fgvl::config
