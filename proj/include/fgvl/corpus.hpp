#pragma once

// Corpus ingestion and the deterministic synthetic attribute-composable
// corpus used for desk-scale verification.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fgvl/core.hpp"
#include "fgvl/types.hpp"

namespace fgvl::corpus {

struct Study {
  std::string id;
  std::string image_path;             // may be empty for text-only fixtures
  std::optional<Image> inline_image;  // synthetic studies carry images inline
  std::string report_text;
  std::optional<std::vector<DiseaseTriplet>> gold_triplets;
  std::optional<std::vector<std::string>> gold_categories;

  // Resolves the image: inline if present, otherwise loaded from disk.
  Image load_image() const;
};

struct Corpus {
  std::vector<Study> studies;
  uint32_t image_height = 64;
  uint32_t image_width = 64;

  size_t size() const { return studies.size(); }
};

// Manifest: UTF-8, one JSON record per line with fields
// {id, image, report, gold_triplets?, gold_categories?}; triplets encoded as
// "severity|location|category" strings.
Corpus load_manifest(const std::string& path);
void write_manifest(const std::string& path, const Corpus& corpus);

// Writes every study's image next to `dir` as raw float sidecars and returns
// a corpus whose studies reference them by path.
Corpus materialize_images(const Corpus& corpus, const std::string& dir);

struct SyntheticSpec {
  std::vector<std::string> attribute_vocab;
  std::map<std::string, std::vector<std::string>> category_defs;
  std::vector<std::string> held_out_categories;
  // Reports name a finding by a colloquial synonym (alias) rather than the
  // canonical taxonomy term, mirroring the vocabulary gap between free-text
  // reports and label taxonomies. The alias appears in the report text and the
  // extracted triplet; the study's gold_categories always carry the canonical
  // name, and the knowledge dictionary carries both surface forms.
  std::map<std::string, std::string> aliases;
  double alias_rate = 0.0;
  size_t n_train = 2000;
  size_t n_eval = 400;
  uint64_t seed = 7;
  uint32_t image_size = 64;
  double normal_rate = 0.2;  // fraction of extra "no acute findings" studies

  void validate() const;
  std::vector<std::string> training_categories() const;
};

// The shipped default: 8 categories over 6 attributes, 2 held out.
SyntheticSpec default_synthetic_spec();

struct SyntheticCorpora {
  Corpus train;  // training categories only, plus normals
  Corpus eval;   // all categories including held-out, plus normals
};

// Fully determined by (spec.seed, study index); regeneration is bit-identical.
SyntheticCorpora generate_synthetic_corpus(const SyntheticSpec& spec);

}  // namespace fgvl::corpus
