#include "fgvl/knowledge.hpp"

#include <set>
#include <sstream>

#include <json.hpp>

namespace fgvl::knowledge {

using nlohmann::json;

KnowledgeDictionary KnowledgeDictionary::load(const std::string& path) {
  json doc;
  try {
    doc = json::parse(read_text_file(path));
  } catch (const std::exception& e) {
    fail("dictionary " + path + ": " + e.what());
  }
  FGVL_CHECK(doc.is_object() && doc.contains("entries") && doc["entries"].is_object(),
             "dictionary " + path + ": missing 'entries' object");
  KnowledgeDictionary dict;
  if (doc.contains("version")) dict.version = doc["version"].get<std::string>();
  for (const auto& [key, value] : doc["entries"].items())
    dict.entries[normalize_token(key)] = value.get<std::string>();
  dict.validate();
  return dict;
}

void KnowledgeDictionary::save(const std::string& path) const {
  json doc;
  doc["version"] = version;
  doc["entries"] = json::object();
  for (const auto& [k, v] : entries) doc["entries"][k] = v;
  write_file_atomic(path, doc.dump(2) + "\n");
}

void KnowledgeDictionary::validate() const {
  for (const auto& [k, v] : entries) {
    FGVL_CHECK(k == normalize_token(k), "dictionary key not normalized: '" + k + "'");
    FGVL_CHECK(!v.empty(), "dictionary entry for '" + k + "' is empty");
  }
}

std::string lookup_explanation(const std::string& category, const KnowledgeDictionary& dict,
                               LookupPolicy policy) {
  auto it = dict.entries.find(category);
  if (it != dict.entries.end()) return it->second;
  if (policy == LookupPolicy::kStrict)
    fail("unknown category in knowledge dictionary: '" + category + "'");
  return category;
}

RenderMode render_mode_from_string(const std::string& s) {
  if (s == "entity") return RenderMode::kEntity;
  if (s == "fg_entity") return RenderMode::kFgEntity;
  if (s == "fg_entity_plus_explanation") return RenderMode::kFgEntityPlusExplanation;
  fail("unknown render mode: '" + s + "'");
}

std::string to_string(RenderMode m) {
  switch (m) {
    case RenderMode::kEntity: return "entity";
    case RenderMode::kFgEntity: return "fg_entity";
    case RenderMode::kFgEntityPlusExplanation: return "fg_entity_plus_explanation";
  }
  return "?";
}

StructuredLabel render_structured_label(const DiseaseTriplet& triplet,
                                        const KnowledgeDictionary& dict, RenderMode mode,
                                        LookupPolicy policy) {
  triplet.validate();
  StructuredLabel label;
  label.triplet = triplet;

  std::vector<std::string> fg_parts;
  if (mode != RenderMode::kEntity) {
    if (triplet.severity) fg_parts.push_back(*triplet.severity);
    if (triplet.location) fg_parts.push_back(*triplet.location);
  }
  fg_parts.push_back(triplet.category);
  label.text = join(fg_parts, " ");

  if (mode == RenderMode::kFgEntityPlusExplanation) {
    label.explanation = lookup_explanation(triplet.category, dict, policy);
    label.text += ", where " + triplet.category + " is " + *label.explanation;
  }
  return label;
}

std::string mask_text(const StructuredLabel& label, double mask_prob, uint64_t rng_seed) {
  FGVL_CHECK(mask_prob >= 0.0 && mask_prob <= 1.0, "mask_prob out of [0,1]");
  auto tokens = whitespace_tokens(label.text);
  std::set<std::string> category_tokens;
  for (const auto& t : word_tokens(label.triplet.category)) category_tokens.insert(t);

  Rng rng(rng_seed);
  std::vector<std::string> out;
  out.reserve(tokens.size());
  for (const auto& tok : tokens) {
    double u = rng.uniform();
    bool is_category = false;
    for (const auto& wt : word_tokens(tok))
      if (category_tokens.count(wt)) is_category = true;
    if (!is_category && u < mask_prob)
      out.emplace_back(kMaskToken);
    else
      out.push_back(tok);
  }
  return join(out, " ");
}

}  // namespace fgvl::knowledge
