#pragma once

// Category -> explanation dictionary, structured-label rendering, and the
// random text masking applied to trainer-side label texts.

#include <map>
#include <optional>
#include <string>

#include "fgvl/core.hpp"
#include "fgvl/types.hpp"

namespace fgvl::knowledge {

struct KnowledgeDictionary {
  std::map<std::string, std::string> entries;  // normalized category -> explanation
  std::string version = "1";

  static KnowledgeDictionary load(const std::string& path);
  void save(const std::string& path) const;
  void validate() const;
};

enum class LookupPolicy { kStrict, kFallback };

// Exact-key lookup; on miss, strict throws and fallback returns the category
// token itself (the label degrades to its fine-grained entity).
std::string lookup_explanation(const std::string& category, const KnowledgeDictionary& dict,
                               LookupPolicy policy);

enum class RenderMode { kEntity, kFgEntity, kFgEntityPlusExplanation };

RenderMode render_mode_from_string(const std::string& s);
std::string to_string(RenderMode m);

struct StructuredLabel {
  std::string text;
  DiseaseTriplet triplet;
  std::optional<std::string> explanation;
};

StructuredLabel render_structured_label(const DiseaseTriplet& triplet,
                                        const KnowledgeDictionary& dict, RenderMode mode,
                                        LookupPolicy policy = LookupPolicy::kFallback);

inline constexpr const char* kMaskToken = "[MASK]";

// Each whitespace token is independently replaced by "[MASK]" with
// probability mask_prob; tokens of the category itself are never masked.
std::string mask_text(const StructuredLabel& label, double mask_prob, uint64_t rng_seed);

}  // namespace fgvl::knowledge
