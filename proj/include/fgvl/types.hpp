#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fgvl/core.hpp"

namespace fgvl {

// (severity?, location?, category) extracted from one report sentence.
// category is non-empty, lowercase, whitespace-collapsed; severity/location
// are absent or non-empty.
struct DiseaseTriplet {
  std::optional<std::string> severity;
  std::optional<std::string> location;
  std::string category;

  bool operator==(const DiseaseTriplet&) const = default;

  void validate() const {
    FGVL_CHECK(!category.empty(), "triplet: empty category");
    FGVL_CHECK(category == normalize_token(category), "triplet: category not normalized");
    FGVL_CHECK(!severity || !severity->empty(), "triplet: empty severity present");
    FGVL_CHECK(!location || !location->empty(), "triplet: empty location present");
  }

  // "severity|location|category" with empty slots for absent fields
  std::string encode() const {
    return (severity ? *severity : "") + "|" + (location ? *location : "") + "|" + category;
  }

  static DiseaseTriplet normalized(std::string_view sev, std::string_view loc,
                                   std::string_view cat) {
    DiseaseTriplet t;
    std::string s = normalize_token(sev), l = normalize_token(loc);
    if (!s.empty()) t.severity = s;
    if (!l.empty()) t.location = l;
    t.category = normalize_token(cat);
    return t;
  }

  static std::optional<DiseaseTriplet> decode(std::string_view encoded) {
    auto parts = split(encoded, '|');
    if (parts.size() != 3) return std::nullopt;
    auto t = normalized(parts[0], parts[1], parts[2]);
    if (t.category.empty()) return std::nullopt;
    return t;
  }
};

}  // namespace fgvl
