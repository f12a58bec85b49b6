#include "fgvl/corpus.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace fgvl::corpus {

using nlohmann::json;

Image Study::load_image() const {
  if (inline_image) return *inline_image;
  FGVL_CHECK(!image_path.empty(), "study " + id + ": no image attached");
  FGVL_CHECK(std::filesystem::exists(image_path),
             "study " + id + ": missing image file " + image_path);
  return read_image(image_path);
}

Corpus load_manifest(const std::string& path) {
  std::ifstream f(path);
  FGVL_CHECK(f.good(), "cannot open manifest: " + path);
  Corpus corpus;
  std::set<std::string> seen_ids;
  std::string line;
  size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (trim_copy(line).empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const std::exception& e) {
      fail("manifest " + path + " line " + std::to_string(lineno) + ": " + e.what());
    }
    auto where = [&] { return path + " line " + std::to_string(lineno); };
    FGVL_CHECK(rec.is_object() && rec.contains("id") && rec["id"].is_string(),
               "manifest " + where() + ": missing string field 'id'");
    Study s;
    s.id = rec["id"].get<std::string>();
    FGVL_CHECK(!s.id.empty(), "manifest " + where() + ": empty id");
    FGVL_CHECK(seen_ids.insert(s.id).second,
               "manifest " + where() + ": duplicate id '" + s.id + "'");
    if (rec.contains("image") && rec["image"].is_string())
      s.image_path = rec["image"].get<std::string>();
    if (rec.contains("report") && rec["report"].is_string())
      s.report_text = rec["report"].get<std::string>();
    if (rec.contains("gold_triplets")) {
      FGVL_CHECK(rec["gold_triplets"].is_array(),
                 "manifest " + where() + ": gold_triplets must be an array");
      std::vector<DiseaseTriplet> ts;
      for (const auto& enc : rec["gold_triplets"]) {
        FGVL_CHECK(enc.is_string(), "manifest " + where() + ": triplet not a string");
        auto t = DiseaseTriplet::decode(enc.get<std::string>());
        FGVL_CHECK(t.has_value(),
                   "manifest " + where() + ": malformed triplet '" +
                       enc.get<std::string>() + "'");
        ts.push_back(*t);
      }
      s.gold_triplets = std::move(ts);
    }
    if (rec.contains("gold_categories")) {
      FGVL_CHECK(rec["gold_categories"].is_array(),
                 "manifest " + where() + ": gold_categories must be an array");
      std::vector<std::string> cats;
      for (const auto& c : rec["gold_categories"]) cats.push_back(normalize_token(c.get<std::string>()));
      s.gold_categories = std::move(cats);
    }
    FGVL_CHECK(!s.report_text.empty() || s.gold_triplets.has_value(),
               "manifest " + where() + ": empty report without gold_triplets");
    corpus.studies.push_back(std::move(s));
  }
  return corpus;
}

void write_manifest(const std::string& path, const Corpus& corpus) {
  std::ostringstream out;
  for (const auto& s : corpus.studies) {
    json rec;
    rec["id"] = s.id;
    rec["image"] = s.image_path;
    rec["report"] = s.report_text;
    if (s.gold_triplets) {
      json ts = json::array();
      for (const auto& t : *s.gold_triplets) ts.push_back(t.encode());
      rec["gold_triplets"] = ts;
    }
    if (s.gold_categories) rec["gold_categories"] = *s.gold_categories;
    out << rec.dump() << "\n";
  }
  write_file_atomic(path, out.str());
}

Corpus materialize_images(const Corpus& corpus, const std::string& dir) {
  std::filesystem::create_directories(dir);
  Corpus out = corpus;
  for (auto& s : out.studies) {
    if (!s.inline_image) continue;
    std::string p = (std::filesystem::path(dir) / (s.id + ".fgvl")).string();
    write_raw_image(p, *s.inline_image);
    s.image_path = p;
    s.inline_image.reset();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

void SyntheticSpec::validate() const {
  FGVL_CHECK(!attribute_vocab.empty(), "synthetic spec: empty attribute vocab");
  FGVL_CHECK(!category_defs.empty(), "synthetic spec: no categories");
  std::set<std::string> vocab(attribute_vocab.begin(), attribute_vocab.end());
  for (const auto& [cat, attrs] : category_defs) {
    FGVL_CHECK(!attrs.empty(), "synthetic spec: category '" + cat + "' has no attributes");
    for (const auto& a : attrs)
      FGVL_CHECK(vocab.count(a), "synthetic spec: category '" + cat +
                                     "' references unknown attribute '" + a + "'");
  }
  std::set<std::string> train_attrs;
  std::set<std::string> held(held_out_categories.begin(), held_out_categories.end());
  for (const auto& [cat, attrs] : category_defs)
    if (!held.count(cat)) train_attrs.insert(attrs.begin(), attrs.end());
  for (const auto& h : held_out_categories) {
    auto it = category_defs.find(h);
    FGVL_CHECK(it != category_defs.end(),
               "synthetic spec: held-out category '" + h + "' not defined");
    for (const auto& a : it->second)
      FGVL_CHECK(train_attrs.count(a), "synthetic spec: held-out category '" + h +
                                           "' uses attribute '" + a +
                                           "' absent from all training categories");
  }
  for (const auto& [cat, alias] : aliases) {
    FGVL_CHECK(category_defs.count(cat),
               "synthetic spec: alias for unknown category '" + cat + "'");
    FGVL_CHECK(!alias.empty(), "synthetic spec: empty alias for '" + cat + "'");
    FGVL_CHECK(!category_defs.count(alias),
               "synthetic spec: alias '" + alias + "' collides with a category name");
  }
  FGVL_CHECK(alias_rate >= 0.0 && alias_rate <= 1.0, "synthetic spec: alias_rate out of range");
  FGVL_CHECK(normal_rate >= 0.0 && normal_rate < 1.0, "synthetic spec: normal_rate out of range");
  FGVL_CHECK(image_size >= 16, "synthetic spec: image_size too small");
}

std::vector<std::string> SyntheticSpec::training_categories() const {
  std::set<std::string> held(held_out_categories.begin(), held_out_categories.end());
  std::vector<std::string> out;
  for (const auto& [cat, _] : category_defs)
    if (!held.count(cat)) out.push_back(cat);
  return out;
}

SyntheticSpec default_synthetic_spec() {
  SyntheticSpec spec;
  spec.attribute_vocab = {"opacity-blob", "dark-band",     "speckle",
                          "ring-shadow",  "gradient-haze", "left-strip"};
  spec.category_defs = {
      {"focal opacity", {"opacity-blob"}},
      {"band shadow", {"dark-band"}},
      {"speckle pattern", {"speckle"}},
      {"ring lesion", {"ring-shadow"}},
      {"diffuse haze", {"gradient-haze"}},
      {"left strip sign", {"left-strip"}},
      {"banded opacity", {"opacity-blob", "dark-band"}},
      {"speckled ring", {"speckle", "ring-shadow"}},
  };
  spec.held_out_categories = {"banded opacity", "speckled ring"};
  spec.aliases = {
      {"focal opacity", "round glow"},    {"band shadow", "dim bar"},
      {"speckle pattern", "stipple texture"}, {"ring lesion", "annular mark"},
      {"diffuse haze", "gray fog"},       {"left strip sign", "side ribbon"},
  };
  return spec;
}

namespace {

constexpr const char* kSeverities[] = {"mild", "moderate", "severe"};
constexpr double kSeverityGain[] = {0.45, 0.70, 0.95};
constexpr const char* kLocations[] = {"left", "central", "right"};

struct Placement {
  double cx_lo, cx_hi;  // fraction of width
};

Placement location_placement(size_t loc_idx) {
  switch (loc_idx) {
    case 0: return {0.18, 0.38};
    case 2: return {0.62, 0.82};
    default: return {0.40, 0.60};
  }
}

void render_attribute(Image& img, const std::string& attr, double gain,
                      const Placement& place, Rng& rng) {
  const double W = img.width, H = img.height;
  if (attr == "opacity-blob") {
    double cx = rng.uniform(place.cx_lo, place.cx_hi) * W;
    double cy = rng.uniform(0.25, 0.75) * H;
    double sigma = rng.uniform(0.06, 0.12) * W;
    double amp = gain * rng.uniform(0.7, 1.0);
    for (uint32_t r = 0; r < img.height; ++r)
      for (uint32_t c = 0; c < img.width; ++c) {
        double d2 = (c - cx) * (c - cx) + (r - cy) * (r - cy);
        img.at(r, c) += amp * std::exp(-d2 / (2.0 * sigma * sigma));
      }
  } else if (attr == "dark-band") {
    uint32_t h = 3 + static_cast<uint32_t>(rng.below(uint64_t(H * 0.1)));
    uint32_t y0 = static_cast<uint32_t>(rng.uniform(0.2, 0.7) * H);
    double amp = gain * rng.uniform(0.5, 0.8);
    for (uint32_t r = y0; r < std::min<uint32_t>(y0 + h, img.height); ++r)
      for (uint32_t c = 0; c < img.width; ++c) img.at(r, c) -= amp;
  } else if (attr == "speckle") {
    size_t n = 30 + rng.below(30);
    double amp = gain * 0.9;
    for (size_t i = 0; i < n; ++i) {
      uint32_t r = static_cast<uint32_t>(rng.below(img.height));
      uint32_t c = static_cast<uint32_t>(rng.uniform(place.cx_lo - 0.15, place.cx_hi + 0.15) * W);
      if (c >= img.width) c = img.width - 1;
      img.at(r, c) += amp;
      if (c + 1 < img.width) img.at(r, c + 1) += amp * 0.5;
      if (r + 1 < img.height) img.at(r + 1, c) += amp * 0.5;
    }
  } else if (attr == "ring-shadow") {
    double cx = rng.uniform(place.cx_lo, place.cx_hi) * W;
    double cy = rng.uniform(0.3, 0.7) * H;
    double radius = rng.uniform(0.14, 0.24) * W;
    double amp = gain * rng.uniform(0.7, 1.0);
    double thick = 0.055 * W;
    for (uint32_t r = 0; r < img.height; ++r)
      for (uint32_t c = 0; c < img.width; ++c) {
        double d = std::sqrt((c - cx) * (c - cx) + (r - cy) * (r - cy));
        double band = std::abs(d - radius);
        if (band < thick) img.at(r, c) += amp * (1.0 - band / thick);
      }
  } else if (attr == "gradient-haze") {
    bool horizontal = rng.below(2) == 0;
    double amp = gain * rng.uniform(0.4, 0.6);
    for (uint32_t r = 0; r < img.height; ++r)
      for (uint32_t c = 0; c < img.width; ++c) {
        double t = horizontal ? c / (W - 1) : r / (H - 1);
        img.at(r, c) += amp * t;
      }
  } else if (attr == "left-strip") {
    uint32_t w = 4 + static_cast<uint32_t>(rng.below(uint64_t(W * 0.12)));
    uint32_t x0 = 1 + static_cast<uint32_t>(rng.below(uint64_t(W * 0.08)));
    double amp = gain * rng.uniform(0.75, 1.0);
    for (uint32_t r = 0; r < img.height; ++r)
      for (uint32_t c = x0; c < std::min<uint32_t>(x0 + w, img.width); ++c)
        img.at(r, c) += amp;
  } else {
    fail("synthetic corpus: no renderer registered for attribute '" + attr + "'");
  }
}

Image render_base(uint32_t size, Rng& rng) {
  Image img;
  img.height = img.width = size;
  img.values.resize(size_t(size) * size);
  for (auto& v : img.values) v = 0.15 + 0.03 * rng.gaussian();
  return img;
}

void clamp_image(Image& img) {
  for (auto& v : img.values) v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
}

Study make_disease_study(const SyntheticSpec& spec, const std::string& prefix,
                         size_t index, const std::string& category, Rng rng) {
  size_t sev_idx = rng.below(3);
  size_t loc_idx = rng.below(3);
  Placement place = location_placement(loc_idx);

  Image img = render_base(spec.image_size, rng);
  const auto& attrs = spec.category_defs.at(category);
  for (const auto& a : attrs)
    render_attribute(img, a, kSeverityGain[sev_idx], place, rng);
  clamp_image(img);

  // Reports sometimes use a synonymous surface form for the category; the
  // triplet records the surface form while gold_categories stay canonical.
  std::string surface = category;
  auto alias = spec.aliases.find(category);
  if (alias != spec.aliases.end() && rng.uniform(0.0, 1.0) < spec.alias_rate)
    surface = alias->second;

  Study s;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s-%06zu", prefix.c_str(), index);
  s.id = buf;
  s.inline_image = std::move(img);
  s.report_text = std::string("There is a ") + kSeverities[sev_idx] + " " + surface +
                  " in the " + kLocations[loc_idx] + " zone.";
  s.gold_triplets = {DiseaseTriplet::normalized(kSeverities[sev_idx], kLocations[loc_idx], surface)};
  s.gold_categories = {category};
  return s;
}

Study make_normal_study(const SyntheticSpec& spec, const std::string& prefix,
                        size_t index, Rng rng) {
  Image img = render_base(spec.image_size, rng);
  clamp_image(img);
  Study s;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s-n-%06zu", prefix.c_str(), index);
  s.id = buf;
  s.inline_image = std::move(img);
  s.report_text = "No acute findings.";
  s.gold_triplets = std::vector<DiseaseTriplet>{};
  s.gold_categories = {"no finding"};
  return s;
}

Corpus generate_split(const SyntheticSpec& spec, const std::string& prefix,
                      const std::vector<std::string>& categories, size_t n,
                      uint64_t stream_tag) {
  Corpus corpus;
  corpus.image_height = corpus.image_width = spec.image_size;
  if (n == 0) return corpus;
  Rng base = Rng(spec.seed).split(stream_tag);

  // Round-robin category assignment keeps per-category counts equal; the
  // normals are appended on top of n at the configured rate, then the whole
  // split is shuffled deterministically.
  for (size_t i = 0; i < n; ++i) {
    const std::string& cat = categories[i % categories.size()];
    corpus.studies.push_back(make_disease_study(spec, prefix, i, cat, base.split(1000 + i)));
  }
  size_t n_normal = spec.normal_rate <= 0.0
                        ? 0
                        : static_cast<size_t>(std::llround(n * spec.normal_rate / (1.0 - spec.normal_rate)));
  for (size_t i = 0; i < n_normal; ++i)
    corpus.studies.push_back(make_normal_study(spec, prefix, i, base.split(5000000 + i)));

  Rng shuffle_rng = base.split(42);
  for (size_t i = corpus.studies.size(); i > 1; --i)
    std::swap(corpus.studies[i - 1], corpus.studies[shuffle_rng.below(i)]);
  return corpus;
}

}  // namespace

SyntheticCorpora generate_synthetic_corpus(const SyntheticSpec& spec) {
  spec.validate();
  std::vector<std::string> train_cats = spec.training_categories();
  std::vector<std::string> all_cats;
  for (const auto& [cat, _] : spec.category_defs) all_cats.push_back(cat);

  SyntheticCorpora out;
  out.train = generate_split(spec, "train", train_cats, spec.n_train, 1);
  out.eval = generate_split(spec, "eval", all_cats, spec.n_eval, 2);
  return out;
}

}  // namespace fgvl::corpus
