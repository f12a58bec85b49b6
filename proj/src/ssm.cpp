#include "fgvl/ssm.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <unordered_map>

namespace fgvl::ssm {

namespace {

std::vector<double> hash_gaussian_vector(uint64_t seed, size_t dim) {
  Rng rng(seed);
  std::vector<double> v(dim);
  for (auto& x : v) x = rng.gaussian();
  return v;
}

void normalize_or_throw(std::vector<double>& v, const std::string& text) {
  double n = norm2(v.data(), v.size());
  FGVL_CHECK(n > 0.0, "embedding provider produced a zero vector for '" + text + "'");
  for (auto& x : v) x /= n;
}

}  // namespace

std::vector<double> HashUnitProvider::embed(const std::string& text) {
  auto v = hash_gaussian_vector(fnv1a64(text) ^ 0x9d2c5680ULL, dim_);
  normalize_or_throw(v, text);
  return v;
}

namespace {

// Function words and generic qualifiers carry no category information; a
// similarity model ignores them so label overlap reflects content words only.
bool is_stopword(const std::string& tok) {
  static const std::set<std::string> kQualifiers = {
      "mild", "moderate", "severe", "trace", "small",  "large",
      "left", "central", "right", "upper",   "lower",   "basal",  "bilateral",
      "apical", "peripheral"};
  return is_function_word(tok) || kQualifiers.count(tok) > 0;
}

}  // namespace

std::vector<double> BagOfTokensProvider::embed(const std::string& text) {
  std::vector<double> acc(dim_, 0.0);
  auto all_tokens = word_tokens(text);
  std::vector<std::string> tokens;
  for (const auto& t : all_tokens)
    if (!is_stopword(t)) tokens.push_back(t);
  if (tokens.empty()) tokens = all_tokens;  // all-stopword text keeps its tokens
  if (tokens.empty()) tokens.push_back(text);
  for (const auto& tok : tokens) {
    auto v = hash_gaussian_vector(fnv1a64(tok) ^ 0xb5297a4dULL, dim_);
    for (size_t i = 0; i < dim_; ++i) acc[i] += v[i];
  }
  normalize_or_throw(acc, text);
  return acc;
}

TableProvider::TableProvider(std::map<std::string, std::vector<double>> table)
    : table_(std::move(table)) {
  FGVL_CHECK(!table_.empty(), "table provider: empty table");
  dim_ = table_.begin()->second.size();
  for (const auto& [k, v] : table_)
    FGVL_CHECK(v.size() == dim_, "table provider: inconsistent dimension for '" + k + "'");
}

std::vector<double> TableProvider::embed(const std::string& text) {
  auto it = table_.find(text);
  FGVL_CHECK(it != table_.end(), "embedding provider has no entry for text '" + text + "'");
  return it->second;
}

std::unique_ptr<EmbeddingProvider> make_provider(const std::string& name, size_t dim) {
  if (name == "bag_of_tokens") return std::make_unique<BagOfTokensProvider>(dim);
  if (name == "hash_unit") return std::make_unique<HashUnitProvider>(dim);
  fail("unknown embedding provider: '" + name + "'");
}

void GroupedLabels::validate() const {
  FGVL_CHECK(!groups.empty(), "grouped labels: no images");
  for (size_t i = 0; i < groups.size(); ++i)
    FGVL_CHECK(!groups[i].empty(),
               "grouped labels: image " + std::to_string(i) + " has no labels");
}

size_t GroupedLabels::n_labels() const {
  size_t m = 0;
  for (const auto& g : groups) m += g.size();
  return m;
}

std::vector<std::string> GroupedLabels::flattened() const {
  std::vector<std::string> out;
  out.reserve(n_labels());
  for (const auto& g : groups) out.insert(out.end(), g.begin(), g.end());
  return out;
}

std::vector<size_t> GroupedLabels::counts() const {
  std::vector<size_t> out;
  out.reserve(groups.size());
  for (const auto& g : groups) out.push_back(g.size());
  return out;
}

SimilarityMatrix compute_ssm(const GroupedLabels& labels, EmbeddingProvider& provider) {
  labels.validate();
  const auto flat = labels.flattened();
  const size_t n = labels.n_images(), m = flat.size();

  // embed each distinct text exactly once
  std::unordered_map<std::string, std::vector<double>> cache;
  for (const auto& text : flat)
    if (!cache.count(text)) {
      auto v = provider.embed(text);
      normalize_or_throw(v, text);
      cache.emplace(text, std::move(v));
    }

  SimilarityMatrix out;
  out.values = Mat(n, m);
  out.row_counts = labels.counts();

  size_t block_start = 0;
  for (size_t i = 0; i < n; ++i) {
    const size_t c = labels.groups[i].size();
    for (size_t j = 0; j < m; ++j) {
      double best = -1.0;
      for (size_t t = block_start; t < block_start + c; ++t) {
        if (flat[t] == flat[j]) {  // identical text: cosine is 1 by definition
          best = 1.0;
          break;
        }
        const auto& u = cache.at(flat[t]);
        const auto& v = cache.at(flat[j]);
        best = std::max(best, dot(u.data(), v.data(), u.size()));
      }
      out.values.at(i, j) = std::clamp(best, 0.0, 1.0);
    }
    block_start += c;
  }
  return out;
}

SimilarityMatrix brute_force_ssm(const GroupedLabels& labels, EmbeddingProvider& provider) {
  labels.validate();
  const auto flat = labels.flattened();
  const size_t n = labels.n_images(), m = flat.size();

  // full M x M cosine matrix, re-embedding per cell
  Mat full(m, m);
  for (size_t t = 0; t < m; ++t)
    for (size_t j = 0; j < m; ++j)
      full.at(t, j) = flat[t] == flat[j]
                          ? 1.0
                          : cosine(provider.embed(flat[t]), provider.embed(flat[j]));

  SimilarityMatrix out;
  out.values = Mat(n, m);
  out.row_counts = labels.counts();
  size_t block_start = 0;
  for (size_t i = 0; i < n; ++i) {
    const size_t c = labels.groups[i].size();
    for (size_t j = 0; j < m; ++j) {
      double best = -1.0;
      for (size_t t = block_start; t < block_start + c; ++t)
        best = std::max(best, full.at(t, j));
      out.values.at(i, j) = std::clamp(best, 0.0, 1.0);
    }
    block_start += c;
  }
  return out;
}

SimilarityMatrix multi_hot_matrix(const GroupedLabels& labels) {
  labels.validate();
  const size_t n = labels.n_images(), m = labels.n_labels();
  SimilarityMatrix out;
  out.values = Mat(n, m);
  out.row_counts = labels.counts();
  size_t block_start = 0;
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < labels.groups[i].size(); ++j)
      out.values.at(i, block_start + j) = 1.0;
    block_start += labels.groups[i].size();
  }
  return out;
}

void write_ssm(const std::string& path, const SimilarityMatrix& matrix) {
  std::ofstream f(path, std::ios::binary);
  FGVL_CHECK(f.good(), "cannot open for writing: " + path);
  uint32_t n = static_cast<uint32_t>(matrix.values.rows);
  uint32_t m = static_cast<uint32_t>(matrix.values.cols);
  f.write(reinterpret_cast<const char*>(&n), 4);
  f.write(reinterpret_cast<const char*>(&m), 4);
  for (size_t c : matrix.row_counts) {
    uint32_t ci = static_cast<uint32_t>(c);
    f.write(reinterpret_cast<const char*>(&ci), 4);
  }
  std::vector<float> payload(matrix.values.a.begin(), matrix.values.a.end());
  f.write(reinterpret_cast<const char*>(payload.data()),
          static_cast<std::streamsize>(payload.size() * sizeof(float)));
  FGVL_CHECK(f.good(), "write failed: " + path);
}

SimilarityMatrix read_ssm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  FGVL_CHECK(f.good(), "cannot open: " + path);
  uint32_t n = 0, m = 0;
  f.read(reinterpret_cast<char*>(&n), 4);
  f.read(reinterpret_cast<char*>(&m), 4);
  SimilarityMatrix out;
  out.row_counts.resize(n);
  for (auto& c : out.row_counts) {
    uint32_t ci = 0;
    f.read(reinterpret_cast<char*>(&ci), 4);
    c = ci;
  }
  std::vector<float> payload(size_t(n) * m);
  f.read(reinterpret_cast<char*>(payload.data()),
         static_cast<std::streamsize>(payload.size() * sizeof(float)));
  FGVL_CHECK(f.good(), "truncated ssm file: " + path);
  out.values = Mat(n, m);
  out.values.a.assign(payload.begin(), payload.end());
  return out;
}

}  // namespace fgvl::ssm
