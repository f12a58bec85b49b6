#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "fgvl/core.hpp"
#include "fgvl/ssm.hpp"

using namespace fgvl;
using namespace fgvl::ssm;

namespace {

// Embeddings realizing a given Gram (cosine) matrix, via Cholesky. Inputs
// must be unit-diagonal positive definite.
std::map<std::string, std::vector<double>> embeddings_for_gram(
    const std::vector<std::string>& names, const std::vector<std::vector<double>>& gram) {
  size_t n = names.size();
  std::vector<std::vector<double>> l(n, std::vector<double>(n, 0.0));
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j <= i; ++j) {
      double s = gram[i][j];
      for (size_t k = 0; k < j; ++k) s -= l[i][k] * l[j][k];
      if (i == j) {
        REQUIRE(s > 0.0);
        l[i][i] = std::sqrt(s);
      } else {
        l[i][j] = s / l[j][j];
      }
    }
  }
  std::map<std::string, std::vector<double>> table;
  for (size_t i = 0; i < n; ++i) table[names[i]] = l[i];
  return table;
}

GroupedLabels random_labels(Rng& rng, size_t max_images, size_t max_per_image) {
  // small text pool so duplicates across groups are common
  static const std::vector<std::string> pool = {
      "mild pneumonia",  "severe pneumonia", "pleural effusion", "left pleural effusion",
      "cardiomegaly",    "no acute findings", "nodule",           "mass",
      "lung opacity",    "bilateral edema"};
  GroupedLabels labels;
  size_t n = 1 + rng.below(max_images);
  for (size_t i = 0; i < n; ++i) {
    std::vector<std::string> group;
    size_t c = 1 + rng.below(max_per_image);
    for (size_t t = 0; t < c; ++t) group.push_back(pool[rng.below(pool.size())]);
    labels.groups.push_back(group);
  }
  return labels;
}

}  // namespace

TEST_CASE("cosine: identity, orthogonality, scale invariance") {
  std::vector<double> x = {3.0, -1.0, 2.0};
  CHECK(cosine(x, x) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(cosine({1, 0}, {0, 1}) == doctest::Approx(0.0));
  std::vector<double> x3 = {9.0, -3.0, 6.0};
  std::vector<double> y = {0.5, 2.0, -1.0};
  CHECK(cosine(x3, y) == doctest::Approx(cosine(x, y)).epsilon(1e-12));
  CHECK_THROWS_AS(cosine({0, 0}, {1, 1}), std::runtime_error);
}

TEST_CASE("compute_ssm: identical texts give all-ones") {
  HashUnitProvider provider(32);
  GroupedLabels labels;
  labels.groups = {{"A"}, {"A"}};
  auto m = compute_ssm(labels, provider);
  REQUIRE(m.values.rows == 2);
  REQUIRE(m.values.cols == 2);
  for (double v : m.values.a) CHECK(v == 1.0);
}

TEST_CASE("compute_ssm: orthogonal texts give the identity pattern") {
  TableProvider provider({{"A", {1, 0}}, {"B", {0, 1}}});
  GroupedLabels labels;
  labels.groups = {{"A"}, {"B"}};
  auto m = compute_ssm(labels, provider);
  CHECK(m.values.at(0, 0) == 1.0);
  CHECK(m.values.at(0, 1) == doctest::Approx(0.0));
  CHECK(m.values.at(1, 0) == doctest::Approx(0.0));
  CHECK(m.values.at(1, 1) == 1.0);
}

TEST_CASE("compute_ssm: hand-built three-label case") {
  // cos(A,B)=0.4, cos(A,C)=0.2, cos(B,C)=0.6
  auto table = embeddings_for_gram({"A", "B", "C"},
                                   {{1.0, 0.4, 0.2}, {0.4, 1.0, 0.6}, {0.2, 0.6, 1.0}});
  TableProvider provider(table);
  GroupedLabels labels;
  labels.groups = {{"A", "B"}, {"C"}};
  auto m = compute_ssm(labels, provider);
  REQUIRE(m.values.rows == 2);
  REQUIRE(m.values.cols == 3);
  // row 1: max over {A,B} against each column
  CHECK(m.values.at(0, 0) == 1.0);
  CHECK(m.values.at(0, 1) == 1.0);
  CHECK(m.values.at(0, 2) == doctest::Approx(0.6).epsilon(1e-9));
  // row 2: C against each column
  CHECK(m.values.at(1, 0) == doctest::Approx(0.2).epsilon(1e-9));
  CHECK(m.values.at(1, 1) == doctest::Approx(0.6).epsilon(1e-9));
  CHECK(m.values.at(1, 2) == 1.0);
  CHECK(m.row_counts == std::vector<size_t>{2, 1});
}

TEST_CASE("brute_force_ssm: 1x1 case and duplicated-text columns") {
  HashUnitProvider provider(16);
  GroupedLabels single;
  single.groups = {{"only"}};
  auto m = brute_force_ssm(single, provider);
  REQUIRE(m.values.rows == 1);
  REQUIRE(m.values.cols == 1);
  CHECK(m.values.at(0, 0) == 1.0);

  GroupedLabels dup;
  dup.groups = {{"x", "shared"}, {"shared", "y"}};
  auto d = brute_force_ssm(dup, provider);
  // columns 1 and 2 hold the same text; they must be elementwise identical
  for (size_t i = 0; i < d.values.rows; ++i) CHECK(d.values.at(i, 1) == d.values.at(i, 2));
}

TEST_CASE("oracle equivalence on 200 random batches, own-block ones") {
  Rng rng(2024);
  BagOfTokensProvider bag(48);
  HashUnitProvider hash(48);
  for (int iter = 0; iter < 200; ++iter) {
    GroupedLabels labels = random_labels(rng, 8, 4);
    EmbeddingProvider& provider =
        (iter % 2 == 0) ? static_cast<EmbeddingProvider&>(bag) : hash;
    auto a = compute_ssm(labels, provider);
    auto b = brute_force_ssm(labels, provider);
    REQUIRE(a.values.same_shape(b.values));
    for (size_t k = 0; k < a.values.size(); ++k)
      CHECK(std::abs(a.values.a[k] - b.values.a[k]) <= 1e-9);
    // own-block entries exactly 1
    size_t col = 0;
    for (size_t i = 0; i < labels.groups.size(); ++i) {
      for (size_t j = 0; j < labels.groups[i].size(); ++j)
        CHECK(a.values.at(i, col + j) == 1.0);
      col += labels.groups[i].size();
    }
    // range after clamping
    for (double v : a.values.a) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("permutation equivariance within a group") {
  BagOfTokensProvider provider(32);
  GroupedLabels labels;
  labels.groups = {{"mild pneumonia", "nodule", "mass"}, {"pleural effusion"}};
  auto base = compute_ssm(labels, provider);

  GroupedLabels permuted;
  permuted.groups = {{"mass", "mild pneumonia", "nodule"}, {"pleural effusion"}};
  auto perm = compute_ssm(permuted, provider);

  // columns of group 0 permute by (2,0,1); group-1 column and all rows otherwise equal
  std::vector<size_t> map = {2, 0, 1, 3};  // permuted column j holds base column map[j]
  for (size_t i = 0; i < 2; ++i)
    for (size_t j = 0; j < 4; ++j)
      CHECK(perm.values.at(i, j) == doctest::Approx(base.values.at(i, map[j])).epsilon(1e-12));
}

TEST_CASE("pooling dominance: s_ij >= every member cosine") {
  BagOfTokensProvider provider(32);
  GroupedLabels labels;
  labels.groups = {{"mild pneumonia", "lung opacity"}, {"severe pneumonia", "mass"}};
  auto m = compute_ssm(labels, provider);
  auto flat = labels.flattened();
  std::map<std::string, std::vector<double>> cache;
  for (const auto& t : flat)
    if (!cache.count(t)) cache[t] = provider.embed(t);
  size_t col0 = 0;
  for (size_t i = 0; i < labels.groups.size(); ++i) {
    for (size_t j = 0; j < flat.size(); ++j) {
      for (const auto& member : labels.groups[i]) {
        double c = cosine(cache[member], cache[flat[j]]);
        CHECK(m.values.at(i, j) >= std::min(1.0, std::max(0.0, c)) - 1e-12);
      }
    }
    col0 += labels.groups[i].size();
  }
}

TEST_CASE("multi_hot_matrix is the 0/1 block pattern") {
  GroupedLabels labels;
  labels.groups = {{"A"}, {"B", "C"}};
  auto m = multi_hot_matrix(labels);
  REQUIRE(m.values.rows == 2);
  REQUIRE(m.values.cols == 3);
  CHECK(m.values.at(0, 0) == 1.0);
  CHECK(m.values.at(0, 1) == 0.0);
  CHECK(m.values.at(0, 2) == 0.0);
  CHECK(m.values.at(1, 0) == 0.0);
  CHECK(m.values.at(1, 1) == 1.0);
  CHECK(m.values.at(1, 2) == 1.0);
}

TEST_CASE("grouped labels validation rejects empty groups") {
  GroupedLabels labels;
  labels.groups = {{"A"}, {}};
  CHECK_THROWS_AS(labels.validate(), std::runtime_error);
}

TEST_CASE("table provider throws on unknown text") {
  TableProvider provider({{"A", {1.0, 0.0}}});
  CHECK_THROWS_WITH_AS(provider.embed("missing"), doctest::Contains("missing"),
                       std::runtime_error);
}

TEST_CASE("providers are deterministic per text, nonzero vectors") {
  BagOfTokensProvider bag(24);
  HashUnitProvider hash(24);
  for (const std::string& t : {"alpha beta", "gamma", "alpha beta"}) {
    auto a = bag.embed(t);
    auto b = bag.embed(t);
    CHECK(a == b);
    CHECK(norm2(a.data(), a.size()) > 0.0);
    auto h = hash.embed(t);
    CHECK(h == hash.embed(t));
    CHECK(norm2(h.data(), h.size()) > 0.0);
  }
}

TEST_CASE("ssm dump round-trip within float32 precision") {
  Rng rng(5);
  BagOfTokensProvider provider(32);
  GroupedLabels labels = random_labels(rng, 6, 3);
  auto m = compute_ssm(labels, provider);
  auto p = (std::filesystem::temp_directory_path() / "fgvl_ssm_rt.bin").string();
  write_ssm(p, m);
  auto back = read_ssm(p);
  CHECK(back.row_counts == m.row_counts);
  REQUIRE(back.values.same_shape(m.values));
  for (size_t k = 0; k < m.values.size(); ++k)
    CHECK(std::abs(back.values.a[k] - m.values.a[k]) <= 1e-6);
}

TEST_CASE("make_provider dispatches by name") {
  CHECK(make_provider("bag_of_tokens", 16)->dim() == 16);
  CHECK(make_provider("hash_unit", 8)->dim() == 8);
  CHECK_THROWS_AS(make_provider("nope", 16), std::runtime_error);
}
