#pragma once

// Semantic similarity matrix: grouped structured labels, pairwise text
// embedding cosine, max-pooled compression, plus the independent brute-force
// oracle and the binary dump format.

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "fgvl/core.hpp"

namespace fgvl::ssm {

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::vector<double> embed(const std::string& text) = 0;
  virtual size_t dim() const = 0;
  virtual bool concurrent_safe() const { return true; }
};

// Hash-seeded unit vector per distinct text; distinct texts are near
// orthogonal. Used to exercise the pipeline and tests.
class HashUnitProvider : public EmbeddingProvider {
 public:
  explicit HashUnitProvider(size_t dim = 64) : dim_(dim) {}
  std::vector<double> embed(const std::string& text) override;
  size_t dim() const override { return dim_; }

 private:
  size_t dim_;
};

// Normalized sum of per-token hash vectors: cosine reflects token overlap.
// The default stand-in for a pretrained similarity model.
class BagOfTokensProvider : public EmbeddingProvider {
 public:
  explicit BagOfTokensProvider(size_t dim = 64) : dim_(dim) {}
  std::vector<double> embed(const std::string& text) override;
  size_t dim() const override { return dim_; }

 private:
  size_t dim_;
};

// Table-driven provider for hand-built examples; throws on unknown text.
class TableProvider : public EmbeddingProvider {
 public:
  explicit TableProvider(std::map<std::string, std::vector<double>> table);
  std::vector<double> embed(const std::string& text) override;
  size_t dim() const override { return dim_; }

 private:
  std::map<std::string, std::vector<double>> table_;
  size_t dim_ = 0;
};

std::unique_ptr<EmbeddingProvider> make_provider(const std::string& name, size_t dim);

struct GroupedLabels {
  std::vector<std::vector<std::string>> groups;  // group i holds c_i label texts

  void validate() const;
  size_t n_images() const { return groups.size(); }
  size_t n_labels() const;
  std::vector<std::string> flattened() const;  // group-major l_1..l_M
  std::vector<size_t> counts() const;
};

struct SimilarityMatrix {
  Mat values;                     // N x M, entries in [0,1]
  std::vector<size_t> row_counts;  // the c_i list
};

// s_ij = max over t in image i's block of cos(embed(l_t), embed(l_j)),
// clamped to [0,1]; each distinct text embedded exactly once.
SimilarityMatrix compute_ssm(const GroupedLabels& labels, EmbeddingProvider& provider);

// Independent O(M^2) oracle: builds the full M x M cosine matrix and pools.
SimilarityMatrix brute_force_ssm(const GroupedLabels& labels, EmbeddingProvider& provider);

// 0/1 block-membership target used when SSM supervision is switched off.
SimilarityMatrix multi_hot_matrix(const GroupedLabels& labels);

// Binary container {u32 N, u32 M, u32 c_i list, row-major float32 payload}.
void write_ssm(const std::string& path, const SimilarityMatrix& matrix);
SimilarityMatrix read_ssm(const std::string& path);

}  // namespace fgvl::ssm
