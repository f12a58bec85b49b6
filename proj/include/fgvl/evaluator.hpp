#pragma once

// Zero-shot classification with best-F1 thresholding, macro-averaged
// multi-label metrics, unseen-category evaluation, retrieval Precision@K,
// and linear probing of the frozen image encoder.

#include <optional>
#include <string>
#include <vector>

#include "fgvl/corpus.hpp"
#include "fgvl/knowledge.hpp"
#include "fgvl/model.hpp"

namespace fgvl::evaluator {

struct CategoryEntry {
  std::string category;
  std::optional<std::string> severity;
  std::optional<std::string> location;
};

enum class LibraryMode {
  kExplanation,     // structured label with the dictionary explanation
  kCategory,        // bare structured label, no explanation
  kPromptTemplate,  // "this is an x-ray image of {category}"
};

struct CategoryLibrary {
  std::vector<CategoryEntry> entries;
  LibraryMode mode = LibraryMode::kExplanation;

  // rendered candidate text per entry; entries must stay distinct
  std::vector<std::string> render(const knowledge::KnowledgeDictionary& dict,
                                  knowledge::LookupPolicy policy =
                                      knowledge::LookupPolicy::kFallback) const;
  void validate_rendered(const std::vector<std::string>& rendered) const;
};

struct PerClassMetrics {
  std::string category;
  double threshold = 0.0;
  double f1 = 0.0;
  double accuracy = 0.0;
  size_t positives = 0;
};

struct EvalReport {
  std::vector<PerClassMetrics> per_class;
  double macro_f1 = 0.0;
  double macro_accuracy = 0.0;
  size_t n_samples = 0;
  std::string config_echo;

  std::string to_json() const;
};

// N x |V| cosine scores of images against rendered library texts
Mat zero_shot_scores(model::Model& model, const std::vector<Image>& images,
                     const CategoryLibrary& library,
                     const knowledge::KnowledgeDictionary& dict,
                     knowledge::LookupPolicy policy = knowledge::LookupPolicy::kFallback);

struct ThresholdResult {
  double threshold = 0.0;
  double f1 = 0.0;
  double accuracy = 0.0;
};

// threshold from midpoints between adjacent sorted unique scores plus
// +/-inf sentinels; F1 ties broken by higher accuracy, then lower threshold
ThresholdResult best_f1_threshold(const std::vector<double>& scores,
                                  const std::vector<int>& labels);

// per-class best-F1 thresholds applied independently; classes with no
// positives are excluded from the macro average with a warning counter
EvalReport macro_metrics(const Mat& scores, const Mat& gold,
                         const std::vector<std::string>& class_names);

// mean over queries of (relevant among top-k)/k; ties broken by index order
double precision_at_k(const Mat& similarity, const Mat& relevance, size_t k);

// binary gold matrix (rows = studies, cols = library entries) from
// gold_categories
Mat gold_matrix(const corpus::Corpus& corpus, const CategoryLibrary& library);

enum class UnseenMode { kCategory, kExplanation };

struct UnseenResult {
  EvalReport report;          // thresholded per-held-out-class metrics
  double argmax_accuracy = 0;  // held-out images classified by argmax over the
                               // combined seen+held-out library
  double chance = 0.0;         // 1/|library|
};

// `proxy` maps each held-out category to the seen category standing in for
// it in category mode
UnseenResult unseen_category_eval(model::Model& model, const corpus::Corpus& eval_corpus,
                                  const std::vector<std::string>& held_out,
                                  const std::vector<std::string>& seen,
                                  const std::map<std::string, std::string>& proxy,
                                  const knowledge::KnowledgeDictionary& dict,
                                  UnseenMode mode);

struct ProbeConfig {
  double portion = 1.0;  // stratified subsample of the training half
  double lr = 0.5;
  size_t max_epochs = 200;
  uint64_t seed = 7;
};

// trains a linear softmax head on frozen encoder features; early stop on
// held-out loss
EvalReport linear_probe(model::Model& model, const corpus::Corpus& corpus,
                        const ProbeConfig& probe);

}  // namespace fgvl::evaluator
