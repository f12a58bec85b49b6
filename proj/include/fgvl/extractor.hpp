#pragma once

// Report -> disease-triplet extraction: prompt construction, LLM client
// contract, response parsing, an append-only cache, and a deterministic
// rule-based fallback extractor.

#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fgvl/corpus.hpp"
#include "fgvl/types.hpp"

namespace fgvl::extractor {

struct PromptConfig {
  std::string instruction_template;
  std::string output_grammar = "severity|location|category";
  size_t max_triplets = 16;

  void validate() const;
};

// The shipped default instruction template (contains one {report} slot and
// the output grammar line).
PromptConfig default_prompt_config();

std::string build_prompt(const std::string& report_text, const PromptConfig& config);

struct ParseResult {
  std::vector<DiseaseTriplet> triplets;
  size_t skipped_lines = 0;
};

// Total over arbitrary text: one triplet per well-formed "sev|loc|cat" line,
// lines lacking the category dropped and counted, duplicates removed,
// at most max_triplets kept.
ParseResult parse_llm_response(const std::string& response_text, const PromptConfig& config);

// Renders a triplet list in the output grammar (the parse round-trip partner).
std::string render_triplets(const std::vector<DiseaseTriplet>& triplets);

class LlmClient {
 public:
  virtual ~LlmClient() = default;
  virtual std::string complete(const std::string& prompt) = 0;
  virtual std::string identity() const = 0;
  // max in-flight requests the pipeline may issue; 0 means serialize
  virtual size_t max_in_flight() const { return 1; }
};

// Replays recorded responses keyed by fnv1a64(identity + "\n" + prompt).
// Record file: JSONL {key_hash, response}; optionally {report, response}
// pairs which are keyed through the given prompt config at load time.
class FixtureClient : public LlmClient {
 public:
  FixtureClient(const std::string& record_path, const PromptConfig& config,
                std::string model_name = "fixture");
  std::string complete(const std::string& prompt) override;
  std::string identity() const override { return model_name_; }
  size_t max_in_flight() const override { return 8; }

 private:
  std::string model_name_;
  std::map<uint64_t, std::string> responses_;
};

// POSTs {"model":..,"prompt":..} to `endpoint` and expects {"text":..}.
// Credentials come from the FGVL_API_KEY environment variable and are sent
// as a bearer token; the key is never logged.
class HttpClient : public LlmClient {
 public:
  HttpClient(std::string endpoint, std::string model_name);
  std::string complete(const std::string& prompt) override;
  std::string identity() const override { return model_name_; }

 private:
  std::string host_, path_, model_name_;
  int port_ = 80;
};

// Append-only cache keyed by hash(model identity, prompt). Concurrent reads,
// serialized appends.
class ExtractionCache {
 public:
  ExtractionCache() = default;
  explicit ExtractionCache(std::string path);  // loads existing records

  std::optional<std::string> lookup(const std::string& model, const std::string& prompt) const;
  void insert(const std::string& model, const std::string& prompt, const std::string& response);
  size_t size() const { return entries_.size(); }

  static uint64_t key(const std::string& model, const std::string& prompt);

 private:
  std::string path_;
  std::map<uint64_t, std::string> entries_;
  mutable std::mutex mu_;
};

struct ExtractOptions {
  PromptConfig prompt;
  size_t max_retries = 3;
};

struct ExtractOutcome {
  std::vector<DiseaseTriplet> triplets;
  bool failed = false;  // client errors exhausted retries; pipeline continues
};

// Gold triplets short-circuit; otherwise cache, then client with retries.
ExtractOutcome extract_triplets(const corpus::Study& study, LlmClient& client,
                                ExtractionCache& cache, const ExtractOptions& options);

struct Lexicon {
  std::set<std::string> severities;
  std::set<std::string> locations;
  std::set<std::string> categories;  // may be multi-word

  void validate() const;
};

Lexicon default_lexicon();

// Deterministic rule-based extractor: sentence split, longest-match category
// lookup, nearest preceding severity/location, negation suppression.
std::vector<DiseaseTriplet> fallback_extract(const std::string& report_text,
                                             const Lexicon& lexicon);

}  // namespace fgvl::extractor
