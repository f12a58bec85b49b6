#include "fgvl/extractor.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

namespace fgvl::extractor {

using nlohmann::json;

void PromptConfig::validate() const {
  size_t first = instruction_template.find("{report}");
  FGVL_CHECK(first != std::string::npos,
             "prompt template missing its {report} slot");
  FGVL_CHECK(instruction_template.find("{report}", first + 1) == std::string::npos,
             "prompt template has more than one {report} slot");
  FGVL_CHECK(max_triplets > 0, "max_triplets must be positive");
}

PromptConfig default_prompt_config() {
  PromptConfig config;
  config.instruction_template =
      "You are given a radiology report. Extract every disease finding as one "
      "line of the form:\n"
      "severity|location|category\n"
      "Leave severity or location empty when the report does not state them. "
      "Output one line per finding and nothing else. If the report describes "
      "no findings, output nothing.\n"
      "Report: {report}";
  return config;
}

std::string build_prompt(const std::string& report_text, const PromptConfig& config) {
  FGVL_CHECK(!report_text.empty(), "build_prompt: empty report");
  config.validate();
  std::string out = config.instruction_template;
  out.replace(out.find("{report}"), 8, report_text);
  return out;
}

ParseResult parse_llm_response(const std::string& response_text, const PromptConfig& config) {
  ParseResult result;
  std::vector<std::string> seen;
  std::istringstream in(response_text);
  std::string line;
  while (std::getline(in, line)) {
    if (trim_copy(line).empty()) continue;
    auto parts = split(line, '|');
    if (parts.size() != 3) {
      ++result.skipped_lines;
      continue;
    }
    auto triplet = DiseaseTriplet::decode(line);
    if (!triplet) {  // empty category: the retention rule removes it
      ++result.skipped_lines;
      continue;
    }
    std::string enc = triplet->encode();
    if (std::find(seen.begin(), seen.end(), enc) != seen.end()) continue;
    if (result.triplets.size() >= config.max_triplets) break;
    seen.push_back(enc);
    result.triplets.push_back(std::move(*triplet));
  }
  return result;
}

std::string render_triplets(const std::vector<DiseaseTriplet>& triplets) {
  std::string out;
  for (const auto& t : triplets) {
    t.validate();
    out += t.encode();
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Clients
// ---------------------------------------------------------------------------

FixtureClient::FixtureClient(const std::string& record_path, const PromptConfig& config,
                             std::string model_name)
    : model_name_(std::move(model_name)) {
  std::ifstream f(record_path);
  FGVL_CHECK(f.good(), "cannot open fixture record file: " + record_path);
  std::string line;
  size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (trim_copy(line).empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const std::exception& e) {
      fail("fixture " + record_path + " line " + std::to_string(lineno) + ": " + e.what());
    }
    std::string response = rec.at("response").get<std::string>();
    uint64_t key;
    if (rec.contains("report")) {
      key = ExtractionCache::key(model_name_,
                                 build_prompt(rec["report"].get<std::string>(), config));
    } else {
      key = std::stoull(rec.at("key_hash").get<std::string>(), nullptr, 16);
    }
    responses_[key] = std::move(response);
  }
}

std::string FixtureClient::complete(const std::string& prompt) {
  auto it = responses_.find(ExtractionCache::key(model_name_, prompt));
  FGVL_CHECK(it != responses_.end(), "fixture client: no recorded response for prompt");
  return it->second;
}

HttpClient::HttpClient(std::string endpoint, std::string model_name)
    : model_name_(std::move(model_name)) {
  std::string rest = endpoint;
  if (rest.rfind("http://", 0) == 0) rest = rest.substr(7);
  size_t slash = rest.find('/');
  std::string hostport = slash == std::string::npos ? rest : rest.substr(0, slash);
  path_ = slash == std::string::npos ? "/" : rest.substr(slash);
  size_t colon = hostport.find(':');
  host_ = colon == std::string::npos ? hostport : hostport.substr(0, colon);
  port_ = colon == std::string::npos ? 80 : std::stoi(hostport.substr(colon + 1));
  FGVL_CHECK(!host_.empty(), "http client: empty host in endpoint '" + endpoint + "'");
}

std::string HttpClient::complete(const std::string& prompt) {
  httplib::Client cli(host_, port_);
  cli.set_read_timeout(60);
  httplib::Headers headers;
  if (const char* key = std::getenv("FGVL_API_KEY"))
    headers.emplace("Authorization", std::string("Bearer ") + key);
  json body;
  body["model"] = model_name_;
  body["prompt"] = prompt;
  auto res = cli.Post(path_, headers, body.dump(), "application/json");
  FGVL_CHECK(res && res->status == 200,
             "http client: request to " + host_ + path_ + " failed" +
                 (res ? " with status " + std::to_string(res->status) : ""));
  json doc = json::parse(res->body);
  FGVL_CHECK(doc.contains("text"), "http client: response missing 'text' field");
  return doc["text"].get<std::string>();
}

// ---------------------------------------------------------------------------
// Cache
// ---------------------------------------------------------------------------

uint64_t ExtractionCache::key(const std::string& model, const std::string& prompt) {
  return fnv1a64(prompt, fnv1a64(model) ^ 0x5bd1e995u);
}

ExtractionCache::ExtractionCache(std::string path) : path_(std::move(path)) {
  std::ifstream f(path_);
  if (!f.good()) return;  // fresh cache file
  std::string line;
  while (std::getline(f, line)) {
    if (trim_copy(line).empty()) continue;
    json rec = json::parse(line);
    entries_[std::stoull(rec.at("key_hash").get<std::string>(), nullptr, 16)] =
        rec.at("response").get<std::string>();
  }
}

std::optional<std::string> ExtractionCache::lookup(const std::string& model,
                                                   const std::string& prompt) const {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = entries_.find(key(model, prompt));
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void ExtractionCache::insert(const std::string& model, const std::string& prompt,
                             const std::string& response) {
  std::lock_guard<std::mutex> lock(mu_);
  uint64_t k = key(model, prompt);
  if (entries_.count(k)) return;  // append-only; first value wins
  entries_[k] = response;
  if (path_.empty()) return;
  json rec;
  rec["key_hash"] = hex64(k);
  rec["model"] = model;
  rec["prompt_sha"] = hex64(fnv1a64(prompt));
  rec["response"] = response;
  rec["ts"] = static_cast<int64_t>(
      std::chrono::duration_cast<std::chrono::seconds>(
          std::chrono::system_clock::now().time_since_epoch())
          .count());
  std::ofstream f(path_, std::ios::app);
  FGVL_CHECK(f.good(), "cannot append to cache file: " + path_);
  f << rec.dump() << "\n";
}

ExtractOutcome extract_triplets(const corpus::Study& study, LlmClient& client,
                                ExtractionCache& cache, const ExtractOptions& options) {
  ExtractOutcome outcome;
  if (study.gold_triplets) {
    outcome.triplets = *study.gold_triplets;
    return outcome;
  }
  FGVL_CHECK(!study.report_text.empty(),
             "study " + study.id + ": empty report and no gold triplets");
  std::string prompt = build_prompt(study.report_text, options.prompt);

  if (auto cached = cache.lookup(client.identity(), prompt)) {
    outcome.triplets = parse_llm_response(*cached, options.prompt).triplets;
    return outcome;
  }
  std::string response;
  bool ok = false;
  for (size_t attempt = 0; attempt < options.max_retries && !ok; ++attempt) {
    if (attempt > 0)
      std::this_thread::sleep_for(std::chrono::milliseconds(20ull << attempt));
    try {
      response = client.complete(prompt);
      ok = true;
    } catch (const std::exception&) {
      // retriable transport failure for study.id; loop continues
    }
  }
  if (!ok) {
    outcome.failed = true;
    return outcome;
  }
  cache.insert(client.identity(), prompt, response);
  outcome.triplets = parse_llm_response(response, options.prompt).triplets;
  return outcome;
}

// ---------------------------------------------------------------------------
// Rule-based fallback
// ---------------------------------------------------------------------------

void Lexicon::validate() const {
  FGVL_CHECK(!severities.empty() && !locations.empty() && !categories.empty(),
             "fallback lexicon must be non-empty");
}

Lexicon default_lexicon() {
  Lexicon lex;
  lex.severities = {"mild",    "moderate", "severe", "small", "large",
                    "acute",   "chronic",  "minimal", "extensive", "trace",
                    "subtle",  "dense",    "faint"};
  lex.locations = {"left",      "right",      "bilateral",  "central", "upper",
                   "lower",     "left-sided", "right-sided", "basal",  "apical",
                   "retrocardiac", "perihilar", "peripheral"};
  lex.categories = {
      "pneumonia",     "atelectasis",   "cardiomegaly", "pleural effusion",
      "pneumothorax",  "edema",         "consolidation", "lung opacity",
      "fibrosis",      "nodule",        "mass",          "emphysema",
      "pleural thickening", "hernia",   "infiltration",  "pneumoperitoneum",
      "fracture",      "tortuous aorta", "calcification", "covid-19",
      "focal opacity", "band shadow",   "speckle pattern", "ring lesion",
      "diffuse haze",  "left strip sign", "banded opacity", "speckled ring"};
  return lex;
}

namespace {

// effusions -> effusion, opacities -> opacity
std::string singularize(const std::string& word) {
  if (word.size() > 4 && word.ends_with("ies"))
    return word.substr(0, word.size() - 3) + "y";
  if (word.size() > 3 && word.ends_with("s") && !word.ends_with("ss") && !word.ends_with("is"))
    return word.substr(0, word.size() - 1);
  return word;
}

bool is_negation_cue(const std::vector<std::string>& tokens, size_t upto) {
  for (size_t i = 0; i < upto; ++i) {
    if (tokens[i] == "no" || tokens[i] == "without" || tokens[i] == "not" ||
        tokens[i] == "negative")
      return true;
    if (tokens[i] == "free" && i + 1 < tokens.size() && tokens[i + 1] == "of") return true;
  }
  return false;
}

}  // namespace

std::vector<DiseaseTriplet> fallback_extract(const std::string& report_text,
                                             const Lexicon& lexicon) {
  lexicon.validate();

  size_t max_cat_words = 1;
  for (const auto& c : lexicon.categories)
    max_cat_words = std::max(max_cat_words, word_tokens(c).size());

  // sentence split on ./;/! /? and newlines
  std::vector<std::string> sentences;
  std::string current;
  for (char ch : report_text) {
    if (ch == '.' || ch == ';' || ch == '!' || ch == '?' || ch == '\n') {
      if (!trim_copy(current).empty()) sentences.push_back(current);
      current.clear();
    } else {
      current.push_back(ch);
    }
  }
  if (!trim_copy(current).empty()) sentences.push_back(current);

  std::vector<DiseaseTriplet> out;
  for (const auto& sentence : sentences) {
    auto tokens = word_tokens(sentence);
    size_t i = 0;
    while (i < tokens.size()) {
      // longest-match category lookup at position i
      std::string matched;
      size_t matched_len = 0;
      for (size_t len = std::min(max_cat_words, tokens.size() - i); len >= 1; --len) {
        std::vector<std::string> gram(tokens.begin() + i, tokens.begin() + i + len);
        gram.back() = singularize(gram.back());
        std::string candidate = join(gram, " ");
        if (lexicon.categories.count(candidate)) {
          matched = candidate;
          matched_len = len;
          break;
        }
      }
      if (matched.empty()) {
        ++i;
        continue;
      }
      if (!is_negation_cue(tokens, i)) {
        DiseaseTriplet t;
        t.category = matched;
        for (size_t k = i; k-- > 0;) {  // nearest preceding qualifiers
          if (!t.severity && lexicon.severities.count(tokens[k])) t.severity = tokens[k];
          if (!t.location && lexicon.locations.count(tokens[k])) t.location = tokens[k];
        }
        if (std::find_if(out.begin(), out.end(), [&](const DiseaseTriplet& o) {
              return o == t;
            }) == out.end())
          out.push_back(std::move(t));
      }
      i += matched_len;
    }
  }
  return out;
}

}  // namespace fgvl::extractor
