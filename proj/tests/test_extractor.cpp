#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "fgvl/core.hpp"
#include "fgvl/extractor.hpp"

using namespace fgvl;
using namespace fgvl::extractor;

namespace {

std::string fixtures_dir() { return std::string(FGVL_DATA_DIR) + "/fixtures"; }

std::string temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "fgvl_test_extractor";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

// A client that fails a fixed number of times before succeeding.
class FlakyClient : public LlmClient {
 public:
  FlakyClient(std::string response, int failures)
      : response_(std::move(response)), failures_left_(failures) {}
  std::string complete(const std::string&) override {
    ++calls;
    if (failures_left_-- > 0) throw std::runtime_error("transport down");
    return response_;
  }
  std::string identity() const override { return "flaky"; }
  int calls = 0;

 private:
  std::string response_;
  int failures_left_;
};

}  // namespace

TEST_CASE("build_prompt: substitution identity and grammar line") {
  PromptConfig cfg;
  cfg.instruction_template = "Extract: {report}";
  CHECK(build_prompt("r", cfg) == "Extract: r");

  PromptConfig dflt = default_prompt_config();
  std::string p = build_prompt("One. Two. Three.", dflt);
  CHECK(p.find("severity|location|category") != std::string::npos);
  CHECK(p.find("One. Two. Three.") != std::string::npos);
}

TEST_CASE("build_prompt: template without slot is a config error, empty report rejected") {
  PromptConfig cfg;
  cfg.instruction_template = "no slot here";
  CHECK_THROWS_AS(build_prompt("r", cfg), std::runtime_error);
  CHECK_THROWS_AS(build_prompt("", default_prompt_config()), std::runtime_error);
}

TEST_CASE("parse: well-formed lines with optional fields preserved") {
  auto r = parse_llm_response("mild|left-sided|pneumonia\n||pleural effusion",
                              default_prompt_config());
  REQUIRE(r.triplets.size() == 2);
  CHECK(r.triplets[0] == DiseaseTriplet::normalized("mild", "left-sided", "pneumonia"));
  CHECK(r.triplets[1] == DiseaseTriplet::normalized("", "", "pleural effusion"));
  CHECK(r.skipped_lines == 0);
}

TEST_CASE("parse: missing category removed and counted") {
  auto r = parse_llm_response("severe|right|", default_prompt_config());
  CHECK(r.triplets.empty());
  CHECK(r.skipped_lines == 1);
}

TEST_CASE("parse: empty input, prose lines, dedupe, max_triplets") {
  auto cfg = default_prompt_config();
  CHECK(parse_llm_response("", cfg).triplets.empty());

  auto prose = parse_llm_response("Here are the findings:\nmild||edema", cfg);
  REQUIRE(prose.triplets.size() == 1);
  CHECK(prose.skipped_lines == 1);

  auto dup = parse_llm_response("mild||edema\nMILD||Edema", cfg);
  CHECK(dup.triplets.size() == 1);  // normalized duplicates collapse

  cfg.max_triplets = 2;
  auto capped = parse_llm_response("a||x\nb||y\nc||z", cfg);
  CHECK(capped.triplets.size() == 2);
}

TEST_CASE("parse totality: 1000-case fuzz never raises") {
  auto cfg = default_prompt_config();
  Rng rng(99);
  const std::string alphabet = "abc|XY \t\n.,;:()[]{}|0123456789\xc3\xa9-_/\\\"'";
  for (int i = 0; i < 1000; ++i) {
    std::string s;
    size_t len = rng.below(120);
    for (size_t k = 0; k < len; ++k) s.push_back(alphabet[rng.below(alphabet.size())]);
    auto r = parse_llm_response(s, cfg);  // must not throw
    for (const auto& t : r.triplets) t.validate();
  }
}

TEST_CASE("render -> parse round-trips any valid triplet list") {
  Rng rng(511);
  const std::vector<std::string> sevs = {"", "mild", "moderate", "severe"};
  const std::vector<std::string> locs = {"", "left", "right", "bilateral"};
  const std::vector<std::string> cats = {"pneumonia", "pleural effusion", "nodule", "edema"};
  for (int iter = 0; iter < 50; ++iter) {
    std::vector<DiseaseTriplet> triplets;
    std::vector<std::string> seen;
    size_t n = 1 + rng.below(6);
    for (size_t i = 0; i < n; ++i) {
      auto t = DiseaseTriplet::normalized(sevs[rng.below(sevs.size())],
                                          locs[rng.below(locs.size())],
                                          cats[rng.below(cats.size())]);
      if (std::find(seen.begin(), seen.end(), t.encode()) != seen.end()) continue;
      seen.push_back(t.encode());
      triplets.push_back(t);
    }
    auto r = parse_llm_response(render_triplets(triplets), default_prompt_config());
    CHECK(r.triplets == triplets);
    CHECK(r.skipped_lines == 0);
  }
}

TEST_CASE("extract: gold triplets short-circuit the client") {
  corpus::Study s;
  s.id = "g1";
  s.report_text = "ignored";
  s.gold_triplets = {{DiseaseTriplet::normalized("mild", "", "edema")}};
  FlakyClient client("never used", 100);
  ExtractionCache cache;
  ExtractOptions opt;
  opt.prompt = default_prompt_config();
  auto out = extract_triplets(s, client, cache, opt);
  CHECK(!out.failed);
  CHECK(out.triplets == *s.gold_triplets);
  CHECK(client.calls == 0);
}

TEST_CASE("extract: cache consulted before client; cached rerun identical") {
  corpus::Study s;
  s.id = "c1";
  s.report_text = "Mild cardiomegaly.";
  ExtractOptions opt;
  opt.prompt = default_prompt_config();
  ExtractionCache cache;
  cache.insert("flaky", build_prompt(s.report_text, opt.prompt), "mild||cardiomegaly");
  FlakyClient client("unused", 0);
  auto a = extract_triplets(s, client, cache, opt);
  auto b = extract_triplets(s, client, cache, opt);
  CHECK(client.calls == 0);
  CHECK(a.triplets == b.triplets);
  REQUIRE(a.triplets.size() == 1);
  CHECK(a.triplets[0].category == "cardiomegaly");
}

TEST_CASE("extract: retries then succeeds; exhausted retries mark failure") {
  corpus::Study s;
  s.id = "r1";
  s.report_text = "Severe edema.";
  ExtractOptions opt;
  opt.prompt = default_prompt_config();
  {
    FlakyClient client("severe||edema", 2);  // fails twice, succeeds third
    ExtractionCache cache;
    auto out = extract_triplets(s, client, cache, opt);
    CHECK(!out.failed);
    CHECK(client.calls == 3);
    REQUIRE(out.triplets.size() == 1);
  }
  {
    FlakyClient client("never", 10);
    ExtractionCache cache;
    auto out = extract_triplets(s, client, cache, opt);
    CHECK(out.failed);
    CHECK(out.triplets.empty());
    CHECK(client.calls == 3);  // max_retries
  }
}

TEST_CASE("cache: file round-trip and append-only first-value-wins") {
  std::string p = temp_path("cache.jsonl");
  std::filesystem::remove(p);
  {
    ExtractionCache cache(p);
    cache.insert("m", "prompt-a", "resp-a");
    cache.insert("m", "prompt-a", "resp-ignored");
    cache.insert("m", "prompt-b", "resp-b");
  }
  ExtractionCache back(p);
  CHECK(back.size() == 2);
  CHECK(back.lookup("m", "prompt-a") == std::string("resp-a"));
  CHECK(back.lookup("m", "prompt-b") == std::string("resp-b"));
  CHECK(!back.lookup("other", "prompt-a").has_value());
}

TEST_CASE("fixture client: 50-study corpus recovers gold on >= 48/50") {
  auto cfg = default_prompt_config();
  FixtureClient client(fixtures_dir() + "/recorded_responses.jsonl", cfg);
  auto corpus = corpus::load_manifest(fixtures_dir() + "/extraction_manifest.jsonl");
  REQUIRE(corpus.size() == 50);
  ExtractionCache cache;
  ExtractOptions opt;
  opt.prompt = cfg;
  size_t exact = 0;
  for (auto study : corpus.studies) {
    auto gold = *study.gold_triplets;
    study.gold_triplets.reset();  // force the client path
    auto out = extract_triplets(study, client, cache, opt);
    REQUIRE(!out.failed);
    if (out.triplets == gold) ++exact;
  }
  CHECK(exact >= 48);
}

TEST_CASE("fallback: hand-executed sentences") {
  auto lex = default_lexicon();
  auto one = fallback_extract("There is a small left-sided pleural effusion.", lex);
  REQUIRE(one.size() == 1);
  CHECK(one[0] == DiseaseTriplet::normalized("small", "left-sided", "pleural effusion"));

  CHECK(fallback_extract("No pneumothorax.", lex).empty());
  CHECK(fallback_extract("The patient is free of pneumonia.", lex).empty());

  auto two = fallback_extract("Mild cardiomegaly. Bilateral pleural effusions.", lex);
  REQUIRE(two.size() == 2);
  CHECK(two[0] == DiseaseTriplet::normalized("mild", "", "cardiomegaly"));
  CHECK(two[1] == DiseaseTriplet::normalized("", "bilateral", "pleural effusion"));
}

TEST_CASE("fallback: 50-study corpus recovers gold on >= 48/50") {
  auto lex = default_lexicon();
  auto corpus = corpus::load_manifest(fixtures_dir() + "/extraction_manifest.jsonl");
  size_t exact = 0;
  for (const auto& study : corpus.studies)
    if (fallback_extract(study.report_text, lex) == *study.gold_triplets) ++exact;
  CHECK(exact >= 48);
}

TEST_CASE("http client: posts model+prompt, bearer token from env, never logged") {
  httplib::Server server;
  std::string seen_auth, seen_model, seen_prompt;
  server.Post("/v1/complete", [&](const httplib::Request& req, httplib::Response& res) {
    seen_auth = req.get_header_value("Authorization");
    auto body = nlohmann::json::parse(req.body);
    seen_model = body.at("model");
    seen_prompt = body.at("prompt");
    res.set_content("{\"text\": \"mild||edema\"}", "application/json");
  });
  int port = server.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  setenv("FGVL_API_KEY", "secret-key-123", 1);
  HttpClient client("http://127.0.0.1:" + std::to_string(port) + "/v1/complete", "test-model");
  std::string text;
  try {
    text = client.complete("the prompt");
  } catch (const std::exception& e) {
    // credentials must not leak through error text either
    CHECK(std::string(e.what()).find("secret-key-123") == std::string::npos);
    server.stop();
    t.join();
    FAIL("http request failed: ", e.what());
    return;
  }
  server.stop();
  t.join();
  CHECK(text == "mild||edema");
  CHECK(seen_auth == "Bearer secret-key-123");
  CHECK(seen_model == "test-model");
  CHECK(seen_prompt == "the prompt");
}

TEST_CASE("http client: transport failure surfaces as error without key material") {
  setenv("FGVL_API_KEY", "secret-key-123", 1);
  HttpClient client("http://127.0.0.1:1/nowhere", "m");
  try {
    client.complete("p");
    FAIL("expected failure");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("secret-key-123") == std::string::npos);
  }
}

TEST_CASE("lexicon validation rejects empty sections") {
  Lexicon lex;
  CHECK_THROWS_AS(lex.validate(), std::runtime_error);
}
