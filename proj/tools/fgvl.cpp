// fgvl: operator surface for the pipeline
// subcommands: extract, build-labels, pretrain, eval, retrieve, probe, report

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include <CLI11.hpp>
#include <json.hpp>

#include "fgvl/config.hpp"
#include "fgvl/corpus.hpp"
#include "fgvl/evaluator.hpp"
#include "fgvl/extractor.hpp"
#include "fgvl/knowledge.hpp"
#include "fgvl/model.hpp"
#include "fgvl/ssm.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fgvl;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_valid(const config::RunConfig& cfg) {
  auto violations = cfg.violations();
  if (!violations.empty()) throw ConfigError(join(violations, "; "));
}

// distinct gold categories of a corpus, "no finding" excluded
std::vector<std::string> gold_category_set(const corpus::Corpus& c) {
  std::set<std::string> cats;
  for (const auto& s : c.studies)
    if (s.gold_categories)
      for (const auto& g : *s.gold_categories)
        if (g != "no finding") cats.insert(g);
  return {cats.begin(), cats.end()};
}

evaluator::CategoryLibrary make_library(const std::vector<std::string>& cats,
                                        evaluator::LibraryMode mode) {
  evaluator::CategoryLibrary lib;
  lib.mode = mode;
  for (const auto& c : cats) lib.entries.push_back({c, {}, {}});
  return lib;
}

evaluator::LibraryMode library_mode_from_string(const std::string& s) {
  if (s == "explanation") return evaluator::LibraryMode::kExplanation;
  if (s == "category") return evaluator::LibraryMode::kCategory;
  if (s == "prompt") return evaluator::LibraryMode::kPromptTemplate;
  throw ConfigError("unknown library mode '" + s + "'");
}

std::vector<Image> load_images(const corpus::Corpus& c) {
  std::vector<Image> images;
  images.reserve(c.studies.size());
  for (const auto& s : c.studies) images.push_back(s.load_image());
  return images;
}

// scores dump reuses the SSM container with unit row counts
void dump_scores(const std::string& path, const Mat& scores) {
  ssm::SimilarityMatrix m;
  m.values = scores;
  for (auto& v : m.values.a) v = std::clamp(v, 0.0, 1.0);
  m.row_counts.assign(scores.rows, 1);
  ssm::write_ssm(path, m);
}

// ---------------------------------------------------------------------------
// tiny figure rendering (Fig. 6-style bars / histograms) into grayscale PNGs
// ---------------------------------------------------------------------------

void fill_rect(Image& img, uint32_t r0, uint32_t c0, uint32_t r1, uint32_t c1, double v) {
  for (uint32_t r = r0; r < std::min(r1, img.height); ++r)
    for (uint32_t c = c0; c < std::min(c1, img.width); ++c) img.at(r, c) = v;
}

void render_bar_chart(const std::string& path, const std::vector<double>& values) {
  const uint32_t h = 120, bar_w = 18, gap = 6;
  Image img;
  img.height = h;
  img.width = static_cast<uint32_t>(values.size()) * (bar_w + gap) + gap;
  img.values.assign(size_t(img.height) * img.width, 1.0);
  double mx = 1e-9;
  for (double v : values) mx = std::max(mx, std::abs(v));
  for (size_t i = 0; i < values.size(); ++i) {
    uint32_t height = static_cast<uint32_t>(std::abs(values[i]) / mx * (h - 10));
    uint32_t c0 = gap + static_cast<uint32_t>(i) * (bar_w + gap);
    fill_rect(img, h - 5 - height, c0, h - 5, c0 + bar_w, values[i] >= 0 ? 0.2 : 0.6);
  }
  write_png_gray(path, img);
}

void render_histogram(const std::string& path, const std::vector<double>& values,
                      double lo, double hi, size_t bins) {
  std::vector<double> counts(bins, 0.0);
  for (double v : values) {
    double t = (v - lo) / (hi - lo);
    size_t b = t <= 0 ? 0 : (t >= 1 ? bins - 1 : size_t(t * bins));
    counts[b] += 1.0;
  }
  render_bar_chart(path, counts);
}

// ---------------------------------------------------------------------------
// subcommand bodies
// ---------------------------------------------------------------------------

int cmd_extract(const std::string& manifest, const std::string& client_kind,
                const std::string& cache_path, const std::string& out,
                const std::string& fixture_file, const std::string& endpoint,
                const std::string& model_name) {
  auto corpus_data = corpus::load_manifest(manifest);
  extractor::ExtractOptions options{extractor::default_prompt_config(), 3};

  std::unique_ptr<extractor::LlmClient> client;
  if (client_kind == "fixture") {
    if (fixture_file.empty()) throw ConfigError("--fixture-file required for fixture client");
    client = std::make_unique<extractor::FixtureClient>(fixture_file, options.prompt,
                                                        model_name);
  } else if (client_kind == "http") {
    if (endpoint.empty()) throw ConfigError("--endpoint required for http client");
    client = std::make_unique<extractor::HttpClient>(endpoint, model_name);
  } else {
    throw ConfigError("unknown client '" + client_kind + "' (use fixture or http)");
  }

  extractor::ExtractionCache cache(cache_path);
  std::ofstream f(out);
  FGVL_CHECK(f.good(), "cannot open output: " + out);
  size_t failed = 0;
  for (const auto& study : corpus_data.studies) {
    auto outcome = extractor::extract_triplets(study, *client, cache, options);
    if (outcome.failed) {
      ++failed;
      std::cerr << "extract: study " << study.id << " failed after retries\n";
      continue;
    }
    json rec;
    rec["study_id"] = study.id;
    json ts = json::array();
    for (const auto& t : outcome.triplets) ts.push_back(t.encode());
    rec["triplets"] = ts;
    f << rec.dump() << "\n";
  }
  std::cout << "extracted " << (corpus_data.studies.size() - failed) << "/"
            << corpus_data.studies.size() << " studies -> " << out << "\n";
  return 0;
}

int cmd_build_labels(const std::string& triplets_path, const std::string& dict_path,
                     const std::string& mode_str, const std::string& out) {
  auto dict = knowledge::KnowledgeDictionary::load(dict_path);
  auto mode = knowledge::render_mode_from_string(mode_str);
  std::ifstream in(triplets_path);
  FGVL_CHECK(in.good(), "cannot open triplets file: " + triplets_path);
  std::ofstream f(out);
  FGVL_CHECK(f.good(), "cannot open output: " + out);
  std::string line;
  while (std::getline(in, line)) {
    if (trim_copy(line).empty()) continue;
    json rec = json::parse(line);
    json labels = json::array();
    for (const auto& enc : rec.at("triplets")) {
      auto t = DiseaseTriplet::decode(enc.get<std::string>());
      FGVL_CHECK(t.has_value(), "malformed triplet in " + triplets_path);
      labels.push_back(knowledge::render_structured_label(*t, dict, mode).text);
    }
    json out_rec;
    out_rec["study_id"] = rec.at("study_id");
    out_rec["labels"] = labels;
    f << out_rec.dump() << "\n";
  }
  std::cout << "labels written -> " << out << "\n";
  return 0;
}

corpus::Corpus training_corpus(const config::RunConfig& cfg, const std::string& out_dir) {
  if (cfg.corpus_kind == "manifest") return corpus::load_manifest(cfg.manifest_path);
  corpus::SyntheticSpec spec = corpus::default_synthetic_spec();
  spec.n_train = cfg.synthetic_n_train;
  spec.n_eval = cfg.synthetic_n_eval;
  spec.seed = cfg.train.seed;
  spec.image_size = cfg.image_size;
  auto corpora = corpus::generate_synthetic_corpus(spec);
  // materialize the eval split so later subcommands can address it
  auto eval_on_disk =
      corpus::materialize_images(corpora.eval, (fs::path(out_dir) / "eval_images").string());
  corpus::write_manifest((fs::path(out_dir) / "eval_manifest.jsonl").string(), eval_on_disk);
  return corpora.train;
}

int cmd_pretrain(const std::string& config_path, const std::string& out_dir) {
  auto cfg = config::RunConfig::from_file(config_path);
  cfg.out_dir = out_dir;
  require_valid(cfg);
  fs::create_directories(out_dir);
  write_text_file((fs::path(out_dir) / "effective_config.toml").string(), cfg.to_toml());

  auto train_corpus = training_corpus(cfg, out_dir);
  auto dict = knowledge::KnowledgeDictionary::load(cfg.dictionary_path);
  auto provider = ssm::make_provider(cfg.train.ssm_provider, cfg.train.ssm_dim);

  auto result = model::train(train_corpus, cfg.train, dict, *provider,
                             (fs::path(out_dir) / "train_log.jsonl").string());
  if (result.diverged) std::cerr << "pretrain: diverged, last good checkpoint kept\n";
  model::CheckpointMeta meta{cfg.train.epochs, cfg.train.seed};
  model::save_checkpoint((fs::path(out_dir) / "checkpoint.bin").string(), result.model, meta);
  for (const auto& e : result.history)
    std::cout << "epoch " << e.epoch << " loss " << e.mean_loss << " lr " << e.lr << "\n";
  std::cout << "checkpoint -> " << (fs::path(out_dir) / "checkpoint.bin").string() << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& manifest,
             const std::string& mode_str, const std::string& dict_path,
             const std::string& out_dir) {
  fs::create_directories(out_dir);
  auto loaded = model::load_checkpoint(ckpt_path);
  auto eval_corpus = corpus::load_manifest(manifest);
  auto dict = knowledge::KnowledgeDictionary::load(dict_path);

  auto cats = gold_category_set(eval_corpus);
  FGVL_CHECK(!cats.empty(), "eval: manifest has no gold categories");
  auto library = make_library(cats, library_mode_from_string(mode_str));

  Mat scores = evaluator::zero_shot_scores(loaded.model, load_images(eval_corpus), library, dict);
  Mat gold = evaluator::gold_matrix(eval_corpus, library);
  auto report = evaluator::macro_metrics(scores, gold, cats);
  report.config_echo = "ckpt=" + ckpt_path + " manifest=" + manifest + " mode=" + mode_str;

  write_text_file((fs::path(out_dir) / "eval_report.json").string(), report.to_json() + "\n");
  dump_scores((fs::path(out_dir) / "scores.bin").string(), scores);
  json names = cats;
  write_text_file((fs::path(out_dir) / "class_names.json").string(), names.dump() + "\n");
  std::cout << "macro F1 " << report.macro_f1 << " macro ACC " << report.macro_accuracy
            << " -> " << out_dir << "\n";
  return 0;
}

int cmd_retrieve(const std::string& ckpt_path, const std::string& manifest, size_t k,
                 const std::string& dict_path, const std::string& out_dir) {
  fs::create_directories(out_dir);
  auto loaded = model::load_checkpoint(ckpt_path);
  auto eval_corpus = corpus::load_manifest(manifest);
  auto dict = knowledge::KnowledgeDictionary::load(dict_path);
  auto cats = gold_category_set(eval_corpus);
  FGVL_CHECK(!cats.empty(), "retrieve: manifest has no gold categories");

  auto images = load_images(eval_corpus);
  json out;
  for (auto [mode, name] :
       {std::pair{evaluator::LibraryMode::kExplanation, "explanation"},
        std::pair{evaluator::LibraryMode::kPromptTemplate, "prompt_template"}}) {
    auto library = make_library(cats, mode);
    Mat scores = evaluator::zero_shot_scores(loaded.model, images, library, dict);
    // queries are the texts; transpose so rows are queries over the image set
    Mat sim(scores.cols, scores.rows), rel(scores.cols, scores.rows);
    Mat gold = evaluator::gold_matrix(eval_corpus, library);
    for (size_t i = 0; i < scores.rows; ++i)
      for (size_t j = 0; j < scores.cols; ++j) {
        sim.at(j, i) = scores.at(i, j);
        rel.at(j, i) = gold.at(i, j);
      }
    out[name] = evaluator::precision_at_k(sim, rel, k);
  }
  out["k"] = k;
  write_text_file((fs::path(out_dir) / "retrieval.json").string(), out.dump(2) + "\n");
  std::cout << "P@" << k << " explanation " << out["explanation"] << " prompt "
            << out["prompt_template"] << "\n";
  return 0;
}

int cmd_probe(const std::string& ckpt_path, const std::string& manifest, double portion,
              const std::string& out_dir) {
  fs::create_directories(out_dir);
  auto loaded = model::load_checkpoint(ckpt_path);
  auto eval_corpus = corpus::load_manifest(manifest);
  evaluator::ProbeConfig probe;
  probe.portion = portion;
  probe.seed = loaded.model.config.seed;
  auto report = evaluator::linear_probe(loaded.model, eval_corpus, probe);
  write_text_file((fs::path(out_dir) / "probe_report.json").string(), report.to_json() + "\n");
  std::cout << "probe macro F1 " << report.macro_f1 << " -> " << out_dir << "\n";
  return 0;
}

int cmd_report(const std::string& run_dir, const std::string& out_dir) {
  fs::create_directories(out_dir);
  auto scores = ssm::read_ssm((fs::path(run_dir) / "scores.bin").string());
  json names = json::parse(read_text_file((fs::path(run_dir) / "class_names.json").string()));

  // per-class score histograms
  for (size_t c = 0; c < scores.values.cols; ++c) {
    std::vector<double> col;
    for (size_t r = 0; r < scores.values.rows; ++r) col.push_back(scores.values.at(r, c));
    std::string safe = names[c].get<std::string>();
    for (auto& ch : safe)
      if (ch == ' ' || ch == '/') ch = '_';
    render_histogram((fs::path(out_dir) / ("hist_" + safe + ".png")).string(), col, 0.0, 1.0,
                     20);
  }
  // similarity bars for the first few samples
  for (size_t r = 0; r < std::min<size_t>(8, scores.values.rows); ++r) {
    std::vector<double> row(scores.values.row(r), scores.values.row(r) + scores.values.cols);
    render_bar_chart((fs::path(out_dir) / ("sample_" + std::to_string(r) + ".png")).string(),
                     row);
  }
  std::cout << "figures -> " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fine-grained vision-language pretraining pipeline"};
  app.require_subcommand(1);

  std::string manifest, client_kind = "fixture", cache_path = "cache.jsonl", out,
              fixture_file, endpoint, model_name = "fixture";
  auto* extract = app.add_subcommand("extract", "extract disease triplets from reports");
  extract->add_option("--manifest", manifest)->required();
  extract->add_option("--client", client_kind);
  extract->add_option("--cache", cache_path);
  extract->add_option("--out", out)->required();
  extract->add_option("--fixture-file", fixture_file);
  extract->add_option("--endpoint", endpoint);
  extract->add_option("--model", model_name);

  std::string triplets_path, dict_path = "data/dictionary.json",
              mode_str = "fg_entity_plus_explanation";
  auto* build_labels = app.add_subcommand("build-labels", "render structured labels");
  build_labels->add_option("--triplets", triplets_path)->required();
  build_labels->add_option("--dict", dict_path);
  build_labels->add_option("--mode", mode_str);
  build_labels->add_option("--out", out)->required();

  std::string config_path;
  auto* pretrain = app.add_subcommand("pretrain", "train the dual encoder");
  pretrain->add_option("--config", config_path)->required();
  pretrain->add_option("--out", out)->required();

  std::string ckpt_path, lib_mode = "explanation";
  auto* eval_cmd = app.add_subcommand("eval", "zero-shot classification metrics");
  eval_cmd->add_option("--ckpt", ckpt_path)->required();
  eval_cmd->add_option("--manifest", manifest)->required();
  eval_cmd->add_option("--library", lib_mode);
  eval_cmd->add_option("--dict", dict_path);
  eval_cmd->add_option("--out", out)->required();

  size_t k = 1;
  auto* retrieve = app.add_subcommand("retrieve", "text-to-image retrieval P@K");
  retrieve->add_option("--ckpt", ckpt_path)->required();
  retrieve->add_option("--manifest", manifest)->required();
  retrieve->add_option("--k", k);
  retrieve->add_option("--dict", dict_path);
  retrieve->add_option("--out", out)->required();

  double portion = 1.0;
  auto* probe = app.add_subcommand("probe", "linear probe of the frozen image encoder");
  probe->add_option("--ckpt", ckpt_path)->required();
  probe->add_option("--manifest", manifest)->required();
  probe->add_option("--portion", portion);
  probe->add_option("--out", out)->required();

  std::string run_dir;
  auto* report = app.add_subcommand("report", "render score figures for a run");
  report->add_option("--run-dir", run_dir)->required();
  report->add_option("--out", out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n" << app.help();
    return kExitUsage;
  }

  try {
    if (extract->parsed())
      return cmd_extract(manifest, client_kind, cache_path, out, fixture_file, endpoint,
                         model_name);
    if (build_labels->parsed()) return cmd_build_labels(triplets_path, dict_path, mode_str, out);
    if (pretrain->parsed()) return cmd_pretrain(config_path, out);
    if (eval_cmd->parsed()) return cmd_eval(ckpt_path, manifest, lib_mode, dict_path, out);
    if (retrieve->parsed()) return cmd_retrieve(ckpt_path, manifest, k, dict_path, out);
    if (probe->parsed()) return cmd_probe(ckpt_path, manifest, portion, out);
    if (report->parsed()) return cmd_report(run_dir, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitUsage;
}
