#include "fgvl/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include <json.hpp>

namespace fgvl::evaluator {

using nlohmann::json;

std::vector<std::string> CategoryLibrary::render(const knowledge::KnowledgeDictionary& dict,
                                                 knowledge::LookupPolicy policy) const {
  FGVL_CHECK(!entries.empty(), "category library: empty");
  std::vector<std::string> out;
  for (const auto& entry : entries) {
    if (mode == LibraryMode::kPromptTemplate) {
      out.push_back("this is an x-ray image of " + entry.category);
      continue;
    }
    DiseaseTriplet t;
    if (entry.severity) t.severity = *entry.severity;
    if (entry.location) t.location = *entry.location;
    t.category = normalize_token(entry.category);
    auto render_mode = mode == LibraryMode::kExplanation
                           ? knowledge::RenderMode::kFgEntityPlusExplanation
                           : knowledge::RenderMode::kFgEntity;
    out.push_back(knowledge::render_structured_label(t, dict, render_mode, policy).text);
  }
  return out;
}

void CategoryLibrary::validate_rendered(const std::vector<std::string>& rendered) const {
  std::set<std::string> unique(rendered.begin(), rendered.end());
  FGVL_CHECK(unique.size() == rendered.size(),
             "category library: entries not distinct after rendering");
}

std::string EvalReport::to_json() const {
  json j;
  j["macro_f1"] = macro_f1;
  j["macro_accuracy"] = macro_accuracy;
  j["n_samples"] = n_samples;
  j["config"] = config_echo;
  j["per_class"] = json::array();
  for (const auto& pc : per_class) {
    json c;
    c["category"] = pc.category;
    c["threshold"] = pc.threshold;
    c["f1"] = pc.f1;
    c["accuracy"] = pc.accuracy;
    c["positives"] = pc.positives;
    j["per_class"].push_back(c);
  }
  return j.dump(2);
}

Mat zero_shot_scores(model::Model& model, const std::vector<Image>& images,
                     const CategoryLibrary& library,
                     const knowledge::KnowledgeDictionary& dict,
                     knowledge::LookupPolicy policy) {
  FGVL_CHECK(!images.empty(), "zero_shot_scores: no images");
  auto texts = library.render(dict, policy);
  Mat text_emb = model.encode_texts(texts);

  // images in chunks to bound activation memory
  Mat scores(images.size(), texts.size());
  constexpr size_t kChunk = 64;
  for (size_t start = 0; start < images.size(); start += kChunk) {
    size_t take = std::min(kChunk, images.size() - start);
    std::vector<Image> chunk(images.begin() + start, images.begin() + start + take);
    Mat img_emb = model.encode_images(chunk);
    Mat y = model::similarity_matrix(img_emb, text_emb, 1.0);
    for (size_t i = 0; i < take; ++i)
      for (size_t j = 0; j < texts.size(); ++j) scores.at(start + i, j) = y.at(i, j);
  }
  return scores;
}

ThresholdResult best_f1_threshold(const std::vector<double>& scores,
                                  const std::vector<int>& labels) {
  FGVL_CHECK(scores.size() == labels.size() && !scores.empty(),
             "best_f1_threshold: size mismatch or empty input");
  const size_t n = scores.size();
  size_t total_pos = 0;
  for (int l : labels) total_pos += l != 0;
  FGVL_CHECK(total_pos > 0, "best_f1_threshold: no positive labels, F1 undefined");

  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](size_t a, size_t b) { return scores[a] > scores[b]; });

  // sweep: predict positive for the top k scores; thresholds are midpoints
  // between adjacent distinct sorted scores plus sentinels beyond both ends
  ThresholdResult best;
  best.f1 = -1.0;
  size_t tp = 0;
  for (size_t k = 0; k <= n; ++k) {
    if (k > 0) tp += labels[idx[k - 1]] != 0;
    // a cut between equal scores is not a realizable threshold
    if (k > 0 && k < n && scores[idx[k]] == scores[idx[k - 1]]) continue;
    double threshold;
    if (k == 0)
      threshold = scores[idx[0]] + 1.0;
    else if (k == n)
      threshold = scores[idx[n - 1]] - 1.0;
    else
      threshold = (scores[idx[k - 1]] + scores[idx[k]]) / 2.0;

    const size_t fp = k - tp;
    const size_t fn = total_pos - tp;
    const double f1 = (2.0 * tp + fp + fn) > 0 ? 2.0 * tp / (2.0 * tp + fp + fn) : 0.0;
    const size_t tn = n - k - fn;
    const double acc = double(tp + tn) / double(n);
    if (f1 > best.f1 + 1e-15 ||
        (std::abs(f1 - best.f1) <= 1e-15 &&
         (acc > best.accuracy + 1e-15 ||
          (std::abs(acc - best.accuracy) <= 1e-15 && threshold < best.threshold))))
      best = {threshold, f1, acc};
  }
  return best;
}

EvalReport macro_metrics(const Mat& scores, const Mat& gold,
                         const std::vector<std::string>& class_names) {
  FGVL_CHECK(scores.same_shape(gold), "macro_metrics: shape mismatch");
  FGVL_CHECK(class_names.size() == scores.cols, "macro_metrics: class name count mismatch");
  bool any_positive = false;
  for (double v : gold.a) any_positive |= v != 0.0;
  FGVL_CHECK(any_positive, "macro_metrics: empty gold matrix");

  EvalReport report;
  report.n_samples = scores.rows;
  double f1_sum = 0.0, acc_sum = 0.0;
  size_t included = 0;
  for (size_t c = 0; c < scores.cols; ++c) {
    std::vector<double> col(scores.rows);
    std::vector<int> lab(scores.rows);
    size_t pos = 0;
    for (size_t r = 0; r < scores.rows; ++r) {
      col[r] = scores.at(r, c);
      lab[r] = gold.at(r, c) != 0.0 ? 1 : 0;
      pos += lab[r];
    }
    if (pos == 0) continue;  // excluded; callers may warn on report contents
    auto best = best_f1_threshold(col, lab);
    report.per_class.push_back({class_names[c], best.threshold, best.f1, best.accuracy, pos});
    f1_sum += best.f1;
    acc_sum += best.accuracy;
    ++included;
  }
  FGVL_CHECK(included > 0, "macro_metrics: no class has positives");
  report.macro_f1 = f1_sum / double(included);
  report.macro_accuracy = acc_sum / double(included);
  return report;
}

double precision_at_k(const Mat& similarity, const Mat& relevance, size_t k) {
  FGVL_CHECK(similarity.same_shape(relevance), "precision_at_k: shape mismatch");
  FGVL_CHECK(k >= 1, "precision_at_k: k must be >= 1");
  FGVL_CHECK(k <= similarity.cols, "precision_at_k: k exceeds item count");
  double total = 0.0;
  for (size_t q = 0; q < similarity.rows; ++q) {
    std::vector<size_t> idx(similarity.cols);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
      return similarity.at(q, a) > similarity.at(q, b);
    });
    size_t hits = 0;
    for (size_t i = 0; i < k; ++i) hits += relevance.at(q, idx[i]) != 0.0;
    total += double(hits) / double(k);
  }
  return similarity.rows ? total / double(similarity.rows) : 0.0;
}

Mat gold_matrix(const corpus::Corpus& corpus, const CategoryLibrary& library) {
  Mat gold(corpus.studies.size(), library.entries.size());
  for (size_t r = 0; r < corpus.studies.size(); ++r) {
    const auto& study = corpus.studies[r];
    if (!study.gold_categories) continue;
    for (size_t c = 0; c < library.entries.size(); ++c) {
      const std::string cat = normalize_token(library.entries[c].category);
      for (const auto& g : *study.gold_categories)
        if (g == cat) gold.at(r, c) = 1.0;
    }
  }
  return gold;
}

UnseenResult unseen_category_eval(model::Model& model, const corpus::Corpus& eval_corpus,
                                  const std::vector<std::string>& held_out,
                                  const std::vector<std::string>& seen,
                                  const std::map<std::string, std::string>& proxy,
                                  const knowledge::KnowledgeDictionary& dict,
                                  UnseenMode mode) {
  FGVL_CHECK(!held_out.empty(), "unseen eval: no held-out categories");
  for (const auto& h : held_out)
    FGVL_CHECK(std::find(seen.begin(), seen.end(), h) == seen.end(),
               "unseen eval: held-out category '" + h + "' present in training categories");

  // candidate texts: seen categories use their trained explanation labels;
  // held-out entries use either their own explanation or the proxy's label
  std::vector<std::string> texts;
  std::vector<std::string> names;
  for (const auto& s : seen) {
    DiseaseTriplet t;
    t.category = normalize_token(s);
    texts.push_back(knowledge::render_structured_label(
                        t, dict, knowledge::RenderMode::kFgEntityPlusExplanation)
                        .text);
    names.push_back(t.category);
  }
  const size_t held_offset = texts.size();
  for (const auto& h : held_out) {
    DiseaseTriplet t;
    knowledge::RenderMode rm;
    if (mode == UnseenMode::kExplanation) {
      // the held-out category's own explanation is the candidate text
      t.category = normalize_token(h);
      rm = knowledge::RenderMode::kFgEntityPlusExplanation;
    } else {
      // category mode: the proxy's bare category name stands in
      auto it = proxy.find(h);
      FGVL_CHECK(it != proxy.end(), "unseen eval: no proxy for held-out category '" + h + "'");
      t.category = normalize_token(it->second);
      rm = knowledge::RenderMode::kFgEntity;
    }
    texts.push_back(knowledge::render_structured_label(t, dict, rm).text);
    names.push_back(normalize_token(h));
  }

  Mat text_emb = model.encode_texts(texts);
  std::vector<Image> images;
  images.reserve(eval_corpus.studies.size());
  for (const auto& s : eval_corpus.studies) images.push_back(s.load_image());

  Mat scores(images.size(), texts.size());
  constexpr size_t kChunk = 64;
  for (size_t start = 0; start < images.size(); start += kChunk) {
    size_t take = std::min(kChunk, images.size() - start);
    std::vector<Image> chunk(images.begin() + start, images.begin() + start + take);
    Mat img_emb = model.encode_images(chunk);
    Mat y = model::similarity_matrix(img_emb, text_emb, 1.0);
    for (size_t i = 0; i < take; ++i)
      for (size_t j = 0; j < texts.size(); ++j) scores.at(start + i, j) = y.at(i, j);
  }

  // thresholded per-held-out-class metrics over the whole eval corpus
  UnseenResult result;
  {
    Mat held_scores(images.size(), held_out.size());
    Mat held_gold(images.size(), held_out.size());
    for (size_t r = 0; r < images.size(); ++r)
      for (size_t c = 0; c < held_out.size(); ++c) {
        held_scores.at(r, c) = scores.at(r, held_offset + c);
        const auto& study = eval_corpus.studies[r];
        if (study.gold_categories)
          for (const auto& g : *study.gold_categories)
            if (g == normalize_token(held_out[c])) held_gold.at(r, c) = 1.0;
      }
    std::vector<std::string> held_names(held_out.begin(), held_out.end());
    result.report = macro_metrics(held_scores, held_gold, held_names);
  }

  // argmax among the held-out candidates, restricted to held-out images.
  // Each candidate column is centered by its mean over the whole eval
  // population first: candidate texts carry different global offsets against
  // every image, and the offset would otherwise swamp the per-image signal.
  std::vector<double> col_mean(held_out.size(), 0.0);
  for (size_t c = 0; c < held_out.size(); ++c) {
    for (size_t r = 0; r < images.size(); ++r) col_mean[c] += scores.at(r, held_offset + c);
    col_mean[c] /= double(images.size());
  }
  size_t correct = 0, total = 0;
  for (size_t r = 0; r < images.size(); ++r) {
    const auto& study = eval_corpus.studies[r];
    if (!study.gold_categories) continue;
    std::optional<size_t> gold_idx;
    for (size_t c = 0; c < held_out.size(); ++c)
      for (const auto& g : *study.gold_categories)
        if (g == normalize_token(held_out[c])) gold_idx = c;
    if (!gold_idx) continue;
    size_t best = 0;
    for (size_t c = 1; c < held_out.size(); ++c)
      if (scores.at(r, held_offset + c) - col_mean[c] >
          scores.at(r, held_offset + best) - col_mean[best])
        best = c;
    correct += best == *gold_idx;
    ++total;
  }
  FGVL_CHECK(total > 0, "unseen eval: no held-out images in the eval corpus");
  result.argmax_accuracy = double(correct) / double(total);
  result.chance = 1.0 / double(held_out.size());
  return result;
}

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

namespace {

Mat frozen_features(model::Model& model, const std::vector<Image>& images) {
  Mat out(images.size(), model.config.d_img);
  constexpr size_t kChunk = 64;
  for (size_t start = 0; start < images.size(); start += kChunk) {
    size_t take = std::min(kChunk, images.size() - start);
    std::vector<Image> chunk(images.begin() + start, images.begin() + start + take);
    Mat f = model.image_encoder->forward(chunk);
    for (size_t i = 0; i < take; ++i)
      for (size_t c = 0; c < f.cols; ++c) out.at(start + i, c) = f.at(i, c);
  }
  return out;
}

// largest-remainder allocation of round(portion*total) across classes
std::vector<size_t> stratified_take(const std::vector<size_t>& class_counts, double portion) {
  size_t total = 0;
  for (size_t c : class_counts) total += c;
  size_t want = static_cast<size_t>(std::llround(portion * double(total)));
  want = std::min(want, total);
  std::vector<size_t> take(class_counts.size());
  std::vector<std::pair<double, size_t>> remainders;
  size_t assigned = 0;
  for (size_t i = 0; i < class_counts.size(); ++i) {
    double share = double(class_counts[i]) * double(want) / double(total);
    take[i] = static_cast<size_t>(std::floor(share));
    assigned += take[i];
    remainders.push_back({share - double(take[i]), i});
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (size_t i = 0; assigned < want && i < remainders.size(); ++i) {
    ++take[remainders[i].second];
    ++assigned;
  }
  for (size_t i = 0; i < take.size(); ++i)
    FGVL_CHECK(take[i] >= 1, "linear probe: stratification error, class " + std::to_string(i) +
                                 " has no training samples at this portion");
  return take;
}

}  // namespace

EvalReport linear_probe(model::Model& model, const corpus::Corpus& corpus,
                        const ProbeConfig& probe) {
  FGVL_CHECK(probe.portion > 0.0 && probe.portion <= 1.0, "linear probe: portion out of (0,1]");
  FGVL_CHECK(!corpus.studies.empty(), "linear probe: empty corpus");

  // class set from the first gold category of each study
  std::map<std::string, size_t> class_ids;
  std::vector<size_t> study_class(corpus.studies.size());
  for (size_t i = 0; i < corpus.studies.size(); ++i) {
    FGVL_CHECK(corpus.studies[i].gold_categories && !corpus.studies[i].gold_categories->empty(),
               "linear probe: study " + corpus.studies[i].id + " has no gold categories");
    const std::string& cat = corpus.studies[i].gold_categories->front();
    auto [it, _] = class_ids.try_emplace(cat, class_ids.size());
    study_class[i] = it->second;
  }
  const size_t n_classes = class_ids.size();
  std::vector<std::string> class_names(n_classes);
  for (const auto& [name, id] : class_ids) class_names[id] = name;

  // deterministic shuffle, 80/20 split
  std::vector<size_t> order(corpus.studies.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng(probe.seed).split(0x9B0BE);
  for (size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[rng.below(i)]);
  const size_t n_train_pool = (order.size() * 4) / 5;

  // stratified subsample of the training pool
  std::vector<std::vector<size_t>> pool_by_class(n_classes);
  for (size_t i = 0; i < n_train_pool; ++i)
    pool_by_class[study_class[order[i]]].push_back(order[i]);
  std::vector<size_t> counts(n_classes);
  for (size_t c = 0; c < n_classes; ++c) counts[c] = pool_by_class[c].size();
  auto take = stratified_take(counts, probe.portion);
  std::vector<size_t> train_idx;
  for (size_t c = 0; c < n_classes; ++c)
    train_idx.insert(train_idx.end(), pool_by_class[c].begin(),
                     pool_by_class[c].begin() + std::min(take[c], pool_by_class[c].size()));
  std::vector<size_t> test_idx(order.begin() + n_train_pool, order.end());
  FGVL_CHECK(!test_idx.empty(), "linear probe: empty held-out split");

  auto load = [&](const std::vector<size_t>& idx) {
    std::vector<Image> images;
    for (size_t i : idx) images.push_back(corpus.studies[i].load_image());
    return images;
  };
  Mat x_train = frozen_features(model, load(train_idx));
  Mat x_test = frozen_features(model, load(test_idx));

  const size_t d = x_train.cols;
  Mat w(n_classes, d);
  std::vector<double> b(n_classes, 0.0);
  Rng init_rng = Rng(probe.seed).split(0xF17);
  for (auto& v : w.a) v = 0.01 * init_rng.gaussian();

  auto forward_loss = [&](const Mat& x, const std::vector<size_t>& idx, Mat* probs) {
    double loss = 0.0;
    if (probs) *probs = Mat(x.rows, n_classes);
    for (size_t r = 0; r < x.rows; ++r) {
      std::vector<double> logits(n_classes);
      double mx = -1e300;
      for (size_t c = 0; c < n_classes; ++c) {
        logits[c] = b[c] + dot(w.row(c), x.row(r), d);
        mx = std::max(mx, logits[c]);
      }
      double z = 0.0;
      for (size_t c = 0; c < n_classes; ++c) z += std::exp(logits[c] - mx);
      const size_t gold = study_class[idx[r]];
      loss += -(logits[gold] - mx - std::log(z));
      if (probs)
        for (size_t c = 0; c < n_classes; ++c)
          probs->at(r, c) = std::exp(logits[c] - mx) / z;
    }
    return loss / double(x.rows);
  };

  // full-batch gradient descent with early stopping on held-out loss
  Mat best_w = w;
  std::vector<double> best_b = b;
  double best_test_loss = 1e300;
  size_t since_best = 0;
  for (size_t epoch = 0; epoch < probe.max_epochs; ++epoch) {
    Mat probs;
    forward_loss(x_train, train_idx, &probs);
    Mat dw(n_classes, d);
    std::vector<double> db(n_classes, 0.0);
    const double inv = 1.0 / double(x_train.rows);
    for (size_t r = 0; r < x_train.rows; ++r) {
      const size_t gold = study_class[train_idx[r]];
      for (size_t c = 0; c < n_classes; ++c) {
        const double g = (probs.at(r, c) - (c == gold ? 1.0 : 0.0)) * inv;
        db[c] += g;
        for (size_t j = 0; j < d; ++j) dw.at(c, j) += g * x_train.at(r, j);
      }
    }
    for (size_t i = 0; i < w.a.size(); ++i) w.a[i] -= probe.lr * dw.a[i];
    for (size_t c = 0; c < n_classes; ++c) b[c] -= probe.lr * db[c];

    double test_loss = forward_loss(x_test, test_idx, nullptr);
    if (test_loss < best_test_loss - 1e-9) {
      best_test_loss = test_loss;
      best_w = w;
      best_b = b;
      since_best = 0;
    } else if (++since_best >= 10) {
      break;
    }
  }
  w = best_w;
  b = best_b;

  Mat probs;
  forward_loss(x_test, test_idx, &probs);
  Mat gold(x_test.rows, n_classes);
  for (size_t r = 0; r < x_test.rows; ++r) gold.at(r, study_class[test_idx[r]]) = 1.0;
  EvalReport report = macro_metrics(probs, gold, class_names);
  report.config_echo = "linear_probe portion=" + std::to_string(probe.portion) +
                       " seed=" + std::to_string(probe.seed);
  return report;
}

}  // namespace fgvl::evaluator
