#include "fgvl/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "fgvl/extractor.hpp"

namespace fgvl::model {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Param
// ---------------------------------------------------------------------------

namespace {
size_t shape_count(const std::vector<size_t>& shape) {
  size_t n = 1;
  for (size_t s : shape) n *= s;
  return n;
}
}  // namespace

void Param::init_zero(std::string n, std::vector<size_t> s) {
  name = std::move(n);
  shape = std::move(s);
  value.assign(shape_count(shape), 0.0);
  grad.assign(value.size(), 0.0);
}

void Param::init_gaussian(std::string n, std::vector<size_t> s, double stddev, Rng& rng) {
  init_zero(std::move(n), std::move(s));
  for (auto& v : value) v = stddev * rng.gaussian();
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

LossMode loss_mode_from_string(const std::string& s) {
  if (s == "canonical") return LossMode::kCanonical;
  if (s == "literal") return LossMode::kLiteral;
  fail("unknown loss mode: '" + s + "'");
}

std::string to_string(LossMode m) {
  return m == LossMode::kCanonical ? "canonical" : "literal";
}

std::vector<std::string> TrainConfig::violations() const {
  std::vector<std::string> v;
  if (!(lr > 0.0)) v.push_back("TrainConfig.lr must be > 0");
  if (lr_min < 0.0 || lr_min > lr) v.push_back("TrainConfig.lr_min must be in [0, lr]");
  if (!(temperature > 0.0)) v.push_back("TrainConfig.temperature must be > 0");
  if (batch_size < 2) v.push_back("TrainConfig.batch_size must be >= 2");
  if (mask_prob < 0.0 || mask_prob > 1.0)
    v.push_back("TrainConfig.mask_prob must be in [0,1]");
  if (restart_period < 1) v.push_back("TrainConfig.restart_period must be >= 1");
  if (restart_mult < 1) v.push_back("TrainConfig.restart_mult must be >= 1");
  if (d_img == 0 || d_txt == 0 || embed_dim == 0 || conv1_channels == 0 ||
      conv2_channels == 0)
    v.push_back("TrainConfig dimensions must be positive");
  if (text_encoder != "meanpool" && text_encoder != "attention")
    v.push_back("TrainConfig.text_encoder must be 'meanpool' or 'attention'");
  if (ssm_provider != "bag_of_tokens" && ssm_provider != "hash_unit")
    v.push_back("TrainConfig.ssm_provider must be 'bag_of_tokens' or 'hash_unit'");
  if (ssm_dim == 0) v.push_back("TrainConfig.ssm_dim must be positive");
  return v;
}

void TrainConfig::validate() const {
  auto v = violations();
  if (!v.empty()) fail("invalid config: " + join(v, "; "));
}

std::string TrainConfig::to_json() const {
  json j;
  j["lr"] = lr;
  j["lr_min"] = lr_min;
  j["restart_period"] = restart_period;
  j["restart_mult"] = restart_mult;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["mask_prob"] = mask_prob;
  j["loss_mode"] = to_string(loss_mode);
  j["temperature"] = temperature;
  j["seed"] = seed;
  j["use_entity"] = use_entity;
  j["use_fg"] = use_fg;
  j["use_iki"] = use_iki;
  j["use_ssm"] = use_ssm;
  j["d_img"] = d_img;
  j["d_txt"] = d_txt;
  j["embed_dim"] = embed_dim;
  j["conv1_channels"] = conv1_channels;
  j["conv2_channels"] = conv2_channels;
  j["text_encoder"] = text_encoder;
  j["ssm_provider"] = ssm_provider;
  j["ssm_dim"] = ssm_dim;
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  TrainConfig c;
  c.lr = j.at("lr");
  c.lr_min = j.at("lr_min");
  c.restart_period = j.at("restart_period");
  c.restart_mult = j.at("restart_mult");
  c.epochs = j.at("epochs");
  c.batch_size = j.at("batch_size");
  c.mask_prob = j.at("mask_prob");
  c.loss_mode = loss_mode_from_string(j.at("loss_mode"));
  c.temperature = j.at("temperature");
  c.seed = j.at("seed");
  c.use_entity = j.at("use_entity");
  c.use_fg = j.at("use_fg");
  c.use_iki = j.at("use_iki");
  c.use_ssm = j.at("use_ssm");
  c.d_img = j.at("d_img");
  c.d_txt = j.at("d_txt");
  c.embed_dim = j.at("embed_dim");
  c.conv1_channels = j.at("conv1_channels");
  c.conv2_channels = j.at("conv2_channels");
  c.text_encoder = j.at("text_encoder");
  c.ssm_provider = j.at("ssm_provider");
  c.ssm_dim = j.at("ssm_dim");
  return c;
}

// ---------------------------------------------------------------------------
// Vocab
// ---------------------------------------------------------------------------

Vocab Vocab::build(const std::vector<std::string>& texts) {
  std::set<std::string> unique;
  for (const auto& t : texts)
    for (const auto& tok : word_tokens(t))
      if (tok != knowledge::kMaskToken && !is_function_word(tok)) unique.insert(tok);
  Vocab v;
  v.tokens = {"<unk>", knowledge::kMaskToken};
  v.tokens.insert(v.tokens.end(), unique.begin(), unique.end());
  for (size_t i = 0; i < v.tokens.size(); ++i) v.token_to_id[v.tokens[i]] = i;
  return v;
}

std::vector<size_t> Vocab::encode(const std::string& text) const {
  std::vector<size_t> ids;
  for (const auto& tok : word_tokens(text)) {
    if (is_function_word(tok)) continue;  // function words would crowd the pool
    auto it = token_to_id.find(tok);
    ids.push_back(it == token_to_id.end() ? kUnkId : it->second);
  }
  if (ids.empty()) ids.push_back(kUnkId);
  return ids;
}

// ---------------------------------------------------------------------------
// ConvLayer
// ---------------------------------------------------------------------------

void ConvLayer::init(const std::string& name, size_t in_channels, size_t out_channels,
                     Rng& rng) {
  in_ch = in_channels;
  out_ch = out_channels;
  w.init_gaussian(name + ".w", {out_ch, in_ch, 3, 3},
                  std::sqrt(2.0 / (double(in_ch) * 9.0)), rng);
  b.init_zero(name + ".b", {out_ch});
}

std::vector<double> ConvLayer::forward(const double* in, size_t h, size_t w_in) const {
  const size_t oh = out_extent(h), ow = out_extent(w_in);
  std::vector<double> out(out_ch * oh * ow, 0.0);
  for (size_t oc = 0; oc < out_ch; ++oc) {
    const double bias = b.value[oc];
    for (size_t r = 0; r < oh; ++r)
      for (size_t c = 0; c < ow; ++c) {
        double acc = bias;
        for (size_t ic = 0; ic < in_ch; ++ic) {
          const double* in_plane = in + ic * h * w_in;
          const double* kw = w.value.data() + ((oc * in_ch + ic) * 9);
          for (int kr = 0; kr < 3; ++kr) {
            const ptrdiff_t y = ptrdiff_t(2 * r) + kr - 1;
            if (y < 0 || y >= ptrdiff_t(h)) continue;
            for (int kc = 0; kc < 3; ++kc) {
              const ptrdiff_t x = ptrdiff_t(2 * c) + kc - 1;
              if (x < 0 || x >= ptrdiff_t(w_in)) continue;
              acc += kw[kr * 3 + kc] * in_plane[y * w_in + x];
            }
          }
        }
        out[(oc * oh + r) * ow + c] = acc > 0.0 ? acc : 0.0;  // ReLU
      }
  }
  return out;
}

std::vector<double> ConvLayer::backward(const double* in, size_t h, size_t w_in,
                                        const double* out, const double* d_out,
                                        double* dw, double* db) const {
  const size_t oh = out_extent(h), ow = out_extent(w_in);
  std::vector<double> d_in(in_ch * h * w_in, 0.0);
  for (size_t oc = 0; oc < out_ch; ++oc) {
    for (size_t r = 0; r < oh; ++r)
      for (size_t c = 0; c < ow; ++c) {
        const size_t idx = (oc * oh + r) * ow + c;
        if (out[idx] <= 0.0) continue;  // ReLU gate
        const double g = d_out[idx];
        db[oc] += g;
        for (size_t ic = 0; ic < in_ch; ++ic) {
          const double* in_plane = in + ic * h * w_in;
          double* d_in_plane = d_in.data() + ic * h * w_in;
          const size_t wbase = (oc * in_ch + ic) * 9;
          for (int kr = 0; kr < 3; ++kr) {
            const ptrdiff_t y = ptrdiff_t(2 * r) + kr - 1;
            if (y < 0 || y >= ptrdiff_t(h)) continue;
            for (int kc = 0; kc < 3; ++kc) {
              const ptrdiff_t x = ptrdiff_t(2 * c) + kc - 1;
              if (x < 0 || x >= ptrdiff_t(w_in)) continue;
              dw[wbase + kr * 3 + kc] += g * in_plane[y * w_in + x];
              d_in_plane[y * w_in + x] += g * w.value[wbase + kr * 3 + kc];
            }
          }
        }
      }
  }
  return d_in;
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

void Linear::init(const std::string& name, size_t in_dim, size_t out_dim, Rng& rng) {
  w.init_gaussian(name + ".w", {out_dim, in_dim}, std::sqrt(1.0 / double(in_dim)), rng);
  b.init_zero(name + ".b", {out_dim});
}

Mat Linear::forward(const Mat& x) const {
  const size_t out_d = b.count(), in_d = w.shape[1];
  FGVL_CHECK(x.cols == in_d, "linear " + w.name + ": input dimension mismatch");
  Mat y(x.rows, out_d);
  for (size_t r = 0; r < x.rows; ++r)
    for (size_t o = 0; o < out_d; ++o)
      y.at(r, o) = b.value[o] + dot(w.value.data() + o * in_d, x.row(r), in_d);
  return y;
}

Mat Linear::backward(const Mat& x, const Mat& d_out) {
  const size_t out_d = b.count(), in_d = w.shape[1];
  Mat d_x(x.rows, in_d);
  for (size_t r = 0; r < x.rows; ++r)
    for (size_t o = 0; o < out_d; ++o) {
      const double g = d_out.at(r, o);
      b.grad[o] += g;
      double* wg = w.grad.data() + o * in_d;
      double* wv = w.value.data() + o * in_d;
      const double* xr = x.row(r);
      for (size_t i = 0; i < in_d; ++i) {
        wg[i] += g * xr[i];
        d_x.at(r, i) += g * wv[i];
      }
    }
  return d_x;
}

// ---------------------------------------------------------------------------
// ConvImageEncoder
// ---------------------------------------------------------------------------

ConvImageEncoder::ConvImageEncoder(const TrainConfig& config, Rng& rng) {
  conv1_.init("img.conv1", 1, config.conv1_channels, rng);
  conv2_.init("img.conv2", config.conv1_channels, config.conv2_channels, rng);
  conv3_.init("img.conv3", config.conv2_channels, config.d_img, rng);
}

Mat ConvImageEncoder::forward(const std::vector<Image>& batch) {
  FGVL_CHECK(!batch.empty(), "image encoder: empty batch");
  const size_t h = batch[0].height, w = batch[0].width;
  for (const auto& img : batch)
    FGVL_CHECK(img.height == h && img.width == w, "image encoder: shape mismatch in batch");

  states_.assign(batch.size(), {});
  Mat out(batch.size(), conv3_.out_ch);
  const size_t h3 = ConvLayer::out_extent(ConvLayer::out_extent(ConvLayer::out_extent(h)));
  const size_t w3 = ConvLayer::out_extent(ConvLayer::out_extent(ConvLayer::out_extent(w)));
  const double inv_area = 1.0 / double(h3 * w3);

#pragma omp parallel for schedule(dynamic)
  for (ptrdiff_t n = 0; n < ptrdiff_t(batch.size()); ++n) {
    auto& st = states_[n];
    st.h = h;
    st.w = w;
    st.x0 = batch[n].values;
    st.a1 = conv1_.forward(st.x0.data(), h, w);
    const size_t h1 = ConvLayer::out_extent(h), w1 = ConvLayer::out_extent(w);
    st.a2 = conv2_.forward(st.a1.data(), h1, w1);
    const size_t h2 = ConvLayer::out_extent(h1), w2 = ConvLayer::out_extent(w1);
    st.a3 = conv3_.forward(st.a2.data(), h2, w2);
    for (size_t ch = 0; ch < conv3_.out_ch; ++ch) {
      double acc = 0.0;
      const double* plane = st.a3.data() + ch * h3 * w3;
      for (size_t i = 0; i < h3 * w3; ++i) acc += plane[i];
      out.at(n, ch) = acc * inv_area;
    }
  }
  return out;
}

void ConvImageEncoder::backward(const Mat& d_out) {
  FGVL_CHECK(d_out.rows == states_.size(), "image encoder: backward without matching forward");
  struct GradBuf {
    std::vector<double> w1, b1, w2, b2, w3, b3;
  };
  std::vector<GradBuf> bufs(states_.size());

#pragma omp parallel for schedule(dynamic)
  for (ptrdiff_t n = 0; n < ptrdiff_t(states_.size()); ++n) {
    auto& st = states_[n];
    auto& gb = bufs[n];
    gb.w1.assign(conv1_.w.count(), 0.0);
    gb.b1.assign(conv1_.b.count(), 0.0);
    gb.w2.assign(conv2_.w.count(), 0.0);
    gb.b2.assign(conv2_.b.count(), 0.0);
    gb.w3.assign(conv3_.w.count(), 0.0);
    gb.b3.assign(conv3_.b.count(), 0.0);

    const size_t h1 = ConvLayer::out_extent(st.h), w1 = ConvLayer::out_extent(st.w);
    const size_t h2 = ConvLayer::out_extent(h1), w2 = ConvLayer::out_extent(w1);
    const size_t h3 = ConvLayer::out_extent(h2), w3 = ConvLayer::out_extent(w2);
    const double inv_area = 1.0 / double(h3 * w3);

    std::vector<double> d_a3(conv3_.out_ch * h3 * w3);
    for (size_t ch = 0; ch < conv3_.out_ch; ++ch) {
      const double g = d_out.at(n, ch) * inv_area;
      for (size_t i = 0; i < h3 * w3; ++i) d_a3[ch * h3 * w3 + i] = g;
    }
    auto d_a2 = conv3_.backward(st.a2.data(), h2, w2, st.a3.data(), d_a3.data(),
                                gb.w3.data(), gb.b3.data());
    auto d_a1 = conv2_.backward(st.a1.data(), h1, w1, st.a2.data(), d_a2.data(),
                                gb.w2.data(), gb.b2.data());
    conv1_.backward(st.x0.data(), st.h, st.w, st.a1.data(), d_a1.data(), gb.w1.data(),
                    gb.b1.data());
  }

  // reduce in sample order so accumulation is deterministic
  for (const auto& gb : bufs) {
    for (size_t i = 0; i < gb.w1.size(); ++i) conv1_.w.grad[i] += gb.w1[i];
    for (size_t i = 0; i < gb.b1.size(); ++i) conv1_.b.grad[i] += gb.b1[i];
    for (size_t i = 0; i < gb.w2.size(); ++i) conv2_.w.grad[i] += gb.w2[i];
    for (size_t i = 0; i < gb.b2.size(); ++i) conv2_.b.grad[i] += gb.b2[i];
    for (size_t i = 0; i < gb.w3.size(); ++i) conv3_.w.grad[i] += gb.w3[i];
    for (size_t i = 0; i < gb.b3.size(); ++i) conv3_.b.grad[i] += gb.b3[i];
  }
}

std::vector<Param*> ConvImageEncoder::parameters() {
  return {&conv1_.w, &conv1_.b, &conv2_.w, &conv2_.b, &conv3_.w, &conv3_.b};
}

// ---------------------------------------------------------------------------
// MeanPoolTextEncoder
// ---------------------------------------------------------------------------

MeanPoolTextEncoder::MeanPoolTextEncoder(size_t vocab_size, size_t d_txt, Rng& rng)
    : d_(d_txt) {
  emb_.init_gaussian("txt.emb", {vocab_size, d_txt}, 0.5, rng);
}

Mat MeanPoolTextEncoder::forward(const std::vector<std::vector<size_t>>& token_batch) {
  cached_tokens_ = token_batch;
  Mat out(token_batch.size(), d_);
  for (size_t m = 0; m < token_batch.size(); ++m) {
    const auto& ids = token_batch[m];
    FGVL_CHECK(!ids.empty(), "text encoder: empty token sequence");
    const double inv = 1.0 / double(ids.size());
    for (size_t id : ids) {
      FGVL_CHECK(id < emb_.shape[0], "text encoder: token id out of range");
      const double* row = emb_.value.data() + id * d_;
      for (size_t j = 0; j < d_; ++j) out.at(m, j) += row[j] * inv;
    }
  }
  return out;
}

void MeanPoolTextEncoder::backward(const Mat& d_out) {
  FGVL_CHECK(d_out.rows == cached_tokens_.size(),
             "text encoder: backward without matching forward");
  for (size_t m = 0; m < cached_tokens_.size(); ++m) {
    const auto& ids = cached_tokens_[m];
    const double inv = 1.0 / double(ids.size());
    for (size_t id : ids) {
      double* grow = emb_.grad.data() + id * d_;
      for (size_t j = 0; j < d_; ++j) grow[j] += d_out.at(m, j) * inv;
    }
  }
}

std::vector<Param*> MeanPoolTextEncoder::parameters() { return {&emb_}; }

// ---------------------------------------------------------------------------
// AttentionTextEncoder
// ---------------------------------------------------------------------------

AttentionTextEncoder::AttentionTextEncoder(size_t vocab_size, size_t d_txt, Rng& rng)
    : d_(d_txt) {
  FGVL_CHECK(d_ % kHeads == 0, "attention encoder: d_txt must be divisible by head count");
  emb_.init_gaussian("txt.emb", {vocab_size, d_}, 0.5, rng);
  double s = std::sqrt(1.0 / double(d_));
  wq_.init_gaussian("txt.attn.wq", {d_, d_}, s, rng);
  wk_.init_gaussian("txt.attn.wk", {d_, d_}, s, rng);
  wv_.init_gaussian("txt.attn.wv", {d_, d_}, s, rng);
  wo_.init_gaussian("txt.attn.wo", {d_, d_}, s, rng);
}

namespace {
// y = x * W^T for W stored [out, in]
Mat matmul_wt(const Mat& x, const Param& w) {
  const size_t out_d = w.shape[0], in_d = w.shape[1];
  Mat y(x.rows, out_d);
  for (size_t r = 0; r < x.rows; ++r)
    for (size_t o = 0; o < out_d; ++o)
      y.at(r, o) = dot(w.value.data() + o * in_d, x.row(r), in_d);
  return y;
}

// accumulates dW += d_y^T x and returns d_x = d_y * W
Mat matmul_wt_backward(const Mat& x, Param& w, const Mat& d_y) {
  const size_t out_d = w.shape[0], in_d = w.shape[1];
  Mat d_x(x.rows, in_d);
  for (size_t r = 0; r < x.rows; ++r)
    for (size_t o = 0; o < out_d; ++o) {
      const double g = d_y.at(r, o);
      double* wg = w.grad.data() + o * in_d;
      const double* wv = w.value.data() + o * in_d;
      const double* xr = x.row(r);
      for (size_t i = 0; i < in_d; ++i) {
        wg[i] += g * xr[i];
        d_x.at(r, i) += g * wv[i];
      }
    }
  return d_x;
}
}  // namespace

Mat AttentionTextEncoder::forward(const std::vector<std::vector<size_t>>& token_batch) {
  states_.assign(token_batch.size(), {});
  Mat out(token_batch.size(), d_);
  const size_t dh = d_ / kHeads;
  const double scale = 1.0 / std::sqrt(double(dh));

  for (size_t m = 0; m < token_batch.size(); ++m) {
    auto& st = states_[m];
    st.tokens = token_batch[m];
    FGVL_CHECK(!st.tokens.empty(), "text encoder: empty token sequence");
    const size_t T = st.tokens.size();
    st.x = Mat(T, d_);
    for (size_t t = 0; t < T; ++t) {
      FGVL_CHECK(st.tokens[t] < emb_.shape[0], "text encoder: token id out of range");
      std::memcpy(st.x.row(t), emb_.value.data() + st.tokens[t] * d_, d_ * sizeof(double));
    }
    st.q = matmul_wt(st.x, wq_);
    st.k = matmul_wt(st.x, wk_);
    st.v = matmul_wt(st.x, wv_);

    st.attn = Mat(kHeads * T, T);
    st.headed = Mat(T, d_);
    for (size_t h = 0; h < kHeads; ++h) {
      const size_t off = h * dh;
      for (size_t t = 0; t < T; ++t) {
        double* arow = st.attn.row(h * T + t);
        double mx = -1e300;
        for (size_t u = 0; u < T; ++u) {
          arow[u] = scale * dot(st.q.row(t) + off, st.k.row(u) + off, dh);
          mx = std::max(mx, arow[u]);
        }
        double z = 0.0;
        for (size_t u = 0; u < T; ++u) {
          arow[u] = std::exp(arow[u] - mx);
          z += arow[u];
        }
        for (size_t u = 0; u < T; ++u) arow[u] /= z;
        for (size_t u = 0; u < T; ++u)
          for (size_t j = 0; j < dh; ++j)
            st.headed.at(t, off + j) += arow[u] * st.v.at(u, off + j);
      }
    }
    Mat seq_out = matmul_wt(st.headed, wo_);
    const double inv_t = 1.0 / double(T);
    for (size_t t = 0; t < T; ++t)
      for (size_t j = 0; j < d_; ++j)
        out.at(m, j) += (st.x.at(t, j) + seq_out.at(t, j)) * inv_t;
  }
  return out;
}

void AttentionTextEncoder::backward(const Mat& d_out) {
  FGVL_CHECK(d_out.rows == states_.size(),
             "text encoder: backward without matching forward");
  const size_t dh = d_ / kHeads;
  const double scale = 1.0 / std::sqrt(double(dh));

  for (size_t m = 0; m < states_.size(); ++m) {
    auto& st = states_[m];
    const size_t T = st.tokens.size();
    const double inv_t = 1.0 / double(T);

    Mat d_seq(T, d_), d_x(T, d_);
    for (size_t t = 0; t < T; ++t)
      for (size_t j = 0; j < d_; ++j) {
        d_seq.at(t, j) = d_out.at(m, j) * inv_t;
        d_x.at(t, j) = d_out.at(m, j) * inv_t;  // residual path
      }

    Mat d_headed = matmul_wt_backward(st.headed, wo_, d_seq);

    Mat d_q(T, d_), d_k(T, d_), d_v(T, d_);
    for (size_t h = 0; h < kHeads; ++h) {
      const size_t off = h * dh;
      for (size_t t = 0; t < T; ++t) {
        const double* arow = st.attn.row(h * T + t);
        std::vector<double> d_a(T, 0.0);
        for (size_t u = 0; u < T; ++u) {
          for (size_t j = 0; j < dh; ++j) {
            d_a[u] += d_headed.at(t, off + j) * st.v.at(u, off + j);
            d_v.at(u, off + j) += arow[u] * d_headed.at(t, off + j);
          }
        }
        double inner = 0.0;
        for (size_t u = 0; u < T; ++u) inner += arow[u] * d_a[u];
        for (size_t u = 0; u < T; ++u) {
          const double d_s = arow[u] * (d_a[u] - inner) * scale;
          for (size_t j = 0; j < dh; ++j) {
            d_q.at(t, off + j) += d_s * st.k.at(u, off + j);
            d_k.at(u, off + j) += d_s * st.q.at(t, off + j);
          }
        }
      }
    }

    Mat d_x_q = matmul_wt_backward(st.x, wq_, d_q);
    Mat d_x_k = matmul_wt_backward(st.x, wk_, d_k);
    Mat d_x_v = matmul_wt_backward(st.x, wv_, d_v);
    for (size_t t = 0; t < T; ++t)
      for (size_t j = 0; j < d_; ++j)
        d_x.at(t, j) += d_x_q.at(t, j) + d_x_k.at(t, j) + d_x_v.at(t, j);

    for (size_t t = 0; t < T; ++t) {
      double* grow = emb_.grad.data() + st.tokens[t] * d_;
      for (size_t j = 0; j < d_; ++j) grow[j] += d_x.at(t, j);
    }
  }
}

std::vector<Param*> AttentionTextEncoder::parameters() {
  return {&emb_, &wq_, &wk_, &wv_, &wo_};
}

// ---------------------------------------------------------------------------
// Similarity and loss
// ---------------------------------------------------------------------------

Mat similarity_matrix(const Mat& images, const Mat& labels, double tau) {
  FGVL_CHECK(tau > 0.0, "similarity: temperature must be > 0");
  FGVL_CHECK(images.cols == labels.cols, "similarity: embedding dimension mismatch");
  auto check_rows = [](const Mat& m, const char* which) {
    for (size_t r = 0; r < m.rows; ++r) {
      double n = norm2(m.row(r), m.cols);
      FGVL_CHECK(n > 1e-12, std::string("similarity: zero row in ") + which);
      FGVL_CHECK(std::abs(n - 1.0) < 1e-6,
                 std::string("similarity: non-unit row in ") + which);
    }
  };
  check_rows(images, "image embeddings");
  check_rows(labels, "text embeddings");
  Mat y(images.rows, labels.rows);
  for (size_t i = 0; i < images.rows; ++i)
    for (size_t j = 0; j < labels.rows; ++j)
      y.at(i, j) = dot(images.row(i), labels.row(j), images.cols) / tau;
  return y;
}

LossResult itm_loss(const Mat& y, const Mat& s, LossMode mode) {
  FGVL_CHECK(y.same_shape(s), "itm_loss: shape mismatch");
  FGVL_CHECK(y.rows > 0 && y.cols > 0, "itm_loss: empty matrices");
  constexpr double kEps = 1e-7;
  const double n = double(y.rows), m = double(y.cols);

  LossResult res;
  res.d_y = Mat(y.rows, y.cols);
  double mse = 0.0, ce = 0.0;
  for (size_t i = 0; i < y.rows; ++i)
    for (size_t j = 0; j < y.cols; ++j) {
      const double yv = y.at(i, j), sv = s.at(i, j);
      FGVL_CHECK(std::isfinite(yv) && std::isfinite(sv), "itm_loss: NaN input");
      FGVL_CHECK(sv >= 0.0 && sv <= 1.0, "itm_loss: target outside [0,1]");
      const double raw = (yv + 1.0) / 2.0;
      const double yhat = std::clamp(raw, kEps, 1.0 - kEps);
      const bool interior = raw > kEps && raw < 1.0 - kEps;

      mse += (yhat - sv) * (yhat - sv);
      double d_yhat = 2.0 * (yhat - sv) / (n * m);
      if (mode == LossMode::kCanonical) {
        ce += -sv * std::log(yhat);
        d_yhat += -sv / (yhat * n);
      } else {
        const double log_s = std::log(std::max(sv, kEps));
        ce += -yhat * log_s;
        d_yhat += -log_s / n;
      }
      res.d_y.at(i, j) = interior ? d_yhat * 0.5 : 0.0;
    }
  res.loss = mse / (n * m) + ce / n;
  return res;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

namespace {
Mat normalize_rows(const Mat& x) {
  Mat y = x;
  for (size_t r = 0; r < y.rows; ++r) {
    double n = norm2(y.row(r), y.cols);
    FGVL_CHECK(n > 1e-12, "encode: zero feature row cannot be normalized");
    for (size_t c = 0; c < y.cols; ++c) y.at(r, c) /= n;
  }
  return y;
}

// given y = x/||x|| and upstream g, returns dx
Mat normalize_rows_backward(const Mat& x, const Mat& y, const Mat& g) {
  Mat d_x(x.rows, x.cols);
  for (size_t r = 0; r < x.rows; ++r) {
    const double n = norm2(x.row(r), x.cols);
    const double yg = dot(y.row(r), g.row(r), x.cols);
    for (size_t c = 0; c < x.cols; ++c)
      d_x.at(r, c) = (g.at(r, c) - y.at(r, c) * yg) / n;
  }
  return d_x;
}
}  // namespace

Model Model::init(const TrainConfig& config, Vocab vocab) {
  config.validate();
  Model m;
  m.config = config;
  m.vocab = std::move(vocab);
  Rng rng = Rng(config.seed).split(0xC0DE);
  m.image_encoder = std::make_unique<ConvImageEncoder>(config, rng);
  if (config.text_encoder == "attention")
    m.text_encoder = std::make_unique<AttentionTextEncoder>(m.vocab.size(), config.d_txt, rng);
  else
    m.text_encoder = std::make_unique<MeanPoolTextEncoder>(m.vocab.size(), config.d_txt, rng);
  m.proj_img.init("proj.img", config.d_img, config.embed_dim, rng);
  m.proj_txt.init("proj.txt", config.d_txt, config.embed_dim, rng);
  return m;
}

Mat Model::encode_images(const std::vector<Image>& batch) {
  img_features_ = image_encoder->forward(batch);
  img_projected_ = proj_img.forward(img_features_);
  return normalize_rows(img_projected_);
}

Mat Model::encode_texts(const std::vector<std::string>& texts) {
  if (texts.empty()) {
    txt_features_ = Mat(0, config.d_txt);
    txt_projected_ = Mat(0, config.embed_dim);
    return Mat(0, config.embed_dim);
  }
  std::vector<std::vector<size_t>> token_batch;
  token_batch.reserve(texts.size());
  for (const auto& t : texts) token_batch.push_back(vocab.encode(t));
  txt_features_ = text_encoder->forward(token_batch);
  txt_projected_ = proj_txt.forward(txt_features_);
  return normalize_rows(txt_projected_);
}

void Model::backward_images(const Mat& d_embedding) {
  Mat y = normalize_rows(img_projected_);
  Mat d_proj = normalize_rows_backward(img_projected_, y, d_embedding);
  Mat d_feat = proj_img.backward(img_features_, d_proj);
  image_encoder->backward(d_feat);
}

void Model::backward_texts(const Mat& d_embedding) {
  Mat y = normalize_rows(txt_projected_);
  Mat d_proj = normalize_rows_backward(txt_projected_, y, d_embedding);
  Mat d_feat = proj_txt.backward(txt_features_, d_proj);
  text_encoder->backward(d_feat);
}

std::vector<Param*> Model::parameters() {
  std::vector<Param*> out = image_encoder->parameters();
  auto txt = text_encoder->parameters();
  out.insert(out.end(), txt.begin(), txt.end());
  out.push_back(&proj_img.w);
  out.push_back(&proj_img.b);
  out.push_back(&proj_txt.w);
  out.push_back(&proj_txt.b);
  return out;
}

void Model::zero_grad() {
  for (Param* p : parameters()) std::fill(p->grad.begin(), p->grad.end(), 0.0);
}

void Model::sgd_step(double lr) {
  for (Param* p : parameters())
    for (size_t i = 0; i < p->value.size(); ++i) p->value[i] -= lr * p->grad[i];
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

knowledge::RenderMode effective_render_mode(const TrainConfig& config) {
  if (config.use_iki) return knowledge::RenderMode::kFgEntityPlusExplanation;
  if (config.use_fg) return knowledge::RenderMode::kFgEntity;
  return knowledge::RenderMode::kEntity;
}

std::vector<knowledge::StructuredLabel> study_labels(const corpus::Study& study,
                                                     const knowledge::KnowledgeDictionary& dict,
                                                     const TrainConfig& config) {
  std::vector<knowledge::StructuredLabel> out;
  if (!config.use_entity) {
    FGVL_CHECK(!study.report_text.empty(),
               "study " + study.id + ": entity switch off but report is empty");
    knowledge::StructuredLabel label;
    label.triplet.category = normalize_token(study.report_text);
    label.text = label.triplet.category;
    out.push_back(std::move(label));
    return out;
  }

  std::vector<DiseaseTriplet> triplets;
  if (study.gold_triplets)
    triplets = *study.gold_triplets;
  else
    triplets = extractor::fallback_extract(study.report_text, extractor::default_lexicon());
  if (triplets.empty())
    triplets.push_back(DiseaseTriplet::normalized("", "", "no acute findings"));

  auto mode = effective_render_mode(config);
  std::set<std::string> seen;
  for (auto t : triplets) {
    if (!config.use_fg) {
      t.severity.reset();
      t.location.reset();
    }
    auto label = knowledge::render_structured_label(t, dict, mode);
    if (seen.insert(label.text).second) out.push_back(std::move(label));
  }
  FGVL_CHECK(!out.empty(), "study " + study.id + ": no labels after rendering");
  return out;
}

LabeledBatch assemble_batch(const std::vector<const corpus::Study*>& studies,
                            const knowledge::KnowledgeDictionary& dict,
                            ssm::EmbeddingProvider& provider, const TrainConfig& config,
                            Rng& rng) {
  FGVL_CHECK(!studies.empty(), "assemble_batch: empty study list");
  LabeledBatch batch;
  for (const corpus::Study* study : studies) {
    batch.images.push_back(study->load_image());
    auto labels = study_labels(*study, dict, config);
    std::vector<std::string> texts;
    for (auto& label : labels) {
      texts.push_back(label.text);
      batch.trainer_texts.push_back(
          knowledge::mask_text(label, config.mask_prob, rng.next_u64()));
    }
    batch.labels.groups.push_back(std::move(texts));
  }
  batch.targets = config.use_ssm ? ssm::compute_ssm(batch.labels, provider)
                                 : ssm::multi_hot_matrix(batch.labels);
  return batch;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

double warm_restart_lr(const TrainConfig& config, double epoch_progress) {
  double t = epoch_progress;
  double period = double(config.restart_period);
  while (t >= period) {
    t -= period;
    period *= double(config.restart_mult);
  }
  constexpr double kPi = 3.14159265358979323846;
  return config.lr_min + 0.5 * (config.lr - config.lr_min) * (1.0 + std::cos(kPi * t / period));
}

namespace {
std::vector<std::string> vocab_texts(const corpus::Corpus& corpus,
                                     const knowledge::KnowledgeDictionary& dict,
                                     const TrainConfig& config) {
  std::vector<std::string> texts;
  TrainConfig full = config;
  full.use_entity = true;
  full.use_fg = true;
  full.use_iki = true;
  for (const auto& study : corpus.studies) {
    for (const auto& label : study_labels(study, dict, full)) texts.push_back(label.text);
    texts.push_back(study.report_text);
  }
  for (const auto& [k, v] : dict.entries) {
    texts.push_back(k);
    texts.push_back(v);
  }
  texts.push_back("this is an x-ray image of");
  texts.push_back("no acute findings");
  return texts;
}

std::vector<double> snapshot_params(Model& model) {
  std::vector<double> out;
  for (Param* p : model.parameters())
    out.insert(out.end(), p->value.begin(), p->value.end());
  return out;
}

void restore_params(Model& model, const std::vector<double>& snap) {
  size_t off = 0;
  for (Param* p : model.parameters()) {
    std::copy(snap.begin() + off, snap.begin() + off + p->count(), p->value.begin());
    off += p->count();
  }
}
}  // namespace

TrainResult train(const corpus::Corpus& corpus, const TrainConfig& config,
                  const knowledge::KnowledgeDictionary& dict,
                  ssm::EmbeddingProvider& provider, const std::string& log_path) {
  config.validate();
  FGVL_CHECK(!corpus.studies.empty(), "train: empty corpus");

  Vocab vocab = Vocab::build(vocab_texts(corpus, dict, config));
  TrainResult result{Model::init(config, vocab), {}, false};
  Model& model = result.model;

  std::ofstream log;
  if (!log_path.empty()) {
    log.open(log_path);
    FGVL_CHECK(log.good(), "cannot open training log: " + log_path);
  }

  Rng master(config.seed);
  std::vector<size_t> order(corpus.studies.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<double> last_good = snapshot_params(model);
  const size_t steps_per_epoch =
      std::max<size_t>(1, corpus.studies.size() / config.batch_size);

  for (size_t epoch = 0; epoch < config.epochs; ++epoch) {
    Rng shuffle_rng = master.split(1000 + epoch);
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    Rng mask_rng = master.split(2000 + epoch);

    double loss_sum = 0.0;
    size_t steps = 0, cursor = 0;
    double lr = config.lr;
    while (cursor + 2 <= order.size()) {
      const size_t take = std::min(config.batch_size, order.size() - cursor);
      if (take < 2) break;
      std::vector<const corpus::Study*> studies;
      for (size_t i = 0; i < take; ++i)
        studies.push_back(&corpus.studies[order[cursor + i]]);
      cursor += take;

      LabeledBatch batch = assemble_batch(studies, dict, provider, config, mask_rng);
      Mat image_emb = model.encode_images(batch.images);
      Mat text_emb = model.encode_texts(batch.trainer_texts);
      Mat y = similarity_matrix(image_emb, text_emb, config.temperature);
      LossResult loss;
      try {
        loss = itm_loss(y, batch.targets.values, config.loss_mode);
      } catch (const std::exception&) {
        restore_params(model, last_good);
        result.diverged = true;
        return result;
      }
      if (!std::isfinite(loss.loss)) {
        restore_params(model, last_good);
        result.diverged = true;
        return result;
      }

      // dY -> embedding gradients (SSM targets are constants)
      Mat d_img(image_emb.rows, image_emb.cols), d_txt(text_emb.rows, text_emb.cols);
      for (size_t i = 0; i < image_emb.rows; ++i)
        for (size_t c = 0; c < image_emb.cols; ++c) {
          double acc = 0.0;
          for (size_t j = 0; j < text_emb.rows; ++j)
            acc += loss.d_y.at(i, j) * text_emb.at(j, c);
          d_img.at(i, c) = acc / config.temperature;
        }
      for (size_t j = 0; j < text_emb.rows; ++j)
        for (size_t c = 0; c < text_emb.cols; ++c) {
          double acc = 0.0;
          for (size_t i = 0; i < image_emb.rows; ++i)
            acc += loss.d_y.at(i, j) * image_emb.at(i, c);
          d_txt.at(j, c) = acc / config.temperature;
        }

      model.zero_grad();
      model.backward_images(d_img);
      model.backward_texts(d_txt);
      lr = warm_restart_lr(config, double(epoch) + double(steps) / double(steps_per_epoch));
      model.sgd_step(lr);

      loss_sum += loss.loss;
      ++steps;
      if (log.is_open()) {
        json line;
        line["epoch"] = epoch;
        line["step"] = steps;
        line["loss"] = loss.loss;
        line["lr"] = lr;
        log << line.dump() << "\n";
      }
    }
    result.history.push_back({epoch, steps ? loss_sum / double(steps) : 0.0, lr});
    last_good = snapshot_params(model);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

namespace {
constexpr char kCkptMagic[8] = {'F', 'G', 'V', 'L', 'C', 'K', 'P', 'T'};
constexpr uint32_t kCkptVersion = 1;

void append_bytes(std::string& buf, const void* data, size_t n) {
  buf.append(reinterpret_cast<const char*>(data), n);
}
template <typename T>
void append_pod(std::string& buf, T v) {
  append_bytes(buf, &v, sizeof(T));
}
template <typename T>
T read_pod(const std::string& buf, size_t& off) {
  FGVL_CHECK(off + sizeof(T) <= buf.size(), "checkpoint: truncated file");
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}
}  // namespace

void save_checkpoint(const std::string& path, Model& model, const CheckpointMeta& meta) {
  std::string buf;
  append_bytes(buf, kCkptMagic, 8);
  append_pod<uint32_t>(buf, kCkptVersion);

  json j;
  j["config"] = json::parse(model.config.to_json());
  j["vocab"] = model.vocab.tokens;
  j["epoch"] = meta.epoch;
  j["rng_state"] = meta.rng_state;
  std::string meta_str = j.dump();
  append_pod<uint64_t>(buf, meta_str.size());
  buf += meta_str;

  auto params = model.parameters();
  append_pod<uint32_t>(buf, static_cast<uint32_t>(params.size()));
  for (Param* p : params) {
    append_pod<uint16_t>(buf, static_cast<uint16_t>(p->name.size()));
    buf += p->name;
    append_pod<uint8_t>(buf, static_cast<uint8_t>(p->shape.size()));
    for (size_t s : p->shape) append_pod<uint64_t>(buf, s);
    append_bytes(buf, p->value.data(), p->value.size() * sizeof(double));
  }
  append_pod<uint64_t>(buf, fnv1a64(buf));
  write_file_atomic(path, buf);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::string buf = read_text_file(path);
  FGVL_CHECK(buf.size() > 8 + 4 + 8 + 8, "checkpoint: truncated file " + path);

  size_t off = buf.size() - 8;
  uint64_t stored_sum = read_pod<uint64_t>(buf, off);
  FGVL_CHECK(stored_sum == fnv1a64(std::string_view(buf).substr(0, buf.size() - 8)),
             "checkpoint: checksum mismatch in " + path);

  off = 0;
  FGVL_CHECK(std::memcmp(buf.data(), kCkptMagic, 8) == 0,
             "checkpoint: bad magic in " + path);
  off = 8;
  uint32_t version = read_pod<uint32_t>(buf, off);
  FGVL_CHECK(version == kCkptVersion,
             "checkpoint: unsupported version " + std::to_string(version) + " in " + path);

  uint64_t meta_len = read_pod<uint64_t>(buf, off);
  FGVL_CHECK(off + meta_len <= buf.size(), "checkpoint: truncated meta in " + path);
  json j = json::parse(buf.substr(off, meta_len));
  off += meta_len;

  TrainConfig config = TrainConfig::from_json(j.at("config").dump());
  Vocab vocab;
  vocab.tokens = j.at("vocab").get<std::vector<std::string>>();
  for (size_t i = 0; i < vocab.tokens.size(); ++i) vocab.token_to_id[vocab.tokens[i]] = i;

  LoadedCheckpoint out{Model::init(config, std::move(vocab)), {}};
  out.meta.epoch = j.at("epoch");
  out.meta.rng_state = j.at("rng_state");

  uint32_t n_arrays = read_pod<uint32_t>(buf, off);
  auto params = out.model.parameters();
  FGVL_CHECK(n_arrays == params.size(), "checkpoint: parameter count mismatch in " + path);
  for (Param* p : params) {
    uint16_t name_len = read_pod<uint16_t>(buf, off);
    FGVL_CHECK(off + name_len <= buf.size(), "checkpoint: truncated name in " + path);
    std::string name = buf.substr(off, name_len);
    off += name_len;
    FGVL_CHECK(name == p->name, "checkpoint: unexpected array '" + name + "', wanted '" +
                                     p->name + "'");
    uint8_t ndim = read_pod<uint8_t>(buf, off);
    std::vector<size_t> shape(ndim);
    for (auto& s : shape) s = read_pod<uint64_t>(buf, off);
    FGVL_CHECK(shape == p->shape, "checkpoint: shape mismatch for array '" + name + "'");
    FGVL_CHECK(off + p->count() * sizeof(double) <= buf.size(),
               "checkpoint: truncated payload in " + path);
    std::memcpy(p->value.data(), buf.data() + off, p->count() * sizeof(double));
    off += p->count() * sizeof(double);
  }
  return out;
}

}  // namespace fgvl::model
