#pragma once

// Dual-encoder model: a small strided convolution image encoder, a token
// embedding text encoder (mean-pool or single-layer attention), projection
// heads, the combined MSE+CE matching loss with hand-written gradients, the
// training loop, and bit-exact checkpointing.

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fgvl/core.hpp"
#include "fgvl/corpus.hpp"
#include "fgvl/knowledge.hpp"
#include "fgvl/ssm.hpp"

namespace fgvl::model {

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct Param {
  std::string name;
  std::vector<size_t> shape;
  std::vector<double> value;
  std::vector<double> grad;

  void init_zero(std::string n, std::vector<size_t> s);
  void init_gaussian(std::string n, std::vector<size_t> s, double stddev, Rng& rng);
  size_t count() const { return value.size(); }
};

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

enum class LossMode { kCanonical, kLiteral };

LossMode loss_mode_from_string(const std::string& s);
std::string to_string(LossMode m);

struct TrainConfig {
  double lr = 0.006;
  double lr_min = 1e-4;
  int restart_period = 2;   // T_0 of the warm-restart schedule, in epochs
  int restart_mult = 2;     // T_mult
  size_t epochs = 8;
  size_t batch_size = 32;
  double mask_prob = 0.15;
  LossMode loss_mode = LossMode::kCanonical;
  double temperature = 1.0;
  uint64_t seed = 7;

  // ablation switches
  bool use_entity = true;
  bool use_fg = true;
  bool use_iki = true;
  bool use_ssm = true;

  // desk-scale sizes
  size_t d_img = 128;
  size_t d_txt = 128;
  size_t embed_dim = 64;
  size_t conv1_channels = 8;
  size_t conv2_channels = 16;
  std::string text_encoder = "meanpool";  // or "attention"
  std::string ssm_provider = "bag_of_tokens";
  size_t ssm_dim = 1024;

  std::vector<std::string> violations() const;  // empty iff valid
  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

struct Vocab {
  std::vector<std::string> tokens;          // index = id; [0]="<unk>", [1]="[MASK]"
  std::map<std::string, size_t> token_to_id;

  static constexpr size_t kUnkId = 0;
  static constexpr size_t kMaskId = 1;

  static Vocab build(const std::vector<std::string>& texts);
  std::vector<size_t> encode(const std::string& text) const;
  size_t size() const { return tokens.size(); }
};

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

// 3x3 convolution, stride 2, pad 1, followed by ReLU.
struct ConvLayer {
  size_t in_ch = 0, out_ch = 0;
  Param w;  // [out_ch, in_ch, 3, 3]
  Param b;  // [out_ch]

  void init(const std::string& name, size_t in_channels, size_t out_channels, Rng& rng);
  static size_t out_extent(size_t n) { return (n - 1) / 2 + 1; }

  // activations are post-ReLU; caller keeps them for backward
  std::vector<double> forward(const double* in, size_t h, size_t w_in) const;
  // d_out is w.r.t. post-ReLU output; returns d_in; accumulates into
  // grad buffers (dw/db must be sized like w/b)
  std::vector<double> backward(const double* in, size_t h, size_t w_in,
                               const double* out, const double* d_out,
                               double* dw, double* db) const;
};

struct Linear {
  Param w;  // [out, in]
  Param b;  // [out]

  void init(const std::string& name, size_t in_dim, size_t out_dim, Rng& rng);
  Mat forward(const Mat& x) const;
  // returns d_x; accumulates into w.grad/b.grad
  Mat backward(const Mat& x, const Mat& d_out);
  size_t out_dim() const { return b.count(); }
};

// ---------------------------------------------------------------------------
// Encoders
// ---------------------------------------------------------------------------

class ImageEncoder {
 public:
  virtual ~ImageEncoder() = default;
  virtual Mat forward(const std::vector<Image>& batch) = 0;  // N x d_img
  virtual void backward(const Mat& d_out) = 0;
  virtual std::vector<Param*> parameters() = 0;
  virtual size_t out_dim() const = 0;
};

// 3 strided conv blocks + global average pool.
class ConvImageEncoder : public ImageEncoder {
 public:
  ConvImageEncoder(const TrainConfig& config, Rng& rng);
  Mat forward(const std::vector<Image>& batch) override;
  void backward(const Mat& d_out) override;
  std::vector<Param*> parameters() override;
  size_t out_dim() const override { return conv3_.out_ch; }

 private:
  ConvLayer conv1_, conv2_, conv3_;
  // cached per-sample activations from the last forward
  struct SampleState {
    size_t h = 0, w = 0;
    std::vector<double> x0, a1, a2, a3;
  };
  std::vector<SampleState> states_;
};

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual Mat forward(const std::vector<std::vector<size_t>>& token_batch) = 0;  // M x d_txt
  virtual void backward(const Mat& d_out) = 0;
  virtual std::vector<Param*> parameters() = 0;
  virtual size_t out_dim() const = 0;
};

// Token embedding mean-pool.
class MeanPoolTextEncoder : public TextEncoder {
 public:
  MeanPoolTextEncoder(size_t vocab_size, size_t d_txt, Rng& rng);
  Mat forward(const std::vector<std::vector<size_t>>& token_batch) override;
  void backward(const Mat& d_out) override;
  std::vector<Param*> parameters() override;
  size_t out_dim() const override { return d_; }

 private:
  size_t d_;
  Param emb_;  // [vocab, d_txt]
  std::vector<std::vector<size_t>> cached_tokens_;
};

// Token embedding + 2-head single-layer self-attention with residual,
// mean-pooled.
class AttentionTextEncoder : public TextEncoder {
 public:
  AttentionTextEncoder(size_t vocab_size, size_t d_txt, Rng& rng);
  Mat forward(const std::vector<std::vector<size_t>>& token_batch) override;
  void backward(const Mat& d_out) override;
  std::vector<Param*> parameters() override;
  size_t out_dim() const override { return d_; }

 private:
  static constexpr size_t kHeads = 2;
  size_t d_;
  Param emb_;                  // [vocab, d]
  Param wq_, wk_, wv_, wo_;    // each [d, d]
  struct SampleState {
    std::vector<size_t> tokens;
    Mat x, q, k, v, attn, headed;  // attn holds both heads stacked [heads*T, T]
  };
  std::vector<SampleState> states_;
};

// ---------------------------------------------------------------------------
// Similarity and loss
// ---------------------------------------------------------------------------

// rows of both inputs must be unit; Y_ij = (I_i . L_j) / tau
Mat similarity_matrix(const Mat& images, const Mat& labels, double tau);

struct LossResult {
  double loss = 0.0;
  Mat d_y;
};

// MSE + CE over yhat=(Y+1)/2 clamped to [eps, 1-eps]; canonical CE is
// -(1/n) sum s*log(yhat), literal CE is -(1/n) sum yhat*log(max(s,eps)).
LossResult itm_loss(const Mat& y, const Mat& s, LossMode mode);

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct Model {
  TrainConfig config;
  Vocab vocab;
  std::unique_ptr<ImageEncoder> image_encoder;
  std::unique_ptr<TextEncoder> text_encoder;
  Linear proj_img, proj_txt;

  static Model init(const TrainConfig& config, Vocab vocab);

  // unit-row embeddings; forward caches activations for a following backward
  Mat encode_images(const std::vector<Image>& batch);
  Mat encode_texts(const std::vector<std::string>& texts);
  void backward_images(const Mat& d_embedding);
  void backward_texts(const Mat& d_embedding);

  std::vector<Param*> parameters();
  void zero_grad();
  void sgd_step(double lr);

 private:
  // caches for normalization/projection backward
  Mat img_features_, img_projected_;
  Mat txt_features_, txt_projected_;
};

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

struct LabeledBatch {
  std::vector<Image> images;
  ssm::GroupedLabels labels;              // unmasked structured-label texts
  std::vector<std::string> trainer_texts;  // masked, flattened group-major
  ssm::SimilarityMatrix targets;
};

knowledge::RenderMode effective_render_mode(const TrainConfig& config);

// renders per ablation switches, masks trainer-side texts, computes the SSM
// target (or the 0/1 block matrix when use_ssm is off)
LabeledBatch assemble_batch(const std::vector<const corpus::Study*>& studies,
                            const knowledge::KnowledgeDictionary& dict,
                            ssm::EmbeddingProvider& provider, const TrainConfig& config,
                            Rng& rng);

// structured labels for one study under the config's ablation switches
std::vector<knowledge::StructuredLabel> study_labels(const corpus::Study& study,
                                                     const knowledge::KnowledgeDictionary& dict,
                                                     const TrainConfig& config);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct EpochLog {
  size_t epoch = 0;
  double mean_loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  Model model;
  std::vector<EpochLog> history;
  bool diverged = false;
};

double warm_restart_lr(const TrainConfig& config, double epoch_progress);

// training log (if non-empty) receives one JSON line per step
TrainResult train(const corpus::Corpus& corpus, const TrainConfig& config,
                  const knowledge::KnowledgeDictionary& dict,
                  ssm::EmbeddingProvider& provider, const std::string& log_path = "");

// ---------------------------------------------------------------------------
// Checkpointing: magic "FGVLCKPT", version, JSON meta (config + vocab +
// epoch + rng state), named f64 arrays, trailing checksum. Writes are atomic.
// ---------------------------------------------------------------------------

struct CheckpointMeta {
  size_t epoch = 0;
  uint64_t rng_state = 0;
};

void save_checkpoint(const std::string& path, Model& model, const CheckpointMeta& meta);
struct LoadedCheckpoint {
  Model model;
  CheckpointMeta meta;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace fgvl::model
