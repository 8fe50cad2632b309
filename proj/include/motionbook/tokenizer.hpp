#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "motionbook/data.hpp"
#include "motionbook/features.hpp"
#include "motionbook/nn/ops.hpp"
#include "motionbook/nn/train.hpp"
#include "motionbook/quantizers.hpp"

namespace motionbook::tok {

using Partition = std::vector<nn::ColumnRange>;

// D135: root block (0,9) plus 21 joint blocks of width 6. Other formats keep
// their root, positional, velocity and contact blocks whole and split the
// joint rotations per joint.
Partition default_partition(features::FeatureFormat fmt);
void validate_partition(const Partition& p, std::size_t width);

// k2D treats the T x D features as a time x part grid; k1D is the
// conventional temporal-only baseline (a single part spanning all columns).
enum class Layout { k2D, k1D };
enum class QuantizerKind { kLFQ, kVQ, kRVQ };

struct TokenizerConfig {
  features::FeatureFormat format = features::FeatureFormat::kSmplD135;
  Layout layout = Layout::k2D;
  Partition partition;  // empty: default_partition(format); ignored for k1D
  std::size_t alpha = 4;
  std::vector<std::size_t> channels = {16, 32};  // embed width, then width after each stage (last repeats)
  std::size_t res_blocks = 1;                     // per stage
  QuantizerKind quantizer = QuantizerKind::kLFQ;
  quant::LFQSpec lfq;
  std::size_t codebook_size = 1024;  // VQ and RVQ
  std::size_t latent_dim = 512;      // VQ and RVQ
  std::size_t rvq_depth = 4;
  double vq_decay = 0.99;
  double recon_weight = 1.0;
  double velocity_weight = 0.1;  // L1 on first differences

  Partition parts() const;
  std::size_t num_parts() const { return parts().size(); }
  std::size_t code_dim() const;
  std::uint64_t codebook_entries() const;  // K
  std::size_t stage_channels(std::size_t stage) const;  // 0 = embed width
  std::size_t stages() const;
  void validate() const;
};

nlohmann::json to_json(const TokenizerConfig& cfg);
TokenizerConfig tokenizer_config_from_json(const nlohmann::json& doc);

struct TrainOptions {
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  double final_lr_ratio = 1.0;      // cosine decay to lr * ratio over training; 1 = constant
  std::size_t window = 64;          // training crop length, rounded down to a multiple of alpha
  std::size_t max_batches = 0;      // per epoch, 0 = all
  bool eval_every_epoch = true;     // val MPJPE per epoch (last epoch always)
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const TrainOptions& opts);
TrainOptions train_options_from_json(const nlohmann::json& doc);

// Encoder/decoder weights. Activations are NHWC grids [B, T, P, C].
template <typename T>
class TokenizerNet {
 public:
  TokenizerNet(const TokenizerConfig& cfg, Rng& rng);

  // x [B, T, D] normalized features, T a multiple of alpha -> [B, T/alpha, P, code_dim].
  nn::Tensor<T> encode(nn::Tape<T>& tape, const nn::Tensor<T>& x) const;
  // q [B, T', P, code_dim] -> [B, T' * alpha, D].
  nn::Tensor<T> decode(nn::Tape<T>& tape, const nn::Tensor<T>& q) const;
  // Part embedding only: [B, T, D] -> [B, T, P, C0].
  nn::Tensor<T> embed(nn::Tape<T>& tape, const nn::Tensor<T>& x) const;

  nn::ParamList<T>& params() { return params_; }
  const nn::ParamList<T>& params() const { return params_; }
  const TokenizerConfig& config() const { return cfg_; }

 private:
  struct Conv {
    nn::Tensor<T> w, b;
    nn::Conv2dParams p;
  };
  Conv make_conv(Rng& rng, const std::string& name, std::size_t kh, std::size_t cin, std::size_t cout,
                 std::size_t stride_h);
  nn::Tensor<T> apply(nn::Tape<T>& tape, const Conv& c, const nn::Tensor<T>& x) const;
  nn::Tensor<T> residual(nn::Tape<T>& tape, const Conv& a, const Conv& b, const nn::Tensor<T>& x) const;

  TokenizerConfig cfg_;
  Partition parts_;
  std::size_t kw_ = 3;
  nn::ParamList<T> params_;
  nn::Tensor<T> embed_w_, embed_b_, unembed_w_, unembed_b_;
  std::vector<Conv> down_, enc_res_, up_, dec_res_;
  Conv to_code_, from_code_;
};

struct Normalizer {
  std::vector<float> mean, std;
  void apply(std::span<float> frame) const;
  void invert(std::span<float> frame) const;
};

// Per-column statistics over every frame; std is floored at 1e-2.
Normalizer fit_normalizer(const std::vector<const features::MotionSequence*>& motions);

struct LatentGrid {
  std::size_t time = 0, parts = 0, dim = 0;
  std::vector<float> values;  // time-major, then part, then channel
};

// Codes are time-major: all columns of t = 0, then t = 1. For RVQ each part
// contributes rvq_depth consecutive columns, one per level.
struct TokenGrid {
  std::size_t time = 0, columns = 0;
  std::uint64_t codebook_size = 0;
  std::vector<std::uint32_t> codes;
};

template <typename T>
struct QuantizedLatent {
  nn::Tensor<T> quantized;
  nn::Tensor<T> commitment;  // scalar, beta applied
  nn::Tensor<T> entropy;     // scalar, LFQ only (undefined otherwise)
  std::vector<std::uint32_t> codes;  // cell-major, level inner for RVQ
  quant::Histogram usage;            // K entries (K * depth for RVQ)
};

class Tokenizer {
 public:
  Tokenizer(TokenizerConfig cfg, std::uint64_t seed);

  const TokenizerConfig& config() const { return cfg_; }
  TokenizerNet<float>& net() { return net_; }
  const TokenizerNet<float>& net() const { return net_; }
  Normalizer& normalizer() { return norm_; }
  const Normalizer& normalizer() const { return norm_; }
  std::vector<quant::VQCodebook>& codebooks() { return codebooks_; }

  std::size_t token_columns() const;

  // z [..., code_dim]. train_rng enables VQ codebook training.
  QuantizedLatent<float> quantize(nn::Tape<float>& tape, const nn::Tensor<float>& z, Rng* train_rng);

  // Inference on one sequence; frames beyond the last multiple of alpha are dropped.
  LatentGrid encode(const features::MotionSequence& m) const;
  TokenGrid tokenize(const features::MotionSequence& m) const;
  features::MotionSequence detokenize(const TokenGrid& tokens, std::uint32_t fps = 30) const;
  struct Roundtrip {
    TokenGrid tokens;
    features::MotionSequence recon;
  };
  // Batched tokenize + detokenize. Every sequence must have the same length.
  std::vector<Roundtrip> roundtrip_batch(const std::vector<const features::MotionSequence*>& batch) const;

  void save(const std::filesystem::path& path) const;
  static Tokenizer load(const std::filesystem::path& path);

 private:
  nn::Tensor<float> normalized_batch(const std::vector<const features::MotionSequence*>& batch,
                                     std::size_t frames) const;
  features::MotionSequence denormalize(std::span<const float> values, std::size_t frames, std::uint32_t fps) const;
  QuantizedLatent<float> quantize_frozen(nn::Tape<float>& tape, const nn::Tensor<float>& z) const;

  TokenizerConfig cfg_;
  TokenizerNet<float> net_;
  Normalizer norm_;
  std::vector<quant::VQCodebook> codebooks_;
};

struct EpochReport {
  std::size_t epoch = 0;
  double recon = 0, velocity = 0, commit = 0, entropy = 0;
  double utilization = 0, perplexity = 0;
  double val_mpjpe = 0;  // NaN when not evaluated
};

struct TrainReport {
  std::vector<EpochReport> epochs;
  quant::Histogram train_usage;  // frozen pass over the training split after training
  double train_utilization = 0, train_perplexity = 0;
  double val_mpjpe = 0;
};

void write_report_csv(const std::filesystem::path& path, const TrainReport& report);

// Trains on the manifest's train split, reports MPJPE on its val split.
TrainReport train_tokenizer(Tokenizer& tok, const data::Corpus& corpus, const TrainOptions& opts);

// Mean MPJPE (mm) of detokenize(tokenize(m)) against m over the given entries.
double reconstruction_mpjpe(const Tokenizer& tok, const data::Corpus& corpus, const std::vector<std::size_t>& indices);

// Token usage of the frozen model over the given entries.
quant::Histogram token_usage(const Tokenizer& tok, const data::Corpus& corpus, const std::vector<std::size_t>& indices);

struct SweepRow {
  std::string family;
  std::uint64_t codebook_size = 0;
  double utilization = 0, perplexity = 0, val_mpjpe = 0;
};

// Families: lfq-2d, lfq-1d, vq-1d, rvq-1d. K must be a power of two for LFQ.
// Every run trains from the same seed with the same options; utilization is
// measured over the training split.
std::vector<SweepRow> utilization_sweep(const data::Corpus& corpus, const std::vector<std::string>& families,
                                        const std::vector<std::uint64_t>& sizes, const TokenizerConfig& base,
                                        const TrainOptions& opts);
TokenizerConfig family_config(const std::string& family, std::uint64_t codebook_size, TokenizerConfig base);
void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows);

// MOTK: "MOTK", u32 version (1 = time-major), u32 K, u32 columns, u32 time, codes.
void write_tokens(const std::filesystem::path& path, const TokenGrid& tokens);
TokenGrid read_tokens(const std::filesystem::path& path);

}  // namespace motionbook::tok
