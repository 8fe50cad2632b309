#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "motionbook/nn/ops.hpp"
#include "motionbook/nn/train.hpp"

namespace motionbook::lm {

// Ids: bytes [0, 256), motion codes [256, 256 + K), then <bos> <eos> <pad>
// <mot> </mot>.
class Vocab {
 public:
  explicit Vocab(std::uint32_t motion_codes);

  std::uint32_t motion_codes() const { return k_; }
  std::int32_t size() const { return static_cast<std::int32_t>(256 + k_ + 5); }

  std::int32_t motion(std::uint32_t code) const;  // throws TokenOutOfRange
  std::int32_t bos() const { return special(0); }
  std::int32_t eos() const { return special(1); }
  std::int32_t pad() const { return special(2); }
  std::int32_t mot() const { return special(3); }
  std::int32_t mot_end() const { return special(4); }

  bool is_text(std::int32_t id) const { return id >= 0 && id < 256; }
  bool is_motion(std::int32_t id) const { return id >= 256 && id < 256 + static_cast<std::int64_t>(k_); }
  bool is_special(std::int32_t id) const { return id >= bos() && id < size(); }
  std::uint32_t code_of(std::int32_t id) const;  // throws TokenOutOfRange

 private:
  std::int32_t special(int i) const { return static_cast<std::int32_t>(256 + k_) + i; }
  std::uint32_t k_;
};

// input = stream[0, n-1), target = stream[1, n), one mask flag per target.
struct LMExample {
  std::vector<std::int32_t> input, target;
  std::vector<std::uint8_t> mask;
};

// Stream: <bos> desc-bytes <mot> motion </mot> <eos>. Every target position
// is scored, the description included.
LMExample build_example(const Vocab& vocab, std::string_view desc, std::span<const std::uint32_t> motion_codes);

inline constexpr std::string_view kPlaceholder = "<Caption_Placeholder>";

// Single literal substitution; the template must contain the placeholder
// exactly once.
std::string apply_template(std::string_view tmpl, std::string_view caption);
// One template per non-empty line.
std::vector<std::string> load_templates(const std::filesystem::path& path);

struct LMConfig {
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t width = 128;
  std::size_t context = 512;
  double dropout = 0.0;  // only 0 is supported

  void validate() const;
};

nlohmann::json to_json(const LMConfig& cfg);
LMConfig lm_config_from_json(const nlohmann::json& doc);

// Pre-LN decoder-only transformer with learned positions and an untied
// output head.
class MotionLM {
 public:
  MotionLM(LMConfig cfg, Vocab vocab, std::uint64_t seed);

  const LMConfig& config() const { return cfg_; }
  const Vocab& vocab() const { return vocab_; }
  nn::ParamList<float>& params() { return params_; }
  const nn::ParamList<float>& params() const { return params_; }

  // ids [B * L] row-major -> logits [B * L, V]. Causal within each row.
  nn::Tensor<float> logits(nn::Tape<float>& tape, std::span<const std::int32_t> ids, std::size_t batch,
                           std::size_t length) const;

  void save(const std::filesystem::path& path) const;
  static MotionLM load(const std::filesystem::path& path);

 private:
  friend class IncrementalDecoder;
  struct Block {
    nn::Tensor<float> ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b, ln2_g, ln2_b, fc_w, fc_b, proj_w, proj_b;
  };
  LMConfig cfg_;
  Vocab vocab_;
  nn::ParamList<float> params_;
  nn::Tensor<float> tok_emb_, pos_emb_, lnf_g_, lnf_b_, head_w_, head_b_;
  std::vector<Block> blocks_;
};

// Single-sequence decoding with cached keys and values; push() returns the
// logits at the new position.
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const MotionLM& model);
  std::vector<float> push(std::int32_t id);
  std::size_t position() const { return pos_; }

 private:
  const MotionLM& m_;
  std::size_t pos_ = 0;
  std::vector<std::vector<float>> keys_, values_;  // per layer, [pos, width]
};

struct LMTrainOptions {
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  double lr = 3e-4;
  std::uint64_t seed = 0;
};

struct LMEpoch {
  std::size_t epoch = 0;
  double loss = 0;      // mean over scored positions
  double accuracy = 0;  // argmax == target over scored positions
};

// Sequences are padded per batch with <pad>, which is never scored.
std::vector<LMEpoch> train_lm(MotionLM& model, const std::vector<LMExample>& examples, const LMTrainOptions& opts);

struct LMEval {
  double loss = 0, accuracy = 0;
  std::size_t positions = 0;
};
LMEval evaluate_lm(const MotionLM& model, const std::vector<LMExample>& examples);

void write_loss_csv(const std::filesystem::path& path, const std::vector<LMEpoch>& curve);

struct GenerateParams {
  double temperature = 0.0;  // 0 = greedy
  std::size_t top_k = 0;     // 0 = no cut
  std::size_t max_len = 512;
  std::uint64_t seed = 0;
};

// Feeds <bos> desc <mot>, then samples motion tokens until </mot>, max_len or
// the context end. Only motion tokens and </mot> can be drawn. The result
// length need not be a multiple of the tokenizer's column count.
std::vector<std::uint32_t> generate(const MotionLM& model, std::string_view desc, const GenerateParams& params);

}  // namespace motionbook::lm
