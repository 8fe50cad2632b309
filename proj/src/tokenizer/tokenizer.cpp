#include "motionbook/tokenizer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <set>

#include "motionbook/binary_io.hpp"
#include "motionbook/error.hpp"
#include "motionbook/metrics.hpp"
#include "motionbook/nn/runtime.hpp"

namespace motionbook::tok {

using features::FeatureFormat;
using features::MotionSequence;
using nn::Tape;
using nn::Tensor;

Partition default_partition(FeatureFormat fmt) {
  const auto L = features::feature_layout(fmt);
  std::vector<std::pair<std::size_t, std::size_t>> blocks;  // (start, width), joint rotations split below
  if (L.positions_width) blocks.emplace_back(L.positions, L.positions_width);
  if (L.velocities_width) blocks.emplace_back(L.velocities, L.velocities_width);
  if (L.contacts_width) blocks.emplace_back(L.contacts, L.contacts_width);
  for (std::size_t j = 0; j < 21; ++j) blocks.emplace_back(L.joint_rot6d + 6 * j, 6);
  std::sort(blocks.begin(), blocks.end());
  Partition p;
  p.push_back({0, blocks.front().first});
  for (const auto& [start, width] : blocks) p.push_back({start, width});
  validate_partition(p, L.width);
  return p;
}

void validate_partition(const Partition& p, std::size_t width) {
  require(!p.empty(), ErrorKind::kInvalidConfig, "partition is empty");
  std::size_t next = 0;
  for (const auto& r : p) {
    require(r.start == next && r.width > 0, ErrorKind::kInvalidConfig,
            "partition ranges must be sorted, non-empty and contiguous (at column " + std::to_string(next) + ")");
    next += r.width;
  }
  require(next == width, ErrorKind::kInvalidConfig,
          "partition covers " + std::to_string(next) + " of " + std::to_string(width) + " columns");
}

Partition TokenizerConfig::parts() const {
  if (layout == Layout::k1D) return {{0, features::feature_width(format)}};
  return partition.empty() ? default_partition(format) : partition;
}

std::size_t TokenizerConfig::code_dim() const {
  return quantizer == QuantizerKind::kLFQ ? static_cast<std::size_t>(lfq.d) : latent_dim;
}

std::uint64_t TokenizerConfig::codebook_entries() const {
  return quantizer == QuantizerKind::kLFQ ? lfq.codebook_size() : codebook_size;
}

std::size_t TokenizerConfig::stages() const { return static_cast<std::size_t>(std::countr_zero(alpha)); }

std::size_t TokenizerConfig::stage_channels(std::size_t stage) const {
  return channels[std::min(stage, channels.size() - 1)];
}

void TokenizerConfig::validate() const {
  require(alpha >= 1 && std::has_single_bit(alpha), ErrorKind::kInvalidConfig, "alpha must be a power of two");
  require(!channels.empty(), ErrorKind::kInvalidConfig, "channels must not be empty");
  for (auto c : channels) require(c > 0, ErrorKind::kInvalidConfig, "channels must be positive");
  validate_partition(parts(), features::feature_width(format));
  require(recon_weight >= 0 && velocity_weight >= 0, ErrorKind::kInvalidConfig, "loss weights must be >= 0");
  if (quantizer == QuantizerKind::kLFQ) {
    lfq.validate();
    require(lfq.d <= 31, ErrorKind::kInvalidConfig, "LFQ d must be <= 31 for u32 token files");
  } else {
    require(codebook_size >= 2 && codebook_size <= (std::uint64_t{1} << 32), ErrorKind::kInvalidConfig,
            "codebook_size must be in [2, 2^32]");
    require(latent_dim >= 1, ErrorKind::kInvalidConfig, "latent_dim must be positive");
    require(vq_decay > 0 && vq_decay < 1, ErrorKind::kInvalidConfig, "vq_decay must be in (0, 1)");
    if (quantizer == QuantizerKind::kRVQ) require(rvq_depth >= 1, ErrorKind::kInvalidConfig, "rvq_depth must be >= 1");
  }
}

namespace {

const char* layout_name(Layout l) { return l == Layout::k2D ? "2d" : "1d"; }

const char* quantizer_name(QuantizerKind q) {
  switch (q) {
    case QuantizerKind::kLFQ: return "lfq";
    case QuantizerKind::kVQ: return "vq";
    case QuantizerKind::kRVQ: return "rvq";
  }
  return "?";
}

void reject_unknown(const nlohmann::json& doc, const std::set<std::string>& known, const std::string& what) {
  require(doc.is_object(), ErrorKind::kInvalidConfig, what + " must be an object");
  for (const auto& [key, value] : doc.items()) {
    if (!known.count(key)) fail(ErrorKind::kInvalidConfig, "unknown " + what + " key '" + key + "'");
  }
}

template <typename V>
void read_if(const nlohmann::json& doc, const char* key, V& out) {
  if (doc.contains(key)) out = doc[key].get<V>();
}

}  // namespace

nlohmann::json to_json(const TokenizerConfig& cfg) {
  nlohmann::json partition = nlohmann::json::array();
  for (const auto& r : cfg.partition) partition.push_back({r.start, r.width});
  return {{"format", std::string(features::format_name(cfg.format))},
          {"layout", layout_name(cfg.layout)},
          {"partition", partition},
          {"alpha", cfg.alpha},
          {"channels", cfg.channels},
          {"res_blocks", cfg.res_blocks},
          {"quantizer", quantizer_name(cfg.quantizer)},
          {"lfq",
           {{"d", cfg.lfq.d},
            {"entropy_weight", cfg.lfq.entropy_weight},
            {"diversity_weight", cfg.lfq.diversity_weight},
            {"temperature", cfg.lfq.temperature},
            {"commitment_weight", cfg.lfq.commitment_weight}}},
          {"codebook_size", cfg.codebook_size},
          {"latent_dim", cfg.latent_dim},
          {"rvq_depth", cfg.rvq_depth},
          {"vq_decay", cfg.vq_decay},
          {"recon_weight", cfg.recon_weight},
          {"velocity_weight", cfg.velocity_weight}};
}

TokenizerConfig tokenizer_config_from_json(const nlohmann::json& doc) {
  reject_unknown(doc,
                 {"format", "layout", "partition", "alpha", "channels", "res_blocks", "quantizer", "lfq",
                  "codebook_size", "latent_dim", "rvq_depth", "vq_decay", "recon_weight", "velocity_weight"},
                 "tokenizer config");
  TokenizerConfig cfg;
  try {
    if (doc.contains("format")) cfg.format = features::parse_format(doc["format"].get<std::string>());
    if (doc.contains("layout")) {
      const auto s = doc["layout"].get<std::string>();
      if (s == "2d") cfg.layout = Layout::k2D;
      else if (s == "1d") cfg.layout = Layout::k1D;
      else fail(ErrorKind::kInvalidConfig, "layout must be 2d or 1d, got '" + s + "'");
    }
    if (doc.contains("partition")) {
      cfg.partition.clear();
      for (const auto& r : doc["partition"]) {
        const auto a = r.get<std::array<std::size_t, 2>>();
        cfg.partition.push_back({a[0], a[1]});
      }
    }
    read_if(doc, "alpha", cfg.alpha);
    read_if(doc, "channels", cfg.channels);
    read_if(doc, "res_blocks", cfg.res_blocks);
    if (doc.contains("quantizer")) {
      const auto s = doc["quantizer"].get<std::string>();
      if (s == "lfq") cfg.quantizer = QuantizerKind::kLFQ;
      else if (s == "vq") cfg.quantizer = QuantizerKind::kVQ;
      else if (s == "rvq") cfg.quantizer = QuantizerKind::kRVQ;
      else fail(ErrorKind::kInvalidConfig, "quantizer must be lfq, vq or rvq, got '" + s + "'");
    }
    if (doc.contains("lfq")) {
      const auto& l = doc["lfq"];
      reject_unknown(l, {"d", "entropy_weight", "diversity_weight", "temperature", "commitment_weight"}, "lfq");
      read_if(l, "d", cfg.lfq.d);
      read_if(l, "entropy_weight", cfg.lfq.entropy_weight);
      read_if(l, "diversity_weight", cfg.lfq.diversity_weight);
      read_if(l, "temperature", cfg.lfq.temperature);
      read_if(l, "commitment_weight", cfg.lfq.commitment_weight);
    }
    read_if(doc, "codebook_size", cfg.codebook_size);
    read_if(doc, "latent_dim", cfg.latent_dim);
    read_if(doc, "rvq_depth", cfg.rvq_depth);
    read_if(doc, "vq_decay", cfg.vq_decay);
    read_if(doc, "recon_weight", cfg.recon_weight);
    read_if(doc, "velocity_weight", cfg.velocity_weight);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kInvalidConfig, std::string("tokenizer config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

nlohmann::json to_json(const TrainOptions& o) {
  return {{"epochs", o.epochs}, {"batch_size", o.batch_size}, {"lr", o.lr},
          {"final_lr_ratio", o.final_lr_ratio}, {"window", o.window}, {"max_batches", o.max_batches}, {"eval_every_epoch", o.eval_every_epoch},
          {"seed", o.seed}};
}

TrainOptions train_options_from_json(const nlohmann::json& doc) {
  reject_unknown(doc, {"epochs", "batch_size", "lr", "final_lr_ratio", "window", "max_batches", "eval_every_epoch", "seed"},
                 "training options");
  TrainOptions o;
  try {
    read_if(doc, "epochs", o.epochs);
    read_if(doc, "batch_size", o.batch_size);
    read_if(doc, "lr", o.lr);
    read_if(doc, "final_lr_ratio", o.final_lr_ratio);
    read_if(doc, "window", o.window);
    read_if(doc, "max_batches", o.max_batches);
    read_if(doc, "eval_every_epoch", o.eval_every_epoch);
    read_if(doc, "seed", o.seed);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kInvalidConfig, std::string("training options: ") + e.what());
  }
  require(o.epochs >= 1 && o.batch_size >= 1, ErrorKind::kInvalidConfig, "epochs and batch_size must be >= 1");
  require(o.lr > 0, ErrorKind::kInvalidConfig, "lr must be positive");
  require(o.final_lr_ratio > 0 && o.final_lr_ratio <= 1, ErrorKind::kInvalidConfig, "final_lr_ratio must be in (0, 1]");
  return o;
}

// ---- network ----

template <typename T>
TokenizerNet<T>::TokenizerNet(const TokenizerConfig& cfg, Rng& rng) : cfg_(cfg), parts_(cfg.parts()) {
  cfg_.validate();
  kw_ = cfg_.layout == Layout::k2D ? 3 : 1;
  const std::size_t D = features::feature_width(cfg_.format);
  const std::size_t P = parts_.size();
  const std::size_t C0 = cfg_.stage_channels(0);

  // Each part block gets its own fan-in.
  std::vector<T> ew(D * C0);
  for (const auto& r : parts_) {
    const double bound = std::sqrt(6.0 / static_cast<double>(r.width));
    for (std::size_t j = r.start; j < r.start + r.width; ++j) {
      for (std::size_t c = 0; c < C0; ++c) ew[j * C0 + c] = static_cast<T>(rng.uniform(-bound, bound));
    }
  }
  embed_w_ = Tensor<T>::parameter({D, C0}, std::move(ew));
  embed_b_ = nn::constant_parameter<T>({P, C0}, T(0));
  params_.push_back({"embed.w", embed_w_});
  params_.push_back({"embed.b", embed_b_});

  const std::size_t S = cfg_.stages();
  for (std::size_t s = 0; s < S; ++s) {
    const auto cin = cfg_.stage_channels(s), cout = cfg_.stage_channels(s + 1);
    down_.push_back(make_conv(rng, "enc.down" + std::to_string(s), 3, cin, cout, 2));
    for (std::size_t k = 0; k < cfg_.res_blocks; ++k) {
      const auto base = "enc.res" + std::to_string(s) + "." + std::to_string(k);
      enc_res_.push_back(make_conv(rng, base + ".a", 3, cout, cout, 1));
      enc_res_.push_back(make_conv(rng, base + ".b", 3, cout, cout, 1));
    }
  }
  const auto top = cfg_.stage_channels(S);
  to_code_ = make_conv(rng, "enc.out", 1, top, cfg_.code_dim(), 1);
  from_code_ = make_conv(rng, "dec.in", 1, cfg_.code_dim(), top, 1);
  for (std::size_t s = S; s-- > 0;) {
    const auto cin = cfg_.stage_channels(s + 1), cout = cfg_.stage_channels(s);
    for (std::size_t k = 0; k < cfg_.res_blocks; ++k) {
      const auto base = "dec.res" + std::to_string(s) + "." + std::to_string(k);
      dec_res_.push_back(make_conv(rng, base + ".a", 3, cin, cin, 1));
      dec_res_.push_back(make_conv(rng, base + ".b", 3, cin, cin, 1));
    }
    up_.push_back(make_conv(rng, "dec.up" + std::to_string(s), 3, cin, cout, 1));
  }
  // small output layer: the untrained decoder starts near the feature mean
  unembed_w_ = nn::kaiming_uniform<T>(rng, {D, C0}, C0);
  for (auto& v : unembed_w_.mutable_values()) v *= T(0.1);
  unembed_b_ = nn::constant_parameter<T>({D}, T(0));
  params_.push_back({"unembed.w", unembed_w_});
  params_.push_back({"unembed.b", unembed_b_});
}

template <typename T>
typename TokenizerNet<T>::Conv TokenizerNet<T>::make_conv(Rng& rng, const std::string& name, std::size_t kh,
                                                          std::size_t cin, std::size_t cout, std::size_t stride_h) {
  const std::size_t kw = kh == 1 ? 1 : kw_;
  Conv c;
  c.w = nn::kaiming_uniform<T>(rng, {kh, kw, cin, cout}, kh * kw * cin);
  // second conv of a residual branch starts small so blocks begin near identity
  if (name.size() > 2 && name.substr(name.size() - 2) == ".b") {
    for (auto& v : c.w.mutable_values()) v *= T(0.1);
  }
  c.b = nn::constant_parameter<T>({cout}, T(0));
  c.p = {stride_h, 1, kh / 2, kw / 2};
  params_.push_back({name + ".w", c.w});
  params_.push_back({name + ".b", c.b});
  return c;
}

template <typename T>
Tensor<T> TokenizerNet<T>::apply(Tape<T>& tape, const Conv& c, const Tensor<T>& x) const {
  return nn::conv2d(tape, x, c.w, c.b, c.p);
}

template <typename T>
Tensor<T> TokenizerNet<T>::residual(Tape<T>& tape, const Conv& a, const Conv& b, const Tensor<T>& x) const {
  auto h = apply(tape, a, nn::relu(tape, x));
  h = apply(tape, b, nn::relu(tape, h));
  return nn::add(tape, x, h);
}

template <typename T>
Tensor<T> TokenizerNet<T>::embed(Tape<T>& tape, const Tensor<T>& x) const {
  require(x.rank() == 3, ErrorKind::kShapeMismatch, "tokenizer input must be [B, T, D]");
  const std::size_t B = x.dim(0), Tn = x.dim(1), D = x.dim(2);
  require(D == features::feature_width(cfg_.format), ErrorKind::kFormatMismatch,
          "tokenizer expects width " + std::to_string(features::feature_width(cfg_.format)) + ", got " +
              std::to_string(D));
  auto flat = nn::reshape(tape, x, {B * Tn, D});
  auto h = nn::part_embed(tape, flat, embed_w_, embed_b_, parts_);
  return nn::reshape(tape, h, {B, Tn, parts_.size(), cfg_.stage_channels(0)});
}

template <typename T>
Tensor<T> TokenizerNet<T>::encode(Tape<T>& tape, const Tensor<T>& x) const {
  require(x.rank() == 3, ErrorKind::kShapeMismatch, "tokenizer input must be [B, T, D]");
  require(x.dim(1) >= cfg_.alpha && x.dim(1) % cfg_.alpha == 0, ErrorKind::kTooShort,
          "sequence length " + std::to_string(x.dim(1)) + " is not a positive multiple of alpha");
  auto h = embed(tape, x);
  std::size_t r = 0;
  for (std::size_t s = 0; s < down_.size(); ++s) {
    h = nn::relu(tape, apply(tape, down_[s], h));
    for (std::size_t k = 0; k < cfg_.res_blocks; ++k, r += 2) h = residual(tape, enc_res_[r], enc_res_[r + 1], h);
  }
  return apply(tape, to_code_, h);
}

template <typename T>
Tensor<T> TokenizerNet<T>::decode(Tape<T>& tape, const Tensor<T>& q) const {
  require(q.rank() == 4 && q.dim(2) == parts_.size() && q.dim(3) == cfg_.code_dim(), ErrorKind::kShapeMismatch,
          "decoder input must be [B, T', P, code_dim], got " + nn::shape_string(q.shape()));
  auto h = apply(tape, from_code_, q);
  std::size_t r = 0;
  for (std::size_t s = 0; s < up_.size(); ++s) {
    for (std::size_t k = 0; k < cfg_.res_blocks; ++k, r += 2) h = residual(tape, dec_res_[r], dec_res_[r + 1], h);
    h = apply(tape, up_[s], nn::relu(tape, nn::upsample_nearest(tape, h, 2, 1)));
  }
  const std::size_t B = h.dim(0), Tn = h.dim(1), D = features::feature_width(cfg_.format);
  auto flat = nn::reshape(tape, h, {B * Tn, parts_.size(), cfg_.stage_channels(0)});
  auto out = nn::part_unembed(tape, flat, unembed_w_, unembed_b_, parts_);
  return nn::reshape(tape, out, {B, Tn, D});
}

template class TokenizerNet<float>;
template class TokenizerNet<double>;

// ---- normalization ----

void Normalizer::apply(std::span<float> frame) const {
  for (std::size_t d = 0; d < frame.size(); ++d) frame[d] = (frame[d] - mean[d]) / std[d];
}

void Normalizer::invert(std::span<float> frame) const {
  for (std::size_t d = 0; d < frame.size(); ++d) frame[d] = frame[d] * std[d] + mean[d];
}

Normalizer fit_normalizer(const std::vector<const MotionSequence*>& motions) {
  require(!motions.empty(), ErrorKind::kEmptyDataset, "cannot fit normalization on an empty dataset");
  const std::size_t D = motions.front()->width();
  std::vector<double> sum(D, 0.0), sq(D, 0.0);
  std::size_t n = 0;
  for (const auto* m : motions) {
    require(m->width() == D, ErrorKind::kFormatMismatch, "mixed feature widths in dataset");
    for (std::size_t t = 0; t < m->frames(); ++t) {
      for (std::size_t d = 0; d < D; ++d) sum[d] += m->at(t, d);
    }
    n += m->frames();
  }
  require(n > 0, ErrorKind::kEmptyDataset, "dataset has no frames");
  Normalizer norm;
  norm.mean.resize(D);
  norm.std.resize(D);
  for (std::size_t d = 0; d < D; ++d) norm.mean[d] = static_cast<float>(sum[d] / static_cast<double>(n));
  for (const auto* m : motions) {
    for (std::size_t t = 0; t < m->frames(); ++t) {
      for (std::size_t d = 0; d < D; ++d) {
        const double c = m->at(t, d) - norm.mean[d];
        sq[d] += c * c;
      }
    }
  }
  for (std::size_t d = 0; d < D; ++d) {
    norm.std[d] = static_cast<float>(std::max(std::sqrt(sq[d] / static_cast<double>(n)), 1e-2));
  }
  return norm;
}

// ---- tokenizer ----

namespace {

TokenizerNet<float> make_net(const TokenizerConfig& cfg, std::uint64_t seed) {
  Rng rng = Rng(seed).fork("net");
  return TokenizerNet<float>(cfg, rng);
}

quant::VQConfig vq_config(const TokenizerConfig& cfg) {
  quant::VQConfig v;
  v.codebook_size = cfg.codebook_size;
  v.dim = cfg.latent_dim;
  v.decay = cfg.vq_decay;
  return v;
}

}  // namespace

Tokenizer::Tokenizer(TokenizerConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), net_(make_net(cfg_, seed)) {
  const std::size_t D = features::feature_width(cfg_.format);
  norm_.mean.assign(D, 0.0f);
  norm_.std.assign(D, 1.0f);
  if (cfg_.quantizer != QuantizerKind::kLFQ) {
    Rng rng = Rng(seed).fork("codebook");
    const std::size_t depth = cfg_.quantizer == QuantizerKind::kRVQ ? cfg_.rvq_depth : 1;
    for (std::size_t l = 0; l < depth; ++l) {
      Rng level = rng.fork(l);
      codebooks_.emplace_back(vq_config(cfg_), level);
    }
  }
}

std::size_t Tokenizer::token_columns() const {
  return cfg_.num_parts() * (cfg_.quantizer == QuantizerKind::kRVQ ? cfg_.rvq_depth : 1);
}

QuantizedLatent<float> Tokenizer::quantize(Tape<float>& tape, const Tensor<float>& z, Rng* train_rng) {
  QuantizedLatent<float> out;
  switch (cfg_.quantizer) {
    case QuantizerKind::kLFQ: {
      auto r = quant::lfq_quantize(tape, z, cfg_.lfq);
      out.quantized = r.quantized;
      out.commitment = r.commitment;
      out.entropy = r.entropy;
      out.codes = std::move(r.codes);
      out.usage = std::move(r.usage);
      break;
    }
    case QuantizerKind::kVQ: {
      auto r = quant::vq_quantize(tape, z, codebooks_.front(), train_rng);
      out.quantized = r.quantized;
      out.commitment = r.commitment;
      out.codes = std::move(r.codes);
      out.usage = std::move(r.usage);
      break;
    }
    case QuantizerKind::kRVQ: {
      auto r = quant::rvq_quantize(tape, z, codebooks_, train_rng);
      out.quantized = r.quantized;
      out.commitment = r.commitment;
      const std::size_t R = r.levels.size(), cells = r.levels.front().codes.size();
      out.codes.resize(cells * R);
      for (std::size_t l = 0; l < R; ++l) {
        for (std::size_t j = 0; j < cells; ++j) out.codes[j * R + l] = r.levels[l].codes[j];
        out.usage.insert(out.usage.end(), r.levels[l].usage.begin(), r.levels[l].usage.end());
      }
      break;
    }
  }
  return out;
}

QuantizedLatent<float> Tokenizer::quantize_frozen(Tape<float>& tape, const Tensor<float>& z) const {
  // without a training rng the codebooks are only read
  return const_cast<Tokenizer*>(this)->quantize(tape, z, nullptr);
}

Tensor<float> Tokenizer::normalized_batch(const std::vector<const MotionSequence*>& batch, std::size_t frames) const {
  const std::size_t D = features::feature_width(cfg_.format);
  std::vector<float> values(batch.size() * frames * D);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& m = *batch[b];
    require(m.format() == cfg_.format, ErrorKind::kFormatMismatch,
            std::string("tokenizer expects ") + std::string(features::format_name(cfg_.format)) + ", got " +
                std::string(features::format_name(m.format())));
    require(m.frames() >= frames, ErrorKind::kTooShort, "sequence shorter than the batch length");
    for (std::size_t t = 0; t < frames; ++t) {
      std::span<float> dst(values.data() + (b * frames + t) * D, D);
      std::copy(m.frame(t).begin(), m.frame(t).end(), dst.begin());
      norm_.apply(dst);
    }
  }
  return Tensor<float>::constant({batch.size(), frames, D}, std::move(values));
}

MotionSequence Tokenizer::denormalize(std::span<const float> values, std::size_t frames, std::uint32_t fps) const {
  const std::size_t D = features::feature_width(cfg_.format);
  std::vector<float> out(values.begin(), values.end());
  for (std::size_t t = 0; t < frames; ++t) norm_.invert({out.data() + t * D, D});
  return MotionSequence(cfg_.format, fps, frames, std::move(out));
}

namespace {

std::size_t usable_frames(const MotionSequence& m, std::size_t alpha) {
  if (m.frames() < alpha) {
    fail(ErrorKind::kTooShort,
         "sequence has " + std::to_string(m.frames()) + " frames, tokenizer needs at least " + std::to_string(alpha));
  }
  return m.frames() / alpha * alpha;
}

}  // namespace

LatentGrid Tokenizer::encode(const MotionSequence& m) const {
  require(m.format() == cfg_.format, ErrorKind::kFormatMismatch,
          std::string("tokenizer expects ") + std::string(features::format_name(cfg_.format)) + ", got " +
              std::string(features::format_name(m.format())));
  const auto frames = usable_frames(m, cfg_.alpha);
  Tape<float> tape;
  auto z = net_.encode(tape, normalized_batch({&m}, frames));
  LatentGrid g;
  g.time = z.dim(1);
  g.parts = z.dim(2);
  g.dim = z.dim(3);
  g.values.assign(z.values().begin(), z.values().end());
  return g;
}

std::vector<Tokenizer::Roundtrip> Tokenizer::roundtrip_batch(const std::vector<const MotionSequence*>& batch) const {
  require(!batch.empty(), ErrorKind::kEmptyDataset, "empty batch");
  const auto frames = usable_frames(*batch.front(), cfg_.alpha);
  for (const auto* m : batch) {
    require(m->frames() == batch.front()->frames(), ErrorKind::kShapeMismatch, "batch sequences differ in length");
  }
  Tape<float> tape;
  auto z = net_.encode(tape, normalized_batch(batch, frames));
  auto q = quantize_frozen(tape, z);
  auto xh = net_.decode(tape, q.quantized);
  const std::size_t cols = token_columns(), grid_t = z.dim(1), D = features::feature_width(cfg_.format);
  const std::size_t per = grid_t * cols;
  std::vector<Roundtrip> out;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    Roundtrip r;
    r.tokens.time = grid_t;
    r.tokens.columns = cols;
    r.tokens.codebook_size = cfg_.codebook_entries();
    r.tokens.codes.assign(q.codes.begin() + static_cast<std::ptrdiff_t>(b * per),
                          q.codes.begin() + static_cast<std::ptrdiff_t>((b + 1) * per));
    r.recon = denormalize(xh.values().subspan(b * frames * D, frames * D), frames, batch[b]->fps());
    out.push_back(std::move(r));
  }
  return out;
}

TokenGrid Tokenizer::tokenize(const MotionSequence& m) const {
  require(m.format() == cfg_.format, ErrorKind::kFormatMismatch,
          std::string("tokenizer expects ") + std::string(features::format_name(cfg_.format)) + ", got " +
              std::string(features::format_name(m.format())));
  const auto frames = usable_frames(m, cfg_.alpha);
  Tape<float> tape;
  auto z = net_.encode(tape, normalized_batch({&m}, frames));
  auto q = quantize_frozen(tape, z);
  TokenGrid g;
  g.time = z.dim(1);
  g.columns = token_columns();
  g.codebook_size = cfg_.codebook_entries();
  g.codes = std::move(q.codes);
  return g;
}

MotionSequence Tokenizer::detokenize(const TokenGrid& tokens, std::uint32_t fps) const {
  const std::size_t P = cfg_.num_parts(), cols = token_columns(), cd = cfg_.code_dim();
  require(tokens.columns == cols, ErrorKind::kBadLength,
          "token grid has " + std::to_string(tokens.columns) + " columns, tokenizer uses " + std::to_string(cols));
  require(tokens.time >= 1 && tokens.codes.size() == tokens.time * cols, ErrorKind::kBadLength,
          std::to_string(tokens.codes.size()) + " tokens do not form a grid with " + std::to_string(cols) + " columns");
  const auto K = cfg_.codebook_entries();
  std::vector<float> q(tokens.time * P * cd, 0.0f);
  const std::size_t depth = cols / P;
  for (std::size_t cell = 0; cell < tokens.time * P; ++cell) {
    float* dst = q.data() + cell * cd;
    for (std::size_t l = 0; l < depth; ++l) {
      const auto code = tokens.codes[cell * depth + l];
      if (code >= K) {
        fail(ErrorKind::kIndexOutOfRange, "token " + std::to_string(code) + " outside codebook of " + std::to_string(K));
      }
      if (cfg_.quantizer == QuantizerKind::kLFQ) {
        const auto w = quant::index_to_codeword(code, cfg_.lfq.d);
        std::copy(w.begin(), w.end(), dst);
      } else {
        const auto row = codebooks_[l].row(code);
        for (std::size_t i = 0; i < cd; ++i) dst[i] += row[i];
      }
    }
  }
  Tape<float> tape;
  auto xh = net_.decode(tape, Tensor<float>::constant({1, tokens.time, P, cd}, std::move(q)));
  return denormalize(xh.values(), tokens.time * cfg_.alpha, fps);
}

void Tokenizer::save(const std::filesystem::path& path) const {
  nn::Checkpoint ckpt;
  ckpt.meta["kind"] = "tokenizer";
  ckpt.meta["config"] = to_json(cfg_);
  const std::size_t D = norm_.mean.size();
  ckpt.tensors["norm.mean"] = {{D}, norm_.mean};
  ckpt.tensors["norm.std"] = {{D}, norm_.std};
  nn::store_params(ckpt, net_.params(), "net.");
  for (std::size_t l = 0; l < codebooks_.size(); ++l) codebooks_[l].store(ckpt, "codebook" + std::to_string(l) + ".");
  nn::save_checkpoint(path, ckpt);
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
  const auto ckpt = nn::load_checkpoint(path);
  if (ckpt.meta.value("kind", "") != "tokenizer") fail(ErrorKind::kBadMagic, path.string() + " is not a tokenizer checkpoint");
  Tokenizer tok(tokenizer_config_from_json(ckpt.meta.at("config")), 0);
  nn::restore_params(ckpt, tok.net_.params(), "net.");
  const std::size_t D = features::feature_width(tok.cfg_.format);
  const auto& mean = ckpt.at("norm.mean");
  const auto& sd = ckpt.at("norm.std");
  require(mean.values.size() == D && sd.values.size() == D, ErrorKind::kShapeMismatch, "normalization width mismatch");
  tok.norm_.mean = mean.values;
  tok.norm_.std = sd.values;
  for (std::size_t l = 0; l < tok.codebooks_.size(); ++l) {
    tok.codebooks_[l] = quant::VQCodebook::restore(ckpt, "codebook" + std::to_string(l) + ".", vq_config(tok.cfg_));
  }
  return tok;
}

// ---- training ----

namespace {

std::vector<const MotionSequence*> gather(const data::Corpus& corpus, const std::vector<std::size_t>& idx) {
  std::vector<const MotionSequence*> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(&corpus.motions.at(i));
  return out;
}

constexpr std::size_t kEvalBatch = 32;

// Batches of equal-length sequences, in index order.
template <typename Fn>
void for_each_batch(const data::Corpus& corpus, const std::vector<std::size_t>& idx, Fn&& fn) {
  std::map<std::size_t, std::vector<const MotionSequence*>> by_length;
  for (auto i : idx) by_length[corpus.motions.at(i).frames()].push_back(&corpus.motions.at(i));
  for (auto& [len, seqs] : by_length) {
    for (std::size_t s = 0; s < seqs.size(); s += kEvalBatch) {
      const auto e = std::min(seqs.size(), s + kEvalBatch);
      fn(std::vector<const MotionSequence*>(seqs.begin() + static_cast<std::ptrdiff_t>(s),
                                            seqs.begin() + static_cast<std::ptrdiff_t>(e)));
    }
  }
}

}  // namespace

double reconstruction_mpjpe(const Tokenizer& tok, const data::Corpus& corpus, const std::vector<std::size_t>& indices) {
  require(!indices.empty(), ErrorKind::kEmptyDataset, "no sequences to evaluate");
  double total = 0;
  std::size_t frames = 0;
  for_each_batch(corpus, indices, [&](const std::vector<const MotionSequence*>& batch) {
    const auto rt = tok.roundtrip_batch(batch);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto n = rt[b].recon.frames();
      const auto gt = features::to_joint_positions(batch[b]->head(n));
      const auto pred = features::to_joint_positions(rt[b].recon);
      total += metrics::mpjpe(pred, gt) * static_cast<double>(n);
      frames += n;
    }
  });
  return total / static_cast<double>(frames);
}

quant::Histogram token_usage(const Tokenizer& tok, const data::Corpus& corpus, const std::vector<std::size_t>& indices) {
  const auto& cfg = tok.config();
  const std::size_t depth = cfg.quantizer == QuantizerKind::kRVQ ? cfg.rvq_depth : 1;
  const auto K = cfg.codebook_entries();
  quant::Histogram h(K * depth, 0);
  for_each_batch(corpus, indices, [&](const std::vector<const MotionSequence*>& batch) {
    for (const auto& r : tok.roundtrip_batch(batch)) {
      for (std::size_t i = 0; i < r.tokens.codes.size(); ++i) ++h[(i % depth) * K + r.tokens.codes[i]];
    }
  });
  return h;
}

TrainReport train_tokenizer(Tokenizer& tok, const data::Corpus& corpus, const TrainOptions& opts) {
  nn::configure_runtime();
  const auto& cfg = tok.config();
  const auto train_idx = corpus.manifest.indices("train");
  const auto val_idx = corpus.manifest.indices("val");
  if (train_idx.empty()) fail(ErrorKind::kEmptyDataset, "the corpus has no training sequences");
  const auto train = gather(corpus, train_idx);
  std::size_t shortest = std::numeric_limits<std::size_t>::max();
  for (const auto* m : train) {
    require(m->format() == cfg.format, ErrorKind::kFormatMismatch,
            std::string("corpus format ") + std::string(features::format_name(m->format())) +
                " does not match tokenizer format " + std::string(features::format_name(cfg.format)));
    shortest = std::min(shortest, m->frames());
  }
  const std::size_t window = std::min(opts.window, shortest) / cfg.alpha * cfg.alpha;
  if (window == 0) fail(ErrorKind::kTooShort, "training sequences are shorter than alpha");

  tok.normalizer() = fit_normalizer(train);
  const std::size_t D = features::feature_width(cfg.format);
  std::vector<std::vector<float>> normalized;
  normalized.reserve(train.size());
  for (const auto* m : train) {
    std::vector<float> v(m->data().begin(), m->data().end());
    for (std::size_t t = 0; t < m->frames(); ++t) tok.normalizer().apply({v.data() + t * D, D});
    normalized.push_back(std::move(v));
  }

  auto& params = tok.net().params();
  nn::AdamState<float> adam;
  adam.config.lr = opts.lr;
  const Rng root(opts.seed);
  Rng codebook_rng = root.fork("codebook-train");
  const std::size_t B = opts.batch_size;

  std::size_t per_epoch = (train.size() + B - 1) / B;
  if (opts.max_batches) per_epoch = std::min(per_epoch, opts.max_batches);
  const double total_steps = static_cast<double>(per_epoch * opts.epochs);
  std::size_t step = 0;

  TrainReport report;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    Rng rng = root.fork("epoch").fork(epoch);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng.engine());
    std::size_t batches = (order.size() + B - 1) / B;
    if (opts.max_batches) batches = std::min(batches, opts.max_batches);

    EpochReport er;
    er.epoch = epoch + 1;
    quant::Histogram usage;
    for (std::size_t bi = 0; bi < batches; ++bi) {
      const std::size_t lo = bi * B, hi = std::min(order.size(), lo + B);
      const std::size_t n = hi - lo;
      std::vector<float> x(n * window * D), dx(n * (window - 1) * D);
      for (std::size_t b = 0; b < n; ++b) {
        const auto s = order[lo + b];
        const auto frames = train[s]->frames();
        const auto offset = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(frames - window)));
        std::copy_n(normalized[s].begin() + static_cast<std::ptrdiff_t>(offset * D), window * D,
                    x.begin() + static_cast<std::ptrdiff_t>(b * window * D));
        for (std::size_t t = 0; t + 1 < window; ++t) {
          for (std::size_t d = 0; d < D; ++d) {
            dx[(b * (window - 1) + t) * D + d] = x[(b * window + t + 1) * D + d] - x[(b * window + t) * D + d];
          }
        }
      }
      nn::Tape<float> tape;
      auto xt = Tensor<float>::constant({n, window, D}, std::move(x));
      auto dxt = Tensor<float>::constant({n, window - 1, D}, std::move(dx));
      Tensor<float> loss, recon, vel;
      QuantizedLatent<float> q;
      try {
        auto z = tok.net().encode(tape, xt);
        q = tok.quantize(tape, z, &codebook_rng);
        auto xh = tok.net().decode(tape, q.quantized);
        recon = nn::mean(tape, nn::abs(tape, nn::sub(tape, xh, xt)));
        auto dxh = nn::sub(tape, nn::narrow(tape, xh, 1, 1, window - 1), nn::narrow(tape, xh, 1, 0, window - 1));
        vel = window > 1 ? nn::mean(tape, nn::abs(tape, nn::sub(tape, dxh, dxt))) : Tensor<float>::scalar(0.0f);
        loss = nn::add(tape, nn::scale(tape, recon, static_cast<float>(cfg.recon_weight)),
                       nn::scale(tape, vel, static_cast<float>(cfg.velocity_weight)));
        loss = nn::add(tape, loss, q.commitment);
        if (q.entropy.defined()) {
          loss = nn::add(tape, loss, nn::scale(tape, q.entropy, static_cast<float>(cfg.lfq.entropy_weight)));
        }
        nn::zero_grads(params);
        tape.backward(loss);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::kNonFiniteValue) throw;
        fail(ErrorKind::kNonFiniteLoss,
             "tokenizer training diverged at epoch " + std::to_string(epoch + 1) + ", batch " + std::to_string(bi + 1) +
                 ": " + e.what());
      }
      const double progress = total_steps > 1 ? static_cast<double>(step++) / (total_steps - 1) : 0.0;
      adam.config.lr = opts.lr * (opts.final_lr_ratio + (1 - opts.final_lr_ratio) * 0.5 * (1 + std::cos(std::numbers::pi * progress)));
      nn::adam_step(params, adam);
      er.recon += recon.item();
      er.velocity += vel.item();
      er.commit += q.commitment.item();
      if (q.entropy.defined()) er.entropy += q.entropy.item();
      quant::accumulate(usage, q.usage);
    }
    const double nb = static_cast<double>(batches);
    er.recon /= nb;
    er.velocity /= nb;
    er.commit /= nb;
    er.entropy /= nb;
    const auto stats = quant::codebook_stats(usage);
    er.utilization = stats.utilization;
    er.perplexity = stats.perplexity;
    const bool last = epoch + 1 == opts.epochs;
    er.val_mpjpe = std::numeric_limits<double>::quiet_NaN();
    if (!val_idx.empty() && (opts.eval_every_epoch || last)) er.val_mpjpe = reconstruction_mpjpe(tok, corpus, val_idx);
    report.epochs.push_back(er);
  }
  report.train_usage = token_usage(tok, corpus, train_idx);
  const auto stats = quant::codebook_stats(report.train_usage);
  report.train_utilization = stats.utilization;
  report.train_perplexity = stats.perplexity;
  report.val_mpjpe = report.epochs.back().val_mpjpe;
  return report;
}

void write_report_csv(const std::filesystem::path& path, const TrainReport& report) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out.precision(9);
  out << "epoch,recon,velocity,commit,entropy,utilization,perplexity,val_mpjpe\n";
  for (const auto& e : report.epochs) {
    out << e.epoch << ',' << e.recon << ',' << e.velocity << ',' << e.commit << ',' << e.entropy << ','
        << e.utilization << ',' << e.perplexity << ',';
    if (std::isfinite(e.val_mpjpe)) out << e.val_mpjpe;
    out << '\n';
  }
}

// ---- sweep ----

TokenizerConfig family_config(const std::string& family, std::uint64_t codebook_size, TokenizerConfig base) {
  const bool lfq = family == "lfq-2d" || family == "lfq-1d";
  if (lfq) {
    require(std::has_single_bit(codebook_size), ErrorKind::kInvalidConfig,
            "LFQ codebook size must be a power of two, got " + std::to_string(codebook_size));
    base.quantizer = QuantizerKind::kLFQ;
    base.lfq.d = std::countr_zero(codebook_size);
    base.layout = family == "lfq-2d" ? Layout::k2D : Layout::k1D;
  } else if (family == "vq-1d" || family == "rvq-1d") {
    base.quantizer = family == "vq-1d" ? QuantizerKind::kVQ : QuantizerKind::kRVQ;
    base.codebook_size = codebook_size;
    base.layout = Layout::k1D;
  } else {
    fail(ErrorKind::kInvalidConfig, "unknown quantizer family '" + family + "' (lfq-2d, lfq-1d, vq-1d, rvq-1d)");
  }
  base.validate();
  return base;
}

std::vector<SweepRow> utilization_sweep(const data::Corpus& corpus, const std::vector<std::string>& families,
                                        const std::vector<std::uint64_t>& sizes, const TokenizerConfig& base,
                                        const TrainOptions& opts) {
  require(!sizes.empty() && std::is_sorted(sizes.begin(), sizes.end()), ErrorKind::kInvalidConfig,
          "codebook sizes must be a non-empty ascending list");
  std::vector<SweepRow> rows;
  for (const auto& family : families) {
    for (auto K : sizes) {
      Tokenizer tok(family_config(family, K, base), opts.seed);
      const auto report = train_tokenizer(tok, corpus, opts);
      rows.push_back({family, K, report.train_utilization, report.train_perplexity, report.val_mpjpe});
    }
  }
  return rows;
}

void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out.precision(9);
  out << "family,K,utilization,perplexity,val_mpjpe\n";
  for (const auto& r : rows) {
    out << r.family << ',' << r.codebook_size << ',' << r.utilization << ',' << r.perplexity << ',' << r.val_mpjpe
        << '\n';
  }
}

// ---- token files ----

void write_tokens(const std::filesystem::path& path, const TokenGrid& tokens) {
  require(tokens.codes.size() == tokens.time * tokens.columns, ErrorKind::kBadLength, "token grid size mismatch");
  require(tokens.codebook_size <= std::numeric_limits<std::uint32_t>::max(), ErrorKind::kInvalidConfig,
          "codebook too large for a token file");
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out.write("MOTK", 4);
  io::write_u32(out, 1);
  io::write_u32(out, static_cast<std::uint32_t>(tokens.codebook_size));
  io::write_u32(out, static_cast<std::uint32_t>(tokens.columns));
  io::write_u32(out, static_cast<std::uint32_t>(tokens.time));
  io::write_u32s(out, tokens.codes);
  if (!out) fail(ErrorKind::kIo, "failed writing " + path.string());
}

TokenGrid read_tokens(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot read " + path.string());
  char magic[4] = {};
  if (!in.read(magic, 4) || std::memcmp(magic, "MOTK", 4) != 0) fail(ErrorKind::kBadMagic, path.string() + " is not a MOTK file");
  std::uint32_t version = 0, K = 0, cols = 0, time = 0;
  if (!io::read_u32(in, version)) fail(ErrorKind::kTruncatedFile, path.string() + ": truncated header");
  if (version != 1) fail(ErrorKind::kUnsupportedVersion, path.string() + ": token file version " + std::to_string(version));
  if (!io::read_u32(in, K) || !io::read_u32(in, cols) || !io::read_u32(in, time)) {
    fail(ErrorKind::kTruncatedFile, path.string() + ": truncated header");
  }
  TokenGrid g;
  g.codebook_size = K;
  g.columns = cols;
  g.time = time;
  g.codes.resize(static_cast<std::size_t>(cols) * time);
  if (!io::read_array(in, std::span<std::uint32_t>(g.codes))) fail(ErrorKind::kTruncatedFile, path.string() + ": truncated codes");
  for (auto c : g.codes) {
    if (c >= K) fail(ErrorKind::kTokenOutOfRange, path.string() + ": code " + std::to_string(c) + " >= K");
  }
  return g;
}

}  // namespace motionbook::tok
