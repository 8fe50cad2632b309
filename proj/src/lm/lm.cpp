#include "motionbook/lm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>

#include <Eigen/Dense>

#include "motionbook/error.hpp"
#include "motionbook/nn/runtime.hpp"
#include "motionbook/rng.hpp"

namespace motionbook::lm {

using nn::Tape;
using nn::Tensor;

Vocab::Vocab(std::uint32_t motion_codes) : k_(motion_codes) {
  require(motion_codes >= 1, ErrorKind::kInvalidConfig, "vocabulary needs at least one motion code");
  require(motion_codes <= (1u << 30), ErrorKind::kInvalidConfig, "too many motion codes for 32-bit ids");
}

std::int32_t Vocab::motion(std::uint32_t code) const {
  if (code >= k_) fail(ErrorKind::kTokenOutOfRange, "motion code " + std::to_string(code) + " >= K=" + std::to_string(k_));
  return static_cast<std::int32_t>(256 + code);
}

std::uint32_t Vocab::code_of(std::int32_t id) const {
  if (!is_motion(id)) fail(ErrorKind::kTokenOutOfRange, "id " + std::to_string(id) + " is not a motion token");
  return static_cast<std::uint32_t>(id - 256);
}

LMExample build_example(const Vocab& vocab, std::string_view desc, std::span<const std::uint32_t> motion_codes) {
  std::vector<std::int32_t> stream;
  stream.reserve(desc.size() + motion_codes.size() + 4);
  stream.push_back(vocab.bos());
  for (unsigned char c : desc) stream.push_back(c);
  stream.push_back(vocab.mot());
  for (auto c : motion_codes) stream.push_back(vocab.motion(c));
  stream.push_back(vocab.mot_end());
  stream.push_back(vocab.eos());
  LMExample ex;
  ex.input.assign(stream.begin(), stream.end() - 1);
  ex.target.assign(stream.begin() + 1, stream.end());
  ex.mask.assign(ex.target.size(), 1);
  return ex;
}

std::string apply_template(std::string_view tmpl, std::string_view caption) {
  const auto pos = tmpl.find(kPlaceholder);
  if (pos == std::string_view::npos) {
    fail(ErrorKind::kMissingPlaceholder, "template has no " + std::string(kPlaceholder) + ": '" + std::string(tmpl) + "'");
  }
  if (tmpl.find(kPlaceholder, pos + kPlaceholder.size()) != std::string_view::npos) {
    fail(ErrorKind::kInvalidConfig, "template repeats the placeholder: '" + std::string(tmpl) + "'");
  }
  std::string out(tmpl.substr(0, pos));
  out += caption;
  out += tmpl.substr(pos + kPlaceholder.size());
  return out;
}

std::vector<std::string> load_templates(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot read templates " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    apply_template(line, "");  // validates the placeholder
    out.push_back(line);
  }
  if (out.empty()) fail(ErrorKind::kInvalidConfig, path.string() + " contains no templates");
  return out;
}

void LMConfig::validate() const {
  require(layers >= 1 && heads >= 1 && width >= 1 && context >= 2, ErrorKind::kInvalidConfig,
          "lm layers, heads, width must be >= 1 and context >= 2");
  require(width % heads == 0, ErrorKind::kInvalidConfig, "lm width must be divisible by heads");
  require(dropout == 0.0, ErrorKind::kInvalidConfig, "lm dropout must be 0");
}

nlohmann::json to_json(const LMConfig& c) {
  return {{"layers", c.layers}, {"heads", c.heads}, {"width", c.width}, {"context", c.context}, {"dropout", c.dropout}};
}

LMConfig lm_config_from_json(const nlohmann::json& doc) {
  static const std::set<std::string> known = {"layers", "heads", "width", "context", "dropout"};
  require(doc.is_object(), ErrorKind::kInvalidConfig, "lm config must be an object");
  LMConfig c;
  try {
    for (const auto& [key, value] : doc.items()) {
      if (!known.count(key)) fail(ErrorKind::kInvalidConfig, "unknown lm config key '" + key + "'");
    }
    if (doc.contains("layers")) c.layers = doc["layers"].get<std::size_t>();
    if (doc.contains("heads")) c.heads = doc["heads"].get<std::size_t>();
    if (doc.contains("width")) c.width = doc["width"].get<std::size_t>();
    if (doc.contains("context")) c.context = doc["context"].get<std::size_t>();
    if (doc.contains("dropout")) c.dropout = doc["dropout"].get<double>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kInvalidConfig, std::string("lm config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

Tensor<float> normal_param(Rng& rng, nn::Shape shape, double stddev) {
  std::vector<float> v(nn::shape_numel(shape));
  for (auto& x : v) x = static_cast<float>(rng.normal(0.0, stddev));
  return Tensor<float>::parameter(std::move(shape), std::move(v));
}

}  // namespace

MotionLM::MotionLM(LMConfig cfg, Vocab vocab, std::uint64_t seed) : cfg_(cfg), vocab_(vocab) {
  cfg_.validate();
  Rng rng = Rng(seed).fork("lm");
  const std::size_t W = cfg_.width, V = static_cast<std::size_t>(vocab_.size());
  const double proj_std = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg_.layers));
  auto add = [&](const std::string& name, Tensor<float> t) {
    params_.push_back({name, t});
    return t;
  };
  tok_emb_ = add("tok_emb", normal_param(rng, {V, W}, 0.02));
  pos_emb_ = add("pos_emb", normal_param(rng, {cfg_.context, W}, 0.02));
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    const auto p = "block" + std::to_string(l) + ".";
    Block b;
    b.ln1_g = add(p + "ln1.g", nn::constant_parameter<float>({W}, 1.0f));
    b.ln1_b = add(p + "ln1.b", nn::constant_parameter<float>({W}, 0.0f));
    b.qkv_w = add(p + "qkv.w", normal_param(rng, {W, 3 * W}, 0.02));
    b.qkv_b = add(p + "qkv.b", nn::constant_parameter<float>({3 * W}, 0.0f));
    b.out_w = add(p + "out.w", normal_param(rng, {W, W}, proj_std));
    b.out_b = add(p + "out.b", nn::constant_parameter<float>({W}, 0.0f));
    b.ln2_g = add(p + "ln2.g", nn::constant_parameter<float>({W}, 1.0f));
    b.ln2_b = add(p + "ln2.b", nn::constant_parameter<float>({W}, 0.0f));
    b.fc_w = add(p + "fc.w", normal_param(rng, {W, 4 * W}, 0.02));
    b.fc_b = add(p + "fc.b", nn::constant_parameter<float>({4 * W}, 0.0f));
    b.proj_w = add(p + "proj.w", normal_param(rng, {4 * W, W}, proj_std));
    b.proj_b = add(p + "proj.b", nn::constant_parameter<float>({W}, 0.0f));
    blocks_.push_back(b);
  }
  lnf_g_ = add("lnf.g", nn::constant_parameter<float>({W}, 1.0f));
  lnf_b_ = add("lnf.b", nn::constant_parameter<float>({W}, 0.0f));
  head_w_ = add("head.w", normal_param(rng, {W, V}, 0.02));
  head_b_ = add("head.b", nn::constant_parameter<float>({V}, 0.0f));
}

Tensor<float> MotionLM::logits(Tape<float>& tape, std::span<const std::int32_t> ids, std::size_t batch,
                               std::size_t length) const {
  require(ids.size() == batch * length && batch >= 1 && length >= 1, ErrorKind::kShapeMismatch,
          "lm input must hold batch * length ids");
  if (length > cfg_.context) {
    fail(ErrorKind::kContextOverflow,
         "sequence of " + std::to_string(length) + " tokens exceeds context " + std::to_string(cfg_.context));
  }
  for (auto id : ids) {
    if (id < 0 || id >= vocab_.size()) fail(ErrorKind::kTokenOutOfRange, "token id " + std::to_string(id) + " outside vocabulary");
  }
  const std::size_t W = cfg_.width, H = cfg_.heads, dh = W / H;
  std::vector<std::int32_t> positions(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) positions[i] = static_cast<std::int32_t>(i % length);
  auto x = nn::add(tape, nn::embedding(tape, tok_emb_, ids), nn::embedding(tape, pos_emb_, positions));
  const float att_scale = 1.0f / std::sqrt(static_cast<float>(dh));
  static constexpr std::size_t kSplit[] = {2, 0, 3, 1, 4};
  static constexpr std::size_t kMerge[] = {0, 2, 1, 3};
  for (const auto& b : blocks_) {
    auto h = nn::layer_norm(tape, x, b.ln1_g, b.ln1_b);
    auto qkv = nn::linear(tape, h, b.qkv_w, b.qkv_b);
    qkv = nn::permute(tape, nn::reshape(tape, qkv, {batch, length, 3, H, dh}), kSplit);
    auto part = [&](std::size_t i) {
      return nn::reshape(tape, nn::narrow(tape, qkv, 0, i, 1), {batch * H, length, dh});
    };
    auto att = nn::scale(tape, nn::bmm(tape, part(0), part(1), true), att_scale);
    auto ctx = nn::bmm(tape, nn::softmax(tape, att, true), part(2));
    ctx = nn::reshape(tape, nn::permute(tape, nn::reshape(tape, ctx, {batch, H, length, dh}), kMerge),
                      {batch * length, W});
    x = nn::add(tape, x, nn::linear(tape, ctx, b.out_w, b.out_b));
    h = nn::layer_norm(tape, x, b.ln2_g, b.ln2_b);
    auto m = nn::linear(tape, nn::gelu(tape, nn::linear(tape, h, b.fc_w, b.fc_b)), b.proj_w, b.proj_b);
    x = nn::add(tape, x, m);
  }
  x = nn::layer_norm(tape, x, lnf_g_, lnf_b_);
  return nn::linear(tape, x, head_w_, head_b_);
}

void MotionLM::save(const std::filesystem::path& path) const {
  nn::Checkpoint ckpt;
  ckpt.meta["kind"] = "motion-lm";
  ckpt.meta["config"] = to_json(cfg_);
  ckpt.meta["motion_codes"] = vocab_.motion_codes();
  nn::store_params(ckpt, params_);
  nn::save_checkpoint(path, ckpt);
}

MotionLM MotionLM::load(const std::filesystem::path& path) {
  const auto ckpt = nn::load_checkpoint(path);
  if (ckpt.meta.value("kind", "") != "motion-lm") fail(ErrorKind::kBadMagic, path.string() + " is not a motion-lm checkpoint");
  MotionLM m(lm_config_from_json(ckpt.meta.at("config")), Vocab(ckpt.meta.at("motion_codes").get<std::uint32_t>()), 0);
  nn::restore_params(ckpt, m.params_);
  return m;
}

// ---- incremental decoding ----

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMat = Eigen::Map<const RowMat>;
using ConstVec = Eigen::Map<const Eigen::VectorXf>;

ConstMat mat(const Tensor<float>& t) {
  return ConstMat(t.values().data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
}
ConstVec vec(const Tensor<float>& t) { return ConstVec(t.values().data(), static_cast<Eigen::Index>(t.numel())); }

Eigen::VectorXf layer_norm(const Eigen::VectorXf& x, const Tensor<float>& g, const Tensor<float>& b) {
  const float mu = x.mean();
  const float var = (x.array() - mu).square().mean();
  const float rstd = 1.0f / std::sqrt(var + 1e-5f);
  return ((x.array() - mu) * rstd * vec(g).array() + vec(b).array()).matrix();
}

float gelu(float v) {
  const float k = static_cast<float>(std::sqrt(2.0 / std::numbers::pi));
  return 0.5f * v * (1.0f + std::tanh(k * (v + 0.044715f * v * v * v)));
}

}  // namespace

IncrementalDecoder::IncrementalDecoder(const MotionLM& model) : m_(model), keys_(model.blocks_.size()), values_(model.blocks_.size()) {}

std::vector<float> IncrementalDecoder::push(std::int32_t id) {
  const auto& cfg = m_.cfg_;
  if (pos_ >= cfg.context) fail(ErrorKind::kContextOverflow, "decoder reached context " + std::to_string(cfg.context));
  if (id < 0 || id >= m_.vocab_.size()) fail(ErrorKind::kTokenOutOfRange, "token id " + std::to_string(id) + " outside vocabulary");
  const auto W = static_cast<Eigen::Index>(cfg.width);
  const auto H = cfg.heads;
  const auto dh = static_cast<Eigen::Index>(cfg.width / H);
  Eigen::VectorXf x = mat(m_.tok_emb_).row(id).transpose() + mat(m_.pos_emb_).row(static_cast<Eigen::Index>(pos_)).transpose();
  const float att_scale = 1.0f / std::sqrt(static_cast<float>(dh));
  const std::size_t n = pos_ + 1;
  for (std::size_t l = 0; l < m_.blocks_.size(); ++l) {
    const auto& b = m_.blocks_[l];
    Eigen::VectorXf h = layer_norm(x, b.ln1_g, b.ln1_b);
    Eigen::VectorXf qkv = mat(b.qkv_w).transpose() * h + vec(b.qkv_b);
    auto& K = keys_[l];
    auto& V = values_[l];
    K.insert(K.end(), qkv.data() + W, qkv.data() + 2 * W);
    V.insert(V.end(), qkv.data() + 2 * W, qkv.data() + 3 * W);
    ConstMat Km(K.data(), static_cast<Eigen::Index>(n), W);
    ConstMat Vm(V.data(), static_cast<Eigen::Index>(n), W);
    Eigen::VectorXf ctx(W);
    for (std::size_t hd = 0; hd < H; ++hd) {
      const auto off = static_cast<Eigen::Index>(hd) * dh;
      Eigen::VectorXf s = (Km.middleCols(off, dh) * qkv.segment(off, dh)) * att_scale;
      s = (s.array() - s.maxCoeff()).exp().matrix();
      s /= s.sum();
      ctx.segment(off, dh) = Vm.middleCols(off, dh).transpose() * s;
    }
    x += mat(b.out_w).transpose() * ctx + vec(b.out_b);
    h = layer_norm(x, b.ln2_g, b.ln2_b);
    Eigen::VectorXf f = mat(b.fc_w).transpose() * h + vec(b.fc_b);
    f = f.unaryExpr(&gelu);
    x += mat(b.proj_w).transpose() * f + vec(b.proj_b);
  }
  x = layer_norm(x, m_.lnf_g_, m_.lnf_b_);
  Eigen::VectorXf logits = mat(m_.head_w_).transpose() * x + vec(m_.head_b_);
  ++pos_;
  return {logits.data(), logits.data() + logits.size()};
}

// ---- training ----

namespace {

struct Batch {
  std::vector<std::int32_t> ids, targets;
  std::vector<std::uint8_t> mask;
  std::size_t size = 0, length = 0;
};

Batch make_batch(const Vocab& vocab, const std::vector<LMExample>& examples, std::span<const std::size_t> order) {
  Batch b;
  b.size = order.size();
  for (auto i : order) b.length = std::max(b.length, examples[i].input.size());
  b.ids.assign(b.size * b.length, vocab.pad());
  b.targets.assign(b.size * b.length, vocab.pad());
  b.mask.assign(b.size * b.length, 0);
  for (std::size_t r = 0; r < b.size; ++r) {
    const auto& ex = examples[order[r]];
    std::copy(ex.input.begin(), ex.input.end(), b.ids.begin() + static_cast<std::ptrdiff_t>(r * b.length));
    std::copy(ex.target.begin(), ex.target.end(), b.targets.begin() + static_cast<std::ptrdiff_t>(r * b.length));
    std::copy(ex.mask.begin(), ex.mask.end(), b.mask.begin() + static_cast<std::ptrdiff_t>(r * b.length));
  }
  return b;
}

void check_examples(const MotionLM& model, const std::vector<LMExample>& examples) {
  if (examples.empty()) fail(ErrorKind::kEmptyDataset, "no lm examples");
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    require(!ex.input.empty() && ex.input.size() == ex.target.size() && ex.mask.size() == ex.target.size(),
            ErrorKind::kShapeMismatch, "lm example " + std::to_string(i) + " has inconsistent lengths");
    if (ex.input.size() > model.config().context) {
      fail(ErrorKind::kContextOverflow, "lm example " + std::to_string(i) + " has " + std::to_string(ex.input.size()) +
                                            " tokens, context is " + std::to_string(model.config().context));
    }
  }
}

std::size_t count_correct(const Tensor<float>& logits, const Batch& b) {
  const std::size_t V = logits.dim(1);
  const float* lv = logits.values().data();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < b.mask.size(); ++i) {
    if (!b.mask[i]) continue;
    const float* row = lv + i * V;
    const auto best = static_cast<std::int32_t>(std::max_element(row, row + V) - row);
    correct += best == b.targets[i];
  }
  return correct;
}

std::size_t scored(const Batch& b) { return static_cast<std::size_t>(std::count(b.mask.begin(), b.mask.end(), 1)); }

}  // namespace

std::vector<LMEpoch> train_lm(MotionLM& model, const std::vector<LMExample>& examples, const LMTrainOptions& opts) {
  nn::configure_runtime();
  check_examples(model, examples);
  require(opts.batch_size >= 1 && opts.lr > 0, ErrorKind::kInvalidConfig, "lm batch_size and lr must be positive");
  nn::AdamState<float> adam;
  adam.config.lr = opts.lr;
  const Rng root(opts.seed);
  std::vector<LMEpoch> curve;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    Rng rng = root.fork("epoch").fork(epoch);
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng.engine());
    double loss_sum = 0;
    std::size_t positions = 0, correct = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += opts.batch_size) {
      const auto hi = std::min(order.size(), lo + opts.batch_size);
      const auto b = make_batch(model.vocab(), examples, std::span<const std::size_t>(order).subspan(lo, hi - lo));
      Tape<float> tape;
      try {
        auto logits = model.logits(tape, b.ids, b.size, b.length);
        auto loss = nn::cross_entropy(tape, logits, b.targets, b.mask, nn::Reduction::kMean);
        nn::zero_grads(model.params());
        tape.backward(loss);
        const auto n = scored(b);
        loss_sum += static_cast<double>(loss.item()) * static_cast<double>(n);
        positions += n;
        correct += count_correct(logits, b);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::kNonFiniteValue) throw;
        fail(ErrorKind::kNonFiniteLoss, "lm training diverged at epoch " + std::to_string(epoch + 1) + ": " + e.what());
      }
      nn::adam_step(model.params(), adam);
    }
    const double denom = positions ? static_cast<double>(positions) : 1.0;
    curve.push_back({epoch + 1, loss_sum / denom, static_cast<double>(correct) / denom});
  }
  return curve;
}

LMEval evaluate_lm(const MotionLM& model, const std::vector<LMExample>& examples) {
  check_examples(model, examples);
  constexpr std::size_t kBatch = 8;
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  LMEval ev;
  double loss_sum = 0;
  std::size_t correct = 0;
  for (std::size_t lo = 0; lo < order.size(); lo += kBatch) {
    const auto hi = std::min(order.size(), lo + kBatch);
    const auto b = make_batch(model.vocab(), examples, std::span<const std::size_t>(order).subspan(lo, hi - lo));
    Tape<float> tape;
    auto logits = model.logits(tape, b.ids, b.size, b.length);
    auto loss = nn::cross_entropy(tape, logits, b.targets, b.mask, nn::Reduction::kSum);
    loss_sum += loss.item();
    ev.positions += scored(b);
    correct += count_correct(logits, b);
  }
  const double denom = ev.positions ? static_cast<double>(ev.positions) : 1.0;
  ev.loss = loss_sum / denom;
  ev.accuracy = static_cast<double>(correct) / denom;
  return ev;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<LMEpoch>& curve) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out.precision(9);
  out << "epoch,loss,accuracy\n";
  for (const auto& e : curve) out << e.epoch << ',' << e.loss << ',' << e.accuracy << '\n';
}

// ---- generation ----

std::vector<std::uint32_t> generate(const MotionLM& model, std::string_view desc, const GenerateParams& params) {
  require(params.temperature >= 0, ErrorKind::kInvalidConfig, "temperature must be >= 0");
  const auto& vocab = model.vocab();
  std::vector<std::int32_t> prompt{vocab.bos()};
  for (unsigned char c : desc) prompt.push_back(c);
  prompt.push_back(vocab.mot());
  if (prompt.size() > model.config().context) {
    fail(ErrorKind::kContextOverflow, "prompt of " + std::to_string(prompt.size()) + " tokens exceeds context");
  }
  std::vector<std::uint32_t> out;
  if (params.max_len == 0) return out;

  IncrementalDecoder dec(model);
  std::vector<float> logits;
  for (auto id : prompt) logits = dec.push(id);

  // candidates: every motion id, then </mot>
  const auto K = vocab.motion_codes();
  std::vector<std::int32_t> allowed(K + 1);
  for (std::uint32_t k = 0; k < K; ++k) allowed[k] = vocab.motion(k);
  allowed[K] = vocab.mot_end();
  Rng rng = Rng(params.seed).fork("generate");

  while (out.size() < params.max_len) {
    std::int32_t pick = allowed.front();
    if (params.temperature == 0.0) {
      float best = -std::numeric_limits<float>::infinity();
      for (auto id : allowed) {
        if (logits[static_cast<std::size_t>(id)] > best) {
          best = logits[static_cast<std::size_t>(id)];
          pick = id;
        }
      }
    } else {
      std::vector<std::pair<double, std::int32_t>> cand;
      cand.reserve(allowed.size());
      for (auto id : allowed) cand.emplace_back(logits[static_cast<std::size_t>(id)] / params.temperature, id);
      if (params.top_k > 0 && params.top_k < cand.size()) {
        std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(params.top_k), cand.end(),
                          [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
        cand.resize(params.top_k);
      }
      double mx = -std::numeric_limits<double>::infinity();
      for (const auto& c : cand) mx = std::max(mx, c.first);
      double total = 0;
      for (auto& c : cand) total += (c.first = std::exp(c.first - mx));
      double u = rng.uniform(0.0, total);
      pick = cand.back().second;
      for (const auto& c : cand) {
        if (u < c.first) {
          pick = c.second;
          break;
        }
        u -= c.first;
      }
    }
    if (pick == vocab.mot_end()) break;
    out.push_back(vocab.code_of(pick));
    if (out.size() == params.max_len || dec.position() == model.config().context) break;
    logits = dec.push(pick);
  }
  return out;
}

}  // namespace motionbook::lm
