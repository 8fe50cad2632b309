#include <doctest.h>

#include <cmath>
#include <numeric>

#include "motionbook/error.hpp"
#include "motionbook/lm.hpp"
#include "motionbook/rng.hpp"

using namespace motionbook;
using namespace motionbook::lm;

namespace {

LMConfig small_config(std::size_t context = 64) {
  LMConfig c;
  c.layers = 2;
  c.heads = 4;
  c.width = 32;
  c.context = context;
  return c;
}

std::vector<std::uint32_t> random_codes(Rng& rng, std::size_t n, std::uint32_t K) {
  std::vector<std::uint32_t> out(n);
  for (auto& c : out) c = static_cast<std::uint32_t>(rng.uniform_int(0, K - 1));
  return out;
}

std::vector<float> row_logits(const MotionLM& m, const std::vector<std::int32_t>& ids) {
  nn::Tape<float> tape;
  auto l = m.logits(tape, ids, 1, ids.size());
  return {l.values().begin(), l.values().end()};
}

double log_softmax_at(std::span<const float> row, std::int32_t target) {
  double mx = -1e300;
  for (float v : row) mx = std::max(mx, static_cast<double>(v));
  double s = 0;
  for (float v : row) s += std::exp(v - mx);
  return row[static_cast<std::size_t>(target)] - mx - std::log(s);
}

}  // namespace

TEST_CASE("vocab layout") {
  Vocab v(1024);
  CHECK(v.size() == 256 + 1024 + 5);
  CHECK(v.motion(0) == 256);
  CHECK(v.motion(1023) == 1279);
  CHECK(v.bos() == 1280);
  CHECK(v.mot() < v.mot_end());
  CHECK(v.mot_end() == v.size() - 1);
  for (std::int32_t id = 0; id < v.size(); ++id) {
    CHECK(int(v.is_text(id)) + int(v.is_motion(id)) + int(v.is_special(id)) == 1);
  }
  CHECK(v.code_of(v.motion(77)) == 77);
  CHECK_THROWS_AS(v.motion(1024), Error);
  CHECK_THROWS_AS(v.code_of(v.bos()), Error);
  CHECK_THROWS_AS(Vocab(0), Error);
}

TEST_CASE("build_example stream") {
  Vocab v(8);
  const std::vector<std::uint32_t> codes = {3, 1, 7};
  const auto ex = build_example(v, "hi", codes);
  const std::vector<std::int32_t> stream = {v.bos(), 'h', 'i', v.mot(), 259, 257, 263, v.mot_end(), v.eos()};
  CHECK(ex.input == std::vector<std::int32_t>(stream.begin(), stream.end() - 1));
  CHECK(ex.target == std::vector<std::int32_t>(stream.begin() + 1, stream.end()));
  CHECK(ex.mask == std::vector<std::uint8_t>(8, 1));

  const auto empty = build_example(v, "", codes);
  CHECK(empty.input.front() == v.bos());
  CHECK(empty.input[1] == v.mot());
  CHECK(empty.target.back() == v.eos());
  CHECK(std::count(empty.input.begin(), empty.input.end(), v.mot()) == 1);
  CHECK(std::count(empty.target.begin(), empty.target.end(), v.mot_end()) == 1);

  const std::vector<std::uint32_t> bad = {8};
  try {
    build_example(v, "x", bad);
    FAIL("expected TokenOutOfRange");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kTokenOutOfRange);
  }
}

TEST_CASE("apply_template") {
  CHECK(apply_template("Show me a demonstration of <Caption_Placeholder> through movement.", "a person waves") ==
        "Show me a demonstration of a person waves through movement.");
  CHECK(apply_template("<Caption_Placeholder>", "walk") == "walk");
  CHECK(apply_template("say <Caption_Placeholder>!", "<Caption_Placeholder>") == "say <Caption_Placeholder>!");
  try {
    apply_template("no placeholder", "x");
    FAIL("expected MissingPlaceholder");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kMissingPlaceholder);
  }
  CHECK_THROWS_AS(apply_template("<Caption_Placeholder> <Caption_Placeholder>", "x"), Error);
}

TEST_CASE("shipped templates") {
  const auto t = load_templates(MOTIONBOOK_TEMPLATES);
  CHECK(t.size() == 25);
  for (const auto& s : t) CHECK(apply_template(s, "").find("<Caption_Placeholder>") == std::string::npos);
}

TEST_CASE("config json") {
  const auto c = small_config(100);
  const auto back = lm_config_from_json(to_json(c));
  CHECK(back.layers == c.layers);
  CHECK(back.heads == c.heads);
  CHECK(back.width == c.width);
  CHECK(back.context == 100);
  CHECK_THROWS_AS(lm_config_from_json({{"width", 30}, {"heads", 4}}), Error);
  CHECK_THROWS_AS(lm_config_from_json({{"layerz", 2}}), Error);
  CHECK_THROWS_AS(lm_config_from_json({{"dropout", 0.1}}), Error);
}

TEST_CASE("untrained loss is near ln|V|") {
  Vocab v(512);
  MotionLM m(LMConfig{}, v, 3);
  Rng rng(5);
  std::vector<LMExample> ex;
  for (int i = 0; i < 8; ++i) ex.push_back(build_example(v, "a person walks", random_codes(rng, 40, 512)));
  const auto ev = evaluate_lm(m, ex);
  const double ln_v = std::log(static_cast<double>(v.size()));
  CHECK(std::abs(ev.loss - ln_v) < 0.05 * ln_v);
}

TEST_CASE("batched loss equals the naive per-position negative log-likelihood") {
  Vocab v(16);
  MotionLM m(small_config(), v, 11);
  Rng rng(2);
  // unequal lengths force padding in the batch
  std::vector<LMExample> ex = {build_example(v, "ab", random_codes(rng, 5, 16)),
                               build_example(v, "walk", random_codes(rng, 9, 16)),
                               build_example(v, "", random_codes(rng, 2, 16))};
  double naive = 0;
  std::size_t positions = 0;
  for (const auto& e : ex) {
    for (std::size_t j = 0; j < e.input.size(); ++j) {
      std::vector<std::int32_t> prefix(e.input.begin(), e.input.begin() + static_cast<std::ptrdiff_t>(j + 1));
      const auto l = row_logits(m, prefix);
      const auto V = static_cast<std::size_t>(v.size());
      naive -= log_softmax_at(std::span<const float>(l).subspan(j * V, V), e.target[j]);
      ++positions;
    }
  }
  const auto ev = evaluate_lm(m, ex);
  CHECK(ev.positions == positions);
  CHECK(ev.loss * static_cast<double>(positions) == doctest::Approx(naive).epsilon(1e-5));
}

TEST_CASE("all-masked loss is zero with zero gradients") {
  Vocab v(16);
  MotionLM m(small_config(), v, 1);
  Rng rng(0);
  auto ex = build_example(v, "x", random_codes(rng, 6, 16));
  std::fill(ex.mask.begin(), ex.mask.end(), 0);
  nn::Tape<float> tape;
  auto logits = m.logits(tape, ex.input, 1, ex.input.size());
  auto loss = nn::cross_entropy(tape, logits, ex.target, ex.mask, nn::Reduction::kMean);
  CHECK(loss.item() == 0.0f);
  nn::zero_grads(m.params());
  tape.backward(loss);
  for (const auto& p : m.params()) {
    for (float g : p.tensor.grad()) CHECK(g == 0.0f);
  }
}

TEST_CASE("causality under perturbation") {
  Vocab v(32);
  MotionLM m(small_config(), v, 4);
  Rng rng(9);
  const std::size_t L = 20;
  const auto V = static_cast<std::size_t>(v.size());
  std::vector<std::int32_t> ids(L);
  for (auto& id : ids) id = static_cast<std::int32_t>(rng.uniform_int(0, v.size() - 1));
  const auto base = row_logits(m, ids);
  for (std::size_t j : {0u, 5u, 13u, 18u}) {
    auto other = ids;
    for (std::size_t k = j + 1; k < L; ++k) other[k] = static_cast<std::int32_t>(rng.uniform_int(0, v.size() - 1));
    const auto pert = row_logits(m, other);
    double diff = 0;
    for (std::size_t i = 0; i < (j + 1) * V; ++i) diff = std::max(diff, std::abs(double(base[i]) - pert[i]));
    CHECK(diff < 1e-5);
  }
}

TEST_CASE("incremental decoder matches the full forward pass") {
  Vocab v(32);
  MotionLM m(small_config(), v, 8);
  Rng rng(1);
  std::vector<std::int32_t> ids(30);
  for (auto& id : ids) id = static_cast<std::int32_t>(rng.uniform_int(0, v.size() - 1));
  const auto full = row_logits(m, ids);
  const auto V = static_cast<std::size_t>(v.size());
  IncrementalDecoder dec(m);
  double diff = 0;
  for (std::size_t j = 0; j < ids.size(); ++j) {
    const auto l = dec.push(ids[j]);
    REQUIRE(l.size() == V);
    for (std::size_t i = 0; i < V; ++i) diff = std::max(diff, std::abs(double(l[i]) - full[j * V + i]));
  }
  CHECK(diff < 1e-4);
  CHECK(dec.position() == ids.size());
}

TEST_CASE("context and id checks") {
  Vocab v(8);
  MotionLM m(small_config(16), v, 0);
  std::vector<std::int32_t> ids(17, 0);
  nn::Tape<float> tape;
  try {
    m.logits(tape, ids, 1, 17);
    FAIL("expected ContextOverflow");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kContextOverflow);
  }
  ids.resize(4);
  ids[2] = v.size();
  CHECK_THROWS_AS(m.logits(tape, ids, 1, 4), Error);

  Rng rng(0);
  std::vector<LMExample> ex = {build_example(v, "a long description", random_codes(rng, 4, 8))};
  try {
    train_lm(m, ex, {});
    FAIL("expected ContextOverflow");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kContextOverflow);
  }

  IncrementalDecoder dec(m);
  for (int i = 0; i < 16; ++i) dec.push(0);
  CHECK_THROWS_AS(dec.push(0), Error);
  try {
    generate(m, "a description longer than the context", {});
    FAIL("expected ContextOverflow");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kContextOverflow);
  }
}

TEST_CASE("generation bounds and determinism") {
  Vocab v(12);
  MotionLM m(small_config(), v, 21);
  GenerateParams g;
  g.max_len = 0;
  CHECK(generate(m, "walk", g).empty());
  g.max_len = 40;
  const auto a = generate(m, "walk", g);
  CHECK(a == generate(m, "walk", g));
  CHECK(a.size() <= 40);

  // sampling: seeded, never outside the motion range, stops at the context end
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    GenerateParams s;
    s.temperature = 1.5;
    s.top_k = seed % 3 == 0 ? 0 : 5;
    s.max_len = 1000;
    s.seed = seed;
    const auto out = generate(m, "run", s);
    CHECK(out == generate(m, "run", s));
    CHECK(out.size() <= 64 - 5);
    for (auto c : out) CHECK(c < 12u);
  }
}

TEST_CASE("checkpoint roundtrip") {
  Vocab v(20);
  MotionLM m(small_config(), v, 6);
  const auto path = std::filesystem::temp_directory_path() / "mb_test_lm.ckpt";
  m.save(path);
  const auto back = MotionLM::load(path);
  std::filesystem::remove(path);
  CHECK(back.vocab().motion_codes() == 20);
  CHECK(back.config().width == m.config().width);
  const std::vector<std::int32_t> ids = {v.bos(), 'a', v.mot(), v.motion(3), v.motion(19)};
  CHECK(row_logits(m, ids) == row_logits(back, ids));
}

TEST_CASE("training is deterministic per seed") {
  Vocab v(8);
  Rng rng(3);
  std::vector<LMExample> ex;
  for (int i = 0; i < 6; ++i) ex.push_back(build_example(v, "w" + std::to_string(i), random_codes(rng, 6, 8)));
  LMTrainOptions o;
  o.epochs = 3;
  o.batch_size = 4;
  o.lr = 1e-3;
  MotionLM a(small_config(), v, 1), b(small_config(), v, 1);
  const auto ca = train_lm(a, ex, o);
  const auto cb = train_lm(b, ex, o);
  REQUIRE(ca.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(ca[i].loss == cb[i].loss);
  CHECK(ca.back().loss < ca.front().loss);
}

TEST_CASE("memorization of a 100-example corpus") {
  const std::uint32_t K = 16;
  Vocab v(K);
  Rng rng(42);
  std::vector<std::string> descs;
  std::vector<std::vector<std::uint32_t>> codes;
  std::vector<LMExample> ex;
  for (int i = 0; i < 100; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "item %03d", i);
    descs.emplace_back(buf);
    codes.push_back(random_codes(rng, 32, K));
    ex.push_back(build_example(v, descs.back(), codes.back()));
  }
  LMConfig c;
  c.layers = 2;
  c.heads = 4;
  c.width = 64;
  c.context = 48;
  MotionLM m(c, v, 7);
  LMTrainOptions o;
  o.epochs = 200;
  o.batch_size = 10;
  o.lr = 3e-3;
  o.seed = 7;
  const auto curve = train_lm(m, ex, o);
  const auto ev = evaluate_lm(m, ex);
  MESSAGE("train accuracy " << ev.accuracy << ", loss " << ev.loss << ", last epoch loss " << curve.back().loss);
  CHECK(ev.accuracy >= 0.90);

  GenerateParams g;
  g.max_len = 64;
  std::size_t exact = 0;
  for (std::size_t i = 0; i < descs.size(); ++i) exact += generate(m, descs[i], g) == codes[i];
  MESSAGE("exact greedy reproductions " << exact << " / " << descs.size());
  CHECK(exact >= 90);
}
