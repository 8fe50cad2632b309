#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>

#include "motionbook/error.hpp"
#include "motionbook/nn/ops.hpp"
#include "motionbook/quantizers.hpp"

using namespace motionbook;
using namespace motionbook::quant;
using nn::Tensor;

namespace {

using TD = Tensor<double>;
using TapeD = nn::Tape<double>;

std::vector<double> randn(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, scale);
  return v;
}

LFQSpec lfq(int d, double gamma = 1.0) {
  LFQSpec s;
  s.d = d;
  s.diversity_weight = gamma;
  return s;
}

// Exhaustive nearest codeword in {-1,+1}^d, lowest index on ties.
std::uint32_t brute_lfq(std::span<const double> z) {
  const int d = static_cast<int>(z.size());
  std::uint32_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::uint32_t k = 0; k < (1u << d); ++k) {
    const auto c = index_to_codeword(k, d);
    double dist = 0;
    for (int i = 0; i < d; ++i) dist += std::pow(z[static_cast<std::size_t>(i)] - c[static_cast<std::size_t>(i)], 2);
    if (dist < best_d) {
      best_d = dist;
      best = k;
    }
  }
  return best;
}

std::uint32_t brute_vq(const VQCodebook& cb, std::span<const double> z) {
  std::uint32_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < cb.size(); ++k) {
    double dist = 0;
    for (std::size_t i = 0; i < cb.dim(); ++i) dist += std::pow(z[i] - cb.row(k)[i], 2);
    if (dist < best_d) {
      best_d = dist;
      best = static_cast<std::uint32_t>(k);
    }
  }
  return best;
}

}  // namespace

TEST_CASE("lfq examples") {
  TapeD tape;
  auto r = lfq_quantize(tape, TD::constant({3}, {0.7, -0.2, 0.0}), lfq(3));
  CHECK(r.codes == std::vector<std::uint32_t>{1});
  CHECK(std::vector<double>(r.quantized.values().begin(), r.quantized.values().end()) == std::vector<double>{1, -1, -1});
  r = lfq_quantize(tape, TD::constant({1, 2}, {-0.5, 0.3}), lfq(2));
  CHECK(r.codes == std::vector<std::uint32_t>{2});
  CHECK(r.usage == Histogram{0, 0, 1, 0});
  CHECK_THROWS_AS(lfq_quantize(tape, TD::zeros({2, 3}), lfq(4)), Error);
}

TEST_CASE("lfq equals brute-force nearest codeword") {
  Rng rng(11);
  TapeD tape;
  for (int d = 1; d <= 8; ++d) {
    const std::size_t n = 1000;
    auto z = randn(rng, n * static_cast<std::size_t>(d));
    auto r = lfq_quantize(tape, TD::constant({n, static_cast<std::size_t>(d)}, z), lfq(d));
    int mismatches = 0;
    for (std::size_t c = 0; c < n; ++c) {
      mismatches += r.codes[c] != brute_lfq(std::span<const double>(z).subspan(c * d, d));
    }
    CHECK(mismatches == 0);
  }
}

TEST_CASE("index_to_codeword") {
  CHECK(index_to_codeword(0, 3) == std::vector<float>{-1, -1, -1});
  CHECK(index_to_codeword(7, 3) == std::vector<float>{1, 1, 1});
  CHECK(index_to_codeword(2, 2) == std::vector<float>{-1, 1});
  CHECK_THROWS_AS(index_to_codeword(8, 3), Error);
  for (std::uint32_t k = 0; k < (1u << 14); ++k) {
    const auto c = index_to_codeword(k, 14);
    if (lfq_index(std::span<const float>(c)) != k) FAIL("roundtrip failed at " << k);
  }
}

TEST_CASE("lfq idempotence and scale invariance") {
  Rng rng(12);
  TapeD tape;
  for (int trial = 0; trial < 50; ++trial) {
    const auto z = randn(rng, 5 * 6);
    auto r = lfq_quantize(tape, TD::constant({5, 6}, z), lfq(6));
    auto rr = lfq_quantize(tape, r.quantized, lfq(6));
    CHECK(rr.codes == r.codes);
    auto scaled = z;
    const double c = std::exp(rng.uniform(-5, 5));
    for (auto& v : scaled) v *= c;
    CHECK(lfq_quantize(tape, TD::constant({5, 6}, scaled), lfq(6)).codes == r.codes);
  }
}

TEST_CASE("entropy penalty closed forms") {
  TapeD tape;
  const double ln2 = std::numbers::ln2;
  for (double gamma : {1.0, 0.5, 0.0}) {
    auto loss = lfq_entropy_penalty(tape, TD::zeros({9, 5}), lfq(5, gamma));
    CHECK(std::abs(loss.item() - (1 - gamma) * 5 * ln2) < 1e-12);
  }
  // identical saturated cells
  std::vector<double> same;
  for (int c = 0; c < 10; ++c) same.insert(same.end(), {10.0, -10.0, 10.0, 10.0});
  CHECK(std::abs(lfq_entropy_penalty(tape, TD::constant({10, 4}, same), lfq(4)).item()) < 1e-6);
  // every code once, saturated
  const int d = 6;
  std::vector<double> balanced;
  for (std::uint32_t k = 0; k < (1u << d); ++k) {
    for (float v : index_to_codeword(k, d)) balanced.push_back(10.0 * v);
  }
  const auto loss = lfq_entropy_penalty(tape, TD::constant({1u << d, static_cast<std::size_t>(d)}, balanced), lfq(d, 0.7));
  CHECK(std::abs(loss.item() + 0.7 * d * ln2) < 1e-6);
}

TEST_CASE("entropy penalty and commitment pass grad_check") {
  Rng rng(13);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t cells = static_cast<std::size_t>(rng.uniform_int(1, 12));
    const int d = static_cast<int>(rng.uniform_int(1, 8));
    auto spec = lfq(d, rng.uniform(0, 2));
    const nn::Shape shape{cells, static_cast<std::size_t>(d)};
    const auto z = randn(rng, cells * static_cast<std::size_t>(d), 0.15);
    CHECK(nn::grad_check([&](TapeD& t, const TD& x) { return lfq_entropy_penalty(t, x, spec); }, shape, z) < 1e-4);
    CHECK(nn::grad_check([&](TapeD& t, const TD& x) { return lfq_quantize(t, x, spec).commitment; }, shape, z) < 1e-4);
  }
}

TEST_CASE("straight-through gradient equals the identity-quantizer gradient") {
  Rng rng(14);
  const std::size_t n = 6, d = 4;
  auto w = TD::constant({d, 3}, randn(rng, d * 3));
  auto dec = [&](TapeD& t, const TD& x) { return nn::sum(t, nn::tanh(t, nn::matmul(t, x, w))); };
  const auto zv = randn(rng, n * d);

  TapeD tape;
  auto z = TD::parameter({n, d}, zv);
  auto r = lfq_quantize(tape, z, lfq(static_cast<int>(d)));
  tape.backward(dec(tape, r.quantized));

  // Identity path: the decoder evaluated at the codewords.
  std::vector<double> q(r.quantized.values().begin(), r.quantized.values().end());
  TapeD t2;
  auto qp = TD::parameter({n, d}, q);
  t2.backward(dec(t2, qp));
  for (std::size_t i = 0; i < n * d; ++i) CHECK(z.grad()[i] == doctest::Approx(qp.grad()[i]).epsilon(1e-14));

  // and the identity-path gradient agrees with finite differences
  CHECK(nn::grad_check(dec, {n, d}, q) < 1e-4);

  VQCodebook cb(VQConfig{8, d}, [&] {
    auto t = randn(rng, 8 * d);
    return std::vector<float>(t.begin(), t.end());
  }());
  TapeD t3;
  auto z3 = TD::parameter({n, d}, zv);
  auto vr = vq_quantize(t3, z3, cb, nullptr);
  t3.backward(dec(t3, vr.quantized));
  std::vector<double> vq(vr.quantized.values().begin(), vr.quantized.values().end());
  TapeD t4;
  auto vp = TD::parameter({n, d}, vq);
  t4.backward(dec(t4, vp));
  for (std::size_t i = 0; i < n * d; ++i) CHECK(z3.grad()[i] == doctest::Approx(vp.grad()[i]).epsilon(1e-14));
}

TEST_CASE("vq examples") {
  Rng rng(15);
  const std::size_t K = 10, D = 3;
  std::vector<float> table(K * D);
  for (auto& v : table) v = static_cast<float>(rng.normal());
  // rows 2 and 5 symmetric around the origin, row 7 is the query target
  table[2 * D + 0] = 1, table[2 * D + 1] = 0, table[2 * D + 2] = 0;
  table[5 * D + 0] = -1, table[5 * D + 1] = 0, table[5 * D + 2] = 0;
  for (std::size_t k = 0; k < K; ++k) {
    if (k != 2 && k != 5) table[k * D] += 10.0f;
  }
  VQCodebook cb(VQConfig{K, D}, table);
  TapeD tape;
  std::vector<double> row7(table.begin() + 7 * D, table.begin() + 8 * D);
  auto r = vq_quantize(tape, TD::constant({1, D}, row7), cb, nullptr);
  CHECK(r.codes == std::vector<std::uint32_t>{7});
  CHECK(r.commitment.item() == 0.0);
  r = vq_quantize(tape, TD::constant({1, D}, {0.0, 0.25, -0.5}), cb, nullptr);
  CHECK(r.codes == std::vector<std::uint32_t>{2});
  CHECK_THROWS_AS(vq_quantize(tape, TD::zeros({2, 4}), cb, nullptr), Error);
}

TEST_CASE("vq argmin matches exhaustive scan") {
  Rng rng(16);
  const std::size_t K = 1024, D = 16, n = 1000;
  std::vector<float> table(K * D);
  for (auto& v : table) v = static_cast<float>(rng.normal());
  VQCodebook cb(VQConfig{K, D}, table);
  const auto z = randn(rng, n * D);
  TapeD tape;
  auto r = vq_quantize(tape, TD::constant({n, D}, z), cb, nullptr);
  int mismatches = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const auto q = std::span<const double>(z).subspan(j * D, D);
    mismatches += r.codes[j] != brute_vq(cb, q);
    mismatches += r.codes[j] != cb.nearest(q);
  }
  CHECK(mismatches == 0);
  // quantization error never exceeds the distance to any other row
  for (std::size_t j = 0; j < 50; ++j) {
    double own = 0;
    for (std::size_t i = 0; i < D; ++i) own += std::pow(z[j * D + i] - r.quantized.values()[j * D + i], 2);
    for (std::size_t k = 0; k < K; ++k) {
      double other = 0;
      for (std::size_t i = 0; i < D; ++i) other += std::pow(z[j * D + i] - cb.row(k)[i], 2);
      if (own > other + 1e-12) FAIL("row " << k << " is closer than the assigned code");
    }
  }
}

TEST_CASE("vq duplicate rows resolve to the lowest index") {
  std::vector<float> table = {0, 0, 1, 1, 1, 1, 1, 1};
  VQCodebook cb(VQConfig{4, 2}, table);
  TapeD tape;
  auto r = vq_quantize(tape, TD::constant({2, 2}, {0.9, 1.2, 0.1, -0.1}), cb, nullptr);
  CHECK(r.codes == std::vector<std::uint32_t>{1, 0});
}

TEST_CASE("vq EMA moves rows toward assigned vectors and reinitializes dead codes") {
  Rng rng(17);
  VQConfig cfg{4, 2};
  cfg.decay = 0.5;
  VQCodebook cb(cfg, std::vector<float>{0, 0, 10, 10, 100, 100, -100, -100});
  const std::vector<float> batch = {1, 1, 1, 1};
  for (int step = 1; step <= 3; ++step) {
    cb.ema_update(batch, std::vector<std::uint32_t>{0, 0}, rng);
    if (step < 3) CHECK(cb.row(2)[0] == 100.0f);
  }
  CHECK(cb.row(0)[0] > 0.9f);
  // rows 1..3 went unused for three batches and were replaced by batch vectors
  for (std::size_t k = 1; k < 4; ++k) CHECK(cb.row(k)[0] == 1.0f);
}

TEST_CASE("vq seeds an unseeded codebook from the first training batch") {
  Rng rng(18);
  VQCodebook cb(VQConfig{16, 3}, rng);
  CHECK_FALSE(cb.seeded());
  TapeD tape;
  const auto z = randn(rng, 40 * 3, 5.0);
  auto train_rng = rng.fork("train");
  vq_quantize(tape, TD::constant({40, 3}, z), cb, &train_rng);
  CHECK(cb.seeded());
  double max_abs = 0;
  for (float v : cb.table()) max_abs = std::max(max_abs, std::abs(static_cast<double>(v)));
  CHECK(max_abs > 1.0);
}

TEST_CASE("rvq") {
  Rng rng(19);
  const std::size_t D = 4, n = 64;
  std::vector<float> table(32 * D);
  for (auto& v : table) v = static_cast<float>(rng.normal());
  const auto z = randn(rng, n * D);
  TapeD tape;

  SUBCASE("depth 1 equals vq") {
    VQCodebook a(VQConfig{32, D}, table);
    std::vector<VQCodebook> levels = {VQCodebook(VQConfig{32, D}, table)};
    auto v = vq_quantize(tape, TD::constant({n, D}, z), a, nullptr);
    auto r = rvq_quantize(tape, TD::constant({n, D}, z), levels, nullptr);
    CHECK(r.levels[0].codes == v.codes);
    CHECK(std::vector<double>(r.quantized.values().begin(), r.quantized.values().end()) ==
          std::vector<double>(v.quantized.values().begin(), v.quantized.values().end()));
    CHECK(r.commitment.item() == v.commitment.item());
  }
  SUBCASE("adversarial depth 2") {
    // level 1 can only offer the zero vector, level 2 offers v
    std::vector<VQCodebook> levels = {VQCodebook(VQConfig{2, 2}, {0, 0, 0, 0}),
                                      VQCodebook(VQConfig{2, 2}, {0, 0, 3, 4})};
    auto r = rvq_quantize(tape, TD::constant({1, 2}, {2.5, 3.5}), levels, nullptr);
    const double after1 = std::hypot(2.5, 3.5);
    const double after2 = std::hypot(2.5 - r.quantized.values()[0], 3.5 - r.quantized.values()[1]);
    CHECK(r.levels[1].codes[0] == 1);
    CHECK(after2 <= after1);
  }
  SUBCASE("residual norm decreases across four trained levels") {
    std::vector<VQCodebook> levels;
    for (int l = 0; l < 4; ++l) levels.emplace_back(VQConfig{32, D}, rng);
    auto train_rng = rng.fork("rvq");
    for (int step = 0; step < 30; ++step) {
      TapeD t;
      rvq_quantize(t, TD::constant({256, D}, randn(rng, 256 * D)), levels, &train_rng);
    }
    const auto batch = randn(rng, 512 * D);
    auto r = rvq_quantize(tape, TD::constant({512, D}, batch), levels, nullptr);
    std::vector<double> acc(batch.size(), 0.0);
    double prev = std::numeric_limits<double>::infinity();
    for (const auto& level : r.levels) {
      double total = 0;
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += level.quantized.values()[i];
      for (std::size_t j = 0; j < 512; ++j) {
        double s = 0;
        for (std::size_t i = 0; i < D; ++i) s += std::pow(batch[j * D + i] - acc[j * D + i], 2);
        total += std::sqrt(s);
      }
      CHECK(total / 512 < prev);
      prev = total / 512;
    }
  }
}

TEST_CASE("codebook stats") {
  auto s = codebook_stats(Histogram(64, 5));
  CHECK(s.utilization == 1.0);
  CHECK(s.perplexity == doctest::Approx(64).epsilon(1e-12));
  Histogram one(64, 0);
  one[17] = 9;
  s = codebook_stats(one);
  CHECK(s.utilization == doctest::Approx(1.0 / 64));
  CHECK(s.perplexity == doctest::Approx(1.0));
  Histogram half(64, 0);
  for (std::size_t k = 0; k < 64; k += 2) half[k] = 3;
  s = codebook_stats(half);
  CHECK(s.utilization == 0.5);
  CHECK(s.perplexity == doctest::Approx(32).epsilon(1e-12));
  try {
    codebook_stats(Histogram(8, 0));
    FAIL("expected EmptyHistogram");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kEmptyHistogram);
  }
}

TEST_CASE("usage csv") {
  const auto path = std::filesystem::temp_directory_path() / "mb_usage.csv";
  write_usage_csv(path, Histogram{3, 0, 1});
  std::ifstream in(path);
  std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(all == "code_index,count\n0,3\n1,0\n2,1\n");
  std::filesystem::remove(path);
}

TEST_CASE("codebook checkpoint roundtrip") {
  Rng rng(20);
  VQCodebook cb(VQConfig{8, 3}, rng);
  nn::Checkpoint ckpt;
  cb.store(ckpt, "vq0.");
  auto back = VQCodebook::restore(ckpt, "vq0.", VQConfig{8, 3});
  CHECK(back.table() == cb.table());
  CHECK_THROWS_AS(VQCodebook::restore(ckpt, "vq0.", VQConfig{4, 3}), Error);
}
