#include "motionbook/quantizers.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <Eigen/Core>

#include "motionbook/error.hpp"
#include "motionbook/nn/ops.hpp"

namespace motionbook::quant {

using nn::Shape;
using nn::Tape;
using nn::Tensor;

namespace {

template <typename T>
std::size_t check_last_axis(const char* op, const Tensor<T>& z, std::size_t width) {
  if (!z.defined() || z.rank() < 1 || z.shape().back() != width) {
    fail(ErrorKind::kShapeMismatch, std::string(op) + ": last axis must be " + std::to_string(width) +
                                        (z.defined() ? ", got " + nn::shape_string(z.shape()) : ""));
  }
  return z.numel() / width;
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double binary_entropy(double q) {
  double h = 0;
  if (q > 0) h -= q * std::log(q);
  if (q < 1) h -= (1 - q) * std::log1p(-q);
  return h;
}

// beta * mean over cells of |z - q|^2, gradient to z only.
template <typename T>
Tensor<T> commitment_loss(Tape<T>& tape, const Tensor<T>& z, const Tensor<T>& q_const, double beta,
                          std::size_t cells) {
  auto sq = nn::sum(tape, nn::square(tape, nn::sub(tape, z, q_const)));
  return nn::scale(tape, sq, static_cast<T>(beta / static_cast<double>(std::max<std::size_t>(cells, 1))));
}

}  // namespace

void LFQSpec::validate() const {
  require(d >= 1 && d <= 24, ErrorKind::kInvalidConfig, "LFQ d must be in [1,24], got " + std::to_string(d));
  require(temperature > 0, ErrorKind::kInvalidConfig, "LFQ temperature must be positive");
  require(entropy_weight >= 0 && diversity_weight >= 0 && commitment_weight >= 0, ErrorKind::kInvalidConfig,
          "LFQ loss weights must be non-negative");
}

template <typename T>
std::uint32_t lfq_index(std::span<const T> z) {
  std::uint32_t idx = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (z[i] > T(0)) idx |= std::uint32_t{1} << i;
  }
  return idx;
}

std::vector<float> index_to_codeword(std::uint64_t index, int d) {
  require(d >= 1 && d <= 24, ErrorKind::kInvalidConfig, "codeword width must be in [1,24]");
  if (index >= (std::uint64_t{1} << d)) {
    fail(ErrorKind::kIndexOutOfRange, "code " + std::to_string(index) + " outside [0,2^" + std::to_string(d) + ")");
  }
  std::vector<float> c(static_cast<std::size_t>(d));
  for (int i = 0; i < d; ++i) c[static_cast<std::size_t>(i)] = (index >> i) & 1 ? 1.0f : -1.0f;
  return c;
}

template <typename T>
QuantizeResult<T> lfq_quantize(Tape<T>& tape, const Tensor<T>& z, const LFQSpec& spec) {
  spec.validate();
  const auto d = static_cast<std::size_t>(spec.d);
  const std::size_t cells = check_last_axis("lfq_quantize", z, d);
  QuantizeResult<T> r;
  r.codes.resize(cells);
  r.usage.assign(spec.codebook_size(), 0);
  std::vector<T> q(z.numel());
  const auto zv = z.values();
  for (std::size_t c = 0; c < cells; ++c) {
    const auto cell = zv.subspan(c * d, d);
    r.codes[c] = lfq_index(cell);
    ++r.usage[r.codes[c]];
    for (std::size_t i = 0; i < d; ++i) q[c * d + i] = cell[i] > T(0) ? T(1) : T(-1);
  }
  auto q_const = Tensor<T>::constant(z.shape(), std::move(q));
  r.quantized = nn::straight_through(tape, z, q_const);
  r.commitment = commitment_loss(tape, z, q_const, spec.commitment_weight, cells);
  r.entropy = lfq_entropy_penalty(tape, z, spec);
  return r;
}

template <typename T>
Tensor<T> lfq_entropy_penalty(Tape<T>& tape, const Tensor<T>& z, const LFQSpec& spec) {
  spec.validate();
  const auto d = static_cast<std::size_t>(spec.d);
  const std::size_t cells = check_last_axis("lfq_entropy_penalty", z, d);
  require(cells > 0, ErrorKind::kShapeMismatch, "lfq_entropy_penalty: no cells");
  const double tau = spec.temperature, gamma = spec.diversity_weight;
  const auto zv = z.values();
  std::vector<double> x(zv.size()), p(zv.size()), mean_p(d, 0.0);
  double cell_entropy = 0;
  for (std::size_t k = 0; k < zv.size(); ++k) {
    x[k] = static_cast<double>(zv[k]) / tau;
    p[k] = sigmoid(x[k]);
    // H(sigmoid(x)) = p softplus(-x) + (1-p) softplus(x), both terms non-negative
    cell_entropy += p[k] * softplus(-x[k]) + (1 - p[k]) * softplus(x[k]);
    mean_p[k % d] += p[k];
  }
  const double n = static_cast<double>(cells);
  double diversity = 0;
  std::vector<double> log_ratio(d);
  for (std::size_t i = 0; i < d; ++i) {
    mean_p[i] /= n;
    diversity += binary_entropy(mean_p[i]);
    const double q = std::clamp(mean_p[i], 1e-12, 1 - 1e-12);
    log_ratio[i] = std::log((1 - q) / q);
  }
  const double loss = cell_entropy / n - gamma * diversity;
  return tape.record("lfq_entropy_penalty", {}, {static_cast<T>(loss)}, {z},
                     [x = std::move(x), p = std::move(p), log_ratio = std::move(log_ratio), d, n, tau,
                      gamma](nn::Node<T>& o) {
                       T* dz = o.input_grad(0);
                       if (!dz) return;
                       const double g = static_cast<double>(o.grad[0]) / (n * tau);
                       for (std::size_t k = 0; k < x.size(); ++k) {
                         const double s = p[k] * (1 - p[k]);
                         dz[k] += static_cast<T>(g * (-x[k] * s - gamma * log_ratio[k % d] * s));
                       }
                     });
}

VQCodebook::VQCodebook(VQConfig config, Rng& rng) : config_(config) {
  require(config_.codebook_size >= 2, ErrorKind::kInvalidConfig, "VQ codebook needs K >= 2");
  require(config_.dim >= 1, ErrorKind::kInvalidConfig, "VQ codebook needs dim >= 1");
  table_.resize(config_.codebook_size * config_.dim);
  for (auto& v : table_) v = static_cast<float>(rng.normal(0.0, 0.01));
  ema_count_.assign(config_.codebook_size, 1.0);
  ema_sum_.assign(table_.begin(), table_.end());
  unused_.assign(config_.codebook_size, 0);
}

VQCodebook::VQCodebook(VQConfig config, std::vector<float> table) : config_(config), table_(std::move(table)) {
  require(config_.codebook_size >= 2, ErrorKind::kInvalidConfig, "VQ codebook needs K >= 2");
  require(table_.size() == config_.codebook_size * config_.dim, ErrorKind::kShapeMismatch,
          "VQ table must be K x dim");
  nn::check_finite(std::span<const float>(table_), "VQ codebook");
  ema_count_.assign(config_.codebook_size, 1.0);
  ema_sum_.assign(table_.begin(), table_.end());
  unused_.assign(config_.codebook_size, 0);
  seeded_ = true;
}

template <typename T>
std::uint32_t VQCodebook::nearest(std::span<const T> z) const {
  require(z.size() == dim(), ErrorKind::kShapeMismatch, "VQ query width mismatch");
  std::uint32_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < size(); ++k) {
    const float* e = table_.data() + k * dim();
    double dist = 0;
    for (std::size_t i = 0; i < dim(); ++i) {
      const double diff = static_cast<double>(z[i]) - static_cast<double>(e[i]);
      dist += diff * diff;
    }
    if (dist < best_d) {
      best_d = dist;
      best = static_cast<std::uint32_t>(k);
    }
  }
  return best;
}

namespace {

// Nearest rows for a batch. A float GEMM ranks candidates; every row within
// a small margin of the best is then rescored exactly so ties and near-ties
// resolve the same way as the exhaustive scan.
template <typename T>
std::vector<std::uint32_t> assign_codes(const VQCodebook& cb, std::span<const T> z) {
  using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const std::size_t D = cb.dim(), K = cb.size(), n = z.size() / D;
  Eigen::Map<const Mat> E(cb.table().data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(D));
  Mat Z(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(D));
  for (std::size_t i = 0; i < n * D; ++i) Z.data()[i] = static_cast<float>(z[i]);
  const Eigen::VectorXf e_norm = E.rowwise().squaredNorm();
  std::vector<std::uint32_t> codes(n);
  const std::size_t chunk = 256;
  Mat dots;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t m = std::min(chunk, n - start);
    dots.noalias() = Z.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(m)) * E.transpose();
    for (std::size_t r = 0; r < m; ++r) {
      const std::size_t row = start + r;
      const float z_norm = Z.row(static_cast<Eigen::Index>(row)).squaredNorm();
      float best = std::numeric_limits<float>::infinity();
      for (std::size_t k = 0; k < K; ++k) {
        best = std::min(best, e_norm[static_cast<Eigen::Index>(k)] - 2.0f * dots(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)));
      }
      const float margin = 1e-4f * (z_norm + std::abs(best) + 1.0f);
      const T* q = z.data() + row * D;
      double best_exact = std::numeric_limits<double>::infinity();
      std::uint32_t best_k = 0;
      for (std::size_t k = 0; k < K; ++k) {
        if (e_norm[static_cast<Eigen::Index>(k)] - 2.0f * dots(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) > best + margin) continue;
        const auto e = cb.row(k);
        double dist = 0;
        for (std::size_t i = 0; i < D; ++i) {
          const double diff = static_cast<double>(q[i]) - static_cast<double>(e[i]);
          dist += diff * diff;
        }
        if (dist < best_exact) {
          best_exact = dist;
          best_k = static_cast<std::uint32_t>(k);
        }
      }
      codes[row] = best_k;
    }
  }
  return codes;
}

}  // namespace

void VQCodebook::seed_from_batch(std::span<const float> vectors, Rng& rng) {
  const std::size_t n = vectors.size() / dim();
  if (n == 0) return;
  for (std::size_t k = 0; k < size(); ++k) {
    const auto src = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1));
    for (std::size_t i = 0; i < dim(); ++i) {
      const float v = vectors[src * dim() + i] + static_cast<float>(rng.normal(0.0, 1e-3));
      table_[k * dim() + i] = v;
      ema_sum_[k * dim() + i] = v;
    }
    ema_count_[k] = 1.0;
  }
  seeded_ = true;
}

void VQCodebook::ema_update(std::span<const float> vectors, std::span<const std::uint32_t> codes, Rng& rng) {
  const std::size_t D = dim(), K = size(), n = codes.size();
  require(vectors.size() == n * D, ErrorKind::kShapeMismatch, "VQ EMA batch shape mismatch");
  if (n == 0) return;
  std::vector<double> count(K, 0.0), total(K * D, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t k = codes[j];
    require(k < K, ErrorKind::kIndexOutOfRange, "VQ code outside codebook");
    count[k] += 1;
    for (std::size_t i = 0; i < D; ++i) total[k * D + i] += vectors[j * D + i];
  }
  const double a = config_.decay;
  for (std::size_t k = 0; k < K; ++k) {
    ema_count_[k] = a * ema_count_[k] + (1 - a) * count[k];
    for (std::size_t i = 0; i < D; ++i) {
      ema_sum_[k * D + i] = a * ema_sum_[k * D + i] + (1 - a) * total[k * D + i];
      table_[k * D + i] = static_cast<float>(ema_sum_[k * D + i] / ema_count_[k]);
    }
    unused_[k] = count[k] > 0 ? 0 : unused_[k] + 1;
    if (unused_[k] >= config_.dead_after) {
      const auto src = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1));
      for (std::size_t i = 0; i < D; ++i) {
        table_[k * D + i] = vectors[src * D + i];
        ema_sum_[k * D + i] = vectors[src * D + i];
      }
      ema_count_[k] = 1.0;
      unused_[k] = 0;
    }
  }
  nn::check_finite(std::span<const float>(table_), "VQ EMA update");
}

void VQCodebook::store(nn::Checkpoint& ckpt, const std::string& prefix) const {
  ckpt.tensors[prefix + "table"] = {{size(), dim()}, table_};
  std::vector<float> counts(ema_count_.begin(), ema_count_.end());
  ckpt.tensors[prefix + "ema_count"] = {{size()}, std::move(counts)};
}

VQCodebook VQCodebook::restore(const nn::Checkpoint& ckpt, const std::string& prefix, VQConfig config) {
  const auto& t = ckpt.at(prefix + "table");
  if (t.shape != Shape{config.codebook_size, config.dim}) {
    fail(ErrorKind::kShapeMismatch, "checkpoint codebook " + nn::shape_string(t.shape) + " does not match config");
  }
  VQCodebook cb(config, t.values);
  auto it = ckpt.tensors.find(prefix + "ema_count");
  if (it != ckpt.tensors.end() && it->second.values.size() == cb.size()) {
    for (std::size_t k = 0; k < cb.size(); ++k) {
      cb.ema_count_[k] = it->second.values[k];
      for (std::size_t i = 0; i < cb.dim(); ++i) {
        cb.ema_sum_[k * cb.dim() + i] = static_cast<double>(cb.table_[k * cb.dim() + i]) * cb.ema_count_[k];
      }
    }
  }
  return cb;
}

template <typename T>
QuantizeResult<T> vq_quantize(Tape<T>& tape, const Tensor<T>& z, VQCodebook& cb, Rng* train_rng) {
  const std::size_t D = cb.dim();
  const std::size_t n = check_last_axis("vq_quantize", z, D);
  std::vector<float> zf;
  if (train_rng) {
    zf.assign(z.values().begin(), z.values().end());
    if (!cb.seeded()) cb.seed_from_batch(zf, *train_rng);
  }
  QuantizeResult<T> r;
  r.codes = assign_codes(cb, z.values());
  r.usage.assign(cb.size(), 0);
  std::vector<T> q(z.numel());
  for (std::size_t j = 0; j < n; ++j) {
    ++r.usage[r.codes[j]];
    const auto e = cb.row(r.codes[j]);
    for (std::size_t i = 0; i < D; ++i) q[j * D + i] = static_cast<T>(e[i]);
  }
  auto q_const = Tensor<T>::constant(z.shape(), std::move(q));
  r.quantized = nn::straight_through(tape, z, q_const);
  r.commitment = commitment_loss(tape, z, q_const, cb.config().commitment_weight, n);
  if (train_rng) cb.ema_update(zf, r.codes, *train_rng);
  return r;
}

template <typename T>
RVQResult<T> rvq_quantize(Tape<T>& tape, const Tensor<T>& z, std::vector<VQCodebook>& levels, Rng* train_rng) {
  require(!levels.empty(), ErrorKind::kInvalidConfig, "RVQ needs at least one level");
  for (const auto& cb : levels) {
    require(cb.dim() == levels.front().dim(), ErrorKind::kInvalidConfig, "RVQ levels must share dim");
  }
  check_last_axis("rvq_quantize", z, levels.front().dim());
  RVQResult<T> r;
  std::vector<T> acc(z.numel(), T(0));
  for (auto& cb : levels) {
    auto residual = nn::sub(tape, z, Tensor<T>::constant(z.shape(), acc));
    auto level = vq_quantize(tape, residual, cb, train_rng);
    const auto qv = level.quantized.values();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += qv[i];
    r.commitment = r.commitment.defined() ? nn::add(tape, r.commitment, level.commitment) : level.commitment;
    r.levels.push_back(std::move(level));
  }
  r.quantized = nn::straight_through(tape, z, Tensor<T>::constant(z.shape(), std::move(acc)));
  return r;
}

CodebookStats codebook_stats(std::span<const std::uint64_t> histogram) {
  std::uint64_t total = 0, used = 0;
  for (auto c : histogram) {
    total += c;
    used += c > 0;
  }
  if (total == 0) fail(ErrorKind::kEmptyHistogram, "codebook histogram is all zero");
  double h = 0;
  for (auto c : histogram) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log(p);
  }
  return {static_cast<double>(used) / static_cast<double>(histogram.size()), std::exp(h)};
}

void accumulate(Histogram& into, const Histogram& from) {
  if (into.empty()) into.assign(from.size(), 0);
  require(into.size() == from.size(), ErrorKind::kShapeMismatch, "histogram sizes differ");
  for (std::size_t k = 0; k < from.size(); ++k) into[k] += from[k];
}

void write_usage_csv(const std::filesystem::path& path, std::span<const std::uint64_t> histogram) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out << "code_index,count\n";
  for (std::size_t k = 0; k < histogram.size(); ++k) out << k << ',' << histogram[k] << '\n';
}

#define MB_INSTANTIATE_QUANT(T)                                                                         \
  template std::uint32_t lfq_index<T>(std::span<const T>);                                              \
  template QuantizeResult<T> lfq_quantize<T>(Tape<T>&, const Tensor<T>&, const LFQSpec&);               \
  template Tensor<T> lfq_entropy_penalty<T>(Tape<T>&, const Tensor<T>&, const LFQSpec&);                \
  template std::uint32_t VQCodebook::nearest<T>(std::span<const T>) const;                              \
  template QuantizeResult<T> vq_quantize<T>(Tape<T>&, const Tensor<T>&, VQCodebook&, Rng*);             \
  template RVQResult<T> rvq_quantize<T>(Tape<T>&, const Tensor<T>&, std::vector<VQCodebook>&, Rng*);

MB_INSTANTIATE_QUANT(float)
MB_INSTANTIATE_QUANT(double)

#undef MB_INSTANTIATE_QUANT

}  // namespace motionbook::quant
