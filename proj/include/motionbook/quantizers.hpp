#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "motionbook/nn/tensor.hpp"
#include "motionbook/nn/train.hpp"
#include "motionbook/rng.hpp"

namespace motionbook::quant {

using Histogram = std::vector<std::uint64_t>;

struct LFQSpec {
  int d = 14;
  double entropy_weight = 0.1;     // lambda_ent, applied by the caller
  double diversity_weight = 1.0;   // gamma
  double temperature = 0.1;        // tau
  double commitment_weight = 0.25; // beta

  std::uint64_t codebook_size() const { return std::uint64_t{1} << d; }
  void validate() const;
};

// Aux losses are scalars on the caller's tape. commitment already carries
// beta; entropy is the raw penalty (undefined for VQ).
template <typename T>
struct QuantizeResult {
  std::vector<std::uint32_t> codes;
  nn::Tensor<T> quantized;
  nn::Tensor<T> commitment;
  nn::Tensor<T> entropy;
  Histogram usage;
};

// Bit i (0-based) of the index is set iff z[i] > 0.
template <typename T>
std::uint32_t lfq_index(std::span<const T> z);
std::vector<float> index_to_codeword(std::uint64_t index, int d);

// z [..., d]. The quantized output is +-1 exactly, with an identity
// straight-through gradient to z.
template <typename T>
QuantizeResult<T> lfq_quantize(nn::Tape<T>& tape, const nn::Tensor<T>& z, const LFQSpec& spec);

// mean_cells sum_i H(p_i) - gamma * sum_i H(mean_cells p_i), p = sigmoid(z / tau), nats.
template <typename T>
nn::Tensor<T> lfq_entropy_penalty(nn::Tape<T>& tape, const nn::Tensor<T>& z, const LFQSpec& spec);

struct VQConfig {
  std::size_t codebook_size = 1024;
  std::size_t dim = 512;
  double decay = 0.99;
  int dead_after = 3;  // consecutive unused batches before reinit
  double commitment_weight = 0.25;
};

class VQCodebook {
 public:
  // Rows start as small Gaussian noise; the first training batch replaces
  // them with batch vectors.
  VQCodebook(VQConfig config, Rng& rng);
  VQCodebook(VQConfig config, std::vector<float> table);

  const VQConfig& config() const { return config_; }
  std::size_t size() const { return config_.codebook_size; }
  std::size_t dim() const { return config_.dim; }
  std::span<const float> row(std::size_t k) const { return {table_.data() + k * dim(), dim()}; }
  const std::vector<float>& table() const { return table_; }

  // Lowest index wins ties.
  template <typename T>
  std::uint32_t nearest(std::span<const T> z) const;

  // EMA update of cluster statistics from a batch of vectors [n, dim] and
  // their codes, followed by dead-code reinitialization.
  void ema_update(std::span<const float> vectors, std::span<const std::uint32_t> codes, Rng& rng);

  bool seeded() const { return seeded_; }
  // Replaces every row with a (jittered) random vector from the batch.
  void seed_from_batch(std::span<const float> vectors, Rng& rng);

  void store(nn::Checkpoint& ckpt, const std::string& prefix) const;
  static VQCodebook restore(const nn::Checkpoint& ckpt, const std::string& prefix, VQConfig config);

 private:
  VQConfig config_;
  std::vector<float> table_;
  std::vector<double> ema_count_;
  std::vector<double> ema_sum_;
  std::vector<int> unused_;
  bool seeded_ = false;
};

// z [..., dim]. When rng is given the codebook is trained (EMA + reinit).
template <typename T>
QuantizeResult<T> vq_quantize(nn::Tape<T>& tape, const nn::Tensor<T>& z, VQCodebook& cb, Rng* train_rng);

template <typename T>
struct RVQResult {
  std::vector<QuantizeResult<T>> levels;
  nn::Tensor<T> quantized;   // sum of levels, straight-through to z
  nn::Tensor<T> commitment;  // summed over levels
};

template <typename T>
RVQResult<T> rvq_quantize(nn::Tape<T>& tape, const nn::Tensor<T>& z, std::vector<VQCodebook>& levels,
                          Rng* train_rng);

struct CodebookStats {
  double utilization = 0;
  double perplexity = 0;
};

CodebookStats codebook_stats(std::span<const std::uint64_t> histogram);

void accumulate(Histogram& into, const Histogram& from);
void write_usage_csv(const std::filesystem::path& path, std::span<const std::uint64_t> histogram);

}  // namespace motionbook::quant
