#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "motionbook/nn/tensor.hpp"
#include "motionbook/rng.hpp"

namespace motionbook::nn {

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

// Uniform in +-sqrt(6 / fan_in).
template <typename T>
Tensor<T> kaiming_uniform(Rng& rng, Shape shape, std::size_t fan_in);
template <typename T>
Tensor<T> constant_parameter(Shape shape, T value);

template <typename T>
void zero_grads(ParamList<T>& params);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::vector<std::vector<T>> m, v;
  std::uint64_t step = 0;
};

// One bias-corrected Adam update. Parameters without an accumulated gradient
// are treated as having a zero gradient. Moments are created on first use.
template <typename T>
void adam_step(ParamList<T>& params, AdamState<T>& state);

// Largest elementwise |analytic - numeric| / max(|analytic|, |numeric|, 1e-6)
// over x, with the numeric gradient from central differences.
using ScalarFn = std::function<Tensor<double>(Tape<double>&, const Tensor<double>&)>;
double grad_check(const ScalarFn& f, const Shape& shape, const std::vector<double>& x, double eps = 1e-5);

struct CheckpointTensor {
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, CheckpointTensor> tensors;

  const CheckpointTensor& at(const std::string& name) const;
};

// Writes <path> (JSON manifest) and <path>.bin (little-endian f32 blob).
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <typename T>
void store_params(Checkpoint& ckpt, const ParamList<T>& params, const std::string& prefix = "");
// Copies checkpoint values into params by name; shape mismatch throws.
template <typename T>
void restore_params(const Checkpoint& ckpt, ParamList<T>& params, const std::string& prefix = "");

}  // namespace motionbook::nn
