#include "motionbook/nn/train.hpp"

#include <cmath>
#include <fstream>

#include "motionbook/binary_io.hpp"
#include "motionbook/error.hpp"

namespace motionbook::nn {

template <typename T>
Tensor<T> kaiming_uniform(Rng& rng, Shape shape, std::size_t fan_in) {
  const double bound = std::sqrt(6.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::parameter(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> constant_parameter(Shape shape, T value) {
  const auto n = shape_numel(shape);
  return Tensor<T>::parameter(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
void zero_grads(ParamList<T>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

template <typename T>
void adam_step(ParamList<T>& params, AdamState<T>& state) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.numel(), T(0));
      state.v.emplace_back(p.tensor.numel(), T(0));
    }
  }
  require(state.m.size() == params.size(), ErrorKind::kShapeMismatch, "adam: parameter count changed");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(state.m[i].size() == params[i].tensor.numel(), ErrorKind::kShapeMismatch,
            "adam: moment shape differs for " + params[i].name);
  }
  ++state.step;
  const auto& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  const T step_size = static_cast<T>(c.lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(c.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i].tensor;
    if (!t.has_grad()) {
      // zero gradient still decays the moments
      for (std::size_t k = 0; k < t.numel(); ++k) {
        state.m[i][k] *= b1;
        state.v[i][k] *= b2;
      }
    }
    auto values = t.mutable_values();
    auto grad = t.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < values.size() && !grad.empty(); ++k) {
      const T g = grad[k];
      m[k] = b1 * m[k] + (T(1) - b1) * g;
      v[k] = b2 * v[k] + (T(1) - b2) * g * g;
    }
    for (std::size_t k = 0; k < values.size(); ++k) {
      values[k] -= step_size * m[k] / (std::sqrt(v[k]) * inv_sqrt_bc2 + eps);
    }
    check_finite(std::span<const T>(values.data(), values.size()), "adam_step");
  }
}

double grad_check(const ScalarFn& f, const Shape& shape, const std::vector<double>& x, double eps) {
  require(shape_numel(shape) == x.size(), ErrorKind::kShapeMismatch, "grad_check: values do not match shape");
  Tape<double> tape;
  auto param = Tensor<double>::parameter(shape, x);
  const auto loss = f(tape, param);
  tape.backward(loss);
  std::vector<double> analytic(x.size(), 0.0);
  if (param.has_grad()) analytic.assign(param.grad().begin(), param.grad().end());

  auto eval = [&](const std::vector<double>& at) {
    Tape<double> t;
    const double v = f(t, Tensor<double>::constant(shape, at)).item();
    if (!std::isfinite(v)) fail(ErrorKind::kNonFiniteValue, "grad_check: non-finite function value");
    return v;
  };
  double worst = 0.0;
  std::vector<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    const double up = eval(probe);
    probe[i] = x[i] - eps;
    const double down = eval(probe);
    probe[i] = x[i];
    const double numeric = (up - down) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

const CheckpointTensor& Checkpoint::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) fail(ErrorKind::kShapeMismatch, "checkpoint has no tensor '" + name + "'");
  return it->second;
}

namespace {

std::filesystem::path blob_path(const std::filesystem::path& manifest) {
  auto p = manifest;
  p += ".bin";
  return p;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["format"] = "motionbook-checkpoint";
  manifest["version"] = 1;
  manifest["dtype"] = "f32";
  manifest["blob"] = blob_path(path).filename().string();
  manifest["meta"] = ckpt.meta;
  auto& entries = manifest["tensors"] = nlohmann::json::array();

  std::ofstream blob(blob_path(path), std::ios::binary);
  if (!blob) fail(ErrorKind::kIo, "cannot write " + blob_path(path).string());
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    require(shape_numel(t.shape) == t.values.size(), ErrorKind::kShapeMismatch,
            "checkpoint tensor '" + name + "' does not match its shape");
    entries.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}, {"count", t.values.size()}});
    io::write_f32s(blob, t.values);
    offset += t.values.size() * sizeof(float);
  }
  if (!blob) fail(ErrorKind::kIo, "failed writing " + blob_path(path).string());
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out << manifest.dump(1) << "\n";
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot read checkpoint " + path.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kBadMagic, "checkpoint manifest is not JSON: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "motionbook-checkpoint") {
    fail(ErrorKind::kBadMagic, path.string() + " is not a checkpoint manifest");
  }
  if (manifest.value("version", 0) != 1) fail(ErrorKind::kUnsupportedVersion, "checkpoint version");
  const auto blob_file = path.parent_path() / manifest.at("blob").get<std::string>();
  std::ifstream blob(blob_file, std::ios::binary);
  if (!blob) fail(ErrorKind::kIo, "cannot read " + blob_file.string());

  Checkpoint ckpt;
  ckpt.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& e : manifest.at("tensors")) {
    CheckpointTensor t;
    t.shape = e.at("shape").get<Shape>();
    const auto count = e.at("count").get<std::size_t>();
    if (shape_numel(t.shape) != count) fail(ErrorKind::kShapeMismatch, "checkpoint entry shape/count disagree");
    t.values.resize(count);
    blob.seekg(static_cast<std::streamoff>(e.at("offset").get<std::uint64_t>()));
    if (!io::read_array(blob, std::span<float>(t.values))) {
      fail(ErrorKind::kTruncatedFile, "checkpoint blob truncated at " + e.at("name").get<std::string>());
    }
    ckpt.tensors.emplace(e.at("name").get<std::string>(), std::move(t));
  }
  return ckpt;
}

template <typename T>
void store_params(Checkpoint& ckpt, const ParamList<T>& params, const std::string& prefix) {
  for (const auto& p : params) {
    CheckpointTensor t{p.tensor.shape(), {}};
    for (T v : p.tensor.values()) t.values.push_back(static_cast<float>(v));
    ckpt.tensors[prefix + p.name] = std::move(t);
  }
}

template <typename T>
void restore_params(const Checkpoint& ckpt, ParamList<T>& params, const std::string& prefix) {
  for (auto& p : params) {
    const auto& t = ckpt.at(prefix + p.name);
    if (t.shape != p.tensor.shape()) {
      fail(ErrorKind::kShapeMismatch, "checkpoint tensor '" + prefix + p.name + "' has shape " +
                                          shape_string(t.shape) + ", model expects " +
                                          shape_string(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(t.values[i]);
  }
}

#define MB_INSTANTIATE_TRAIN(T)                                                          \
  template Tensor<T> kaiming_uniform<T>(Rng&, Shape, std::size_t);                       \
  template Tensor<T> constant_parameter<T>(Shape, T);                                    \
  template void zero_grads<T>(ParamList<T>&);                                            \
  template void adam_step<T>(ParamList<T>&, AdamState<T>&);                              \
  template void store_params<T>(Checkpoint&, const ParamList<T>&, const std::string&);   \
  template void restore_params<T>(const Checkpoint&, ParamList<T>&, const std::string&);

MB_INSTANTIATE_TRAIN(float)
MB_INSTANTIATE_TRAIN(double)

#undef MB_INSTANTIATE_TRAIN

}  // namespace motionbook::nn
