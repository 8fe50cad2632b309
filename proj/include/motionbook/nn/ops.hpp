#pragma once

#include <cstdint>
#include <span>

#include "motionbook/nn/tensor.hpp"

// Differentiable ops. Every op takes the tape it records onto first; inputs
// are never modified. Shapes are row-major, images are NHWC.
namespace motionbook::nn {

struct ColumnRange {
  std::size_t start = 0;
  std::size_t width = 0;
};

struct Conv2dParams {
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_h = 0, pad_w = 0;
};

enum class Reduction { kSum, kMean };

// a [M,K] x b [K,N] (b [N,K] when transpose_b).
template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);

// Batched: a [G,M,K] x b [G,K,N] (b [G,N,K] when transpose_b).
template <typename T>
Tensor<T> bmm(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);

// x [...,K] w [K,N] + bias [N] (bias may be undefined).
template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

// x [B,H,W,Cin], w [KH,KW,Cin,Cout], bias [Cout] (may be undefined).
template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 const Conv2dParams& p);

// x [B,L,Cin], w [K,Cin,Cout], bias [Cout].
template <typename T>
Tensor<T> conv1d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad);

// x [B,H,W,C] -> [B,H*fh,W*fw,C], nearest neighbour.
template <typename T>
Tensor<T> upsample_nearest(Tape<T>& tape, const Tensor<T>& x, std::size_t fh, std::size_t fw);

// Binary elementwise ops. b has a's shape, a suffix of it, or one element.
template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor);
template <typename T>
Tensor<T> add_scalar(Tape<T>& tape, const Tensor<T>& x, T value);

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x);
// tanh approximation
template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& x);
template <typename T>
Tensor<T> tanh(Tape<T>& tape, const Tensor<T>& x);
template <typename T>
Tensor<T> abs(Tape<T>& tape, const Tensor<T>& x);
template <typename T>
Tensor<T> square(Tape<T>& tape, const Tensor<T>& x);

// Normalizes the last axis. gamma, beta: [C].
template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5));

// Softmax over the last axis. With causal, x is [...,S,S] and entry (i,j>i)
// gets probability zero.
template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x, bool causal = false);

// table [V,C], ids -> [ids.size(), C]. Throws IndexOutOfRange.
template <typename T>
Tensor<T> embedding(Tape<T>& tape, const Tensor<T>& table, std::span<const std::int32_t> ids);

// logits [N,V]; rows with mask 0 are ignored (empty mask = all rows).
// kMean divides by the number of unmasked rows; no unmasked rows gives 0.
template <typename T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits,
                        std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> mask = {},
                        Reduction reduction = Reduction::kMean);

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x);
template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x);

// Same values, no gradient path.
template <typename T>
Tensor<T> stop_gradient(Tape<T>& tape, const Tensor<T>& x);

// Forward value is q exactly; backward passes the gradient to z unchanged.
template <typename T>
Tensor<T> straight_through(Tape<T>& tape, const Tensor<T>& z, const Tensor<T>& q);

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape);
template <typename T>
Tensor<T> permute(Tape<T>& tape, const Tensor<T>& x, std::span<const std::size_t> order);
template <typename T>
Tensor<T> narrow(Tape<T>& tape, const Tensor<T>& x, std::size_t axis, std::size_t start,
                 std::size_t length);

// Block-diagonal linear map from column ranges of x [N,D] to per-part
// channels: out[n,p,:] = x[n, range_p] * w[range_p, :] + bias[p,:].
// w [D,C], bias [P,C].
template <typename T>
Tensor<T> part_embed(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w,
                     const Tensor<T>& bias, std::span<const ColumnRange> ranges);

// Inverse direction: out[n,j] = h[n,p(j),:] . w[j,:] + bias[j] for j in
// range p. h [N,P,C], w [D,C], bias [D].
template <typename T>
Tensor<T> part_unembed(Tape<T>& tape, const Tensor<T>& h, const Tensor<T>& w,
                       const Tensor<T>& bias, std::span<const ColumnRange> ranges);

}  // namespace motionbook::nn
