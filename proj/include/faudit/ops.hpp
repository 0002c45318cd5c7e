#pragma once

#include <cstddef>

#include "faudit/tensor.hpp"

// Differentiable operations. Broadcasting is limited to identical shapes and
// scalar-vs-tensor; anything else goes through an explicit op below.
namespace faudit::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
/// Throws DomainError on non-positive input.
Tensor log(const Tensor& x);
Tensor sigmoid(const Tensor& x);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);

/// Softmax along `axis` (negative counts from the back).
Tensor softmax(const Tensor& x, int axis = -1);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

/// Cross-correlation of x[c_in,h,w] with kernel[c_out,c_in,kh,kw].
Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride = 1,
              std::size_t padding = 0);
/// x[c,h,w] + bias[c] per channel.
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
/// x[n,d] + bias[d] per row.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);

enum class PoolKind { max, avg, global_avg, global_max };

/// Pooling over x[c,h,w]. Windowed kinds use a square window with
/// stride == window; global kinds return [c,1,1].
Tensor pool2d(const Tensor& x, PoolKind kind, std::size_t window = 2);

/// Mean / max across channels: [c,h,w] -> [1,h,w].
Tensor channel_mean(const Tensor& x);
Tensor channel_max(const Tensor& x);
/// x[c,h,w] * s[c] per channel.
Tensor scale_channels(const Tensor& x, const Tensor& s);
/// x[c,h,w] * m[1,h,w] per pixel.
Tensor scale_spatial(const Tensor& x, const Tensor& m);

/// Rows [begin, begin+count) of x[n,d].
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor concat_rows(const Tensor& a, const Tensor& b);
/// Columns [begin, begin+count) of x[n,d].
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);

/// Non-overlapping patches of x[c,h,w] -> [n_patches, c*p*p], row-major grid.
Tensor patchify(const Tensor& x, std::size_t patch);

/// -log softmax(logits)[target] for logits[n].
Tensor cross_entropy(const Tensor& logits, std::size_t target);

}  // namespace faudit::ops
