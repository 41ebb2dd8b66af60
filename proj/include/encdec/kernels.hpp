#pragma once

#include "encdec/tensor.hpp"

// Forward kernels on plain tensors. The taped versions in autograd.hpp call
// into these and add the matching gradient rules.
namespace encdec::kernels {

// [p x q] . [q x r] -> [p x r]
Tensor matmul(const Tensor& a, const Tensor& b);

// 2-D transpose.
Tensor transpose(const Tensor& a);

// Row-wise softmax over the visible (mask == 1) entries only. Masked entries
// come out as exact zeros; a row with no visible entry is an error.
Tensor masked_softmax(const Tensor& logits, const Tensor& mask);

// x / sqrt(mean(x^2) + eps) * gain over the last axis.
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps);

// tanh-form GELU, as used by the Gemma feed-forward blocks.
double gelu(double x);
double gelu_grad(double x);

}  // namespace encdec::kernels
