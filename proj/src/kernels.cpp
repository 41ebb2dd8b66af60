#include "encdec/kernels.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include <fmt/format.h>

#include "encdec/errors.hpp"

namespace encdec::kernels {

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError(fmt::format("matmul: incompatible shapes {} and {}", shape_str(a.shape()),
                                 shape_str(b.shape())));
  }
  const std::size_t p = a.dim(0), q = a.dim(1), r = b.dim(1);
  Tensor out({p, r});
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = out.data().data();
  for (std::size_t i = 0; i < p; ++i) {
    double* crow = C + i * r;
    const double* arow = A + i * q;
    std::size_t k = 0;
    // Four rows of B per pass; the additions keep the k-sequential order.
    for (; k + 4 <= q; k += 4) {
      const double a0 = arow[k], a1 = arow[k + 1], a2 = arow[k + 2], a3 = arow[k + 3];
      const double* b0 = B + k * r;
      const double* b1 = b0 + r;
      const double* b2 = b1 + r;
      const double* b3 = b2 + r;
      for (std::size_t j = 0; j < r; ++j) crow[j] = (((crow[j] + a0 * b0[j]) + a1 * b1[j]) + a2 * b2[j]) + a3 * b3[j];
    }
    for (; k < q; ++k) {
      const double aik = arow[k];
      const double* brow = B + k * r;
      for (std::size_t j = 0; j < r; ++j) crow[j] += aik * brow[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

Tensor masked_softmax(const Tensor& logits, const Tensor& mask) {
  if (logits.rank() != 2 || logits.shape() != mask.shape()) {
    throw ShapeError(fmt::format("masked_softmax: logits {} vs mask {}", shape_str(logits.shape()),
                                 shape_str(mask.shape())));
  }
  const std::size_t m = logits.dim(0), k = logits.dim(1);
  Tensor out({m, k});
  for (std::size_t i = 0; i < m; ++i) {
    double row_max = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < k; ++j) {
      if (mask.at(i, j) != 0.0) {
        row_max = std::max(row_max, logits.at(i, j));
        any = true;
      }
    }
    if (!any) throw ShapeError(fmt::format("masked_softmax: row {} is fully masked", i));
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      if (mask.at(i, j) != 0.0) {
        const double e = std::exp(logits.at(i, j) - row_max);
        out.at(i, j) = e;
        total += e;
      }
    }
    for (std::size_t j = 0; j < k; ++j) out.at(i, j) /= total;
  }
  return out;
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
  if (x.rank() == 0 || gain.rank() != 1 || gain.dim(0) != x.cols()) {
    throw ShapeError(fmt::format("rms_norm: input {} vs gain {}", shape_str(x.shape()),
                                 shape_str(gain.shape())));
  }
  const std::size_t rows = x.rows(), d = x.cols();
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * d;
    double* o = out.data().data() + r * d;
    double ms = 0.0;
    for (std::size_t j = 0; j < d; ++j) ms += in[j] * in[j];
    ms /= static_cast<double>(d);
    const double denom = std::sqrt(ms + eps);
    if (denom == 0.0) continue;  // all-zero row with eps = 0 stays zero
    for (std::size_t j = 0; j < d; ++j) o[j] = in[j] / denom * gain[j];
  }
  return out;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
}

double gelu(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

}  // namespace encdec::kernels
