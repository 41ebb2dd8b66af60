#include "encdec/autograd.hpp"

#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "encdec/errors.hpp"
#include "encdec/kernels.hpp"

namespace encdec {

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::leaf(Tensor value) {
  require_finite(value, "leaf");
  nodes_.push_back(Node{std::move(value), {}, {}, true});
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  require_finite(value, "constant");
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(const char* name, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  require_finite(value, name);
  Node node{std::move(value), {}, {}, false};
  node.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (v.tape != this) throw Error(fmt::format("{}: input recorded on a different tape", name));
    node.inputs.push_back(v.id);
    node.requires_grad = node.requires_grad || nodes_[v.id].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

void Tape::backward(Var out) {
  if (out.tape != this) throw Error("backward: variable belongs to another tape");
  if (nodes_[out.id].value.size() != 1) {
    throw ShapeError("backward: target must have one element, got " +
                     shape_str(nodes_[out.id].value.shape()));
  }
  grads_.assign(nodes_.size(), Tensor{});
  if (!nodes_[out.id].requires_grad) return;
  grads_[out.id] = Tensor(nodes_[out.id].value.shape(), 1.0);

  std::vector<const Tensor*> in;
  std::vector<Tensor*> in_grad;
  for (std::size_t idx = out.id + 1; idx-- > 0;) {
    Node& node = nodes_[idx];
    if (!node.backward || grads_[idx].empty()) continue;
    in.clear();
    in_grad.clear();
    for (std::size_t input : node.inputs) {
      in.push_back(&nodes_[input].value);
      if (nodes_[input].requires_grad) {
        if (grads_[input].empty()) grads_[input] = Tensor(nodes_[input].value.shape());
        in_grad.push_back(&grads_[input]);
      } else {
        in_grad.push_back(nullptr);
      }
    }
    node.backward(BackwardArgs{node.value, grads_[idx], in, in_grad});
  }
}

Tensor Tape::grad(Var v) const {
  if (v.id < grads_.size() && !grads_[v.id].empty()) return grads_[v.id];
  return Tensor(nodes_[v.id].value.shape());
}

namespace ad {
namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(fmt::format("{}: shape mismatch {} vs {}", op, shape_str(a.shape()),
                                 shape_str(b.shape())));
  }
}

void accumulate(Tensor& into, const Tensor& g) {
  for (std::size_t i = 0; i < into.size(); ++i) into[i] += g[i];
}

}  // namespace

Var matmul(Var a, Var b) {
  Tensor out = kernels::matmul(a.value(), b.value());
  return a.tape->record("matmul", std::move(out), {a, b}, [](const BackwardArgs& args) {
    if (args.in_grad[0]) {
      accumulate(*args.in_grad[0], kernels::matmul(args.out_grad, kernels::transpose(*args.in[1])));
    }
    if (args.in_grad[1]) {
      accumulate(*args.in_grad[1], kernels::matmul(kernels::transpose(*args.in[0]), args.out_grad));
    }
  });
}

Var transpose(Var a) {
  return a.tape->record("transpose", kernels::transpose(a.value()), {a},
                        [](const BackwardArgs& args) {
                          accumulate(*args.in_grad[0], kernels::transpose(args.out_grad));
                        });
}

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  accumulate(out, b.value());
  return a.tape->record("add", std::move(out), {a, b}, [](const BackwardArgs& args) {
    for (Tensor* g : args.in_grad) {
      if (g) accumulate(*g, args.out_grad);
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape->record("mul", std::move(out), {a, b}, [](const BackwardArgs& args) {
    const Tensor& g = args.out_grad;
    if (args.in_grad[0]) {
      for (std::size_t i = 0; i < g.size(); ++i) (*args.in_grad[0])[i] += g[i] * (*args.in[1])[i];
    }
    if (args.in_grad[1]) {
      for (std::size_t i = 0; i < g.size(); ++i) (*args.in_grad[1])[i] += g[i] * (*args.in[0])[i];
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= s;
  return a.tape->record("scale", std::move(out), {a}, [s](const BackwardArgs& args) {
    for (std::size_t i = 0; i < args.out_grad.size(); ++i) (*args.in_grad[0])[i] += s * args.out_grad[i];
  });
}

Var gelu(Var a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = kernels::gelu(v);
  return a.tape->record("gelu", std::move(out), {a}, [](const BackwardArgs& args) {
    const Tensor& x = *args.in[0];
    for (std::size_t i = 0; i < x.size(); ++i) {
      (*args.in_grad[0])[i] += args.out_grad[i] * kernels::gelu_grad(x[i]);
    }
  });
}

Var rms_norm(Var x, Var gain, double eps) {
  Tensor out = kernels::rms_norm(x.value(), gain.value(), eps);
  return x.tape->record("rms_norm", std::move(out), {x, gain}, [eps](const BackwardArgs& args) {
    const Tensor& xin = *args.in[0];
    const Tensor& g = *args.in[1];
    const Tensor& dy = args.out_grad;
    const std::size_t rows = xin.rows(), d = xin.cols();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = xin.data().data() + r * d;
      const double* dyr = dy.data().data() + r * d;
      double ms = 0.0;
      for (std::size_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
      ms /= static_cast<double>(d);
      const double denom = std::sqrt(ms + eps);
      if (denom == 0.0) continue;
      const double inv = 1.0 / denom;
      if (args.in_grad[1]) {
        for (std::size_t j = 0; j < d; ++j) (*args.in_grad[1])[j] += dyr[j] * xr[j] * inv;
      }
      if (args.in_grad[0]) {
        // y_j = g_j x_j / s, s = sqrt(mean(x^2) + eps); ds/dx_k = x_k / (d s)
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += dyr[j] * g[j] * xr[j];
        const double coeff = dot * inv * inv * inv / static_cast<double>(d);
        double* dx = args.in_grad[0]->data().data() + r * d;
        for (std::size_t k = 0; k < d; ++k) dx[k] += dyr[k] * g[k] * inv - coeff * xr[k];
      }
    }
  });
}

Var masked_softmax(Var logits, std::shared_ptr<const Tensor> mask) {
  Tensor out = kernels::masked_softmax(logits.value(), *mask);
  return logits.tape->record("masked_softmax", std::move(out), {logits},
                             [](const BackwardArgs& args) {
                               // dx_j = y_j (dy_j - sum_k y_k dy_k); masked y_j = 0.
                               const Tensor& y = args.out;
                               const Tensor& dy = args.out_grad;
                               const std::size_t m = y.dim(0), k = y.dim(1);
                               for (std::size_t i = 0; i < m; ++i) {
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < k; ++j) dot += y.at(i, j) * dy.at(i, j);
                                 for (std::size_t j = 0; j < k; ++j) {
                                   args.in_grad[0]->at(i, j) += y.at(i, j) * (dy.at(i, j) - dot);
                                 }
                               }
                             });
}

Var reshape(Var a, Shape shape) {
  return a.tape->record("reshape", a.value().reshaped(std::move(shape)), {a},
                        [](const BackwardArgs& args) { accumulate(*args.in_grad[0], args.out_grad); });
}

Var slice_cols(Var a, std::size_t start, std::size_t len) {
  const Tensor& x = a.value();
  if (x.rank() != 2 || len == 0 || start + len > x.dim(1)) {
    throw ShapeError(fmt::format("slice_cols: [{}, {}) out of range for {}", start, start + len,
                                 shape_str(x.shape())));
  }
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  Tensor out({rows, len});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < len; ++c) out.at(r, c) = x[r * cols + start + c];
  return a.tape->record("slice_cols", std::move(out), {a}, [start, len](const BackwardArgs& args) {
    Tensor& g = *args.in_grad[0];
    const std::size_t rows = g.dim(0), cols = g.dim(1);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < len; ++c) g[r * cols + start + c] += args.out_grad.at(r, c);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts[0].value().dim(0);
  std::size_t cols = 0;
  for (const Var& p : parts) {
    if (p.value().rank() != 2 || p.value().dim(0) != rows) {
      throw ShapeError("concat_cols: row count mismatch at " + shape_str(p.value().shape()));
    }
    cols += p.value().dim(1);
  }
  Tensor out({rows, cols});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& x = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < x.dim(1); ++c) out.at(r, offset + c) = x.at(r, c);
    offset += x.dim(1);
  }
  return parts[0].tape->record(
      "concat_cols", std::move(out), std::vector<Var>(parts.begin(), parts.end()),
      [](const BackwardArgs& args) {
        std::size_t offset = 0;
        for (std::size_t i = 0; i < args.in.size(); ++i) {
          const std::size_t w = args.in[i]->dim(1);
          if (args.in_grad[i]) {
            for (std::size_t r = 0; r < args.out_grad.dim(0); ++r)
              for (std::size_t c = 0; c < w; ++c) args.in_grad[i]->at(r, c) += args.out_grad.at(r, offset + c);
          }
          offset += w;
        }
      });
}

Var concat_rows(Var top, Var bottom) {
  const Tensor& a = top.value();
  const Tensor& b = bottom.value();
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw ShapeError(fmt::format("concat_rows: {} vs {}", shape_str(a.shape()), shape_str(b.shape())));
  }
  std::vector<double> data(a.values());
  data.insert(data.end(), b.values().begin(), b.values().end());
  Tensor out({a.dim(0) + b.dim(0), a.dim(1)}, std::move(data));
  return top.tape->record("concat_rows", std::move(out), {top, bottom}, [](const BackwardArgs& args) {
    const std::size_t split = args.in[0]->size();
    if (args.in_grad[0]) {
      for (std::size_t i = 0; i < split; ++i) (*args.in_grad[0])[i] += args.out_grad[i];
    }
    if (args.in_grad[1]) {
      for (std::size_t i = 0; i < args.in[1]->size(); ++i) (*args.in_grad[1])[i] += args.out_grad[split + i];
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  if (parts.size() == 1) return parts[0];
  const std::size_t cols = parts[0].value().cols();
  std::size_t rows = 0;
  std::vector<double> data;
  for (const Var& p : parts) {
    const Tensor& x = p.value();
    if (x.rank() != 2 || x.dim(1) != cols) {
      throw ShapeError(fmt::format("concat_rows: {} does not have {} columns", shape_str(x.shape()), cols));
    }
    rows += x.dim(0);
    data.insert(data.end(), x.values().begin(), x.values().end());
  }
  return parts[0].tape->record(
      "concat_rows", Tensor({rows, cols}, std::move(data)), std::vector<Var>(parts.begin(), parts.end()),
      [](const BackwardArgs& args) {
        std::size_t offset = 0;
        for (std::size_t i = 0; i < args.in.size(); ++i) {
          const std::size_t n = args.in[i]->size();
          if (args.in_grad[i]) {
            for (std::size_t k = 0; k < n; ++k) (*args.in_grad[i])[k] += args.out_grad[offset + k];
          }
          offset += n;
        }
      });
}

Var embedding(Var table, std::span<const std::int32_t> ids) {
  const Tensor& t = table.value();
  if (t.rank() != 2) throw ShapeError("embedding: table must be rank 2, got " + shape_str(t.shape()));
  if (ids.empty()) throw ShapeError("embedding: no ids");
  const std::size_t vocab = t.dim(0), d = t.dim(1);
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ShapeError(fmt::format("embedding: id {} outside vocabulary of {}", ids[i], vocab));
    }
    const std::size_t row = static_cast<std::size_t>(ids[i]);
    for (std::size_t c = 0; c < d; ++c) out.at(i, c) = t.at(row, c);
  }
  std::vector<std::int32_t> kept(ids.begin(), ids.end());
  return table.tape->record("embedding", std::move(out), {table},
                            [kept = std::move(kept)](const BackwardArgs& args) {
                              Tensor& g = *args.in_grad[0];
                              const std::size_t d = g.dim(1);
                              for (std::size_t i = 0; i < kept.size(); ++i) {
                                const std::size_t row = static_cast<std::size_t>(kept[i]);
                                for (std::size_t c = 0; c < d; ++c) g.at(row, c) += args.out_grad.at(i, c);
                              }
                            });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape->record("sum", Tensor({1}, {s}), {a}, [](const BackwardArgs& args) {
    for (double& g : args.in_grad[0]->values()) g += args.out_grad[0];
  });
}

Var sum_squares(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v * v;
  return a.tape->record("sum_squares", Tensor({1}, {s}), {a}, [](const BackwardArgs& args) {
    const Tensor& x = *args.in[0];
    for (std::size_t i = 0; i < x.size(); ++i) (*args.in_grad[0])[i] += 2.0 * x[i] * args.out_grad[0];
  });
}

Var cross_entropy_sum(Var logits, std::span<const std::int32_t> targets,
                      std::span<const double> weights) {
  const Tensor& z = logits.value();
  if (z.rank() != 2 || targets.size() != z.dim(0) || weights.size() != z.dim(0)) {
    throw ShapeError(fmt::format("cross_entropy: logits {} with {} targets / {} weights",
                                 shape_str(z.shape()), targets.size(), weights.size()));
  }
  const std::size_t m = z.dim(0), vocab = z.dim(1);
  // Softmax probabilities are kept for the backward pass.
  auto probs = std::make_shared<Tensor>(Shape{m, vocab});
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab) {
      throw ShapeError(fmt::format("cross_entropy: target {} outside vocabulary of {}", targets[i], vocab));
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < vocab; ++j) mx = std::max(mx, z.at(i, j));
    double total = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      const double e = std::exp(z.at(i, j) - mx);
      probs->at(i, j) = e;
      total += e;
    }
    for (std::size_t j = 0; j < vocab; ++j) probs->at(i, j) /= total;
    const double log_p = z.at(i, static_cast<std::size_t>(targets[i])) - mx - std::log(total);
    loss -= weights[i] * log_p;
  }
  std::vector<std::int32_t> t(targets.begin(), targets.end());
  std::vector<double> w(weights.begin(), weights.end());
  return logits.tape->record(
      "cross_entropy", Tensor({1}, {loss}), {logits},
      [probs, t = std::move(t), w = std::move(w)](const BackwardArgs& args) {
        Tensor& g = *args.in_grad[0];
        const double seed = args.out_grad[0];
        for (std::size_t i = 0; i < t.size(); ++i) {
          if (w[i] == 0.0) continue;
          const double s = seed * w[i];
          for (std::size_t j = 0; j < g.dim(1); ++j) g.at(i, j) += s * probs->at(i, j);
          g.at(i, static_cast<std::size_t>(t[i])) -= s;
        }
      });
}

}  // namespace ad
}  // namespace encdec
