#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "encdec/tensor.hpp"

namespace encdec {

class Tape;

// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

// What a backward rule sees. `in_grad[i]` is null when input i does not
// require a gradient; otherwise it is an accumulator to add into.
struct BackwardArgs {
  const Tensor& out;
  const Tensor& out_grad;
  std::span<const Tensor* const> in;
  std::span<Tensor* const> in_grad;
};

using BackwardFn = std::function<void(const BackwardArgs&)>;

// Reverse-mode tape. Nodes are appended in evaluation order, so replaying
// them backwards is a valid topological order. One tape per forward pass;
// a tape is not shared across threads.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Trainable input: receives a gradient.
  Var leaf(Tensor value);
  // Input that never receives a gradient (data, frozen weights).
  Var constant(Tensor value);

  // Appends an op result. `name` labels non-finite errors.
  Var record(const char* name, Tensor value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(out)/d(out) = 1 for a single-element `out` and accumulates into
  // every node that requires a gradient.
  void backward(Var out);

  // Gradient of the last backward() target w.r.t. v. Exact zeros for nodes
  // that did not participate or do not require a gradient.
  Tensor grad(Var v) const;

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

// Taped primitives. Every one checks shapes and finiteness of its output.
namespace ad {

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var gelu(Var a);
Var rms_norm(Var x, Var gain, double eps);
Var masked_softmax(Var logits, std::shared_ptr<const Tensor> mask);
Var reshape(Var a, Shape shape);
Var slice_cols(Var a, std::size_t start, std::size_t len);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(Var top, Var bottom);
Var concat_rows(std::span<const Var> parts);
// Rows of `table` at `ids` -> [ids.size() x d]; gradient scatters back.
Var embedding(Var table, std::span<const std::int32_t> ids);
Var sum(Var a);
Var sum_squares(Var a);
// Sum over rows of weight_i * -log softmax(logits_i)[target_i] -> [1].
Var cross_entropy_sum(Var logits, std::span<const std::int32_t> targets,
                      std::span<const double> weights);

}  // namespace ad

}  // namespace encdec
