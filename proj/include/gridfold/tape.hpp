#pragma once

#include <cstdint>
#include <functional>
#include <unordered_map>
#include <vector>

#include "gridfold/tensor.hpp"

namespace gridfold::ad {

class Tape;

// Handle to a tensor recorded on a tape. Constants carry requires-grad=false
// and are skipped during backpropagation.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
};

// d(loss)/d(param) for every parameter leaf of a tape, keyed by node id.
class Gradients {
 public:
  const Tensor& at(Var v) const;
  const Tensor& at(int id) const;
  bool contains(int id) const { return by_id_.count(id) != 0; }
  std::unordered_map<int, Tensor>& map() { return by_id_; }
  const std::unordered_map<int, Tensor>& map() const { return by_id_; }

 private:
  std::unordered_map<int, Tensor> by_id_;
  friend class Tape;
};

struct BackwardCtx;
using BackwardFn = std::function<void(BackwardCtx&)>;

// Append-only record of operations. Node ids referenced as inputs always
// precede the referencing node; backward walks ids in reverse and visits each
// node at most once. A tape and its tensors are a single-threaded unit of
// work; the graph is rebuilt per iteration (define-by-run).
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor v);
  Var param(Tensor v);

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Tensor& value(Var v) const;
  bool tracked(int id) const { return nodes_[static_cast<std::size_t>(id)].tracked; }
  std::size_t node_count() const { return nodes_.size(); }
  const std::vector<int>& param_ids() const { return param_ids_; }

  // Gradients of `loss` (a scalar on this tape) w.r.t. every parameter leaf;
  // parameters the loss never touched get zero tensors.
  Gradients backward(Var loss) const;

  // Records an op. `parents` must live on this tape. The node is tracked iff
  // any parent is. Throws NumericError if the value contains NaN/Inf.
  Var record(const char* op_name, Tensor value, std::vector<int> parents, BackwardFn backward);

 private:
  struct Node {
    Tensor value;
    std::vector<int> parents;
    BackwardFn backward;  // empty for leaves
    bool tracked = false;
  };

  std::vector<Node> nodes_;
  std::vector<int> param_ids_;

  friend struct BackwardCtx;
};

// Passed to backward closures; accumulates gradient contributions into the
// per-node buffers of the running backward pass.
struct BackwardCtx {
  const Tape& tape;
  const Tensor& gout;                 // d(loss)/d(this node)
  std::vector<Tensor>& grads;         // dense by node id
  std::vector<char>& present;
  int self = -1;                      // id of the node being differentiated

  const Tensor& value(int id) const { return tape.value(id); }
  bool needs(int id) const { return tape.tracked(id); }
  // Zero-initialised gradient buffer for `id` (for scatter-style backward).
  Tensor& buffer(int id, const Shape& shape);
  void add(int id, const Tensor& g);
};

// ---- op suite -------------------------------------------------------------
// Elementwise binary ops accept equal shapes, or a scalar on either side.

Var matmul(Var a, Var b);                 // (n,k) x (k,m) -> (n,m)
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double s);               // a * s
Var add_scalar(Var a, double s);          // a + s
Var neg(Var a);
Var add_bias(Var m, Var bias);            // (n,m) + (m,) per row
Var concat_cols(Var a, Var b);            // (n,p) ++ (n,q) -> (n,p+q)
Var relu(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var log(Var a);
Var abs(Var a);
Var squared_diff(Var a, Var b);           // (a-b)^2
Var norm_rows(Var a);                     // (n,d) -> (n,) Euclidean norm along last axis
Var sqnorm_rows(Var a);                   // (n,d) -> (n,) sum of squares along last axis
Var max_over_rows(Var a);                 // (n,d) -> (d,) column-wise max; grad to first maximum
Var mean_all(Var a);                      // -> scalar
Var sum_all(Var a);                       // -> scalar
Var softmax_rows(Var a);                  // (n,k) -> (n,k), max-subtracted, stable
Var gather_rows(Var a, std::vector<std::uint32_t> idx);  // (n,d) -> (|idx|,d)
Var tile_rows(Var v, std::size_t n);      // (d,) -> (n,d); grad sums over rows
Var scale_rows(Var m, Var v);             // (n,d) scaled per-row by (n,)
Var sum_groups(Var m, std::size_t group_size);  // (g*k,d) -> (g,d) over consecutive groups
Var clamp_min(Var a, double lo);          // max(a, lo); grad passes only where a > lo

}  // namespace gridfold::ad
