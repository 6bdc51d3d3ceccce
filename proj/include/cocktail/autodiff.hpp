#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cocktail/tensor.hpp"

namespace cocktail {

class Graph;

/// Handle to a tensor recorded on a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool requires_grad() const;
  int id() const { return id_; }
  Graph* graph() const { return graph_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* g, int id) : graph_(g), id_(id) {}
  Graph* graph_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode tape. Values are computed eagerly as operations are recorded; the
/// record is in topological order by construction. One graph per forward pass.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Matrix& out_grad)>;

  struct OpRecord {
    std::string op;
    std::vector<int> inputs;
    int output;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Matrix value);
  /// Borrows `value`; it must outlive the graph.
  Var constant_ref(const Matrix& value);
  Var parameter(Matrix value);
  Var parameter_ref(const Matrix& value);

  /// Seeds d(loss)/d(loss) = 1 and propagates to every requires_grad node.
  void backward(Var loss);

  const Matrix& value(int id) const;
  /// Gradient of node `id`; a zero matrix of the node's shape when nothing flowed in.
  const Matrix& grad(int id) const;
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  std::size_t size() const { return nodes_.size(); }
  std::vector<OpRecord> record() const;

  /// Appends an operation node. Used by op implementations.
  Var emit(std::string_view op, Matrix value, std::initializer_list<Var> inputs, BackwardFn fn);
  /// Adds `delta` into the gradient buffer of node `id` (no-op for constants).
  void accumulate(int id, const Matrix& delta);
  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& delta) {
    accumulate(id, Matrix(delta));
  }

 private:
  struct Node {
    std::string op;
    Matrix owned;
    const Matrix* borrowed = nullptr;
    mutable Matrix grad;
    bool requires_grad = false;
    std::vector<int> inputs;
    BackwardFn backward;
    const Matrix& value() const { return borrowed ? *borrowed : owned; }
  };

  Var push_leaf(std::string_view op, Matrix owned, const Matrix* borrowed, bool requires_grad);

  std::vector<Node> nodes_;
};

// Linear algebra.
Var matmul(Var a, Var b);
/// a · bᵀ
Var matmul_nt(Var a, Var b);

// Elementwise.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// a + row, broadcasting a 1×n row over every row of a.
Var add_row(Var a, Var row);
Var scale(Var a, double factor);
/// s · a with s a 1×1 tensor.
Var scale_by(Var s, Var a);
Var one_minus(Var a);
Var exp(Var a);
Var gelu(Var a);
Var sigmoid(Var a);

// Reductions and indexing.
Var sum(Var a);
Var log_softmax_rows(Var logits);
/// out[r] = a[r, cols[r]], shape rows×1.
Var pick(Var a, std::span<const TokenId> cols);
Var select_rows(Var a, std::span<const std::size_t> rows);
Var embedding(Var table, std::span<const TokenId> ids);

// Transformer blocks.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
/// Multi-head causal self-attention over already projected q, k, v (each T×d).
Var causal_attention(Var q, Var k, Var v, int n_heads);

/// Builds a scalar loss on a fresh graph from parameter leaves.
using LossBuilder = std::function<Var(Graph&, std::span<const Var> params)>;

/// Max relative error between analytic gradients and central differences over
/// `samples` randomly chosen coordinates (all coordinates when samples is 0 or
/// exceeds the total). Relative error is |a - c| / max(|a|, |c|, 1e-8).
double check_gradients(const LossBuilder& loss_fn, std::vector<Matrix> params, double epsilon,
                       std::size_t samples, std::uint64_t seed = 0);

}  // namespace cocktail
