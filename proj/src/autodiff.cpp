#include "cocktail/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace cocktail {

const Matrix& Var::value() const { return graph_->value(id_); }
const Matrix& Var::grad() const { return graph_->grad(id_); }
bool Var::requires_grad() const { return graph_->requires_grad(id_); }

Var Graph::push_leaf(std::string_view op, Matrix owned, const Matrix* borrowed, bool requires_grad) {
  Node n;
  n.op = op;
  n.owned = std::move(owned);
  n.borrowed = borrowed;
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::constant(Matrix value) { return push_leaf("constant", std::move(value), nullptr, false); }
Var Graph::constant_ref(const Matrix& value) { return push_leaf("constant", Matrix(), &value, false); }
Var Graph::parameter(Matrix value) { return push_leaf("parameter", std::move(value), nullptr, true); }
Var Graph::parameter_ref(const Matrix& value) { return push_leaf("parameter", Matrix(), &value, true); }

const Matrix& Graph::value(int id) const { return nodes_.at(static_cast<std::size_t>(id)).value(); }

const Matrix& Graph::grad(int id) const {
  const Node& n = nodes_.at(static_cast<std::size_t>(id));
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value().rows(), n.value().cols());
  return n.grad;
}

Var Graph::emit(std::string_view op, Matrix value, std::initializer_list<Var> inputs, BackwardFn fn) {
  Node n;
  n.op = op;
  n.owned = std::move(value);
  for (const Var& v : inputs) {
    if (v.graph() != this) throw ContractError("graph op '" + std::string(op) + "': input from another graph");
    n.inputs.push_back(v.id());
    n.requires_grad = n.requires_grad || requires_grad(v.id());
  }
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Graph::accumulate(int id, const Matrix& delta) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = delta;
  } else {
    n.grad += delta;
  }
}

void Graph::backward(Var loss) {
  if (loss.graph() != this) throw ContractError("backward: loss belongs to another graph");
  const Matrix& lv = value(loss.id());
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw ContractError("backward: loss must be scalar, got " + shape_string(lv));
  }
  if (!requires_grad(loss.id())) return;
  accumulate(loss.id(), Matrix::Ones(1, 1));
  for (int i = loss.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.backward || n.grad.size() == 0) continue;
    n.backward(*this, n.grad);
  }
}

std::vector<Graph::OpRecord> Graph::record() const {
  std::vector<OpRecord> out;
  out.reserve(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    out.push_back({nodes_[i].op, nodes_[i].inputs, static_cast<int>(i)});
  }
  return out;
}

namespace {

void require_same_shape(std::string_view op, const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
  }
}

void require_scalar(std::string_view op, const Matrix& s) {
  if (s.rows() != 1 || s.cols() != 1) {
    throw DimensionError(std::string(op) + ": expected scalar, got " + shape_string(s));
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions differ " + shape_string(av) + " · " + shape_string(bv));
  }
  Graph& g = *a.graph();
  const int ia = a.id(), ib = b.id();
  return g.emit("matmul", av * bv, {a, b}, [ia, ib](Graph& g, const Matrix& dout) {
    if (g.requires_grad(ia)) g.accumulate(ia, dout * g.value(ib).transpose());
    if (g.requires_grad(ib)) g.accumulate(ib, g.value(ia).transpose() * dout);
  });
}

Var matmul_nt(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.cols()) {
    throw DimensionError("matmul_nt: inner dimensions differ " + shape_string(av) + " · " +
                         shape_string(bv) + "ᵀ");
  }
  Graph& g = *a.graph();
  const int ia = a.id(), ib = b.id();
  return g.emit("matmul_nt", av * bv.transpose(), {a, b}, [ia, ib](Graph& g, const Matrix& dout) {
    if (g.requires_grad(ia)) g.accumulate(ia, dout * g.value(ib));
    if (g.requires_grad(ib)) g.accumulate(ib, dout.transpose() * g.value(ia));
  });
}

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  const int ia = a.id(), ib = b.id();
  return a.graph()->emit("add", a.value() + b.value(), {a, b}, [ia, ib](Graph& g, const Matrix& dout) {
    g.accumulate(ia, dout);
    g.accumulate(ib, dout);
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a.value(), b.value());
  const int ia = a.id(), ib = b.id();
  return a.graph()->emit("sub", a.value() - b.value(), {a, b}, [ia, ib](Graph& g, const Matrix& dout) {
    g.accumulate(ia, dout);
    g.accumulate(ib, -dout);
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a.value(), b.value());
  const int ia = a.id(), ib = b.id();
  Matrix out = a.value().cwiseProduct(b.value());
  return a.graph()->emit("mul", std::move(out), {a, b}, [ia, ib](Graph& g, const Matrix& dout) {
    if (g.requires_grad(ia)) g.accumulate(ia, dout.cwiseProduct(g.value(ib)));
    if (g.requires_grad(ib)) g.accumulate(ib, dout.cwiseProduct(g.value(ia)));
  });
}

Var add_row(Var a, Var row) {
  const Matrix& av = a.value();
  const Matrix& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw DimensionError("add_row: row " + shape_string(rv) + " does not broadcast over " + shape_string(av));
  }
  const int ia = a.id(), ir = row.id();
  Matrix out = av.rowwise() + rv.row(0);
  return a.graph()->emit("add_row", std::move(out), {a, row}, [ia, ir](Graph& g, const Matrix& dout) {
    g.accumulate(ia, dout);
    if (g.requires_grad(ir)) g.accumulate(ir, dout.colwise().sum());
  });
}

Var scale(Var a, double factor) {
  const int ia = a.id();
  return a.graph()->emit("scale", a.value() * factor, {a}, [ia, factor](Graph& g, const Matrix& dout) {
    g.accumulate(ia, dout * factor);
  });
}

Var scale_by(Var s, Var a) {
  require_scalar("scale_by", s.value());
  const int is = s.id(), ia = a.id();
  const double sv = s.value()(0, 0);
  return a.graph()->emit("scale_by", a.value() * sv, {s, a}, [is, ia](Graph& g, const Matrix& dout) {
    if (g.requires_grad(is)) {
      Matrix ds(1, 1);
      ds(0, 0) = dout.cwiseProduct(g.value(ia)).sum();
      g.accumulate(is, ds);
    }
    if (g.requires_grad(ia)) g.accumulate(ia, dout * g.value(is)(0, 0));
  });
}

Var one_minus(Var a) {
  const int ia = a.id();
  Matrix out = (1.0 - a.value().array()).matrix();
  return a.graph()->emit("one_minus", std::move(out), {a}, [ia](Graph& g, const Matrix& dout) {
    g.accumulate(ia, -dout);
  });
}

Var exp(Var a) {
  const int ia = a.id();
  Matrix out = a.value().array().exp().matrix();
  const int io = static_cast<int>(a.graph()->size());
  return a.graph()->emit("exp", std::move(out), {a}, [ia, io](Graph& g, const Matrix& dout) {
    g.accumulate(ia, dout.cwiseProduct(g.value(io)));
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(Var a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  const int ia = a.id();
  return a.graph()->emit("gelu", std::move(out), {a}, [ia](Graph& g, const Matrix& dout) {
    const Matrix& x = g.value(ia);
    Matrix dx(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double v = x.data()[i];
      const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      dx.data()[i] = dout.data()[i] * d;
    }
    g.accumulate(ia, dx);
  });
}

Var sigmoid(Var a) {
  Matrix out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  const int ia = a.id();
  const int io = static_cast<int>(a.graph()->size());
  return a.graph()->emit("sigmoid", std::move(out), {a}, [ia, io](Graph& g, const Matrix& dout) {
    const Matrix& y = g.value(io);
    g.accumulate(ia, dout.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
  });
}

Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  const int ia = a.id();
  return a.graph()->emit("sum", std::move(out), {a}, [ia](Graph& g, const Matrix& dout) {
    const Matrix& x = g.value(ia);
    g.accumulate(ia, Matrix::Constant(x.rows(), x.cols(), dout(0, 0)));
  });
}

Var log_softmax_rows(Var logits) {
  const Matrix& x = logits.value();
  if (!x.allFinite()) throw ContractError("log_softmax_rows: non-finite logits");
  Matrix out = cocktail::log_softmax_rows(x);
  const int ia = logits.id();
  const int io = static_cast<int>(logits.graph()->size());
  return logits.graph()->emit("log_softmax_rows", std::move(out), {logits}, [ia, io](Graph& g, const Matrix& dout) {
    const Matrix& y = g.value(io);
    Matrix dx = dout;
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double total = dout.row(r).sum();
      dx.row(r).array() -= y.row(r).array().exp() * total;
    }
    g.accumulate(ia, dx);
  });
}

Var pick(Var a, std::span<const TokenId> cols) {
  const Matrix& x = a.value();
  if (static_cast<Eigen::Index>(cols.size()) != x.rows()) {
    throw DimensionError("pick: " + std::to_string(cols.size()) + " indices for " + shape_string(x));
  }
  Matrix out(x.rows(), 1);
  std::vector<TokenId> idx(cols.begin(), cols.end());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const TokenId c = idx[static_cast<std::size_t>(r)];
    if (c < 0 || c >= x.cols()) throw DimensionError("pick: column index " + std::to_string(c) + " out of range");
    out(r, 0) = x(r, c);
  }
  const int ia = a.id();
  return a.graph()->emit("pick", std::move(out), {a}, [ia, idx = std::move(idx)](Graph& g, const Matrix& dout) {
    const Matrix& x = g.value(ia);
    Matrix dx = Matrix::Zero(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) dx(r, idx[static_cast<std::size_t>(r)]) = dout(r, 0);
    g.accumulate(ia, dx);
  });
}

Var select_rows(Var a, std::span<const std::size_t> rows) {
  const Matrix& x = a.value();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  Matrix out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= static_cast<std::size_t>(x.rows())) {
      throw DimensionError("select_rows: row " + std::to_string(idx[r]) + " out of range for " + shape_string(x));
    }
    out.row(static_cast<Eigen::Index>(r)) = x.row(static_cast<Eigen::Index>(idx[r]));
  }
  const int ia = a.id();
  return a.graph()->emit("select_rows", std::move(out), {a}, [ia, idx = std::move(idx)](Graph& g, const Matrix& dout) {
    const Matrix& x = g.value(ia);
    Matrix dx = Matrix::Zero(x.rows(), x.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      dx.row(static_cast<Eigen::Index>(idx[r])) += dout.row(static_cast<Eigen::Index>(r));
    }
    g.accumulate(ia, dx);
  });
}

Var embedding(Var table, std::span<const TokenId> ids) {
  const Matrix& t = table.value();
  std::vector<TokenId> idx(ids.begin(), ids.end());
  Matrix out(static_cast<Eigen::Index>(idx.size()), t.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= t.rows()) {
      throw DimensionError("embedding: id " + std::to_string(idx[r]) + " out of range for table " + shape_string(t));
    }
    out.row(static_cast<Eigen::Index>(r)) = t.row(idx[r]);
  }
  const int it = table.id();
  return table.graph()->emit("embedding", std::move(out), {table}, [it, idx = std::move(idx)](Graph& g, const Matrix& dout) {
    const Matrix& t = g.value(it);
    Matrix dt = Matrix::Zero(t.rows(), t.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) dt.row(idx[r]) += dout.row(static_cast<Eigen::Index>(r));
    g.accumulate(it, dt);
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Matrix& xv = x.value();
  const Matrix& gv = gain.value();
  const Matrix& bv = bias.value();
  if (gv.rows() != 1 || gv.cols() != xv.cols() || bv.rows() != 1 || bv.cols() != xv.cols()) {
    throw DimensionError("layer_norm: gain " + shape_string(gv) + " / bias " + shape_string(bv) +
                         " incompatible with " + shape_string(xv));
  }
  const Eigen::Index n = xv.rows(), d = xv.cols();
  Matrix xhat(n, d);
  Vector inv_std(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  Matrix out = (xhat.array().rowwise() * gv.row(0).array()).rowwise() + bv.row(0).array();
  const int ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.graph()->emit(
      "layer_norm", std::move(out), {x, gain, bias},
      [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& g, const Matrix& dout) {
        if (g.requires_grad(ig)) g.accumulate(ig, dout.cwiseProduct(xhat).colwise().sum());
        if (g.requires_grad(ib)) g.accumulate(ib, dout.colwise().sum());
        if (!g.requires_grad(ix)) return;
        const Matrix dxhat = (dout.array().rowwise() * g.value(ig).row(0).array()).matrix();
        Matrix dx(dxhat.rows(), dxhat.cols());
        for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
          const double m1 = dxhat.row(r).mean();
          const double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
          dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
        }
        g.accumulate(ix, dx);
      });
}

Var causal_attention(Var q, Var k, Var v, int n_heads) {
  const Matrix& qv = q.value();
  const Matrix& kv = k.value();
  const Matrix& vv = v.value();
  require_same_shape("causal_attention(q,k)", qv, kv);
  require_same_shape("causal_attention(q,v)", qv, vv);
  if (n_heads < 1 || qv.cols() % n_heads != 0) {
    throw DimensionError("causal_attention: width " + std::to_string(qv.cols()) + " not divisible by " +
                         std::to_string(n_heads) + " heads");
  }
  const Eigen::Index t = qv.rows();
  const Eigen::Index dh = qv.cols() / n_heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix out(t, qv.cols());
  std::vector<Matrix> probs(static_cast<std::size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    Matrix s = (qv.middleCols(h * dh, dh) * kv.middleCols(h * dh, dh).transpose()) * scale_factor;
    for (Eigen::Index i = 0; i < t; ++i) {
      const double m = s.row(i).head(i + 1).maxCoeff();
      double total = 0.0;
      for (Eigen::Index j = 0; j <= i; ++j) {
        s(i, j) = std::exp(s(i, j) - m);
        total += s(i, j);
      }
      s.row(i).head(i + 1) /= total;
      s.row(i).tail(t - i - 1).setZero();
    }
    out.middleCols(h * dh, dh).noalias() = s * vv.middleCols(h * dh, dh);
    probs[static_cast<std::size_t>(h)] = std::move(s);
  }
  const int iq = q.id(), ik = k.id(), iv = v.id();
  return q.graph()->emit(
      "causal_attention", std::move(out), {q, k, v},
      [iq, ik, iv, n_heads, dh, scale_factor, probs = std::move(probs)](Graph& g, const Matrix& dout) {
        const Matrix& qv = g.value(iq);
        const Matrix& kv = g.value(ik);
        const Matrix& vv = g.value(iv);
        Matrix dq = Matrix::Zero(qv.rows(), qv.cols());
        Matrix dk = Matrix::Zero(kv.rows(), kv.cols());
        Matrix dv = Matrix::Zero(vv.rows(), vv.cols());
        for (int h = 0; h < n_heads; ++h) {
          const Matrix& p = probs[static_cast<std::size_t>(h)];
          const auto doh = dout.middleCols(h * dh, dh);
          dv.middleCols(h * dh, dh).noalias() = p.transpose() * doh;
          Matrix dp = doh * vv.middleCols(h * dh, dh).transpose();
          const Vector rowdot = dp.cwiseProduct(p).rowwise().sum();
          Matrix ds = (p.array() * (dp.colwise() - rowdot).array()).matrix() * scale_factor;
          dq.middleCols(h * dh, dh).noalias() = ds * kv.middleCols(h * dh, dh);
          dk.middleCols(h * dh, dh).noalias() = ds.transpose() * qv.middleCols(h * dh, dh);
        }
        g.accumulate(iq, dq);
        g.accumulate(ik, dk);
        g.accumulate(iv, dv);
      });
}

double check_gradients(const LossBuilder& loss_fn, std::vector<Matrix> params, double epsilon,
                       std::size_t samples, std::uint64_t seed) {
  if (!(epsilon > 0.0)) throw ContractError("check_gradients: epsilon must be positive");

  std::vector<Matrix> analytic;
  {
    Graph g;
    std::vector<Var> vars;
    for (const Matrix& p : params) vars.push_back(g.parameter_ref(p));
    Var loss = loss_fn(g, vars);
    g.backward(loss);
    for (const Var& v : vars) analytic.push_back(v.grad());
  }

  auto eval = [&]() {
    Graph g;
    std::vector<Var> vars;
    for (const Matrix& p : params) vars.push_back(g.parameter_ref(p));
    return loss_fn(g, vars).value()(0, 0);
  };

  std::vector<std::pair<std::size_t, Eigen::Index>> coords;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (Eigen::Index j = 0; j < params[i].size(); ++j) coords.emplace_back(i, j);
  }
  if (samples != 0 && samples < coords.size()) {
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(samples);
  }

  double worst = 0.0;
  for (const auto& [pi, j] : coords) {
    double& slot = params[pi].data()[j];
    const double saved = slot;
    slot = saved + epsilon;
    const double up = eval();
    slot = saved - epsilon;
    const double down = eval();
    slot = saved;
    const double central = (up - down) / (2.0 * epsilon);
    const double a = analytic[pi].data()[j];
    const double denom = std::max({std::abs(a), std::abs(central), 1e-8});
    worst = std::max(worst, std::abs(a - central) / denom);
  }
  return worst;
}

}  // namespace cocktail
