#include "gridfold/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>
#include <utility>

namespace gridfold::ad {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw UsageError(msg);
}

void require_same_tape(Var a, Var b) {
  require(a.tape != nullptr && a.tape == b.tape, "operands live on different tapes");
}

// c = a(n,k) . b(k,m). Row-parallel with a fixed per-element accumulation
// order, so results do not depend on the thread count.
void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
  const std::int64_t ni = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static) if (n * k * m > 16384)
  for (std::int64_t i = 0; i < ni; ++i) {
    double* ci = c + static_cast<std::size_t>(i) * m;
    std::memset(ci, 0, m * sizeof(double));
    const double* ai = a + static_cast<std::size_t>(i) * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = ai[kk];
      const double* bk = b + kk * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bk[j];
    }
  }
}

// c = a(n,m) . b(k,m)^T -> (n,k)
void gemm_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t m,
             std::size_t k) {
  const std::int64_t ni = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static) if (n * k * m > 16384)
  for (std::int64_t i = 0; i < ni; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * m;
    double* ci = c + static_cast<std::size_t>(i) * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double* bk = b + kk * m;
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) acc += ai[j] * bk[j];
      ci[kk] = acc;
    }
  }
}

// c = a(n,k)^T . b(n,m) -> (k,m)
void gemm_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
  const std::int64_t ki = static_cast<std::int64_t>(k);
#pragma omp parallel for schedule(static) if (n * k * m > 16384)
  for (std::int64_t kk = 0; kk < ki; ++kk) {
    double* ck = c + static_cast<std::size_t>(kk) * m;
    std::memset(ck, 0, m * sizeof(double));
    for (std::size_t i = 0; i < n; ++i) {
      const double av = a[i * k + static_cast<std::size_t>(kk)];
      const double* bi = b + i * m;
      for (std::size_t j = 0; j < m; ++j) ck[j] += av * bi[j];
    }
  }
}

bool is_scalar_like(const Tensor& t) { return t.size() == 1; }

}  // namespace

const Tensor& Gradients::at(Var v) const { return at(v.id); }

const Tensor& Gradients::at(int id) const {
  auto it = by_id_.find(id);
  if (it == by_id_.end()) throw UsageError("no gradient recorded for node " + std::to_string(id));
  return it->second;
}

const Tensor& Tape::value(Var v) const {
  require(v.tape == this, "Var does not belong to this tape");
  return value(v.id);
}

Var Tape::constant(Tensor v) {
  if (!v.all_finite()) throw NumericError("non-finite constant placed on tape");
  nodes_.push_back(Node{std::move(v), {}, {}, false});
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::param(Tensor v) {
  if (!v.all_finite()) throw NumericError("non-finite parameter placed on tape");
  nodes_.push_back(Node{std::move(v), {}, {}, true});
  int id = static_cast<int>(nodes_.size() - 1);
  param_ids_.push_back(id);
  return Var{this, id};
}

Var Tape::record(const char* op_name, Tensor value, std::vector<int> parents,
                 BackwardFn backward) {
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite output of op '") + op_name + "'");
  }
  bool tracked = false;
  for (int p : parents) {
    require(p >= 0 && p < static_cast<int>(nodes_.size()),
            std::string("op '") + op_name + "' references an unknown node");
    tracked = tracked || nodes_[static_cast<std::size_t>(p)].tracked;
  }
  nodes_.push_back(Node{std::move(value), std::move(parents),
                        tracked ? std::move(backward) : BackwardFn{}, tracked});
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Tensor& BackwardCtx::buffer(int id, const Shape& shape) {
  auto idx = static_cast<std::size_t>(id);
  if (!present[idx]) {
    grads[idx] = Tensor::zeros(shape);
    present[idx] = 1;
  }
  return grads[idx];
}

void BackwardCtx::add(int id, const Tensor& g) {
  Tensor& buf = buffer(id, g.shape());
  if (!buf.same_shape(g)) {
    throw UsageError("gradient shape mismatch while accumulating");
  }
  double* dst = buf.data();
  const double* src = g.data();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
}

Gradients Tape::backward(Var loss) const {
  require(loss.tape == this, "loss was not produced on this tape");
  require(loss.id >= 0 && loss.id < static_cast<int>(nodes_.size()), "loss node id out of range");
  require(value(loss.id).size() == 1, "loss must be a scalar");

  std::vector<Tensor> grads(nodes_.size());
  std::vector<char> present(nodes_.size(), 0);
  grads[static_cast<std::size_t>(loss.id)] = Tensor::full(value(loss.id).shape(), 1.0);
  present[static_cast<std::size_t>(loss.id)] = 1;

  for (int id = loss.id; id >= 0; --id) {
    const Node& node = nodes_[static_cast<std::size_t>(id)];
    if (!present[static_cast<std::size_t>(id)] || !node.backward) continue;
    BackwardCtx ctx{*this, grads[static_cast<std::size_t>(id)], grads, present, id};
    node.backward(ctx);
  }

  Gradients out;
  for (int pid : param_ids_) {
    auto idx = static_cast<std::size_t>(pid);
    if (present[idx]) {
      out.by_id_[pid] = std::move(grads[idx]);
    } else {
      out.by_id_[pid] = Tensor::zeros(nodes_[idx].value.shape());
    }
  }
  return out;
}

// ---- op implementations -----------------------------------------------

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  Tape& t = *a.tape;
  const Tensor& av = t.value(a.id);
  const Tensor& bv = t.value(b.id);
  require(av.rank() == 2 && bv.rank() == 2 && av.cols() == bv.rows(),
          "matmul shape mismatch: " + av.shape_str() + " x " + bv.shape_str());
  const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
  Tensor out({n, m});
  gemm_nn(av.data(), bv.data(), out.data(), n, k, m);
  int ai = a.id, bi = b.id;
  return t.record("matmul", std::move(out), {ai, bi}, [ai, bi, n, k, m](BackwardCtx& ctx) {
    if (ctx.needs(ai)) {
      Tensor& ga = ctx.buffer(ai, {n, k});
      Tensor tmp({n, k});
      gemm_nt(ctx.gout.data(), ctx.value(bi).data(), tmp.data(), n, m, k);
      for (std::size_t i = 0; i < tmp.size(); ++i) ga[i] += tmp[i];
    }
    if (ctx.needs(bi)) {
      Tensor& gb = ctx.buffer(bi, {k, m});
      Tensor tmp({k, m});
      gemm_tn(ctx.value(ai).data(), ctx.gout.data(), tmp.data(), n, k, m);
      for (std::size_t i = 0; i < tmp.size(); ++i) gb[i] += tmp[i];
    }
  });
}

namespace {

// Shared skeleton for elementwise binaries with scalar broadcast on either
// side. fwd(x, y) -> value; bwd fills per-operand local gradients.
template <class Fwd, class DA, class DB>
Var binary_op(const char* name, Var a, Var b, Fwd fwd, DA da, DB db) {
  require_same_tape(a, b);
  Tape& t = *a.tape;
  const Tensor& av = t.value(a.id);
  const Tensor& bv = t.value(b.id);
  const bool a_scalar = is_scalar_like(av);
  const bool b_scalar = is_scalar_like(bv);
  require(av.same_shape(bv) || a_scalar || b_scalar,
          std::string(name) + " shape mismatch: " + av.shape_str() + " vs " + bv.shape_str());
  const Tensor& big = a_scalar && !b_scalar ? bv : av;
  Tensor out(big.shape());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[a_scalar ? 0 : i];
    const double y = bv[b_scalar ? 0 : i];
    out[i] = fwd(x, y);
  }
  int ai = a.id, bi = b.id;
  return t.record(name, std::move(out), {ai, bi},
                  [ai, bi, a_scalar, b_scalar, da, db](BackwardCtx& ctx) {
                    const Tensor& av2 = ctx.value(ai);
                    const Tensor& bv2 = ctx.value(bi);
                    const std::size_t n2 = ctx.gout.size();
                    if (ctx.needs(ai)) {
                      Tensor& ga = ctx.buffer(ai, av2.shape());
                      for (std::size_t i = 0; i < n2; ++i) {
                        const double x = av2[a_scalar ? 0 : i];
                        const double y = bv2[b_scalar ? 0 : i];
                        ga[a_scalar ? 0 : i] += da(x, y) * ctx.gout[i];
                      }
                    }
                    if (ctx.needs(bi)) {
                      Tensor& gb = ctx.buffer(bi, bv2.shape());
                      for (std::size_t i = 0; i < n2; ++i) {
                        const double x = av2[a_scalar ? 0 : i];
                        const double y = bv2[b_scalar ? 0 : i];
                        gb[b_scalar ? 0 : i] += db(x, y) * ctx.gout[i];
                      }
                    }
                  });
}

// Elementwise unary: fwd(x) -> value, dfd(x, fx) -> local derivative.
template <class Fwd, class Dfd>
Var unary_op(const char* name, Var a, Fwd fwd, Dfd dfd) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a.id);
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  int ai = a.id;
  int self_capture = -1;
  Var v = t.record(name, std::move(out), {ai}, [ai, &self_capture, dfd](BackwardCtx& ctx) {
    if (!ctx.needs(ai)) return;
    const Tensor& av2 = ctx.value(ai);
    const Tensor& ov = ctx.value(self_capture);
    Tensor& ga = ctx.buffer(ai, av2.shape());
    for (std::size_t i = 0; i < av2.size(); ++i) {
      ga[i] += dfd(av2[i], ov[i]) * ctx.gout[i];
    }
  });
  self_capture = v.id;
  return v;
}

}  // namespace

Var add(Var a, Var b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Var div(Var a, Var b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Var squared_diff(Var a, Var b) {
  return binary_op(
      "squared_diff", a, b, [](double x, double y) { return (x - y) * (x - y); },
      [](double x, double y) { return 2.0 * (x - y); },
      [](double x, double y) { return -2.0 * (x - y); });
}

Var scale(Var a, double s) {
  return unary_op(
      "scale", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  return unary_op(
      "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var neg(Var a) { return scale(a, -1.0); }

Var relu(Var a) {
  return unary_op(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Var a) {
  return unary_op(
      "sigmoid", a,
      [](double x) {
        // Split on sign to avoid overflow in exp().
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double fx) { return fx * (1.0 - fx); });
}

Var exp(Var a) {
  return unary_op(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double fx) { return fx; });
}

Var log(Var a) {
  return unary_op(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var abs(Var a) {
  // Subgradient 0 at x == 0.
  return unary_op(
      "abs", a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var clamp_min(Var a, double lo) {
  return unary_op(
      "clamp_min", a, [lo](double x) { return x > lo ? x : lo; },
      [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
}

Var add_bias(Var m, Var bias) {
  require_same_tape(m, bias);
  Tape& t = *m.tape;
  const Tensor& mv = t.value(m.id);
  const Tensor& bv = t.value(bias.id);
  require(mv.rank() == 2 && bv.rank() == 1 && bv.rows() == mv.cols(),
          "add_bias shape mismatch: " + mv.shape_str() + " + " + bv.shape_str());
  const std::size_t n = mv.rows(), c = mv.cols();
  Tensor out({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = mv[i * c + j] + bv[j];
  }
  int mi = m.id, bi = bias.id;
  return t.record("add_bias", std::move(out), {mi, bi}, [mi, bi, n, c](BackwardCtx& ctx) {
    if (ctx.needs(mi)) ctx.add(mi, ctx.gout);
    if (ctx.needs(bi)) {
      Tensor& gb = ctx.buffer(bi, {c});
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) gb[j] += ctx.gout[i * c + j];
      }
    }
  });
}

Var concat_cols(Var a, Var b) {
  require_same_tape(a, b);
  Tape& t = *a.tape;
  const Tensor& av = t.value(a.id);
  const Tensor& bv = t.value(b.id);
  require(av.rank() == 2 && bv.rank() == 2 && av.rows() == bv.rows(),
          "concat_cols shape mismatch: " + av.shape_str() + " ++ " + bv.shape_str());
  const std::size_t n = av.rows(), p = av.cols(), q = bv.cols();
  Tensor out({n, p + q});
  for (std::size_t i = 0; i < n; ++i) {
    double* row = out.data() + i * (p + q);
    std::memcpy(row, av.data() + i * p, p * sizeof(double));
    std::memcpy(row + p, bv.data() + i * q, q * sizeof(double));
  }
  int ai = a.id, bi = b.id;
  return t.record("concat_cols", std::move(out), {ai, bi}, [ai, bi, n, p, q](BackwardCtx& ctx) {
    if (ctx.needs(ai)) {
      Tensor& ga = ctx.buffer(ai, {n, p});
      for (std::size_t i = 0; i < n; ++i) {
        const double* row = ctx.gout.data() + i * (p + q);
        for (std::size_t j = 0; j < p; ++j) ga[i * p + j] += row[j];
      }
    }
    if (ctx.needs(bi)) {
      Tensor& gb = ctx.buffer(bi, {n, q});
      for (std::size_t i = 0; i < n; ++i) {
        const double* row = ctx.gout.data() + i * (p + q);
        for (std::size_t j = 0; j < q; ++j) gb[i * q + j] += row[p + j];
      }
    }
  });
}

Var norm_rows(Var a) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a.id);
  require(av.rank() == 2, "norm_rows expects a rank-2 tensor, got " + av.shape_str());
  const std::size_t n = av.rows(), d = av.cols();
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double x = av[i * d + j];
      acc += x * x;
    }
    out[i] = std::sqrt(acc);
  }
  int ai = a.id;
  int self = -1;
  Var v = t.record("norm_rows", std::move(out), {ai}, [ai, &self, n, d](BackwardCtx& ctx) {
    if (!ctx.needs(ai)) return;
    const Tensor& av2 = ctx.value(ai);
    const Tensor& nv = ctx.value(self);
    Tensor& ga = ctx.buffer(ai, {n, d});
    for (std::size_t i = 0; i < n; ++i) {
      const double norm = nv[i];
      if (norm == 0.0) continue;  // subgradient 0 at the origin
      const double g = ctx.gout[i] / norm;
      for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += g * av2[i * d + j];
    }
  });
  self = v.id;
  return v;
}

Var sqnorm_rows(Var a) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a.id);
  require(av.rank() == 2, "sqnorm_rows expects a rank-2 tensor, got " + av.shape_str());
  const std::size_t n = av.rows(), d = av.cols();
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double x = av[i * d + j];
      acc += x * x;
    }
    out[i] = acc;
  }
  int ai = a.id;
  return t.record("sqnorm_rows", std::move(out), {ai}, [ai, n, d](BackwardCtx& ctx) {
    if (!ctx.needs(ai)) return;
    const Tensor& av2 = ctx.value(ai);
    Tensor& ga = ctx.buffer(ai, {n, d});
    for (std::size_t i = 0; i < n; ++i) {
      const double g = 2.0 * ctx.gout[i];
      for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += g * av2[i * d + j];
    }
  });
}

Var max_over_rows(Var a) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a.id);
  require(av.rank() == 2 && av.rows() >= 1,
          "max_over_rows expects a non-empty rank-2 tensor, got " + av.shape_str());
  const std::size_t n = av.rows(), d = av.cols();
  Tensor out({d});
  std::vector<std::uint32_t> argmax(d, 0);
  for (std::size_t j = 0; j < d; ++j) {
    double best = av[j];
    std::uint32_t bi = 0;
    for (std::size_t i = 1; i < n; ++i) {
      const double x = av[i * d + j];
      if (x > best) {  // ties keep the lowest row index
        best = x;
        bi = static_cast<std::uint32_t>(i);
      }
    }
    out[j] = best;
    argmax[j] = bi;
  }
  int ai = a.id;
  return t.record("max_over_rows", std::move(out), {ai},
                  [ai, n, d, argmax = std::move(argmax)](BackwardCtx& ctx) {
                    if (!ctx.needs(ai)) return;
                    Tensor& ga = ctx.buffer(ai, {n, d});
                    for (std::size_t j = 0; j < d; ++j) {
                      ga[static_cast<std::size_t>(argmax[j]) * d + j] += ctx.gout[j];
                    }
                  });
}

Var mean_all(Var a) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a.id);
  require(av.size() >= 1, "mean_all of an empty tensor");
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) acc += av[i];
  const double inv = 1.0 / static_cast<double>(av.size());
  int ai = a.id;
  return t.record("mean_all", Tensor::scalar(acc * inv), {ai}, [ai, inv](BackwardCtx& ctx) {
    if (!ctx.needs(ai)) return;
    const Tensor& av2 = ctx.value(ai);
    Tensor& ga = ctx.buffer(ai, av2.shape());
    const double g = ctx.gout[0] * inv;
    for (std::size_t i = 0; i < av2.size(); ++i) ga[i] += g;
  });
}

Var sum_all(Var a) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a.id);
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) acc += av[i];
  int ai = a.id;
  return t.record("sum_all", Tensor::scalar(acc), {ai}, [ai](BackwardCtx& ctx) {
    if (!ctx.needs(ai)) return;
    const Tensor& av2 = ctx.value(ai);
    Tensor& ga = ctx.buffer(ai, av2.shape());
    for (std::size_t i = 0; i < av2.size(); ++i) ga[i] += ctx.gout[0];
  });
}

Var softmax_rows(Var a) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a.id);
  require(av.rank() == 2 && av.cols() >= 1,
          "softmax_rows expects a rank-2 tensor, got " + av.shape_str());
  const std::size_t n = av.rows(), k = av.cols();
  Tensor out({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = av.data() + i * k;
    double mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    double* orow = out.data() + i * k;
    for (std::size_t j = 0; j < k; ++j) {
      orow[j] = std::exp(row[j] - mx);
      denom += orow[j];
    }
    for (std::size_t j = 0; j < k; ++j) orow[j] /= denom;
  }
  int ai = a.id;
  int self = -1;
  Var v = t.record("softmax_rows", std::move(out), {ai}, [ai, &self, n, k](BackwardCtx& ctx) {
    if (!ctx.needs(ai)) return;
    const Tensor& sv = ctx.value(self);
    Tensor& ga = ctx.buffer(ai, {n, k});
    for (std::size_t i = 0; i < n; ++i) {
      const double* s = sv.data() + i * k;
      const double* g = ctx.gout.data() + i * k;
      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j) dot += g[j] * s[j];
      for (std::size_t j = 0; j < k; ++j) ga[i * k + j] += s[j] * (g[j] - dot);
    }
  });
  self = v.id;
  return v;
}

Var gather_rows(Var a, std::vector<std::uint32_t> idx) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a.id);
  require(av.rank() == 2, "gather_rows expects a rank-2 tensor, got " + av.shape_str());
  const std::size_t n = av.rows(), d = av.cols(), r = idx.size();
  for (std::uint32_t i : idx) {
    require(i < n, "gather_rows index " + std::to_string(i) + " out of range");
  }
  Tensor out({r, d});
  for (std::size_t i = 0; i < r; ++i) {
    std::memcpy(out.data() + i * d, av.data() + static_cast<std::size_t>(idx[i]) * d,
                d * sizeof(double));
  }
  int ai = a.id;
  return t.record("gather_rows", std::move(out), {ai},
                  [ai, n, d, r, idx = std::move(idx)](BackwardCtx& ctx) {
                    if (!ctx.needs(ai)) return;
                    Tensor& ga = ctx.buffer(ai, {n, d});
                    for (std::size_t i = 0; i < r; ++i) {
                      double* dst = ga.data() + static_cast<std::size_t>(idx[i]) * d;
                      const double* src = ctx.gout.data() + i * d;
                      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                    }
                  });
}

Var tile_rows(Var v, std::size_t n) {
  Tape& t = *v.tape;
  const Tensor& vv = t.value(v.id);
  require(vv.rank() == 1, "tile_rows expects a rank-1 tensor, got " + vv.shape_str());
  require(n >= 1, "tile_rows needs n >= 1");
  const std::size_t d = vv.rows();
  Tensor out({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    std::memcpy(out.data() + i * d, vv.data(), d * sizeof(double));
  }
  int vi = v.id;
  return t.record("tile_rows", std::move(out), {vi}, [vi, n, d](BackwardCtx& ctx) {
    if (!ctx.needs(vi)) return;
    Tensor& gv = ctx.buffer(vi, {d});
    for (std::size_t i = 0; i < n; ++i) {
      const double* row = ctx.gout.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) gv[j] += row[j];
    }
  });
}

Var scale_rows(Var m, Var v) {
  require_same_tape(m, v);
  Tape& t = *m.tape;
  const Tensor& mv = t.value(m.id);
  const Tensor& vv = t.value(v.id);
  require(mv.rank() == 2 && vv.rank() == 1 && vv.rows() == mv.rows(),
          "scale_rows shape mismatch: " + mv.shape_str() + " by " + vv.shape_str());
  const std::size_t n = mv.rows(), d = mv.cols();
  Tensor out({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = mv[i * d + j] * vv[i];
  }
  int mi = m.id, vi = v.id;
  return t.record("scale_rows", std::move(out), {mi, vi}, [mi, vi, n, d](BackwardCtx& ctx) {
    const Tensor& mv2 = ctx.value(mi);
    const Tensor& vv2 = ctx.value(vi);
    if (ctx.needs(mi)) {
      Tensor& gm = ctx.buffer(mi, {n, d});
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) gm[i * d + j] += ctx.gout[i * d + j] * vv2[i];
      }
    }
    if (ctx.needs(vi)) {
      Tensor& gv = ctx.buffer(vi, {n});
      for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += ctx.gout[i * d + j] * mv2[i * d + j];
        gv[i] += acc;
      }
    }
  });
}

Var sum_groups(Var m, std::size_t group_size) {
  Tape& t = *m.tape;
  const Tensor& mv = t.value(m.id);
  require(mv.rank() == 2 && group_size >= 1 && mv.rows() % group_size == 0,
          "sum_groups: row count " + std::to_string(mv.rows()) + " not divisible by group size " +
              std::to_string(group_size));
  const std::size_t g = mv.rows() / group_size, d = mv.cols();
  Tensor out({g, d});
  for (std::size_t gi = 0; gi < g; ++gi) {
    double* orow = out.data() + gi * d;
    for (std::size_t r = 0; r < group_size; ++r) {
      const double* row = mv.data() + (gi * group_size + r) * d;
      for (std::size_t j = 0; j < d; ++j) orow[j] += row[j];
    }
  }
  int mi = m.id;
  return t.record("sum_groups", std::move(out), {mi}, [mi, g, d, group_size](BackwardCtx& ctx) {
    if (!ctx.needs(mi)) return;
    Tensor& gm = ctx.buffer(mi, {g * group_size, d});
    for (std::size_t gi = 0; gi < g; ++gi) {
      const double* grow = ctx.gout.data() + gi * d;
      for (std::size_t r = 0; r < group_size; ++r) {
        double* dst = gm.data() + (gi * group_size + r) * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += grow[j];
      }
    }
  });
}

}  // namespace gridfold::ad
