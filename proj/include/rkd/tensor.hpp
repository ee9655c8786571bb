#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rkd/common.hpp"

namespace rkd {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

struct TensorData;
using TensorDataPtr = std::shared_ptr<TensorData>;

// Backward rule: given the upstream gradient of this node, accumulate into
// the parents' gradient buffers (one preallocated buffer per parent).
using VjpFn =
    std::function<void(const std::vector<double>& upstream, const std::vector<std::vector<double>*>& parent_grads)>;

struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // allocated on first backward, accumulates across calls
  bool requires_grad = false;
  const char* op = nullptr;  // null for leaves
  std::vector<TensorDataPtr> parents;
  VjpFn vjp;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(TensorDataPtr d) : d_(std::move(d)) {}

  static Tensor zeros(Shape shape) {
    auto d = std::make_shared<TensorData>();
    d->values.assign(numel(shape), 0.0);
    d->shape = std::move(shape);
    return Tensor(d);
  }

  static Tensor full(Shape shape, double v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.d_->values.begin(), t.d_->values.end(), v);
    return t;
  }

  static Tensor from_values(Shape shape, std::vector<double> v) {
    if (numel(shape) != v.size())
      throw ValueError(format_msg("tensor: %zu values do not fill shape %s", v.size(),
                                  shape_str(shape).c_str()));
    auto d = std::make_shared<TensorData>();
    d->shape = std::move(shape);
    d->values = std::move(v);
    return Tensor(d);
  }

  static Tensor scalar(double v) { return from_values({}, {v}); }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  std::size_t size() const { return d_->values.size(); }
  std::vector<double>& values() { return d_->values; }
  const std::vector<double>& values() const { return d_->values; }
  bool has_grad() const { return !d_->grad.empty(); }
  const std::vector<double>& grad() const { return d_->grad; }

  double item() const {
    if (d_->values.size() != 1)
      throw ValueError(format_msg("item: tensor %s is not scalar", shape_str(d_->shape).c_str()));
    return d_->values[0];
  }

  bool requires_grad() const { return d_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    d_->requires_grad = v;
    return *this;
  }

  void zero_grad() { std::fill(d_->grad.begin(), d_->grad.end(), 0.0); }

  // Value-only copy: drops lineage, grad and the requires_grad flag.
  Tensor detach() const { return from_values(d_->shape, d_->values); }

  bool has_lineage() const { return d_->op != nullptr; }
  const TensorDataPtr& data() const { return d_; }

 private:
  TensorDataPtr d_;
};

namespace detail {

inline void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericError(format_msg("%s: produced non-finite value", op));
}

inline Tensor make_result(Shape shape, std::vector<double> values, const char* op,
                          std::vector<Tensor> parents, VjpFn vjp) {
  check_finite(values, op);
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  d->values = std::move(values);
  bool needs = false;
  for (const Tensor& p : parents) needs |= p.requires_grad();
  if (needs) {
    d->requires_grad = true;
    d->op = op;
    d->parents.reserve(parents.size());
    for (const Tensor& p : parents) d->parents.push_back(p.data());
    d->vjp = std::move(vjp);
  }
  return Tensor(d);
}

}  // namespace detail

// ---- op catalog ------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
    throw ValueError(format_msg("matmul: incompatible shapes %s and %s",
                                shape_str(a.shape()).c_str(), shape_str(b.shape()).c_str()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t l = 0; l < k; ++l) {
      const double ail = av[i * k + l];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += ail * bv[l * n + j];
    }
  auto ad = a.data();
  auto bd = b.data();
  return detail::make_result(
      {m, n}, std::move(out), "matmul", {a, b},
      [m, k, n, ad, bd](const std::vector<double>& up, const std::vector<std::vector<double>*>& pg) {
        std::vector<double>& da = *pg[0];
        std::vector<double>& db = *pg[1];
        const auto& av = ad->values;
        const auto& bv = bd->values;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double u = up[i * n + j];
            if (u == 0.0) continue;
            for (std::size_t l = 0; l < k; ++l) {
              da[i * k + l] += u * bv[l * n + j];
              db[l * n + j] += u * av[i * k + l];
            }
          }
      });
}

// Same-shape add, or rhs broadcast over the leading dims of lhs (the trailing
// dims of lhs must equal the full shape of rhs).
inline Tensor add(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool same = sa == sb;
  bool broadcast = !same && sa.size() > sb.size() &&
                   std::equal(sb.begin(), sb.end(), sa.end() - static_cast<long>(sb.size()));
  if (!same && !broadcast)
    throw ValueError(format_msg("add: incompatible shapes %s and %s", shape_str(sa).c_str(),
                                shape_str(sb).c_str()));
  const std::size_t rest = numel(sb);
  const std::size_t lead = same ? 1 : numel(sa) / std::max<std::size_t>(rest, 1);
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  } else {
    for (std::size_t i = 0; i < lead; ++i)
      for (std::size_t r = 0; r < rest; ++r) out[i * rest + r] += bv[r];
  }
  return detail::make_result(
      sa, std::move(out), "add", {a, b},
      [same, lead, rest](const std::vector<double>& up, const std::vector<std::vector<double>*>& pg) {
        std::vector<double>& da = *pg[0];
        std::vector<double>& db = *pg[1];
        for (std::size_t i = 0; i < up.size(); ++i) da[i] += up[i];
        if (same) {
          for (std::size_t i = 0; i < up.size(); ++i) db[i] += up[i];
        } else {
          for (std::size_t i = 0; i < lead; ++i)
            for (std::size_t r = 0; r < rest; ++r) db[r] += up[i * rest + r];
        }
      });
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.values());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  auto xd = x.data();
  return detail::make_result(
      x.shape(), std::move(out), "relu", {x},
      [xd](const std::vector<double>& up, const std::vector<std::vector<double>*>& pg) {
        std::vector<double>& dx = *pg[0];
        for (std::size_t i = 0; i < up.size(); ++i)
          if (xd->values[i] > 0.0) dx[i] += up[i];
      });
}

// Valid-padding stride-1 convolution: x [B,Ci,H,W], w [Co,Ci,kh,kw], bias [Co].
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.shape().size() != 4 || w.shape().size() != 4 || x.shape()[1] != w.shape()[1])
    throw ValueError(format_msg("conv2d: incompatible shapes %s and %s",
                                shape_str(x.shape()).c_str(), shape_str(w.shape()).c_str()));
  const std::size_t B = x.shape()[0], Ci = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const std::size_t Co = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  if (H < kh || W < kw)
    throw ValueError(format_msg("conv2d: kernel %s larger than input %s",
                                shape_str(w.shape()).c_str(), shape_str(x.shape()).c_str()));
  if (bias.shape() != Shape{Co})
    throw ValueError(format_msg("conv2d: bias shape %s does not match %zu channels",
                                shape_str(bias.shape()).c_str(), Co));
  const std::size_t Ho = H - kh + 1, Wo = W - kw + 1;
  std::vector<double> out(B * Co * Ho * Wo, 0.0);
  const auto& xv = x.values();
  const auto& wv = w.values();
  const auto& bv = bias.values();
  auto xi = [Ci, H, W](std::size_t b, std::size_t c, std::size_t i, std::size_t j) {
    return ((b * Ci + c) * H + i) * W + j;
  };
  auto wi = [Ci, kh, kw](std::size_t o, std::size_t c, std::size_t i, std::size_t j) {
    return ((o * Ci + c) * kh + i) * kw + j;
  };
  auto oi = [Co, Ho, Wo](std::size_t b, std::size_t o, std::size_t i, std::size_t j) {
    return ((b * Co + o) * Ho + i) * Wo + j;
  };
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < Co; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = bv[o];
          for (std::size_t c = 0; c < Ci; ++c)
            for (std::size_t p = 0; p < kh; ++p)
              for (std::size_t q = 0; q < kw; ++q)
                acc += xv[xi(b, c, i + p, j + q)] * wv[wi(o, c, p, q)];
          out[oi(b, o, i, j)] = acc;
        }
  auto xd = x.data();
  auto wd = w.data();
  return detail::make_result(
      {B, Co, Ho, Wo}, std::move(out), "conv2d", {x, w, bias},
      [=](const std::vector<double>& up, const std::vector<std::vector<double>*>& pg) {
        std::vector<double>& dx = *pg[0];
        std::vector<double>& dw = *pg[1];
        std::vector<double>& db = *pg[2];
        const auto& xv2 = xd->values;
        const auto& wv2 = wd->values;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t o = 0; o < Co; ++o)
            for (std::size_t i = 0; i < Ho; ++i)
              for (std::size_t j = 0; j < Wo; ++j) {
                const double u = up[oi(b, o, i, j)];
                if (u == 0.0) continue;
                db[o] += u;
                for (std::size_t c = 0; c < Ci; ++c)
                  for (std::size_t p = 0; p < kh; ++p)
                    for (std::size_t q = 0; q < kw; ++q) {
                      dx[xi(b, c, i + p, j + q)] += u * wv2[wi(o, c, p, q)];
                      dw[wi(o, c, p, q)] += u * xv2[xi(b, c, i + p, j + q)];
                    }
              }
      });
}

namespace detail {
inline std::pair<std::size_t, std::size_t> row_view(const Shape& shape, const char* op) {
  if (shape.empty())
    throw ValueError(format_msg("%s: needs rank >= 1, got scalar", op));
  const std::size_t cols = shape.back();
  return {numel(shape) / cols, cols};
}
}  // namespace detail

// Softmax over the last axis, stabilized by max subtraction.
inline Tensor softmax(const Tensor& x) {
  auto [rows, cols] = detail::row_view(x.shape(), "softmax");
  std::vector<double> out(x.values());
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sum += (row[c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) row[c] /= sum;
  }
  std::vector<double> probs = out;  // captured for the backward rule
  return detail::make_result(
      x.shape(), std::move(out), "softmax", {x},
      [rows, cols, probs = std::move(probs)](const std::vector<double>& up,
                                             const std::vector<std::vector<double>*>& pg) {
        std::vector<double>& dx = *pg[0];
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) dot += up[r * cols + c] * probs[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c)
            dx[r * cols + c] += probs[r * cols + c] * (up[r * cols + c] - dot);
        }
      });
}

inline Tensor log_softmax(const Tensor& x) {
  auto [rows, cols] = detail::row_view(x.shape(), "log_softmax");
  std::vector<double> out(x.values());
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sum += std::exp(row[c] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t c = 0; c < cols; ++c) row[c] -= lse;
  }
  std::vector<double> logp = out;
  return detail::make_result(
      x.shape(), std::move(out), "log_softmax", {x},
      [rows, cols, logp = std::move(logp)](const std::vector<double>& up,
                                           const std::vector<std::vector<double>*>& pg) {
        std::vector<double>& dx = *pg[0];
        for (std::size_t r = 0; r < rows; ++r) {
          double rowsum = 0.0;
          for (std::size_t c = 0; c < cols; ++c) rowsum += up[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c)
            dx[r * cols + c] += up[r * cols + c] - std::exp(logp[r * cols + c]) * rowsum;
        }
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ValueError(format_msg("mul: incompatible shapes %s and %s", shape_str(a.shape()).c_str(),
                                shape_str(b.shape()).c_str()));
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  auto ad = a.data();
  auto bd = b.data();
  return detail::make_result(
      a.shape(), std::move(out), "mul", {a, b},
      [ad, bd](const std::vector<double>& up, const std::vector<std::vector<double>*>& pg) {
        std::vector<double>& da = *pg[0];
        std::vector<double>& db = *pg[1];
        for (std::size_t i = 0; i < up.size(); ++i) {
          da[i] += up[i] * bd->values[i];
          db[i] += up[i] * ad->values[i];
        }
      });
}

inline Tensor sum(const Tensor& x) {
  double s = std::accumulate(x.values().begin(), x.values().end(), 0.0);
  return detail::make_result(
      {}, {s}, "sum", {x},
      [](const std::vector<double>& up, const std::vector<std::vector<double>*>& pg) {
        for (double& g : *pg[0]) g += up[0];
      });
}

inline Tensor mean(const Tensor& x) {
  const std::size_t n = x.size();
  if (n == 0) throw ValueError("mean: empty tensor");
  double s = std::accumulate(x.values().begin(), x.values().end(), 0.0) / static_cast<double>(n);
  return detail::make_result(
      {}, {s}, "mean", {x},
      [n](const std::vector<double>& up, const std::vector<std::vector<double>*>& pg) {
        const double g = up[0] / static_cast<double>(n);
        for (double& v : *pg[0]) v += g;
      });
}

inline Tensor scale(const Tensor& x, double k) {
  std::vector<double> out(x.values());
  for (double& v : out) v *= k;
  return detail::make_result(
      x.shape(), std::move(out), "scale", {x},
      [k](const std::vector<double>& up, const std::vector<std::vector<double>*>& pg) {
        std::vector<double>& dx = *pg[0];
        for (std::size_t i = 0; i < up.size(); ++i) dx[i] += k * up[i];
      });
}

inline Tensor negate(const Tensor& x) { return scale(x, -1.0); }

// log(x + floor); floor = 0 requires strictly positive inputs.
inline Tensor log(const Tensor& x, double floor = 0.0) {
  std::vector<double> out(x.values());
  for (double& v : out) {
    const double shifted = v + floor;
    if (shifted <= 0.0)
      throw ValueError(format_msg("log: non-positive input %g with floor %g", v, floor));
    v = std::log(shifted);
  }
  auto xd = x.data();
  return detail::make_result(
      x.shape(), std::move(out), "log", {x},
      [xd, floor](const std::vector<double>& up, const std::vector<std::vector<double>*>& pg) {
        std::vector<double>& dx = *pg[0];
        for (std::size_t i = 0; i < up.size(); ++i) dx[i] += up[i] / (xd->values[i] + floor);
      });
}

inline Tensor clamp(const Tensor& x, double lo, double hi) {
  if (!(lo < hi)) throw ValueError(format_msg("clamp: lo %g must be < hi %g", lo, hi));
  std::vector<double> out(x.values());
  for (double& v : out) v = std::min(std::max(v, lo), hi);
  auto xd = x.data();
  return detail::make_result(
      x.shape(), std::move(out), "clamp", {x},
      [xd, lo, hi](const std::vector<double>& up, const std::vector<std::vector<double>*>& pg) {
        std::vector<double>& dx = *pg[0];
        for (std::size_t i = 0; i < up.size(); ++i) {
          const double v = xd->values[i];
          if (v >= lo && v <= hi) dx[i] += up[i];
        }
      });
}

// Free relabeling of the index space; values pass through unchanged.
inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size())
    throw ValueError(format_msg("reshape: cannot view %s as %s", shape_str(x.shape()).c_str(),
                                shape_str(shape).c_str()));
  return detail::make_result(
      std::move(shape), x.values(), "reshape", {x},
      [](const std::vector<double>& up, const std::vector<std::vector<double>*>& pg) {
        std::vector<double>& dx = *pg[0];
        for (std::size_t i = 0; i < up.size(); ++i) dx[i] += up[i];
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, negate(b)); }

// ---- generic dispatch (used by the random-graph gradient checks) -----------

enum class Op {
  MatMul,
  Add,
  Relu,
  Conv2d,
  LogSoftmax,
  Softmax,
  Mul,
  Sum,
  Mean,
  Scale,
  Negate,
  Log,
  Clamp,
  Reshape,
};

struct OpAttrs {
  double scalar = 1.0;  // Scale
  double floor = 0.0;   // Log
  double lo = 0.0;      // Clamp
  double hi = 1.0;
  Shape shape;  // Reshape
};

inline Tensor apply(Op op, const std::vector<Tensor>& in, const OpAttrs& attrs = {}) {
  auto arity = [&](std::size_t n) {
    if (in.size() != n)
      throw ValueError(format_msg("apply: op expects %zu inputs, got %zu", n, in.size()));
  };
  switch (op) {
    case Op::MatMul: arity(2); return matmul(in[0], in[1]);
    case Op::Add: arity(2); return add(in[0], in[1]);
    case Op::Relu: arity(1); return relu(in[0]);
    case Op::Conv2d: arity(3); return conv2d(in[0], in[1], in[2]);
    case Op::LogSoftmax: arity(1); return log_softmax(in[0]);
    case Op::Softmax: arity(1); return softmax(in[0]);
    case Op::Mul: arity(2); return mul(in[0], in[1]);
    case Op::Sum: arity(1); return sum(in[0]);
    case Op::Mean: arity(1); return mean(in[0]);
    case Op::Scale: arity(1); return scale(in[0], attrs.scalar);
    case Op::Negate: arity(1); return negate(in[0]);
    case Op::Log: arity(1); return log(in[0], attrs.floor);
    case Op::Clamp: arity(1); return clamp(in[0], attrs.lo, attrs.hi);
    case Op::Reshape: arity(1); return reshape(in[0], attrs.shape);
  }
  throw ValueError("apply: unknown op");
}

// ---- reverse pass -----------------------------------------------------------

// Populates .grad on every ancestor with requires_grad. Gradients accumulate
// across calls; propagation itself runs on per-call buffers so a second
// backward adds exactly one more copy of the gradient.
inline void backward(const Tensor& output) {
  if (output.size() != 1)
    throw ValueError(
        format_msg("backward: output %s is not scalar", shape_str(output.shape()).c_str()));
  if (!output.has_lineage()) throw ValueError("backward: output has no lineage");

  // Topological order; parents always precede their consumers.
  std::vector<TensorData*> topo;
  std::unordered_set<TensorData*> seen;
  std::vector<std::pair<TensorData*, std::size_t>> stack{{output.data().get(), 0}};
  seen.insert(output.data().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorData* p = node->parents[next++].get();
      if (seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<TensorData*, std::vector<double>> pass;
  for (TensorData* n : topo) pass.emplace(n, std::vector<double>(n->values.size(), 0.0));
  pass[output.data().get()][0] = 1.0;

  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorData* node = *it;
    if (!node->op) continue;
    std::vector<std::vector<double>*> parent_bufs;
    parent_bufs.reserve(node->parents.size());
    for (const auto& p : node->parents) parent_bufs.push_back(&pass[p.get()]);
    node->vjp(pass[node], parent_bufs);
  }

  for (TensorData* n : topo) {
    if (!n->requires_grad) continue;
    auto& buf = pass[n];
    if (n->grad.empty()) n->grad.assign(n->values.size(), 0.0);
    for (std::size_t i = 0; i < buf.size(); ++i) n->grad[i] += buf[i];
    detail::check_finite(n->grad, "backward");
  }
}

// Central-difference gradient estimate; the test oracle for backward().
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                               double h) {
  if (!(h > 0.0)) throw ValueError(format_msg("finite_diff_grad: h must be > 0, got %g", h));
  Tensor probe = x.detach();
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe.values()[i];
    probe.values()[i] = orig + h;
    const double fp = f(probe);
    probe.values()[i] = orig - h;
    const double fm = f(probe);
    probe.values()[i] = orig;
    out.values()[i] = (fp - fm) / (2.0 * h);
  }
  return out;
}

}  // namespace rkd
