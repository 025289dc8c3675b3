#pragma once

// Differentiable primitives over Var<Scalar>. Each op computes its forward
// value eagerly with Eigen and records a closure that maps the node's
// upstream gradient onto its parents.
//
// Broadcasting is deliberately narrow:
//   * prefix broadcast: b's shape is a prefix of a's shape, each b element
//     covers one contiguous trailing block of a (per-channel over spatial);
//   * bias broadcast: add_bias adds a vector over the last axis.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dinf/numerics/tape.hpp"
#include "dinf/numerics/tensor.hpp"

namespace dinf {

enum class ElementwiseKind { add, sub, mul, abs, scale };

namespace detail {

inline bool is_prefix(const Shape& prefix, const Shape& full) {
  if (prefix.size() > full.size()) return false;
  for (std::size_t i = 0; i < prefix.size(); ++i)
    if (prefix[i] != full[i]) return false;
  return true;
}

template <typename Scalar>
void require_same_tape(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.tape() != b.tape()) throw std::invalid_argument("operands recorded on different tapes");
}

/// Inner block length when `b` prefix-broadcasts over `a`; throws otherwise.
inline Index broadcast_block(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return 1;
  if (!is_prefix(b, a)) {
    throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(b) + " over " + to_string(a));
  }
  return numel(a) / numel(b);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tape-free forward kernels. Used by the recorded ops and available to
// callers that only need values.

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() == 2 && b.rank() == 2) {
    if (a.dim(1) != b.dim(0)) {
      throw ShapeError("matmul: inner dimensions differ, " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    Tensor<Scalar> out({a.dim(0), b.dim(1)});
    out.matrix(a.dim(0), b.dim(1)).noalias() = a.matrix(a.dim(0), a.dim(1)) * b.matrix(b.dim(0), b.dim(1));
    return out;
  }
  if (a.rank() == 3 && b.rank() == 3) {
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
      throw ShapeError("matmul: batched shapes disagree, " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    const Index n = a.dim(0), m = a.dim(1), k = a.dim(2), p = b.dim(2);
    Tensor<Scalar> out({n, m, p});
    for (Index i = 0; i < n; ++i) out.block(i, m, p).noalias() = a.block(i, m, k) * b.block(i, k, p);
    return out;
  }
  throw ShapeError("matmul: expected rank-2 or batched rank-3 operands, got " + to_string(a.shape()) + " x " +
                   to_string(b.shape()));
}

/// Mean over the trailing two (spatial) axes: [..., C, S, S] -> [..., C].
template <typename Scalar>
Tensor<Scalar> gap(const Tensor<Scalar>& x) {
  if (x.rank() < 3) throw ShapeError("gap: expected [..., C, S, S], got " + to_string(x.shape()));
  Shape out_shape(x.shape().begin(), x.shape().end() - 2);
  const Index area = x.dim(-1) * x.dim(-2);
  Tensor<Scalar> out(out_shape);
  out.data() = x.matrix(out.size(), area).rowwise().mean();
  return out;
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& z) {
  Tensor<Scalar> out(z.shape());
  out.data() = z.data().unaryExpr([](Scalar v) {
    // Split on sign so exp never overflows.
    if (v >= 0) return Scalar(1) / (Scalar(1) + std::exp(-v));
    const Scalar e = std::exp(v);
    return e / (Scalar(1) + e);
  });
  return out;
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  Tensor<Scalar> out(x.shape());
  out.data() = x.data().cwiseMax(Scalar(0));
  return out;
}

template <typename Scalar>
Tensor<Scalar> abs(const Tensor<Scalar>& x) {
  Tensor<Scalar> out(x.shape());
  out.data() = x.data().cwiseAbs();
  return out;
}

template <typename Scalar>
Scalar soft_threshold(Scalar x, Scalar tau) {
  if (x > tau) return x - tau;
  if (x < -tau) return x + tau;
  return Scalar(0);
}

/// Shrinkage with per-channel thresholds; `tau`'s shape is a prefix of `x`'s.
template <typename Scalar>
Tensor<Scalar> soft_threshold(const Tensor<Scalar>& x, const Tensor<Scalar>& tau) {
  const Index block = detail::broadcast_block(x.shape(), tau.shape(), "soft_threshold");
  if ((tau.data().array() < Scalar(0)).any()) throw std::invalid_argument("soft_threshold: negative threshold");
  Tensor<Scalar> out(x.shape());
  for (Index i = 0; i < x.size(); ++i) out[i] = soft_threshold(x[i], tau[i / block]);
  return out;
}

// ---------------------------------------------------------------------------
// Recorded primitives.

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_tape(a, b);
  Tape<Scalar>& t = *a.tape();
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(matmul(a.value(), b.value()), {ia, ib}, [ia, ib](Tape<Scalar>& t, std::size_t self) {
    const Tensor<Scalar>& g = t.upstream(self);
    const Tensor<Scalar>& av = t.value(ia);
    const Tensor<Scalar>& bv = t.value(ib);
    if (av.rank() == 2) {
      const Index m = av.dim(0), k = av.dim(1), n = bv.dim(1);
      auto gm = g.matrix(m, n);
      if (t.requires_grad(ia)) t.grad_buffer(ia).matrix(m, k).noalias() += gm * bv.matrix(k, n).transpose();
      if (t.requires_grad(ib)) t.grad_buffer(ib).matrix(k, n).noalias() += av.matrix(m, k).transpose() * gm;
      return;
    }
    const Index batch = av.dim(0), m = av.dim(1), k = av.dim(2), n = bv.dim(2);
    for (Index i = 0; i < batch; ++i) {
      auto gm = g.block(i, m, n);
      if (t.requires_grad(ia)) t.grad_buffer(ia).block(i, m, k).noalias() += gm * bv.block(i, k, n).transpose();
      if (t.requires_grad(ib)) t.grad_buffer(ib).block(i, k, n).noalias() += av.block(i, m, k).transpose() * gm;
    }
  });
}

/// x[..., n] + bias[n].
template <typename Scalar>
Var<Scalar> add_bias(const Var<Scalar>& x, const Var<Scalar>& bias) {
  detail::require_same_tape(x, bias);
  if (bias.value().rank() != 1 || x.dim(-1) != bias.dim(0)) {
    throw ShapeError("add_bias: bias " + to_string(bias.shape()) + " does not match last axis of " +
                     to_string(x.shape()));
  }
  const Index cols = bias.dim(0), rows = x.size() / cols;
  Tensor<Scalar> out = x.value();
  out.matrix(rows, cols).rowwise() += bias.value().data().transpose();
  const std::size_t ix = x.id(), ib = bias.id();
  return x.tape()->record(std::move(out), {ix, ib}, [ix, ib, rows, cols](Tape<Scalar>& t, std::size_t self) {
    const Tensor<Scalar>& g = t.upstream(self);
    if (t.requires_grad(ix)) t.grad_buffer(ix).data() += g.data();
    if (t.requires_grad(ib)) t.grad_buffer(ib).data() += g.matrix(rows, cols).colwise().sum().transpose();
  });
}

/// Dense layer x·W + b with W stored [in x out].
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  return add_bias(matmul(x, weight), bias);
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_tape(a, b);
  const Index block = detail::broadcast_block(a.shape(), b.shape(), "add");
  Tensor<Scalar> out = a.value();
  if (block == 1) {
    out.data() += b.value().data();
  } else {
    out.matrix(b.size(), block).colwise() += b.value().data();
  }
  const std::size_t ia = a.id(), ib = b.id();
  const Index nb = b.size();
  return a.tape()->record(std::move(out), {ia, ib}, [ia, ib, block, nb](Tape<Scalar>& t, std::size_t self) {
    const Tensor<Scalar>& g = t.upstream(self);
    if (t.requires_grad(ia)) t.grad_buffer(ia).data() += g.data();
    if (t.requires_grad(ib)) {
      if (block == 1) {
        t.grad_buffer(ib).data() += g.data();
      } else {
        t.grad_buffer(ib).data() += g.matrix(nb, block).rowwise().sum();
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  Tensor<Scalar> out(a.shape());
  out.data() = a.value().data() * s;
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(out), {ia}, [ia, s](Tape<Scalar>& t, std::size_t self) {
    t.grad_buffer(ia).data() += t.upstream(self).data() * s;
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  return add(a, scale(b, Scalar(-1)));
}

/// Element-wise product; `b` may prefix-broadcast over `a`.
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_tape(a, b);
  const Index block = detail::broadcast_block(a.shape(), b.shape(), "mul");
  const Index nb = b.size();
  Tensor<Scalar> out = a.value();
  out.matrix(nb, block).array().colwise() *= b.value().data().array();
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {ia, ib}, [ia, ib, block, nb](Tape<Scalar>& t, std::size_t self) {
    const Tensor<Scalar>& g = t.upstream(self);
    if (t.requires_grad(ia)) {
      auto ga = t.grad_buffer(ia).matrix(nb, block);
      ga.array() += g.matrix(nb, block).array().colwise() * t.value(ib).data().array();
    }
    if (t.requires_grad(ib)) {
      t.grad_buffer(ib).data().array() +=
          (g.matrix(nb, block).array() * t.value(ia).matrix(nb, block).array()).rowwise().sum();
    }
  });
}

/// |x| with subgradient 0 at 0.
template <typename Scalar>
Var<Scalar> abs(const Var<Scalar>& x) {
  const Tensor<Scalar>& xv = x.value();
  std::vector<std::uint8_t> branch(static_cast<std::size_t>(xv.size()));
  for (Index i = 0; i < xv.size(); ++i) branch[i] = xv[i] > 0 ? 2 : (xv[i] < 0 ? 0 : 1);
  x.tape()->note_branches(branch);
  const std::size_t ix = x.id();
  return x.tape()->record(abs(xv), {ix}, [ix](Tape<Scalar>& t, std::size_t self) {
    const auto& xv = t.value(ix).data();
    auto sign = xv.unaryExpr([](Scalar v) { return v > 0 ? Scalar(1) : (v < 0 ? Scalar(-1) : Scalar(0)); });
    t.grad_buffer(ix).data().array() += t.upstream(self).data().array() * sign.array();
  });
}

/// max(x, 0) with subgradient 0 at 0.
template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  const Tensor<Scalar>& xv = x.value();
  std::vector<std::uint8_t> branch(static_cast<std::size_t>(xv.size()));
  for (Index i = 0; i < xv.size(); ++i) branch[i] = xv[i] > 0;
  x.tape()->note_branches(branch);
  const std::size_t ix = x.id();
  return x.tape()->record(relu(xv), {ix}, [ix](Tape<Scalar>& t, std::size_t self) {
    const auto& xv = t.value(ix).data();
    t.grad_buffer(ix).data().array() +=
        (xv.array() > Scalar(0)).select(t.upstream(self).data().array(), Scalar(0));
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& z) {
  const std::size_t iz = z.id();
  return z.tape()->record(sigmoid(z.value()), {iz}, [iz](Tape<Scalar>& t, std::size_t self) {
    const auto a = t.value(self).data().array();
    t.grad_buffer(iz).data().array() += t.upstream(self).data().array() * a * (Scalar(1) - a);
  });
}

/// Per-channel shrinkage. Both `x` and `tau` receive gradients; elements in
/// the dead zone |x| <= tau pass nothing back.
template <typename Scalar>
Var<Scalar> soft_threshold(const Var<Scalar>& x, const Var<Scalar>& tau) {
  detail::require_same_tape(x, tau);
  const Tensor<Scalar>& xv = x.value();
  const Tensor<Scalar>& tv = tau.value();
  const Index block = detail::broadcast_block(xv.shape(), tv.shape(), "soft_threshold");
  if ((tv.data().array() < Scalar(0)).any()) throw std::invalid_argument("soft_threshold: negative threshold");
  std::vector<std::uint8_t> branch(static_cast<std::size_t>(xv.size()));
  for (Index i = 0; i < xv.size(); ++i) {
    const Scalar th = tv[i / block];
    branch[i] = xv[i] > th ? 2 : (xv[i] < -th ? 0 : 1);
  }
  x.tape()->note_branches(branch);
  const std::size_t ix = x.id(), it = tau.id();
  return x.tape()->record(soft_threshold(xv, tv), {ix, it}, [ix, it, block](Tape<Scalar>& t, std::size_t self) {
    const Tensor<Scalar>& g = t.upstream(self);
    const Tensor<Scalar>& xv = t.value(ix);
    const Tensor<Scalar>& tv = t.value(it);
    const bool gx = t.requires_grad(ix), gt = t.requires_grad(it);
    Tensor<Scalar>* dx = gx ? &t.grad_buffer(ix) : nullptr;
    Tensor<Scalar>* dt = gt ? &t.grad_buffer(it) : nullptr;
    for (Index i = 0; i < xv.size(); ++i) {
      const Scalar th = tv[i / block];
      if (xv[i] > th) {
        if (gx) (*dx)[i] += g[i];
        if (gt) (*dt)[i / block] -= g[i];
      } else if (xv[i] < -th) {
        if (gx) (*dx)[i] += g[i];
        if (gt) (*dt)[i / block] += g[i];
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> gap(const Var<Scalar>& x) {
  const std::size_t ix = x.id();
  const Index area = x.dim(-1) * x.dim(-2);
  Tensor<Scalar> out = gap(x.value());
  const Index channels = out.size();
  return x.tape()->record(std::move(out), {ix}, [ix, area, channels](Tape<Scalar>& t, std::size_t self) {
    t.grad_buffer(ix).matrix(channels, area).colwise() += t.upstream(self).data() / Scalar(area);
  });
}

/// Metadata-only reshape.
template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, Shape shape) {
  const std::size_t ix = x.id();
  return x.tape()->record(x.value().reshaped(std::move(shape)), {ix}, [ix](Tape<Scalar>& t, std::size_t self) {
    t.grad_buffer(ix).data() += t.upstream(self).data();
  });
}

/// Columns [begin, begin + count) of a [rows x n] tensor.
template <typename Scalar>
Var<Scalar> slice_columns(const Var<Scalar>& x, Index begin, Index count) {
  if (x.value().rank() != 2 || begin < 0 || count <= 0 || begin + count > x.dim(1)) {
    throw ShapeError("slice_columns: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") invalid for " + to_string(x.shape()));
  }
  const Index rows = x.dim(0), cols = x.dim(1);
  Tensor<Scalar> out({rows, count});
  out.matrix(rows, count) = x.value().matrix(rows, cols).middleCols(begin, count);
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [ix, rows, cols, begin, count](Tape<Scalar>& t, std::size_t self) {
    t.grad_buffer(ix).matrix(rows, cols).middleCols(begin, count) += t.upstream(self).matrix(rows, count);
  });
}

/// Reorders raw corner predictions [.., 4] into (min x, min y, max x, max y).
/// Ties route the gradient to the first coordinate of each pair.
template <typename Scalar>
Var<Scalar> canonical_box(const Var<Scalar>& r) {
  if (r.dim(-1) != 4) throw ShapeError("canonical_box: last axis must be 4, got " + to_string(r.shape()));
  const Index rows = r.size() / 4;
  const Tensor<Scalar>& rv = r.value();
  Tensor<Scalar> out(rv.shape());
  // src[k] is the raw column feeding output column k.
  std::vector<std::uint8_t> src(static_cast<std::size_t>(rows * 4));
  for (Index i = 0; i < rows; ++i) {
    const Scalar* in = rv.data().data() + 4 * i;
    const bool swap_x = in[0] > in[2], swap_y = in[1] > in[3];
    const std::uint8_t s[4] = {std::uint8_t(swap_x ? 2 : 0), std::uint8_t(swap_y ? 3 : 1),
                               std::uint8_t(swap_x ? 0 : 2), std::uint8_t(swap_y ? 1 : 3)};
    for (int k = 0; k < 4; ++k) {
      src[4 * i + k] = s[k];
      out[4 * i + k] = in[s[k]];
    }
  }
  r.tape()->note_branches(src);
  const std::size_t ir = r.id();
  return r.tape()->record(std::move(out), {ir}, [ir, rows, src = std::move(src)](Tape<Scalar>& t, std::size_t self) {
    const Tensor<Scalar>& g = t.upstream(self);
    Tensor<Scalar>& d = t.grad_buffer(ir);
    for (Index i = 0; i < rows; ++i)
      for (Index k = 0; k < 4; ++k) d[4 * i + src[4 * i + k]] += g[4 * i + k];
  });
}

/// Element-wise 0.5x^2 for |x| < 1, |x| - 0.5 otherwise.
template <typename Scalar>
Var<Scalar> smooth_l1(const Var<Scalar>& x) {
  Tensor<Scalar> out(x.shape());
  out.data() = x.value().data().unaryExpr(
      [](Scalar v) { return std::abs(v) < Scalar(1) ? Scalar(0.5) * v * v : std::abs(v) - Scalar(0.5); });
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [ix](Tape<Scalar>& t, std::size_t self) {
    const auto d = t.value(ix).data().unaryExpr(
        [](Scalar v) { return std::abs(v) < Scalar(1) ? v : (v > 0 ? Scalar(1) : Scalar(-1)); });
    t.grad_buffer(ix).data().array() += t.upstream(self).data().array() * d.array();
  });
}

/// Sum over the last axis: [..., n] -> [...].
template <typename Scalar>
Var<Scalar> sum_last(const Var<Scalar>& x) {
  if (x.value().rank() < 2) throw ShapeError("sum_last: need rank >= 2, got " + to_string(x.shape()));
  const Index cols = x.dim(-1), rows = x.size() / cols;
  Tensor<Scalar> out(Shape(x.shape().begin(), x.shape().end() - 1));
  out.data() = x.value().matrix(rows, cols).rowwise().sum();
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [ix, rows, cols](Tape<Scalar>& t, std::size_t self) {
    t.grad_buffer(ix).matrix(rows, cols).colwise() += t.upstream(self).data();
  });
}

/// Sum of all elements, as a shape-[1] tensor.
template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  Tensor<Scalar> out({1});
  out[0] = x.value().data().sum();
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [ix](Tape<Scalar>& t, std::size_t self) {
    t.grad_buffer(ix).data().array() += t.upstream(self)[0];
  });
}

/// Σ w_i x_i with constant weights; the weights receive no gradient.
template <typename Scalar>
Var<Scalar> weighted_sum(const Var<Scalar>& x, std::span<const Scalar> weights) {
  if (static_cast<Index>(weights.size()) != x.size()) {
    throw ShapeError("weighted_sum: " + std::to_string(weights.size()) + " weights for " + to_string(x.shape()));
  }
  Eigen::Map<const Vector<Scalar>> w(weights.data(), x.size());
  Tensor<Scalar> out({1});
  out[0] = x.value().data().dot(w);
  const std::size_t ix = x.id();
  Vector<Scalar> saved = w;
  return x.tape()->record(std::move(out), {ix}, [ix, saved = std::move(saved)](Tape<Scalar>& t, std::size_t self) {
    t.grad_buffer(ix).data() += saved * t.upstream(self)[0];
  });
}

/// Per-row negative log-softmax of the labelled class: [B, M] -> [B].
template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& logits, std::span<const int> labels) {
  if (logits.value().rank() != 2 || logits.dim(0) != static_cast<Index>(labels.size())) {
    throw ShapeError("cross_entropy: logits " + to_string(logits.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  }
  const Index rows = logits.dim(0), classes = logits.dim(1);
  for (int l : labels) {
    if (l < 0 || l >= classes) throw std::out_of_range("cross_entropy: label " + std::to_string(l) + " out of range");
  }
  RowMatrix<Scalar> prob(rows, classes);
  Tensor<Scalar> out({rows});
  auto z = logits.value().matrix(rows, classes);
  for (Index i = 0; i < rows; ++i) {
    const Scalar mx = z.row(i).maxCoeff();
    prob.row(i) = (z.row(i).array() - mx).exp();
    const Scalar s = prob.row(i).sum();
    prob.row(i) /= s;
    out[i] = std::log(s) - (z(i, labels[i]) - mx);
  }
  const std::size_t il = logits.id();
  std::vector<int> lab(labels.begin(), labels.end());
  return logits.tape()->record(
      std::move(out), {il}, [il, rows, classes, prob = std::move(prob), lab = std::move(lab)](Tape<Scalar>& t, std::size_t self) {
        const Tensor<Scalar>& g = t.upstream(self);
        auto d = t.grad_buffer(il).matrix(rows, classes);
        for (Index i = 0; i < rows; ++i) {
          d.row(i) += g[i] * prob.row(i);
          d(i, lab[i]) -= g[i];
        }
      });
}

/// Dispatcher over the element-wise kinds. `b` is required for the binary
/// kinds and ignored otherwise; `factor` is used by `scale` only.
template <typename Scalar>
Var<Scalar> elementwise(ElementwiseKind kind, const Var<Scalar>& a, const Var<Scalar>& b = {}, Scalar factor = 1) {
  switch (kind) {
    case ElementwiseKind::add: return add(a, b);
    case ElementwiseKind::sub: return sub(a, b);
    case ElementwiseKind::mul: return mul(a, b);
    case ElementwiseKind::abs: return abs(a);
    case ElementwiseKind::scale: return scale(a, factor);
  }
  throw std::invalid_argument("elementwise: unknown kind");
}

}  // namespace dinf
