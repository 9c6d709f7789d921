#pragma once

// Differentiable kernels. Layout conventions:
//   sequences for convolution  B x C x L   (channels first)
//   token sequences            B x T x D   (features last)
// All buffers are row-major over those axes.

#include <algorithm>
#include <cmath>
#include <memory>

#include "cdua/diffgraph/tape.hpp"

namespace cdua::dg {

namespace detail {

inline void expect_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    fail(ErrorKind::validation, std::string(op) + ": expected rank " + std::to_string(rank) +
                                    ", got shape " + shape_string(s));
  }
}

template <typename S>
using ConstRowMap = Eigen::Map<const RowMat<S>>;
template <typename S>
using RowMap = Eigen::Map<RowMat<S>>;

template <typename S>
ConstRowMap<S> rows(const Vec<S>& v, Index r, Index c, Index offset = 0) {
  return ConstRowMap<S>(v.data() + offset, r, c);
}
template <typename S>
RowMap<S> rows(Vec<S>& v, Index r, Index c, Index offset = 0) {
  return RowMap<S>(v.data() + offset, r, c);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and shape plumbing

/// x + y. Each axis of y either matches x or is 1 (same rank); size-1 axes
/// broadcast.
template <typename S>
Var add(Tape<S>& tape, Var x, Var y) {
  const Shape xs = tape.shape(x);
  const Shape ys = tape.shape(y);
  if (xs == ys) {
    return tape.push(xs, tape.value(x) + tape.value(y), {x, y}, [x, y](Tape<S>& t, Var self) {
      const auto& g = t.grad(self);
      if (t.requires_grad(x)) t.grad(x) += g;
      if (t.requires_grad(y)) t.grad(y) += g;
    });
  }
  if (xs.size() != 3 || ys.size() != 3) {
    fail(ErrorKind::validation, "add: broadcasting needs rank-3 operands, got " + shape_string(xs) +
                                    " and " + shape_string(ys));
  }
  for (std::size_t a = 0; a < 3; ++a) {
    if (ys[a] != xs[a] && ys[a] != 1) {
      fail(ErrorKind::validation, "add: cannot broadcast " + shape_string(ys) + " onto " + shape_string(xs));
    }
  }
  // Strides of y in x's index space; zero along broadcast axes.
  const Index s0 = ys[0] == 1 ? 0 : ys[1] * ys[2];
  const Index s1 = ys[1] == 1 ? 0 : ys[2];
  const Index s2 = ys[2] == 1 ? 0 : 1;
  const auto& xv = tape.value(x);
  const auto& yv = tape.value(y);
  Vec<S> out(xv.size());
  Index o = 0;
  for (Index i = 0; i < xs[0]; ++i)
    for (Index j = 0; j < xs[1]; ++j)
      for (Index k = 0; k < xs[2]; ++k, ++o) out[o] = xv[o] + yv[i * s0 + j * s1 + k * s2];
  return tape.push(xs, std::move(out), {x, y}, [x, y, xs, s0, s1, s2](Tape<S>& t, Var self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(x)) t.grad(x) += g;
    if (t.requires_grad(y)) {
      auto& gy = t.grad(y);
      Index o = 0;
      for (Index i = 0; i < xs[0]; ++i)
        for (Index j = 0; j < xs[1]; ++j)
          for (Index k = 0; k < xs[2]; ++k, ++o) gy[i * s0 + j * s1 + k * s2] += g[o];
    }
  });
}

template <typename S>
Var scale(Tape<S>& tape, Var x, S factor) {
  return tape.push(tape.shape(x), tape.value(x) * factor, {x}, [x, factor](Tape<S>& t, Var self) {
    t.grad(x) += t.grad(self) * factor;
  });
}

/// Same buffer under a new shape with equal element count.
template <typename S>
Var reshape(Tape<S>& tape, Var x, Shape shape) {
  if (numel(shape) != numel(tape.shape(x))) {
    fail(ErrorKind::validation, "reshape: " + shape_string(tape.shape(x)) + " -> " + shape_string(shape));
  }
  return tape.push(std::move(shape), tape.value(x), {x},
                   [x](Tape<S>& t, Var self) { t.grad(x) += t.grad(self); });
}

/// Swaps the last two axes: B x M x N -> B x N x M.
template <typename S>
Var transpose12(Tape<S>& tape, Var x) {
  const Shape xs = tape.shape(x);
  detail::expect_rank(xs, 3, "transpose12");
  const Index b = xs[0], m = xs[1], n = xs[2];
  Vec<S> out(b * m * n);
  for (Index i = 0; i < b; ++i) {
    detail::rows(out, n, m, i * m * n) = detail::rows(tape.value(x), m, n, i * m * n).transpose();
  }
  return tape.push({b, n, m}, std::move(out), {x}, [x, b, m, n](Tape<S>& t, Var self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(x);
    for (Index i = 0; i < b; ++i) {
      detail::rows(gx, m, n, i * m * n) += detail::rows(g, n, m, i * m * n).transpose();
    }
  });
}

/// Concatenates along axis 1: (B x C1 x L, B x C2 x L) -> B x (C1+C2) x L.
template <typename S>
Var concat1(Tape<S>& tape, Var a, Var b) {
  const Shape as = tape.shape(a), bs = tape.shape(b);
  detail::expect_rank(as, 3, "concat1");
  detail::expect_rank(bs, 3, "concat1");
  if (as[0] != bs[0] || as[2] != bs[2]) {
    fail(ErrorKind::validation, "concat1: " + shape_string(as) + " vs " + shape_string(bs));
  }
  const Index n = as[0], l = as[2], ca = as[1], cb = bs[1];
  Vec<S> out(n * (ca + cb) * l);
  for (Index i = 0; i < n; ++i) {
    out.segment(i * (ca + cb) * l, ca * l) = tape.value(a).segment(i * ca * l, ca * l);
    out.segment(i * (ca + cb) * l + ca * l, cb * l) = tape.value(b).segment(i * cb * l, cb * l);
  }
  return tape.push({n, ca + cb, l}, std::move(out), {a, b}, [a, b, n, l, ca, cb](Tape<S>& t, Var self) {
    const auto& g = t.grad(self);
    for (Index i = 0; i < n; ++i) {
      if (t.requires_grad(a)) t.grad(a).segment(i * ca * l, ca * l) += g.segment(i * (ca + cb) * l, ca * l);
      if (t.requires_grad(b)) {
        t.grad(b).segment(i * cb * l, cb * l) += g.segment(i * (ca + cb) * l + ca * l, cb * l);
      }
    }
  });
}

/// Mean over axis 1 keeping it: B x T x D -> B x 1 x D.
template <typename S>
Var mean1(Tape<S>& tape, Var x) {
  const Shape xs = tape.shape(x);
  detail::expect_rank(xs, 3, "mean1");
  const Index b = xs[0], n = xs[1], d = xs[2];
  Vec<S> out(b * d);
  for (Index i = 0; i < b; ++i) {
    out.segment(i * d, d) = detail::rows(tape.value(x), n, d, i * n * d).colwise().mean().transpose();
  }
  return tape.push({b, 1, d}, std::move(out), {x}, [x, b, n, d](Tape<S>& t, Var self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(x);
    const S inv = S(1) / static_cast<S>(n);
    for (Index i = 0; i < b; ++i) {
      detail::rows(gx, n, d, i * n * d).rowwise() += g.segment(i * d, d).transpose() * inv;
    }
  });
}

// ---------------------------------------------------------------------------
// Activations and normalization

/// Exact GELU, x * Phi(x).
template <typename S>
Var gelu(Tape<S>& tape, Var x) {
  const auto& xv = tape.value(x);
  const S inv_sqrt2 = S(0.70710678118654752440);
  Vec<S> out = xv.unaryExpr([inv_sqrt2](S v) { return S(0.5) * v * (S(1) + std::erf(v * inv_sqrt2)); });
  return tape.push(tape.shape(x), std::move(out), {x}, [x, inv_sqrt2](Tape<S>& t, Var self) {
    const S inv_sqrt_2pi = S(0.39894228040143267794);
    const auto& xv = t.value(x);
    const auto& g = t.grad(self);
    auto& gx = t.grad(x);
    for (Index i = 0; i < xv.size(); ++i) {
      const S v = xv[i];
      const S cdf = S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
      const S pdf = inv_sqrt_2pi * std::exp(S(-0.5) * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  });
}

/// Group normalization of B x C x L over (C/groups) x L blocks, followed by a
/// per-channel affine map.
template <typename S>
Var group_norm(Tape<S>& tape, Var x, Var gamma, Var beta, Index groups, S eps = S(1e-5)) {
  const Shape xs = tape.shape(x);
  detail::expect_rank(xs, 3, "group_norm");
  const Index b = xs[0], c = xs[1], l = xs[2];
  if (groups <= 0 || c % groups != 0) {
    fail(ErrorKind::validation, "group_norm: " + std::to_string(c) + " channels not divisible by " +
                                    std::to_string(groups) + " groups");
  }
  if (tape.value(gamma).size() != c || tape.value(beta).size() != c) {
    fail(ErrorKind::validation, "group_norm: affine parameters must have one entry per channel");
  }
  const Index block = (c / groups) * l;
  auto xhat = std::make_shared<Vec<S>>(tape.value(x).size());
  auto inv_std = std::make_shared<Vec<S>>(b * groups);
  const auto& xv = tape.value(x);
  const auto& gv = tape.value(gamma);
  const auto& bv = tape.value(beta);
  Vec<S> out(xv.size());
  for (Index i = 0; i < b * groups; ++i) {
    const auto seg = xv.segment(i * block, block);
    const S mean = seg.mean();
    const S var = (seg.array() - mean).square().mean();
    const S is = S(1) / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    xhat->segment(i * block, block) = (seg.array() - mean) * is;
  }
  for (Index i = 0; i < b; ++i)
    for (Index ch = 0; ch < c; ++ch) {
      const Index off = (i * c + ch) * l;
      out.segment(off, l) = (xhat->segment(off, l).array() * gv[ch] + bv[ch]).matrix();
    }
  return tape.push(xs, std::move(out), {x, gamma, beta},
                   [x, gamma, beta, b, c, l, groups, block, xhat, inv_std](Tape<S>& t, Var self) {
                     const auto& g = t.grad(self);
                     const auto& gv = t.value(gamma);
                     if (t.requires_grad(gamma) || t.requires_grad(beta)) {
                       auto& gg = t.grad(gamma);
                       auto& gb = t.grad(beta);
                       for (Index i = 0; i < b; ++i)
                         for (Index ch = 0; ch < c; ++ch) {
                           const Index off = (i * c + ch) * l;
                           gg[ch] += g.segment(off, l).dot(xhat->segment(off, l));
                           gb[ch] += g.segment(off, l).sum();
                         }
                     }
                     if (!t.requires_grad(x)) return;
                     auto& gx = t.grad(x);
                     const Index per_group = c / groups;
                     Vec<S> dxhat(block);
                     for (Index i = 0; i < b; ++i)
                       for (Index gr = 0; gr < groups; ++gr) {
                         const Index off = (i * c + gr * per_group) * l;
                         for (Index ch = 0; ch < per_group; ++ch) {
                           dxhat.segment(ch * l, l) = g.segment(off + ch * l, l) * gv[gr * per_group + ch];
                         }
                         const auto xh = xhat->segment(off, block);
                         const S mean_d = dxhat.mean();
                         const S mean_dx = dxhat.dot(xh) / static_cast<S>(block);
                         gx.segment(off, block).array() +=
                             (*inv_std)[i * groups + gr] * (dxhat.array() - mean_d - xh.array() * mean_dx);
                       }
                   });
}

// ---------------------------------------------------------------------------
// Linear maps

/// Affine map over the last axis: (..., Din) -> (..., Dout) with weight
/// Dout x Din and bias Dout. Rank-3 inputs are processed one batch element at
/// a time so identical rows give identical results regardless of batch size.
template <typename S>
Var dense(Tape<S>& tape, Var x, Var w, Var bias) {
  const Shape xs = tape.shape(x);
  const Shape ws = tape.shape(w);
  detail::expect_rank(ws, 2, "dense weight");
  const Index din = ws[1], dout = ws[0];
  if (xs.empty() || xs.back() != din) {
    fail(ErrorKind::validation, "dense: input " + shape_string(xs) + " does not end in " + std::to_string(din));
  }
  if (tape.value(bias).size() != dout) fail(ErrorKind::validation, "dense: bias size mismatch");
  const Index n_rows = numel(xs) / din;
  const Index block = xs.size() == 3 ? xs[1] : 1;
  const Index n_blocks = n_rows / block;
  Shape out_shape = xs;
  out_shape.back() = dout;
  const auto wm = detail::rows(tape.value(w), dout, din);
  const auto bv = tape.value(bias).transpose();
  Vec<S> out(n_rows * dout);
  for (Index k = 0; k < n_blocks; ++k) {
    auto y = detail::rows(out, block, dout, k * block * dout);
    y.noalias() = detail::rows(tape.value(x), block, din, k * block * din) * wm.transpose();
    y.rowwise() += bv;
  }
  return tape.push(std::move(out_shape), std::move(out), {x, w, bias},
                   [x, w, bias, din, dout, block, n_blocks](Tape<S>& t, Var self) {
                     const auto& g = t.grad(self);
                     const auto wm = detail::rows(t.value(w), dout, din);
                     for (Index k = 0; k < n_blocks; ++k) {
                       const auto gy = detail::rows(g, block, dout, k * block * dout);
                       const auto xk = detail::rows(t.value(x), block, din, k * block * din);
                       if (t.requires_grad(x)) {
                         detail::rows(t.grad(x), block, din, k * block * din).noalias() += gy * wm;
                       }
                       if (t.requires_grad(w)) detail::rows(t.grad(w), dout, din).noalias() += gy.transpose() * xk;
                       if (t.requires_grad(bias)) t.grad(bias) += gy.colwise().sum().transpose();
                     }
                   });
}

namespace detail {

// im2col for one batch element: cols(ci*K + k, lo) = x(ci, lo*stride + k - pad).
template <typename S>
void im2col(const S* x, Index cin, Index len, Index k, Index stride, Index pad, Index lout, RowMat<S>& cols) {
  cols.setZero(cin * k, lout);
  for (Index ci = 0; ci < cin; ++ci)
    for (Index kk = 0; kk < k; ++kk)
      for (Index lo = 0; lo < lout; ++lo) {
        const Index li = lo * stride + kk - pad;
        if (li >= 0 && li < len) cols(ci * k + kk, lo) = x[ci * len + li];
      }
}

template <typename S>
void col2im_add(const RowMat<S>& cols, Index cin, Index len, Index k, Index stride, Index pad, Index lout, S* gx) {
  for (Index ci = 0; ci < cin; ++ci)
    for (Index kk = 0; kk < k; ++kk)
      for (Index lo = 0; lo < lout; ++lo) {
        const Index li = lo * stride + kk - pad;
        if (li >= 0 && li < len) gx[ci * len + li] += cols(ci * k + kk, lo);
      }
}

}  // namespace detail

/// Same-padded 1D convolution. Weight Cout x Cin x K (K odd), bias Cout,
/// stride 1 keeps the length, stride 2 yields ceil(L/2).
template <typename S>
Var conv1d(Tape<S>& tape, Var x, Var w, Var bias, Index stride = 1) {
  const Shape xs = tape.shape(x);
  const Shape ws = tape.shape(w);
  detail::expect_rank(xs, 3, "conv1d input");
  detail::expect_rank(ws, 3, "conv1d weight");
  const Index b = xs[0], cin = xs[1], len = xs[2];
  const Index cout = ws[0], k = ws[2];
  if (ws[1] != cin) {
    fail(ErrorKind::validation, "conv1d: weight expects " + std::to_string(ws[1]) + " input channels, got " +
                                    std::to_string(cin));
  }
  if (k % 2 == 0) fail(ErrorKind::validation, "conv1d: kernel size must be odd");
  if (stride != 1 && stride != 2) fail(ErrorKind::validation, "conv1d: stride must be 1 or 2");
  if (tape.value(bias).size() != cout) fail(ErrorKind::validation, "conv1d: bias size mismatch");
  const Index pad = (k - 1) / 2;
  if (len + 2 * pad < k) fail(ErrorKind::validation, "conv1d: sequence shorter than kernel");
  const Index lout = (len + 2 * pad - k) / stride + 1;

  const auto wm = detail::rows(tape.value(w), cout, cin * k);
  const auto& bv = tape.value(bias);
  Vec<S> out(b * cout * lout);
  RowMat<S> cols;
  for (Index i = 0; i < b; ++i) {
    detail::im2col(tape.value(x).data() + i * cin * len, cin, len, k, stride, pad, lout, cols);
    auto y = detail::rows(out, cout, lout, i * cout * lout);
    y.noalias() = wm * cols;
    y.colwise() += bv;
  }
  return tape.push({b, cout, lout}, std::move(out), {x, w, bias},
                   [x, w, bias, b, cin, len, cout, k, stride, pad, lout](Tape<S>& t, Var self) {
                     const auto& g = t.grad(self);
                     const auto wm = detail::rows(t.value(w), cout, cin * k);
                     RowMat<S> cols, dcols;
                     for (Index i = 0; i < b; ++i) {
                       const auto gy = detail::rows(g, cout, lout, i * cout * lout);
                       if (t.requires_grad(w)) {
                         detail::im2col(t.value(x).data() + i * cin * len, cin, len, k, stride, pad, lout, cols);
                         detail::rows(t.grad(w), cout, cin * k).noalias() += gy * cols.transpose();
                       }
                       if (t.requires_grad(bias)) t.grad(bias) += gy.rowwise().sum();
                       if (t.requires_grad(x)) {
                         dcols.noalias() = wm.transpose() * gy;
                         detail::col2im_add(dcols, cin, len, k, stride, pad, lout, t.grad(x).data() + i * cin * len);
                       }
                     }
                   });
}

/// Transposed convolution with kernel 2 and stride 2: B x Cin x L -> B x Cout x 2L.
/// Weight 2 x Cout x Cin, bias Cout.
template <typename S>
Var conv_transpose2x(Tape<S>& tape, Var x, Var w, Var bias) {
  const Shape xs = tape.shape(x);
  const Shape ws = tape.shape(w);
  detail::expect_rank(xs, 3, "conv_transpose2x input");
  detail::expect_rank(ws, 3, "conv_transpose2x weight");
  const Index b = xs[0], cin = xs[1], len = xs[2], cout = ws[1];
  if (ws[0] != 2 || ws[2] != cin) fail(ErrorKind::validation, "conv_transpose2x: weight shape mismatch");
  if (tape.value(bias).size() != cout) fail(ErrorKind::validation, "conv_transpose2x: bias size mismatch");
  Vec<S> out(b * cout * 2 * len);
  RowMat<S> half;
  for (Index i = 0; i < b; ++i) {
    const auto xi = detail::rows(tape.value(x), cin, len, i * cin * len);
    auto y = detail::rows(out, cout, 2 * len, i * cout * 2 * len);
    for (Index kk = 0; kk < 2; ++kk) {
      half.noalias() = detail::rows(tape.value(w), cout, cin, kk * cout * cin) * xi;
      for (Index l = 0; l < len; ++l) y.col(2 * l + kk) = half.col(l) + tape.value(bias);
    }
  }
  return tape.push({b, cout, 2 * len}, std::move(out), {x, w, bias},
                   [x, w, bias, b, cin, len, cout](Tape<S>& t, Var self) {
                     const auto& g = t.grad(self);
                     RowMat<S> gk(cout, len);
                     for (Index i = 0; i < b; ++i) {
                       const auto gy = detail::rows(g, cout, 2 * len, i * cout * 2 * len);
                       const auto xi = detail::rows(t.value(x), cin, len, i * cin * len);
                       for (Index kk = 0; kk < 2; ++kk) {
                         for (Index l = 0; l < len; ++l) gk.col(l) = gy.col(2 * l + kk);
                         const auto wk = detail::rows(t.value(w), cout, cin, kk * cout * cin);
                         if (t.requires_grad(w)) {
                           detail::rows(t.grad(w), cout, cin, kk * cout * cin).noalias() += gk * xi.transpose();
                         }
                         if (t.requires_grad(bias)) t.grad(bias) += gk.rowwise().sum();
                         if (t.requires_grad(x)) {
                           detail::rows(t.grad(x), cin, len, i * cin * len).noalias() += wk.transpose() * gk;
                         }
                       }
                     }
                   });
}

/// Linear interpolation to twice the length with half-sample alignment and
/// edge clamping: B x C x L -> B x C x 2L.
template <typename S>
Var upsample_linear2x(Tape<S>& tape, Var x) {
  const Shape xs = tape.shape(x);
  detail::expect_rank(xs, 3, "upsample_linear2x");
  const Index rows = xs[0] * xs[1], len = xs[2];
  if (len < 1) fail(ErrorKind::validation, "upsample_linear2x: empty sequence");
  // out[2j] = 0.75 x[j] + 0.25 x[j-1];  out[2j+1] = 0.75 x[j] + 0.25 x[j+1]  (indices clamped)
  const auto& xv = tape.value(x);
  Vec<S> out(rows * 2 * len);
  for (Index r = 0; r < rows; ++r) {
    const S* src = xv.data() + r * len;
    S* dst = out.data() + r * 2 * len;
    for (Index j = 0; j < len; ++j) {
      const Index lo = std::max<Index>(j - 1, 0), hi = std::min<Index>(j + 1, len - 1);
      dst[2 * j] = S(0.75) * src[j] + S(0.25) * src[lo];
      dst[2 * j + 1] = S(0.75) * src[j] + S(0.25) * src[hi];
    }
  }
  return tape.push({xs[0], xs[1], 2 * len}, std::move(out), {x}, [x, rows, len](Tape<S>& t, Var self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(x);
    for (Index r = 0; r < rows; ++r) {
      const S* gd = g.data() + r * 2 * len;
      S* gs = gx.data() + r * len;
      for (Index j = 0; j < len; ++j) {
        const Index lo = std::max<Index>(j - 1, 0), hi = std::min<Index>(j + 1, len - 1);
        gs[j] += S(0.75) * (gd[2 * j] + gd[2 * j + 1]);
        gs[lo] += S(0.25) * gd[2 * j];
        gs[hi] += S(0.25) * gd[2 * j + 1];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Attention

/// Multi-head scaled dot-product attention without projections.
/// q: B x Tq x D, k and v: B x Tk x D, D divisible by heads.
template <typename S>
Var attention(Tape<S>& tape, Var q, Var k, Var v, Index heads) {
  const Shape qs = tape.shape(q), ks = tape.shape(k), vs = tape.shape(v);
  detail::expect_rank(qs, 3, "attention q");
  detail::expect_rank(ks, 3, "attention k");
  detail::expect_rank(vs, 3, "attention v");
  const Index b = qs[0], tq = qs[1], d = qs[2], tk = ks[1];
  if (ks[0] != b || vs[0] != b || ks[2] != d || vs[2] != d || vs[1] != tk) {
    fail(ErrorKind::validation, "attention: shape mismatch " + shape_string(qs) + " " + shape_string(ks) +
                                    " " + shape_string(vs));
  }
  if (heads <= 0 || d % heads != 0) {
    fail(ErrorKind::validation, "attention: model width " + std::to_string(d) + " not divisible by " +
                                    std::to_string(heads) + " heads");
  }
  const Index dh = d / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  auto probs = std::make_shared<Vec<S>>(b * heads * tq * tk);
  Vec<S> out(b * tq * d);
  RowMat<S> logits;
  for (Index i = 0; i < b; ++i) {
    const auto qi = detail::rows(tape.value(q), tq, d, i * tq * d);
    const auto ki = detail::rows(tape.value(k), tk, d, i * tk * d);
    const auto vi = detail::rows(tape.value(v), tk, d, i * tk * d);
    auto oi = detail::rows(out, tq, d, i * tq * d);
    for (Index h = 0; h < heads; ++h) {
      logits.noalias() = qi.middleCols(h * dh, dh) * ki.middleCols(h * dh, dh).transpose() * scale;
      auto p = detail::rows(*probs, tq, tk, (i * heads + h) * tq * tk);
      for (Index r = 0; r < tq; ++r) {
        const S mx = logits.row(r).maxCoeff();
        p.row(r) = (logits.row(r).array() - mx).exp().matrix();
        p.row(r) /= p.row(r).sum();
      }
      oi.middleCols(h * dh, dh).noalias() = p * vi.middleCols(h * dh, dh);
    }
  }
  return tape.push(qs, std::move(out), {q, k, v},
                   [q, k, v, b, tq, tk, d, heads, dh, scale, probs](Tape<S>& t, Var self) {
                     const auto& g = t.grad(self);
                     RowMat<S> dp, ds;
                     for (Index i = 0; i < b; ++i) {
                       const auto qi = detail::rows(t.value(q), tq, d, i * tq * d);
                       const auto ki = detail::rows(t.value(k), tk, d, i * tk * d);
                       const auto vi = detail::rows(t.value(v), tk, d, i * tk * d);
                       const auto gi = detail::rows(g, tq, d, i * tq * d);
                       for (Index h = 0; h < heads; ++h) {
                         const auto p = detail::rows(*probs, tq, tk, (i * heads + h) * tq * tk);
                         const auto go = gi.middleCols(h * dh, dh);
                         if (t.requires_grad(v)) {
                           detail::rows(t.grad(v), tk, d, i * tk * d).middleCols(h * dh, dh).noalias() +=
                               p.transpose() * go;
                         }
                         if (!t.requires_grad(q) && !t.requires_grad(k)) continue;
                         dp.noalias() = go * vi.middleCols(h * dh, dh).transpose();
                         ds = p.cwiseProduct(dp);
                         const Vec<S> row_dot = ds.rowwise().sum();
                         ds -= p.cwiseProduct(row_dot.replicate(1, tk));
                         ds *= scale;
                         if (t.requires_grad(q)) {
                           detail::rows(t.grad(q), tq, d, i * tq * d).middleCols(h * dh, dh).noalias() +=
                               ds * ki.middleCols(h * dh, dh);
                         }
                         if (t.requires_grad(k)) {
                           detail::rows(t.grad(k), tk, d, i * tk * d).middleCols(h * dh, dh).noalias() +=
                               ds.transpose() * qi.middleCols(h * dh, dh);
                         }
                       }
                     }
                   });
}

// ---------------------------------------------------------------------------
// Losses

/// sum(mask * (pred - target)^2) / sum(mask), a scalar of shape {1}. `target`
/// and `mask` are constants shaped like `pred`; entries with mask 0 never
/// influence the value or any gradient.
template <typename S>
Var masked_mse(Tape<S>& tape, Var pred, const Vec<S>& target, const Vec<S>& mask) {
  const auto& p = tape.value(pred);
  if (target.size() != p.size() || mask.size() != p.size()) {
    fail(ErrorKind::validation, "masked_mse: size mismatch");
  }
  const S denom = mask.sum();
  if (!(denom > S(0))) fail(ErrorKind::validation, "masked_mse: every entry is masked out");
  auto diff = std::make_shared<Vec<S>>(p.size());
  S total = 0;
  for (Index i = 0; i < p.size(); ++i) {
    // Select rather than multiply so that a non-finite masked target cannot leak.
    (*diff)[i] = mask[i] != S(0) ? p[i] - target[i] : S(0);
    total += mask[i] * (*diff)[i] * (*diff)[i];
  }
  Vec<S> out(1);
  out[0] = total / denom;
  return tape.push({1}, std::move(out), {pred}, [pred, mask, denom, diff](Tape<S>& t, Var self) {
    const S g = t.grad(self)[0];
    t.grad(pred).array() += (S(2) * g / denom) * mask.array() * diff->array();
  });
}

}  // namespace cdua::dg
