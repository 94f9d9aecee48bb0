#pragma once

#include "setcls/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace setcls {

namespace detail {

template <typename T>
inline void require_same_tape(Var<T> a, Var<T> b, const char* op) {
  if (a.tape != b.tape) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
}

[[noreturn]] inline void fail(const std::string& msg) { throw std::invalid_argument(msg); }

// Row-wise softmax with per-row max subtraction. Each row is staged in the
// same aligned buffer so that equal rows give bitwise-equal outputs wherever
// they sit in memory.
template <typename T>
inline Matrix<T> softmax_rows(const Eigen::Ref<const Matrix<T>>& x) {
  Matrix<T> out(x.rows(), x.cols());
  Eigen::Matrix<T, 1, Eigen::Dynamic> row(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    row = x.row(r);
    row = (row.array() - row.maxCoeff()).exp();
    out.row(r) = row / row.sum();
  }
  return out;
}

// Row-wise log-sum-exp.
template <typename T>
Eigen::Matrix<T, Eigen::Dynamic, 1> logsumexp_rows(const Eigen::Ref<const Matrix<T>>& x) {
  Eigen::Matrix<T, Eigen::Dynamic, 1> out(x.rows());
  Eigen::Matrix<T, 1, Eigen::Dynamic> row(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    row = x.row(r);
    const T m = row.maxCoeff();
    out(r) = m + std::log((row.array() - m).exp().sum());
  }
  return out;
}

}  // namespace detail

// y = x W + b over the last axis of x.
template <typename T>
inline Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  detail::require_same_tape(x, weight, "linear");
  detail::require_same_tape(x, bias, "linear");
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = weight.value();
  const Tensor<T>& bv = bias.value();
  if (!(wv.rank() == 2 && bv.size() == wv.shape()[1])) {
    detail::fail("linear: weight must be [in,out] and bias [out], got " + shape_string(wv.shape()) + " and " +
                 shape_string(bv.shape()));
  }
  if (!(xv.rank() >= 1 && xv.cols() == wv.shape()[0])) {
    detail::fail("linear: input " + shape_string(xv.shape()) + " does not match weight " + shape_string(wv.shape()));
  }
  Shape out_shape = xv.shape();
  out_shape.back() = wv.shape()[1];
  Tensor<T> y(out_shape);
  y.mat().noalias() = xv.mat() * wv.mat();
  y.mat().rowwise() += bv.mat().row(0);
  const std::size_t xi = x.id, wi = weight.id, bi = bias.id;
  return x.tape->push(
      std::move(y), {xi, wi, bi},
      [xi, wi, bi](Tape<T>& t, std::size_t self) {
        const auto dy = t.upstream(self).mat();
        if (t.requires_grad(xi)) t.accum(xi).mat().noalias() += dy * t.value(wi).mat().transpose();
        if (t.requires_grad(wi)) t.accum(wi).mat().noalias() += t.value(xi).mat().transpose() * dy;
        if (t.requires_grad(bi)) t.accum(bi).mat().row(0) += dy.colwise().sum();
      },
      "linear");
}

// y = x W.
template <typename T>
inline Var<T> linear(Var<T> x, Var<T> weight) {
  detail::require_same_tape(x, weight, "linear");
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = weight.value();
  if (!(wv.rank() == 2 && xv.rank() >= 1 && xv.cols() == wv.shape()[0])) {
    detail::fail("linear: input " + shape_string(xv.shape()) + " does not match weight " + shape_string(wv.shape()));
  }
  Shape out_shape = xv.shape();
  out_shape.back() = wv.shape()[1];
  Tensor<T> y(out_shape);
  y.mat().noalias() = xv.mat() * wv.mat();
  const std::size_t xi = x.id, wi = weight.id;
  return x.tape->push(
      std::move(y), {xi, wi},
      [xi, wi](Tape<T>& t, std::size_t self) {
        const auto dy = t.upstream(self).mat();
        if (t.requires_grad(xi)) t.accum(xi).mat().noalias() += dy * t.value(wi).mat().transpose();
        if (t.requires_grad(wi)) t.accum(wi).mat().noalias() += t.value(xi).mat().transpose() * dy;
      },
      "linear");
}

template <typename T>
inline Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b, "add");
  if (a.shape() != b.shape()) {
    detail::fail("add: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor<T> y(a.shape());
  y.mat() = a.value().mat() + b.value().mat();
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->push(
      std::move(y), {ai, bi},
      [ai, bi](Tape<T>& t, std::size_t self) {
        const auto dy = t.upstream(self).mat();
        if (t.requires_grad(ai)) t.accum(ai).mat() += dy;
        if (t.requires_grad(bi)) t.accum(bi).mat() += dy;
      },
      "add");
}

template <typename T>
inline Var<T> scale(Var<T> a, T factor) {
  Tensor<T> y(a.shape());
  y.mat() = a.value().mat() * factor;
  const std::size_t ai = a.id;
  return a.tape->push(
      std::move(y), {ai},
      [ai, factor](Tape<T>& t, std::size_t self) {
        if (t.requires_grad(ai)) t.accum(ai).mat() += t.upstream(self).mat() * factor;
      },
      "scale");
}

// Elementwise product.
template <typename T>
inline Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b, "mul");
  if (a.shape() != b.shape()) detail::fail("mul: shape mismatch");
  Tensor<T> y(a.shape());
  y.mat() = a.value().mat().cwiseProduct(b.value().mat());
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->push(
      std::move(y), {ai, bi},
      [ai, bi](Tape<T>& t, std::size_t self) {
        const auto dy = t.upstream(self).mat();
        if (t.requires_grad(ai)) t.accum(ai).mat() += dy.cwiseProduct(t.value(bi).mat());
        if (t.requires_grad(bi)) t.accum(bi).mat() += dy.cwiseProduct(t.value(ai).mat());
      },
      "mul");
}

template <typename T>
inline Var<T> relu(Var<T> x) {
  Tensor<T> y(x.shape());
  y.mat() = x.value().mat().cwiseMax(T(0));
  const std::size_t xi = x.id;
  return x.tape->push(
      std::move(y), {xi},
      [xi](Tape<T>& t, std::size_t self) {
        if (!t.requires_grad(xi)) return;
        const auto xv = t.value(xi).mat();
        t.accum(xi).mat() += (xv.array() > T(0)).select(t.upstream(self).mat(), T(0));
      },
      "relu");
}

// Sum of all elements, as a scalar.
template <typename T>
inline Var<T> sum(Var<T> x) {
  const std::size_t xi = x.id;
  return x.tape->push(
      Tensor<T>::scalar(x.value().mat().sum()), {xi},
      [xi](Tape<T>& t, std::size_t self) {
        if (t.requires_grad(xi)) t.accum(xi).mat().array() += t.upstream(self)[0];
      },
      "sum");
}

// Weighted sum of scalars.
template <typename T>
inline Var<T> weighted_sum(std::span<const Var<T>> terms, std::span<const T> weights) {
  if (!(!terms.empty() && terms.size() == weights.size())) detail::fail("weighted_sum: need one weight per term");
  T total = 0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (!(terms[i].value().size() == 1)) detail::fail("weighted_sum: terms must be scalars");
    total += weights[i] * terms[i].value()[0];
  }
  std::vector<std::size_t> ids;
  for (const auto& v : terms) ids.push_back(v.id);
  std::vector<T> w(weights.begin(), weights.end());
  Tape<T>& tape = *terms[0].tape;
  return tape.push(
      Tensor<T>::scalar(total), std::span<const std::size_t>(ids),
      [ids, w](Tape<T>& t, std::size_t self) {
        const T g = t.upstream(self)[0];
        for (std::size_t i = 0; i < ids.size(); ++i) {
          if (t.requires_grad(ids[i])) t.accum(ids[i])[0] += w[i] * g;
        }
      },
      "weighted_sum");
}

template <typename T>
inline Var<T> softmax(Var<T> logits) {
  if (!(logits.value().rank() >= 1 && logits.value().cols() >= 1)) detail::fail("softmax: empty last axis");
  Tensor<T> y(logits.shape());
  y.mat() = detail::softmax_rows<T>(logits.value().mat());
  const std::size_t xi = logits.id;
  return logits.tape->push(
      std::move(y), {xi},
      [xi](Tape<T>& t, std::size_t self) {
        if (!t.requires_grad(xi)) return;
        const auto p = t.value(self).mat();
        const auto dp = t.upstream(self).mat();
        const Eigen::Matrix<T, Eigen::Dynamic, 1> inner = dp.cwiseProduct(p).rowwise().sum();
        t.accum(xi).mat().array() += p.array() * (dp.colwise() - inner).array();
      },
      "softmax");
}

// logits - logsumexp(logits), row-wise.
template <typename T>
inline Var<T> log_softmax(Var<T> logits) {
  if (!(logits.value().rank() >= 1 && logits.value().cols() >= 1)) detail::fail("log_softmax: empty last axis");
  Tensor<T> y(logits.shape());
  y.mat() = logits.value().mat().colwise() - detail::logsumexp_rows<T>(logits.value().mat());
  const std::size_t xi = logits.id;
  return logits.tape->push(
      std::move(y), {xi},
      [xi](Tape<T>& t, std::size_t self) {
        if (!t.requires_grad(xi)) return;
        const Matrix<T> p = t.value(self).mat().array().exp();
        const auto dy = t.upstream(self).mat();
        const Eigen::Matrix<T, Eigen::Dynamic, 1> total = dy.rowwise().sum();
        t.accum(xi).mat() += dy - (p.array().colwise() * total.array()).matrix();
      },
      "log_softmax");
}

// Per-row normalization to zero mean and unit variance, then gain * x + shift.
template <typename T>
inline Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> shift, double eps = 1e-5) {
  const Tensor<T>& xv = x.value();
  const std::size_t d = xv.cols();
  if (!(xv.rank() >= 1 && d >= 1)) detail::fail("layer_norm: empty last axis");
  if (!(gain.value().size() == d && shift.value().size() == d)) {
    detail::fail("layer_norm: gain/shift must have the row width " + std::to_string(d));
  }
  const Eigen::Index rows = static_cast<Eigen::Index>(xv.rows());
  Matrix<T> xhat(rows, static_cast<Eigen::Index>(d));
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(rows);
  const auto xm = xv.mat();
  for (Eigen::Index r = 0; r < rows; ++r) {
    // Statistics in double so that |x| up to 1e30 stays finite for float too.
    double mean = 0.0;
    for (Eigen::Index c = 0; c < xm.cols(); ++c) mean += static_cast<double>(xm(r, c));
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (Eigen::Index c = 0; c < xm.cols(); ++c) {
      const double dc = static_cast<double>(xm(r, c)) - mean;
      var += dc * dc;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std(r) = static_cast<T>(is);
    for (Eigen::Index c = 0; c < xm.cols(); ++c) {
      xhat(r, c) = static_cast<T>((static_cast<double>(xm(r, c)) - mean) * is);
    }
  }
  Tensor<T> y(xv.shape());
  y.mat() = xhat.array().rowwise() * gain.value().mat().row(0).array();
  y.mat().rowwise() += shift.value().mat().row(0);
  const std::size_t xi = x.id, gi = gain.id, si = shift.id;
  return x.tape->push(
      std::move(y), {xi, gi, si},
      [xi, gi, si, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t,
                                                                        std::size_t self) {
        const auto dy = t.upstream(self).mat();
        if (t.requires_grad(gi)) t.accum(gi).mat().row(0) += dy.cwiseProduct(xhat).colwise().sum();
        if (t.requires_grad(si)) t.accum(si).mat().row(0) += dy.colwise().sum();
        if (!t.requires_grad(xi)) return;
        const T n = static_cast<T>(xhat.cols());
        const Matrix<T> dxhat = dy.array().rowwise() * t.value(gi).mat().row(0).array();
        const Eigen::Matrix<T, Eigen::Dynamic, 1> m1 = dxhat.rowwise().sum() / n;
        const Eigen::Matrix<T, Eigen::Dynamic, 1> m2 = dxhat.cwiseProduct(xhat).rowwise().sum() / n;
        Matrix<T> dx = dxhat;
        dx.colwise() -= m1;
        dx -= (xhat.array().colwise() * m2.array()).matrix();
        dx = dx.array().colwise() * inv_std.array();
        t.accum(xi).mat() += dx;
      },
      "layer_norm");
}

// Selects rows of a matrix-shaped value; repeated indices are allowed.
template <typename T>
inline Var<T> gather_rows(Var<T> x, std::vector<std::size_t> indices) {
  const Tensor<T>& xv = x.value();
  const std::size_t cols = xv.cols();
  Tensor<T> y(Shape{indices.size(), cols});
  auto ym = y.mat();
  const auto xm = xv.mat();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (!(indices[i] < xv.rows())) detail::fail("gather_rows: index out of range");
    ym.row(static_cast<Eigen::Index>(i)) = xm.row(static_cast<Eigen::Index>(indices[i]));
  }
  const std::size_t xi = x.id;
  return x.tape->push(
      std::move(y), {xi},
      [xi, indices = std::move(indices)](Tape<T>& t, std::size_t self) {
        if (!t.requires_grad(xi)) return;
        auto dx = t.accum(xi).mat();
        const auto dy = t.upstream(self).mat();
        for (std::size_t i = 0; i < indices.size(); ++i) {
          dx.row(static_cast<Eigen::Index>(indices[i])) += dy.row(static_cast<Eigen::Index>(i));
        }
      },
      "gather_rows");
}

// Stacks two matrix-shaped values with equal row width.
template <typename T>
inline Var<T> concat_rows(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b, "concat_rows");
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (!(av.cols() == bv.cols())) detail::fail("concat_rows: row width mismatch");
  Tensor<T> y(Shape{av.rows() + bv.rows(), av.cols()});
  const auto ar = static_cast<Eigen::Index>(av.rows());
  const auto br = static_cast<Eigen::Index>(bv.rows());
  y.mat().topRows(ar) = av.mat();
  y.mat().bottomRows(br) = bv.mat();
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->push(
      std::move(y), {ai, bi},
      [ai, bi, ar, br](Tape<T>& t, std::size_t self) {
        const auto dy = t.upstream(self).mat();
        if (t.requires_grad(ai)) t.accum(ai).mat() += dy.topRows(ar);
        if (t.requires_grad(bi)) t.accum(bi).mat() += dy.bottomRows(br);
      },
      "concat_rows");
}

// Scaled dot-product attention applied independently inside each row segment
// [offsets[s], offsets[s+1]) and each head (a contiguous block of d/heads
// columns). Tokens in different segments never attend to each other.
template <typename T>
inline Var<T> segment_attention(Var<T> q, Var<T> k, Var<T> v, std::span<const std::size_t> offsets,
                         std::size_t heads) {
  const Tensor<T>& qv = q.value();
  const std::size_t d = qv.cols();
  if (!(heads >= 1 && d % heads == 0)) {
    detail::fail("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  }
  if (!(k.shape() == qv.shape() && v.shape() == qv.shape())) detail::fail("attention: q/k/v shape mismatch");
  if (!(offsets.size() >= 2 && offsets.front() == 0 && offsets.back() == qv.rows())) {
    detail::fail("attention: segment offsets must cover all rows");
  }
  const auto dk = static_cast<Eigen::Index>(d / heads);
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(dk));
  const std::size_t segments = offsets.size() - 1;

  auto probs = std::make_shared<std::vector<Matrix<T>>>(segments * heads);
  Tensor<T> out(qv.shape());
  auto om = out.mat();
  const auto qm = qv.mat();
  const auto km = k.value().mat();
  const auto vm = v.value().mat();
  for (std::size_t s = 0; s < segments; ++s) {
    const auto begin = static_cast<Eigen::Index>(offsets[s]);
    const auto n = static_cast<Eigen::Index>(offsets[s + 1] - offsets[s]);
    if (!(n >= 1)) detail::fail("attention: empty segment");
    for (std::size_t h = 0; h < heads; ++h) {
      const Eigen::Index c0 = static_cast<Eigen::Index>(h) * dk;
      Matrix<T> scores = qm.block(begin, c0, n, dk) * km.block(begin, c0, n, dk).transpose();
      scores *= scale_factor;
      Matrix<T> p = detail::softmax_rows<T>(scores);
      om.block(begin, c0, n, dk).noalias() = p * vm.block(begin, c0, n, dk);
      (*probs)[s * heads + h] = std::move(p);
    }
  }

  const std::size_t qi = q.id, ki = k.id, vi = v.id;
  std::vector<std::size_t> offs(offsets.begin(), offsets.end());
  return q.tape->push(
      std::move(out), {qi, ki, vi},
      [qi, ki, vi, probs, offs = std::move(offs), heads, dk, scale_factor](Tape<T>& t,
                                                                         std::size_t self) {
        const auto dout = t.upstream(self).mat();
        const auto qm = t.value(qi).mat();
        const auto km = t.value(ki).mat();
        const auto vm = t.value(vi).mat();
        const bool gq = t.requires_grad(qi), gk = t.requires_grad(ki), gv = t.requires_grad(vi);
        for (std::size_t s = 0; s + 1 < offs.size(); ++s) {
          const auto begin = static_cast<Eigen::Index>(offs[s]);
          const auto n = static_cast<Eigen::Index>(offs[s + 1] - offs[s]);
          for (std::size_t h = 0; h < heads; ++h) {
            const Eigen::Index c0 = static_cast<Eigen::Index>(h) * dk;
            const Matrix<T>& p = (*probs)[s * heads + h];
            const auto dO = dout.block(begin, c0, n, dk);
            if (gv) t.accum(vi).mat().block(begin, c0, n, dk).noalias() += p.transpose() * dO;
            if (!gq && !gk) continue;
            const Matrix<T> dp = dO * vm.block(begin, c0, n, dk).transpose();
            const Eigen::Matrix<T, Eigen::Dynamic, 1> inner = dp.cwiseProduct(p).rowwise().sum();
            Matrix<T> ds = (p.array() * (dp.colwise() - inner).array()).matrix();
            ds *= scale_factor;
            if (gq) t.accum(qi).mat().block(begin, c0, n, dk).noalias() += ds * km.block(begin, c0, n, dk);
            if (gk) {
              t.accum(ki).mat().block(begin, c0, n, dk).noalias() +=
                  ds.transpose() * qm.block(begin, c0, n, dk);
            }
          }
        }
      },
      "attention");
}

// Projection weights of one self-attention block, bound to a tape.
// `bk` may be left unbound: a key bias shifts every score in a softmax row by
// the same amount, so it never changes the output.
template <typename T>
struct AttentionVars {
  Var<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

// Multi-head self-attention over segmented token rows. No positional signal
// enters anywhere, so each segment's output is permutation-equivariant in
// its rows.
template <typename T>
inline Var<T> multi_head_attention(Var<T> tokens, const AttentionVars<T>& w, std::size_t heads,
                            std::span<const std::size_t> offsets) {
  const std::size_t d = tokens.value().cols();
  if (!(heads >= 1 && d % heads == 0)) {
    detail::fail("multi_head_attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                 " heads");
  }
  Var<T> q = linear(tokens, w.wq, w.bq);
  Var<T> k = w.bk.tape ? linear(tokens, w.wk, w.bk) : linear(tokens, w.wk);
  Var<T> v = linear(tokens, w.wv, w.bv);
  return linear(segment_attention(q, k, v, offsets, heads), w.wo, w.bo);
}

// Single-segment convenience form.
template <typename T>
inline Var<T> multi_head_attention(Var<T> tokens, const AttentionVars<T>& w, std::size_t heads) {
  const std::size_t offsets[2] = {0, tokens.value().rows()};
  return multi_head_attention(tokens, w, heads, std::span<const std::size_t>(offsets, 2));
}

}  // namespace setcls
