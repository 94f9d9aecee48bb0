#pragma once

#include "setcls/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace setcls {

struct LossWeights {
  double set = 0.05;
  double instance = 0.02;
  double cluster = 0.1;
};

struct LossReport {
  double set = 0.0;
  double instance = 0.0;
  double cluster = 0.0;
  double total = 0.0;
};

inline LossReport total_loss(double set, double instance, double cluster, const LossWeights& w) {
  if (w.set < 0 || w.instance < 0 || w.cluster < 0) {
    throw std::invalid_argument("total_loss: loss weights must be non-negative");
  }
  return {set, instance, cluster, w.set * set + w.instance * instance + w.cluster * cluster};
}

namespace detail {

template <typename T>
inline constexpr double distribution_tolerance() {
  return sizeof(T) < sizeof(double) ? 1e-5 : 1e-9;
}

template <typename T>
inline void check_row_weights(std::span<const T> w, std::size_t rows, const char* op) {
  if (w.size() != rows) {
    throw std::invalid_argument(std::string(op) + ": need one weight per row");
  }
}

}  // namespace detail

// sum_r w_r * (-sum_c y_rc log softmax(z_r)_c), with log-probabilities taken
// as z - logsumexp(z). Each target row must be a distribution.
template <typename T>
inline Var<T> soft_cross_entropy(Var<T> logits, const Tensor<T>& targets, std::vector<T> row_weights) {
  const Tensor<T>& z = logits.value();
  if (targets.rows() != z.rows() || targets.cols() != z.cols()) {
    throw std::invalid_argument("soft_cross_entropy: target shape " + shape_string(targets.shape()) +
                                " does not match logits " + shape_string(z.shape()));
  }
  detail::check_row_weights<T>(row_weights, z.rows(), "soft_cross_entropy");
  const auto y = targets.mat();
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    if ((y.row(r).array() < T(0)).any() ||
        std::abs(static_cast<double>(y.row(r).sum()) - 1.0) > detail::distribution_tolerance<T>()) {
      throw std::invalid_argument("soft_cross_entropy: target row " + std::to_string(r) +
                                  " is not a probability distribution");
    }
  }
  const auto lse = detail::logsumexp_rows<T>(z.mat());
  T total = 0;
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const T row = -(y.row(r).array() * (z.mat().row(r).array() - lse(r))).sum();
    total += row_weights[static_cast<std::size_t>(r)] * row;
  }
  const std::size_t zi = logits.id;
  Tensor<T> y_copy = targets;
  return logits.tape->push(
      Tensor<T>::scalar(total), {zi},
      [zi, y_copy = std::move(y_copy), w = std::move(row_weights)](Tape<T>& t, std::size_t self) {
        const T g = t.upstream(self)[0];
        const Matrix<T> p = detail::softmax_rows<T>(t.value(zi).mat());
        const auto ym = y_copy.mat();
        auto dz = t.accum(zi).mat();
        for (Eigen::Index r = 0; r < p.rows(); ++r) {
          const T mass = ym.row(r).sum();
          dz.row(r) += g * w[static_cast<std::size_t>(r)] * (p.row(r) * mass - ym.row(r));
        }
      },
      "soft_cross_entropy");
}

// sum_r w_r * CE(onehot(labels_r), z_r).
template <typename T>
inline Var<T> cross_entropy(Var<T> logits, std::vector<std::size_t> labels, std::vector<T> row_weights) {
  const Tensor<T>& z = logits.value();
  if (labels.size() != z.rows()) throw std::invalid_argument("cross_entropy: need one label per row");
  detail::check_row_weights<T>(row_weights, z.rows(), "cross_entropy");
  for (std::size_t l : labels) {
    if (l >= z.cols()) {
      throw std::invalid_argument("cross_entropy: category " + std::to_string(l) +
                                  " out of range for " + std::to_string(z.cols()) + " classes");
    }
  }
  const auto lse = detail::logsumexp_rows<T>(z.mat());
  T total = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    total += row_weights[r] * (lse(static_cast<Eigen::Index>(r)) - z.at(r, labels[r]));
  }
  const std::size_t zi = logits.id;
  return logits.tape->push(
      Tensor<T>::scalar(total), {zi},
      [zi, labels = std::move(labels), w = std::move(row_weights)](Tape<T>& t, std::size_t self) {
        const T g = t.upstream(self)[0];
        const Matrix<T> p = detail::softmax_rows<T>(t.value(zi).mat());
        auto dz = t.accum(zi).mat();
        for (std::size_t r = 0; r < labels.size(); ++r) {
          const auto ri = static_cast<Eigen::Index>(r);
          dz.row(ri) += g * w[r] * p.row(ri);
          dz(ri, static_cast<Eigen::Index>(labels[r])) -= g * w[r];
        }
      },
      "cross_entropy");
}

// sum_l w_l * KL(p_l || Q_g(l)), where p_l = softmax(z_l) and Q_g is the mean
// of p over all rows in group g (row l included). Gradients flow through
// both p_l and Q_g.
template <typename T>
inline Var<T> centroid_kl(Var<T> logits, std::vector<std::size_t> groups, std::vector<T> row_weights) {
  const Tensor<T>& z = logits.value();
  const std::size_t n = z.rows();
  if (groups.size() != n) throw std::invalid_argument("centroid_kl: need one group id per row");
  detail::check_row_weights<T>(row_weights, n, "centroid_kl");
  std::size_t num_groups = 0;
  for (std::size_t g : groups) num_groups = std::max(num_groups, g + 1);

  std::vector<std::size_t> count(num_groups, 0);
  for (std::size_t g : groups) ++count[g];

  // Everything in the log domain: log p = z - lse(z), and log Q_g is a
  // max-shifted log-mean-exp of its members' log p. Identical members and
  // singleton groups then give log Q == log p exactly, hence a KL of 0.
  const auto lse = detail::logsumexp_rows<T>(z.mat());
  const Matrix<T> log_p = z.mat().colwise() - lse;
  const Eigen::Index cols = log_p.cols();
  Matrix<T> shift = Matrix<T>::Constant(static_cast<Eigen::Index>(num_groups), cols,
                                        -std::numeric_limits<T>::infinity());
  for (std::size_t r = 0; r < n; ++r) {
    const auto gi = static_cast<Eigen::Index>(groups[r]);
    shift.row(gi) = shift.row(gi).cwiseMax(log_p.row(static_cast<Eigen::Index>(r)));
  }
  Matrix<T> acc = Matrix<T>::Zero(shift.rows(), cols);
  for (std::size_t r = 0; r < n; ++r) {
    const auto ri = static_cast<Eigen::Index>(r);
    const auto gi = static_cast<Eigen::Index>(groups[r]);
    for (Eigen::Index c = 0; c < cols; ++c) acc(gi, c) += std::exp(log_p(ri, c) - shift(gi, c));
  }
  Matrix<T> log_q(shift.rows(), cols);
  for (Eigen::Index g = 0; g < shift.rows(); ++g) {
    const T members = static_cast<T>(count[static_cast<std::size_t>(g)]);
    for (Eigen::Index c = 0; c < cols; ++c) {
      log_q(g, c) = members > 0 ? shift(g, c) + std::log(acc(g, c) / members) : T(0);
    }
  }
  const Matrix<T> p = detail::softmax_rows<T>(z.mat());
  T total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const auto ri = static_cast<Eigen::Index>(r);
    const auto gi = static_cast<Eigen::Index>(groups[r]);
    T row = 0;
    for (Eigen::Index c = 0; c < cols; ++c) row += p(ri, c) * (log_p(ri, c) - log_q(gi, c));
    total += row_weights[r] * row;
  }

  const std::size_t zi = logits.id;
  return logits.tape->push(
      Tensor<T>::scalar(total), {zi},
      [zi, groups = std::move(groups), w = std::move(row_weights), count = std::move(count), p, log_p,
       log_q](Tape<T>& t, std::size_t self) {
        const T g = t.upstream(self)[0];
        const auto rows = p.rows();
        // Gradient w.r.t. the centroids: -sum_{l in g} w_l p_l / Q_g.
        Matrix<T> dq = Matrix<T>::Zero(log_q.rows(), log_q.cols());
        for (Eigen::Index r = 0; r < rows; ++r) {
          const auto gi = static_cast<Eigen::Index>(groups[static_cast<std::size_t>(r)]);
          const T wr = w[static_cast<std::size_t>(r)];
          for (Eigen::Index c = 0; c < p.cols(); ++c) dq(gi, c) -= wr * std::exp(log_p(r, c) - log_q(gi, c));
        }
        Matrix<T> dp(rows, p.cols());
        for (Eigen::Index r = 0; r < rows; ++r) {
          const std::size_t gr = groups[static_cast<std::size_t>(r)];
          const auto gi = static_cast<Eigen::Index>(gr);
          const T wr = w[static_cast<std::size_t>(r)];
          for (Eigen::Index c = 0; c < p.cols(); ++c) {
            dp(r, c) = wr * (log_p(r, c) + T(1) - log_q(gi, c)) + dq(gi, c) / static_cast<T>(count[gr]);
          }
        }
        const Eigen::Matrix<T, Eigen::Dynamic, 1> inner = dp.cwiseProduct(p).rowwise().sum();
        t.accum(zi).mat().array() += g * p.array() * (dp.colwise() - inner).array();
      },
      "centroid_kl");
}

// Maps identity ids to dense group indices in first-seen order.
inline std::vector<std::size_t> dense_groups(std::span<const std::int64_t> identities) {
  std::map<std::int64_t, std::size_t> ids;
  std::vector<std::size_t> out;
  out.reserve(identities.size());
  for (std::int64_t i : identities) {
    auto [it, inserted] = ids.emplace(i, ids.size());
    out.push_back(it->second);
  }
  return out;
}

// ---- Per-tracklet losses ---------------------------------------------------

// Set-level cross-entropy against a soft label.
template <typename T>
inline Var<T> set_loss(std::span<const double> soft_label, Var<T> set_logits) {
  const std::size_t c = set_logits.value().cols();
  if (soft_label.size() != c) throw std::invalid_argument("set_loss: label width mismatch");
  if (set_logits.value().rows() != 1) throw std::invalid_argument("set_loss: expected a single row of logits");
  Tensor<T> y(Shape{1, c});
  for (std::size_t i = 0; i < c; ++i) y[i] = static_cast<T>(soft_label[i]);
  return soft_cross_entropy(set_logits, y, std::vector<T>{T(1)});
}

// Mean over tokens of the one-hot cross-entropy to each token's own category.
template <typename T>
inline Var<T> instance_loss(std::span<const std::size_t> categories, Var<T> instance_logits) {
  const std::size_t l = instance_logits.value().rows();
  if (l == 0 || categories.size() != l) {
    throw std::invalid_argument("instance_loss: need one category per token");
  }
  return cross_entropy(instance_logits, std::vector<std::size_t>(categories.begin(), categories.end()),
                       std::vector<T>(l, T(1) / static_cast<T>(l)));
}

// Mean over tokens of CE(y_l, z_l) + KL(p_l || Q_l), Q_l being the mean
// distribution of the tokens sharing identity i_l.
template <typename T>
inline Var<T> cluster_loss(std::span<const std::size_t> categories, std::span<const std::int64_t> identities,
                    Var<T> cluster_logits) {
  const std::size_t l = cluster_logits.value().rows();
  if (l == 0 || categories.size() != l || identities.size() != l) {
    throw std::invalid_argument("cluster_loss: categories, identities and logits must have equal length");
  }
  const std::vector<T> w(l, T(1) / static_cast<T>(l));
  Var<T> ce = cross_entropy(cluster_logits,
                            std::vector<std::size_t>(categories.begin(), categories.end()), w);
  Var<T> kl = centroid_kl(cluster_logits, dense_groups(identities), w);
  return add(ce, kl);
}

// Value-only forms.

inline double set_loss(std::span<const double> soft_label, const Tensor<double>& set_logits) {
  Tape<double> tape;
  return set_loss<double>(soft_label, tape.frozen(set_logits)).value()[0];
}

inline double instance_loss(std::span<const std::size_t> categories, const Tensor<double>& logits) {
  Tape<double> tape;
  return instance_loss<double>(categories, tape.frozen(logits)).value()[0];
}

inline double cluster_loss(std::span<const std::size_t> categories,
                           std::span<const std::int64_t> identities, const Tensor<double>& logits) {
  Tape<double> tape;
  return cluster_loss<double>(categories, identities, tape.frozen(logits)).value()[0];
}

// The centroid KL part of cluster_loss alone, averaged over tokens.
inline double cluster_kl_term(std::span<const std::int64_t> identities, const Tensor<double>& logits) {
  Tape<double> tape;
  const std::size_t l = logits.rows();
  return centroid_kl<double>(tape.frozen(logits), dense_groups(identities),
                             std::vector<double>(l, 1.0 / static_cast<double>(l)))
      .value()[0];
}

}  // namespace setcls
