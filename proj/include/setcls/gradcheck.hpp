#pragma once

#include "setcls/autograd.hpp"
#include "setcls/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace setcls {

struct GradCheckEntry {
  std::string name;
  std::size_t size = 0;
  double rel_error = 0.0;
  double max_abs_error = 0.0;
  // Entries whose +-step straddled a kink and needed a smaller step, and
  // those left out because every step tried still straddled one.
  std::size_t refined = 0;
  std::size_t skipped = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double worst = 0.0;
  std::size_t skipped = 0;

  bool passed(double tolerance) const { return worst < tolerance; }
};

// Norm-wise relative error between two gradient blocks,
// |a - n| / max(|a|, |n|, floor). The floor keeps blocks whose true gradient
// is zero from dividing finite-difference noise by zero.
inline double relative_error(std::span<const double> analytic, std::span<const double> numeric,
                             double floor = 1e-7) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
}

// Fingerprint of which rectifier outputs on a tape are positive. Two
// evaluations with different fingerprints lie on different linear pieces.
template <typename T>
inline std::uint64_t relu_pattern(const Tape<T>& tape) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t id = 0; id < tape.size(); ++id) {
    if (std::strcmp(tape.op(id), "relu") != 0) continue;
    for (T v : tape.value(id).values()) h = (h ^ static_cast<std::uint64_t>(v > T(0))) * 1099511628211ull;
  }
  return h;
}

// Compares reverse-mode gradients against central finite differences.
//
// `evaluate(accumulate)` must rebuild the loss from the current parameter
// values and return it; when `accumulate` is true it must also run backward
// so that each parameter's grad holds the analytic gradient.
//
// With `pattern` (the relu_pattern of the last evaluation), a difference whose
// two sides land on different linear pieces is retried with a step ten times
// smaller, up to three times, and left out if it still straddles a kink.
inline GradCheckReport check_gradients(std::span<Parameter<double>* const> params,
                                       const std::function<double(bool)>& evaluate,
                                       double step = 1e-5,
                                       const std::function<std::uint64_t()>& pattern = {}) {
  for (Parameter<double>* p : params) p->zero_grad();
  evaluate(true);

  GradCheckReport report;
  for (Parameter<double>* p : params) {
    GradCheckEntry e;
    e.name = p->name;
    std::vector<double> numeric, analytic;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double saved = p->value[i];
      double h = step, slope = 0;
      bool smooth = false;
      for (int attempt = 0; attempt < 4 && !smooth; ++attempt, h /= 10) {
        p->value[i] = saved + h;
        const double up = evaluate(false);
        const std::uint64_t up_pattern = pattern ? pattern() : 0;
        p->value[i] = saved - h;
        const double down = evaluate(false);
        smooth = !pattern || pattern() == up_pattern;
        slope = (up - down) / (2.0 * h);
        if (!smooth && attempt == 0) ++e.refined;
      }
      p->value[i] = saved;
      if (!smooth) {
        ++e.skipped;
        continue;
      }
      numeric.push_back(slope);
      analytic.push_back(p->grad[i]);
    }
    e.size = numeric.size();
    e.rel_error = relative_error(analytic, numeric);
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      e.max_abs_error = std::max(e.max_abs_error, std::abs(analytic[i] - numeric[i]));
    }
    report.worst = std::max(report.worst, e.rel_error);
    report.skipped += e.skipped;
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace setcls
