#pragma once

#include "setcls/synthdata.hpp"

#include "json.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace setcls {

// First index of the maximum; the lowest class wins exact ties.
template <typename Range>
std::size_t argmax_lowest(const Range& scores) {
  std::size_t best = 0, i = 0;
  bool first = true;
  double best_v = 0;
  for (const auto& v : scores) {
    if (first || static_cast<double>(v) > best_v) {
      best = i;
      best_v = static_cast<double>(v);
      first = false;
    }
    ++i;
  }
  if (first) throw std::invalid_argument("argmax of an empty range");
  return best;
}

struct GroupStats {
  std::size_t correct = 0;
  std::size_t total = 0;

  double accuracy() const {
    return total == 0 ? std::numeric_limits<double>::quiet_NaN()
                      : static_cast<double>(correct) / static_cast<double>(total);
  }
};

struct EvalReport {
  GroupStats overall, rare, common, frequent;
  // confusion[label][prediction]
  std::vector<std::vector<std::size_t>> confusion;
};

inline EvalReport evaluate_predictions(std::span<const std::size_t> predictions, std::span<const std::size_t> labels,
                                       const FrequencyGroups& groups, std::size_t num_classes) {
  if (labels.empty()) throw std::invalid_argument("evaluate: empty test set");
  if (predictions.size() != labels.size()) throw std::invalid_argument("evaluate: prediction/label count mismatch");
  EvalReport r;
  r.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::size_t y = labels[i], p = predictions[i];
    if (y >= num_classes || p >= num_classes) throw std::invalid_argument("evaluate: class index out of range");
    const bool ok = y == p;
    ++r.confusion[y][p];
    r.overall.total += 1;
    r.overall.correct += ok;
    const auto g = y < groups.group_of.size() ? groups.group_of[y] : FrequencyGroups::kAbsent;
    GroupStats* s = g == FrequencyGroups::kRare     ? &r.rare
                    : g == FrequencyGroups::kCommon ? &r.common
                    : g == FrequencyGroups::kFrequent ? &r.frequent
                                                      : nullptr;
    if (s) {
      s->total += 1;
      s->correct += ok;
    }
  }
  return r;
}

inline nlohmann::ordered_json group_json(const GroupStats& s) {
  nlohmann::ordered_json j{{"correct", s.correct}, {"total", s.total}};
  if (s.total) {
    j["accuracy"] = s.accuracy();
  } else {
    j["accuracy"] = nullptr;
  }
  return j;
}

inline nlohmann::ordered_json report_json(const EvalReport& r) {
  return {{"overall", group_json(r.overall)},
          {"rare", group_json(r.rare)},
          {"common", group_json(r.common)},
          {"frequent", group_json(r.frequent)},
          {"confusion", r.confusion}};
}

inline std::string report_table(const EvalReport& r) {
  std::ostringstream os;
  char line[96];
  std::snprintf(line, sizeof line, "%-10s %8s %8s %9s\n", "group", "correct", "total", "accuracy");
  os << line;
  auto row = [&](const char* name, const GroupStats& s) {
    if (s.total) {
      std::snprintf(line, sizeof line, "%-10s %8zu %8zu %9.4f\n", name, s.correct, s.total, s.accuracy());
    } else {
      std::snprintf(line, sizeof line, "%-10s %8zu %8zu %9s\n", name, s.correct, s.total, "-");
    }
    os << line;
  };
  row("overall", r.overall);
  row("rare", r.rare);
  row("common", r.common);
  row("frequent", r.frequent);
  return os.str();
}

}  // namespace setcls
