#pragma once

#include "setcls/augment.hpp"
#include "setcls/rng.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace setcls {

struct SynthConfig {
  std::size_t num_classes = 50;
  std::size_t feature_dim = 32;
  double zipf_exponent = 1.5;
  std::size_t instance_budget = 2000;
  std::size_t views_per_instance = 24;
  double view_noise_sigma = 0.5;
  double occlusion_prob = 0.3;
  double prototype_sigma = 1.0;
  double instance_sigma = 0.25;
  // Held-out instances per class, outside the Zipf budget.
  std::size_t test_instances_per_class = 4;
  // Extra jittered proposals emitted per training view (0 = ground truth only).
  std::size_t extra_proposals_per_view = 0;
  double proposal_feature_jitter = 0.05;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_classes < 2) throw std::invalid_argument("synth: num_classes must be >= 2");
    if (feature_dim < 1) throw std::invalid_argument("synth: feature_dim must be >= 1");
    if (views_per_instance < 1) throw std::invalid_argument("synth: views_per_instance must be >= 1");
    if (!(zipf_exponent >= 0)) throw std::invalid_argument("synth: zipf_exponent must be >= 0");
    for (double s : {view_noise_sigma, prototype_sigma, instance_sigma, proposal_feature_jitter}) {
      if (!(s >= 0)) throw std::invalid_argument("synth: sigmas must be >= 0");
    }
    if (!(occlusion_prob >= 0 && occlusion_prob <= 1)) {
      throw std::invalid_argument("synth: occlusion_prob must lie in [0,1]");
    }
  }
};

// Class r-1 gets the share proportional to r^{-s}; the budget is split by
// largest remainder (ties to the lower class).
inline std::vector<std::size_t> zipf_counts(std::size_t classes, double s, std::size_t budget) {
  std::vector<double> share(classes);
  for (std::size_t r = 0; r < classes; ++r) share[r] = std::pow(static_cast<double>(r + 1), -s);
  const double total = std::accumulate(share.begin(), share.end(), 0.0);
  std::vector<std::size_t> counts(classes);
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t r = 0; r < classes; ++r) {
    const double exact = static_cast<double>(budget) * share[r] / total;
    counts[r] = static_cast<std::size_t>(std::floor(exact));
    assigned += counts[r];
    remainders.emplace_back(exact - std::floor(exact), r);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < budget; ++i, ++assigned) ++counts[remainders[i].second];
  for (std::size_t r = 0; r < classes; ++r) {
    if (counts[r] == 0) {
      throw std::invalid_argument("synth: instance budget " + std::to_string(budget) +
                                  " leaves class " + std::to_string(r) + " without instances");
    }
  }
  return counts;
}

struct FrequencyGroups {
  std::vector<std::size_t> rare, common, frequent;

  enum Group { kRare = 0, kCommon = 1, kFrequent = 2, kAbsent = 3 };
  std::vector<Group> group_of;
};

// rare < 10 <= common < 100 <= frequent; classes with count 0 belong to no group.
inline FrequencyGroups frequency_groups(const std::vector<double>& instance_counts) {
  FrequencyGroups g;
  g.group_of.assign(instance_counts.size(), FrequencyGroups::kAbsent);
  for (std::size_t c = 0; c < instance_counts.size(); ++c) {
    const double n = instance_counts[c];
    if (!(n >= 0)) throw std::invalid_argument("frequency_groups: negative count");
    if (n <= 0) continue;
    if (n < 10) {
      g.rare.push_back(c);
      g.group_of[c] = FrequencyGroups::kRare;
    } else if (n < 100) {
      g.common.push_back(c);
      g.group_of[c] = FrequencyGroups::kCommon;
    } else {
      g.frequent.push_back(c);
      g.group_of[c] = FrequencyGroups::kFrequent;
    }
  }
  return g;
}

struct TestTracklet {
  std::vector<std::vector<double>> views;
  std::size_t label = 0;
  std::int64_t identity = 0;

  friend bool operator==(const TestTracklet&, const TestTracklet&) = default;
};

struct SynthDataset {
  SynthConfig config;
  RoiPool train;
  std::vector<TestTracklet> test;
  std::vector<std::size_t> train_instances_per_class;
  std::vector<std::vector<double>> prototypes;
};

namespace detail {

inline std::vector<double> gaussian_around(const std::vector<double>& center, double sigma, Rng& rng) {
  std::vector<double> out(center.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = center[i] + sigma * rng.normal();
  return out;
}

inline std::array<double, 4> placeholder_box(std::size_t view) {
  const double x = static_cast<double>(8 * (view % 32));
  return {x, 16.0, x + 64.0, 112.0};
}

}  // namespace detail

inline SynthDataset generate_dataset(const SynthConfig& cfg) {
  cfg.validate();
  const std::size_t C = cfg.num_classes, d = cfg.feature_dim;
  SynthDataset ds;
  ds.config = cfg;
  ds.train_instances_per_class = zipf_counts(C, cfg.zipf_exponent, cfg.instance_budget);

  struct Instance {
    std::size_t label;
    std::int64_t identity;
    std::vector<double> center;
  };
  std::vector<Instance> train_inst, test_inst;
  const std::vector<double> origin(d, 0.0);
  // Stream 0 is reserved; class c uses 1 + c for centres and 1 + C + c for views.
  for (std::size_t c = 0; c < C; ++c) {
    Rng rng = Rng::stream(cfg.seed, 1 + c);
    ds.prototypes.push_back(detail::gaussian_around(origin, cfg.prototype_sigma, rng));
    for (std::size_t i = 0; i < ds.train_instances_per_class[c]; ++i) {
      train_inst.push_back({c, 0, detail::gaussian_around(ds.prototypes[c], cfg.instance_sigma, rng)});
    }
    for (std::size_t i = 0; i < cfg.test_instances_per_class; ++i) {
      test_inst.push_back({c, 0, detail::gaussian_around(ds.prototypes[c], cfg.instance_sigma, rng)});
    }
  }
  std::int64_t next_id = 0;
  for (auto& in : train_inst) in.identity = next_id++;
  for (auto& in : test_inst) in.identity = next_id++;

  // A distractor is a fresh view of a different instance from the same split.
  auto view_of = [&](const std::vector<Instance>& split, std::size_t self, Rng& rng) {
    if (split.size() > 1 && rng.bernoulli(cfg.occlusion_prob)) {
      std::size_t other = static_cast<std::size_t>(rng.index(split.size() - 1));
      if (other >= self) ++other;
      return detail::gaussian_around(split[other].center, cfg.view_noise_sigma, rng);
    }
    return detail::gaussian_around(split[self].center, cfg.view_noise_sigma, rng);
  };

  std::vector<double> annotations(C, 0.0);
  std::size_t train_pos = 0, test_pos = 0;
  for (std::size_t c = 0; c < C; ++c) {
    Rng rng = Rng::stream(cfg.seed, 1 + C + c);
    for (std::size_t i = 0; i < ds.train_instances_per_class[c]; ++i, ++train_pos) {
      const Instance& in = train_inst[train_pos];
      for (std::size_t v = 0; v < cfg.views_per_instance; ++v) {
        RoiRecord r;
        r.feature = view_of(train_inst, train_pos, rng);
        r.box = detail::placeholder_box(v);
        r.category = c;
        r.identity = in.identity;
        r.frame = static_cast<std::int64_t>(v);
        r.source = "synth";
        for (std::size_t k = 0; k < cfg.extra_proposals_per_view; ++k) {
          RoiRecord p = r;
          p.feature = detail::gaussian_around(r.feature, cfg.proposal_feature_jitter, rng);
          const double dx = 4.0 * rng.uniform(-1, 1), dy = 4.0 * rng.uniform(-1, 1);
          p.box = {r.box[0] + dx, r.box[1] + dy, r.box[2] + dx, r.box[3] + dy};
          ds.train.records.push_back(std::move(p));
        }
        ds.train.records.push_back(std::move(r));
        annotations[c] += 1;
      }
    }
    for (std::size_t i = 0; i < cfg.test_instances_per_class; ++i, ++test_pos) {
      TestTracklet t;
      t.label = c;
      t.identity = test_inst[test_pos].identity;
      for (std::size_t v = 0; v < cfg.views_per_instance; ++v) t.views.push_back(view_of(test_inst, test_pos, rng));
      ds.test.push_back(std::move(t));
    }
  }
  ds.train.class_counts = std::move(annotations);
  return ds;
}

inline std::vector<double> as_doubles(const std::vector<std::size_t>& v) { return {v.begin(), v.end()}; }

inline FrequencyGroups dataset_groups(const SynthDataset& ds) {
  return frequency_groups(as_doubles(ds.train_instances_per_class));
}

// ---- files ----

inline void write_test_jsonl(std::ostream& os, const std::vector<TestTracklet>& test) {
  for (const TestTracklet& t : test) {
    os << nlohmann::json{{"views", t.views}, {"label", t.label}, {"identity", t.identity}}.dump() << '\n';
  }
}

inline std::vector<TestTracklet> read_test_jsonl(std::istream& is) {
  std::vector<TestTracklet> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TestTracklet t;
      t.views = j.at("views").get<std::vector<std::vector<double>>>();
      t.label = j.at("label").get<std::size_t>();
      t.identity = j.value("identity", std::int64_t{-1});
      if (t.views.empty()) throw std::invalid_argument("tracklet has no views");
      out.push_back(std::move(t));
    } catch (const std::exception& e) {
      throw std::runtime_error("test jsonl line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::uint64_t fnv1a(const std::vector<RoiRecord>& records) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 1099511628211ull;
    }
  };
  for (const RoiRecord& r : records) {
    for (double v : r.feature) mix(std::bit_cast<std::uint64_t>(v));
  }
  return h;
}

inline nlohmann::ordered_json synth_config_json(const SynthConfig& c) {
  return {{"num_classes", c.num_classes},
          {"feature_dim", c.feature_dim},
          {"zipf_exponent", c.zipf_exponent},
          {"instance_budget", c.instance_budget},
          {"views_per_instance", c.views_per_instance},
          {"view_noise_sigma", c.view_noise_sigma},
          {"occlusion_prob", c.occlusion_prob},
          {"prototype_sigma", c.prototype_sigma},
          {"instance_sigma", c.instance_sigma},
          {"test_instances_per_class", c.test_instances_per_class},
          {"extra_proposals_per_view", c.extra_proposals_per_view},
          {"proposal_feature_jitter", c.proposal_feature_jitter},
          {"seed", c.seed}};
}

inline nlohmann::ordered_json manifest_json(const SynthDataset& ds) {
  const FrequencyGroups g = dataset_groups(ds);
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(fnv1a(ds.train.records)));
  std::vector<std::size_t> test_counts(ds.config.num_classes, 0);
  for (const auto& t : ds.test) ++test_counts[t.label];
  return {{"config", synth_config_json(ds.config)},
          {"train_instances_per_class", ds.train_instances_per_class},
          {"train_annotations_per_class", ds.train.class_counts},
          {"test_instances_per_class", test_counts},
          {"groups", {{"rare", g.rare}, {"common", g.common}, {"frequent", g.frequent}}},
          {"train_records", ds.train.records.size()},
          {"feature_checksum", hash}};
}

// Reads the per-class training instance counts back from a manifest.
inline std::vector<double> manifest_instance_counts(const nlohmann::json& manifest) {
  return manifest.at("train_instances_per_class").get<std::vector<double>>();
}

// Writes <prefix>.strk, <prefix>.counts.json, <prefix>.test.jsonl and
// <prefix>.manifest.json.
inline void save_dataset(const SynthDataset& ds, const std::string& prefix) {
  {
    std::ofstream os(prefix + ".strk", std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + prefix + ".strk");
    write_records_binary(os, ds.train.records);
  }
  {
    std::ofstream os(prefix + ".counts.json");
    write_class_counts(os, ds.train.class_counts);
  }
  {
    std::ofstream os(prefix + ".test.jsonl");
    write_test_jsonl(os, ds.test);
  }
  std::ofstream os(prefix + ".manifest.json");
  os << manifest_json(ds).dump(2) << '\n';
  if (!os) throw std::runtime_error("cannot write " + prefix + ".manifest.json");
}

}  // namespace setcls
