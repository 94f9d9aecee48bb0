#pragma once

#include "setcls/binary_io.hpp"
#include "setcls/rng.hpp"
#include "setcls/tensor.hpp"

#include "json.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace setcls {

// Class indices are 0-based throughout (0..C-1).
struct RoiRecord {
  std::vector<double> feature;
  std::array<double, 4> box{0, 0, 1, 1};
  std::size_t category = 0;
  std::int64_t identity = 0;
  std::int64_t frame = 0;
  std::string source;

  friend bool operator==(const RoiRecord&, const RoiRecord&) = default;
};

struct RoiPool {
  std::vector<RoiRecord> records;
  // Annotation count n_c per class; indexed by class, 0 for absent classes.
  std::vector<double> class_counts;

  std::size_t num_classes() const { return class_counts.size(); }
  std::size_t feature_dim() const { return records.empty() ? 0 : records.front().feature.size(); }
};

inline void validate_record(const RoiRecord& r, std::size_t num_classes, std::size_t feature_dim) {
  if (!(r.box[0] < r.box[2] && r.box[1] < r.box[3])) {
    throw std::invalid_argument("roi record: box must satisfy x1<x2 and y1<y2");
  }
  if (r.category >= num_classes) {
    throw std::invalid_argument("roi record: category " + std::to_string(r.category) + " out of range [0," +
                                std::to_string(num_classes) + ")");
  }
  if (r.identity < 0) throw std::invalid_argument("roi record: identity must be >= 0");
  if (r.feature.size() != feature_dim) {
    throw std::invalid_argument("roi record: feature has " + std::to_string(r.feature.size()) +
                                " values, expected " + std::to_string(feature_dim));
  }
  for (double v : r.feature) {
    if (!std::isfinite(v)) throw std::invalid_argument("roi record: non-finite feature value");
  }
}

inline void validate_pool(const RoiPool& pool) {
  if (pool.records.empty()) throw std::invalid_argument("roi pool is empty");
  const std::size_t d = pool.feature_dim();
  if (d == 0) throw std::invalid_argument("roi pool: zero-length features");
  for (const RoiRecord& r : pool.records) {
    validate_record(r, pool.num_classes(), d);
    if (!(pool.class_counts[r.category] >= 1)) {
      throw std::invalid_argument("roi pool: missing class count for class " + std::to_string(r.category));
    }
  }
}

struct SamplerConfig {
  double exponent = 0.5;
  std::size_t length_min = 16;
  std::size_t length_max_exclusive = 32;
  std::size_t tracklets_per_batch = 256;
  bool allow_multi_identity = true;
  bool allow_multi_class = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(exponent >= 0) || !std::isfinite(exponent)) throw std::invalid_argument("sampler: exponent must be >= 0");
    if (length_min < 1 || length_min >= length_max_exclusive) {
      throw std::invalid_argument("sampler: need 1 <= length_min < length_max_exclusive");
    }
    if (tracklets_per_batch < 1) throw std::invalid_argument("sampler: tracklets_per_batch must be >= 1");
  }
};

// Items are indices into the pool the tracklet was drawn from.
struct Tracklet {
  std::vector<std::size_t> items;
  std::vector<double> soft_label;

  std::size_t length() const { return items.size(); }
  friend bool operator==(const Tracklet&, const Tracklet&) = default;
};

// p'_k = n_{c_k}^{-p} / sum_j n_{c_j}^{-p}
inline std::vector<double> sampling_probs(const RoiPool& pool, double p) {
  if (pool.records.empty()) throw std::invalid_argument("sampling_probs: empty pool");
  if (!(p >= 0)) throw std::invalid_argument("sampling_probs: exponent must be >= 0");
  std::vector<double> w(pool.records.size());
  double total = 0;
  for (std::size_t k = 0; k < w.size(); ++k) {
    const std::size_t c = pool.records[k].category;
    if (c >= pool.class_counts.size() || !(pool.class_counts[c] >= 1)) {
      throw std::invalid_argument("sampling_probs: missing class count for class " + std::to_string(c));
    }
    w[k] = std::pow(pool.class_counts[c], -p);
    total += w[k];
  }
  for (double& v : w) v /= total;
  return w;
}

// y_c = (#items of class c) / L from integer counts.
inline std::vector<double> soft_label(std::span<const std::size_t> categories, std::size_t num_classes) {
  if (categories.empty()) throw std::invalid_argument("soft_label: no items");
  std::vector<std::size_t> counts(num_classes, 0);
  for (std::size_t c : categories) {
    if (c >= num_classes) throw std::invalid_argument("soft_label: category out of range");
    ++counts[c];
  }
  std::vector<double> y(num_classes);
  const double l = static_cast<double>(categories.size());
  for (std::size_t c = 0; c < num_classes; ++c) y[c] = static_cast<double>(counts[c]) / l;
  return y;
}

inline std::vector<double> soft_label(const RoiPool& pool, std::span<const std::size_t> items) {
  std::vector<std::size_t> cats;
  cats.reserve(items.size());
  for (std::size_t i : items) cats.push_back(pool.records.at(i).category);
  return soft_label(cats, pool.num_classes());
}

namespace detail {

struct CumulativeTable {
  std::vector<std::size_t> members;
  std::vector<double> cdf;

  std::size_t draw(Rng& rng) const {
    const double u = rng.uniform() * cdf.back();
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    const auto pos = std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), cdf.size() - 1);
    return members[pos];
  }
};

inline CumulativeTable make_table(std::vector<std::size_t> members, const std::vector<double>& probs) {
  CumulativeTable t{std::move(members), {}};
  t.cdf.reserve(t.members.size());
  double acc = 0;
  for (std::size_t m : t.members) t.cdf.push_back(acc += probs[m]);
  return t;
}

}  // namespace detail

// Precomputes the multinomial and its per-identity and per-class
// restrictions so that each tracklet costs O(L log N).
class TrackletSampler {
 public:
  TrackletSampler(const RoiPool& pool, const SamplerConfig& cfg) : pool_(&pool), cfg_(cfg) {
    cfg_.validate();
    probs_ = sampling_probs(pool, cfg.exponent);
    std::vector<std::size_t> all(pool.records.size());
    for (std::size_t k = 0; k < all.size(); ++k) all[k] = k;
    global_ = detail::make_table(std::move(all), probs_);
    std::map<std::int64_t, std::vector<std::size_t>> by_id;
    std::map<std::size_t, std::vector<std::size_t>> by_class;
    std::map<std::pair<std::int64_t, std::size_t>, std::vector<std::size_t>> by_both;
    for (std::size_t k = 0; k < pool.records.size(); ++k) {
      const RoiRecord& r = pool.records[k];
      by_id[r.identity].push_back(k);
      by_class[r.category].push_back(k);
      by_both[{r.identity, r.category}].push_back(k);
    }
    for (auto& [id, m] : by_id) identity_[id] = detail::make_table(std::move(m), probs_);
    for (auto& [c, m] : by_class) class_[c] = detail::make_table(std::move(m), probs_);
    for (auto& [key, m] : by_both) both_[key] = detail::make_table(std::move(m), probs_);
  }

  const std::vector<double>& probabilities() const { return probs_; }
  const SamplerConfig& config() const { return cfg_; }
  const RoiPool& pool() const { return *pool_; }

  // One record from the unrestricted multinomial.
  std::size_t draw_record(Rng& rng) const { return global_.draw(rng); }

  Tracklet sample(Rng& rng) const {
    const auto span = cfg_.length_max_exclusive - cfg_.length_min;
    const std::size_t length = cfg_.length_min + static_cast<std::size_t>(rng.index(span));
    Tracklet t;
    t.items.reserve(length);
    const std::size_t first = global_.draw(rng);
    t.items.push_back(first);
    const RoiRecord& r = pool_->records[first];
    const detail::CumulativeTable* table = &global_;
    if (!cfg_.allow_multi_identity && !cfg_.allow_multi_class) {
      table = &both_.at({r.identity, r.category});
    } else if (!cfg_.allow_multi_identity) {
      table = &identity_.at(r.identity);
    } else if (!cfg_.allow_multi_class) {
      table = &class_.at(r.category);
    }
    if (table->members.empty() || !(table->cdf.back() > 0)) {
      throw std::runtime_error("generate_tracklet: restriction leaves no candidates");
    }
    while (t.items.size() < length) t.items.push_back(table->draw(rng));
    t.soft_label = soft_label(*pool_, t.items);
    return t;
  }

  std::vector<Tracklet> sample_batch(Rng& rng) const {
    std::vector<Tracklet> batch;
    batch.reserve(cfg_.tracklets_per_batch);
    for (std::size_t b = 0; b < cfg_.tracklets_per_batch; ++b) batch.push_back(sample(rng));
    return batch;
  }

 private:
  const RoiPool* pool_;
  SamplerConfig cfg_;
  std::vector<double> probs_;
  detail::CumulativeTable global_;
  std::unordered_map<std::int64_t, detail::CumulativeTable> identity_;
  std::unordered_map<std::size_t, detail::CumulativeTable> class_;
  std::map<std::pair<std::int64_t, std::size_t>, detail::CumulativeTable> both_;
};

inline Tracklet generate_tracklet(const RoiPool& pool, const SamplerConfig& cfg, Rng& rng) {
  return TrackletSampler(pool, cfg).sample(rng);
}

inline std::vector<Tracklet> generate_batch(const RoiPool& pool, const SamplerConfig& cfg, Rng& rng) {
  return TrackletSampler(pool, cfg).sample_batch(rng);
}

// Features of a tracklet stacked into an L x d_in tensor.
template <typename T>
inline Tensor<T> tracklet_features(const RoiPool& pool, std::span<const std::size_t> items) {
  const std::size_t d = pool.feature_dim();
  Tensor<T> x(Shape{items.size(), d});
  for (std::size_t r = 0; r < items.size(); ++r) {
    const auto& f = pool.records.at(items[r]).feature;
    for (std::size_t c = 0; c < d; ++c) x.at(r, c) = static_cast<T>(f[c]);
  }
  return x;
}

// ---- ingestion ----

inline RoiRecord record_from_json(const nlohmann::json& j) {
  RoiRecord r;
  r.feature = j.at("feature").get<std::vector<double>>();
  const auto box = j.at("box").get<std::vector<double>>();
  if (box.size() != 4) throw std::invalid_argument("roi record: box needs 4 values");
  std::copy(box.begin(), box.end(), r.box.begin());
  const auto cat = j.at("category").get<std::int64_t>();
  if (cat < 0) throw std::invalid_argument("roi record: negative category");
  r.category = static_cast<std::size_t>(cat);
  r.identity = j.at("identity").get<std::int64_t>();
  r.frame = j.value("frame", std::int64_t{0});
  r.source = j.value("source", std::string{});
  return r;
}

inline nlohmann::json record_to_json(const RoiRecord& r) {
  return {{"feature", r.feature}, {"box", r.box},     {"category", r.category},
          {"identity", r.identity}, {"frame", r.frame}, {"source", r.source}};
}

inline std::vector<RoiRecord> read_records_jsonl(std::istream& is) {
  std::vector<RoiRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error("jsonl line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void write_records_jsonl(std::ostream& os, std::span<const RoiRecord> records) {
  for (const RoiRecord& r : records) os << record_to_json(r).dump() << '\n';
}

inline constexpr std::uint32_t kStrkVersion = 1;

inline void write_records_binary(std::ostream& os, std::span<const RoiRecord> records) {
  const std::uint32_t d = records.empty() ? 0 : static_cast<std::uint32_t>(records.front().feature.size());
  binary::put_bytes(os, "STRK");
  binary::put_u32(os, kStrkVersion);
  binary::put_u32(os, d);
  binary::put_u64(os, records.size());
  for (const RoiRecord& r : records) {
    if (r.feature.size() != d) throw std::invalid_argument("STRK: records must share one feature width");
    for (double b : r.box) binary::put_f64(os, b);
    binary::put_u32(os, static_cast<std::uint32_t>(r.category));
    binary::put_u64(os, static_cast<std::uint64_t>(r.identity));
    binary::put_u64(os, static_cast<std::uint64_t>(r.frame));
    for (double v : r.feature) binary::put_f64(os, v);
  }
  if (!os) throw std::runtime_error("STRK: write failed");
}

inline std::vector<RoiRecord> read_records_binary(std::istream& is) {
  binary::expect_magic(is, "STRK");
  const std::uint32_t version = binary::get_u32(is, "STRK version");
  if (version != kStrkVersion) throw std::runtime_error("STRK: unsupported version " + std::to_string(version));
  const std::uint32_t d = binary::get_u32(is, "STRK feature width");
  const std::uint64_t n = binary::get_u64(is, "STRK record count");
  std::vector<RoiRecord> out;
  out.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(n, 1u << 20)));
  for (std::uint64_t k = 0; k < n; ++k) {
    RoiRecord r;
    for (double& b : r.box) b = binary::get_f64(is, "STRK box");
    r.category = binary::get_u32(is, "STRK category");
    r.identity = static_cast<std::int64_t>(binary::get_u64(is, "STRK identity"));
    r.frame = static_cast<std::int64_t>(binary::get_u64(is, "STRK frame"));
    r.feature.resize(d);
    for (double& v : r.feature) v = binary::get_f64(is, "STRK feature");
    out.push_back(std::move(r));
  }
  return out;
}

// Sidecar: {"0": n_0, "1": n_1, ...}; classes not listed get 0.
inline std::vector<double> read_class_counts(std::istream& is) {
  const nlohmann::json j = nlohmann::json::parse(is);
  std::map<std::size_t, double> m;
  for (const auto& [k, v] : j.items()) {
    std::size_t pos = 0;
    const long long c = std::stoll(k, &pos);
    if (pos != k.size() || c < 0) throw std::invalid_argument("class counts: bad class key '" + k + "'");
    m[static_cast<std::size_t>(c)] = v.get<double>();
  }
  std::vector<double> out(m.empty() ? 0 : m.rbegin()->first + 1, 0.0);
  for (const auto& [c, n] : m) out[c] = n;
  return out;
}

inline void write_class_counts(std::ostream& os, std::span<const double> counts) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (std::size_t c = 0; c < counts.size(); ++c) j[std::to_string(c)] = counts[c];
  os << j.dump(2) << '\n';
}

inline bool has_suffix(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Reads `records` (.jsonl or STRK binary) and the class-count sidecar.
// With num_classes == 0 the class count is taken from the sidecar.
inline RoiPool load_pool(const std::string& records_path, const std::string& counts_path, std::size_t num_classes = 0) {
  RoiPool pool;
  if (has_suffix(records_path, ".jsonl")) {
    std::ifstream is(records_path);
    if (!is) throw std::runtime_error("cannot open " + records_path);
    pool.records = read_records_jsonl(is);
  } else {
    std::ifstream is(records_path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + records_path);
    pool.records = read_records_binary(is);
  }
  std::ifstream cs(counts_path);
  if (!cs) throw std::runtime_error("cannot open " + counts_path);
  pool.class_counts = read_class_counts(cs);
  if (num_classes > 0) {
    if (pool.class_counts.size() > num_classes) throw std::invalid_argument("class counts exceed num_classes");
    pool.class_counts.resize(num_classes, 0.0);
  }
  validate_pool(pool);
  return pool;
}

// One line per tracklet: item indices then the soft label, at full precision.
inline void write_tracklets_text(std::ostream& os, std::span<const Tracklet> tracklets) {
  char buf[32];
  for (const Tracklet& t : tracklets) {
    os << t.items.size() << ':';
    for (std::size_t i : t.items) os << ' ' << i;
    os << " |";
    for (double y : t.soft_label) {
      std::snprintf(buf, sizeof buf, " %.17g", y);
      os << buf;
    }
    os << '\n';
  }
}

}  // namespace setcls
