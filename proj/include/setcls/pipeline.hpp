#pragma once

#include "setcls/augment.hpp"
#include "setcls/losses.hpp"
#include "setcls/metrics.hpp"
#include "setcls/optimizer.hpp"
#include "setcls/set_classifier.hpp"
#include "setcls/synthdata.hpp"

#include "json.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace setcls {

// ---- configuration ---------------------------------------------------------

struct TrainConfig {
  SamplerConfig sampler;
  SetClassifierConfig model;
  LossWeights weights;
  OptimizerConfig optimizer;
  std::size_t iterations = 5000;
  std::size_t eval_interval = 0;
  std::size_t log_interval = 100;
  std::string checkpoint_path;
  std::uint64_t seed = 0;
  // Probability that a tracklet comes from the secondary pool, when one is given.
  double secondary_ratio = 0.5;
  bool single_precision = true;

  void validate() const {
    if (iterations < 1) throw std::invalid_argument("train: iterations must be >= 1");
    if (!(secondary_ratio >= 0 && secondary_ratio <= 1)) {
      throw std::invalid_argument("train: secondary_ratio must lie in [0,1]");
    }
    if (weights.set < 0 || weights.instance < 0 || weights.cluster < 0) {
      throw std::invalid_argument("train: loss weights must be >= 0");
    }
    if (!(optimizer.learning_rate > 0)) throw std::invalid_argument("train: learning rate must be > 0");
    sampler.validate();
  }
};

// A training configuration plus the optional synthetic-data recipe and file
// locations, as read from a `key = value` file.
struct ExperimentConfig {
  TrainConfig train;
  SynthConfig synth;
  bool run_baseline = false;
  std::string train_pool, train_counts, secondary_pool, secondary_counts, test_set, manifest;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc{} || ptr != end) throw std::invalid_argument("config: bad value '" + v + "' for " + key);
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "off" || v == "0" || v == "no") return false;
  throw std::invalid_argument("config: bad boolean '" + v + "' for " + key);
}

}  // namespace detail

using ConfigSetter = std::function<void(ExperimentConfig&, const std::string&)>;

inline const std::map<std::string, ConfigSetter>& config_keys() {
  using detail::parse_bool;
  using detail::parse_number;
  using E = ExperimentConfig;
  using S = const std::string&;
  static const std::map<std::string, ConfigSetter> keys = {
      {"seed", [](E& e, S v) { e.train.seed = parse_number<std::uint64_t>("seed", v); }},
      {"iterations", [](E& e, S v) { e.train.iterations = parse_number<std::size_t>("iterations", v); }},
      {"eval_interval", [](E& e, S v) { e.train.eval_interval = parse_number<std::size_t>("eval_interval", v); }},
      {"log_interval", [](E& e, S v) { e.train.log_interval = parse_number<std::size_t>("log_interval", v); }},
      {"checkpoint", [](E& e, S v) { e.train.checkpoint_path = v; }},
      {"precision",
       [](E& e, S v) {
         if (v != "float" && v != "double") throw std::invalid_argument("config: precision must be float or double");
         e.train.single_precision = v == "float";
       }},
      {"secondary_ratio", [](E& e, S v) { e.train.secondary_ratio = parse_number<double>("secondary_ratio", v); }},
      {"sampler.exponent", [](E& e, S v) { e.train.sampler.exponent = parse_number<double>("sampler.exponent", v); }},
      {"sampler.length_min",
       [](E& e, S v) { e.train.sampler.length_min = parse_number<std::size_t>("sampler.length_min", v); }},
      {"sampler.length_max",
       [](E& e, S v) { e.train.sampler.length_max_exclusive = parse_number<std::size_t>("sampler.length_max", v); }},
      {"sampler.tracklets_per_batch",
       [](E& e, S v) {
         e.train.sampler.tracklets_per_batch = parse_number<std::size_t>("sampler.tracklets_per_batch", v);
       }},
      {"sampler.multi_identity",
       [](E& e, S v) { e.train.sampler.allow_multi_identity = parse_bool("sampler.multi_identity", v); }},
      {"sampler.multi_class",
       [](E& e, S v) { e.train.sampler.allow_multi_class = parse_bool("sampler.multi_class", v); }},
      {"model.dim", [](E& e, S v) { e.train.model.model_dim = parse_number<std::size_t>("model.dim", v); }},
      {"model.heads", [](E& e, S v) { e.train.model.heads = parse_number<std::size_t>("model.heads", v); }},
      {"model.layers", [](E& e, S v) { e.train.model.encoder_layers = parse_number<std::size_t>("model.layers", v); }},
      {"model.ff_dim",
       [](E& e, S v) { e.train.model.feedforward_dim = parse_number<std::size_t>("model.ff_dim", v); }},
      {"model.max_length",
       [](E& e, S v) { e.train.model.max_length = parse_number<std::size_t>("model.max_length", v); }},
      {"loss.set", [](E& e, S v) { e.train.weights.set = parse_number<double>("loss.set", v); }},
      {"loss.instance", [](E& e, S v) { e.train.weights.instance = parse_number<double>("loss.instance", v); }},
      {"loss.cluster", [](E& e, S v) { e.train.weights.cluster = parse_number<double>("loss.cluster", v); }},
      {"optimizer",
       [](E& e, S v) {
         if (v == "adam") {
           e.train.optimizer.kind = OptimizerKind::kAdam;
         } else if (v == "sgd") {
           e.train.optimizer.kind = OptimizerKind::kSgd;
         } else {
           throw std::invalid_argument("config: optimizer must be adam or sgd");
         }
       }},
      {"optimizer.lr", [](E& e, S v) { e.train.optimizer.learning_rate = parse_number<double>("optimizer.lr", v); }},
      {"optimizer.momentum",
       [](E& e, S v) { e.train.optimizer.momentum = parse_number<double>("optimizer.momentum", v); }},
      {"optimizer.beta1", [](E& e, S v) { e.train.optimizer.beta1 = parse_number<double>("optimizer.beta1", v); }},
      {"optimizer.beta2", [](E& e, S v) { e.train.optimizer.beta2 = parse_number<double>("optimizer.beta2", v); }},
      {"baseline", [](E& e, S v) { e.run_baseline = parse_bool("baseline", v); }},
      {"data.train", [](E& e, S v) { e.train_pool = v; }},
      {"data.counts", [](E& e, S v) { e.train_counts = v; }},
      {"data.secondary", [](E& e, S v) { e.secondary_pool = v; }},
      {"data.secondary_counts", [](E& e, S v) { e.secondary_counts = v; }},
      {"data.test", [](E& e, S v) { e.test_set = v; }},
      {"data.manifest", [](E& e, S v) { e.manifest = v; }},
      {"synth.num_classes", [](E& e, S v) { e.synth.num_classes = parse_number<std::size_t>("synth.num_classes", v); }},
      {"synth.feature_dim", [](E& e, S v) { e.synth.feature_dim = parse_number<std::size_t>("synth.feature_dim", v); }},
      {"synth.zipf_exponent",
       [](E& e, S v) { e.synth.zipf_exponent = parse_number<double>("synth.zipf_exponent", v); }},
      {"synth.instance_budget",
       [](E& e, S v) { e.synth.instance_budget = parse_number<std::size_t>("synth.instance_budget", v); }},
      {"synth.views_per_instance",
       [](E& e, S v) { e.synth.views_per_instance = parse_number<std::size_t>("synth.views_per_instance", v); }},
      {"synth.view_noise_sigma",
       [](E& e, S v) { e.synth.view_noise_sigma = parse_number<double>("synth.view_noise_sigma", v); }},
      {"synth.occlusion_prob",
       [](E& e, S v) { e.synth.occlusion_prob = parse_number<double>("synth.occlusion_prob", v); }},
      {"synth.prototype_sigma",
       [](E& e, S v) { e.synth.prototype_sigma = parse_number<double>("synth.prototype_sigma", v); }},
      {"synth.instance_sigma",
       [](E& e, S v) { e.synth.instance_sigma = parse_number<double>("synth.instance_sigma", v); }},
      {"synth.test_instances_per_class",
       [](E& e, S v) {
         e.synth.test_instances_per_class = parse_number<std::size_t>("synth.test_instances_per_class", v);
       }},
      {"synth.extra_proposals_per_view",
       [](E& e, S v) {
         e.synth.extra_proposals_per_view = parse_number<std::size_t>("synth.extra_proposals_per_view", v);
       }},
      {"synth.seed", [](E& e, S v) { e.synth.seed = parse_number<std::uint64_t>("synth.seed", v); }},
  };
  return keys;
}

inline void apply_config_line(ExperimentConfig& cfg, const std::string& raw, std::size_t lineno = 0) {
  std::string line = raw;
  if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
  line = detail::trim(line);
  if (line.empty()) return;
  const auto eq = line.find('=');
  const std::string where = lineno ? "config line " + std::to_string(lineno) + ": " : "config: ";
  if (eq == std::string::npos) throw std::invalid_argument(where + "expected key = value");
  const std::string key = detail::trim(line.substr(0, eq));
  const std::string value = detail::trim(line.substr(eq + 1));
  const auto& keys = config_keys();
  const auto it = keys.find(key);
  if (it == keys.end()) throw std::invalid_argument(where + "unknown key '" + key + "'");
  try {
    it->second(cfg, value);
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(where + e.what());
  }
}

inline ExperimentConfig parse_config(std::istream& is, ExperimentConfig cfg = {}) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) apply_config_line(cfg, line, ++lineno);
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path);
  return parse_config(is);
}

// ---- training ----------------------------------------------------------------

struct SampledTracklet {
  const RoiPool* pool = nullptr;
  Tracklet tracklet;
};

template <typename T>
struct BatchLoss {
  Var<T> total;
  LossReport report;
};

// Mean over tracklets of the per-tracklet set, instance and cluster losses;
// identities only group tokens within their own tracklet.
template <typename T>
BatchLoss<T> batch_loss(const ModelVars<T>& m, std::span<const SampledTracklet> batch, const LossWeights& w) {
  if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
  Tape<T>& tape = *m.embed1.weight.tape;
  const std::size_t d_in = batch.front().pool->feature_dim();
  const std::size_t C = m.set_head.weight.value().cols();
  std::size_t total = 0;
  std::vector<std::size_t> offsets{0};
  for (const auto& s : batch) offsets.push_back(total += s.tracklet.length());

  Tensor<T> x(Shape{total, d_in});
  Tensor<T> targets(Shape{batch.size(), C});
  std::vector<std::size_t> cats;
  std::vector<std::size_t> groups;
  std::vector<T> token_w, set_w(batch.size(), T(1) / static_cast<T>(batch.size()));
  cats.reserve(total);
  groups.reserve(total);
  token_w.reserve(total);
  std::size_t group_base = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const RoiPool& pool = *batch[b].pool;
    const Tracklet& t = batch[b].tracklet;
    if (pool.feature_dim() != d_in) throw std::invalid_argument("batch_loss: pools disagree on feature width");
    if (t.soft_label.size() != C) throw std::invalid_argument("batch_loss: soft label width mismatch");
    std::map<std::int64_t, std::size_t> local;
    const T tw = T(1) / static_cast<T>(batch.size() * t.length());
    for (std::size_t r = 0; r < t.length(); ++r) {
      const RoiRecord& rec = pool.records[t.items[r]];
      for (std::size_t c = 0; c < d_in; ++c) x.at(offsets[b] + r, c) = static_cast<T>(rec.feature[c]);
      cats.push_back(rec.category);
      const auto [it, fresh] = local.emplace(rec.identity, local.size());
      groups.push_back(group_base + it->second);
      token_w.push_back(tw);
    }
    group_base += local.size();
    for (std::size_t c = 0; c < C; ++c) targets.at(b, c) = static_cast<T>(t.soft_label[c]);
  }

  const BatchVars<T> out = forward_batch(m, tape.constant(std::move(x)), offsets);
  const Var<T> set = soft_cross_entropy(out.set_logits, targets, set_w);
  const Var<T> ins = cross_entropy(out.instance_logits, cats, token_w);
  const Var<T> cl = add(cross_entropy(out.cluster_logits, cats, token_w), centroid_kl(out.cluster_logits, groups, token_w));
  const std::vector<Var<T>> terms{set, ins, cl};
  const std::vector<T> weights{static_cast<T>(w.set), static_cast<T>(w.instance), static_cast<T>(w.cluster)};
  BatchLoss<T> r{weighted_sum<T>(terms, weights), {}};
  r.report = total_loss(static_cast<double>(set.value()[0]), static_cast<double>(ins.value()[0]),
                        static_cast<double>(cl.value()[0]), w);
  return r;
}

// Draws batches from one pool, or per tracklet from one of two pools.
class BatchSource {
 public:
  BatchSource(const RoiPool& primary, const RoiPool* secondary, const TrainConfig& cfg)
      : primary_(primary, cfg.sampler),
        rng_(Rng::stream(cfg.seed, 2)),
        mix_rng_(Rng::stream(cfg.seed, 3)),
        ratio_(cfg.secondary_ratio),
        count_(cfg.sampler.tracklets_per_batch) {
    if (secondary) {
      if (secondary->feature_dim() != primary.feature_dim() || secondary->num_classes() != primary.num_classes()) {
        throw std::invalid_argument("secondary pool must match the primary pool's feature width and classes");
      }
      secondary_.emplace(*secondary, cfg.sampler);
    }
  }

  std::vector<SampledTracklet> next() {
    std::vector<SampledTracklet> batch;
    batch.reserve(count_);
    for (std::size_t b = 0; b < count_; ++b) {
      const bool use_secondary = secondary_ && mix_rng_.bernoulli(ratio_);
      const TrackletSampler& s = use_secondary ? *secondary_ : primary_;
      batch.push_back({&s.pool(), s.sample(rng_)});
    }
    return batch;
  }

 private:
  TrackletSampler primary_;
  std::optional<TrackletSampler> secondary_;
  Rng rng_, mix_rng_;
  double ratio_;
  std::size_t count_;
};

template <typename T>
struct TrainHooks {
  std::function<void(std::size_t iteration, const LossReport&)> on_step;
  std::function<void(std::size_t iteration, const SetClassifier<T>&)> on_eval;
};

// Fills input_dim and num_classes from the pool when they are left at 0.
inline SetClassifierConfig resolve_model_config(SetClassifierConfig m, const RoiPool& pool) {
  if (m.input_dim == 0) m.input_dim = pool.feature_dim();
  if (m.num_classes == 0) m.num_classes = pool.num_classes();
  if (m.input_dim != pool.feature_dim()) throw std::invalid_argument("model input_dim does not match the pool");
  if (m.num_classes != pool.num_classes()) throw std::invalid_argument("model num_classes does not match the pool");
  return m;
}

template <typename T>
SetClassifier<T> train(const RoiPool& pool, const TrainConfig& cfg, const RoiPool* secondary = nullptr,
                       const TrainHooks<T>& hooks = {}) {
  cfg.validate();
  validate_pool(pool);
  if (secondary) validate_pool(*secondary);
  SetClassifierConfig mc = resolve_model_config(cfg.model, pool);
  if (cfg.sampler.length_max_exclusive - 1 > mc.max_length) {
    throw std::invalid_argument("train: sampled tracklets may exceed model.max_length");
  }
  Rng init = Rng::stream(cfg.seed, 1);
  SetClassifier<T> model(mc, init);
  BatchSource source(pool, secondary, cfg);
  OptimizerState<T> opt(cfg.optimizer);
  const auto params = model.parameters();
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const auto batch = source.next();
    zero_grads(params);
    Tape<T> tape;
    LossReport report;
    try {
      const ModelVars<T> vars = bind_trainable(tape, model);
      BatchLoss<T> loss = batch_loss<T>(vars, batch, cfg.weights);
      report = loss.report;
      if (!std::isfinite(report.total)) throw std::domain_error("total loss is not finite");
      tape.backward(loss.total);
    } catch (const std::domain_error& e) {
      throw std::runtime_error("train: non-finite value at iteration " + std::to_string(it) + ": " + e.what());
    }
    optimizer_step<T>(opt, params);
    if (hooks.on_step) hooks.on_step(it, report);
    if (cfg.eval_interval && (it + 1) % cfg.eval_interval == 0) {
      if (hooks.on_eval) hooks.on_eval(it, model);
      if (!cfg.checkpoint_path.empty()) save_checkpoint(cfg.checkpoint_path, model);
    }
  }
  if (!cfg.checkpoint_path.empty()) save_checkpoint(cfg.checkpoint_path, model);
  return model;
}

// ---- fusion ------------------------------------------------------------------

struct FusionConfig {
  double lambda_c = 1.0 / 3.0;
  double lambda_s = 2.0 / 3.0;
  bool length_penalty = true;
  // Fuse only the top set probability instead of the whole class vector.
  bool scalar_c = false;

  void validate() const {
    if (!(lambda_c >= 0 && lambda_s >= 0)) throw std::invalid_argument("fusion: exponents must be >= 0");
  }
};

// c_k^lc * s_k^ls, times L when the length penalty is on. `s` holds one
// tracker score for all classes or one per class.
inline std::vector<double> fuse_scores(std::span<const double> c, std::span<const double> s, std::size_t length,
                                       const FusionConfig& cfg) {
  cfg.validate();
  if (c.empty()) throw std::invalid_argument("fuse_scores: empty class scores");
  if (length < 1) throw std::invalid_argument("fuse_scores: length must be >= 1");
  if (s.size() != 1 && s.size() != c.size()) throw std::invalid_argument("fuse_scores: need 1 or C tracker scores");
  for (double v : c) {
    if (!(v >= 0 && v <= 1)) throw std::invalid_argument("fuse_scores: class scores must lie in [0,1]");
  }
  for (double v : s) {
    if (!(v >= 0 && v <= 1)) throw std::invalid_argument("fuse_scores: tracker scores must lie in [0,1]");
  }
  const double scale = cfg.length_penalty ? static_cast<double>(length) : 1.0;
  std::vector<double> out(c.size());
  for (std::size_t k = 0; k < c.size(); ++k) {
    const double sk = s.size() == 1 ? s[0] : s[k];
    out[k] = std::pow(c[k], cfg.lambda_c) * std::pow(sk, cfg.lambda_s) * scale;
  }
  return out;
}

inline std::vector<double> fuse_scores(std::span<const double> c, double s, std::size_t length,
                                       const FusionConfig& cfg) {
  const double one[1] = {s};
  return fuse_scores(c, std::span<const double>(one, 1), length, cfg);
}

// ---- reclassification and evaluation -------------------------------------------

struct PredictedTracklet {
  std::vector<std::vector<double>> views;
  std::vector<double> tracker_scores{1.0};
};

struct ReclassifiedTracklet {
  std::vector<double> set_probs;
  std::vector<double> fused_scores;
  std::size_t label = 0;
  double score = 0;
  std::size_t length = 0;
};

template <typename T>
Tensor<T> views_to_features(const std::vector<std::vector<double>>& views, std::size_t d_in, std::size_t cap) {
  if (views.empty()) throw std::invalid_argument("tracklet has no views");
  const auto rows = subsample_indices(views.size(), cap);
  Tensor<T> x(Shape{rows.size(), d_in});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& v = views[rows[r]];
    if (v.size() != d_in) {
      throw std::invalid_argument("view has " + std::to_string(v.size()) + " features, model expects " +
                                  std::to_string(d_in));
    }
    for (std::size_t c = 0; c < d_in; ++c) x.at(r, c) = static_cast<T>(v[c]);
  }
  return x;
}

// Set probabilities for each tracklet, packed in chunks. Tracklets longer than
// the model's cap are evenly subsampled.
template <typename T>
std::vector<std::vector<double>> set_probabilities(const SetClassifier<T>& model,
                                                   const std::vector<const std::vector<std::vector<double>>*>& views,
                                                   std::size_t chunk = 64) {
  const auto& mc = model.config();
  std::vector<std::vector<double>> out;
  out.reserve(views.size());
  for (std::size_t b = 0; b < views.size(); b += chunk) {
    std::vector<Tensor<T>> xs;
    for (std::size_t i = b; i < std::min(views.size(), b + chunk); ++i) {
      xs.push_back(views_to_features<T>(*views[i], mc.input_dim, mc.max_length));
    }
    for (auto& p : predict_set_probs_batch<T>(model, xs)) out.push_back(std::move(p));
  }
  return out;
}

template <typename T>
std::vector<ReclassifiedTracklet> reclassify(const std::vector<PredictedTracklet>& tracklets,
                                             const SetClassifier<T>& model, const FusionConfig& cfg) {
  cfg.validate();
  std::vector<const std::vector<std::vector<double>>*> views;
  for (const auto& t : tracklets) views.push_back(&t.views);
  const auto probs = set_probabilities(model, views);
  std::vector<ReclassifiedTracklet> out;
  for (std::size_t i = 0; i < tracklets.size(); ++i) {
    ReclassifiedTracklet r;
    r.set_probs = probs[i];
    r.length = tracklets[i].views.size();
    if (cfg.scalar_c) {
      const std::size_t top = argmax_lowest(r.set_probs);
      const double c_top[1] = {r.set_probs[top]};
      const auto& s = tracklets[i].tracker_scores;
      const double s_top[1] = {s.size() == 1 ? s[0] : s.at(top)};
      r.fused_scores.assign(r.set_probs.size(), 0.0);
      r.fused_scores[top] = fuse_scores(c_top, s_top, r.length, cfg)[0];
      r.label = top;
    } else {
      r.fused_scores = fuse_scores(r.set_probs, tracklets[i].tracker_scores, r.length, cfg);
      r.label = argmax_lowest(r.fused_scores);
    }
    r.score = r.fused_scores[r.label];
    out.push_back(std::move(r));
  }
  return out;
}

template <typename T>
std::vector<std::size_t> predict_labels(const SetClassifier<T>& model, const std::vector<TestTracklet>& test) {
  std::vector<const std::vector<std::vector<double>>*> views;
  for (const auto& t : test) views.push_back(&t.views);
  std::vector<std::size_t> out;
  for (const auto& p : set_probabilities(model, views)) out.push_back(argmax_lowest(p));
  return out;
}

template <typename T>
EvalReport evaluate(const std::vector<TestTracklet>& test, const SetClassifier<T>& model,
                    const FrequencyGroups& groups) {
  if (test.empty()) throw std::invalid_argument("evaluate: empty test set");
  const auto pred = predict_labels(model, test);
  std::vector<std::size_t> labels;
  for (const auto& t : test) labels.push_back(t.label);
  return evaluate_predictions(pred, labels, groups, model.config().num_classes);
}

// Tracklet JSONL for reclassify: "views" is required, "score" is a number or
// a per-class array (default 1); all other fields are passed through as-is.
inline PredictedTracklet predicted_from_json(const nlohmann::json& j) {
  PredictedTracklet t;
  t.views = j.at("views").get<std::vector<std::vector<double>>>();
  if (t.views.empty()) throw std::invalid_argument("tracklet has no views");
  if (j.contains("score")) {
    const auto& s = j.at("score");
    t.tracker_scores = s.is_array() ? s.get<std::vector<double>>() : std::vector<double>{s.get<double>()};
  }
  return t;
}

inline nlohmann::json reclassified_to_json(nlohmann::json input, const ReclassifiedTracklet& r) {
  input.erase("views");
  input["set_probs"] = r.set_probs;
  input["fused_scores"] = r.fused_scores;
  input["label"] = r.label;
  input["fused_score"] = r.score;
  input["length"] = r.length;
  return input;
}

}  // namespace setcls
