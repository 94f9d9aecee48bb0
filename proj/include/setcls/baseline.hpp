#pragma once

// Per-view classifier aggregated by averaging or majority vote: the
// comparison point for the set classifier on synthetic data.

#include "setcls/augment.hpp"
#include "setcls/losses.hpp"
#include "setcls/metrics.hpp"
#include "setcls/ops.hpp"
#include "setcls/optimizer.hpp"
#include "setcls/set_classifier.hpp"

#include <functional>
#include <stdexcept>
#include <vector>

namespace setcls {

struct PerViewConfig {
  std::size_t input_dim = 0;
  std::size_t model_dim = 512;
  std::size_t num_classes = 0;

  void validate() const {
    if (input_dim == 0 || model_dim == 0 || num_classes < 2) {
      throw std::invalid_argument("per-view classifier: input_dim, model_dim > 0 and num_classes >= 2 required");
    }
  }
};

// Same embedding head as the set classifier followed by a linear classifier.
template <typename T>
class PerViewClassifier {
 public:
  PerViewClassifier(const PerViewConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    embed1_ = make("embed.fc1", cfg.input_dim, cfg.model_dim, rng);
    embed2_ = make("embed.fc2", cfg.model_dim, cfg.model_dim, rng);
    head_ = make("head", cfg.model_dim, cfg.num_classes, rng);
  }

  const PerViewConfig& config() const { return cfg_; }

  std::vector<Parameter<T>*> parameters() {
    return {&embed1_.weight, &embed1_.bias, &embed2_.weight, &embed2_.bias, &head_.weight, &head_.bias};
  }

  // Row-wise logits for an N x d_in feature block.
  Var<T> logits(Tape<T>& tape, Var<T> features) {
    return apply(*this, features, [&](Parameter<T>& p) { return tape.parameter(p); });
  }
  Var<T> logits(Tape<T>& tape, Var<T> features) const {
    return apply(*this, features, [&](const Parameter<T>& p) { return tape.frozen(p.value); });
  }

  Tensor<T> probabilities(const Tensor<T>& features) const {
    Tape<T> tape;
    const Var<T> z = logits(tape, tape.frozen(features));
    return from_matrix<T>(detail::softmax_rows<T>(z.value().mat()));
  }

 private:
  template <typename Self, typename Bind>
  static Var<T> apply(Self& m, Var<T> x, Bind bind) {
    auto h = relu(linear(x, bind(m.embed1_.weight), bind(m.embed1_.bias)));
    h = linear(h, bind(m.embed2_.weight), bind(m.embed2_.bias));
    return linear(h, bind(m.head_.weight), bind(m.head_.bias));
  }

  static LinearParams<T> make(const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    LinearParams<T> l{Parameter<T>(name + ".weight", Tensor<T>(Shape{in, out})),
                      Parameter<T>(name + ".bias", Tensor<T>(Shape{out}))};
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    for (auto& v : l.weight.value.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    return l;
  }

  PerViewConfig cfg_;
  LinearParams<T> embed1_, embed2_, head_;
};

struct PerViewTrainConfig {
  SamplerConfig sampler;
  OptimizerConfig optimizer;
  std::size_t iterations = 1000;
  std::uint64_t seed = 0;
};

// Trains on every RoI of each sampled batch with hard labels, so that it
// sees exactly the RoIs a set classifier with the same seed would see.
template <typename T>
PerViewClassifier<T> train_perview(const RoiPool& pool, const PerViewConfig& model_cfg, const PerViewTrainConfig& cfg,
                                   const std::function<void(std::size_t, double)>& on_step = {}) {
  validate_pool(pool);
  Rng init = Rng::stream(cfg.seed, 1);
  PerViewClassifier<T> model(model_cfg, init);
  const TrackletSampler sampler(pool, cfg.sampler);
  Rng rng = Rng::stream(cfg.seed, 2);
  OptimizerState<T> opt(cfg.optimizer);
  auto params = model.parameters();
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const auto batch = sampler.sample_batch(rng);
    std::vector<std::size_t> items, labels;
    for (const Tracklet& t : batch) {
      for (std::size_t i : t.items) {
        items.push_back(i);
        labels.push_back(pool.records[i].category);
      }
    }
    const Tensor<T> x = tracklet_features<T>(pool, items);
    zero_grads(params);
    Tape<T> tape;
    const std::vector<T> w(labels.size(), T(1) / static_cast<T>(labels.size()));
    const Var<T> loss = cross_entropy<T>(model.logits(tape, tape.frozen(x)), labels, w);
    const double value = static_cast<double>(loss.value()[0]);
    if (!std::isfinite(value)) throw std::runtime_error("per-view training: non-finite loss at iteration " + std::to_string(it));
    tape.backward(loss);
    optimizer_step<T>(opt, params);
    if (on_step) on_step(it, value);
  }
  return model;
}

struct PerFramePredictions {
  std::vector<std::size_t> averaged;
  std::vector<std::size_t> majority;
};

// Argmax of the mean per-view softmax, and the most frequent per-view argmax
// (lowest class on ties, in both rules).
template <typename T>
PerFramePredictions perframe_predict(const PerViewClassifier<T>& model, const std::vector<TestTracklet>& test) {
  PerFramePredictions out;
  const std::size_t C = model.config().num_classes, d = model.config().input_dim;
  for (const TestTracklet& t : test) {
    if (t.views.empty()) throw std::invalid_argument("per-frame baseline: tracklet without views");
    Tensor<T> x(Shape{t.views.size(), d});
    for (std::size_t r = 0; r < t.views.size(); ++r) {
      if (t.views[r].size() != d) throw std::invalid_argument("per-frame baseline: feature width mismatch");
      for (std::size_t c = 0; c < d; ++c) x.at(r, c) = static_cast<T>(t.views[r][c]);
    }
    const Tensor<T> p = model.probabilities(x);
    std::vector<double> mean(C, 0.0), votes(C, 0.0);
    for (std::size_t r = 0; r < p.rows(); ++r) {
      std::vector<double> row(C);
      for (std::size_t c = 0; c < C; ++c) {
        row[c] = static_cast<double>(p.at(r, c));
        mean[c] += row[c];
      }
      votes[argmax_lowest(row)] += 1;
    }
    out.averaged.push_back(argmax_lowest(mean));
    out.majority.push_back(argmax_lowest(votes));
  }
  return out;
}

struct PerFrameReport {
  EvalReport averaged;
  EvalReport majority;
};

template <typename T>
PerFrameReport perframe_baseline(const PerViewClassifier<T>& model, const std::vector<TestTracklet>& test,
                                 const FrequencyGroups& groups) {
  if (test.empty()) throw std::invalid_argument("per-frame baseline: empty test set");
  const auto pred = perframe_predict(model, test);
  std::vector<std::size_t> labels;
  for (const auto& t : test) labels.push_back(t.label);
  const std::size_t C = model.config().num_classes;
  return {evaluate_predictions(pred.averaged, labels, groups, C), evaluate_predictions(pred.majority, labels, groups, C)};
}

}  // namespace setcls
