#pragma once

// End-to-end runs shared by the CLI and the acceptance harness.

#include "setcls/baseline.hpp"
#include "setcls/gradcheck.hpp"
#include "setcls/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <optional>

namespace setcls {

struct ExperimentResult {
  EvalReport set_classifier;
  std::optional<PerFrameReport> baseline;
  double baseline_view_accuracy = 0;
  std::vector<double> losses;
  double seconds = 0;
};

// Per-view top-1 accuracy of a per-view classifier over every test view.
template <typename T>
double view_accuracy(const PerViewClassifier<T>& model, const std::vector<TestTracklet>& test) {
  std::size_t correct = 0, total = 0;
  for (const TestTracklet& t : test) {
    std::vector<TestTracklet> single;
    for (const auto& v : t.views) single.push_back({{v}, t.label, t.identity});
    for (std::size_t p : perframe_predict(model, single).averaged) {
      correct += p == t.label;
      ++total;
    }
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

template <typename T>
ExperimentResult run_experiment_as(const SynthDataset& ds, const ExperimentConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  ExperimentResult r;
  TrainHooks<T> hooks;
  hooks.on_step = [&](std::size_t, const LossReport& l) { r.losses.push_back(l.total); };
  const auto groups = dataset_groups(ds);
  const SetClassifier<T> model = train<T>(ds.train, cfg.train, nullptr, hooks);
  r.set_classifier = evaluate(ds.test, model, groups);
  if (cfg.run_baseline) {
    PerViewTrainConfig pc;
    pc.sampler = cfg.train.sampler;
    pc.optimizer = cfg.train.optimizer;
    pc.iterations = cfg.train.iterations;
    pc.seed = cfg.train.seed;
    const PerViewConfig mc{ds.train.feature_dim(), cfg.train.model.model_dim, ds.train.num_classes()};
    const auto base = train_perview<T>(ds.train, mc, pc);
    r.baseline = perframe_baseline(base, ds.test, groups);
    r.baseline_view_accuracy = view_accuracy(base, ds.test);
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

// Trains (and optionally runs the baseline) on a synthetic dataset generated
// from the config's synth section.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  const SynthDataset ds = generate_dataset(cfg.synth);
  return cfg.train.single_precision ? run_experiment_as<float>(ds, cfg) : run_experiment_as<double>(ds, cfg);
}

inline nlohmann::ordered_json experiment_json(const ExperimentResult& r) {
  nlohmann::ordered_json j{{"set_classifier", report_json(r.set_classifier)}};
  if (r.baseline) {
    j["baseline_averaged"] = report_json(r.baseline->averaged);
    j["baseline_majority"] = report_json(r.baseline->majority);
    j["baseline_view_accuracy"] = r.baseline_view_accuracy;
  }
  j["final_loss"] = r.losses.empty() ? 0.0 : r.losses.back();
  j["seconds"] = r.seconds;
  return j;
}

// Finite-difference check of every parameter of a small model under the full
// training loss on one packed batch of tracklets.
struct GradientSuiteConfig {
  std::size_t input_dim = 12;
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t num_classes = 10;
  std::size_t length = 8;
  std::size_t tracklets = 1;
  double step = 1e-5;
  std::uint64_t seed = 0;
};

inline GradCheckReport gradient_suite(const GradientSuiteConfig& g) {
  Rng rng = Rng::stream(g.seed, 0);
  RoiPool pool;
  pool.class_counts.assign(g.num_classes, 0.0);
  for (std::size_t k = 0; k < g.length * g.tracklets; ++k) {
    RoiRecord r;
    r.feature.resize(g.input_dim);
    for (double& v : r.feature) v = rng.normal();
    r.category = static_cast<std::size_t>(rng.index(g.num_classes));
    r.identity = static_cast<std::int64_t>(rng.index(3));
    pool.class_counts[r.category] += 1;
    pool.records.push_back(std::move(r));
  }
  for (double& n : pool.class_counts) n = std::max(n, 1.0);
  std::vector<SampledTracklet> batch;
  for (std::size_t b = 0; b < g.tracklets; ++b) {
    Tracklet t;
    for (std::size_t i = 0; i < g.length; ++i) t.items.push_back(b * g.length + i);
    t.soft_label = soft_label(pool, t.items);
    batch.push_back({&pool, std::move(t)});
  }
  SetClassifierConfig mc;
  mc.input_dim = g.input_dim;
  mc.model_dim = g.model_dim;
  mc.heads = g.heads;
  mc.encoder_layers = g.layers;
  mc.num_classes = g.num_classes;
  mc.feedforward_dim = 4 * g.model_dim;
  Rng init = Rng::stream(g.seed, 1);
  SetClassifier<double> model(mc, init);
  // Unit loss weights keep every term's gradient well above round-off.
  const LossWeights w{1, 1, 1};
  std::uint64_t last_pattern = 0;
  return check_gradients(
      model.parameters(),
      [&](bool accumulate) {
        Tape<double> tape;
        const auto vars = accumulate ? bind_trainable(tape, model)
                                     : bind_frozen(tape, static_cast<const SetClassifier<double>&>(model));
        auto loss = batch_loss<double>(vars, batch, w);
        if (accumulate) tape.backward(loss.total);
        last_pattern = relu_pattern(tape);
        return loss.total.value()[0];
      },
      g.step, [&] { return last_pattern; });
}

}  // namespace setcls
