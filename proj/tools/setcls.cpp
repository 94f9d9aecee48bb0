#include "setcls/experiment.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>

using namespace setcls;

namespace {

struct Dataset {
  RoiPool pool;
  std::vector<TestTracklet> test;
  std::optional<FrequencyGroups> groups;
};

std::vector<TestTracklet> read_test_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open test set " + path);
  return read_test_jsonl(is);
}

FrequencyGroups read_groups(const std::string& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw std::runtime_error("cannot open manifest " + manifest_path);
  return frequency_groups(manifest_instance_counts(nlohmann::json::parse(is)));
}

// File-backed data when the config names a training pool, otherwise a
// synthetic dataset from its synth section.
Dataset load_data(const ExperimentConfig& cfg, std::optional<SynthDataset>& synth) {
  Dataset d;
  if (cfg.train_pool.empty()) {
    synth = generate_dataset(cfg.synth);
    d.pool = synth->train;
    d.test = synth->test;
    d.groups = dataset_groups(*synth);
    return d;
  }
  if (cfg.train_counts.empty()) throw std::invalid_argument("data.train requires data.counts");
  d.pool = load_pool(cfg.train_pool, cfg.train_counts);
  if (!cfg.test_set.empty()) d.test = read_test_file(cfg.test_set);
  if (!cfg.manifest.empty()) d.groups = read_groups(cfg.manifest);
  return d;
}

template <typename T>
int run_train(ExperimentConfig cfg, const std::string& report_path) {
  std::optional<SynthDataset> synth;
  const Dataset data = load_data(cfg, synth);
  std::optional<RoiPool> secondary;
  if (!cfg.secondary_pool.empty()) {
    if (cfg.secondary_counts.empty()) throw std::invalid_argument("data.secondary requires data.secondary_counts");
    secondary = load_pool(cfg.secondary_pool, cfg.secondary_counts, data.pool.num_classes());
  }
  const bool can_eval = !data.test.empty() && data.groups;

  TrainHooks<T> hooks;
  hooks.on_step = [&](std::size_t it, const LossReport& l) {
    if (cfg.train.log_interval && (it + 1) % cfg.train.log_interval == 0) {
      std::fprintf(stderr, "iter %6zu  total %.6f  set %.6f  instance %.6f  cluster %.6f\n", it + 1, l.total, l.set,
                   l.instance, l.cluster);
    }
  };
  if (can_eval) {
    hooks.on_eval = [&](std::size_t it, const SetClassifier<T>& m) {
      const EvalReport r = evaluate(data.test, m, *data.groups);
      std::fprintf(stderr, "eval %6zu  overall %.4f  rare %.4f\n", it + 1, r.overall.accuracy(), r.rare.accuracy());
    };
  }
  const SetClassifier<T> model = train<T>(data.pool, cfg.train, secondary ? &*secondary : nullptr, hooks);
  if (!can_eval) return 0;

  nlohmann::ordered_json report;
  const EvalReport r = evaluate(data.test, model, *data.groups);
  report["set_classifier"] = report_json(r);
  std::cerr << "set classifier\n" << report_table(r);
  if (cfg.run_baseline) {
    PerViewTrainConfig pc;
    pc.sampler = cfg.train.sampler;
    pc.optimizer = cfg.train.optimizer;
    pc.iterations = cfg.train.iterations;
    pc.seed = cfg.train.seed;
    const auto base =
        train_perview<T>(data.pool, {data.pool.feature_dim(), cfg.train.model.model_dim, data.pool.num_classes()}, pc);
    const PerFrameReport b = perframe_baseline(base, data.test, *data.groups);
    report["baseline_averaged"] = report_json(b.averaged);
    report["baseline_majority"] = report_json(b.majority);
    std::cerr << "per-frame baseline (averaged)\n" << report_table(b.averaged);
  }
  if (report_path.empty()) {
    std::cout << report.dump() << '\n';
  } else {
    std::ofstream(report_path) << report.dump(2) << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tracklet set classifier: data generation, training, evaluation and reclassification"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic long-tailed dataset");
  SynthConfig synth;
  std::string gen_out;
  gen->add_option("--out", gen_out, "Output prefix (.strk, .counts.json, .test.jsonl, .manifest.json)")->required();
  gen->add_option("--seed", synth.seed, "Random seed");
  gen->add_option("--classes", synth.num_classes)->capture_default_str();
  gen->add_option("--feature-dim", synth.feature_dim)->capture_default_str();
  gen->add_option("--zipf", synth.zipf_exponent)->capture_default_str();
  gen->add_option("--budget", synth.instance_budget, "Training instances over all classes")->capture_default_str();
  gen->add_option("--views", synth.views_per_instance)->capture_default_str();
  gen->add_option("--view-noise", synth.view_noise_sigma)->capture_default_str();
  gen->add_option("--occlusion", synth.occlusion_prob)->capture_default_str();
  gen->add_option("--prototype-sigma", synth.prototype_sigma)->capture_default_str();
  gen->add_option("--instance-sigma", synth.instance_sigma)->capture_default_str();
  gen->add_option("--test-per-class", synth.test_instances_per_class)->capture_default_str();
  gen->add_option("--extra-proposals", synth.extra_proposals_per_view)->capture_default_str();

  // train
  auto* tr = app.add_subcommand("train", "Train a set classifier from a config file");
  std::string config_path, ckpt_out, report_out;
  std::optional<std::uint64_t> train_seed;
  std::optional<std::size_t> train_iters;
  tr->add_option("config", config_path, "key = value config file")->required()->check(CLI::ExistingFile);
  tr->add_option("--seed", train_seed, "Override the training seed");
  tr->add_option("--iterations", train_iters, "Override the iteration count");
  tr->add_option("--out", ckpt_out, "Checkpoint path");
  tr->add_option("--report", report_out, "Write the metrics report here instead of stdout");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a test tracklet file");
  std::string ev_ckpt, ev_test, ev_manifest, ev_json;
  ev->add_option("--checkpoint", ev_ckpt)->required()->check(CLI::ExistingFile);
  ev->add_option("--test", ev_test, "Test tracklets (JSONL)")->required()->check(CLI::ExistingFile);
  ev->add_option("--manifest", ev_manifest, "Dataset manifest holding training instance counts")
      ->required()
      ->check(CLI::ExistingFile);
  ev->add_option("--json", ev_json, "Write the JSON report here instead of stdout");

  // reclassify
  auto* rc = app.add_subcommand("reclassify", "Fuse set-classifier scores into predicted tracklets");
  std::string rc_ckpt, rc_in, rc_out;
  FusionConfig fusion;
  bool no_length_penalty = false;
  rc->add_option("--checkpoint", rc_ckpt)->required()->check(CLI::ExistingFile);
  rc->add_option("--input", rc_in, "Tracklet JSONL with views and optional score")->required()->check(CLI::ExistingFile);
  rc->add_option("--output", rc_out, "Output JSONL")->required();
  rc->add_option("--lambda-c", fusion.lambda_c)->capture_default_str();
  rc->add_option("--lambda-s", fusion.lambda_s)->capture_default_str();
  rc->add_flag("--no-length-penalty", no_length_penalty);
  rc->add_flag("--scalar-c", fusion.scalar_c, "Fuse only the top set-classifier probability");

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of every model parameter");
  GradientSuiteConfig gcfg;
  double tolerance = 1e-5;
  gc->add_option("--seed", gcfg.seed);
  gc->add_option("--tolerance", tolerance)->capture_default_str();
  gc->add_option("--dim", gcfg.model_dim)->capture_default_str();
  gc->add_option("--heads", gcfg.heads)->capture_default_str();
  gc->add_option("--layers", gcfg.layers)->capture_default_str();
  gc->add_option("--classes", gcfg.num_classes)->capture_default_str();
  gc->add_option("--length", gcfg.length)->capture_default_str();

  // sample-stats
  auto* ss = app.add_subcommand("sample-stats", "Compare empirical and analytic sampling distributions");
  std::string ss_pool, ss_counts;
  std::vector<double> exponents{0.5};
  std::size_t draws = 1000000;
  std::uint64_t ss_seed = 0;
  ss->add_option("--pool", ss_pool, "Records (.jsonl or STRK)")->required()->check(CLI::ExistingFile);
  ss->add_option("--counts", ss_counts, "Class count sidecar")->required()->check(CLI::ExistingFile);
  ss->add_option("--exponent,-p", exponents, "One or more sampling exponents")->capture_default_str();
  ss->add_option("--draws", draws)->capture_default_str();
  ss->add_option("--seed", ss_seed);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const SynthDataset ds = generate_dataset(synth);
      save_dataset(ds, gen_out);
      const auto g = dataset_groups(ds);
      std::cout << nlohmann::ordered_json{{"prefix", gen_out},
                                          {"train_records", ds.train.records.size()},
                                          {"test_tracklets", ds.test.size()},
                                          {"rare", g.rare.size()},
                                          {"common", g.common.size()},
                                          {"frequent", g.frequent.size()}}
                       .dump()
                << '\n';
      return 0;
    }
    if (tr->parsed()) {
      ExperimentConfig cfg = load_config(config_path);
      if (train_seed) cfg.train.seed = *train_seed;
      if (train_iters) cfg.train.iterations = *train_iters;
      if (!ckpt_out.empty()) cfg.train.checkpoint_path = ckpt_out;
      return cfg.train.single_precision ? run_train<float>(cfg, report_out) : run_train<double>(cfg, report_out);
    }
    if (ev->parsed()) {
      const auto model = load_checkpoint<double>(ev_ckpt);
      const EvalReport r = evaluate(read_test_file(ev_test), model, read_groups(ev_manifest));
      std::cerr << report_table(r);
      if (ev_json.empty()) {
        std::cout << report_json(r).dump() << '\n';
      } else {
        std::ofstream(ev_json) << report_json(r).dump(2) << '\n';
      }
      return 0;
    }
    if (rc->parsed()) {
      fusion.length_penalty = !no_length_penalty;
      const auto model = load_checkpoint<double>(rc_ckpt);
      std::ifstream is(rc_in);
      std::vector<nlohmann::json> rows;
      std::vector<PredictedTracklet> tracklets;
      std::string line;
      while (std::getline(is, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        rows.push_back(nlohmann::json::parse(line));
        tracklets.push_back(predicted_from_json(rows.back()));
      }
      const auto out = reclassify(tracklets, model, fusion);
      std::ofstream os(rc_out);
      if (!os) throw std::runtime_error("cannot open " + rc_out);
      for (std::size_t i = 0; i < out.size(); ++i) os << reclassified_to_json(rows[i], out[i]).dump() << '\n';
      return 0;
    }
    if (gc->parsed()) {
      const GradCheckReport r = gradient_suite(gcfg);
      for (const auto& e : r.entries) {
        std::printf("%-32s %8zu  rel %.3e  abs %.3e  refined %zu  skipped %zu\n", e.name.c_str(), e.size,
                    e.rel_error, e.max_abs_error, e.refined, e.skipped);
      }
      const bool ok = r.passed(tolerance);
      std::printf("worst relative error %.3e (tolerance %.1e): %s\n", r.worst, tolerance, ok ? "PASS" : "FAIL");
      return ok ? 0 : 1;
    }
    if (ss->parsed()) {
      const RoiPool pool = load_pool(ss_pool, ss_counts);
      nlohmann::ordered_json report = nlohmann::ordered_json::array();
      for (double p : exponents) {
        SamplerConfig sc;
        sc.exponent = p;
        const TrackletSampler sampler(pool, sc);
        Rng rng(ss_seed);
        std::vector<double> hits(pool.records.size(), 0.0);
        for (std::size_t k = 0; k < draws; ++k) hits[sampler.draw_record(rng)] += 1;
        const auto& probs = sampler.probabilities();
        std::vector<double> class_analytic(pool.num_classes(), 0.0), class_empirical(pool.num_classes(), 0.0);
        double l1 = 0;
        for (std::size_t k = 0; k < hits.size(); ++k) {
          hits[k] /= static_cast<double>(draws);
          l1 += std::abs(hits[k] - probs[k]);
          class_analytic[pool.records[k].category] += probs[k];
          class_empirical[pool.records[k].category] += hits[k];
        }
        report.push_back({{"exponent", p},
                          {"draws", draws},
                          {"record_l1", l1},
                          {"class_analytic", class_analytic},
                          {"class_empirical", class_empirical}});
      }
      std::cout << report.dump(2) << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
