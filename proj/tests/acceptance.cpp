// Acceptance harness. Each criterion prints exactly one PASS/FAIL line,
// followed by indented detail lines. Usage: acceptance [all | N ...]

#include "oracles.hpp"
#include "setcls/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstring>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>

using namespace setcls;

namespace {

const std::string kSource = SETCLS_SOURCE_DIR;
const std::string kData = SETCLS_TEST_DATA;

struct Outcome {
  bool pass = true;
  std::vector<std::string> details;

  void require(bool ok, const std::string& what) {
    pass = pass && ok;
    details.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
  }
  void note(const std::string& what) { details.push_back("     " + what); }
};

template <typename... A>
std::string fmt(const char* f, A... a) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, a...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor<double> random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double sd = 1.0) {
  Tensor<double> t(Shape{rows, cols});
  for (auto& v : t.values()) v = rng.normal(0.0, sd);
  return t;
}

// ---- 1 ----

Outcome gradient_suite_criterion() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  GradientSuiteConfig g;  // d=64, 4 heads, 2 layers, C=10, L=8
  const GradCheckReport r = gradient_suite(g);
  const double secs = seconds_since(t0);
  std::string worst_name;
  for (const auto& e : r.entries) {
    if (e.rel_error == r.worst) worst_name = e.name;
  }
  o.require(r.passed(1e-5), fmt("worst relative error %.3e (%s) over %zu tensors, tolerance 1e-5", r.worst,
                                worst_name.c_str(), r.entries.size()));
  std::size_t refined = 0, checked = 0;
  for (const auto& e : r.entries) {
    refined += e.refined;
    checked += e.size;
  }
  o.note(fmt("%zu entries compared; %zu needed a smaller step to stay off a rectifier kink, %zu left out", checked,
             refined, r.skipped));
  o.require(secs < 60, fmt("runtime %.1f s < 60 s", secs));
  return o;
}

// ---- 2 ----

Outcome permutation_criterion() {
  Outcome o;
  Rng rng(2024);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    SetClassifierConfig c;
    const std::size_t heads[] = {1, 2, 4};
    c.heads = heads[rng.index(3)];
    c.model_dim = c.heads * (4 + rng.index(5));
    c.encoder_layers = 1 + rng.index(3);
    c.feedforward_dim = 2 * c.model_dim;
    c.input_dim = 2 + rng.index(10);
    c.num_classes = 2 + rng.index(10);
    Rng init(rng.integer(0, 1 << 30));
    const SetClassifier<double> model(c, init);
    const std::size_t length = 1 + rng.index(40);
    const Tensor<double> x = random_matrix(length, c.input_dim, rng);
    std::vector<std::size_t> perm(length);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = length; i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
    Tensor<double> xp(Shape{length, c.input_dim});
    for (std::size_t r = 0; r < length; ++r) xp.mat().row(r) = x.mat().row(perm[r]);
    const auto a = forward(x, model).set_logits;
    const auto b = forward(xp, model).set_logits;
    for (std::size_t k = 0; k < a.size(); ++k) worst = std::max(worst, std::abs(a[k] - b[k]));
  }
  o.require(worst < 1e-9, fmt("max |delta set_logits| over 100 pairs = %.3e < 1e-9", worst));
  return o;
}

// ---- 3 ----

Outcome sampler_criterion() {
  Outcome o;
  // 100 records over 10 classes with a long-tailed profile.
  const std::size_t per_class[10] = {30, 20, 14, 10, 8, 6, 5, 3, 2, 2};
  RoiPool pool;
  std::map<std::size_t, double> counts;
  std::vector<std::size_t> record_class;
  for (std::size_t c = 0; c < 10; ++c) {
    counts[c] = static_cast<double>(per_class[c]);
    pool.class_counts.push_back(static_cast<double>(per_class[c]));
    for (std::size_t k = 0; k < per_class[c]; ++k) {
      RoiRecord r;
      r.feature = {0.0};
      r.category = c;
      r.identity = static_cast<std::int64_t>(pool.records.size() / 4);
      pool.records.push_back(r);
      record_class.push_back(c);
    }
  }
  auto tail_mass = [&](const std::vector<double>& dist) {
    double m = 0;
    for (std::size_t k = 0; k < dist.size(); ++k) m += per_class[record_class[k]] < 10 ? dist[k] : 0.0;
    return m;
  };
  const std::size_t draws = 1000000;
  double prev_analytic = -1, prev_empirical = -1;
  bool monotone = true;
  for (double p : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    SamplerConfig cfg;
    cfg.exponent = p;
    const TrackletSampler sampler(pool, cfg);
    const auto exact = oracle::sampling_probs(record_class, counts, p);
    double oracle_gap = 0;
    for (std::size_t k = 0; k < exact.size(); ++k) {
      oracle_gap = std::max(oracle_gap, std::abs(exact[k] - sampler.probabilities()[k]));
    }

    // 10^6 tracklet draws; every record in them is one multinomial draw.
    Rng rng = Rng::stream(3, static_cast<std::uint64_t>(p * 100));
    std::vector<double> hits(pool.records.size(), 0.0);
    double items = 0;
    for (std::size_t n = 0; n < draws; ++n) {
      for (std::size_t k : sampler.sample(rng).items) hits[k] += 1;
    }
    items = std::accumulate(hits.begin(), hits.end(), 0.0);
    double l1 = 0, expected = 0;
    for (std::size_t k = 0; k < hits.size(); ++k) {
      hits[k] /= items;
      l1 += std::abs(hits[k] - exact[k]);
      expected += std::sqrt(2 * exact[k] * (1 - exact[k]) / (3.141592653589793 * items));
    }

    // The same count of single-record draws, for reference.
    std::vector<double> single(pool.records.size(), 0.0);
    for (std::size_t n = 0; n < draws; ++n) single[sampler.draw_record(rng)] += 1;
    double l1_single = 0, expected_single = 0;
    for (std::size_t k = 0; k < single.size(); ++k) {
      l1_single += std::abs(single[k] / draws - exact[k]);
      expected_single += std::sqrt(2 * exact[k] * (1 - exact[k]) / (3.141592653589793 * draws));
    }

    o.require(oracle_gap < 1e-15 && l1 < 0.005,
              fmt("p=%.2f: L1 %.5f < 0.005 over %zu tracklet draws (%.0f records; exact-sampler mean %.5f), "
                  "analytic vs oracle %.1e",
                  p, l1, draws, items, expected, oracle_gap));
    o.note(fmt("p=%.2f: reference L1 over %zu single-record draws %.5f (exact-sampler mean %.5f)", p, draws,
               l1_single, expected_single));
    const double ta = tail_mass(sampler.probabilities()), te = tail_mass(hits);
    monotone = monotone && ta >= prev_analytic && te >= prev_empirical;
    o.note(fmt("p=%.2f: tail mass analytic %.4f empirical %.4f", p, ta, te));
    prev_analytic = ta;
    prev_empirical = te;
  }
  o.require(monotone, "tail-class mass non-decreasing across the exponent grid (analytic and empirical)");
  return o;
}

// ---- 4 ----

Outcome loss_criterion() {
  Outcome o;
  Rng rng(404);
  double worst_set = 0, worst_instance = 0, worst_cluster = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t classes = 2 + rng.index(8), length = 1 + rng.index(12);
    const Tensor<double> set_logits = random_matrix(1, classes, rng, 3.0);
    const Tensor<double> tokens = random_matrix(length, classes, rng, 3.0);
    std::vector<std::size_t> cats(length);
    std::vector<std::int64_t> ids(length);
    for (std::size_t l = 0; l < length; ++l) {
      cats[l] = rng.index(classes);
      ids[l] = static_cast<std::int64_t>(rng.index(3));
    }
    const auto y = soft_label(cats, classes);
    std::vector<oracle::Row> rows(length);
    for (std::size_t l = 0; l < length; ++l) {
      for (std::size_t c = 0; c < classes; ++c) rows[l].push_back(tokens.at(l, c));
    }
    const oracle::Row z = set_logits.to_vector();
    worst_set = std::max(worst_set, std::abs(set_loss(y, set_logits) - oracle::soft_ce(y, z)));
    worst_instance = std::max(worst_instance, std::abs(instance_loss(cats, tokens) - oracle::instance_loss(cats, rows)));
    worst_cluster =
        std::max(worst_cluster, std::abs(cluster_loss(cats, ids, tokens) - oracle::cluster_loss(cats, ids, rows)));
  }
  o.require(worst_set <= 1e-10, fmt("set loss max |diff| %.2e over 50 instances", worst_set));
  o.require(worst_instance <= 1e-10, fmt("instance loss max |diff| %.2e over 50 instances", worst_instance));
  o.require(worst_cluster <= 1e-10, fmt("cluster loss max |diff| %.2e over 50 instances", worst_cluster));

  Tensor<double> same(Shape{5, 6});
  const Tensor<double> row = random_matrix(1, 6, rng, 2.0);
  for (std::size_t r = 0; r < 5; ++r) same.mat().row(r) = row.mat().row(0);
  const std::vector<std::int64_t> one_id(5, 7);
  const double kl_same = cluster_kl_term(one_id, same);
  const std::vector<std::int64_t> singletons{0, 1, 2, 3, 4};
  const double kl_single = cluster_kl_term(singletons, random_matrix(5, 6, rng, 2.0));
  o.require(kl_same == 0.0, fmt("KL on identical distributions = %g", kl_same));
  o.require(kl_single == 0.0, fmt("KL with singleton identities = %g", kl_single));
  return o;
}

// ---- 5 ----

Outcome central_claim_criterion() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentConfig base_cfg = load_config(kSource + "/configs/s1.conf");
  double set_rare = 0, set_all = 0, base_rare = 0, base_all = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    ExperimentConfig cfg = base_cfg;
    cfg.train.seed = seed;
    cfg.synth.seed = seed;
    const SynthDataset ds = generate_dataset(cfg.synth);
    const auto groups = dataset_groups(ds);
    const SetClassifier<float> model = train<float>(ds.train, cfg.train);
    const auto pred = predict_labels(model, ds.test);

    PerViewTrainConfig pc;
    pc.sampler = cfg.train.sampler;
    pc.optimizer = cfg.train.optimizer;
    pc.iterations = cfg.train.iterations;
    pc.seed = seed;
    const auto base = train_perview<float>(
        ds.train, {ds.train.feature_dim(), cfg.train.model.model_dim, ds.train.num_classes()}, pc);
    const auto base_pred = perframe_predict(base, ds.test);

    std::vector<std::size_t> labels;
    for (const auto& t : ds.test) labels.push_back(t.label);
    const EvalReport s = evaluate_predictions(pred, labels, groups, ds.train.num_classes());
    const EvalReport b = evaluate_predictions(base_pred.averaged, labels, groups, ds.train.num_classes());
    const EvalReport m = evaluate_predictions(base_pred.majority, labels, groups, ds.train.num_classes());
    std::size_t rescued = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      rescued += groups.group_of[labels[i]] == FrequencyGroups::kRare && pred[i] == labels[i] &&
                 base_pred.averaged[i] != labels[i];
    }
    o.note(fmt("seed %llu: set rare %.4f overall %.4f | per-frame avg rare %.4f overall %.4f | majority rare %.4f "
               "overall %.4f | per-view acc %.4f | rare tracklets fixed by the set classifier %zu",
               static_cast<unsigned long long>(seed), s.rare.accuracy(), s.overall.accuracy(), b.rare.accuracy(),
               b.overall.accuracy(), m.rare.accuracy(), m.overall.accuracy(), view_accuracy(base, ds.test),
               rescued));
    set_rare += s.rare.accuracy() / 3;
    set_all += s.overall.accuracy() / 3;
    base_rare += b.rare.accuracy() / 3;
    base_all += b.overall.accuracy() / 3;
  }
  const double secs = seconds_since(t0);
  o.require(set_rare - base_rare >= 0.05,
            fmt("rare-group gain %+.2f pp (set %.4f vs per-frame %.4f) >= +5 pp", 100 * (set_rare - base_rare),
                set_rare, base_rare));
  o.require(set_all >= base_all - 0.01, fmt("overall %.4f vs per-frame %.4f, drop %.2f pp <= 1 pp", set_all,
                                            base_all, 100 * (base_all - set_all)));
  o.require(secs < 1800, fmt("runtime %.0f s < 1800 s", secs));
  return o;
}

// ---- 6 ----

Outcome ablation_criterion() {
  Outcome o;
  const std::filesystem::path dir = std::filesystem::path(kSource) / "configs" / "ablation";
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.path().extension() == ".conf") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const char* row : {"mixing_single", "mixing_identity", "mixing_full", "length_8_16", "length_16_32",
                          "length_32_64", "exponent_0", "exponent_025", "exponent_05", "exponent_075", "exponent_1",
                          "loss_set_only", "loss_set_instance", "loss_all"}) {
    o.require(std::filesystem::exists(dir / (std::string(row) + ".conf")), std::string("config present: ") + row);
  }
  std::map<std::string, ExperimentResult> results;
  for (const auto& f : files) {
    const std::string name = f.stem().string();
    try {
      const ExperimentResult r = run_experiment(load_config(f.string()));
      const auto report = experiment_json(r);
      const bool complete = std::isfinite(r.set_classifier.overall.accuracy()) && report.contains("set_classifier");
      o.require(complete, fmt("%-18s overall %.4f rare %.4f common %.4f frequent %.4f (%.0f s)", name.c_str(),
                              r.set_classifier.overall.accuracy(), r.set_classifier.rare.accuracy(),
                              r.set_classifier.common.accuracy(), r.set_classifier.frequent.accuracy(), r.seconds));
      results[name] = r;
    } catch (const std::exception& e) {
      o.require(false, name + " threw: " + e.what());
    }
  }
  double on = 0, off = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    double rare[2];
    for (int k = 0; k < 2; ++k) {
      const std::string name = k ? "mixing_full" : "mixing_identity";
      if (seed == 1 && results.count(name)) {
        rare[k] = results[name].set_classifier.rare.accuracy();
        continue;
      }
      ExperimentConfig cfg = load_config((dir / (name + ".conf")).string());
      cfg.train.seed = seed;
      cfg.synth.seed = seed;
      rare[k] = run_experiment(cfg).set_classifier.rare.accuracy();
    }
    o.note(fmt("seed %llu: rare accuracy multi-class off %.4f, on %.4f", static_cast<unsigned long long>(seed),
               rare[0], rare[1]));
    off += rare[0] / 3;
    on += rare[1] / 3;
  }
  o.require(on >= off, fmt("multi-class on rare %.4f >= off %.4f (mean of 3 seeds)", on, off));
  return o;
}

// ---- 7 ----

Outcome fusion_criterion() {
  Outcome o;
  const FusionConfig def;
  FusionConfig flat = def;
  flat.length_penalty = false;
  const double c08[1] = {0.8}, c0512[1] = {0.512}, c1[1] = {1.0};
  const double a = fuse_scores(c08, 0.8, 10, def)[0];
  const double b = fuse_scores(c0512, 1.0, 1, flat)[0];
  const double c = fuse_scores(c1, 0.512, 1, flat)[0];
  o.require(std::abs(a - 8.0) <= 1e-12, fmt("c=s=0.8, L=10 -> %.15f (8.0)", a));
  o.require(std::abs(b - 0.8) <= 1e-12, fmt("0.512^(1/3) -> %.15f (0.8)", b));
  o.require(std::abs(c - 0.64) <= 1e-12, fmt("0.512^(2/3) -> %.15f (0.64)", c));
  Rng rng(77);
  std::size_t violations = 0;
  for (int i = 0; i < 10000; ++i) {
    const double cv = rng.uniform(), sv = rng.uniform();
    const std::size_t len = 1 + rng.index(200);
    const double cc[2] = {cv, rng.uniform(cv, 1.0)};
    const double base = fuse_scores(std::span<const double>(cc, 1), sv, len, def)[0];
    violations += fuse_scores(std::span<const double>(cc + 1, 1), sv, len, def)[0] < base;
    violations += fuse_scores(std::span<const double>(cc, 1), rng.uniform(sv, 1.0), len, def)[0] < base;
    violations += fuse_scores(std::span<const double>(cc, 1), sv, len + 1 + rng.index(50), def)[0] < base;
  }
  o.require(violations == 0, fmt("monotone in c, s and L on 10^4 random triples (%zu violations)", violations));
  return o;
}

// ---- 8 ----

std::string checkpoint_bytes(const SetClassifier<float>& m) {
  std::ostringstream os;
  write_checkpoint(os, m);
  return os.str();
}

Outcome determinism_criterion() {
  Outcome o;
  SynthConfig sc;
  sc.num_classes = 12;
  sc.feature_dim = 16;
  sc.instance_budget = 200;
  sc.views_per_instance = 8;
  sc.seed = 5;
  const SynthDataset ds = generate_dataset(sc);
  TrainConfig tc;
  tc.model.model_dim = 32;
  tc.model.heads = 4;
  tc.model.encoder_layers = 2;
  tc.model.feedforward_dim = 64;
  tc.sampler.tracklets_per_batch = 16;
  tc.iterations = 40;
  tc.seed = 11;
  const auto m1 = train<float>(ds.train, tc), m2 = train<float>(ds.train, tc);
  const std::string b1 = checkpoint_bytes(m1), b2 = checkpoint_bytes(m2);
  o.require(b1 == b2, fmt("same seed twice: checkpoints byte-identical (%zu bytes)", b1.size()));

  std::istringstream is(b1);
  const auto back = read_checkpoint<float>(is);
  bool exact = checkpoint_bytes(back) == b1;
  std::vector<const Tensor<float>*> pa, pb;
  m1.for_each_parameter([&](const Parameter<float>& p) { pa.push_back(&p.value); });
  back.for_each_parameter([&](const Parameter<float>& p) { pb.push_back(&p.value); });
  exact = exact && pa.size() == pb.size();
  for (std::size_t i = 0; exact && i < pa.size(); ++i) {
    exact = std::memcmp(pa[i]->data(), pb[i]->data(), pa[i]->size() * sizeof(float)) == 0;
  }
  o.require(exact, "checkpoint round trip is bit-exact");

  std::stringstream strk;
  write_records_binary(strk, ds.train.records);
  const std::string first = strk.str();
  const auto records = read_records_binary(strk);
  bool same = records.size() == ds.train.records.size();
  for (std::size_t k = 0; same && k < records.size(); ++k) {
    const auto& x = records[k];
    const auto& y = ds.train.records[k];
    same = x.category == y.category && x.identity == y.identity && x.frame == y.frame && x.box == y.box &&
           x.feature.size() == y.feature.size() &&
           std::memcmp(x.feature.data(), y.feature.data(), x.feature.size() * sizeof(double)) == 0;
  }
  std::stringstream again;
  write_records_binary(again, records);
  o.require(same && again.str() == first, fmt("STRK round trip is bit-exact (%zu records)", records.size()));

  const RoiPool pool = load_pool(kData + "/fixture_pool.jsonl", kData + "/fixture_counts.json");
  SamplerConfig cfg;
  cfg.tracklets_per_batch = 12;
  Rng rng(42);
  std::ostringstream got;
  write_tracklets_text(got, generate_batch(pool, cfg, rng));
  std::ifstream golden(kData + "/golden_tracklets_seed42.txt");
  std::stringstream expected;
  expected << golden.rdbuf();
  o.require(golden && got.str() == expected.str(), "golden tracklet file reproduced byte for byte");
  return o;
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "gradient suite", gradient_suite_criterion},
      {2, "permutation invariance", permutation_criterion},
      {3, "sampler fidelity", sampler_criterion},
      {4, "loss oracles", loss_criterion},
      {5, "central claim, desk scale", central_claim_criterion},
      {6, "ablation regression", ablation_criterion},
      {7, "fusion arithmetic", fusion_criterion},
      {8, "determinism and formats", determinism_criterion},
  };
  std::vector<int> wanted;
  for (int i = 1; i < argc; ++i) {
    if (std::string(argv[i]) != "all") wanted.push_back(std::stoi(argv[i]));
  }
  bool ok = true;
  for (const auto& c : all) {
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), c.id) == wanted.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out.require(false, std::string("exception: ") + e.what());
    }
    std::printf("%s criterion %d (%s) [%.1f s]\n", out.pass ? "PASS" : "FAIL", c.id, c.name, seconds_since(t0));
    for (const auto& d : out.details) std::printf("  %s\n", d.c_str());
    std::fflush(stdout);
    ok = ok && out.pass;
  }
  return ok ? 0 : 1;
}
