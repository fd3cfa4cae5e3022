// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>
#include <string>

#include "onconet/config.hpp"
#include "onconet/datapipe.hpp"
#include "onconet/gradcheck_suite.hpp"
#include "onconet/metrics.hpp"
#include "onconet/models.hpp"
#include "onconet/runtime.hpp"
#include "onconet/trainer.hpp"
#include "support.hpp"

using namespace onconet;
using testing_support::TempDir;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

Outcome check_gradients() {
  const auto t0 = Clock::now();
  const auto cases = run_gradcheck_suite();
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::string failed;
  for (const auto& c : cases) {
    worst = std::max(worst, c.report.max_rel_err);
    if (!c.report.pass) failed += " " + c.op + "#" + std::to_string(c.instance);
  }
  const bool model_checked = !cases.empty() && cases.back().op == "fcn+aggres_cnn";
  std::ostringstream os;
  os << cases.size() << " cases, max rel err " << std::scientific << std::setprecision(2) << worst << ", "
     << std::fixed << std::setprecision(1) << secs << "s" << (failed.empty() ? "" : ", failed:" + failed);
  return {all_pass(cases) && model_checked && worst < 1e-4 && secs < 60.0, os.str()};
}

Outcome check_shapes() {
  ModelConfig cfg;
  bool ok = true;
  std::ostringstream os;
  std::mt19937_64 rng(1);
  for (std::size_t size : {16u, 32u, 64u, 128u, 512u}) {
    cfg.input_size = size;
    auto fcn = build_fcn<float>(cfg, 1);
    const auto x = oracle::random_tensor<float>({1, 2, size, size}, rng);
    Tape<float> t(false);
    const Shape got = fcn(t, t.constant(x)).shape();
    ok = ok && got == x.shape();
    os << size << ":" << shape_str(got) << " ";
  }
  double worst = 0.0;
  for (std::size_t size : {64u, 512u}) {
    cfg.input_size = size;
    Model<float> model(cfg, 2);
    const std::size_t n = size == 512 ? 2 : 5;
    const Tensor<float> p = model.predict(oracle::random_tensor<float>({n, 2, size, size}, rng, -2, 2));
    ok = ok && p.shape() == Shape{n, 2};
    for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, std::abs(double(p[2 * i]) + p[2 * i + 1] - 1.0));
  }
  ok = ok && worst <= 1e-6;
  os << "| max |row sum - 1| " << std::scientific << std::setprecision(2) << worst;
  return {ok, os.str()};
}

Outcome check_ledger() {
  auto total = [](Variant v, bool fcn, std::size_t ch) {
    ModelConfig c;
    c.variant = v;
    c.use_fcn = fcn;
    c.input_channels = ch;
    return Model<float>(c, 0).ledger().total;
  };
  const auto b1 = total(Variant::BaselineCnn, false, 1), b2 = total(Variant::BaselineCnn, false, 2);
  const auto f1 = total(Variant::FcnOnly, true, 1), f2 = total(Variant::FcnOnly, true, 2);
  const auto a2 = total(Variant::AggResCnn, false, 2), af2 = total(Variant::AggResCnn, true, 2);
  ModelConfig agg;
  const bool delta = b2 - b1 == 800;
  const bool fcn_const = f1 == f2 && f1 == oracle::fcn_count({32, 64, 128, 256});
  const bool goldens = a2 == 132562 && a2 == oracle::aggres_count(agg) && f1 == 885793 && af2 == 1018355;
  std::ostringstream os;
  os << "(a) baseline 2ch-1ch " << b2 - b1 << " (b) fcn " << f1 << "/" << f2 << " (c) aggres " << a2
     << ", fcn+aggres " << af2;
  return {delta && fcn_const && goldens, os.str()};
}

Outcome check_auc() {
  const double worked = metrics::roc_auc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<int>{0, 0, 1, 1});
  std::mt19937_64 rng(99);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(2, 50)(rng);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t k = 0; k < n; ++k) {
      s[k] = i % 2 ? std::uniform_real_distribution<double>()(rng) : std::uniform_int_distribution<int>(0, 5)(rng);
      y[k] = std::bernoulli_distribution(0.4)(rng);
    }
    y[0] = 0;
    y[1] = 1;
    worst = std::max(worst, std::abs(metrics::roc_auc(s, y) - oracle::pair_count_auc(s, y)));
  }
  std::ostringstream os;
  os << "worked example " << worked << ", max |rank - pairs| " << std::scientific << std::setprecision(2) << worst
     << " over 100 instances";
  return {worked == 0.75 && worst <= 1e-12, os.str()};
}

Outcome check_determinism() {
  const bool prev = deterministic();
  set_deterministic(true);
  TempDir dir("acc-det");
  SynthOptions so;
  so.n = 10;
  so.image_size = 32;
  so.depth = 3;
  so.positives = 3;
  const Dataset data = load_split(synth_dataset(dir / "data", so), Split::Train, Modality::PetCt, 32);
  struct Run {
    std::vector<std::vector<float>> batches;
    std::vector<double> losses;
    std::vector<double> metrics;
  };
  auto run = [&] {
    Run r;
    ExperimentConfig c;
    c.model = testing_support::small_model(32, 2);
    c.epochs = 3;
    c.batch_size = 4;
    c.seed = 5;
    Model<float> model(c.model, c.seed);
    Adam<float> adam(AdamOptions{c.lr});
    TrainOptions o;
    o.write_outputs = false;
    o.on_batch = [&](std::size_t, std::size_t, const Batch& b) { r.batches.push_back(b.x.storage()); };
    for (const auto& h : train(c, data, model, adam, o).history) r.losses.push_back(h.loss);
    const auto ev = evaluate(model, data);
    r.metrics = {ev.report.auc, ev.report.sensitivity, ev.report.specificity, ev.loss};
    r.metrics.insert(r.metrics.end(), ev.scores.begin(), ev.scores.end());
    return r;
  };
  const Run a = run(), b = run();
  set_deterministic(prev);
  std::ostringstream os;
  os << a.batches.size() << " batches, " << a.losses.size() << " losses, " << a.metrics.size() << " metric values";
  return {!a.batches.empty() && a.batches == b.batches && a.losses == b.losses && a.metrics == b.metrics, os.str()};
}

Outcome check_rebalancing() {
  TempDir dir("acc-rebal");
  SynthOptions so;
  so.n = 100;
  so.positives = 19;
  so.image_size = 16;
  so.depth = 2;
  const Dataset data = load_split(synth_dataset(dir / "data", so), Split::Train, Modality::PetCt, 16);
  ExperimentConfig c;
  c.model = testing_support::small_model(16, 2);
  c.epochs = 3;
  c.batch_size = 27;
  std::vector<std::size_t> pos(c.epochs, 0), neg(c.epochs, 0);
  Model<float> model(c.model, 1);
  Adam<float> adam(AdamOptions{c.lr});
  TrainOptions o;
  o.write_outputs = false;
  o.on_batch = [&](std::size_t epoch, std::size_t, const Batch& b) {
    for (int l : b.labels) (l ? pos : neg)[epoch]++;
  };
  train(c, data, model, adam, o);
  bool ok = true;
  std::ostringstream os;
  os << "19/100 positives; per epoch pos/neg:";
  for (std::size_t e = 0; e < c.epochs; ++e) {
    ok = ok && pos[e] == neg[e] && neg[e] == 81;
    os << " " << pos[e] << "/" << neg[e];
  }
  return {ok, os.str()};
}

Outcome check_overfit() {
  const auto t0 = Clock::now();
  TempDir dir("acc-overfit");
  SynthOptions so;
  so.n = 8;
  so.image_size = 64;
  const Dataset data = load_split(synth_dataset(dir / "data", so), Split::Train, Modality::PetCt, 64);
  ExperimentConfig c;
  c.model.input_size = 64;
  c.epochs = 200;
  c.batch_size = 8;
  c.lr = 0.0006;
  c.seed = 1;
  Model<float> model(c.model, c.seed);
  Adam<float> adam(AdamOptions{c.lr});
  TrainOptions o;
  o.write_outputs = false;
  const auto res = train(c, data, model, adam, o);
  const auto ev = evaluate(model, data);
  const double secs = seconds_since(t0);
  std::ostringstream os;
  os << res.steps << " Adam steps, train CE " << std::scientific << std::setprecision(3) << ev.loss << ", AUC "
     << std::defaultfloat << ev.report.auc << ", " << std::fixed << std::setprecision(1) << secs << "s";
  return {res.steps == 200 && ev.loss < 0.05 && ev.report.auc == 1.0 && secs < 300.0, os.str()};
}

Outcome check_paper_regime() {
  const auto t0 = Clock::now();
  TempDir dir("acc-canonical");
  SynthOptions so;
  so.n = 8;
  so.image_size = 512;
  so.depth = 3;
  const Manifest m = synth_dataset(dir / "data", so);
  ExperimentConfig c = ExperimentConfig::paper_regime();
  c.micro_batch = 1;
  c.output_dir = (dir / "run").string();
  c.validate();
  const Dataset data = load_split(m, Split::Train, c.modality, c.model.input_size);
  Model<float> model(c.model, c.seed);
  Adam<float> adam(AdamOptions{c.lr});
  TrainOptions o;
  o.epoch_limit = 1;
  const auto res = train(c, data, model, adam, o);
  bool finite = !res.history.empty();
  for (const auto& h : res.history) finite = finite && std::isfinite(h.loss);
  const bool declared = c.epochs == 100 && c.batch_size == 8 && c.lr == 0.0006 && c.model.input_size == 512;
  const bool written = std::filesystem::exists(dir / "run/history.csv") && std::filesystem::exists(dir / "run/weights.bin");
  std::ostringstream os;
  os << "declared " << c.epochs << " epochs, ran " << res.epochs_run << " (" << res.steps << " steps, loss "
     << (res.history.empty() ? 0.0 : res.history.back().loss) << "), " << std::fixed << std::setprecision(1)
     << seconds_since(t0) << "s";
  return {declared && finite && written && res.epochs_run == 1, os.str()};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradcheck", check_gradients},       {"shape-contract", check_shapes},
      {"param-ledger", check_ledger},       {"auc-oracle", check_auc},
      {"determinism", check_determinism},   {"rebalancing", check_rebalancing},
      {"overfit", check_overfit},           {"paper-regime-smoke", check_paper_regime},
  };
  int failures = 0;
  for (const auto& [name, fn] : criteria) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  }
  std::cout << (criteria.size() - failures) << "/" << criteria.size() << " criteria pass" << std::endl;
  return failures == 0 ? 0 : 1;
}
