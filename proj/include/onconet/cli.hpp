#pragma once

// Command-line front end: synth, train, eval, params, gradcheck.
// Errors are reported as one line "error: <message>" and a nonzero status;
// unknown flags print usage and return 2.

#include <chrono>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "onconet/config.hpp"
#include "onconet/datapipe.hpp"
#include "onconet/gradcheck_suite.hpp"
#include "onconet/metrics.hpp"
#include "onconet/models.hpp"
#include "onconet/runtime.hpp"
#include "onconet/trainer.hpp"

namespace onconet {

namespace cli_detail {

inline std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  while (!s.empty() && s.back() == ' ') s.pop_back();
  return s;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

struct TrainArgs {
  std::string manifest, config, out;
  bool paper_regime = false;
  std::string modality, variant, split;
  bool no_fcn = false, no_augment = false, no_rebalance = false;
  std::size_t epochs = 0, batch_size = 0, micro_batch = 0, input_size = 0, max_epochs = 0;
  double lr = -1.0, eval_fraction = -1.0;
  long long seed = -1;
  std::string holdout;
  std::vector<std::size_t> fcn_channels, stage_channels;
  std::size_t stem_channels = 0, cardinality = 0;
};

inline ExperimentConfig resolve_config(const TrainArgs& a, const CLI::App& sub) {
  ExperimentConfig c;
  if (!a.config.empty()) c = load_config(a.config);
  if (a.paper_regime) {
    const ExperimentConfig p = ExperimentConfig::paper_regime();
    c.modality = p.modality;
    c.model = p.model;
    c.epochs = p.epochs;
    c.batch_size = p.batch_size;
    c.lr = p.lr;
  }
  if (sub.count("--modality")) {
    c.modality = parse_modality(a.modality);
    c.model.input_channels = modality_channels(c.modality);
  }
  if (sub.count("--variant")) c.model.variant = parse_variant(a.variant);
  if (a.no_fcn) c.model.use_fcn = false;
  if (sub.count("--epochs")) c.epochs = a.epochs;
  if (sub.count("--batch-size")) c.batch_size = a.batch_size;
  if (sub.count("--micro-batch")) c.micro_batch = a.micro_batch;
  if (sub.count("--input-size")) c.model.input_size = a.input_size;
  if (sub.count("--lr")) c.lr = a.lr;
  if (sub.count("--seed")) c.seed = static_cast<std::uint64_t>(a.seed);
  if (sub.count("--out")) c.output_dir = a.out;
  if (a.no_augment) c.augment = false;
  if (a.no_rebalance) c.rebalance = false;
  if (sub.count("--split")) c.split_policy = parse_split_policy(a.split);
  if (sub.count("--eval-fraction")) c.eval_fraction = a.eval_fraction;
  if (sub.count("--holdout")) {
    c.holdout_institution = a.holdout;
    if (!sub.count("--split")) c.split_policy = SplitPolicy::Institution;
  }
  if (sub.count("--fcn-channels")) c.model.fcn_down_channels = a.fcn_channels;
  if (sub.count("--stage-channels")) c.model.stage_channels = a.stage_channels;
  if (sub.count("--stem-channels")) c.model.stem_channels = a.stem_channels;
  if (sub.count("--cardinality")) c.model.cardinality = a.cardinality;
  c.validate();
  return c;
}

}  // namespace cli_detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"onconet: FCN-preprocessed aggregated-residual CNN for PET-CT survival classification", "onconet"};
  app.require_subcommand(1, 1);
  app.set_help_all_flag("--help-all", "Print help for all subcommands");

  // synth
  SynthOptions synth;
  std::string synth_out;
  auto* s_synth = app.add_subcommand("synth", "Write a synthetic PET/CT/mask dataset and manifest");
  s_synth->add_option("--out", synth_out, "Output directory")->required();
  s_synth->add_option("--n", synth.n, "Number of patients")->capture_default_str();
  s_synth->add_option("--size", synth.image_size, "CT side length in pixels")->capture_default_str();
  s_synth->add_option("--seed", synth.seed, "Seed")->capture_default_str();
  s_synth->add_option("--positives", synth.positives, "Label-1 count (default n/2)");
  s_synth->add_option("--eval-fraction", synth.eval_fraction, "Stratified eval fraction")->capture_default_str();
  s_synth->add_option("--depth", synth.depth, "Slices per volume")->capture_default_str();

  // train
  cli_detail::TrainArgs ta;
  auto* s_train = app.add_subcommand("train", "Train a model on a manifest's train split");
  s_train->add_option("--manifest", ta.manifest, "Manifest CSV")->required();
  s_train->add_option("--config", ta.config, "Experiment config (INI)");
  s_train->add_flag("--paper-regime", ta.paper_regime, "PET_CT, FCN + AggResCNN, 512px, lr 0.0006, batch 8, 100 epochs");
  s_train->add_option("--modality", ta.modality, "PET | CT | MASKED_CT | PET_CT");
  s_train->add_option("--variant", ta.variant, "baseline_cnn | aggres_cnn | fcn_only");
  s_train->add_flag("--no-fcn", ta.no_fcn, "Disable the FCN preprocessor");
  s_train->add_option("--epochs", ta.epochs, "Epochs");
  s_train->add_option("--max-epochs", ta.max_epochs, "Stop after this many epochs (config keeps --epochs)");
  s_train->add_option("--batch-size", ta.batch_size, "Batch size");
  s_train->add_option("--micro-batch", ta.micro_batch, "Accumulate gradients over chunks of this many samples");
  s_train->add_option("--input-size", ta.input_size, "Input side length");
  s_train->add_option("--lr", ta.lr, "Adam learning rate");
  s_train->add_option("--seed", ta.seed, "Master seed");
  s_train->add_option("--out", ta.out, "Output directory");
  s_train->add_flag("--no-augment", ta.no_augment, "Disable augmentation");
  s_train->add_flag("--no-rebalance", ta.no_rebalance, "Disable minority oversampling");
  s_train->add_option("--split", ta.split, "manifest | stratified | institution");
  s_train->add_option("--eval-fraction", ta.eval_fraction, "Eval fraction for stratified split");
  s_train->add_option("--holdout", ta.holdout, "Held-out institution");
  s_train->add_option("--fcn-channels", ta.fcn_channels, "FCN encoder widths")->delimiter(',');
  s_train->add_option("--stage-channels", ta.stage_channels, "AggResCNN stage widths")->delimiter(',');
  s_train->add_option("--stem-channels", ta.stem_channels, "AggResCNN stem width");
  s_train->add_option("--cardinality", ta.cardinality, "AggResCNN cardinality");

  // eval
  std::string ev_ckpt, ev_manifest, ev_split = "eval", ev_report, ev_roc;
  double ev_threshold = -1.0;
  auto* s_eval = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest split");
  s_eval->add_option("--checkpoint", ev_ckpt, "Checkpoint directory")->required();
  s_eval->add_option("--manifest", ev_manifest, "Manifest CSV")->required();
  s_eval->add_option("--split", ev_split, "train | eval")->capture_default_str();
  s_eval->add_option("--threshold", ev_threshold, "Decision threshold (default from config)");
  s_eval->add_option("--report", ev_report, "Write key=value report here");
  s_eval->add_option("--roc", ev_roc, "Write ROC points CSV here");

  // params
  std::string p_variant = "aggres_cnn";
  std::size_t p_channels = 2, p_size = 512;
  bool p_fcn = false;
  auto* s_params = app.add_subcommand("params", "Print the parameter ledger");
  s_params->add_option("--variant", p_variant, "baseline_cnn | aggres_cnn | fcn_only")->capture_default_str();
  s_params->add_option("--channels", p_channels, "Input channels (1 or 2)")->capture_default_str();
  s_params->add_option("--input-size", p_size, "Input side length")->capture_default_str();
  s_params->add_flag("--fcn", p_fcn, "Prepend the FCN preprocessor");

  // gradcheck
  bool g_all = false;
  std::size_t g_instances = 5;
  auto* s_grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  s_grad->add_flag("--all", g_all, "Also check the composed FCN + AggResCNN at 16x16");
  s_grad->add_option("--instances", g_instances, "Random instances per op")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << cli_detail::one_line(e.what()) << '\n';
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return 2;
  }

  try {
    if (*s_synth) {
      synth_dataset(synth_out, synth);
      const auto csv = std::filesystem::path(synth_out) / "manifest.csv";
      out << "rows=" << synth.n << '\n';
      out << "manifest=" << csv.string() << '\n';
      out << "checksum=" << cli_detail::hex64(dataset_checksum(csv)) << '\n';
      return 0;
    }

    if (*s_train) {
      const ExperimentConfig cfg = cli_detail::resolve_config(ta, *s_train);
      const Manifest m = apply_split_policy(read_manifest(ta.manifest), cfg);
      m.validate();
      const Dataset data = load_split(m, Split::Train, cfg.modality, cfg.model.input_size);
      Model<float> model(cfg.model, cfg.seed);
      Adam<float> adam(AdamOptions{cfg.lr});
      TrainOptions opt;
      if (ta.max_epochs > 0) opt.epoch_limit = ta.max_epochs;
      double sum = 0.0;
      std::size_t count = 0, current = 0;
      const auto t0 = std::chrono::steady_clock::now();
      auto flush = [&] {
        if (count == 0) return;
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        out << "epoch " << current << " loss " << std::setprecision(6) << sum / static_cast<double>(count) << " ("
            << std::fixed << std::setprecision(1) << secs << "s)\n"
            << std::defaultfloat;
      };
      opt.on_step = [&](const HistoryRow& r) {
        if (r.epoch != current) {
          flush();
          sum = 0.0;
          count = 0;
          current = r.epoch;
        }
        sum += r.loss;
        ++count;
      };
      const TrainResult res = train(cfg, data, model, adam, opt);
      flush();
      out << "steps=" << res.steps << " epochs=" << res.epochs_run << " samples=" << data.inputs.size() << '\n';
      out << "checkpoint=" << cfg.output_dir << '\n';
      return 0;
    }

    if (*s_eval) {
      Checkpoint ck = load_checkpoint(ev_ckpt);
      const Manifest m = apply_split_policy(read_manifest(ev_manifest), ck.config);
      const Dataset data = load_split(m, parse_split(ev_split), ck.config.modality, ck.config.model.input_size);
      const double threshold = ev_threshold > 0.0 ? ev_threshold : ck.config.threshold;
      const EvalResult r = evaluate(ck.model, data, threshold, ck.config.batch_size);
      metrics::write_table(out, r.report);
      if (!ev_report.empty()) {
        std::ofstream os(ev_report);
        if (!os) throw std::runtime_error("cannot write " + ev_report);
        metrics::write_kv(os, r.report);
      }
      if (!ev_roc.empty()) {
        std::ofstream os(ev_roc);
        if (!os) throw std::runtime_error("cannot write " + ev_roc);
        metrics::write_roc_csv(os, metrics::roc_curve(r.scores, r.labels));
      }
      return 0;
    }

    if (*s_params) {
      ModelConfig cfg;
      cfg.variant = parse_variant(p_variant);
      cfg.input_channels = p_channels;
      cfg.input_size = p_size;
      cfg.use_fcn = p_fcn || cfg.variant == Variant::FcnOnly;
      const Model<float> model(cfg, 0);
      const ParamLedger l = model.ledger();
      out << l;
      const auto pub = published_counts(cfg.variant, cfg.use_fcn);
      out << "published\t\t";
      if (pub)
        out << (p_channels == 1 ? pub->one_channel : pub->two_channel) << '\n';
      else
        out << "n/a\n";
      return 0;
    }

    if (*s_grad) {
      GradcheckSuiteOptions o;
      o.instances = g_instances;
      o.include_model = g_all;
      const auto t0 = std::chrono::steady_clock::now();
      const auto cases = run_gradcheck_suite(o);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::size_t passed = 0;
      for (const auto& c : cases) {
        passed += c.report.pass ? 1 : 0;
        out << std::left << std::setw(24) << (c.op + "#" + std::to_string(c.instance)) << std::right
            << " max_rel_err=" << std::scientific << std::setprecision(3) << c.report.max_rel_err << std::defaultfloat
            << " checked=" << c.report.checked << " skipped=" << c.report.skipped << ' '
            << (c.report.pass ? "pass" : "FAIL") << (c.report.message.empty() ? "" : " (" + c.report.message + ")")
            << '\n';
      }
      out << "gradcheck: " << passed << '/' << cases.size() << " pass in " << std::fixed << std::setprecision(2)
          << secs << "s\n"
          << std::defaultfloat;
      return passed == cases.size() ? 0 : 1;
    }
  } catch (const std::exception& e) {
    err << "error: " << cli_detail::one_line(e.what()) << '\n';
    return 1;
  }
  return 1;
}

}  // namespace onconet
