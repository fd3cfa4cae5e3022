#pragma once

// Experiment configuration and its INI serialisation ("[section]" headers,
// "key=value" lines).

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "onconet/datapipe.hpp"
#include "onconet/models.hpp"

namespace onconet {

enum class SplitPolicy { Manifest, Stratified, Institution };

inline std::string to_string(SplitPolicy p) {
  switch (p) {
    case SplitPolicy::Manifest: return "manifest";
    case SplitPolicy::Stratified: return "stratified";
    case SplitPolicy::Institution: return "institution";
  }
  return "?";
}

inline SplitPolicy parse_split_policy(const std::string& s) {
  if (s == "manifest") return SplitPolicy::Manifest;
  if (s == "stratified") return SplitPolicy::Stratified;
  if (s == "institution") return SplitPolicy::Institution;
  throw std::invalid_argument("unknown split policy: " + s);
}

struct ExperimentConfig {
  Modality modality = Modality::PetCt;
  ModelConfig model;
  std::size_t epochs = 100;
  std::size_t batch_size = 8;
  /// Gradient-accumulation chunk; 0 means the whole batch at once. Only
  /// memory use changes, since no layer couples samples within a batch.
  std::size_t micro_batch = 0;
  double lr = 0.0006;
  std::uint64_t seed = 1;
  bool augment = true;
  bool rebalance = true;
  double threshold = 0.5;

  SplitPolicy split_policy = SplitPolicy::Manifest;
  double eval_fraction = 0.25;          // stratified policy
  std::string holdout_institution;      // institution policy
  std::string output_dir = "run";

  bool operator==(const ExperimentConfig&) const = default;

  /// Canonical published training regime: PET+CT input at 512x512, FCN +
  /// AggResCNN, Adam at 0.0006 for 100 epochs with batch size 8.
  static ExperimentConfig paper_regime() {
    ExperimentConfig c;
    c.modality = Modality::PetCt;
    c.model = ModelConfig{};
    c.model.variant = Variant::AggResCnn;
    c.model.use_fcn = true;
    c.model.input_size = 512;
    c.model.input_channels = 2;
    c.epochs = 100;
    c.batch_size = 8;
    c.lr = 0.0006;
    return c;
  }

  void validate() const {
    if (modality_channels(modality) != model.input_channels)
      throw std::invalid_argument("config: modality " + to_string(modality) + " needs " +
                                  std::to_string(modality_channels(modality)) + " input channels");
    if (batch_size == 0) throw std::invalid_argument("config: batch_size must be positive");
    if (!(lr >= 0.0)) throw std::invalid_argument("config: lr must be non-negative");
    if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("config: threshold must be in (0,1)");
    if (split_policy == SplitPolicy::Institution && holdout_institution.empty())
      throw std::invalid_argument("config: institution split needs holdout_institution");
    model.validate();
  }
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) throw std::runtime_error("cannot format number");
  return std::string(buf, end);
}

inline double parse_double(const std::string& s) {
  double v = 0.0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size()) throw std::invalid_argument("config: not a number: " + s);
  return v;
}

inline std::string fmt_list(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

inline std::vector<std::size_t> parse_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stoull(tok));
  return out;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw std::invalid_argument("config: not a boolean: " + s);
}

}  // namespace detail

inline boost::property_tree::ptree to_ptree(const ExperimentConfig& c) {
  using detail::fmt_double;
  using detail::fmt_list;
  boost::property_tree::ptree t;
  t.put("experiment.modality", to_string(c.modality));
  t.put("experiment.epochs", std::to_string(c.epochs));
  t.put("experiment.batch_size", std::to_string(c.batch_size));
  t.put("experiment.micro_batch", std::to_string(c.micro_batch));
  t.put("experiment.lr", fmt_double(c.lr));
  t.put("experiment.seed", std::to_string(c.seed));
  t.put("experiment.augment", c.augment ? "true" : "false");
  t.put("experiment.rebalance", c.rebalance ? "true" : "false");
  t.put("experiment.threshold", fmt_double(c.threshold));
  t.put("experiment.output_dir", c.output_dir);
  t.put("split.policy", to_string(c.split_policy));
  t.put("split.eval_fraction", fmt_double(c.eval_fraction));
  t.put("split.holdout_institution", c.holdout_institution);
  const ModelConfig& m = c.model;
  t.put("model.variant", to_string(m.variant));
  t.put("model.input_channels", std::to_string(m.input_channels));
  t.put("model.input_size", std::to_string(m.input_size));
  t.put("model.use_fcn", m.use_fcn ? "true" : "false");
  t.put("model.fcn_down_channels", fmt_list(m.fcn_down_channels));
  t.put("model.stem_channels", std::to_string(m.stem_channels));
  t.put("model.stage_channels", fmt_list(m.stage_channels));
  t.put("model.blocks_per_stage", std::to_string(m.blocks_per_stage));
  t.put("model.cardinality", std::to_string(m.cardinality));
  t.put("model.baseline_filters", fmt_list(m.baseline_filters));
  t.put("model.baseline_kernel", std::to_string(m.baseline_kernel));
  t.put("model.baseline_pool", std::to_string(m.baseline_pool));
  t.put("model.baseline_hidden", std::to_string(m.baseline_hidden));
  return t;
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline ExperimentConfig from_ptree(const boost::property_tree::ptree& t) {
  ExperimentConfig c;
  ModelConfig& m = c.model;
  for (const auto& [section, body] : t) {
    for (const auto& [key, node] : body) {
      const std::string v = node.data();
      const std::string k = section + "." + key;
      if (k == "experiment.modality") c.modality = parse_modality(v);
      else if (k == "experiment.epochs") c.epochs = std::stoull(v);
      else if (k == "experiment.batch_size") c.batch_size = std::stoull(v);
      else if (k == "experiment.micro_batch") c.micro_batch = std::stoull(v);
      else if (k == "experiment.lr") c.lr = detail::parse_double(v);
      else if (k == "experiment.seed") c.seed = std::stoull(v);
      else if (k == "experiment.augment") c.augment = detail::parse_bool(v);
      else if (k == "experiment.rebalance") c.rebalance = detail::parse_bool(v);
      else if (k == "experiment.threshold") c.threshold = detail::parse_double(v);
      else if (k == "experiment.output_dir") c.output_dir = v;
      else if (k == "split.policy") c.split_policy = parse_split_policy(v);
      else if (k == "split.eval_fraction") c.eval_fraction = detail::parse_double(v);
      else if (k == "split.holdout_institution") c.holdout_institution = v;
      else if (k == "model.variant") m.variant = parse_variant(v);
      else if (k == "model.input_channels") m.input_channels = std::stoull(v);
      else if (k == "model.input_size") m.input_size = std::stoull(v);
      else if (k == "model.use_fcn") m.use_fcn = detail::parse_bool(v);
      else if (k == "model.fcn_down_channels") m.fcn_down_channels = detail::parse_list(v);
      else if (k == "model.stem_channels") m.stem_channels = std::stoull(v);
      else if (k == "model.stage_channels") m.stage_channels = detail::parse_list(v);
      else if (k == "model.blocks_per_stage") m.blocks_per_stage = std::stoull(v);
      else if (k == "model.cardinality") m.cardinality = std::stoull(v);
      else if (k == "model.baseline_filters") m.baseline_filters = detail::parse_list(v);
      else if (k == "model.baseline_kernel") m.baseline_kernel = std::stoull(v);
      else if (k == "model.baseline_pool") m.baseline_pool = std::stoull(v);
      else if (k == "model.baseline_hidden") m.baseline_hidden = std::stoull(v);
      else throw std::invalid_argument("config: unknown key " + k);
    }
  }
  return c;
}

inline std::string to_ini(const ExperimentConfig& c) {
  std::ostringstream os;
  boost::property_tree::write_ini(os, to_ptree(c));
  return os.str();
}

inline ExperimentConfig from_ini(const std::string& text) {
  std::istringstream is(text);
  boost::property_tree::ptree t;
  boost::property_tree::read_ini(is, t);
  return from_ptree(t);
}

inline void save_config(const std::filesystem::path& p, const ExperimentConfig& c) {
  boost::property_tree::write_ini(p.string(), to_ptree(c));
}

inline ExperimentConfig load_config(const std::filesystem::path& p) {
  boost::property_tree::ptree t;
  boost::property_tree::read_ini(p.string(), t);
  return from_ptree(t);
}

}  // namespace onconet
