#pragma once

// Training loop, evaluation and checkpoints.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "onconet/autograd.hpp"
#include "onconet/config.hpp"
#include "onconet/datapipe.hpp"
#include "onconet/image.hpp"
#include "onconet/metrics.hpp"
#include "onconet/models.hpp"
#include "onconet/optim.hpp"
#include "onconet/runtime.hpp"
#include "onconet/tensor_io.hpp"

namespace onconet {

/// splitmix64 finaliser; combines a master seed with stream coordinates.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(mix(seed) ^ a) ^ b) ^ c);
}

/// Rewrites the split column according to the configured policy.
inline Manifest apply_split_policy(Manifest m, const ExperimentConfig& cfg) {
  switch (cfg.split_policy) {
    case SplitPolicy::Manifest: break;
    case SplitPolicy::Institution: {
      bool found = false;
      for (auto& r : m.rows) {
        r.split = r.institution == cfg.holdout_institution ? Split::Eval : Split::Train;
        found = found || r.split == Split::Eval;
      }
      if (!found) throw std::invalid_argument("split: no rows from institution " + cfg.holdout_institution);
      break;
    }
    case SplitPolicy::Stratified: {
      if (!(cfg.eval_fraction >= 0.0 && cfg.eval_fraction < 1.0))
        throw std::invalid_argument("split: eval_fraction must be in [0,1)");
      std::mt19937_64 rng(derive_seed(cfg.seed, 0x5011));
      for (int c = 0; c < 2; ++c) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < m.rows.size(); ++i)
          if (m.rows[i].label == c) idx.push_back(i);
        std::shuffle(idx.begin(), idx.end(), rng);
        const auto n_eval =
            static_cast<std::size_t>(std::llround(cfg.eval_fraction * static_cast<double>(idx.size())));
        for (std::size_t k = 0; k < idx.size(); ++k) m.rows[idx[k]].split = k < n_eval ? Split::Eval : Split::Train;
      }
      break;
    }
  }
  return m;
}

/// Preprocessed (un-augmented) inputs for one split.
struct Dataset {
  std::vector<std::string> ids;
  std::vector<Tensor<float>> inputs;  // [C, S, S]
  std::vector<int> labels;
};

inline Dataset load_split(const Manifest& m, Split split, Modality modality, std::size_t size) {
  Dataset d;
  for (std::size_t i : m.indices(split)) {
    const Sample s = load_sample(m, m.rows[i]);
    d.ids.push_back(s.patient_id);
    d.inputs.push_back(assemble_input(s, modality, size));
    d.labels.push_back(s.label);
  }
  return d;
}

/// Stacks [C, S, S] images into [N, C, S, S].
inline Tensor<float> stack_batch(const std::vector<Tensor<float>>& imgs) {
  if (imgs.empty()) throw std::invalid_argument("stack_batch: empty batch");
  Shape s{imgs.size()};
  for (std::size_t d : imgs.front().shape()) s.push_back(d);
  std::vector<float> data;
  data.reserve(shape_numel(s));
  for (const auto& im : imgs) {
    if (im.shape() != imgs.front().shape())
      throw ShapeError("shape", "stack_batch: " + shape_str(im.shape()) + " vs " + shape_str(imgs.front().shape()));
    data.insert(data.end(), im.data().begin(), im.data().end());
  }
  return Tensor<float>(std::move(s), std::move(data));
}

struct HistoryRow {
  std::size_t epoch;
  std::size_t step;
  double loss;
};

struct Batch {
  Tensor<float> x;
  std::vector<int> labels;
  std::vector<std::size_t> sources;  // dataset indices
};

struct TrainOptions {
  /// Caps the number of epochs actually run (the config keeps its declared value).
  std::optional<std::size_t> epoch_limit;
  bool write_outputs = true;
  std::function<void(const HistoryRow&)> on_step;
  std::function<void(std::size_t epoch, std::size_t step, const Batch&)> on_batch;
};

struct TrainResult {
  std::vector<HistoryRow> history;
  std::size_t epochs_run = 0;
  std::size_t steps = 0;
};

/// The epoch's sample order: rebalanced (optional) then shuffled, both seeded
/// from (seed, epoch).
inline std::vector<EpochEntry> epoch_order(const std::vector<int>& labels, const ExperimentConfig& cfg,
                                           std::size_t epoch) {
  std::vector<EpochEntry> entries;
  if (cfg.rebalance) {
    entries = rebalance(labels, derive_seed(cfg.seed, 0xba1, epoch));
  } else {
    for (std::size_t i = 0; i < labels.size(); ++i) entries.push_back({i, false});
  }
  std::mt19937_64 rng(derive_seed(cfg.seed, 0x5f1, epoch));
  std::shuffle(entries.begin(), entries.end(), rng);
  return entries;
}

/// Builds batch `b` of an epoch. Each entry gets its own augmentation draw
/// keyed by (seed, epoch, position), so duplicates are augmented afresh.
inline Batch make_batch(const Dataset& data, const std::vector<EpochEntry>& order, const ExperimentConfig& cfg,
                        std::size_t epoch, std::size_t b) {
  const std::size_t begin = b * cfg.batch_size, end = std::min(order.size(), begin + cfg.batch_size);
  std::vector<Tensor<float>> imgs;
  Batch batch;
  for (std::size_t k = begin; k < end; ++k) {
    const std::size_t i = order[k].index;
    imgs.push_back(cfg.augment ? image::augment(data.inputs[i], derive_seed(cfg.seed, 0xa06, epoch, k))
                               : data.inputs[i]);
    batch.labels.push_back(data.labels[i]);
    batch.sources.push_back(i);
  }
  batch.x = stack_batch(imgs);
  return batch;
}

inline void write_history(const std::filesystem::path& p, const std::vector<HistoryRow>& h) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << "epoch,step,loss\n" << std::setprecision(9);
  for (const auto& r : h) os << r.epoch << ',' << r.step << ',' << r.loss << '\n';
}

inline void save_checkpoint(const std::filesystem::path& dir, Model<float>& model, const Adam<float>& adam,
                            const ExperimentConfig& cfg) {
  std::filesystem::create_directories(dir);
  auto params = model.params();
  std::vector<std::pair<std::string, const Tensor<float>*>> w;
  for (const auto& p : params) w.emplace_back(p.name, p.tensor);
  io::save_bundle(dir / "weights", w);
  const auto state = adam.state(params);
  std::vector<std::pair<std::string, const Tensor<float>*>> s;
  for (const auto& [name, t] : state) s.emplace_back(name, &t);
  io::save_bundle(dir / "optimizer", s);
  save_config(dir / "config.ini", cfg);
}

struct Checkpoint {
  ExperimentConfig config;
  Model<float> model;
  Adam<float> adam;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  Checkpoint c{load_config(dir / "config.ini"), Model<float>(), Adam<float>()};
  c.model = Model<float>(c.config.model, c.config.seed);
  const auto weights = io::load_bundle<float>(dir / "weights");
  auto params = c.model.params();
  for (auto& p : params) {
    auto it = weights.find(p.name);
    if (it == weights.end()) throw std::invalid_argument("checkpoint: missing tensor " + p.name);
    if (it->second.shape() != p.tensor->shape())
      throw ShapeError(p.name, "checkpoint: " + p.name + " has shape " + shape_str(it->second.shape()) +
                                   ", model expects " + shape_str(p.tensor->shape()));
    const bool rg = p.tensor->requires_grad();
    *p.tensor = it->second;
    p.tensor->set_requires_grad(rg);
  }
  c.adam = Adam<float>(AdamOptions{c.config.lr});
  if (std::filesystem::exists(dir / "optimizer.idx")) c.adam.load_state(io::load_bundle<float>(dir / "optimizer"), params);
  return c;
}

/// Forward and backward over `batch` in chunks of `micro` samples (0: all at
/// once). Each chunk's loss is weighted by its share of the batch, so the
/// accumulated gradient is that of the batch-mean loss. Returns that loss;
/// stops early and returns it as soon as a chunk's loss is non-finite.
inline double accumulate_gradients(Model<float>& model, const Batch& batch, std::size_t micro) {
  const std::size_t N = batch.labels.size();
  const std::size_t step = micro == 0 ? N : std::min(micro, N);
  const Shape& s = batch.x.shape();
  const std::size_t per = batch.x.numel() / N;
  double total = 0.0;
  for (std::size_t b = 0; b < N; b += step) {
    const std::size_t e = std::min(N, b + step);
    Tensor<float> x = step == N ? batch.x
                                : Tensor<float>({e - b, s[1], s[2], s[3]},
                                                std::vector<float>(batch.x.data().begin() + static_cast<std::ptrdiff_t>(b * per),
                                                                   batch.x.data().begin() + static_cast<std::ptrdiff_t>(e * per)));
    const std::vector<int> labels(batch.labels.begin() + static_cast<std::ptrdiff_t>(b),
                                  batch.labels.begin() + static_cast<std::ptrdiff_t>(e));
    Tape<float> tape;
    Var<float> loss = ad::softmax_cross_entropy(model.logits(tape, tape.constant(std::move(x))), labels);
    const double weight = static_cast<double>(e - b) / static_cast<double>(N);
    const double l = loss.value()[0];
    total += weight * l;
    if (!std::isfinite(l)) return l;
    tape.backward(loss, static_cast<float>(weight));
  }
  return total;
}

/// Runs the configured number of epochs over the train split. No early
/// stopping. Throws on a non-finite loss, naming the batch.
inline TrainResult train(const ExperimentConfig& cfg, const Dataset& data, Model<float>& model, Adam<float>& adam,
                         const TrainOptions& opt = {}) {
  if (data.inputs.empty()) throw std::invalid_argument("train: training split is empty");
  const auto n_pos = std::count(data.labels.begin(), data.labels.end(), 1);
  if (n_pos == 0 || n_pos == static_cast<std::ptrdiff_t>(data.labels.size()))
    throw std::invalid_argument("train: training split must contain both classes");

  TrainResult res;
  const std::size_t epochs = opt.epoch_limit ? std::min(*opt.epoch_limit, cfg.epochs) : cfg.epochs;
  auto params = model.params();
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    const auto order = epoch_order(data.labels, cfg, epoch);
    const std::size_t n_batches = (order.size() + cfg.batch_size - 1) / cfg.batch_size;
    auto prepare = [&](std::size_t b) { return make_batch(data, order, cfg, epoch, b); };
    std::future<Batch> next;
    if (!deterministic()) next = std::async(std::launch::async, prepare, 0);
    for (std::size_t b = 0; b < n_batches; ++b) {
      Batch batch = deterministic() ? prepare(b) : next.get();
      if (!deterministic() && b + 1 < n_batches) next = std::async(std::launch::async, prepare, b + 1);
      if (opt.on_batch) opt.on_batch(epoch, res.steps, batch);

      model.zero_grad();
      const double l = accumulate_gradients(model, batch, cfg.micro_batch);
      if (!std::isfinite(l)) {
        std::string ids;
        for (std::size_t i : batch.sources) ids += (ids.empty() ? "" : " ") + data.ids[i];
        throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                                 std::to_string(b) + " (" + ids + ")");
      }
      adam.step(params);
      HistoryRow row{epoch, res.steps, l};
      res.history.push_back(row);
      if (opt.on_step) opt.on_step(row);
      ++res.steps;
    }
    ++res.epochs_run;
  }
  if (opt.write_outputs) {
    const std::filesystem::path out(cfg.output_dir);
    std::filesystem::create_directories(out);
    write_history(out / "history.csv", res.history);
    save_checkpoint(out, model, adam, cfg);
  }
  return res;
}

/// Death probabilities for every input, in batches, without augmentation.
inline std::vector<double> predict_scores(Model<float>& model, const Dataset& data, std::size_t batch_size) {
  std::vector<double> scores;
  for (std::size_t b = 0; b < data.inputs.size(); b += batch_size) {
    const std::size_t e = std::min(data.inputs.size(), b + batch_size);
    std::vector<Tensor<float>> imgs(data.inputs.begin() + static_cast<std::ptrdiff_t>(b),
                                    data.inputs.begin() + static_cast<std::ptrdiff_t>(e));
    const Tensor<float> p = model.predict(stack_batch(imgs));
    for (std::size_t i = 0; i < e - b; ++i) scores.push_back(p[i * 2 + 1]);
  }
  return scores;
}

struct EvalResult {
  metrics::MetricsReport report;
  std::vector<double> scores;
  std::vector<int> labels;
  double loss = 0.0;  // mean cross-entropy
};

/// Metrics on an un-augmented, un-rebalanced dataset. Both classes must be present.
inline EvalResult evaluate(Model<float>& model, const Dataset& data, double threshold = 0.5,
                           std::size_t batch_size = 8) {
  if (data.inputs.empty()) throw std::invalid_argument("evaluate: split is empty");
  EvalResult r;
  r.scores = predict_scores(model, data, batch_size);
  r.labels = data.labels;
  r.report = metrics::sens_spec(r.scores, r.labels, threshold);
  double ce = 0.0;
  for (std::size_t i = 0; i < r.scores.size(); ++i) {
    const double p = r.labels[i] == 1 ? r.scores[i] : 1.0 - r.scores[i];
    ce -= std::log(std::max(p, kLogClamp));
  }
  r.loss = ce / static_cast<double>(r.scores.size());
  return r;
}

}  // namespace onconet
