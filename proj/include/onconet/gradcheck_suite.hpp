#pragma once

// Finite-difference checks for every differentiable op and for the composed
// FCN + AggResCNN network, all in double precision.

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "onconet/autograd.hpp"
#include "onconet/gradcheck.hpp"
#include "onconet/models.hpp"

namespace onconet {

struct GradcheckCase {
  std::string op;
  std::size_t instance = 0;
  GradcheckReport report;
  double seconds = 0.0;
};

struct GradcheckSuiteOptions {
  std::size_t instances = 5;
  bool include_model = true;
  std::size_t model_size = 16;
  std::size_t model_coords = 4;  // coordinates per model parameter tensor
  std::uint64_t seed = 11;
  GradcheckOptions check;
};

namespace detail {

inline Tensor<double> rand_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(s));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

/// Scalar probe: a fixed random projection of `y`, so every output element
/// carries a distinct weight.
struct Probe {
  Tensor<double> w;
  Var<double> operator()(Var<double> y) {
    if (w.numel() != y.value().numel()) {
      std::mt19937_64 rng(y.value().numel());
      w = rand_tensor(y.shape(), rng);
    }
    return ad::weighted_sum(y, w);
  }
};

using LossFn = std::function<Var<double>(Tape<double>&)>;

struct OpInstance {
  std::vector<Tensor<double>> tensors;  // storage; targets point into it
  std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)> build;
};

}  // namespace detail

/// One entry per differentiable op: a generator of random instances.
inline std::vector<std::pair<std::string, std::function<detail::OpInstance(std::mt19937_64&, std::size_t)>>>
gradcheck_op_catalogue() {
  using detail::OpInstance;
  using detail::rand_tensor;
  using R = std::mt19937_64;
  std::vector<std::pair<std::string, std::function<OpInstance(R&, std::size_t)>>> ops;

  ops.emplace_back("conv2d", [](R& rng, std::size_t k) {
    // Cycle through stride, padding and grouping variants.
    const ConvGeometry geoms[] = {{1, 1, 1, 0}, {2, 1, 1, 0}, {1, 0, 2, 0}, {2, 1, 2, 0}, {1, 2, 4, 0}};
    const ConvGeometry g = geoms[k % 5];
    const std::size_t cin = 4, cout = 4, ks = (k % 2) ? 3 : 2 + k % 3;
    OpInstance in;
    in.tensors = {rand_tensor({2, cin, 6, 5}, rng), rand_tensor({cout, cin / g.groups, ks, ks}, rng),
                  rand_tensor({cout}, rng)};
    in.build = [g](Tape<double>&, std::vector<Var<double>>& v) { return ad::conv2d(v[0], v[1], v[2], g); };
    return in;
  });

  ops.emplace_back("conv2d_transpose", [](R& rng, std::size_t k) {
    const ConvGeometry geoms[] = {{2, 1, 1, 1}, {1, 1, 1, 0}, {2, 0, 1, 0}, {3, 1, 1, 2}, {2, 1, 1, 0}};
    const ConvGeometry g = geoms[k % 5];
    OpInstance in;
    in.tensors = {rand_tensor({2, 3, 4, 3}, rng), rand_tensor({3, 2, 3, 3}, rng), rand_tensor({2}, rng)};
    in.build = [g](Tape<double>&, std::vector<Var<double>>& v) {
      return ad::conv2d_transpose(v[0], v[1], v[2], g);
    };
    return in;
  });

  ops.emplace_back("maxpool2d", [](R& rng, std::size_t k) {
    const std::size_t window = 2 + k % 2, stride = 1 + k % 3;
    OpInstance in;
    in.tensors = {rand_tensor({2, 2, 7, 6}, rng)};
    in.build = [=](Tape<double>&, std::vector<Var<double>>& v) { return ad::maxpool2d(v[0], window, stride); };
    return in;
  });

  ops.emplace_back("selu", [](R& rng, std::size_t) {
    OpInstance in;
    in.tensors = {rand_tensor({2, 3, 4, 4}, rng, -3.0, 3.0)};
    in.build = [](Tape<double>&, std::vector<Var<double>>& v) { return ad::selu(v[0]); };
    return in;
  });

  ops.emplace_back("prelu", [](R& rng, std::size_t) {
    OpInstance in;
    in.tensors = {rand_tensor({2, 3, 4, 4}, rng, -2.0, 2.0), rand_tensor({3}, rng, 0.0, 0.5)};
    in.build = [](Tape<double>&, std::vector<Var<double>>& v) { return ad::prelu(v[0], v[1]); };
    return in;
  });

  ops.emplace_back("global_avg_pool", [](R& rng, std::size_t k) {
    OpInstance in;
    in.tensors = {rand_tensor({2, 3, 2 + k, 3 + k}, rng)};
    in.build = [](Tape<double>&, std::vector<Var<double>>& v) { return ad::global_avg_pool(v[0]); };
    return in;
  });

  ops.emplace_back("dense", [](R& rng, std::size_t k) {
    OpInstance in;
    in.tensors = {rand_tensor({2, 3 + k}, rng), rand_tensor({3 + k, 2 + k % 3}, rng), rand_tensor({2 + k % 3}, rng)};
    in.build = [](Tape<double>&, std::vector<Var<double>>& v) { return ad::dense(v[0], v[1], v[2]); };
    return in;
  });

  ops.emplace_back("concat_channels", [](R& rng, std::size_t k) {
    OpInstance in;
    in.tensors = {rand_tensor({2, 1 + k % 3, 3, 3}, rng), rand_tensor({2, 2, 3, 3}, rng),
                  rand_tensor({2, 1, 3, 3}, rng)};
    in.build = [](Tape<double>&, std::vector<Var<double>>& v) { return ad::concat_channels<double>(v); };
    return in;
  });

  ops.emplace_back("softmax", [](R& rng, std::size_t k) {
    OpInstance in;
    in.tensors = {rand_tensor({3, 2 + k % 4}, rng, -3.0, 3.0)};
    in.build = [](Tape<double>&, std::vector<Var<double>>& v) { return ad::softmax(v[0]); };
    return in;
  });

  ops.emplace_back("cross_entropy", [](R& rng, std::size_t k) {
    OpInstance in;
    in.tensors = {rand_tensor({4, 2}, rng, 0.2, 0.8)};
    const std::vector<int> labels{static_cast<int>(k % 2), 1, 0, static_cast<int>((k / 2) % 2)};
    in.build = [labels](Tape<double>&, std::vector<Var<double>>& v) { return ad::cross_entropy(v[0], labels); };
    return in;
  });

  ops.emplace_back("softmax_cross_entropy", [](R& rng, std::size_t k) {
    OpInstance in;
    in.tensors = {rand_tensor({4, 2}, rng, -4.0, 4.0)};
    const std::vector<int> labels{1, 0, static_cast<int>(k % 2), 1};
    in.build = [labels](Tape<double>&, std::vector<Var<double>>& v) {
      return ad::cross_entropy(ad::softmax(v[0]), labels);
    };
    return in;
  });

  ops.emplace_back("fused_softmax_cross_entropy", [](R& rng, std::size_t k) {
    OpInstance in;
    in.tensors = {rand_tensor({3, 2 + k % 3}, rng, -4.0, 4.0)};
    const std::vector<int> labels{static_cast<int>(k % 2), 1, 0};
    in.build = [labels](Tape<double>&, std::vector<Var<double>>& v) {
      return ad::softmax_cross_entropy(v[0], labels);
    };
    return in;
  });

  ops.emplace_back("add", [](R& rng, std::size_t k) {
    OpInstance in;
    in.tensors = {rand_tensor({2, 2 + k}, rng), rand_tensor({2, 2 + k}, rng)};
    in.build = [](Tape<double>&, std::vector<Var<double>>& v) { return ad::add(v[0], v[1]); };
    return in;
  });

  ops.emplace_back("mul", [](R& rng, std::size_t k) {
    OpInstance in;
    in.tensors = {rand_tensor({3, 1 + k}, rng), rand_tensor({3, 1 + k}, rng)};
    in.build = [](Tape<double>&, std::vector<Var<double>>& v) { return ad::mul(v[0], v[1]); };
    return in;
  });

  ops.emplace_back("sum", [](R& rng, std::size_t k) {
    OpInstance in;
    in.tensors = {rand_tensor({2, 3, 1 + k}, rng)};
    in.build = [](Tape<double>&, std::vector<Var<double>>& v) { return ad::sum(ad::mul(v[0], v[0])); };
    return in;
  });

  ops.emplace_back("reshape", [](R& rng, std::size_t k) {
    OpInstance in;
    in.tensors = {rand_tensor({2, 3, 2, 1 + k}, rng)};
    in.build = [k](Tape<double>&, std::vector<Var<double>>& v) {
      return ad::selu(ad::reshape(v[0], {2, 6 * (1 + k)}));
    };
    return in;
  });
  return ops;
}

/// Gradient check of the composed network on a random batch of two.
inline GradcheckReport gradcheck_model(const ModelConfig& cfg, std::uint64_t seed, GradcheckOptions opt) {
  Model<double> model(cfg, seed);
  std::mt19937_64 rng(seed + 1);
  Tensor<double> x = detail::rand_tensor({2, cfg.input_channels, cfg.input_size, cfg.input_size}, rng, -1.5, 1.5);
  const std::vector<int> labels{0, 1};
  std::vector<Tensor<double>*> targets{&x};
  for (auto& p : model.params()) targets.push_back(p.tensor);
  return gradcheck<double>(
      [&](Tape<double>& t) { return ad::cross_entropy(model(t, t.param(x)), labels); }, targets, opt);
}

inline std::vector<GradcheckCase> run_gradcheck_suite(const GradcheckSuiteOptions& o = {},
                                                      std::ostream* progress = nullptr) {
  using clock = std::chrono::steady_clock;
  std::vector<GradcheckCase> out;
  std::mt19937_64 rng(o.seed);
  for (const auto& [name, make] : gradcheck_op_catalogue()) {
    for (std::size_t k = 0; k < o.instances; ++k) {
      const auto t0 = clock::now();
      detail::OpInstance inst = make(rng, k);
      std::vector<Tensor<double>*> targets;
      for (auto& t : inst.tensors) targets.push_back(&t);
      detail::Probe probe;
      auto loss = [&](Tape<double>& tape) {
        std::vector<Var<double>> vars;
        for (auto* t : targets) vars.push_back(tape.param(*t));
        Var<double> y = inst.build(tape, vars);
        return y.value().numel() == 1 ? y : probe(y);
      };
      GradcheckOptions opt = o.check;
      opt.seed = o.seed + k;
      GradcheckCase c{name, k, gradcheck<double>(loss, targets, opt), 0.0};
      c.seconds = std::chrono::duration<double>(clock::now() - t0).count();
      if (progress) *progress << c.op << '#' << c.instance << ' ' << (c.report.pass ? "pass" : "FAIL") << '\n';
      out.push_back(std::move(c));
    }
  }
  if (o.include_model) {
    ModelConfig cfg;
    cfg.input_size = o.model_size;
    GradcheckOptions opt = o.check;
    opt.max_coords = o.model_coords;
    const auto t0 = clock::now();
    GradcheckCase c{"fcn+aggres_cnn", 0, gradcheck_model(cfg, o.seed, opt), 0.0};
    c.seconds = std::chrono::duration<double>(clock::now() - t0).count();
    if (progress) *progress << c.op << ' ' << (c.report.pass ? "pass" : "FAIL") << '\n';
    out.push_back(std::move(c));
  }
  return out;
}

inline bool all_pass(const std::vector<GradcheckCase>& cases) {
  for (const auto& c : cases)
    if (!c.report.pass) return false;
  return !cases.empty();
}

}  // namespace onconet
