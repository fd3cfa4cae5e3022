#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "onconet/autograd.hpp"

namespace onconet {

struct GradcheckOptions {
  double eps = 1e-3;
  double tolerance = 1e-4;
  /// Denominator floor of the relative error, for coordinates whose true
  /// gradient is (numerically) zero.
  double floor = 1e-8;
  /// Coordinates checked per target; larger targets are subsampled.
  std::size_t max_coords = 64;
  std::uint64_t seed = 7;
  /// Return true to skip a coordinate. Coordinates whose +-eps perturbation
  /// changes the branch taken at any activation kink or pooling window are
  /// skipped automatically.
  std::function<bool(std::size_t target, std::size_t index)> skip;
};

struct GradcheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  std::string worst;    // "target[index]" of the largest error
  std::string message;  // set when the check could not run cleanly
};

/// Compares tape gradients of `loss_fn` against central finite differences.
///
/// `loss_fn(tape)` must build a scalar on the given tape, binding each target
/// with `tape.param(*target)`. Targets are perturbed in place and restored.
/// Non-finite losses or gradients produce a failing report, never a throw.
template <class T>
GradcheckReport gradcheck(const std::function<Var<T>(Tape<T>&)>& loss_fn,
                          const std::vector<Tensor<T>*>& targets,
                          const GradcheckOptions& opt = {}) {
  GradcheckReport rep;
  std::uint64_t base_kinks = 0;
  for (auto* t : targets) {
    t->set_requires_grad(true);
    t->ensure_grad();
    t->zero_grad();
  }
  try {
    Tape<T> tape;
    tape.set_track_kinks(true);
    Var<T> loss = loss_fn(tape);
    base_kinks = tape.kink_hash();
    if (!std::isfinite(static_cast<double>(loss.value()[0]))) {
      rep.message = "non-finite loss";
      return rep;
    }
    tape.backward(loss);
  } catch (const std::exception& e) {
    rep.message = e.what();
    return rep;
  }

  bool crossed = false;
  auto eval = [&]() -> double {
    Tape<T> tape(false);
    tape.set_track_kinks(true);
    const double v = static_cast<double>(loss_fn(tape).value()[0]);
    crossed = crossed || tape.kink_hash() != base_kinks;
    return v;
  };

  std::mt19937_64 rng(opt.seed);
  for (std::size_t ti = 0; ti < targets.size(); ++ti) {
    Tensor<T>& target = *targets[ti];
    std::vector<std::size_t> idx(target.numel());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (idx.size() > opt.max_coords) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.max_coords);
      std::sort(idx.begin(), idx.end());
    }
    for (std::size_t i : idx) {
      if (opt.skip && opt.skip(ti, i)) {
        ++rep.skipped;
        continue;
      }
      const T orig = target[i];
      double plus = 0.0, minus = 0.0;
      crossed = false;
      try {
        target[i] = static_cast<T>(orig + opt.eps);
        plus = eval();
        target[i] = static_cast<T>(orig - opt.eps);
        minus = eval();
      } catch (const std::exception& e) {
        target[i] = orig;
        rep.message = e.what();
        rep.pass = false;
        return rep;
      }
      target[i] = orig;
      if (crossed) {
        // The perturbation straddles a non-smooth point; differences are meaningless there.
        ++rep.skipped;
        continue;
      }
      const double numeric = (plus - minus) / (2.0 * opt.eps);
      const double analytic = static_cast<double>(target.grad()[i]);
      double err;
      if (!std::isfinite(numeric) || !std::isfinite(analytic)) {
        err = std::numeric_limits<double>::infinity();
        rep.message = "non-finite gradient";
      } else {
        const double denom = std::max({std::abs(numeric), std::abs(analytic), opt.floor});
        err = std::abs(numeric - analytic) / denom;
      }
      ++rep.checked;
      if (err > rep.max_rel_err || !std::isfinite(err)) {
        rep.max_rel_err = err;
        rep.worst = std::to_string(ti) + "[" + std::to_string(i) + "]";
      }
    }
  }
  rep.pass = rep.message.empty() && rep.checked > 0 && rep.max_rel_err < opt.tolerance;
  return rep;
}

}  // namespace onconet
