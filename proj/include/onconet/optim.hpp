#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "onconet/models.hpp"
#include "onconet/tensor.hpp"

namespace onconet {

struct AdamOptions {
  double lr = 0.0006;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam. Moments are created lazily on the first step and are
/// matched to parameters by position.
template <class T = float>
class Adam {
 public:
  explicit Adam(AdamOptions opt = {}) : opt_(opt) {}

  const AdamOptions& options() const { return opt_; }
  std::uint64_t step_count() const { return t_; }
  const std::vector<Tensor<T>>& first_moments() const { return m_; }
  const std::vector<Tensor<T>>& second_moments() const { return v_; }

  void step(const std::vector<NamedParam<T>>& params) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.tensor->shape(), T(0));
        v_.emplace_back(p.tensor->shape(), T(0));
      }
    }
    if (m_.size() != params.size())
      throw ShapeError("params", "adam: optimizer tracks " + std::to_string(m_.size()) +
                                     " parameters, got " + std::to_string(params.size()));
    // Validate everything before touching any state.
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Tensor<T>& p = *params[i].tensor;
      if (p.shape() != m_[i].shape())
        throw ShapeError(params[i].name, "adam: parameter " + params[i].name + " has shape " +
                                             shape_str(p.shape()) + ", state has " + shape_str(m_[i].shape()));
      if (p.has_grad() && p.grad().size() != p.numel())
        throw ShapeError(params[i].name, "adam: gradient size mismatch for " + params[i].name);
      for (T g : p.grad())
        if (!std::isfinite(static_cast<double>(g)))
          throw std::domain_error("adam: non-finite gradient in parameter " + params[i].name);
    }
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T>& p = *params[i].tensor;
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto m = m_[i].data();
      auto v = v_[i].data();
      for (std::size_t k = 0; k < p.numel(); ++k) {
        const double gk = g[k];
        const double mk = opt_.beta1 * m[k] + (1.0 - opt_.beta1) * gk;
        const double vk = opt_.beta2 * v[k] + (1.0 - opt_.beta2) * gk * gk;
        m[k] = static_cast<T>(mk);
        v[k] = static_cast<T>(vk);
        const double update = opt_.lr * (mk / c1) / (std::sqrt(vk / c2) + opt_.eps);
        p[k] = static_cast<T>(static_cast<double>(p[k]) - update);
      }
    }
  }

  /// Named state tensors for checkpointing.
  std::vector<std::pair<std::string, Tensor<T>>> state(const std::vector<NamedParam<T>>& params) const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back("adam.t", Tensor<T>::scalar(static_cast<T>(t_)));
    for (std::size_t i = 0; i < m_.size() && i < params.size(); ++i) {
      out.emplace_back("adam.m." + params[i].name, m_[i]);
      out.emplace_back("adam.v." + params[i].name, v_[i]);
    }
    return out;
  }

  void load_state(const std::map<std::string, Tensor<T>>& named, const std::vector<NamedParam<T>>& params) {
    auto it = named.find("adam.t");
    if (it == named.end()) throw std::invalid_argument("adam: state has no step counter");
    t_ = static_cast<std::uint64_t>(it->second[0]);
    m_.clear();
    v_.clear();
    if (t_ == 0) return;
    for (const auto& p : params) {
      auto m = named.find("adam.m." + p.name);
      auto v = named.find("adam.v." + p.name);
      if (m == named.end() || v == named.end())
        throw std::invalid_argument("adam: state missing moments for " + p.name);
      m_.push_back(m->second);
      v_.push_back(v->second);
    }
  }

 private:
  AdamOptions opt_;
  std::vector<Tensor<T>> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace onconet
