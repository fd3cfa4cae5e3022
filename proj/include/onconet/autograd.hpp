#pragma once

// Reverse-mode differentiation tape. Nodes are appended in execution order,
// so insertion order is a topological order and backward is a single reverse
// sweep.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "onconet/ops.hpp"
#include "onconet/tensor.hpp"

namespace onconet {

template <class T>
class Tape;

/// Handle to a node on a Tape.
template <class T = float>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
};

template <class T = float>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// With recording off, ops compute values only (inference).
  explicit Tape(bool recording) : recording_(recording) {}

  bool recording() const { return recording_; }

  /// A value that never receives a gradient.
  Var<T> constant(Tensor<T> v) { return push(std::move(v), {}, {}, false); }

  /// A leaf whose gradient is kept on the tape (read it back with grad()).
  Var<T> input(Tensor<T> v, bool requires_grad = true) {
    return push(std::move(v), {}, {}, requires_grad && recording_);
  }

  /// A leaf bound to an external parameter. Backward accumulates into
  /// `p.grad()`. The parameter must outlive the tape.
  Var<T> param(Tensor<T>& p) {
    Node n;
    n.external = &p;
    n.needs_grad = recording_ && p.requires_grad();
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  /// Appends an op result. `fn` runs during backward when any input needs a gradient.
  Var<T> record(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn) {
    bool needs = false;
    for (auto i : inputs) {
      if (i >= nodes_.size()) throw std::logic_error("tape: input node does not precede its consumer");
      needs = needs || nodes_[i].needs_grad;
    }
    needs = needs && recording_;
    return push(std::move(value), needs ? std::move(inputs) : std::vector<std::size_t>{},
                needs ? std::move(fn) : BackwardFn{}, needs);
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.external ? *n.external : n.value;
  }

  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }

  /// Gradient buffer of a node; empty if nothing flowed into it.
  std::span<const T> grad(std::size_t id) const { return nodes_.at(id).grad; }
  std::span<const T> grad(const Var<T>& v) const { return grad(v.id); }

  /// Adds `g` into the gradient of node `id` (allocating zeros on first use).
  void accumulate(std::size_t id, std::span<const T> g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.empty()) n.grad.assign(value(id).numel(), T(0));
    for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
  }

  /// Mutable gradient slot for kernels that accumulate in place; empty when
  /// the node does not need a gradient.
  std::span<T> grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return {};
    if (n.grad.empty()) n.grad.assign(value(id).numel(), T(0));
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }
  std::size_t last_backward_visits() const { return visits_; }

  /// When tracking, ops with non-smooth points fold their branch pattern
  /// (activation signs, pooling winners) into kink_hash(). Two evaluations
  /// with equal hashes took the same branches everywhere.
  void set_track_kinks(bool on) { track_kinks_ = on; }
  bool track_kinks() const { return track_kinks_; }
  std::uint64_t kink_hash() const { return kink_hash_; }
  void mix_kink(std::uint64_t v) {
    kink_hash_ ^= v + 0x9e3779b97f4a7c15ull + (kink_hash_ << 6) + (kink_hash_ >> 2);
  }

  /// Reverse sweep from a scalar loss. `seed` is d(objective)/d(loss), used
  /// to weight partial losses when gradients are accumulated over tapes.
  void backward(const Var<T>& loss, T seed = T(1)) {
    if (loss.tape != this) throw std::logic_error("backward: loss belongs to another tape");
    if (value(loss.id).numel() != 1)
      throw ShapeError("numel", "backward: loss must be a scalar, got shape " +
                                    shape_str(value(loss.id).shape()));
    if (!recording_) throw std::logic_error("backward: tape was not recording");
    visits_ = 0;
    Node& root = nodes_[loss.id];
    if (!root.needs_grad) return;
    root.grad.assign(1, seed);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty()) continue;
      ++visits_;
      if (n.backward) n.backward(*this, i);
      if (n.external) {
        n.external->ensure_grad();
        auto dst = n.external->grad();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += n.grad[k];
      }
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T>* external = nullptr;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    std::vector<T> grad;
    bool needs_grad = false;
  };

  Var<T> push(Tensor<T> v, std::vector<std::size_t> inputs, BackwardFn fn, bool needs) {
    Node n;
    n.value = std::move(v);
    n.inputs = std::move(inputs);
    n.backward = std::move(fn);
    n.needs_grad = needs;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool recording_ = true;
  bool track_kinks_ = false;
  std::uint64_t kink_hash_ = 0;
  std::size_t visits_ = 0;
};

/// Differentiable versions of the primitive ops.
namespace ad {

namespace detail {
template <class T>
Tape<T>& same_tape(std::initializer_list<Var<T>> vs) {
  Tape<T>* t = vs.begin()->tape;
  for (const auto& v : vs)
    if (v.tape != t) throw std::logic_error("autograd: operands live on different tapes");
  return *t;
}
}  // namespace detail

template <class T>
Var<T> conv2d(Var<T> x, Var<T> kernel, Var<T> bias, ConvGeometry g) {
  Tape<T>& tape = detail::same_tape({x, kernel, bias});
  Tensor<T> y = ops::conv2d(x.value(), kernel.value(), bias.value(), g);
  return tape.record(std::move(y), {x.id, kernel.id, bias.id}, [x, kernel, bias, g](Tape<T>& t, std::size_t self) {
    Tensor<T> dy(t.value(self).shape(), std::vector<T>(t.grad(self).begin(), t.grad(self).end()));
    ops::conv2d_backward(t.value(x.id), t.value(kernel.id), g, dy, t.grad_slot(x.id),
                         t.grad_slot(kernel.id), t.grad_slot(bias.id));
  });
}

template <class T>
Var<T> conv2d_transpose(Var<T> x, Var<T> kernel, Var<T> bias, ConvGeometry g) {
  Tape<T>& tape = detail::same_tape({x, kernel, bias});
  Tensor<T> y = ops::conv2d_transpose(x.value(), kernel.value(), bias.value(), g);
  return tape.record(std::move(y), {x.id, kernel.id, bias.id}, [x, kernel, bias, g](Tape<T>& t, std::size_t self) {
    Tensor<T> dy(t.value(self).shape(), std::vector<T>(t.grad(self).begin(), t.grad(self).end()));
    ops::conv2d_transpose_backward(t.value(x.id), t.value(kernel.id), g, dy, t.grad_slot(x.id),
                                   t.grad_slot(kernel.id), t.grad_slot(bias.id));
  });
}

template <class T>
Var<T> maxpool2d(Var<T> x, std::size_t window, std::size_t stride) {
  std::vector<std::size_t> argmax;
  Tensor<T> y = ops::maxpool2d(x.value(), window, stride, &argmax);
  if (x.tape->track_kinks())
    for (auto a : argmax) x.tape->mix_kink(a);
  return x.tape->record(std::move(y), {x.id}, [x, argmax = std::move(argmax)](Tape<T>& t, std::size_t self) {
    auto dx = t.grad_slot(x.id);
    auto dy = t.grad(self);
    for (std::size_t o = 0; o < dy.size(); ++o) dx[argmax[o]] += dy[o];
  });
}

template <class T>
void mix_signs(Tape<T>& t, const Tensor<T>& x) {
  if (!t.track_kinks()) return;
  std::uint64_t word = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    word = (word << 1) | (x[i] > T(0) ? 1u : 0u);
    if (i % 64 == 63) t.mix_kink(word), word = 0;
  }
  t.mix_kink(word);
}

template <class T>
Var<T> selu(Var<T> x) {
  mix_signs(*x.tape, x.value());
  return x.tape->record(ops::selu(x.value()), {x.id}, [x](Tape<T>& t, std::size_t self) {
    const auto& in = t.value(x.id);
    auto dy = t.grad(self);
    auto dx = t.grad_slot(x.id);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * ops::selu_grad(in[i]);
  });
}

template <class T>
Var<T> prelu(Var<T> x, Var<T> slope) {
  Tape<T>& tape = detail::same_tape({x, slope});
  mix_signs(tape, x.value());
  return tape.record(ops::prelu(x.value(), slope.value()), {x.id, slope.id}, [x, slope](Tape<T>& t, std::size_t self) {
    const auto& in = t.value(x.id);
    const auto& a = t.value(slope.id);
    const std::size_t C = in.dim(1), inner = in.numel() / (in.dim(0) * C);
    auto dy = t.grad(self);
    auto dx = t.grad_slot(x.id);
    auto da = t.grad_slot(slope.id);
    std::vector<double> acc(C, 0.0);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      const std::size_t c = (i / inner) % C;
      if (in[i] > T(0)) {
        if (!dx.empty()) dx[i] += dy[i];
      } else {
        if (!dx.empty()) dx[i] += a[c] * dy[i];
        acc[c] += static_cast<double>(in[i]) * dy[i];
      }
    }
    if (!da.empty())
      for (std::size_t c = 0; c < C; ++c) da[c] += static_cast<T>(acc[c]);
  });
}

template <class T>
Var<T> global_avg_pool(Var<T> x) {
  return x.tape->record(ops::global_avg_pool(x.value()), {x.id}, [x](Tape<T>& t, std::size_t self) {
    const auto& in = t.value(x.id);
    const std::size_t P = in.dim(2) * in.dim(3);
    auto dy = t.grad(self);
    auto dx = t.grad_slot(x.id);
    const T inv = T(1) / static_cast<T>(P);
    for (std::size_t nc = 0; nc < dy.size(); ++nc)
      for (std::size_t p = 0; p < P; ++p) dx[nc * P + p] += dy[nc] * inv;
  });
}

template <class T>
Var<T> dense(Var<T> x, Var<T> w, Var<T> b) {
  Tape<T>& tape = detail::same_tape({x, w, b});
  return tape.record(ops::dense(x.value(), w.value(), b.value()), {x.id, w.id, b.id}, [x, w, b](Tape<T>& t, std::size_t self) {
    const auto& in = t.value(x.id);
    const auto& wt = t.value(w.id);
    const std::size_t N = in.dim(0), F = in.dim(1), K = wt.dim(1);
    const T* dy = t.grad(self).data();
    if (auto dx = t.grad_slot(x.id); !dx.empty()) {
      std::vector<T> wT(K * F);
      kernels::transpose(F, K, wt.data().data(), wT.data());
      kernels::gemm<T>(N, F, K, dy, K, wT.data(), F, dx.data(), F, true);
    }
    if (auto dw = t.grad_slot(w.id); !dw.empty()) {
      std::vector<T> xT(F * N);
      kernels::transpose(N, F, in.data().data(), xT.data());
      kernels::gemm<T>(F, K, N, xT.data(), N, dy, K, dw.data(), K, true);
    }
    if (auto db = t.grad_slot(b.id); !db.empty())
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < K; ++k) db[k] += dy[n * K + k];
  });
}

template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("inputs", "concat_channels: nothing to concatenate");
  std::vector<const Tensor<T>*> vals;
  std::vector<std::size_t> ids;
  for (const auto& v : xs) {
    if (v.tape != xs.front().tape) throw std::logic_error("autograd: operands live on different tapes");
    vals.push_back(&v.value());
    ids.push_back(v.id);
  }
  Tensor<T> y = ops::concat_channels(vals);
  return xs.front().tape->record(std::move(y), ids, [ids](Tape<T>& t, std::size_t self) {
    const auto& out = t.value(self);
    const std::size_t N = out.dim(0), inner = out.numel() / (out.dim(0) * out.dim(1));
    auto dy = t.grad(self);
    std::size_t off = 0;
    for (std::size_t n = 0; n < N; ++n)
      for (auto id : ids) {
        const std::size_t chunk = t.value(id).dim(1) * inner;
        if (auto dx = t.grad_slot(id); !dx.empty())
          for (std::size_t k = 0; k < chunk; ++k) dx[n * chunk + k] += dy[off + k];
        off += chunk;
      }
  });
}

template <class T>
Var<T> softmax(Var<T> x) {
  return x.tape->record(ops::softmax(x.value()), {x.id}, [x](Tape<T>& t, std::size_t self) {
    const auto& y = t.value(self);
    const std::size_t N = y.dim(0), K = y.dim(1);
    auto dy = t.grad(self);
    auto dx = t.grad_slot(x.id);
    for (std::size_t n = 0; n < N; ++n) {
      double dot = 0.0;
      for (std::size_t k = 0; k < K; ++k) dot += static_cast<double>(dy[n * K + k]) * y[n * K + k];
      for (std::size_t k = 0; k < K; ++k)
        dx[n * K + k] += static_cast<T>(y[n * K + k] * (dy[n * K + k] - dot));
    }
  });
}

template <class T>
Var<T> cross_entropy(Var<T> probs, std::vector<int> labels) {
  const T loss = ops::cross_entropy(probs.value(), labels);
  return probs.tape->record(Tensor<T>::scalar(loss), {probs.id}, [probs, labels = std::move(labels)](Tape<T>& t, std::size_t self) {
    const auto& p = t.value(probs.id);
    const std::size_t N = p.dim(0), K = p.dim(1);
    const T g = t.grad(self)[0] / static_cast<T>(N);
    auto dp = t.grad_slot(probs.id);
    for (std::size_t n = 0; n < N; ++n) {
      const T v = p[n * K + labels[n]];
      if (static_cast<double>(v) > kLogClamp) dp[n * K + labels[n]] -= g / v;
    }
  });
}

/// Cross-entropy of softmax(logits) as one node. Same loss value as
/// cross_entropy(softmax(x)), but the logit gradient (p - onehot) / N keeps
/// flowing where the clamped log would cut it off.
template <class T>
Var<T> softmax_cross_entropy(Var<T> logits, std::vector<int> labels) {
  Tensor<T> probs = ops::softmax(logits.value());
  const T loss = ops::cross_entropy(probs, labels);
  return logits.tape->record(Tensor<T>::scalar(loss), {logits.id},
                             [logits, probs = std::move(probs), labels = std::move(labels)](Tape<T>& t, std::size_t self) {
    const std::size_t N = probs.dim(0), K = probs.dim(1);
    const double g = static_cast<double>(t.grad(self)[0]) / static_cast<double>(N);
    auto dx = t.grad_slot(logits.id);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < K; ++k) {
        const double target = static_cast<int>(k) == labels[n] ? 1.0 : 0.0;
        dx[n * K + k] += static_cast<T>(g * (static_cast<double>(probs[n * K + k]) - target));
      }
  });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>& tape = detail::same_tape({a, b});
  if (a.shape() != b.shape())
    throw ShapeError("shape", "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] += b.value()[i];
  return tape.record(std::move(y), {a.id, b.id}, [a, b](Tape<T>& t, std::size_t self) {
    const std::vector<T> g(t.grad(self).begin(), t.grad(self).end());
    t.accumulate(a.id, g);
    t.accumulate(b.id, g);
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  Tape<T>& tape = detail::same_tape({a, b});
  if (a.shape() != b.shape())
    throw ShapeError("shape", "mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] *= b.value()[i];
  return tape.record(std::move(y), {a.id, b.id}, [a, b](Tape<T>& t, std::size_t self) {
    auto dy = t.grad(self);
    const auto& av = t.value(a.id);
    const auto& bv = t.value(b.id);
    if (auto da = t.grad_slot(a.id); !da.empty())
      for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * bv[i];
    if (auto db = t.grad_slot(b.id); !db.empty())
      for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * av[i];
  });
}

template <class T>
Var<T> sum(Var<T> x) {
  double s = 0.0;
  for (auto v : x.value().data()) s += v;
  return x.tape->record(Tensor<T>::scalar(static_cast<T>(s)), {x.id}, [x](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0];
    auto dx = t.grad_slot(x.id);
    for (auto& d : dx) d += g;
  });
}

/// sum(x * w) for a constant weight tensor; turns any op output into a scalar
/// probe for gradient checks.
template <class T>
Var<T> weighted_sum(Var<T> x, const Tensor<T>& w) {
  if (x.value().numel() != w.numel())
    throw ShapeError("numel", "weighted_sum: weight size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < w.numel(); ++i) s += static_cast<double>(x.value()[i]) * w[i];
  return x.tape->record(Tensor<T>::scalar(static_cast<T>(s)), {x.id}, [x, w](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0];
    auto dx = t.grad_slot(x.id);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g * w[i];
  });
}

template <class T>
Var<T> reshape(Var<T> x, Shape s) {
  return x.tape->record(x.value().reshaped(std::move(s)), {x.id}, [x](Tape<T>& t, std::size_t self) {
    t.accumulate(x.id, t.grad(self));
  });
}

}  // namespace ad
}  // namespace onconet
