#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "onconet/autograd.hpp"
#include "onconet/tensor.hpp"

namespace onconet {

enum class Variant { BaselineCnn, AggResCnn, FcnOnly };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::BaselineCnn: return "baseline_cnn";
    case Variant::AggResCnn: return "aggres_cnn";
    case Variant::FcnOnly: return "fcn_only";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "baseline_cnn") return Variant::BaselineCnn;
  if (s == "aggres_cnn") return Variant::AggResCnn;
  if (s == "fcn_only") return Variant::FcnOnly;
  throw std::invalid_argument("unknown model variant: " + s);
}

/// Declarative network description. Defaults are the canonical topology.
struct ModelConfig {
  Variant variant = Variant::AggResCnn;
  std::size_t input_channels = 2;
  std::size_t input_size = 512;

  // AggResCNN classifier
  std::size_t stem_channels = 16;
  std::vector<std::size_t> stage_channels{32, 64, 128, 256};
  std::size_t blocks_per_stage = 2;
  std::size_t cardinality = 32;

  // FCN preprocessor
  bool use_fcn = true;
  std::vector<std::size_t> fcn_down_channels{32, 64, 128, 256};

  // Baseline CNN: three conv/PReLU/max-pool stages and two dense layers.
  std::vector<std::size_t> baseline_filters{32, 32, 64};
  std::size_t baseline_kernel = 5;
  std::size_t baseline_pool = 4;
  std::size_t baseline_hidden = 200;

  bool operator==(const ModelConfig&) const = default;

  std::size_t feature_width() const {
    return stage_channels.empty() ? 0 : stage_channels.back();
  }

  void validate() const {
    if (input_channels != 1 && input_channels != 2)
      throw std::invalid_argument("input_channels must be 1 or 2");
    if (input_size == 0) throw std::invalid_argument("input_size must be positive");
    if (variant == Variant::AggResCnn) {
      if (stage_channels.empty()) throw std::invalid_argument("stage_channels is empty");
      for (std::size_t i = 1; i < stage_channels.size(); ++i)
        if (stage_channels[i] != 2 * stage_channels[i - 1])
          throw std::invalid_argument("stage_channels must double from stage to stage");
      if (stem_channels == 0 || blocks_per_stage == 0 || cardinality == 0)
        throw std::invalid_argument("stem_channels, blocks_per_stage and cardinality must be positive");
    }
    if (variant == Variant::BaselineCnn && baseline_filters.size() != 3)
      throw std::invalid_argument("baseline CNN has exactly three conv stages");
    if (use_fcn || variant == Variant::FcnOnly) {
      if (fcn_down_channels.size() != 4) throw std::invalid_argument("FCN has exactly 4 down blocks");
      const std::size_t factor = std::size_t{1} << fcn_down_channels.size();
      if (input_size % factor != 0)
        throw std::invalid_argument("input_size " + std::to_string(input_size) +
                                    " is not divisible by " + std::to_string(factor));
    }
  }
};

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T>* tensor;
};

/// One ledger row per layer.
struct LedgerRow {
  std::string layer;
  std::string kernel_shape;
  std::size_t count = 0;
};

struct ParamLedger {
  std::vector<LedgerRow> rows;
  std::size_t total = 0;

  void add(LedgerRow r) {
    total += r.count;
    rows.push_back(std::move(r));
  }

  void append(const ParamLedger& other) {
    for (const auto& r : other.rows) add(r);
  }
};

inline std::ostream& operator<<(std::ostream& os, const ParamLedger& l) {
  for (const auto& r : l.rows) os << r.layer << '\t' << r.kernel_shape << '\t' << r.count << '\n';
  os << "total\t\t" << l.total << '\n';
  return os;
}

namespace nn {

/// Gain for layers feeding a rectifier (PReLU).
inline constexpr double kGainRectifier = 1.4142135623730951;
/// Gain for layers feeding SeLU or nothing: unit-variance preserving.
inline constexpr double kGainLinear = 1.0;

/// Normal init with std = gain / sqrt(fan_in).
template <class T>
Tensor<T> fan_in_normal(Shape shape, double fan_in, double gain, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, gain / std::sqrt(fan_in));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

/// Convolution layer (regular or transposed) with bias.
template <class T>
struct Conv {
  std::string name;
  Tensor<T> weight;
  Tensor<T> bias;
  ConvGeometry geom;
  bool transposed = false;

  static Conv make(std::string name, std::size_t in, std::size_t out, std::size_t k, ConvGeometry g,
                   std::mt19937_64& rng, bool transposed = false, double gain = kGainLinear) {
    Conv c;
    c.name = std::move(name);
    c.geom = g;
    c.transposed = transposed;
    if (transposed) {
      const double fan_in = static_cast<double>(in * k * k) / static_cast<double>(g.stride * g.stride);
      c.weight = fan_in_normal<T>({in, out, k, k}, fan_in, gain, rng);
    } else {
      if (in % g.groups != 0 || out % g.groups != 0)
        throw std::invalid_argument(c.name + ": channels " + std::to_string(in) + "->" +
                                    std::to_string(out) + " not divisible by groups " +
                                    std::to_string(g.groups));
      c.weight = fan_in_normal<T>({out, in / g.groups, k, k}, static_cast<double>(in / g.groups * k * k), gain, rng);
    }
    c.bias = Tensor<T>({out}, T(0));
    c.weight.set_requires_grad(true);
    c.bias.set_requires_grad(true);
    return c;
  }

  Var<T> operator()(Tape<T>& t, Var<T> x) {
    Var<T> w = t.param(weight), b = t.param(bias);
    return transposed ? ad::conv2d_transpose(x, w, b, geom) : ad::conv2d(x, w, b, geom);
  }

  void params(std::vector<NamedParam<T>>& out) {
    out.push_back({name + ".weight", &weight});
    out.push_back({name + ".bias", &bias});
  }

  LedgerRow ledger() const {
    return {name, shape_str(weight.shape()) + (geom.groups > 1 ? " g" + std::to_string(geom.groups) : ""),
            weight.numel() + bias.numel()};
  }
};

template <class T>
struct Dense {
  std::string name;
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;

  static Dense make(std::string name, std::size_t in, std::size_t out, std::mt19937_64& rng,
                    double gain = kGainLinear) {
    Dense d;
    d.name = std::move(name);
    d.weight = fan_in_normal<T>({in, out}, static_cast<double>(in), gain, rng);
    d.bias = Tensor<T>({out}, T(0));
    d.weight.set_requires_grad(true);
    d.bias.set_requires_grad(true);
    return d;
  }

  Var<T> operator()(Tape<T>& t, Var<T> x) { return ad::dense(x, t.param(weight), t.param(bias)); }

  void params(std::vector<NamedParam<T>>& out) {
    out.push_back({name + ".weight", &weight});
    out.push_back({name + ".bias", &bias});
  }

  LedgerRow ledger() const { return {name, shape_str(weight.shape()), weight.numel() + bias.numel()}; }
};

template <class T>
struct PRelu {
  std::string name;
  Tensor<T> slope;

  static PRelu make(std::string name, std::size_t channels) {
    PRelu p;
    p.name = std::move(name);
    p.slope = Tensor<T>({channels}, T(0.25));
    p.slope.set_requires_grad(true);
    return p;
  }

  Var<T> operator()(Tape<T>& t, Var<T> x) { return ad::prelu(x, t.param(slope)); }
  void params(std::vector<NamedParam<T>>& out) { out.push_back({name + ".slope", &slope}); }
  LedgerRow ledger() const { return {name, shape_str(slope.shape()), slope.numel()}; }
};

}  // namespace nn

/// Encoder-decoder preprocessor. Four stride-2 conv+SeLU blocks, four stride-2
/// transposed-conv+SeLU blocks with U-Net style skip concatenation, and a
/// linear 1x1 projection to one channel. Input channels are processed
/// independently with shared weights, so the output has the input's shape.
template <class T = float>
class Fcn {
 public:
  Fcn() = default;

  Fcn(const std::vector<std::size_t>& down, std::mt19937_64& rng) {
    if (down.size() != 4) throw std::invalid_argument("FCN has exactly 4 down blocks");
    const ConvGeometry down_geom{2, 1, 1, 0};
    const ConvGeometry up_geom{2, 1, 1, 1};
    std::size_t in = 1;
    for (std::size_t i = 0; i < down.size(); ++i) {
      encoder_.push_back(nn::Conv<T>::make("fcn.down" + std::to_string(i + 1), in, down[i], 3, down_geom, rng));
      in = down[i];
    }
    const std::size_t L = down.size();
    for (std::size_t j = 0; j < L; ++j) {
      const std::size_t out = (j + 1 < L) ? down[L - 2 - j] : down[0];
      decoder_.push_back(nn::Conv<T>::make("fcn.up" + std::to_string(j + 1), in, out, 3, up_geom, rng, true));
      in = (j + 1 < L) ? out + down[L - 2 - j] : out;
    }
    head_ = nn::Conv<T>::make("fcn.out", in, 1, 1, ConvGeometry{1, 0, 1, 0}, rng);
  }

  std::size_t depth_factor() const { return std::size_t{1} << encoder_.size(); }

  /// x: [N, C, H, W] -> [N, C, H, W]
  Var<T> operator()(Tape<T>& t, Var<T> x) {
    const Shape s = x.shape();
    require_rank(x.value(), 4, "fcn");
    if (s[2] % depth_factor() != 0 || s[3] % depth_factor() != 0)
      throw ShapeError("height", "fcn: spatial size " + shape_str(s) + " not divisible by " +
                                     std::to_string(depth_factor()));
    Var<T> h = ad::reshape(x, {s[0] * s[1], 1, s[2], s[3]});
    std::vector<Var<T>> skips;
    for (auto& conv : encoder_) {
      h = ad::selu(conv(t, h));
      skips.push_back(h);
    }
    const std::size_t L = decoder_.size();
    for (std::size_t j = 0; j < L; ++j) {
      if (j > 0) h = ad::concat_channels<T>({h, skips[L - 1 - j]});
      h = ad::selu(decoder_[j](t, h));
    }
    h = head_(t, h);
    return ad::reshape(h, s);
  }

  void params(std::vector<NamedParam<T>>& out) {
    for (auto& c : encoder_) c.params(out);
    for (auto& c : decoder_) c.params(out);
    head_.params(out);
  }

  ParamLedger ledger() const {
    ParamLedger l;
    for (const auto& c : encoder_) l.add(c.ledger());
    for (const auto& c : decoder_) l.add(c.ledger());
    l.add(head_.ledger());
    return l;
  }

 private:
  std::vector<nn::Conv<T>> encoder_;
  std::vector<nn::Conv<T>> decoder_;
  nn::Conv<T> head_;
};

/// Aggregated residual classifier: stem, stages of grouped-conv residual
/// blocks, global average pooling, dense + softmax.
template <class T = float>
class AggResCnn {
 public:
  struct Block {
    nn::Conv<T> conv1, conv2;
    std::optional<nn::Conv<T>> proj;
  };

  AggResCnn() = default;

  AggResCnn(const ModelConfig& cfg, std::mt19937_64& rng) {
    stem_ = nn::Conv<T>::make("cls.stem", cfg.input_channels, cfg.stem_channels, 3, ConvGeometry{1, 1, 1, 0}, rng);
    std::size_t in = cfg.stem_channels;
    for (std::size_t s = 0; s < cfg.stage_channels.size(); ++s) {
      const std::size_t ch = cfg.stage_channels[s];
      for (std::size_t b = 0; b < cfg.blocks_per_stage; ++b) {
        const std::string name = "cls.s" + std::to_string(s + 1) + ".b" + std::to_string(b + 1);
        const std::size_t stride = (b == 0) ? 2 : 1;
        Block blk;
        const std::size_t g1 = std::min({cfg.cardinality, in, ch});
        const std::size_t g2 = std::min(cfg.cardinality, ch);
        blk.conv1 = nn::Conv<T>::make(name + ".conv1", in, ch, 3, ConvGeometry{stride, 1, g1, 0}, rng);
        blk.conv2 = nn::Conv<T>::make(name + ".conv2", ch, ch, 3, ConvGeometry{1, 1, g2, 0}, rng);
        if (stride != 1 || in != ch)
          blk.proj = nn::Conv<T>::make(name + ".proj", in, ch, 1, ConvGeometry{stride, 0, 1, 0}, rng);
        blocks_.push_back(std::move(blk));
        in = ch;
      }
    }
    head_ = nn::Dense<T>::make("cls.fc", in, 2, rng);
  }

  Var<T> logits(Tape<T>& t, Var<T> x) {
    Var<T> h = ad::selu(stem_(t, x));
    for (auto& blk : blocks_) {
      Var<T> r = ad::selu(blk.conv1(t, h));
      r = ad::selu(blk.conv2(t, r));
      Var<T> skip = blk.proj ? (*blk.proj)(t, h) : h;
      h = ad::add(r, skip);
    }
    return head_(t, ad::global_avg_pool(h));
  }

  Var<T> operator()(Tape<T>& t, Var<T> x) { return ad::softmax(logits(t, x)); }

  /// Weighted layers on the longest input-to-output path.
  std::size_t depth() const { return 1 + 2 * blocks_.size() + 1; }

  std::vector<Block>& blocks() { return blocks_; }

  void params(std::vector<NamedParam<T>>& out) {
    stem_.params(out);
    for (auto& b : blocks_) {
      b.conv1.params(out);
      b.conv2.params(out);
      if (b.proj) b.proj->params(out);
    }
    head_.params(out);
  }

  ParamLedger ledger() const {
    ParamLedger l;
    l.add(stem_.ledger());
    for (const auto& b : blocks_) {
      l.add(b.conv1.ledger());
      l.add(b.conv2.ledger());
      if (b.proj) l.add(b.proj->ledger());
    }
    l.add(head_.ledger());
    return l;
  }

 private:
  nn::Conv<T> stem_;
  std::vector<Block> blocks_;
  nn::Dense<T> head_;
};

/// Reference CNN: 3 x (conv, PReLU, max-pool), dense, PReLU, dense, softmax.
template <class T = float>
class BaselineCnn {
 public:
  BaselineCnn() = default;

  BaselineCnn(const ModelConfig& cfg, std::mt19937_64& rng) : pool_(cfg.baseline_pool) {
    const std::size_t k = cfg.baseline_kernel;
    std::size_t in = cfg.input_channels, size = cfg.input_size;
    for (std::size_t i = 0; i < cfg.baseline_filters.size(); ++i) {
      const std::string name = "base.conv" + std::to_string(i + 1);
      convs_.push_back(nn::Conv<T>::make(name, in, cfg.baseline_filters[i], k, ConvGeometry{1, k / 2, 1, 0}, rng, false,
                                         nn::kGainRectifier));
      acts_.push_back(nn::PRelu<T>::make("base.prelu" + std::to_string(i + 1), cfg.baseline_filters[i]));
      in = cfg.baseline_filters[i];
      if (size < pool_)
        throw std::invalid_argument("baseline CNN: input_size " + std::to_string(cfg.input_size) +
                                    " too small for three pooling stages");
      size = (size - pool_) / pool_ + 1;
    }
    fc1_ = nn::Dense<T>::make("base.fc1", in * size * size, cfg.baseline_hidden, rng, nn::kGainRectifier);
    fc1_act_ = nn::PRelu<T>::make("base.fc1_prelu", cfg.baseline_hidden);
    fc2_ = nn::Dense<T>::make("base.fc2", cfg.baseline_hidden, 2, rng);
  }

  Var<T> logits(Tape<T>& t, Var<T> x) {
    Var<T> h = x;
    for (std::size_t i = 0; i < convs_.size(); ++i)
      h = ad::maxpool2d(acts_[i](t, convs_[i](t, h)), pool_, pool_);
    const Shape s = h.shape();
    h = ad::reshape(h, {s[0], s[1] * s[2] * s[3]});
    h = fc1_act_(t, fc1_(t, h));
    return fc2_(t, h);
  }

  Var<T> operator()(Tape<T>& t, Var<T> x) { return ad::softmax(logits(t, x)); }

  void params(std::vector<NamedParam<T>>& out) {
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      convs_[i].params(out);
      acts_[i].params(out);
    }
    fc1_.params(out);
    fc1_act_.params(out);
    fc2_.params(out);
  }

  ParamLedger ledger() const {
    ParamLedger l;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      l.add(convs_[i].ledger());
      l.add(acts_[i].ledger());
    }
    l.add(fc1_.ledger());
    l.add(fc1_act_.ledger());
    l.add(fc2_.ledger());
    return l;
  }

 private:
  std::size_t pool_ = 4;
  std::vector<nn::Conv<T>> convs_;
  std::vector<nn::PRelu<T>> acts_;
  nn::Dense<T> fc1_, fc2_;
  nn::PRelu<T> fc1_act_;
};

template <class T = float>
Fcn<T> build_fcn(const ModelConfig& cfg, std::uint64_t seed = 0) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  return Fcn<T>(cfg.fcn_down_channels, rng);
}

template <class T = float>
AggResCnn<T> build_aggrescnn(const ModelConfig& cfg, std::uint64_t seed = 0) {
  if (cfg.variant != Variant::AggResCnn) throw std::invalid_argument("build_aggrescnn: variant is not aggres_cnn");
  cfg.validate();
  std::mt19937_64 rng(seed);
  return AggResCnn<T>(cfg, rng);
}

template <class T = float>
BaselineCnn<T> build_baseline_cnn(const ModelConfig& cfg, std::uint64_t seed = 0) {
  if (cfg.variant != Variant::BaselineCnn)
    throw std::invalid_argument("build_baseline_cnn: variant is not baseline_cnn");
  cfg.validate();
  std::mt19937_64 rng(seed);
  return BaselineCnn<T>(cfg, rng);
}

/// Optional FCN preprocessor followed by a classifier (or the FCN alone).
template <class T = float>
class Model {
 public:
  Model() = default;

  Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    if (cfg_.use_fcn || cfg_.variant == Variant::FcnOnly) fcn_.emplace(cfg_.fcn_down_channels, rng);
    switch (cfg_.variant) {
      case Variant::AggResCnn: classifier_ = AggResCnn<T>(cfg_, rng); break;
      case Variant::BaselineCnn: classifier_ = BaselineCnn<T>(cfg_, rng); break;
      case Variant::FcnOnly: break;
    }
  }

  // Parameters are addressed by pointer; keep instances where they are built.
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return cfg_; }
  bool has_fcn() const { return fcn_.has_value(); }
  Fcn<T>& fcn() { return fcn_.value(); }
  AggResCnn<T>& aggres() { return std::get<AggResCnn<T>>(classifier_); }

  void check_input(const Tensor<T>& x) const {
    require_rank(x, 4, "forward");
    if (x.dim(1) != cfg_.input_channels)
      throw ShapeError("channels", "forward: input has " + std::to_string(x.dim(1)) +
                                       " channels, model expects " + std::to_string(cfg_.input_channels));
    if (x.dim(2) != cfg_.input_size || x.dim(3) != cfg_.input_size)
      throw ShapeError("height", "forward: input " + shape_str(x.shape()) + " does not match input_size " +
                                     std::to_string(cfg_.input_size));
  }

  /// Class probabilities [N, 2]; for the FCN-only variant the FCN output image.
  Var<T> operator()(Tape<T>& t, Var<T> x) {
    check_input(x.value());
    Var<T> h = fcn_ ? (*fcn_)(t, x) : x;
    return std::visit(
        [&](auto& c) -> Var<T> {
          if constexpr (std::is_same_v<std::decay_t<decltype(c)>, std::monostate>)
            return h;
          else
            return c(t, h);
        },
        classifier_);
  }

  /// Pre-softmax class scores [N, 2]. Not defined for the FCN-only variant.
  Var<T> logits(Tape<T>& t, Var<T> x) {
    check_input(x.value());
    Var<T> h = fcn_ ? (*fcn_)(t, x) : x;
    return std::visit(
        [&](auto& c) -> Var<T> {
          if constexpr (std::is_same_v<std::decay_t<decltype(c)>, std::monostate>)
            throw std::logic_error("logits: the FCN-only variant has no classifier");
          else
            return c.logits(t, h);
        },
        classifier_);
  }

  /// Inference without recording gradients.
  Tensor<T> predict(const Tensor<T>& x) {
    Tape<T> tape(false);
    return (*this)(tape, tape.constant(x)).value();
  }

  std::vector<NamedParam<T>> params() {
    std::vector<NamedParam<T>> out;
    if (fcn_) fcn_->params(out);
    std::visit(
        [&](auto& c) {
          if constexpr (!std::is_same_v<std::decay_t<decltype(c)>, std::monostate>) c.params(out);
        },
        classifier_);
    return out;
  }

  ParamLedger ledger() const {
    ParamLedger l;
    if (fcn_) l.append(fcn_->ledger());
    std::visit(
        [&](const auto& c) {
          if constexpr (!std::is_same_v<std::decay_t<decltype(c)>, std::monostate>) l.append(c.ledger());
        },
        classifier_);
    return l;
  }

  void zero_grad() {
    for (auto& p : params()) {
      p.tensor->ensure_grad();
      p.tensor->zero_grad();
    }
  }

  /// Copy of this model with parameters converted to scalar type U.
  template <class U>
  Model<U> cast() {
    Model<U> out(cfg_, 0);
    auto src = params();
    auto dst = out.params();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].tensor = src[i].tensor->template cast<U>();
    return out;
  }

 private:
  ModelConfig cfg_;
  std::optional<Fcn<T>> fcn_;
  std::variant<std::monostate, AggResCnn<T>, BaselineCnn<T>> classifier_;
};

template <class T = float>
Model<T> build_model(const ModelConfig& cfg, std::uint64_t seed = 0) {
  return Model<T>(cfg, seed);
}

template <class T>
ParamLedger count_params(const Model<T>& m) {
  return m.ledger();
}

/// Rounded totals reported alongside our ledgers. Only the input-channel
/// deltas of these numbers are expected to agree with our networks.
struct PublishedCounts {
  std::size_t one_channel;
  std::size_t two_channel;
};

inline std::optional<PublishedCounts> published_counts(Variant v, bool use_fcn) {
  if (v == Variant::BaselineCnn && !use_fcn) return PublishedCounts{930146, 930946};
  if (v == Variant::BaselineCnn && use_fcn) return PublishedCounts{1321682, 1322482};
  if (v == Variant::AggResCnn && !use_fcn) return PublishedCounts{291874, 292114};
  if (v == Variant::AggResCnn && use_fcn) return PublishedCounts{683410, 683650};
  return std::nullopt;
}

}  // namespace onconet
