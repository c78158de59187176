#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "rcmp/ops.hpp"
#include "rcmp/rng.hpp"
#include "rcmp/tape.hpp"
#include "rcmp/tensor.hpp"

namespace rcmp {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct StemConfig {
  int kernel = 7;
  int stride = 2;
  int channels = 64;
  bool maxpool = true;  // 3x3 stride-2 pad-1 max pool after the stem

  bool operator==(const StemConfig&) const = default;
};

struct ModelConfig {
  std::string preset = "custom";
  int input_size = 224;
  int in_channels = 3;
  StemConfig stem;
  std::array<int, 4> block_counts{2, 2, 2, 2};
  std::array<int, 4> stage_channels{64, 128, 256, 512};
  int num_classes = 1000;

  /// Weighted layers on the main path: stem conv, two convs per block, fc.
  /// Projection shortcuts are not counted (18 for the full preset).
  int layer_count() const {
    int blocks = 0;
    for (int b : block_counts) blocks += b;
    return 2 + 2 * blocks;
  }

  bool operator==(const ModelConfig&) const = default;
};

inline ModelConfig resnet18_full(int num_classes = 6) {
  ModelConfig c;
  c.preset = "resnet18-full";
  c.num_classes = num_classes;
  return c;
}

inline ModelConfig resnet_desk(int num_classes = 6) {
  ModelConfig c;
  c.preset = "resnet-desk";
  c.input_size = 64;
  c.stem = StemConfig{3, 1, 16, true};
  c.block_counts = {1, 1, 1, 1};
  c.stage_channels = {16, 32, 64, 128};
  c.num_classes = num_classes;
  return c;
}

inline ModelConfig preset_config(std::string_view name, int num_classes = 6) {
  if (name == "resnet18-full") return resnet18_full(num_classes);
  if (name == "resnet-desk") return resnet_desk(num_classes);
  throw ConfigError("unknown preset '" + std::string(name) + "' (expected resnet18-full or resnet-desk)");
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"preset", c.preset},
                     {"input_size", c.input_size},
                     {"in_channels", c.in_channels},
                     {"stem",
                      {{"kernel", c.stem.kernel},
                       {"stride", c.stem.stride},
                       {"channels", c.stem.channels},
                       {"maxpool", c.stem.maxpool}}},
                     {"block_counts", c.block_counts},
                     {"stage_channels", c.stage_channels},
                     {"num_classes", c.num_classes},
                     {"layer_count", c.layer_count()}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.preset = j.value("preset", std::string("custom"));
  j.at("input_size").get_to(c.input_size);
  c.in_channels = j.value("in_channels", 3);
  const auto& s = j.at("stem");
  s.at("kernel").get_to(c.stem.kernel);
  s.at("stride").get_to(c.stem.stride);
  s.at("channels").get_to(c.stem.channels);
  c.stem.maxpool = s.value("maxpool", true);
  j.at("block_counts").get_to(c.block_counts);
  j.at("stage_channels").get_to(c.stage_channels);
  j.at("num_classes").get_to(c.num_classes);
}

// ---------------------------------------------------------------------------
// Architecture description

enum class LayerKind { conv, bn, relu, maxpool, avgpool, linear, add };

inline std::string_view layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::bn: return "bn";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::avgpool: return "avgpool";
    case LayerKind::linear: return "linear";
    case LayerKind::add: return "add";
  }
  return "?";
}

/// One layer. For conv layers the weight is out_channels x in_channels x
/// kernel x kernel; `index` is the 1-based position among main-path weighted
/// layers (0 for projections and unweighted layers).
struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::conv;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;
  int padding = 0;
  int index = 0;
  int out_size = 0;  // spatial side of the output at the configured input size
};

struct BasicBlockSpec {
  std::string prefix;  // e.g. "layer2.0"
  int stride = 1;
  LayerSpec conv1, bn1, conv2, bn2;
  std::optional<LayerSpec> proj_conv, proj_bn;  // 1x1 shortcut projection
};

enum class ParamRole { weight, bias };

struct ParamInfo {
  std::string name;   // e.g. "layer1.0.conv1.weight"
  std::string layer;  // e.g. "layer1.0.conv1"
  LayerKind kind;
  ParamRole role;
  Shape shape;
};

struct Architecture {
  LayerSpec stem_conv, stem_bn;
  bool stem_pool = true;
  std::vector<BasicBlockSpec> blocks;
  LayerSpec fc;

  /// Every layer in execution order, including parameter-free ones.
  std::vector<LayerSpec> layers() const {
    std::vector<LayerSpec> out{stem_conv, stem_bn};
    out.push_back({"relu", LayerKind::relu, stem_bn.out_channels, stem_bn.out_channels, 1, 1, 0, 0, stem_bn.out_size});
    if (stem_pool) {
      const int s = static_cast<int>(ops::pooled_extent(stem_bn.out_size, 3, 2, 1));
      out.push_back({"maxpool", LayerKind::maxpool, stem_bn.out_channels, stem_bn.out_channels, 3, 2, 1, 0, s});
    }
    for (const auto& b : blocks) {
      out.push_back(b.conv1);
      out.push_back(b.bn1);
      out.push_back({b.prefix + ".relu1", LayerKind::relu, b.bn1.out_channels, b.bn1.out_channels, 1, 1, 0, 0, b.bn1.out_size});
      out.push_back(b.conv2);
      out.push_back(b.bn2);
      if (b.proj_conv) {
        out.push_back(*b.proj_conv);
        out.push_back(*b.proj_bn);
      }
      out.push_back({b.prefix + ".add", LayerKind::add, b.bn2.out_channels, b.bn2.out_channels, 1, 1, 0, 0, b.bn2.out_size});
      out.push_back({b.prefix + ".relu2", LayerKind::relu, b.bn2.out_channels, b.bn2.out_channels, 1, 1, 0, 0, b.bn2.out_size});
    }
    const int last = blocks.empty() ? stem_bn.out_size : blocks.back().bn2.out_size;
    out.push_back({"avgpool", LayerKind::avgpool, fc.in_channels, fc.in_channels, last, 1, 0, 0, 1});
    out.push_back(fc);
    return out;
  }

  /// Learnable parameters in execution order.
  std::vector<ParamInfo> parameters() const {
    std::vector<ParamInfo> out;
    auto conv = [&](const LayerSpec& l) {
      out.push_back({l.name + ".weight", l.name, LayerKind::conv, ParamRole::weight,
                     Shape{l.out_channels, l.in_channels, l.kernel, l.kernel}});
    };
    auto bn = [&](const LayerSpec& l) {
      out.push_back({l.name + ".weight", l.name, LayerKind::bn, ParamRole::weight, Shape{l.out_channels}});
      out.push_back({l.name + ".bias", l.name, LayerKind::bn, ParamRole::bias, Shape{l.out_channels}});
    };
    conv(stem_conv);
    bn(stem_bn);
    for (const auto& b : blocks) {
      conv(b.conv1);
      bn(b.bn1);
      conv(b.conv2);
      bn(b.bn2);
      if (b.proj_conv) {
        conv(*b.proj_conv);
        bn(*b.proj_bn);
      }
    }
    out.push_back({"fc.weight", "fc", LayerKind::linear, ParamRole::weight, Shape{fc.out_channels, fc.in_channels}});
    out.push_back({"fc.bias", "fc", LayerKind::linear, ParamRole::bias, Shape{fc.out_channels}});
    return out;
  }

  /// Batch-norm layer names in execution order (owners of running statistics).
  std::vector<std::string> batchnorms() const {
    std::vector<std::string> out{stem_bn.name};
    for (const auto& b : blocks) {
      out.push_back(b.bn1.name);
      out.push_back(b.bn2.name);
      if (b.proj_bn) out.push_back(b.proj_bn->name);
    }
    return out;
  }
};

/// Validates the configuration and derives the layer graph.
inline Architecture describe(const ModelConfig& c) {
  auto positive = [](int v, const char* what) {
    if (v < 1) throw ConfigError(std::string("model config: ") + what + " must be positive");
  };
  positive(c.input_size, "input_size");
  positive(c.in_channels, "in_channels");
  positive(c.stem.kernel, "stem.kernel");
  positive(c.stem.stride, "stem.stride");
  positive(c.stem.channels, "stem.channels");
  positive(c.num_classes, "num_classes");
  for (int i = 0; i < 4; ++i) {
    positive(c.block_counts[static_cast<std::size_t>(i)], "block count");
    positive(c.stage_channels[static_cast<std::size_t>(i)], "stage channels");
    if (i > 0 && c.stage_channels[static_cast<std::size_t>(i)] < c.stage_channels[static_cast<std::size_t>(i - 1)])
      throw ConfigError("model config: stage channels must be non-decreasing");
  }

  Architecture a;
  int index = 1;
  int size = static_cast<int>(ops::pooled_extent(c.input_size, c.stem.kernel, c.stem.stride, c.stem.kernel / 2));
  a.stem_conv = {"conv1", LayerKind::conv, c.in_channels, c.stem.channels, c.stem.kernel, c.stem.stride,
                 c.stem.kernel / 2, index++, size};
  a.stem_bn = {"bn1", LayerKind::bn, c.stem.channels, c.stem.channels, 1, 1, 0, 0, size};
  a.stem_pool = c.stem.maxpool;
  if (a.stem_pool) size = static_cast<int>(ops::pooled_extent(size, 3, 2, 1));
  if (size < 1) throw ConfigError("model config: input_size too small for the stem");

  int channels = c.stem.channels;
  for (int s = 0; s < 4; ++s) {
    const int out = c.stage_channels[static_cast<std::size_t>(s)];
    for (int b = 0; b < c.block_counts[static_cast<std::size_t>(s)]; ++b) {
      BasicBlockSpec blk;
      blk.prefix = "layer" + std::to_string(s + 1) + "." + std::to_string(b);
      blk.stride = (s > 0 && b == 0) ? 2 : 1;
      const int in_size = size;
      size = static_cast<int>(ops::pooled_extent(in_size, 3, blk.stride, 1));
      if (size < 1) throw ConfigError("model config: input_size too small for " + blk.prefix);
      blk.conv1 = {blk.prefix + ".conv1", LayerKind::conv, channels, out, 3, blk.stride, 1, index++, size};
      blk.bn1 = {blk.prefix + ".bn1", LayerKind::bn, out, out, 1, 1, 0, 0, size};
      blk.conv2 = {blk.prefix + ".conv2", LayerKind::conv, out, out, 3, 1, 1, index++, size};
      blk.bn2 = {blk.prefix + ".bn2", LayerKind::bn, out, out, 1, 1, 0, 0, size};
      if (blk.stride != 1 || channels != out) {
        blk.proj_conv = LayerSpec{blk.prefix + ".downsample.0", LayerKind::conv, channels, out, 1, blk.stride, 0, 0, size};
        blk.proj_bn = LayerSpec{blk.prefix + ".downsample.1", LayerKind::bn, out, out, 1, 1, 0, 0, size};
      }
      a.blocks.push_back(std::move(blk));
      channels = out;
    }
  }
  a.fc = {"fc", LayerKind::linear, channels, c.num_classes, 1, 1, 0, index++, 1};
  return a;
}

// ---------------------------------------------------------------------------
// Model

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Residual network: configuration, derived layer graph, learnable
/// parameters, batch-norm running statistics, and optional pruning masks.
template <class T>
struct BasicModel {
  ModelConfig config;
  Architecture arch;
  std::map<std::string, Tensor<T>> params;
  std::map<std::string, Tensor<T>> buffers;  // "<bn>.running_mean", "<bn>.running_var"
  std::map<std::string, Tensor<std::uint8_t>> masks;

  const Tensor<T>& param(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ModelError("model has no parameter '" + name + "'");
    return it->second;
  }
  Tensor<T>& param(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw ModelError("model has no parameter '" + name + "'");
    return it->second;
  }
  const Tensor<T>& buffer(const std::string& name) const {
    auto it = buffers.find(name);
    if (it == buffers.end()) throw ModelError("model has no buffer '" + name + "'");
    return it->second;
  }

  template <class U>
  BasicModel<U> cast() const {
    BasicModel<U> m{config, arch, {}, {}, masks};
    for (const auto& [k, v] : params) m.params.emplace(k, v.template cast<U>());
    for (const auto& [k, v] : buffers) m.buffers.emplace(k, v.template cast<U>());
    return m;
  }
};

using Model = BasicModel<float>;

template <class T>
Tensor<T> init_parameter(const ParamInfo& p, std::uint64_t seed) {
  Tensor<T> t(p.shape);
  if (p.kind == LayerKind::bn) {
    if (p.role == ParamRole::weight) t.fill(T(1));
    return t;
  }
  if (p.role == ParamRole::bias) return t;
  // Kaiming fan-in normal: gain 2 ahead of ReLU (convs), 1 for the classifier.
  std::int64_t fan_in = 1;
  for (std::size_t i = 1; i < p.shape.size(); ++i) fan_in *= p.shape[i];
  const double gain = p.kind == LayerKind::conv ? 2.0 : 1.0;
  const double stddev = std::sqrt(gain / static_cast<double>(fan_in));
  Rng rng(derive_seed(seed, p.name));
  for (auto& v : t.values()) v = static_cast<T>(rng.normal() * stddev);
  return t;
}

template <class T = float>
BasicModel<T> build(const ModelConfig& config, std::uint64_t seed) {
  BasicModel<T> m;
  m.config = config;
  m.arch = describe(config);
  for (const auto& p : m.arch.parameters()) m.params.emplace(p.name, init_parameter<T>(p, seed));
  for (const auto& bn : m.arch.batchnorms()) {
    const auto c = m.params.at(bn + ".weight").shape();
    m.buffers.emplace(bn + ".running_mean", Tensor<T>(c, T(0)));
    m.buffers.emplace(bn + ".running_var", Tensor<T>(c, T(1)));
  }
  return m;
}

struct ParameterCount {
  std::int64_t total = 0;
  std::map<std::string, std::int64_t> per_layer;
};

/// Learnable elements only; batch-norm running statistics are excluded.
template <class T>
ParameterCount count_parameters(const BasicModel<T>& m) {
  ParameterCount c;
  for (const auto& p : m.arch.parameters()) {
    const auto n = static_cast<std::int64_t>(shape_numel(p.shape));
    c.total += n;
    c.per_layer[p.layer] += n;
  }
  return c;
}

/// Multiply-accumulates per image (one MAC = one FLOP) for convolutions, the
/// classifier, and residual additions.
inline std::int64_t count_flops(const ModelConfig& config, int input_size) {
  ModelConfig c = config;
  c.input_size = input_size;
  const auto a = describe(c);
  std::int64_t total = 0;
  auto conv = [&](const LayerSpec& l) {
    total += static_cast<std::int64_t>(l.out_size) * l.out_size * l.out_channels * l.in_channels * l.kernel * l.kernel;
  };
  conv(a.stem_conv);
  for (const auto& b : a.blocks) {
    conv(b.conv1);
    conv(b.conv2);
    if (b.proj_conv) conv(*b.proj_conv);
    total += static_cast<std::int64_t>(b.bn2.out_size) * b.bn2.out_size * b.bn2.out_channels;
  }
  total += static_cast<std::int64_t>(a.fc.in_channels) * a.fc.out_channels;
  return total;
}

template <class T>
std::int64_t count_flops(const BasicModel<T>& m, int input_size) {
  return count_flops(m.config, input_size);
}

/// Reinitializes only the classifier for `num_classes` outputs.
template <class T>
BasicModel<T> replace_head(const BasicModel<T>& model, int num_classes, std::uint64_t seed) {
  BasicModel<T> m = model;
  m.config.num_classes = num_classes;
  m.arch = describe(m.config);
  for (const auto& p : m.arch.parameters())
    if (p.layer == "fc") m.params[p.name] = init_parameter<T>(p, seed);
  m.masks.erase("fc.weight");
  return m;
}

// ---------------------------------------------------------------------------
// Forward pass
//
// The network walk is written once against a small execution interface so the
// same graph drives eager inference, taped training and calibration.

namespace sites {
inline constexpr std::string_view input = "input";
inline constexpr std::string_view logits = "fc";
}  // namespace sites

/// Activation observation points in execution order: the model input, the
/// stem output, each block's first conv (post-ReLU), each block output
/// (post-add-ReLU), and the logits.
inline std::vector<std::string> observation_sites(const Architecture& a) {
  std::vector<std::string> out{std::string(sites::input), a.stem_conv.name};
  for (const auto& b : a.blocks) {
    out.push_back(b.conv1.name);
    out.push_back(b.prefix);
  }
  out.emplace_back(sites::logits);
  return out;
}

template <class Exec>
typename Exec::Value run_network(Exec& ex, const Architecture& a, typename Exec::Value x) {
  ex.observe(sites::input, x);
  x = ex.relu(ex.bn(ex.conv(x, a.stem_conv), a.stem_bn));
  ex.observe(a.stem_conv.name, x);
  if (a.stem_pool) x = ex.maxpool(x);
  for (const auto& b : a.blocks) {
    auto h = ex.relu(ex.bn(ex.conv(x, b.conv1), b.bn1));
    ex.observe(b.conv1.name, h);
    h = ex.bn(ex.conv(h, b.conv2), b.bn2);
    auto shortcut = b.proj_conv ? ex.bn(ex.conv(x, *b.proj_conv), *b.proj_bn) : x;
    x = ex.relu(ex.add(h, shortcut));
    ex.observe(b.prefix, x);
  }
  auto logits = ex.linear(ex.avgpool(x), a.fc);
  ex.observe(sites::logits, logits);
  return logits;
}

template <class T>
using ActivationObserver = std::function<void(std::string_view site, const Tensor<T>&)>;

template <class T>
struct EagerExec {
  using Value = Tensor<T>;
  const BasicModel<T>& m;
  const ActivationObserver<T>* observer = nullptr;

  Value conv(const Value& x, const LayerSpec& l) {
    return ops::conv2d(x, m.param(l.name + ".weight"), nullptr, l.stride, l.padding);
  }
  Value bn(const Value& x, const LayerSpec& l) {
    return ops::batchnorm2d(x, m.param(l.name + ".weight"), m.param(l.name + ".bias"),
                            m.buffer(l.name + ".running_mean"), m.buffer(l.name + ".running_var"),
                            ops::BnMode::eval)
        .output;
  }
  Value relu(const Value& x) { return ops::relu(x); }
  Value maxpool(const Value& x) { return ops::maxpool2d(x, 3, 2, 1).output; }
  Value add(const Value& a, const Value& b) { return ops::add(a, b); }
  Value avgpool(const Value& x) { return ops::global_avgpool(x); }
  Value linear(const Value& x, const LayerSpec& l) {
    return ops::linear(x, m.param(l.name + ".weight"), &m.param(l.name + ".bias"));
  }
  void observe(std::string_view site, const Value& v) {
    if (observer && *observer) (*observer)(site, v);
  }
};

template <class T>
struct TapeExec {
  using Value = typename GradTape<T>::Var;
  GradTape<T>& tape;
  const BasicModel<T>& m;
  ops::BnMode mode;
  std::map<std::string, BatchStats<T>>* stats = nullptr;
  std::map<std::string, Value> leaves{};

  Value param(const std::string& name) {
    auto it = leaves.find(name);
    if (it != leaves.end()) return it->second;
    return leaves.emplace(name, tape.parameter(name, m.param(name))).first->second;
  }
  Value conv(Value x, const LayerSpec& l) {
    return tape.conv2d(x, param(l.name + ".weight"), std::nullopt, l.stride, l.padding);
  }
  Value bn(Value x, const LayerSpec& l) {
    BatchStats<T>* s = (stats && mode == ops::BnMode::train) ? &(*stats)[l.name] : nullptr;
    return tape.batchnorm2d(x, param(l.name + ".weight"), param(l.name + ".bias"),
                            m.buffer(l.name + ".running_mean"), m.buffer(l.name + ".running_var"), mode, s);
  }
  Value relu(Value x) { return tape.relu(x); }
  Value maxpool(Value x) { return tape.maxpool2d(x, 3, 2, 1); }
  Value add(Value a, Value b) { return tape.add(a, b); }
  Value avgpool(Value x) { return tape.global_avgpool(x); }
  Value linear(Value x, const LayerSpec& l) {
    return tape.linear(x, param(l.name + ".weight"), param(l.name + ".bias"));
  }
  void observe(std::string_view, const Value&) {}
};

inline void check_input_shape(const Shape& s, const ModelConfig& c) {
  if (s.size() != 4 || s[1] != c.in_channels || s[2] != c.input_size || s[3] != c.input_size)
    throw ShapeError("forward: expected input N x " + std::to_string(c.in_channels) + " x " +
                     std::to_string(c.input_size) + " x " + std::to_string(c.input_size) + ", got " +
                     shape_str(s));
}

/// Inference-mode forward (running batch-norm statistics). Returns logits.
template <class T>
Tensor<T> forward(const BasicModel<T>& m, const Tensor<T>& batch,
                  const ActivationObserver<T>* observer = nullptr) {
  check_input_shape(batch.shape(), m.config);
  EagerExec<T> ex{m, observer};
  return run_network(ex, m.arch, batch);
}

/// Recorded forward for gradient computation. In train mode the per-layer
/// batch statistics are written to `stats` when provided.
template <class T>
typename GradTape<T>::Var forward(GradTape<T>& tape, const BasicModel<T>& m, const Tensor<T>& batch,
                                  ops::BnMode mode,
                                  std::map<std::string, BatchStats<T>>* stats = nullptr) {
  check_input_shape(batch.shape(), m.config);
  TapeExec<T> ex{tape, m, mode, stats};
  return run_network(ex, m.arch, tape.constant(batch));
}

/// Folds batch statistics from a train-mode pass into the running estimates
/// (exponential moving average; the running variance uses the unbiased
/// estimate).
template <class T>
void update_running_stats(BasicModel<T>& m, const std::map<std::string, BatchStats<T>>& stats,
                          double momentum = ops::kBatchNormMomentum) {
  for (const auto& [bn, s] : stats) {
    auto& rm = m.buffers.at(bn + ".running_mean");
    auto& rv = m.buffers.at(bn + ".running_var");
    const double unbias = s.count > 1 ? static_cast<double>(s.count) / static_cast<double>(s.count - 1) : 1.0;
    for (std::size_t c = 0; c < rm.size(); ++c) {
      rm[c] = static_cast<T>((1.0 - momentum) * rm[c] + momentum * s.mean[c]);
      rv[c] = static_cast<T>((1.0 - momentum) * rv[c] + momentum * s.var[c] * unbias);
    }
  }
}

}  // namespace rcmp
