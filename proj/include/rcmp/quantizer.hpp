#pragma once

// Post-training affine quantization (unsigned, per-tensor, asymmetric).
//
// A calibration pass records min/max at the observation sites listed by
// observation_sites(). quantize_model() folds batch norm into the preceding
// convolutions, quantizes every folded weight tensor and installs activation
// parameters. Quantized inference runs in one of two modes sharing the same
// site structure:
//
//   simulated  weights and activations pass through quantize/dequantize at
//              each site; arithmetic is f32 (reference semantics)
//   integer    conv/linear accumulate (q_x - z_x) * (q_w - z_w) in i32 and
//              requantize with the f32 multiplier s_x * s_w / s_y

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rcmp/int_gemm.hpp"
#include "rcmp/model.hpp"
#include "rcmp/ops.hpp"
#include "rcmp/quant_params.hpp"
#include "rcmp/serialize.hpp"

namespace rcmp {

class QuantizationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ActivationSites { all, boundary };
enum class QuantMode { simulated, integer };

inline std::string_view activation_sites_name(ActivationSites s) {
  return s == ActivationSites::all ? "all" : "boundary";
}
inline ActivationSites parse_activation_sites(std::string_view s) {
  if (s == "all") return ActivationSites::all;
  if (s == "boundary") return ActivationSites::boundary;
  throw ConfigError("unknown activation site mode '" + std::string(s) + "' (expected all or boundary)");
}
inline QuantMode parse_quant_mode(std::string_view s) {
  if (s == "simulated") return QuantMode::simulated;
  if (s == "integer") return QuantMode::integer;
  throw ConfigError("unknown quantized mode '" + std::string(s) + "' (expected simulated or integer)");
}

// ---------------------------------------------------------------------------
// Scalar mapping

/// Parameters for values observed in [min, max]. The range is widened to
/// contain 0 so that real zero maps to the integer zero point exactly. A
/// constant range (min == max) gets scale 1, zero point qmin and the constant
/// as offset.
inline QuantParams choose_quant_params(double min, double max, int bits = 8) {
  if (bits < 2 || bits > 8) throw std::invalid_argument("quantization bit width must be in [2, 8]");
  if (!(min <= max)) throw std::invalid_argument("quantization range has min > max");
  QuantParams p;
  p.bits = bits;
  p.qmin = 0;
  p.qmax = (1 << bits) - 1;
  if (min == max) {
    p.scale = 1.0f;
    p.zero_point = p.qmin;
    p.offset = static_cast<float>(min);
    return p;
  }
  const double lo = std::min(min, 0.0), hi = std::max(max, 0.0);
  p.scale = static_cast<float>((hi - lo) / static_cast<double>(p.quant_range() - 1));
  const double zp = std::nearbyint(static_cast<double>(p.qmin) - lo / static_cast<double>(p.scale));
  p.zero_point = static_cast<int>(std::clamp(zp, static_cast<double>(p.qmin), static_cast<double>(p.qmax)));
  return p;
}

/// Activation ranges always include 0 and never use the constant offset.
inline QuantParams activation_params(double min, double max, int bits = 8) {
  const double lo = std::min(min, 0.0), hi = std::max(max, 0.0);
  if (lo == hi) {
    QuantParams p;
    p.bits = bits;
    p.qmax = (1 << bits) - 1;
    return p;
  }
  return choose_quant_params(lo, hi, bits);
}

/// Round half to even (default floating-point environment), then clamp.
inline int quantize_value(double x, const QuantParams& p) {
  const double r = std::nearbyint((x - static_cast<double>(p.offset)) / static_cast<double>(p.scale));
  const double q = r + static_cast<double>(p.zero_point);
  return static_cast<int>(std::clamp(q, static_cast<double>(p.qmin), static_cast<double>(p.qmax)));
}

inline float dequantize_value(int q, const QuantParams& p) {
  return p.scale * static_cast<float>(q - p.zero_point) + p.offset;
}

inline float fake_quantize(float x, const QuantParams& p) { return dequantize_value(quantize_value(x, p), p); }

struct QuantizedTensor {
  Tensor<std::uint8_t> values;
  QuantParams params;
};

inline Tensor<std::uint8_t> quantize(const Tensor<float>& x, const QuantParams& p) {
  Tensor<std::uint8_t> q(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) q[i] = static_cast<std::uint8_t>(quantize_value(x[i], p));
  return q;
}

inline QuantizedTensor quantize_tensor(const Tensor<float>& x, double stats_min, double stats_max, int bits = 8) {
  const auto p = choose_quant_params(stats_min, stats_max, bits);
  return {quantize(x, p), p};
}

inline QuantizedTensor quantize_tensor(const Tensor<float>& x, int bits = 8) {
  const auto [lo, hi] = std::minmax_element(x.values().begin(), x.values().end());
  return quantize_tensor(x, *lo, *hi, bits);
}

inline Tensor<float> dequantize(const Tensor<std::uint8_t>& q, const QuantParams& p) {
  Tensor<float> x(q.shape());
  for (std::size_t i = 0; i < q.size(); ++i) x[i] = dequantize_value(q[i], p);
  return x;
}

// ---------------------------------------------------------------------------
// Calibration

struct SiteRange {
  float min = std::numeric_limits<float>::infinity();
  float max = -std::numeric_limits<float>::infinity();

  void observe(std::span<const float> v) {
    for (float x : v) {
      min = std::min(min, x);
      max = std::max(max, x);
    }
  }
  bool operator==(const SiteRange&) const = default;
};

struct CalibrationStats {
  std::vector<std::string> sites;  // execution order
  std::map<std::string, SiteRange> ranges;
  std::size_t batches = 0;

  /// Elementwise min/max union (calibration is a monoid over batches).
  CalibrationStats merged(const CalibrationStats& o) const {
    CalibrationStats r = *this;
    if (r.sites.empty()) r.sites = o.sites;
    for (const auto& [site, rg] : o.ranges) {
      auto& d = r.ranges[site];
      d.min = std::min(d.min, rg.min);
      d.max = std::max(d.max, rg.max);
    }
    r.batches += o.batches;
    return r;
  }
};

inline void to_json(nlohmann::json& j, const CalibrationStats& s) {
  j = nlohmann::json::object();
  j["batches"] = s.batches;
  for (const auto& site : s.sites) {
    const auto& r = s.ranges.at(site);
    j["sites"].push_back({{"site", site}, {"min", r.min}, {"max", r.max}});
  }
}

inline CalibrationStats calibrate(const Model& model, const std::vector<Tensor<float>>& batches) {
  if (batches.empty()) throw std::invalid_argument("calibrate: no calibration batches");
  CalibrationStats s;
  s.sites = observation_sites(model.arch);
  ActivationObserver<float> obs = [&](std::string_view site, const Tensor<float>& v) {
    s.ranges[std::string(site)].observe(v.values());
  };
  for (const auto& b : batches) {
    forward(model, b, &obs);
    ++s.batches;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Batch-norm folding

struct FoldedLayer {
  LayerSpec spec;  // conv or linear
  Tensor<float> weight;
  Tensor<float> bias;
};

/// Convolutions absorb their batch norm: w' = w * g / sqrt(var + eps),
/// b' = beta - g * mean / sqrt(var + eps).
struct FoldedModel {
  ModelConfig config;
  Architecture arch;
  std::map<std::string, FoldedLayer> layers;  // keyed by conv/linear layer name
};

inline FoldedLayer fold_conv_bn(const Model& m, const LayerSpec& conv, const LayerSpec& bn,
                                double eps = ops::kBatchNormEps) {
  const auto& w = m.param(conv.name + ".weight");
  const auto& gamma = m.param(bn.name + ".weight");
  const auto& beta = m.param(bn.name + ".bias");
  const auto& mean = m.buffer(bn.name + ".running_mean");
  const auto& var = m.buffer(bn.name + ".running_var");
  FoldedLayer f{conv, Tensor<float>(w.shape()), Tensor<float>(Shape{conv.out_channels})};
  const std::size_t per_out = w.size() / static_cast<std::size_t>(conv.out_channels);
  for (std::size_t o = 0; o < static_cast<std::size_t>(conv.out_channels); ++o) {
    if (!(static_cast<double>(var[o]) + eps > 0.0))
      throw QuantizationError("fold: non-positive variance in '" + bn.name + "'");
    const double s = static_cast<double>(gamma[o]) / std::sqrt(static_cast<double>(var[o]) + eps);
    for (std::size_t k = 0; k < per_out; ++k)
      f.weight[o * per_out + k] = static_cast<float>(static_cast<double>(w[o * per_out + k]) * s);
    f.bias[o] = static_cast<float>(static_cast<double>(beta[o]) - static_cast<double>(mean[o]) * s);
  }
  return f;
}

inline FoldedModel fold_batchnorm(const Model& m) {
  FoldedModel f{m.config, m.arch, {}};
  auto add = [&](FoldedLayer l) { f.layers.emplace(l.spec.name, std::move(l)); };
  add(fold_conv_bn(m, m.arch.stem_conv, m.arch.stem_bn));
  for (const auto& b : m.arch.blocks) {
    add(fold_conv_bn(m, b.conv1, b.bn1));
    add(fold_conv_bn(m, b.conv2, b.bn2));
    if (b.proj_conv) add(fold_conv_bn(m, *b.proj_conv, *b.proj_bn));
  }
  add(FoldedLayer{m.arch.fc, m.param("fc.weight"), m.param("fc.bias")});
  return f;
}

/// Convolution and linear layers in execution order.
inline std::vector<LayerSpec> weight_layers(const Architecture& a) {
  std::vector<LayerSpec> out{a.stem_conv};
  for (const auto& b : a.blocks) {
    out.push_back(b.conv1);
    out.push_back(b.conv2);
    if (b.proj_conv) out.push_back(*b.proj_conv);
  }
  out.push_back(a.fc);
  return out;
}

inline Shape weight_shape(const LayerSpec& l) {
  if (l.kind == LayerKind::linear) return {l.out_channels, l.in_channels};
  return {l.out_channels, l.in_channels, l.kernel, l.kernel};
}

// ---------------------------------------------------------------------------
// Quantized model

struct QuantizedLayer {
  LayerSpec spec;
  QuantizedTensor weight;
  Tensor<float> bias;
};

struct QuantizedModel {
  ModelConfig config;
  Architecture arch;
  std::map<std::string, QuantizedLayer> layers;  // keyed by conv/linear layer name
  std::map<std::string, QuantParams> activations;
  ActivationSites site_mode = ActivationSites::all;
  bool bn_folded = true;
  std::map<std::string, Tensor<std::uint8_t>> masks;

  const QuantizedLayer& layer(const std::string& name) const {
    auto it = layers.find(name);
    if (it == layers.end()) throw QuantizationError("quantized model has no layer '" + name + "'");
    return it->second;
  }
};

/// Sites whose parameters come from calibration for the given mode.
inline std::vector<std::string> static_sites(const Architecture& a, ActivationSites mode) {
  if (mode == ActivationSites::all) return observation_sites(a);
  return {std::string(sites::input), std::string(sites::logits)};
}

/// Largest |accumulator| an integer-mode layer can reach: every centered
/// operand is bounded by 255 in magnitude.
inline std::int64_t accumulator_bound(const LayerSpec& l) {
  const std::int64_t fan_in = l.kind == LayerKind::linear ? l.in_channels
                                                          : static_cast<std::int64_t>(l.in_channels) * l.kernel * l.kernel;
  return 255LL * 255LL * fan_in;
}

inline QuantizedModel quantize_model(const Model& model, const CalibrationStats& stats,
                                     ActivationSites mode = ActivationSites::all) {
  QuantizedModel q;
  q.config = model.config;
  q.arch = model.arch;
  q.site_mode = mode;
  q.masks = model.masks;
  for (const auto& site : static_sites(model.arch, mode)) {
    auto it = stats.ranges.find(site);
    if (it == stats.ranges.end() || !(it->second.min <= it->second.max))
      throw QuantizationError("quantize_model: calibration stats are missing site '" + site + "'");
    q.activations.emplace(site, activation_params(it->second.min, it->second.max));
  }
  for (auto& [name, f] : fold_batchnorm(model).layers) {
    if (accumulator_bound(f.spec) > std::numeric_limits<std::int32_t>::max())
      throw QuantizationError("quantize_model: i32 accumulator could overflow in '" + name + "'");
    q.layers.emplace(name, QuantizedLayer{f.spec, quantize_tensor(f.weight), std::move(f.bias)});
  }
  return q;
}

// ---------------------------------------------------------------------------
// Quantized execution

namespace detail {

template <class Exec>
Tensor<float> run_quantized(Exec& ex, const Architecture& a, Tensor<float> input) {
  auto x = ex.enter(std::move(input));
  x = ex.conv(x, a.stem_conv, true, a.stem_conv.name);
  if (a.stem_pool) x = ex.maxpool(x);
  for (const auto& b : a.blocks) {
    auto h = ex.conv(x, b.conv1, true, b.conv1.name);
    x = ex.residual(h, b.conv2, x, b.proj_conv ? &*b.proj_conv : nullptr, b.prefix);
  }
  x = ex.avgpool(x);
  return ex.logits(x, a.fc);
}

inline QuantParams dynamic_params(std::span<const float> v) {
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  return activation_params(*lo, *hi);
}

/// f32 execution of the folded graph. With `quant` set it fake-quantizes
/// weights and activations (simulated mode); otherwise it is the plain
/// folded network.
struct FloatExec {
  using Value = Tensor<float>;
  const QuantizedModel* quant = nullptr;
  const FoldedModel* folded = nullptr;
  const std::map<std::string, Tensor<float>>* weights = nullptr;  // dequantized (simulated) or folded
  QuantParams current;

  const Tensor<float>& weight(const std::string& name) const { return weights->at(name); }

  const Tensor<float>& bias(const std::string& name) const {
    return quant ? quant->layer(name).bias : folded->layers.at(name).bias;
  }

  void site(Value& v, const std::string& name) {
    if (!quant) return;
    auto it = quant->activations.find(name);
    current = it != quant->activations.end() ? it->second : dynamic_params(v.values());
    for (auto& x : v.values()) x = fake_quantize(x, current);
  }

  Value enter(Value x) {
    site(x, std::string(sites::input));
    return x;
  }
  Value conv(const Value& x, const LayerSpec& l, bool relu, const std::string& site_name) {
    auto y = ops::conv2d(x, weight(l.name), &bias(l.name), l.stride, l.padding);
    if (relu) y = ops::relu(y);
    site(y, site_name);
    return y;
  }
  Value residual(const Value& h, const LayerSpec& conv2, const Value& x, const LayerSpec* proj,
                 const std::string& site_name) {
    auto y = ops::conv2d(h, weight(conv2.name), &bias(conv2.name), conv2.stride, conv2.padding);
    const auto sc = proj ? ops::conv2d(x, weight(proj->name), &bias(proj->name), proj->stride, proj->padding) : x;
    y = ops::relu(ops::add(y, sc));
    site(y, site_name);
    return y;
  }
  Value maxpool(const Value& x) { return ops::maxpool2d(x, 3, 2, 1).output; }
  Value avgpool(const Value& x) {
    auto y = ops::global_avgpool(x);
    if (quant)
      for (auto& v : y.values()) v = fake_quantize(v, current);
    return y;
  }
  Value logits(const Value& x, const LayerSpec& fc) {
    auto y = ops::linear(x, weight(fc.name), &bias(fc.name));
    site(y, std::string(sites::logits));
    return y;
  }
};

struct QValue {
  Tensor<std::uint8_t> q;
  QuantParams p;
};

/// q_w - z_w as rows of `depth` values, zero-padded to `stride`.
struct CenteredWeights {
  std::vector<std::int16_t> data;
  std::int64_t rows = 0, depth = 0, stride = 0;
};

inline CenteredWeights center_weights(const QuantizedLayer& l) {
  CenteredWeights c;
  c.rows = l.spec.out_channels;
  c.depth = static_cast<std::int64_t>(l.weight.values.size()) / c.rows;
  c.stride = padded_depth(c.depth);
  c.data.assign(static_cast<std::size_t>(c.rows * c.stride), 0);
  for (std::int64_t r = 0; r < c.rows; ++r)
    for (std::int64_t k = 0; k < c.depth; ++k)
      c.data[static_cast<std::size_t>(r * c.stride + k)] = static_cast<std::int16_t>(
          static_cast<int>(l.weight.values[static_cast<std::size_t>(r * c.depth + k)]) - l.weight.params.zero_point);
  return c;
}

/// Integer execution: u8 activations, centered i16 operands, i32
/// accumulators.
struct IntegerExec {
  using Value = QValue;
  const QuantizedModel& model;
  const std::map<std::string, CenteredWeights>& centered;
  std::vector<std::int16_t> padded, col;
  std::vector<std::int32_t> acc, acc2;
  std::vector<std::uint8_t> pool_pad;

  const QuantParams* static_site(const std::string& name) const {
    auto it = model.activations.find(name);
    return it == model.activations.end() ? nullptr : &it->second;
  }

  // acc[o * P + p] = sum_k (q_w[o,k] - z_w) * (q_x[k,p] - z_x)
  void accumulate(const QValue& x, const LayerSpec& l, std::vector<std::int32_t>& out, ops::ConvGeometry& g) {
    const auto& wq = centered.at(l.name);
    g = ops::conv_geometry(x.q.shape(), Shape{l.out_channels, l.in_channels, l.kernel, l.kernel}, l.stride, l.padding);
    const auto P = g.positions(), Kp = wq.stride;
    // Centered input with a zero border, so patches need no bounds checks.
    const auto Hp = g.height + 2 * g.padding, Wp = g.width + 2 * g.padding, C = g.in_channels, Kk = g.kernel;
    padded.resize(static_cast<std::size_t>(C * Hp * Wp));
    const auto zx = static_cast<std::int16_t>(x.p.zero_point);
    const auto pad = g.padding;
    const std::uint8_t* src = x.q.data();
    for (std::int64_t c = 0; c < C; ++c) {
      std::int16_t* plane = padded.data() + c * Hp * Wp;
      std::fill(plane, plane + pad * Wp, std::int16_t{0});
      std::fill(plane + (pad + g.height) * Wp, plane + Hp * Wp, std::int16_t{0});
      for (std::int64_t h = 0; h < g.height; ++h) {
        std::int16_t* d = plane + (h + pad) * Wp;
        const std::uint8_t* r = src + (c * g.height + h) * g.width;
        if (pad == 1) {
          d[0] = 0;
          d[Wp - 1] = 0;
        } else {
          std::fill(d, d + pad, std::int16_t{0});
          std::fill(d + pad + g.width, d + Wp, std::int16_t{0});
        }
        for (std::int64_t w = 0; w < g.width; ++w) d[pad + w] = static_cast<std::int16_t>(r[w] - zx);
      }
    }
    const auto K = C * Kk * Kk;
    // Rows are written up to K only; the tail [K, Kp) must read as zero.
    if (K < Kp)
      col.assign(static_cast<std::size_t>(P * Kp), 0);
    else
      col.resize(static_cast<std::size_t>(P * Kp));
    for (std::int64_t oh = 0; oh < g.out_height; ++oh) {
      for (std::int64_t ow = 0; ow < g.out_width; ++ow) {
        std::int16_t* dst = col.data() + (oh * g.out_width + ow) * Kp;
        const std::int16_t* base = padded.data() + oh * g.stride * Wp + ow * g.stride;
        if (Kk == 3) {
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t kh = 0; kh < 3; ++kh, dst += 3) {
              const std::int16_t* s = base + (c * Hp + kh) * Wp;
              dst[0] = s[0];
              dst[1] = s[1];
              dst[2] = s[2];
            }
        } else {
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t kh = 0; kh < Kk; ++kh, dst += Kk)
              for (std::int64_t kw = 0; kw < Kk; ++kw) dst[kw] = base[(c * Hp + kh) * Wp + kw];
        }
      }
    }
    out.resize(static_cast<std::size_t>(g.out_channels * P));
    int_gemm_nt(wq.data.data(), col.data(), g.out_channels, P, Kp, out.data());
  }

  // Requantizes real-valued outputs given as a * acc + b per channel.
  template <class RealFn>
  QValue requantize(const Shape& shape, std::int64_t channels, std::int64_t positions, bool relu,
                    const std::string& site_name, RealFn&& real) {
    QValue out{Tensor<std::uint8_t>(shape), {}};
    if (const auto* p = static_site(site_name)) {
      out.p = *p;
      const float inv = 1.0f / p->scale;
      const int lo = relu ? std::max(p->zero_point, p->qmin) : p->qmin;
      for (std::int64_t c = 0; c < channels; ++c)
        for (std::int64_t i = 0; i < positions; ++i) {
          const float v = real(c, i, inv);
          const int q = round_half_even(v) + p->zero_point;
          out.q[static_cast<std::size_t>(c * positions + i)] = static_cast<std::uint8_t>(std::clamp(q, lo, p->qmax));
        }
      return out;
    }
    // Dynamic site: materialize reals, derive the range, then quantize.
    Tensor<float> r(shape);
    for (std::int64_t c = 0; c < channels; ++c)
      for (std::int64_t i = 0; i < positions; ++i) {
        float v = real(c, i, 1.0f);
        r[static_cast<std::size_t>(c * positions + i)] = relu ? std::max(v, 0.0f) : v;
      }
    out.p = dynamic_params(r.values());
    out.q = quantize(r, out.p);
    return out;
  }

  void require_supported(const QuantizedLayer& l) const {
    if (l.weight.params.offset != 0.0f)
      throw QuantizationError("integer mode: layer '" + l.spec.name +
                              "' has a constant weight tensor (offset encoding) and cannot run in integer arithmetic");
  }

  QValue enter(const Tensor<float>& x) {
    const auto* p = static_site(std::string(sites::input));
    if (!p) throw QuantizationError("integer mode: input site is not calibrated");
    return {quantize(x, *p), *p};
  }

  QValue conv(const QValue& x, const LayerSpec& l, bool relu, const std::string& site_name) {
    const auto& L = model.layer(l.name);
    require_supported(L);
    ops::ConvGeometry g{};
    accumulate(x, l, acc, g);
    const auto P = g.positions();
    const float sxsw = x.p.scale * L.weight.params.scale;
    return requantize(Shape{1, g.out_channels, g.out_height, g.out_width}, g.out_channels, P, relu, site_name,
                      [&](std::int64_t c, std::int64_t i, float inv) {
                        return (sxsw * inv) * static_cast<float>(acc[static_cast<std::size_t>(c * P + i)]) +
                               L.bias[static_cast<std::size_t>(c)] * inv;
                      });
  }

  QValue residual(const QValue& h, const LayerSpec& conv2, const QValue& x, const LayerSpec* proj,
                  const std::string& site_name) {
    const auto& L2 = model.layer(conv2.name);
    require_supported(L2);
    ops::ConvGeometry g{};
    accumulate(h, conv2, acc, g);
    const auto P = g.positions();
    const float s2 = h.p.scale * L2.weight.params.scale;
    const Shape shape{1, g.out_channels, g.out_height, g.out_width};
    if (proj) {
      const auto& Lp = model.layer(proj->name);
      require_supported(Lp);
      ops::ConvGeometry gp{};
      accumulate(x, *proj, acc2, gp);
      const float sp = x.p.scale * Lp.weight.params.scale;
      return requantize(shape, g.out_channels, P, true, site_name, [&](std::int64_t c, std::int64_t i, float inv) {
        const auto k = static_cast<std::size_t>(c * P + i);
        return (s2 * inv) * static_cast<float>(acc[k]) + (sp * inv) * static_cast<float>(acc2[k]) +
               (L2.bias[static_cast<std::size_t>(c)] + Lp.bias[static_cast<std::size_t>(c)]) * inv;
      });
    }
    return requantize(shape, g.out_channels, P, true, site_name, [&](std::int64_t c, std::int64_t i, float inv) {
      const auto k = static_cast<std::size_t>(c * P + i);
      return (s2 * inv) * static_cast<float>(acc[k]) +
             (x.p.scale * inv) * static_cast<float>(static_cast<int>(x.q[k]) - x.p.zero_point) +
             L2.bias[static_cast<std::size_t>(c)] * inv;
    });
  }

  // 3x3 stride 2 pad 1. Codes are never below 0, so a zero border cannot
  // win a max and the window needs no bounds checks.
  QValue maxpool(const QValue& x) {
    const auto& s = x.q.shape();
    const auto C = s[1], H = s[2], W = s[3], Hp = H + 2, Wp = W + 2;
    const auto Ho = ops::pooled_extent(H, 3, 2, 1), Wo = ops::pooled_extent(W, 3, 2, 1);
    pool_pad.assign(static_cast<std::size_t>(Hp * Wp), 0);
    QValue out{Tensor<std::uint8_t>(Shape{1, C, Ho, Wo}), x.p};
    std::uint8_t* o = out.q.data();
    for (std::int64_t c = 0; c < C; ++c) {
      for (std::int64_t h = 0; h < H; ++h)
        std::copy_n(x.q.data() + (c * H + h) * W, W, pool_pad.data() + (h + 1) * Wp + 1);
      for (std::int64_t oh = 0; oh < Ho; ++oh) {
        const std::uint8_t* r0 = pool_pad.data() + 2 * oh * Wp;
        const std::uint8_t* r1 = r0 + Wp;
        const std::uint8_t* r2 = r1 + Wp;
        for (std::int64_t ow = 0; ow < Wo; ++ow, ++o) {
          const auto k = 2 * ow;
          const std::uint8_t a = std::max({r0[k], r0[k + 1], r0[k + 2]});
          const std::uint8_t b = std::max({r1[k], r1[k + 1], r1[k + 2]});
          const std::uint8_t d = std::max({r2[k], r2[k + 1], r2[k + 2]});
          *o = std::max({a, b, d});
        }
      }
    }
    return out;
  }

  QValue avgpool(const QValue& x) {
    const auto& s = x.q.shape();
    const auto C = s[1], HW = s[2] * s[3];
    QValue out{Tensor<std::uint8_t>(Shape{1, C}), x.p};
    for (std::int64_t c = 0; c < C; ++c) {
      std::int64_t sum = 0;
      for (std::int64_t i = 0; i < HW; ++i) sum += x.q[static_cast<std::size_t>(c * HW + i)];
      const double mean = static_cast<double>(sum) / static_cast<double>(HW);
      out.q[static_cast<std::size_t>(c)] = static_cast<std::uint8_t>(std::clamp<int>(static_cast<int>(std::nearbyint(mean)), x.p.qmin, x.p.qmax));
    }
    return out;
  }

  Tensor<float> logits(const QValue& x, const LayerSpec& fc) {
    const auto& L = model.layer(fc.name);
    require_supported(L);
    const auto* p = static_site(std::string(sites::logits));
    if (!p) throw QuantizationError("integer mode: logits site is not calibrated");
    const auto& wq = centered.at(fc.name);
    const auto F = fc.in_channels, G = fc.out_channels;
    const float m = x.p.scale * L.weight.params.scale / p->scale;
    Tensor<float> out(Shape{1, G});
    for (std::int64_t g = 0; g < G; ++g) {
      std::int32_t s = 0;
      for (std::int64_t f = 0; f < F; ++f)
        s += static_cast<std::int32_t>(wq.data[static_cast<std::size_t>(g * wq.stride + f)]) *
             (static_cast<std::int32_t>(x.q[static_cast<std::size_t>(f)]) - x.p.zero_point);
      const float v = m * static_cast<float>(s) + L.bias[static_cast<std::size_t>(g)] / p->scale;
      const int q = std::clamp(static_cast<int>(std::nearbyint(v)) + p->zero_point, p->qmin, p->qmax);
      out[static_cast<std::size_t>(g)] = dequantize_value(q, *p);
    }
    return out;
  }
};

inline Tensor<float> sample_slice(const Tensor<float>& batch, std::int64_t n) {
  const auto& s = batch.shape();
  const auto per = shape_numel(s) / static_cast<std::size_t>(s[0]);
  std::vector<float> v(batch.data() + n * static_cast<std::int64_t>(per), batch.data() + (n + 1) * static_cast<std::int64_t>(per));
  Shape one = s;
  one[0] = 1;
  return Tensor<float>(std::move(one), std::move(v));
}

}  // namespace detail

/// Prepared quantized model: caches dequantized weights for simulated mode
/// and centered integer weights for integer mode. Read-only after
/// construction apart from per-call scratch buffers.
class QuantizedEngine {
 public:
  explicit QuantizedEngine(const QuantizedModel& m) : model_(m) {
    for (const auto& [name, l] : m.layers) {
      dequantized_.emplace(name, dequantize(l.weight.values, l.weight.params));
      centered_.emplace(name, detail::center_weights(l));
    }
  }

  const QuantizedModel& model() const { return model_; }

  /// Logits for an N x C x S x S batch, evaluated one sample at a time.
  Tensor<float> forward(const Tensor<float>& batch, QuantMode mode) const {
    check_input_shape(batch.shape(), model_.config);
    const auto N = batch.dim(0), G = static_cast<std::int64_t>(model_.config.num_classes);
    Tensor<float> out(Shape{N, G});
    for (std::int64_t n = 0; n < N; ++n) {
      auto x = detail::sample_slice(batch, n);
      Tensor<float> y;
      if (mode == QuantMode::simulated) {
        detail::FloatExec ex{&model_, nullptr, &dequantized_, {}};
        y = detail::run_quantized(ex, model_.arch, std::move(x));
      } else {
        detail::IntegerExec ex{model_, centered_, {}, {}, {}, {}, {}};
        y = detail::run_quantized(ex, model_.arch, std::move(x));
      }
      std::copy(y.values().begin(), y.values().end(), out.data() + n * G);
    }
    return out;
  }

 private:
  const QuantizedModel& model_;
  std::map<std::string, Tensor<float>> dequantized_;
  std::map<std::string, detail::CenteredWeights> centered_;
};

inline Tensor<float> quantized_forward(const QuantizedModel& qm, const Tensor<float>& batch, QuantMode mode) {
  return QuantizedEngine(qm).forward(batch, mode);
}

/// Forward through the folded (but unquantized) network.
inline Tensor<float> folded_forward(const FoldedModel& f, const Tensor<float>& batch) {
  check_input_shape(batch.shape(), f.config);
  std::map<std::string, Tensor<float>> weights;
  for (const auto& [name, l] : f.layers) weights.emplace(name, l.weight);
  detail::FloatExec ex{nullptr, &f, &weights, {}};
  return detail::run_quantized(ex, f.arch, batch);
}

/// Scale of the logits site, the unit in which cross-mode divergence is
/// measured.
inline float logit_scale(const QuantizedModel& qm) { return qm.activations.at(std::string(sites::logits)).scale; }

// ---------------------------------------------------------------------------
// Serialization

inline Archive to_archive(const QuantizedModel& q, nlohmann::json provenance = nlohmann::json::object()) {
  Archive a;
  a.kind = "quantized";
  a.config = q.config;
  a.provenance = std::move(provenance);
  a.meta["activation_sites"] = activation_sites_name(q.site_mode);
  a.meta["bn_folded"] = q.bn_folded;
  a.meta["activations"] = nlohmann::json::object();
  for (const auto& [site, p] : q.activations) a.meta["activations"][site] = p;
  for (const auto& spec : weight_layers(q.arch)) {
    const auto& name = spec.name;
    const auto& l = q.layer(name);
    a.tensors.push_back(TensorRecord::from(name + ".weight", "qweight", l.weight.values, l.weight.params));
    a.tensors.push_back(TensorRecord::from(name + ".bias", "bias", l.bias));
  }
  for (const auto& [name, mask] : q.masks) a.tensors.push_back(TensorRecord::from(name, "mask", mask));
  return a;
}

inline QuantizedModel quantized_from_archive(const Archive& a) {
  if (a.kind != "quantized")
    throw FormatError(FormatErrorKind::bad_manifest, "expected a quantized model, file holds kind '" + a.kind + "'");
  QuantizedModel q;
  q.config = config_from_archive(a);
  q.arch = describe(q.config);
  try {
    q.site_mode = parse_activation_sites(a.meta.at("activation_sites").get<std::string>());
    q.bn_folded = a.meta.value("bn_folded", true);
    for (const auto& [site, p] : a.meta.at("activations").items()) q.activations.emplace(site, p.get<QuantParams>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::bad_manifest, std::string("quantization metadata: ") + e.what());
  }
  for (const auto& spec : weight_layers(q.arch)) {
    const auto& name = spec.name;
    const auto* w = a.find(name + ".weight", "qweight");
    const auto* b = a.find(name + ".bias", "bias");
    if (!w || !b || !w->quant) throw FormatError(FormatErrorKind::bad_manifest, "missing quantized layer '" + name + "'");
    if (w->shape != weight_shape(spec) || b->shape != Shape{spec.out_channels})
      throw FormatError(FormatErrorKind::bad_manifest, "quantized layer '" + name + "' has the wrong shape");
    q.layers.emplace(name, QuantizedLayer{spec, {w->as<std::uint8_t>(), *w->quant}, b->as<float>()});
  }
  for (const auto& t : a.tensors)
    if (t.role == "mask") q.masks.emplace(t.name, t.as<std::uint8_t>());
  return q;
}

inline void save(const QuantizedModel& q, const std::filesystem::path& path,
                 nlohmann::json provenance = nlohmann::json::object()) {
  write_archive(path, to_archive(q, std::move(provenance)));
}

inline QuantizedModel load_quantized(const std::filesystem::path& path) {
  return quantized_from_archive(read_archive(path));
}

inline std::string model_hash(const QuantizedModel& q) { return content_hash(to_archive(q)); }

}  // namespace rcmp
