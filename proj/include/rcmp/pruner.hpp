#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rcmp/model.hpp"
#include "rcmp/trainer.hpp"

namespace rcmp {

class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class PruneScope { global, per_layer };

inline PruneScope parse_prune_scope(std::string_view s) {
  if (s == "global") return PruneScope::global;
  if (s == "per_layer") return PruneScope::per_layer;
  throw ConfigError("unknown prune scope '" + std::string(s) + "' (expected global or per_layer)");
}

/// Convolution and linear weights; never biases or batch-norm parameters.
inline bool default_prune_targets(const ParamInfo& p) {
  return (p.kind == LayerKind::conv || p.kind == LayerKind::linear) && p.role == ParamRole::weight;
}

struct PruneConfig {
  double retain_quantile = 0.67;  // weights with |w| below this quantile of |w| are zeroed
  PruneScope scope = PruneScope::global;
  std::function<bool(const ParamInfo&)> targets = default_prune_targets;

  void validate() const {
    if (!(retain_quantile >= 0.0 && retain_quantile < 1.0))
      throw ConfigError("prune config: retain_quantile must lie in [0, 1)");
  }
};

/// Quantile of `values` by linear interpolation between order statistics
/// (position q * (n - 1) in ascending order). Reorders `values`.
template <class V>
double interpolated_quantile(std::vector<V>& values, double q) {
  if (values.empty()) throw std::invalid_argument("quantile of an empty set");
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - static_cast<double>(lo);
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(lo), values.end());
  const double a = static_cast<double>(values[lo]);
  if (frac == 0.0 || lo + 1 >= values.size()) return a;
  const double b = static_cast<double>(*std::min_element(values.begin() + static_cast<std::ptrdiff_t>(lo + 1), values.end()));
  return a + frac * (b - a);
}

struct PruneThreshold {
  PruneScope scope = PruneScope::global;
  double global = 0.0;
  std::map<std::string, double> per_tensor;

  double for_tensor(const std::string& name) const {
    return scope == PruneScope::global ? global : per_tensor.at(name);
  }
};

template <class T>
std::vector<ParamInfo> prune_targets(const BasicModel<T>& m, const PruneConfig& cfg) {
  std::vector<ParamInfo> out;
  for (const auto& p : m.arch.parameters())
    if (cfg.targets(p)) out.push_back(p);
  return out;
}

template <class T>
PruneThreshold compute_threshold(const BasicModel<T>& m, const PruneConfig& cfg) {
  cfg.validate();
  const auto targets = prune_targets(m, cfg);
  if (targets.empty()) throw std::invalid_argument("compute_threshold: no target tensors selected");
  PruneThreshold t;
  t.scope = cfg.scope;
  auto magnitudes = [&](const ParamInfo& p, std::vector<T>& out) {
    for (auto v : m.param(p.name).values()) out.push_back(std::abs(v));
  };
  if (cfg.scope == PruneScope::global) {
    std::vector<T> all;
    for (const auto& p : targets) magnitudes(p, all);
    t.global = interpolated_quantile(all, cfg.retain_quantile);
  } else {
    for (const auto& p : targets) {
      std::vector<T> mags;
      magnitudes(p, mags);
      t.per_tensor[p.name] = interpolated_quantile(mags, cfg.retain_quantile);
    }
  }
  return t;
}

struct TensorSparsity {
  std::string name;
  std::int64_t total = 0, nonzero = 0;
  bool prunable = false;
};

/// Retained = nonzero entries of prunable tensors plus every entry of the
/// tensors pruning never touches.
struct SparsityReport {
  std::int64_t total = 0;
  std::int64_t nonzero = 0;
  double reduction_percent = 0.0;
  std::vector<TensorSparsity> tensors;
  std::optional<double> loss_before, loss_after;  // on a fixed probe batch, when measured

  std::string table() const {
    std::ostringstream os;
    std::size_t w = 6;
    for (const auto& t : tensors) w = std::max(w, t.name.size());
    auto pad = [&](const std::string& s) { return s + std::string(w - s.size() + 2, ' '); };
    os << pad("tensor") << "      total    nonzero  sparsity%\n";
    auto row = [&](const std::string& n, std::int64_t tot, std::int64_t nz) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%11lld%11lld%11.2f\n", static_cast<long long>(tot), static_cast<long long>(nz),
                    tot ? 100.0 * (1.0 - static_cast<double>(nz) / static_cast<double>(tot)) : 0.0);
      os << pad(n) << buf;
    };
    for (const auto& t : tensors) row(t.name, t.total, t.nonzero);
    row("TOTAL", total, nonzero);
    return os.str();
  }
};

inline void to_json(nlohmann::json& j, const SparsityReport& r) {
  auto rows = nlohmann::json::array();
  for (const auto& t : r.tensors)
    rows.push_back({{"name", t.name}, {"total", t.total}, {"nonzero", t.nonzero}, {"prunable", t.prunable}});
  j = nlohmann::json{{"total", r.total}, {"nonzero", r.nonzero}, {"reduction_percent", r.reduction_percent},
                     {"tensors", rows}};
  if (r.loss_before) j["loss_before"] = *r.loss_before;
  if (r.loss_after) j["loss_after"] = *r.loss_after;
}

/// Counts are recomputed from the tensors and cross-checked against the
/// model's masks: a masked position holding a nonzero weight is an
/// integrity error.
template <class T>
SparsityReport sparsity_report(const BasicModel<T>& m, const PruneConfig& cfg = {}) {
  for (const auto& [name, mask] : m.masks) {
    auto it = m.params.find(name);
    if (it == m.params.end()) throw IntegrityError("mask '" + name + "' has no matching parameter");
    if (it->second.shape() != mask.shape())
      throw IntegrityError("mask '" + name + "' shape " + shape_str(mask.shape()) + " differs from tensor " +
                           shape_str(it->second.shape()));
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (mask[i] > 1) throw IntegrityError("mask '" + name + "' holds a non-binary entry");
      if (mask[i] == 0 && it->second[i] != T(0))
        throw IntegrityError("mask '" + name + "' disagrees with tensor at element " + std::to_string(i));
    }
  }
  SparsityReport r;
  for (const auto& p : m.arch.parameters()) {
    const auto& t = m.param(p.name);
    TensorSparsity s{p.name, static_cast<std::int64_t>(t.size()), 0, cfg.targets(p)};
    if (s.prunable) {
      for (auto v : t.values()) s.nonzero += v != T(0);
    } else {
      s.nonzero = s.total;
    }
    r.total += s.total;
    r.nonzero += s.nonzero;
    r.tensors.push_back(std::move(s));
  }
  r.reduction_percent = r.total ? 100.0 * (1.0 - static_cast<double>(r.nonzero) / static_cast<double>(r.total)) : 0.0;
  return r;
}

template <class T>
struct PruneResult {
  BasicModel<T> model;
  std::map<std::string, Tensor<std::uint8_t>> masks;  // tensors with at least one pruned entry
  PruneThreshold threshold;
  SparsityReport report;
};

/// Zeroes every target weight with |w| strictly below the threshold. Values
/// equal to the threshold survive. Existing masks are intersected with the
/// new ones.
template <class T>
PruneResult<T> apply_prune(const BasicModel<T>& model, const PruneConfig& cfg = {}) {
  PruneResult<T> r{model, {}, compute_threshold(model, cfg), {}};
  for (const auto& p : prune_targets(model, cfg)) {
    auto& w = r.model.param(p.name);
    const double tau = r.threshold.for_tensor(p.name);
    Tensor<std::uint8_t> mask(w.shape(), 1);
    if (auto it = model.masks.find(p.name); it != model.masks.end()) mask = it->second;
    bool any_pruned = false;
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (static_cast<double>(std::abs(w[i])) < tau) mask[i] = 0;
      if (mask[i] == 0) {
        w[i] = T(0);
        any_pruned = true;
      }
    }
    if (any_pruned) r.masks.emplace(p.name, std::move(mask));
  }
  r.model.masks = r.masks;
  r.report = sparsity_report(r.model, cfg);
  return r;
}

template <class T>
void apply_masks(BasicModel<T>& m, const std::map<std::string, Tensor<std::uint8_t>>& masks) {
  for (const auto& [name, mask] : masks) {
    auto& w = m.param(name);
    for (std::size_t i = 0; i < w.size(); ++i)
      if (!mask[i]) w[i] = T(0);
  }
}

/// Fine-tunes the surviving weights: gradients at masked positions are zeroed
/// before every optimizer step and masked weights are re-zeroed after it.
template <class T>
TrainHistory masked_finetune(BasicModel<T>& model, const std::map<std::string, Tensor<std::uint8_t>>& masks,
                             const ImageSet& train_set, const ImageSet& val_set, const TrainConfig& cfg) {
  for (const auto& [name, mask] : masks) {
    auto it = model.params.find(name);
    if (it == model.params.end()) throw ShapeError("masked_finetune: mask '" + name + "' has no parameter");
    if (it->second.shape() != mask.shape())
      throw ShapeError("masked_finetune: mask '" + name + "' " + shape_str(mask.shape()) + " vs parameter " +
                       shape_str(it->second.shape()));
  }
  apply_masks(model, masks);
  TrainHooks<T> hooks;
  hooks.on_gradients = [&](GradientMap<T>& grads) {
    for (const auto& [name, mask] : masks) {
      auto& g = grads.at(name);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (!mask[i]) g[i] = T(0);
    }
  };
  hooks.after_step = [&](BasicModel<T>& m) { apply_masks(m, masks); };
  model.masks = masks;
  return train(model, train_set, val_set, cfg, hooks);
}

}  // namespace rcmp
