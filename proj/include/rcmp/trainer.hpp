#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rcmp/image_set.hpp"
#include "rcmp/model.hpp"
#include "rcmp/ops.hpp"
#include "rcmp/rng.hpp"
#include "rcmp/tape.hpp"

namespace rcmp {

struct TrainConfig {
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch_size = 32;
  int epochs = 15;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> log_path;  // JSON lines, one record per epoch

  void validate() const {
    if (!(learning_rate > 0)) throw ConfigError("train config: learning_rate must be > 0");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
      throw ConfigError("train config: beta1 and beta2 must lie in [0, 1)");
    if (!(eps > 0)) throw ConfigError("train config: eps must be > 0");
    if (batch_size < 1) throw ConfigError("train config: batch_size must be positive");
    if (epochs < 0) throw ConfigError("train config: epochs must be non-negative");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate}, {"beta1", c.beta1}, {"beta2", c.beta2},
                     {"eps", c.eps},     {"batch_size", c.batch_size},       {"epochs", c.epochs},
                     {"seed", c.seed}};
}

/// Mean cross-entropy of N x C logits against integer labels.
template <class T>
T cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  return ops::cross_entropy(logits, labels);
}

template <class T>
using GradientMap = std::map<std::string, Tensor<T>>;

template <class T>
struct AdamState {
  GradientMap<T> m, v;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update of every parameter that has a gradient.
template <class T>
void adam_step(std::map<std::string, Tensor<T>>& params, const GradientMap<T>& grads, AdamState<T>& state,
               const TrainConfig& cfg) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw ShapeError("adam_step: gradient for unknown parameter '" + name + "'");
    require_same_shape(it->second, g, "adam_step(" + name + ")");
  }
  state.step += 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads) {
    auto& w = params.at(name);
    auto& m = state.m.try_emplace(name, g.shape()).first->second;
    auto& v = state.v.try_emplace(name, g.shape()).first->second;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = g[i];
      const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / c1, vhat = vi / c2;
      w[i] = static_cast<T>(w[i] - cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0, train_accuracy = 0;
  std::optional<double> val_loss, val_accuracy;

  bool operator==(const EpochRecord&) const = default;
};

inline void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = nlohmann::json{{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"train_accuracy", r.train_accuracy}};
  j["val_loss"] = r.val_loss ? nlohmann::json(*r.val_loss) : nlohmann::json();
  j["val_accuracy"] = r.val_accuracy ? nlohmann::json(*r.val_accuracy) : nlohmann::json();
}

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  bool operator==(const TrainHistory&) const = default;
};

inline void to_json(nlohmann::json& j, const TrainHistory& h) { j = h.epochs; }

template <class T>
struct TrainHooks {
  std::function<void(GradientMap<T>&)> on_gradients;  // before each optimizer step
  std::function<void(BasicModel<T>&)> after_step;
};

/// Inference-mode logits for every image, computed in batches.
template <class T>
Tensor<float> predict_logits(const BasicModel<T>& model, const ImageSet& data, int batch_size = 64) {
  if (data.empty()) throw std::invalid_argument("predict_logits: empty dataset");
  const auto C = model.config.num_classes;
  std::vector<float> out;
  out.reserve(data.size() * static_cast<std::size_t>(C));
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + static_cast<std::size_t>(batch_size)); ++i)
      idx.push_back(i);
    const auto logits = forward(model, data.batch<T>(idx));
    for (auto v : logits.values()) out.push_back(static_cast<float>(v));
  }
  return Tensor<float>(Shape{static_cast<std::int64_t>(data.size()), C}, std::move(out));
}

struct LossAccuracy {
  double loss = 0, accuracy = 0;
};

template <class T>
LossAccuracy evaluate_loss_accuracy(const BasicModel<T>& model, const ImageSet& data, int batch_size = 64) {
  const auto logits = predict_logits(model, data, batch_size);
  const auto preds = ops::argmax_rows(logits);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == data.labels[i];
  return {static_cast<double>(ops::cross_entropy(logits.template cast<double>(), data.labels)),
          static_cast<double>(correct) / static_cast<double>(data.size())};
}

/// Mini-batch Adam training with cross-entropy loss. Each epoch visits the
/// training set in a seeded permutation; the last partial batch is kept.
template <class T>
TrainHistory train(BasicModel<T>& model, const ImageSet& train_set, const ImageSet& val_set,
                   const TrainConfig& cfg, const TrainHooks<T>& hooks = {}) {
  cfg.validate();
  TrainHistory history;
  if (cfg.epochs == 0) return history;
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");

  std::ofstream log;
  if (cfg.log_path) {
    log.open(*cfg.log_path, std::ios::trunc);
    if (!log) throw std::runtime_error("train: cannot open log '" + cfg.log_path->string() + "'");
  }

  AdamState<T> adam;
  std::vector<std::size_t> order(train_set.size());
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, "epoch-" + std::to_string(epoch)));
    rng.shuffle(order.begin(), order.end());

    double loss_sum = 0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const auto end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const auto labels = train_set.batch_labels(idx);

      GradTape<T> tape;
      std::map<std::string, BatchStats<T>> stats;
      const auto logits = forward(tape, model, train_set.batch<T>(idx), ops::BnMode::train, &stats);
      const auto loss = tape.cross_entropy(logits, labels);
      loss_sum += static_cast<double>(tape.value(loss)[0]) * static_cast<double>(idx.size());
      const auto preds = ops::argmax_rows(tape.value(logits));
      for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == labels[i];

      auto grads = tape.backward(loss);
      if (hooks.on_gradients) hooks.on_gradients(grads);
      adam_step(model.params, grads, adam, cfg);
      update_running_stats(model, stats);
      if (hooks.after_step) hooks.after_step(model);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
    if (!val_set.empty()) {
      const auto v = evaluate_loss_accuracy(model, val_set);
      rec.val_loss = v.loss;
      rec.val_accuracy = v.accuracy;
    }
    history.epochs.push_back(rec);
    if (log) log << nlohmann::json(rec).dump() << '\n' << std::flush;
  }
  return history;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradCheckOptions {
  std::size_t min_samples = 200;
  double step = 1e-5;
  // Errors are |analytic - numeric| / (abs_floor + max(|analytic|, |numeric|)),
  // so a 1e-4 bound also admits an absolute slack of about 1e-4 * abs_floor
  // for gradients that are zero up to roundoff.
  double abs_floor = 1e-4;
  // Relative gap between one-sided differences above which the loss is
  // treated as non-differentiable at the sample (e.g. a ReLU sitting exactly
  // at zero). There the analytic value must lie between the one-sided slopes.
  double kink_threshold = 1e-2;
  std::uint64_t seed = 0;
  TapeOptions<double> tape_options;
};

struct GradCheckSample {
  std::string param;
  std::size_t index = 0;
  double analytic = 0, numeric = 0, error = 0;
  bool kink = false;
};

struct GradCheckResult {
  double max_error = 0;
  std::vector<GradCheckSample> samples;
  std::set<std::string> layer_kinds;
};

/// Compares taped gradients of the train-mode cross-entropy loss with
/// central differences on a seeded subsample spanning every parameter tensor.
inline GradCheckResult gradient_check(const BasicModel<double>& model, const Tensor<double>& batch,
                                      std::span<const int> labels, const GradCheckOptions& opt = {}) {
  auto loss_of = [&](const BasicModel<double>& m, const TapeOptions<double>& topt,
                     GradientMap<double>* grads) {
    GradTape<double> tape(topt);
    const auto logits = forward(tape, m, batch, ops::BnMode::train);
    const auto loss = tape.cross_entropy(logits, std::vector<int>(labels.begin(), labels.end()));
    if (grads) *grads = tape.backward(loss);
    return tape.value(loss)[0];
  };

  GradientMap<double> analytic;
  const double base = loss_of(model, opt.tape_options, &analytic);

  const auto params = model.arch.parameters();
  const std::size_t per_tensor = (opt.min_samples + params.size() - 1) / params.size();
  Rng rng(derive_seed(opt.seed, "gradient-check"));
  BasicModel<double> probe = model;
  GradCheckResult result;
  for (const auto& p : params) {
    auto& w = probe.params.at(p.name);
    result.layer_kinds.insert(std::string(layer_kind_name(p.kind)));
    for (std::size_t s = 0; s < per_tensor; ++s) {
      const auto i = static_cast<std::size_t>(rng.below(w.size()));
      const double orig = w[i];
      w[i] = orig + opt.step;
      const double up = loss_of(probe, {}, nullptr);
      w[i] = orig - opt.step;
      const double down = loss_of(probe, {}, nullptr);
      w[i] = orig;

      GradCheckSample smp{p.name, i, analytic.at(p.name)[i], (up - down) / (2 * opt.step), 0, false};
      const double fwd = (up - base) / opt.step, bwd = (base - down) / opt.step;
      const double scale = opt.abs_floor + std::max(std::abs(smp.analytic), std::abs(smp.numeric));
      smp.error = std::abs(smp.analytic - smp.numeric) / scale;
      const double gap = std::abs(fwd - bwd) / (opt.abs_floor + std::max(std::abs(fwd), std::abs(bwd)));
      if (gap > opt.kink_threshold) {
        smp.kink = true;
        const double lo = std::min(fwd, bwd), hi = std::max(fwd, bwd);
        const double dist = smp.analytic < lo ? lo - smp.analytic : (smp.analytic > hi ? smp.analytic - hi : 0.0);
        smp.error = std::min(smp.error, dist / scale);
      }
      result.max_error = std::max(result.max_error, smp.error);
      result.samples.push_back(std::move(smp));
    }
  }
  return result;
}

}  // namespace rcmp
