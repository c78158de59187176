#pragma once

// Glue shared by the command-line tool and the end-to-end tests: loading any
// model file, batched prediction for either model kind, and evaluation.

#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "rcmp/image_set.hpp"
#include "rcmp/metrics.hpp"
#include "rcmp/quantizer.hpp"
#include "rcmp/serialize.hpp"
#include "rcmp/trainer.hpp"

namespace rcmp {

using AnyModel = std::variant<Model, QuantizedModel>;

inline AnyModel model_from_any_archive(const Archive& a) {
  if (a.kind == "quantized") return quantized_from_archive(a);
  return model_from_archive(a);
}

inline AnyModel load_any(const std::filesystem::path& path) { return model_from_any_archive(read_archive(path)); }

inline std::string model_hash(const AnyModel& m) {
  return std::visit([](const auto& x) { return model_hash(x); }, m);
}

inline const ModelConfig& model_config(const AnyModel& m) {
  return std::visit([](const auto& x) -> const ModelConfig& { return x.config; }, m);
}

/// dense, pruned_finetuned (a dense model carrying masks) or quantized.
inline std::string variant_of(const AnyModel& m) {
  if (std::holds_alternative<QuantizedModel>(m)) return "quantized";
  return std::get<Model>(m).masks.empty() ? "dense" : "pruned_finetuned";
}

inline Tensor<float> predict_logits(const QuantizedModel& q, const ImageSet& data, QuantMode mode,
                                    int batch_size = 64) {
  if (data.empty()) throw std::invalid_argument("predict_logits: empty dataset");
  const QuantizedEngine engine(q);
  const auto C = q.config.num_classes;
  std::vector<float> out;
  out.reserve(data.size() * static_cast<std::size_t>(C));
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + static_cast<std::size_t>(batch_size)); ++i)
      idx.push_back(i);
    const auto logits = engine.forward(data.batch<float>(idx), mode);
    out.insert(out.end(), logits.values().begin(), logits.values().end());
  }
  return Tensor<float>(Shape{static_cast<std::int64_t>(data.size()), C}, std::move(out));
}

inline Tensor<float> predict_logits(const AnyModel& m, const ImageSet& data, QuantMode mode = QuantMode::integer) {
  if (const auto* q = std::get_if<QuantizedModel>(&m)) return predict_logits(*q, data, mode);
  return predict_logits(std::get<Model>(m), data);
}

inline EvalReport evaluate(const AnyModel& m, const ImageSet& test_set, std::vector<std::string> class_names = {},
                           QuantMode mode = QuantMode::integer) {
  if (test_set.empty()) throw MetricsError("evaluate: empty test set");
  return evaluate_logits(predict_logits(m, test_set, mode), test_set.labels, std::move(class_names));
}

/// Fraction of rows whose argmax agrees.
inline double top1_agreement(const Tensor<float>& a, const Tensor<float>& b) {
  const auto pa = ops::argmax_rows(a), pb = ops::argmax_rows(b);
  if (pa.size() != pb.size() || pa.empty()) throw ShapeError("top1_agreement: row counts differ");
  std::size_t same = 0;
  for (std::size_t i = 0; i < pa.size(); ++i) same += pa[i] == pb[i];
  return static_cast<double>(same) / static_cast<double>(pa.size());
}

}  // namespace rcmp
