#pragma once

#include <cstdint>

#include <nlohmann/json.hpp>

namespace rcmp {

/// Affine mapping between reals and unsigned integers:
/// real = scale * (q - zero_point) + offset. `offset` is zero except for
/// constant tensors, where it stores the constant.
struct QuantParams {
  float scale = 1.0f;
  int zero_point = 0;
  int bits = 8;
  int qmin = 0;
  int qmax = 255;
  float offset = 0.0f;

  int quant_range() const { return qmax - qmin + 1; }

  bool operator==(const QuantParams&) const = default;
};

inline void to_json(nlohmann::json& j, const QuantParams& p) {
  j = nlohmann::json{{"scale", p.scale}, {"zero_point", p.zero_point}, {"bits", p.bits},
                     {"qmin", p.qmin},   {"qmax", p.qmax}};
  if (p.offset != 0.0f) j["offset"] = p.offset;
}

inline void from_json(const nlohmann::json& j, QuantParams& p) {
  p.scale = j.at("scale").get<float>();
  p.zero_point = j.at("zero_point").get<int>();
  p.bits = j.value("bits", 8);
  p.qmin = j.value("qmin", 0);
  p.qmax = j.value("qmax", (1 << p.bits) - 1);
  p.offset = j.value("offset", 0.0f);
}

}  // namespace rcmp
