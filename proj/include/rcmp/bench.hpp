#pragma once

// Deployment-style measurements: model load time, per-image latency
// statistics, throughput and best-effort peak memory. The clock is injectable
// so every statistic can be reproduced exactly in tests.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <sys/resource.h>

#include <nlohmann/json.hpp>

#include "rcmp/tensor.hpp"

namespace rcmp {

/// Milliseconds from an arbitrary origin; must be non-decreasing.
using Clock = std::function<double()>;

inline double steady_ms() {
  using namespace std::chrono;
  return duration<double, std::milli>(steady_clock::now().time_since_epoch()).count();
}

inline Clock system_clock_ms() { return steady_ms; }

/// Percentile by linear interpolation between order statistics.
inline double percentile(std::vector<double> v, double p) {
  if (v.empty()) throw std::invalid_argument("percentile of an empty sample");
  std::sort(v.begin(), v.end());
  const double pos = p / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const double frac = pos - static_cast<double>(lo);
  return lo + 1 < v.size() ? v[lo] + frac * (v[lo + 1] - v[lo]) : v[lo];
}

inline double median(std::vector<double> v) { return percentile(std::move(v), 50.0); }

struct LatencyStats {
  std::size_t count = 0;
  double total_ms = 0.0, avg_ms = 0.0, p50_ms = 0.0, p95_ms = 0.0, throughput = 0.0;
};

inline LatencyStats latency_stats(const std::vector<double>& samples) {
  if (samples.empty()) throw std::invalid_argument("latency_stats: no samples");
  LatencyStats s;
  s.count = samples.size();
  s.total_ms = std::accumulate(samples.begin(), samples.end(), 0.0);
  s.avg_ms = s.total_ms / static_cast<double>(s.count);
  s.p50_ms = percentile(samples, 50.0);
  s.p95_ms = percentile(samples, 95.0);
  s.throughput = s.avg_ms > 0.0 ? 1000.0 / s.avg_ms : 0.0;
  return s;
}

inline const std::vector<std::string>& bench_variants() {
  static const std::vector<std::string> v{"dense", "pruned_finetuned", "quantized"};
  return v;
}

struct BenchReport {
  std::string model_path;
  std::string variant;
  std::string model_hash;
  double load_time_ms = 0.0;
  std::size_t warmup_count = 0;
  std::size_t measured_count = 0;
  double avg_ms_per_image = 0.0;  // inference only
  double p50_ms = 0.0;
  double p95_ms = 0.0;
  double throughput_images_per_s = 0.0;
  double avg_ms_per_image_with_preprocessing = 0.0;  // decode + resize + normalize + inference
  std::optional<std::int64_t> peak_memory_bytes;
  std::optional<double> pipeline_time_ms;
  std::string environment;
};

inline void to_json(nlohmann::json& j, const BenchReport& r) {
  j = nlohmann::json{{"model_path", r.model_path},
                     {"variant", r.variant},
                     {"model_hash", r.model_hash},
                     {"load_time_ms", r.load_time_ms},
                     {"warmup_count", r.warmup_count},
                     {"measured_count", r.measured_count},
                     {"avg_ms_per_image", r.avg_ms_per_image},
                     {"p50_ms", r.p50_ms},
                     {"p95_ms", r.p95_ms},
                     {"throughput_images_per_s", r.throughput_images_per_s},
                     {"avg_ms_per_image_with_preprocessing", r.avg_ms_per_image_with_preprocessing},
                     {"peak_memory_bytes", r.peak_memory_bytes ? nlohmann::json(*r.peak_memory_bytes) : nlohmann::json(nullptr)},
                     {"pipeline_time_ms", r.pipeline_time_ms ? nlohmann::json(*r.pipeline_time_ms) : nlohmann::json(nullptr)},
                     {"environment", r.environment}};
}

inline void from_json(const nlohmann::json& j, BenchReport& r) {
  j.at("model_path").get_to(r.model_path);
  j.at("variant").get_to(r.variant);
  r.model_hash = j.value("model_hash", "");
  j.at("load_time_ms").get_to(r.load_time_ms);
  j.at("warmup_count").get_to(r.warmup_count);
  j.at("measured_count").get_to(r.measured_count);
  j.at("avg_ms_per_image").get_to(r.avg_ms_per_image);
  j.at("p50_ms").get_to(r.p50_ms);
  j.at("p95_ms").get_to(r.p95_ms);
  j.at("throughput_images_per_s").get_to(r.throughput_images_per_s);
  j.at("avg_ms_per_image_with_preprocessing").get_to(r.avg_ms_per_image_with_preprocessing);
  if (j.contains("peak_memory_bytes") && !j["peak_memory_bytes"].is_null())
    r.peak_memory_bytes = j["peak_memory_bytes"].get<std::int64_t>();
  if (j.contains("pipeline_time_ms") && !j["pipeline_time_ms"].is_null())
    r.pipeline_time_ms = j["pipeline_time_ms"].get<double>();
  r.environment = j.value("environment", "");
}

/// Peak resident set size of this process, when the platform reports it.
inline std::optional<std::int64_t> peak_memory_bytes() {
  rusage u{};
  if (getrusage(RUSAGE_SELF, &u) != 0) return std::nullopt;
  return static_cast<std::int64_t>(u.ru_maxrss) * 1024;
}

inline std::string environment_note() {
  std::ostringstream os;
  os << "hardware_concurrency=" << std::thread::hardware_concurrency() << "; single-threaded measurement";
#if defined(__clang__)
  os << "; compiler=clang " << __clang_major__ << '.' << __clang_minor__;
#elif defined(__GNUC__)
  os << "; compiler=gcc " << __GNUC__ << '.' << __GNUC_MINOR__;
#endif
#if defined(NDEBUG)
  os << "; optimized build";
#else
  os << "; debug build";
#endif
  return os.str();
}

/// Median wall time of `repeats` runs of `load` (file open to ready-to-infer).
inline double bench_load(const std::function<void()>& load, int repeats, const Clock& clock = system_clock_ms()) {
  if (repeats < 1) throw std::invalid_argument("bench_load: repeats must be at least 1");
  std::vector<double> t;
  for (int i = 0; i < repeats; ++i) {
    const double t0 = clock();
    load();
    t.push_back(clock() - t0);
  }
  return median(std::move(t));
}

struct ClassifyTimings {
  std::vector<double> inference_ms;
  std::vector<double> end_to_end_ms;
};

/// Runs `warmup` untimed inferences, then `repeats` individually timed ones,
/// cycling through `count` images with batch size 1. `prepare(i)` produces
/// the input tensor for image i (this is the preprocessing share of the
/// end-to-end time); `infer` runs the model and its result is discarded.
inline ClassifyTimings time_classify(std::size_t count, const std::function<Tensor<float>(std::size_t)>& prepare,
                                     const std::function<void(const Tensor<float>&)>& infer, std::size_t warmup,
                                     std::size_t repeats, const Clock& clock = system_clock_ms()) {
  if (count == 0) throw std::invalid_argument("bench_classify: no images");
  if (repeats == 0) throw std::invalid_argument("bench_classify: repeats must be at least 1");
  for (std::size_t i = 0; i < warmup; ++i) infer(prepare(i % count));
  ClassifyTimings t;
  for (std::size_t i = 0; i < repeats; ++i) {
    const double t0 = clock();
    const auto x = prepare(i % count);
    const double t1 = clock();
    infer(x);
    const double t2 = clock();
    t.inference_ms.push_back(t2 - t1);
    t.end_to_end_ms.push_back(t2 - t0);
  }
  return t;
}

inline BenchReport bench_classify(std::size_t count, const std::function<Tensor<float>(std::size_t)>& prepare,
                                  const std::function<void(const Tensor<float>&)>& infer, std::size_t warmup,
                                  std::size_t repeats, const Clock& clock = system_clock_ms()) {
  const auto t = time_classify(count, prepare, infer, warmup, repeats, clock);
  const auto s = latency_stats(t.inference_ms);
  BenchReport r;
  r.warmup_count = warmup;
  r.measured_count = s.count;
  r.avg_ms_per_image = s.avg_ms;
  r.p50_ms = s.p50_ms;
  r.p95_ms = s.p95_ms;
  r.throughput_images_per_s = s.throughput;
  r.avg_ms_per_image_with_preprocessing = latency_stats(t.end_to_end_ms).avg_ms;
  r.peak_memory_bytes = peak_memory_bytes();
  r.environment = environment_note();
  return r;
}

struct EmittedReport {
  nlohmann::json json;
  std::string table;
};

/// Rows ordered dense, pruned_finetuned, quantized. Table cells are the JSON
/// number text, so both renderings carry the same digits.
inline EmittedReport emit_report(std::vector<BenchReport> reports) {
  if (reports.empty()) throw std::invalid_argument("emit_report: no reports");
  const auto& order = bench_variants();
  auto rank = [&](const BenchReport& r) {
    auto it = std::find(order.begin(), order.end(), r.variant);
    if (it == order.end()) throw std::invalid_argument("emit_report: unknown variant '" + r.variant + "'");
    return it - order.begin();
  };
  std::stable_sort(reports.begin(), reports.end(), [&](const auto& a, const auto& b) { return rank(a) < rank(b); });
  EmittedReport out;
  out.json = nlohmann::json{{"reports", reports}};

  static const std::vector<std::string> cols{"variant",  "load_time_ms", "avg_ms_per_image",        "p50_ms",
                                             "p95_ms",   "throughput_images_per_s",
                                             "avg_ms_per_image_with_preprocessing", "peak_memory_bytes",
                                             "pipeline_time_ms"};
  std::vector<std::vector<std::string>> cells{cols};
  for (const auto& r : out.json["reports"]) {
    std::vector<std::string> row;
    for (const auto& c : cols) row.push_back(r[c].is_string() ? r[c].get<std::string>() : r[c].dump());
    cells.push_back(std::move(row));
  }
  std::vector<std::size_t> width(cols.size(), 0);
  for (const auto& row : cells)
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  std::ostringstream os;
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) os << "  ";
      os << row[i];
      if (i + 1 < row.size()) os << std::string(width[i] - row[i].size(), ' ');
    }
    os << '\n';
  }
  out.table = os.str();
  return out;
}

}  // namespace rcmp
