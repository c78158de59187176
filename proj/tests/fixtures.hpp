#pragma once

// Small models and scratch directories shared by the test files.

#include <filesystem>
#include <string>

#include "oracles.hpp"
#include "rcmp/model.hpp"
#include "rcmp/rng.hpp"

namespace fixture {

/// Four stages of one block each at 16 x 16; layer1.0 has a channel-change
/// projection, the later stages have stride projections.
inline rcmp::ModelConfig tiny_config(int classes = 6) {
  rcmp::ModelConfig c;
  c.preset = "tiny";
  c.input_size = 16;
  c.stem = {3, 1, 4, true};
  c.block_counts = {1, 1, 1, 1};
  c.stage_channels = {6, 8, 8, 12};
  c.num_classes = classes;
  return c;
}

/// Built model with randomized batch-norm affine terms and running
/// statistics, so eval-mode batch norm is not the identity.
template <class T = float>
rcmp::BasicModel<T> tiny_model(std::uint64_t seed, rcmp::ModelConfig c = tiny_config()) {
  auto m = rcmp::build<T>(c, seed);
  rcmp::Rng rng(seed ^ 0x5eedULL);
  for (const auto& bn : m.arch.batchnorms()) {
    for (auto& v : m.params.at(bn + ".weight").values()) v = static_cast<T>(rng.uniform(0.5, 1.5));
    for (auto& v : m.params.at(bn + ".bias").values()) v = static_cast<T>(rng.uniform(-0.2, 0.2));
    for (auto& v : m.buffers.at(bn + ".running_mean").values()) v = static_cast<T>(rng.uniform(-0.2, 0.2));
    for (auto& v : m.buffers.at(bn + ".running_var").values()) v = static_cast<T>(rng.uniform(0.5, 2.0));
  }
  return m;
}

template <class T = float>
rcmp::Tensor<T> batch(const rcmp::ModelConfig& c, std::int64_t n, std::uint64_t seed) {
  return oracle::random_tensor<T>(rcmp::Shape{n, c.in_channels, c.input_size, c.input_size}, seed, 0.0, 1.0);
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("rcmp_test_" + tag + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace fixture
