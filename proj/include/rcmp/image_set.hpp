#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <vector>

#include "rcmp/tensor.hpp"

namespace rcmp {

/// In-memory labelled images, each stored C x H x W. May be empty.
struct ImageSet {
  Shape image_shape{3, 1, 1};
  std::vector<float> pixels;
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }
  std::size_t image_numel() const { return shape_numel(image_shape); }

  /// Stacks the selected images into an N x C x H x W batch.
  template <class T = float>
  Tensor<T> batch(std::span<const std::size_t> indices) const {
    if (indices.empty()) throw std::invalid_argument("ImageSet::batch: empty selection");
    const auto n = image_numel();
    Shape s{static_cast<std::int64_t>(indices.size())};
    s.insert(s.end(), image_shape.begin(), image_shape.end());
    std::vector<T> data(indices.size() * n);
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] >= size()) throw std::out_of_range("ImageSet::batch: index out of range");
      const float* src = pixels.data() + indices[i] * n;
      for (std::size_t k = 0; k < n; ++k) data[i * n + k] = static_cast<T>(src[k]);
    }
    return Tensor<T>(std::move(s), std::move(data));
  }

  std::vector<int> batch_labels(std::span<const std::size_t> indices) const {
    std::vector<int> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(labels.at(i));
    return out;
  }

  void append(const Tensor<float>& image, int label) {
    if (empty() && pixels.empty()) image_shape = image.shape();
    if (image.shape() != image_shape)
      throw ShapeError("ImageSet::append: image " + shape_str(image.shape()) + " vs " + shape_str(image_shape));
    pixels.insert(pixels.end(), image.values().begin(), image.values().end());
    labels.push_back(label);
  }

  ImageSet subset(std::span<const std::size_t> indices) const {
    ImageSet out;
    out.image_shape = image_shape;
    const auto n = image_numel();
    for (auto i : indices) {
      out.pixels.insert(out.pixels.end(), pixels.begin() + static_cast<std::ptrdiff_t>(i * n),
                        pixels.begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
      out.labels.push_back(labels.at(i));
    }
    return out;
  }
};

}  // namespace rcmp
