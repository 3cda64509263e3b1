#pragma once

#include <cstdint>
#include <vector>

#include "dithead/common.hpp"
#include "dithead/tensor.hpp"

namespace dithead {

// Interleaved RGB, row-major, values in [-1, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;  // height * width * 3

  Image() = default;
  Image(int h, int w, float fill = 0.0f) : height(h), width(w), pixels(static_cast<size_t>(h) * w * 3, fill) {}

  float* px(int r, int c) { return pixels.data() + (static_cast<size_t>(r) * width + c) * 3; }
  const float* px(int r, int c) const { return pixels.data() + (static_cast<size_t>(r) * width + c) * 3; }
  int64_t num_pixels() const { return static_cast<int64_t>(height) * width; }
  bool same_size(const Image& o) const { return height == o.height && width == o.width; }
};

inline float luminance(const float* rgb) { return 0.299f * rgb[0] + 0.587f * rgb[1] + 0.114f * rgb[2]; }

template <typename T>
Tensor<T> image_to_tensor(const Image& img) {
  std::vector<T> data(img.pixels.size());
  for (size_t i = 0; i < data.size(); ++i) data[i] = static_cast<T>(img.pixels[i]);
  return Tensor<T>::from_data({img.height, img.width, 3}, std::move(data));
}

// stacks images into [B, H, W, 3]
template <typename T>
Tensor<T> images_to_batch(const std::vector<const Image*>& imgs) {
  if (imgs.empty()) throw ParameterError("images_to_batch: empty batch");
  int h = imgs[0]->height, w = imgs[0]->width;
  std::vector<T> data(static_cast<size_t>(imgs.size()) * h * w * 3);
  for (size_t b = 0; b < imgs.size(); ++b) {
    if (imgs[b]->height != h || imgs[b]->width != w) throw DimensionError("images_to_batch: size mismatch");
    for (size_t i = 0; i < imgs[b]->pixels.size(); ++i)
      data[b * imgs[b]->pixels.size() + i] = static_cast<T>(imgs[b]->pixels[i]);
  }
  return Tensor<T>::from_data({static_cast<int>(imgs.size()), h, w, 3}, std::move(data));
}

template <typename T>
Image tensor_to_image(const Tensor<T>& t, int batch_index = 0) {
  int h, w;
  int64_t offset = 0;
  if (t.ndim() == 4) {
    h = t.dim(1);
    w = t.dim(2);
    offset = static_cast<int64_t>(batch_index) * h * w * 3;
  } else if (t.ndim() == 3) {
    h = t.dim(0);
    w = t.dim(1);
  } else {
    throw DimensionError("tensor_to_image: expected [H,W,3] or [B,H,W,3]");
  }
  Image img(h, w);
  const T* p = t.data() + offset;
  for (size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<float>(p[i]);
  return img;
}

}  // namespace dithead
