#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "stylexlab/nn.hpp"

namespace stylexlab::io {

struct Rgb8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // interleaved RGB, row-major
};

Rgb8 read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Rgb8& image);

// [-1, 1] CHW tensor <-> 8-bit interleaved RGB.
Rgb8 to_rgb8(const nn::Tensor<float>& image);
nn::Tensor<float> from_rgb8(const Rgb8& image);

// Center-crops to a square and resamples to `size` x `size` with area averaging.
Rgb8 center_crop_resize(const Rgb8& image, int size);

}  // namespace stylexlab::io
