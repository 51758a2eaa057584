#include "stylexlab/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

namespace stylexlab::io {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

Rgb8 read_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw std::runtime_error("cannot open image: " + path.string());
  png_byte header[8];
  if (std::fread(header, 1, 8, file.get()) != 8 || png_sig_cmp(header, 0, 8))
    throw std::runtime_error("not a PNG file: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng init failed");
  }
  Rgb8 out;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("corrupt PNG: " + path.string());
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.pixels.resize(static_cast<std::size_t>(out.width) * out.height * 3);
  rows.resize(out.height);
  for (int y = 0; y < out.height; ++y)
    rows[y] = out.pixels.data() + static_cast<std::size_t>(y) * out.width * 3;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

void write_png(const std::filesystem::path& path, const Rgb8& image) {
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw std::runtime_error("cannot write image: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("PNG encode failed: " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, image.width, image.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < image.height; ++y)
    png_write_row(png, const_cast<png_bytep>(image.pixels.data() +
                                             static_cast<std::size_t>(y) * image.width * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Rgb8 to_rgb8(const nn::Tensor<float>& image) {
  if (image.c != 3) throw std::invalid_argument("to_rgb8 expects 3 channels");
  Rgb8 out{image.w, image.h, {}};
  out.pixels.resize(static_cast<std::size_t>(image.w) * image.h * 3);
  for (int y = 0; y < image.h; ++y)
    for (int x = 0; x < image.w; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp((image.at(c, y, x) + 1.0f) * 127.5f, 0.0f, 255.0f);
        out.pixels[(static_cast<std::size_t>(y) * image.w + x) * 3 + c] =
            static_cast<std::uint8_t>(std::lround(v));
      }
  return out;
}

nn::Tensor<float> from_rgb8(const Rgb8& image) {
  nn::Tensor<float> out(3, image.height, image.width);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c)
        out.at(c, y, x) =
            image.pixels[(static_cast<std::size_t>(y) * image.width + x) * 3 + c] / 127.5f - 1.0f;
  return out;
}

Rgb8 center_crop_resize(const Rgb8& image, int size) {
  if (size <= 0) throw std::invalid_argument("resize target must be positive");
  const int side = std::min(image.width, image.height);
  if (side <= 0) throw std::invalid_argument("empty image");
  const int x0 = (image.width - side) / 2;
  const int y0 = (image.height - side) / 2;
  const double scale = static_cast<double>(side) / size;
  Rgb8 out{size, size, std::vector<std::uint8_t>(static_cast<std::size_t>(size) * size * 3)};
  // Area interpolation: each output pixel averages the source region it covers,
  // weighting partially covered source pixels by overlap.
  for (int oy = 0; oy < size; ++oy) {
    const double sy0 = oy * scale, sy1 = (oy + 1) * scale;
    for (int ox = 0; ox < size; ++ox) {
      const double sx0 = ox * scale, sx1 = (ox + 1) * scale;
      double acc[3] = {0, 0, 0};
      double wsum = 0;
      for (int sy = static_cast<int>(sy0); sy < std::min<double>(side, std::ceil(sy1)); ++sy) {
        const double wy = std::min<double>(sy + 1, sy1) - std::max<double>(sy, sy0);
        if (wy <= 0) continue;
        for (int sx = static_cast<int>(sx0); sx < std::min<double>(side, std::ceil(sx1)); ++sx) {
          const double wx = std::min<double>(sx + 1, sx1) - std::max<double>(sx, sx0);
          if (wx <= 0) continue;
          const std::uint8_t* p =
              image.pixels.data() +
              (static_cast<std::size_t>(y0 + sy) * image.width + (x0 + sx)) * 3;
          for (int c = 0; c < 3; ++c) acc[c] += wx * wy * p[c];
          wsum += wx * wy;
        }
      }
      for (int c = 0; c < 3; ++c)
        out.pixels[(static_cast<std::size_t>(oy) * size + ox) * 3 + c] =
            static_cast<std::uint8_t>(std::lround(std::clamp(acc[c] / wsum, 0.0, 255.0)));
    }
  }
  return out;
}

}  // namespace stylexlab::io
