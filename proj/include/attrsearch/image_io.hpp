#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "attrsearch/numerics/tensor.hpp"

namespace attrsearch {

/// 8-bit interleaved raster (HxWxchannels), channels 1 (gray) or 3 (RGB).
struct Image8 {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 3;
  std::vector<std::uint8_t> bytes;

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) {
    return bytes[(y * width + x) * channels + c];
  }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return bytes[(y * width + x) * channels + c];
  }

  friend bool operator==(const Image8&, const Image8&) = default;
};

inline std::uint8_t quantize_unit(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline Tensor<float> to_tensor(const Image8& img) {
  Tensor<float> t({img.height, img.width, img.channels});
  for (std::size_t i = 0; i < img.bytes.size(); ++i) t[i] = static_cast<float>(img.bytes[i]) / 255.0f;
  return t;
}

/// Bilinear resample (align-corners) of an image to a new size.
inline Image8 resize_bilinear(const Image8& src, std::size_t height, std::size_t width) {
  Image8 out{height, width, src.channels, std::vector<std::uint8_t>(height * width * src.channels)};
  auto coord = [](std::size_t i, std::size_t out_n, std::size_t in_n) {
    return out_n > 1 ? static_cast<double>(i) * static_cast<double>(in_n - 1) / static_cast<double>(out_n - 1)
                     : 0.5 * static_cast<double>(in_n - 1);
  };
  for (std::size_t y = 0; y < height; ++y) {
    const double sy = coord(y, height, src.height);
    const std::size_t y0 = static_cast<std::size_t>(std::floor(sy));
    const std::size_t y1 = std::min(y0 + 1, src.height - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double sx = coord(x, width, src.width);
      const std::size_t x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t x1 = std::min(x0 + 1, src.width - 1);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < src.channels; ++c) {
        const double top = src.at(y0, x0, c) * (1 - fx) + src.at(y0, x1, c) * fx;
        const double bottom = src.at(y1, x0, c) * (1 - fx) + src.at(y1, x1, c) * fx;
        out.at(y, x, c) = static_cast<std::uint8_t>(std::lround(std::clamp(top * (1 - fy) + bottom * fy, 0.0, 255.0)));
      }
    }
  }
  return out;
}

namespace png_detail {

struct WriteBuffer {
  std::string* out;
};

inline void write_fn(png_structp png, png_bytep data, png_size_t len) {
  auto* buf = static_cast<WriteBuffer*>(png_get_io_ptr(png));
  buf->out->append(reinterpret_cast<const char*>(data), len);
}

inline void flush_fn(png_structp) {}

struct ReadBuffer {
  const std::string* in;
  std::size_t pos;
};

inline void read_fn(png_structp png, png_bytep data, png_size_t len) {
  auto* buf = static_cast<ReadBuffer*>(png_get_io_ptr(png));
  if (buf->pos + len > buf->in->size()) png_error(png, "truncated png");
  std::memcpy(data, buf->in->data() + buf->pos, len);
  buf->pos += len;
}

[[noreturn]] inline void error_fn(png_structp, png_const_charp msg) { throw LoadError(std::string("png: ") + msg); }
inline void warning_fn(png_structp, png_const_charp) {}

}  // namespace png_detail

inline std::string encode_png(const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw ArgumentError("encode_png: 1 or 3 channels");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_detail::error_fn,
                                            png_detail::warning_fn);
  png_infop info = png_create_info_struct(png);
  std::string out;
  png_detail::WriteBuffer buf{&out};
  try {
    png_set_write_fn(png, &buf, png_detail::write_fn, png_detail::flush_fn);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t y = 0; y < img.height; ++y) {
      png_write_row(png, const_cast<png_bytep>(img.bytes.data() + y * img.width * img.channels));
    }
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

inline Image8 decode_png(const std::string& bytes) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_detail::error_fn,
                                           png_detail::warning_fn);
  png_infop info = png_create_info_struct(png);
  png_detail::ReadBuffer buf{&bytes, 0};
  Image8 img;
  try {
    png_set_read_fn(png, &buf, png_detail::read_fn);
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_packing(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);
    img.width = png_get_image_width(png, info);
    img.height = png_get_image_height(png, info);
    img.channels = png_get_channels(png, info);
    img.bytes.resize(img.width * img.height * img.channels);
    for (std::size_t y = 0; y < img.height; ++y) {
      png_read_row(png, img.bytes.data() + y * img.width * img.channels, nullptr);
    }
    png_read_end(png, nullptr);
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw LoadError("cannot write " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw LoadError("cannot open " + path.string());
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace attrsearch
