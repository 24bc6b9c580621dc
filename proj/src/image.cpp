#include "avatar/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>

#include "avatar/container.hpp"

namespace avatar {

uint8_t quantize8(double v) {
  return static_cast<uint8_t>(std::lround(clamp01(v) * 255.0));
}

void write_png(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3)
    throw std::invalid_argument("write_png: only 1 or 3 channels supported");
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw std::invalid_argument("write_png: cannot open '" + path + "'");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("write_png: libpng failure for '" + path + "'");
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height),
               8, img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<uint8_t> row(static_cast<size_t>(img.width) * img.channels);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c)
        row[static_cast<size_t>(x) * img.channels + c] = quantize8(img.at(x, y, c));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

Image read_png(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw std::invalid_argument("read_png: cannot open '" + path + "'");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw std::invalid_argument("read_png: not a readable PNG: '" + path + "'");
  }
  png_init_io(png, fp);
  png_read_info(png, info);

  png_uint_32 w, h;
  int bit_depth, color_type;
  png_get_IHDR(png, info, &w, &h, &bit_depth, &color_type, nullptr, nullptr, nullptr);
  if (bit_depth == 16) png_set_strip_16(png);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int channels = png_get_channels(png, info);
  if (channels != 1 && channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw std::invalid_argument("read_png: unsupported channel count in '" + path + "'");
  }

  Image img(static_cast<int>(w), static_cast<int>(h), channels);
  std::vector<uint8_t> row(static_cast<size_t>(w) * channels);
  for (int y = 0; y < img.height; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < channels; ++c)
        img.at(x, y, c) = row[static_cast<size_t>(x) * channels + c] / 255.0;
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

void write_raw_dump(const std::string& path,
                    const std::vector<std::pair<std::string, const Image*>>& planes) {
  Container c;
  c.meta["type"] = "raw_frame_dump";
  for (const auto& [name, img] : planes) {
    c.put_raw(name, {img->height, img->width, img->channels}, img->data.data());
  }
  write_container(path, c);
}

}  // namespace avatar
