#pragma once

#include <string>
#include <vector>

#include "avatar/types.hpp"

namespace avatar {

// Row-major interleaved image with values nominally in [0,1].
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, int c, double fill = 0.0)
      : width(w), height(h), channels(c), data(static_cast<size_t>(w) * h * c, fill) {}

  double& at(int x, int y, int c) {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  double at(int x, int y, int c) const {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  Vec3 rgb(int x, int y) const { return Vec3(at(x, y, 0), at(x, y, 1), at(x, y, 2)); }
  void set_rgb(int x, int y, const Vec3& v) {
    at(x, y, 0) = v[0];
    at(x, y, 1) = v[1];
    at(x, y, 2) = v[2];
  }
  size_t size() const { return data.size(); }
  bool same_shape(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
};

// 8-bit PNG io; 1 (gray) or 3 (rgb) channels, no alpha.
void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

uint8_t quantize8(double v);

// Raw float32 frame dump in the container format, one named plane per image.
void write_raw_dump(const std::string& path,
                    const std::vector<std::pair<std::string, const Image*>>& planes);

}  // namespace avatar
