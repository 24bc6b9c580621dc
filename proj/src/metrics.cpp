#include "avatar/metrics.hpp"

#include <cmath>

namespace avatar {

namespace {

void check_shapes(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("metrics: image shape mismatch");
}

double mse(const Image& a, const Image& b) {
  double acc = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.data.size());
}

}  // namespace

double metric_l1(const Image& a, const Image& b) {
  check_shapes(a, b);
  double acc = 0;
  for (size_t i = 0; i < a.data.size(); ++i) acc += std::abs(a.data[i] - b.data[i]);
  return acc / static_cast<double>(a.data.size());
}

double metric_psnr(const Image& a, const Image& b) {
  check_shapes(a, b);
  const double m = mse(a, b);
  if (m <= 0) return 99.0;
  return std::min(99.0, 10.0 * std::log10(1.0 / m));
}

double metric_ssim(const Image& a, const Image& b) {
  check_shapes(a, b);
  constexpr int kWin = 11;
  constexpr double kSigma = 1.5;
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;
  if (a.width < kWin || a.height < kWin)
    throw std::invalid_argument("ssim: image smaller than the 11x11 window");

  double kernel[kWin];
  double ksum = 0;
  for (int i = 0; i < kWin; ++i) {
    const double x = i - (kWin - 1) / 2.0;
    kernel[i] = std::exp(-x * x / (2.0 * kSigma * kSigma));
    ksum += kernel[i];
  }
  for (int i = 0; i < kWin; ++i) kernel[i] /= ksum;

  double total = 0;
  int count = 0;
  for (int c = 0; c < a.channels; ++c) {
    for (int y = 0; y + kWin <= a.height; ++y) {
      for (int x = 0; x + kWin <= a.width; ++x) {
        double ma = 0, mb = 0, vaa = 0, vbb = 0, vab = 0;
        for (int dy = 0; dy < kWin; ++dy)
          for (int dx = 0; dx < kWin; ++dx) {
            const double w = kernel[dy] * kernel[dx];
            const double pa = a.at(x + dx, y + dy, c);
            const double pb = b.at(x + dx, y + dy, c);
            ma += w * pa;
            mb += w * pb;
            vaa += w * pa * pa;
            vbb += w * pb * pb;
            vab += w * pa * pb;
          }
        vaa -= ma * ma;
        vbb -= mb * mb;
        vab -= ma * mb;
        const double num = (2 * ma * mb + c1) * (2 * vab + c2);
        const double den = (ma * ma + mb * mb + c1) * (vaa + vbb + c2);
        total += num / den;
        ++count;
      }
    }
  }
  return total / count;
}

double metric_l1_masked(const Image& a, const Image& b, const Image& mask) {
  check_shapes(a, b);
  double acc = 0;
  int count = 0;
  for (int y = 0; y < a.height; ++y)
    for (int x = 0; x < a.width; ++x) {
      if (mask.at(x, y, 0) <= 0.5) continue;
      for (int c = 0; c < a.channels; ++c) {
        acc += std::abs(a.at(x, y, c) - b.at(x, y, c));
        ++count;
      }
    }
  return count ? acc / count : 0.0;
}

double metric_psnr_masked(const Image& a, const Image& b, const Image& mask) {
  check_shapes(a, b);
  double acc = 0;
  int count = 0;
  for (int y = 0; y < a.height; ++y)
    for (int x = 0; x < a.width; ++x) {
      if (mask.at(x, y, 0) <= 0.5) continue;
      for (int c = 0; c < a.channels; ++c) {
        const double d = a.at(x, y, c) - b.at(x, y, c);
        acc += d * d;
        ++count;
      }
    }
  if (!count || acc <= 0) return 99.0;
  return std::min(99.0, 10.0 * std::log10(static_cast<double>(count) / acc));
}

double metric_iou(const Image& a, const Image& b, double threshold) {
  check_shapes(a, b);
  int inter = 0, uni = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const bool pa = a.data[i] > threshold;
    const bool pb = b.data[i] > threshold;
    inter += (pa && pb) ? 1 : 0;
    uni += (pa || pb) ? 1 : 0;
  }
  return uni ? static_cast<double>(inter) / uni : 1.0;
}

}  // namespace avatar
