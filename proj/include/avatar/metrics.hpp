#pragma once

#include "avatar/image.hpp"
#include "avatar/types.hpp"

namespace avatar {

double metric_l1(const Image& a, const Image& b);
// 10 log10(1 / mse) on [0,1] images, capped at 99 dB.
double metric_psnr(const Image& a, const Image& b);
// 11x11 Gaussian window (sigma 1.5), K = (0.01, 0.03), L = 1; channel-mean
// over the valid (full-window) region.
double metric_ssim(const Image& a, const Image& b);

// Metrics restricted to pixels where mask > 0.5 (L1 / PSNR only).
double metric_l1_masked(const Image& a, const Image& b, const Image& mask);
double metric_psnr_masked(const Image& a, const Image& b, const Image& mask);

// Intersection over union of thresholded single-channel images.
double metric_iou(const Image& a, const Image& b, double threshold = 0.5);

}  // namespace avatar
