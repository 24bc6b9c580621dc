#include "avatar/losses.hpp"

#include <cmath>
#include <iostream>

namespace avatar {

LossWeights LossWeights::body_preset() { return LossWeights{}; }

LossWeights LossWeights::head_preset() {
  LossWeights w;
  w.semantic = 0.015;
  w.skin_inside = 0.001;
  return w;
}

void LossWeights::validate() const {
  const double all[] = {pixel,  semantic, ext,    silhouette,        int_mask,
                        skin,   inside,   skin_inside, edge,         offset,
                        offset_region_ratio[0], offset_region_ratio[1], offset_region_ratio[2]};
  for (double v : all)
    if (v < 0 || !std::isfinite(v))
      throw std::invalid_argument("loss weights must be non-negative and finite");
  if (huber_delta <= 0) throw std::invalid_argument("huber delta must be positive");
}

void MaskSet::validate() const {
  if (!S.same_shape(S_b) || !S.same_shape(S_e))
    throw std::invalid_argument("mask set: shape mismatch");
  for (size_t i = 0; i < S.data.size(); ++i) {
    if (S_b.data[i] > 0.5 && S_e.data[i] > 0.5)
      throw std::invalid_argument("mask set: S_b and S_e overlap");
    if ((S_b.data[i] > 0.5 || S_e.data[i] > 0.5) && S.data[i] < 0.5)
      throw std::invalid_argument("mask set: S does not cover S_b union S_e");
  }
}

double huber(double x, double delta) {
  const double a = std::abs(x);
  return a <= delta ? 0.5 * x * x : delta * (a - 0.5 * delta);
}

double huber_grad(double x, double delta) {
  if (x > delta) return delta;
  if (x < -delta) return -delta;
  return x;
}

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
  pixel += o.pixel;
  semantic += o.semantic;
  ext += o.ext;
  silhouette += o.silhouette;
  int_mask += o.int_mask;
  skin += o.skin;
  inside += o.inside;
  skin_inside += o.skin_inside;
  edge += o.edge;
  offset += o.offset;
  return *this;
}

LossBreakdown& LossBreakdown::operator*=(double s) {
  pixel *= s;
  semantic *= s;
  ext *= s;
  silhouette *= s;
  int_mask *= s;
  skin *= s;
  inside *= s;
  skin_inside *= s;
  edge *= s;
  offset *= s;
  return *this;
}

double recon_pixel_loss(std::span<const Vec3> render, std::span<const Vec3> target,
                        const LossWeights& w, std::vector<Vec3>* d_render) {
  if (render.size() != target.size())
    throw std::invalid_argument("recon loss: buffer shape mismatch");
  if (render.empty()) return 0.0;
  const double norm = 1.0 / (3.0 * static_cast<double>(render.size()));
  double acc = 0;
  for (size_t i = 0; i < render.size(); ++i) {
    for (int c = 0; c < 3; ++c) {
      const double x = render[i][c] - target[i][c];
      acc += huber(x, w.huber_delta);
      if (d_render) (*d_render)[i][c] += w.pixel * norm * huber_grad(x, w.huber_delta);
    }
  }
  return w.pixel * norm * acc;
}

double patch_correlation_distance(const Vec3* render25, const Vec3* target25,
                                  Vec3* d_render25) {
  constexpr int n = 25;
  constexpr double eps_var = 1e-8;
  double dist_sum = 0;
  for (int ch = 0; ch < 3; ++ch) {
    double mr = 0, mt = 0;
    for (int i = 0; i < n; ++i) {
      mr += render25[i][ch];
      mt += target25[i][ch];
    }
    mr /= n;
    mt /= n;
    double vr = 0, vt = 0;
    for (int i = 0; i < n; ++i) {
      vr += (render25[i][ch] - mr) * (render25[i][ch] - mr);
      vt += (target25[i][ch] - mt) * (target25[i][ch] - mt);
    }
    vr = vr / n + eps_var;
    vt = vt / n + eps_var;
    const double sr = std::sqrt(vr), st = std::sqrt(vt);
    double corr = 0;
    for (int i = 0; i < n; ++i)
      corr += ((render25[i][ch] - mr) / sr) * ((target25[i][ch] - mt) / st);
    corr /= n;
    dist_sum += 1.0 - corr;
    if (d_render25) {
      double zt_mean = 0;
      for (int i = 0; i < n; ++i) zt_mean += (target25[i][ch] - mt) / st;
      zt_mean /= n;
      for (int i = 0; i < n; ++i) {
        const double zr = (render25[i][ch] - mr) / sr;
        const double zt = (target25[i][ch] - mt) / st;
        const double dcorr = (zt - zt_mean - corr * zr) / (n * sr);
        d_render25[i][ch] += -dcorr / 3.0;  // channel average below
      }
    }
  }
  return dist_sum / 3.0;
}

double exterior_loss(std::span<const double> s_v, std::span<const double> mask_e,
                     const LossWeights& w, std::vector<double>* d_s_v) {
  if (s_v.size() != mask_e.size()) throw std::invalid_argument("exterior loss: shape mismatch");
  if (s_v.empty()) return 0.0;
  const double norm = 1.0 / static_cast<double>(s_v.size());
  double acc = 0;
  for (size_t i = 0; i < s_v.size(); ++i) {
    const double x = s_v[i] - mask_e[i];
    acc += std::abs(x);
    if (d_s_v) (*d_s_v)[i] += w.ext * norm * (x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0));
  }
  return w.ext * norm * acc;
}

InteriorBreakdown interior_losses(std::span<const double> sil, std::span<const Vec3> mesh_rgb,
                                  std::span<const Vec3> target, std::span<const double> mask_s,
                                  std::span<const double> mask_b, std::span<const double> mask_e,
                                  const Vec3& c_skin, const LossWeights& w,
                                  std::vector<Vec3>* d_mesh_rgb, Vec3* d_c_skin) {
  const size_t n = sil.size();
  if (mesh_rgb.size() != n || target.size() != n || mask_s.size() != n || mask_b.size() != n ||
      mask_e.size() != n)
    throw std::invalid_argument("interior losses: shape mismatch");
  InteriorBreakdown out;
  if (n == 0) return out;
  const double norm1 = 1.0 / static_cast<double>(n);
  const double norm3 = 1.0 / (3.0 * static_cast<double>(n));
  const double delta = w.huber_delta;
  for (size_t i = 0; i < n; ++i) {
    out.silhouette += norm1 * huber(sil[i] - mask_s[i], delta);
    out.int_mask += norm1 * huber(mask_b[i] * (sil[i] - 1.0), delta);
    const double cov = std::min(1.0, mask_b[i] + mask_e[i]);
    const double r = std::max(0.0, sil[i] - cov);
    out.inside += norm1 * huber(r, delta);
    for (int c = 0; c < 3; ++c) {
      const double xs = mask_b[i] * (mesh_rgb[i][c] - target[i][c]);
      out.skin += norm3 * huber(xs, delta);
      const double xi = mask_e[i] * (mesh_rgb[i][c] - c_skin[c]);
      out.skin_inside += norm3 * huber(xi, delta);
      if (d_mesh_rgb) {
        (*d_mesh_rgb)[i][c] += w.skin * norm3 * huber_grad(xs, delta) * mask_b[i];
        (*d_mesh_rgb)[i][c] += w.skin_inside * norm3 * huber_grad(xi, delta) * mask_e[i];
      }
      if (d_c_skin) (*d_c_skin)[c] += -w.skin_inside * norm3 * huber_grad(xi, delta) * mask_e[i];
    }
  }
  out.silhouette *= w.silhouette;
  out.int_mask *= w.int_mask;
  out.skin *= w.skin;
  out.inside *= w.inside;
  out.skin_inside *= w.skin_inside;
  return out;
}

Vec3 region_mean_albedo(const ParametricModel& model, const MatX3& albedo, int region,
                        bool* used_fallback) {
  Vec3 sum = Vec3::Zero();
  int count = 0;
  for (int v = 0; v < model.n_vertices(); ++v) {
    if (model.region_labels[v] == region) {
      for (int c = 0; c < 3; ++c) sum[c] += clamp01(albedo(v, c));
      ++count;
    }
  }
  if (count == 0) {
    if (used_fallback) *used_fallback = true;
    std::cerr << "[losses] warning: empty skin region " << region
              << ", falling back to global mean albedo\n";
    for (int v = 0; v < model.n_vertices(); ++v)
      for (int c = 0; c < 3; ++c) sum[c] += clamp01(albedo(v, c));
    count = model.n_vertices();
  } else if (used_fallback) {
    *used_fallback = false;
  }
  return sum / count;
}

void region_mean_albedo_backward(const ParametricModel& model, const MatX3& albedo, int region,
                                 const Vec3& d_mean, MatX3* d_albedo) {
  std::vector<int> members;
  for (int v = 0; v < model.n_vertices(); ++v)
    if (model.region_labels[v] == region) members.push_back(v);
  if (members.empty()) {
    members.resize(static_cast<size_t>(model.n_vertices()));
    for (int v = 0; v < model.n_vertices(); ++v) members[static_cast<size_t>(v)] = v;
  }
  const double inv = 1.0 / static_cast<double>(members.size());
  for (int v : members)
    for (int c = 0; c < 3; ++c) {
      const double raw = albedo(v, c);
      if (raw >= 0.0 && raw <= 1.0) (*d_albedo)(v, c) += d_mean[c] * inv;
    }
}

RegularizationResult regularization(const MatX3& shaped_with, const MatX3& shaped_without,
                                    const std::vector<std::pair<int, int>>& edges,
                                    const MatX3& offsets, const std::vector<int>& region_labels,
                                    const LossWeights& w, MatX3* d_shaped_with,
                                    MatX3* d_shaped_without, MatX3* d_offsets) {
  RegularizationResult out;
  constexpr double eps = 1e-8;

  if (!edges.empty()) {
    const double norm = 1.0 / static_cast<double>(edges.size());
    for (const auto& [a, b] : edges) {
      const Vec3 dw = (shaped_with.row(a) - shaped_with.row(b)).transpose();
      const Vec3 dn = (shaped_without.row(a) - shaped_without.row(b)).transpose();
      const double lw = dw.norm();
      const double ln = dn.norm();
      const double den = std::max(ln, eps);
      const double e = (lw - ln) / den;
      out.edge += norm * e * e;
      if (d_shaped_with) {
        const double g_lw = w.edge * norm * 2.0 * e / den;
        const Vec3 dir_w = dw / std::max(lw, 1e-12);
        d_shaped_with->row(a) += (g_lw * dir_w).transpose();
        d_shaped_with->row(b) -= (g_lw * dir_w).transpose();
      }
      if (d_shaped_without) {
        // d/d ln of (lw - ln)/max(ln, eps): for ln > eps, -(lw/ln^2)
        double g_ln = w.edge * norm * 2.0 * e * (ln > eps ? -lw / (ln * ln) : -1.0 / eps);
        const Vec3 dir_n = dn / std::max(ln, 1e-12);
        d_shaped_without->row(a) += (g_ln * dir_n).transpose();
        d_shaped_without->row(b) -= (g_ln * dir_n).transpose();
      }
    }
    out.edge *= w.edge;
  }

  const int nv = static_cast<int>(offsets.rows());
  if (nv > 0) {
    double ratio_sum = 0;
    for (int v = 0; v < nv; ++v) ratio_sum += w.offset_region_ratio[region_labels[v]];
    const double ratio_norm = static_cast<double>(nv) / ratio_sum;  // unit mean weight
    for (int v = 0; v < nv; ++v) {
      const double wt = w.offset_region_ratio[region_labels[v]] * ratio_norm;
      out.offset += wt * offsets.row(v).squaredNorm() / nv;
      if (d_offsets)
        d_offsets->row(v) += (w.offset * 2.0 * wt / nv) * offsets.row(v);
    }
    out.offset *= w.offset;
  }
  return out;
}

}  // namespace avatar
