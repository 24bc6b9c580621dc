#include "avatar/skinning.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace avatar {

namespace {

struct Candidate {
  double d2;
  int idx;
  bool operator<(const Candidate& o) const {
    return d2 < o.d2 || (d2 == o.d2 && idx < o.idx);
  }
};

// Keeps the best-k candidates in sorted order; n small (<= 32).
struct BestK {
  Candidate slots[kMaxQueryNeighbors];
  int count = 0;
  int k;
  explicit BestK(int kk) : k(kk) {}

  double worst() const {
    return count < k ? std::numeric_limits<double>::infinity() : slots[k - 1].d2;
  }
  void offer(double d2, int idx) {
    if (count == k && !(Candidate{d2, idx} < slots[k - 1])) return;
    int pos = count < k ? count : k - 1;
    Candidate c{d2, idx};
    while (pos > 0 && c < slots[pos - 1]) {
      slots[pos] = slots[pos - 1];
      --pos;
    }
    slots[pos] = c;
    if (count < k) ++count;
  }
};

}  // namespace

std::vector<int> nearest_neighbors(const Vec3& x, const MatX3& verts, int k) {
  const int n = static_cast<int>(verts.rows());
  if (k < 1 || k > n) throw std::invalid_argument("nearest_neighbors: k out of range");
  std::vector<Candidate> all(n);
  for (int i = 0; i < n; ++i) {
    const double dx = verts(i, 0) - x[0], dy = verts(i, 1) - x[1], dz = verts(i, 2) - x[2];
    all[i] = {dx * dx + dy * dy + dz * dz, i};
  }
  std::partial_sort(all.begin(), all.begin() + k, all.end());
  std::vector<int> out(k);
  for (int i = 0; i < k; ++i) out[i] = all[i].idx;
  return out;
}

NeighborIndex::NeighborIndex(const MatX3& verts, int grid_threshold) : verts_(&verts) {
  const int n = static_cast<int>(verts.rows());
  if (n == 0) throw std::invalid_argument("NeighborIndex: empty vertex set");
  use_grid_ = n >= grid_threshold;
  if (!use_grid_) return;

  Vec3 lo = verts.colwise().minCoeff().transpose();
  Vec3 hi = verts.colwise().maxCoeff().transpose();
  const Vec3 span = (hi - lo).cwiseMax(1e-9);
  // ~ n^(1/3) cells per axis keeps a few points per cell
  const int target = std::max(4, static_cast<int>(std::cbrt(static_cast<double>(n))));
  cell_ = span.maxCoeff() / target;
  origin_ = lo;
  for (int a = 0; a < 3; ++a)
    dims_[a] = std::max(1, static_cast<int>(std::floor(span[a] / cell_)) + 1);

  const size_t ncells = static_cast<size_t>(dims_[0]) * dims_[1] * dims_[2];
  std::vector<int> counts(ncells + 1, 0);
  auto cell_of = [&](int i) {
    int c[3];
    for (int a = 0; a < 3; ++a) {
      c[a] = static_cast<int>(std::floor(((*verts_)(i, a) - origin_[a]) / cell_));
      c[a] = std::clamp(c[a], 0, dims_[a] - 1);
    }
    return (static_cast<size_t>(c[2]) * dims_[1] + c[1]) * dims_[0] + c[0];
  };
  for (int i = 0; i < n; ++i) counts[cell_of(i) + 1]++;
  for (size_t c = 1; c <= ncells; ++c) counts[c] += counts[c - 1];
  cell_start_ = counts;
  cell_items_.resize(n);
  std::vector<int> cursor(cell_start_.begin(), cell_start_.end() - 1);
  for (int i = 0; i < n; ++i) cell_items_[cursor[cell_of(i)]++] = i;
}

void NeighborIndex::query(const Vec3& x, int k, int* out) const {
  const int n = static_cast<int>(verts_->rows());
  if (k < 1 || k > n || k > kMaxQueryNeighbors)
    throw std::invalid_argument("NeighborIndex: k out of range");
  BestK best(k);
  const MatX3& v = *verts_;
  if (!use_grid_) {
    for (int i = 0; i < n; ++i) {
      const double dx = v(i, 0) - x[0], dy = v(i, 1) - x[1], dz = v(i, 2) - x[2];
      best.offer(dx * dx + dy * dy + dz * dz, i);
    }
  } else {
    int base[3];
    for (int a = 0; a < 3; ++a)
      base[a] = static_cast<int>(std::floor((x[a] - origin_[a]) / cell_));
    const int max_ring = std::max({dims_[0], dims_[1], dims_[2]}) +
                         *std::max_element(base, base + 3) + 4;
    for (int r = 0;; ++r) {
      const double ring_min = (r - 1) * cell_;
      if (best.count >= k && ring_min * ring_min > best.worst()) break;
      bool any_cell = false;
      for (int dz = -r; dz <= r; ++dz) {
        const int cz = base[2] + dz;
        if (cz < 0 || cz >= dims_[2]) continue;
        for (int dy = -r; dy <= r; ++dy) {
          const int cy = base[1] + dy;
          if (cy < 0 || cy >= dims_[1]) continue;
          const bool face_z = std::abs(dz) == r;
          const bool face_y = std::abs(dy) == r;
          for (int dx = -r; dx <= r; ++dx) {
            // only the shell of the ring
            if (!face_z && !face_y && std::abs(dx) != r) continue;
            const int cx = base[0] + dx;
            if (cx < 0 || cx >= dims_[0]) continue;
            any_cell = true;
            const size_t cell = (static_cast<size_t>(cz) * dims_[1] + cy) * dims_[0] + cx;
            for (int it = cell_start_[cell]; it < cell_start_[cell + 1]; ++it) {
              const int i = cell_items_[it];
              const double ddx = v(i, 0) - x[0], ddy = v(i, 1) - x[1], ddz = v(i, 2) - x[2];
              best.offer(ddx * ddx + ddy * ddy + ddz * ddz, i);
            }
          }
        }
      }
      if (!any_cell && r > max_ring) break;  // grid exhausted
    }
  }
  for (int i = 0; i < k; ++i) out[i] = best.slots[i].idx;
}

namespace {

// Shared by forward and backward; returns true if the uniform fallback hit.
bool alpha_raw(const Vec3& x, const int* nbr, int n, const MatX3& verts, const MatX& w,
               double sigma, double* dist, double* gap, double* alpha) {
  const int nn = nbr[0];
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  double emax = -std::numeric_limits<double>::infinity();
  double expo[kMaxQueryNeighbors];
  for (int i = 0; i < n; ++i) {
    const Vec3 v = verts.row(nbr[i]).transpose();
    dist[i] = (x - v).norm();
    gap[i] = (w.col(nn) - w.col(nbr[i])).norm();
    expo[i] = -inv2s2 * dist[i] * gap[i];
    emax = std::max(emax, expo[i]);
  }
  if (!std::isfinite(emax)) {
    for (int i = 0; i < n; ++i) alpha[i] = 1.0 / n;
    return true;
  }
  double z = 0;
  for (int i = 0; i < n; ++i) {
    alpha[i] = std::exp(expo[i] - emax);
    z += alpha[i];
  }
  if (z <= 0 || !std::isfinite(z)) {
    for (int i = 0; i < n; ++i) alpha[i] = 1.0 / n;
    return true;
  }
  for (int i = 0; i < n; ++i) alpha[i] /= z;
  return false;
}

}  // namespace

void blend_alpha(const Vec3& x, const int* neighbors, int n, const MatX3& posed_verts,
                 const MatX& skin_weights, double sigma, double* alpha_out) {
  if (sigma <= 0) throw std::invalid_argument("blend_alpha: sigma must be positive");
  if (n < 1 || n > kMaxQueryNeighbors) throw std::invalid_argument("blend_alpha: bad n");
  double dist[kMaxQueryNeighbors], gap[kMaxQueryNeighbors];
  alpha_raw(x, neighbors, n, posed_verts, skin_weights, sigma, dist, gap, alpha_out);
}

void blend_alpha_backward(const Vec3& x, const int* neighbors, int n, const MatX3& posed_verts,
                          const MatX& skin_weights, double sigma, const double* d_alpha,
                          Vec3* d_x, std::vector<std::pair<int, Vec3>>* d_vertex) {
  double dist[kMaxQueryNeighbors], gap[kMaxQueryNeighbors], alpha[kMaxQueryNeighbors];
  const bool degenerate =
      alpha_raw(x, neighbors, n, posed_verts, skin_weights, sigma, dist, gap, alpha);
  if (degenerate) return;  // uniform fallback is locally constant

  double dot = 0;
  for (int i = 0; i < n; ++i) dot += d_alpha[i] * alpha[i];
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  for (int i = 0; i < n; ++i) {
    const double d_expo = alpha[i] * (d_alpha[i] - dot);
    const double d_dist = -inv2s2 * gap[i] * d_expo;
    const Vec3 v = posed_verts.row(neighbors[i]).transpose();
    const Vec3 dir = (x - v) / std::max(dist[i], 1e-12);
    if (d_x) *d_x += d_dist * dir;
    if (d_vertex) d_vertex->push_back({neighbors[i], Vec3(-d_dist * dir)});
  }
}

Vec3 inverse_skin(const Vec3& x, const PosedMesh& mesh, const int* neighbors,
                  const double* alpha, int n) {
  Vec3 out = Vec3::Zero();
  for (int i = 0; i < n; ++i) {
    const Mat4& a = mesh.canonical_map[neighbors[i]];
    out += alpha[i] * (a.block<3, 3>(0, 0) * x + a.block<3, 1>(0, 3));
  }
  return out;
}

CanonicalQuery canonicalize(const Vec3& x_p, const PosedMesh& mesh, const NeighborIndex& index,
                            const SkinningConfig& cfg, const DeformationField* residual) {
  CanonicalQuery q;
  q.x_p = x_p;
  q.n = cfg.k;
  index.query(x_p, cfg.k, q.neighbors.data());
  blend_alpha(x_p, q.neighbors.data(), q.n, mesh.vertices, mesh.model->skin_weights, cfg.sigma,
              q.alpha.data());
  q.x_c = inverse_skin(x_p, mesh, q.neighbors.data(), q.alpha.data(), q.n);
  if (residual) {
    const Vec3 anchor = mesh.vertices.row(q.neighbors[0]).transpose();
    Vec6 in;
    in << q.x_c, anchor;
    q.x_c_tilde = q.x_c + residual->eval(in);
  } else {
    q.x_c_tilde = q.x_c;
  }
  return q;
}

Vec3 canonicalize_backward(const CanonicalQuery& q, const PosedMesh& mesh,
                           const SkinningConfig& cfg, const DeformationField* residual,
                           const Vec3& d_x_c_tilde, SkinGradSink* sink) {
  Vec3 d_xc = d_x_c_tilde;
  if (residual) {
    const Vec3 anchor = mesh.vertices.row(q.neighbors[0]).transpose();
    Vec6 in;
    in << q.x_c, anchor;
    const Vec6 d_in =
        residual->eval_backward(in, d_x_c_tilde, sink ? sink->d_residual_params : nullptr);
    d_xc += d_in.head<3>();
    if (sink && sink->d_vertex)
      sink->d_vertex->push_back({q.neighbors[0], Vec3(d_in.tail<3>())});
  }

  // x_c = sum_i alpha_i (A_i.R x + A_i.t)
  Vec3 d_xp = Vec3::Zero();
  double d_alpha[kMaxQueryNeighbors];
  const Vec4 xh(q.x_p[0], q.x_p[1], q.x_p[2], 1.0);
  for (int i = 0; i < q.n; ++i) {
    const Mat4& a = mesh.canonical_map[q.neighbors[i]];
    const Vec3 ax = a.block<3, 3>(0, 0) * q.x_p + a.block<3, 1>(0, 3);
    d_alpha[i] = d_xc.dot(ax);
    d_xp += q.alpha[i] * (a.block<3, 3>(0, 0).transpose() * d_xc);
    if (sink && sink->d_canonical) {
      Mat34 da = q.alpha[i] * (d_xc * xh.transpose());
      sink->d_canonical->push_back({q.neighbors[i], da});
    }
  }
  blend_alpha_backward(q.x_p, q.neighbors.data(), q.n, mesh.vertices, mesh.model->skin_weights,
                       cfg.sigma, d_alpha, &d_xp, sink ? sink->d_vertex : nullptr);
  return d_xp;
}

Vec3 forward_skin(const Vec3& x_c, const PosedMesh& mesh, const CanonicalContext& canon,
                  const NeighborIndex& canonical_index, const SkinningConfig& cfg) {
  int nbr[kMaxQueryNeighbors];
  canonical_index.query(x_c, cfg.k, nbr);
  double alpha[kMaxQueryNeighbors];
  blend_alpha(x_c, nbr, cfg.k, canon.vertices, mesh.model->skin_weights, cfg.sigma, alpha);
  Vec3 out = Vec3::Zero();
  for (int i = 0; i < cfg.k; ++i) {
    const Mat4 t = mesh.vertex_transforms[nbr[i]] * canon.transforms_inv[nbr[i]];
    out += alpha[i] * (t.block<3, 3>(0, 0) * x_c + t.block<3, 1>(0, 3));
  }
  return out;
}

}  // namespace avatar
