#include "avatar/field.hpp"

namespace avatar {

CanonicalField CanonicalField::create(const std::vector<int>& resolutions, const Vec3& bmin,
                                      const Vec3& bmax, double density_raw_init) {
  if (resolutions.empty()) throw std::invalid_argument("field: need at least one level");
  CanonicalField f;
  f.box_min = bmin;
  f.box_max = bmax;
  for (size_t l = 0; l < resolutions.size(); ++l) {
    const int r = resolutions[l];
    if (r < 2) throw std::invalid_argument("field: level resolution must be >= 2");
    Level lev;
    lev.res = r;
    lev.raw.assign(static_cast<size_t>(r) * r * r * 4, 0.0);
    if (l == 0) {
      for (size_t i = 3; i < lev.raw.size(); i += 4) lev.raw[i] = density_raw_init;
    }
    f.levels.push_back(std::move(lev));
  }
  return f;
}

namespace {

struct CellCoords {
  int i0[3];
  double f[3];  // fractional position within the cell
};

inline CellCoords locate(const CanonicalField& field, const CanonicalField::Level& lev,
                         const Vec3& x) {
  CellCoords c;
  for (int a = 0; a < 3; ++a) {
    const double u = (x[a] - field.box_min[a]) / (field.box_max[a] - field.box_min[a]);
    double g = u * (lev.res - 1);
    int i = static_cast<int>(std::floor(g));
    if (i < 0) i = 0;
    if (i > lev.res - 2) i = lev.res - 2;
    c.i0[a] = i;
    c.f[a] = g - i;
  }
  return c;
}

inline size_t node_index(const CanonicalField::Level& lev, int x, int y, int z) {
  return ((static_cast<size_t>(z) * lev.res + y) * lev.res + x) * 4;
}

}  // namespace

Vec4 CanonicalField::query_raw(const Vec3& x, bool* was_inside) const {
  if (!inside(x)) {
    if (was_inside) *was_inside = false;
    return Vec4::Zero();
  }
  if (was_inside) *was_inside = true;
  Vec4 out = Vec4::Zero();
  for (const Level& lev : levels) {
    const CellCoords c = locate(*this, lev, x);
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const double w = (dx ? c.f[0] : 1 - c.f[0]) * (dy ? c.f[1] : 1 - c.f[1]) *
                           (dz ? c.f[2] : 1 - c.f[2]);
          const size_t idx = node_index(lev, c.i0[0] + dx, c.i0[1] + dy, c.i0[2] + dz);
          for (int ch = 0; ch < 4; ++ch) out[ch] += w * lev.raw[idx + ch];
        }
  }
  return out;
}

void CanonicalField::query(const Vec3& x, Vec3* rgb, double* density) const {
  bool in = false;
  const Vec4 raw = query_raw(x, &in);
  if (!in) {
    *rgb = Vec3::Zero();
    *density = 0.0;
    return;
  }
  (*rgb)[0] = sigmoid(raw[0]);
  (*rgb)[1] = sigmoid(raw[1]);
  (*rgb)[2] = sigmoid(raw[2]);
  *density = softplus(raw[3]);
}

void CanonicalField::query_raw_backward(const Vec3& x, const Vec4& d_raw,
                                        std::vector<GridCellGrad>* out, Vec3* d_x) const {
  if (!inside(x)) return;
  for (size_t l = 0; l < levels.size(); ++l) {
    const Level& lev = levels[l];
    const CellCoords c = locate(*this, lev, x);
    const double scale[3] = {
        (lev.res - 1) / (box_max[0] - box_min[0]),
        (lev.res - 1) / (box_max[1] - box_min[1]),
        (lev.res - 1) / (box_max[2] - box_min[2]),
    };
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const double wx = dx ? c.f[0] : 1 - c.f[0];
          const double wy = dy ? c.f[1] : 1 - c.f[1];
          const double wz = dz ? c.f[2] : 1 - c.f[2];
          const size_t idx = node_index(lev, c.i0[0] + dx, c.i0[1] + dy, c.i0[2] + dz);
          if (out) {
            GridCellGrad g;
            g.level = static_cast<int32_t>(l);
            g.index = static_cast<int32_t>(idx);
            g.g = (wx * wy * wz) * d_raw;
            out->push_back(g);
          }
          if (d_x) {
            double dot = 0;
            for (int ch = 0; ch < 4; ++ch) dot += d_raw[ch] * lev.raw[idx + ch];
            (*d_x)[0] += (dx ? 1.0 : -1.0) * wy * wz * scale[0] * dot;
            (*d_x)[1] += wx * (dy ? 1.0 : -1.0) * wz * scale[1] * dot;
            (*d_x)[2] += wx * wy * (dz ? 1.0 : -1.0) * scale[2] * dot;
          }
        }
  }
}

int64_t CanonicalField::param_count() const {
  int64_t n = 0;
  for (const Level& lev : levels) n += static_cast<int64_t>(lev.raw.size());
  return n;
}

void CanonicalField::to_flat(VecX* out) const {
  out->resize(param_count());
  int64_t o = 0;
  for (const Level& lev : levels) {
    for (double v : lev.raw) (*out)[o++] = v;
  }
}

void CanonicalField::from_flat(const VecX& in) {
  if (in.size() != param_count()) throw std::invalid_argument("field: flat size mismatch");
  int64_t o = 0;
  for (Level& lev : levels) {
    for (double& v : lev.raw) v = in[o++];
  }
}

}  // namespace avatar
