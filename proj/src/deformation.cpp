#include "avatar/deformation.hpp"

#include "avatar/rng.hpp"

namespace avatar {

DeformationField DeformationField::create(int hidden, uint64_t seed, double output_scale) {
  DeformationField f;
  Rng rng(Rng::mix(seed, 0x6d1f));
  auto init = [&](MatX& m, int rows, int cols) {
    m.resize(rows, cols);
    const double s = std::sqrt(2.0 / cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) m(r, c) = s * rng.normal();
  };
  init(f.w1, hidden, 6);
  f.b1 = VecX::Zero(hidden);
  init(f.w2, hidden, hidden);
  f.b2 = VecX::Zero(hidden);
  f.w3 = MatX::Zero(3, hidden);  // zero map at start
  f.b3 = VecX::Zero(3);
  f.output_scale = output_scale;
  return f;
}

int64_t DeformationField::param_count() const {
  return w1.size() + b1.size() + w2.size() + b2.size() + w3.size() + b3.size();
}

namespace {
template <typename Fn>
void for_each_block(const DeformationField& f, Fn&& fn) {
  fn(f.w1);
  fn(f.b1);
  fn(f.w2);
  fn(f.b2);
  fn(f.w3);
  fn(f.b3);
}
}  // namespace

void DeformationField::to_flat(VecX* out) const {
  out->resize(param_count());
  int64_t o = 0;
  for_each_block(*this, [&](const auto& block) {
    for (Eigen::Index i = 0; i < block.size(); ++i) (*out)[o++] = block.data()[i];
  });
}

void DeformationField::from_flat(const VecX& in) {
  if (in.size() != param_count()) throw std::invalid_argument("deformation: flat size mismatch");
  int64_t o = 0;
  auto load = [&](auto& block) {
    for (Eigen::Index i = 0; i < block.size(); ++i) block.data()[i] = in[o++];
  };
  load(w1);
  load(b1);
  load(w2);
  load(b2);
  load(w3);
  load(b3);
}

Vec3 DeformationField::eval(const Vec6& in) const {
  const VecX h1 = (w1 * in + b1).array().tanh();
  const VecX h2 = (w2 * h1 + b2).array().tanh();
  return output_scale * (w3 * h2 + b3);
}

Vec6 DeformationField::eval_backward(const Vec6& in, const Vec3& d_out, VecX* d_params) const {
  const VecX h1 = (w1 * in + b1).array().tanh();
  const VecX h2 = (w2 * h1 + b2).array().tanh();

  const Vec3 g3 = output_scale * d_out;      // grad at (w3 h2 + b3)
  const VecX gh2_pre =                        // grad at pre-activation of h2
      (w3.transpose() * g3).cwiseProduct(VecX::Ones(h2.size()) - h2.cwiseProduct(h2));
  const VecX gh1_pre =
      (w2.transpose() * gh2_pre).cwiseProduct(VecX::Ones(h1.size()) - h1.cwiseProduct(h1));

  if (d_params) {
    if (d_params->size() != param_count())
      throw std::invalid_argument("deformation: gradient buffer size mismatch");
    int64_t o = 0;
    auto add_mat = [&](const VecX& outer_l, const VecX& outer_r) {
      // column-major like Eigen's storage
      for (Eigen::Index c = 0; c < outer_r.size(); ++c)
        for (Eigen::Index r = 0; r < outer_l.size(); ++r)
          (*d_params)[o++] += outer_l[r] * outer_r[c];
    };
    auto add_vec = [&](const VecX& g) {
      for (Eigen::Index i = 0; i < g.size(); ++i) (*d_params)[o++] += g[i];
    };
    VecX in_v(6);
    for (int i = 0; i < 6; ++i) in_v[i] = in[i];
    add_mat(gh1_pre, in_v);
    add_vec(gh1_pre);
    add_mat(gh2_pre, h1);
    add_vec(gh2_pre);
    add_mat(VecX(g3), h2);
    add_vec(VecX(g3));
  }
  const VecX gin = w1.transpose() * gh1_pre;
  Vec6 out;
  for (int i = 0; i < 6; ++i) out[i] = gin[i];
  return out;
}

}  // namespace avatar
