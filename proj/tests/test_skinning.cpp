#include <doctest.h>

#include "avatar/skinning.hpp"
#include "avatar/rng.hpp"
#include "oracles.hpp"

using namespace avatar;

TEST_CASE("nearest_neighbors basics and scan oracle") {
  const ParametricModel m = make_toy_model();
  const MatX3& verts = m.template_vertices;

  // a query at vertex 7 returns 7 first
  const Vec3 v7 = verts.row(7).transpose();
  CHECK(nearest_neighbors(v7, verts, 1)[0] == 7);

  // k = n returns every index
  const auto all = nearest_neighbors(Vec3(0.3, 0.1, -0.2), verts, m.n_vertices());
  CHECK(static_cast<int>(all.size()) == m.n_vertices());
  std::vector<int> sorted = all;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < m.n_vertices(); ++i) CHECK(sorted[static_cast<size_t>(i)] == i);

  CHECK_THROWS_AS(nearest_neighbors(v7, verts, 0), std::invalid_argument);
  CHECK_THROWS_AS(nearest_neighbors(v7, verts, m.n_vertices() + 1), std::invalid_argument);

  // random queries against a naive full sort
  Rng rng(31);
  for (int it = 0; it < 50; ++it) {
    const Vec3 x(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    const auto got = nearest_neighbors(x, verts, 6);
    std::vector<std::pair<double, int>> naive;
    for (int i = 0; i < m.n_vertices(); ++i)
      naive.push_back({(Vec3(verts.row(i).transpose()) - x).squaredNorm(), i});
    std::sort(naive.begin(), naive.end());
    for (int i = 0; i < 6; ++i) CHECK(got[static_cast<size_t>(i)] == naive[static_cast<size_t>(i)].second);
  }
}

TEST_CASE("grid-accelerated index matches the exact scan") {
  Rng rng(77);
  const int n = 6000;  // above the grid threshold
  MatX3 cloud(n, 3);
  for (int i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a) cloud(i, a) = rng.normal();
  const NeighborIndex accel(cloud);
  CHECK(accel.uses_grid());
  const NeighborIndex brute(cloud, /*grid_threshold=*/n + 1);
  CHECK(!brute.uses_grid());

  for (int it = 0; it < 200; ++it) {
    const Vec3 x(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3));
    int a[8], b[8];
    accel.query(x, 8, a);
    brute.query(x, 8, b);
    for (int i = 0; i < 8; ++i) CHECK(a[i] == b[i]);
  }
}

TEST_CASE("blend_alpha trivial, symmetric, and hand-computed cases") {
  // nearest neighbor's weight-gap term vanishes: exponent 0
  MatX3 verts(3, 3);
  verts << 0.1, 0, 0, 0.2, 0, 0, 0, 0.3, 0;
  MatX w(2, 3);
  w << 1, 1, 0.2, 0, 0, 0.8;
  const int nbr2[2] = {0, 1};
  double alpha[3];

  // hand case: d = (0.1, 0.2), gaps (0, 0.5), sigma = 0.1
  // alpha_0 ~ exp(0) = 1, alpha_1 ~ exp(-50 * 0.2 * 0.5) = exp(-5)
  {
    MatX w2(2, 3);
    const double a = 0.5 / std::sqrt(2.0);
    w2 << 1, 1 - a, 0, 0, a, 0;
    CHECK(std::abs((w2.col(0) - w2.col(1)).norm() - 0.5) < 1e-12);
    blend_alpha(Vec3::Zero(), nbr2, 2, verts, w2, 0.1, alpha);
    const double e1 = std::exp(-5.0);
    CHECK(alpha[0] == doctest::Approx(1.0 / (1.0 + e1)).epsilon(1e-12));
    CHECK(alpha[1] == doctest::Approx(e1 / (1.0 + e1)).epsilon(1e-12));
  }

  // equidistant neighbors with identical skin weights: uniform
  {
    MatX3 ring(4, 3);
    ring << 0.3, 0, 0, -0.3, 0, 0, 0, 0.3, 0, 0, -0.3, 0;
    MatX wsame = MatX::Zero(2, 4);
    wsame.row(0).setConstant(0.5);
    wsame.row(1).setConstant(0.5);
    const int nbr4[4] = {0, 1, 2, 3};
    double a4[4];
    blend_alpha(Vec3::Zero(), nbr4, 4, ring, wsame, 0.1, a4);
    for (int i = 0; i < 4; ++i) CHECK(a4[i] == doctest::Approx(0.25).epsilon(1e-12));
  }

  CHECK_THROWS_AS(blend_alpha(Vec3::Zero(), nbr2, 2, verts, w, 0.0, alpha),
                  std::invalid_argument);
}

TEST_CASE("blend_alpha degenerate kernel falls back to uniform") {
  MatX3 verts(2, 3);
  verts << 1e308, 0, 0, -1e308, 0, 0;  // distances overflow to inf
  MatX w(1, 2);
  w << 1, 1;
  const int nbr[2] = {0, 1};
  double alpha[2];
  blend_alpha(Vec3::Zero(), nbr, 2, verts, w, 0.1, alpha);
  CHECK(alpha[0] == 0.5);
  CHECK(alpha[1] == 0.5);

  // and the backward treats the fallback as locally constant
  Vec3 d_x = Vec3::Zero();
  const double da[2] = {1.0, -2.0};
  blend_alpha_backward(Vec3::Zero(), nbr, 2, verts, w, 0.1, da, &d_x, nullptr);
  CHECK(d_x.norm() == 0.0);
}

TEST_CASE("alpha normalization holds everywhere") {
  oracle::TestScene ts = oracle::make_toy_scene(5);
  Rng rng(6);
  for (int it = 0; it < 500; ++it) {
    const Vec3 x(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    const CanonicalQuery q = canonicalize(x, ts.mesh, *ts.index, ts.scene.skin, nullptr);
    double sum = 0;
    for (int i = 0; i < q.n; ++i) {
      CHECK(q.alpha[static_cast<size_t>(i)] >= 0.0);
      sum += q.alpha[static_cast<size_t>(i)];
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("inverse skinning at the canonical configuration is the identity") {
  oracle::TestScene ts = oracle::make_toy_scene(0, false, /*identity_pose=*/true);
  Rng rng(8);
  for (int it = 0; it < 100; ++it) {
    const Vec3 x(rng.uniform(-0.6, 0.6), rng.uniform(-0.8, 0.8), rng.uniform(-0.4, 0.4));
    const CanonicalQuery q = canonicalize(x, ts.mesh, *ts.index, ts.scene.skin, nullptr);
    CHECK((q.x_c - x).norm() < 1e-9);
    CHECK((q.x_c_tilde - x).norm() < 1e-9);
  }
}

TEST_CASE("k=1 round trip is exact") {
  oracle::TestScene ts = oracle::make_toy_scene(42);
  ts.scene.skin.k = 1;
  const NeighborIndex canon_index(ts.canon.vertices);
  Rng rng(12);
  for (int it = 0; it < 100; ++it) {
    const int v = rng.uniform_int(ts.model.n_vertices());
    Vec3 dir(rng.normal(), rng.normal(), rng.normal());
    dir.normalize();
    const Vec3 x_p = Vec3(ts.mesh.vertices.row(v).transpose()) + 1e-3 * dir;
    const CanonicalQuery q = canonicalize(x_p, ts.mesh, *ts.index, ts.scene.skin, nullptr);
    const Vec3 back = forward_skin(q.x_c, ts.mesh, ts.canon, canon_index, ts.scene.skin);
    CHECK((back - x_p).norm() < 1e-6);
  }
}

TEST_CASE("k=6 on-surface round trip stays within 1e-3") {
  oracle::TestScene ts = oracle::make_toy_scene(43);
  const NeighborIndex canon_index(ts.canon.vertices);
  Rng rng(14);
  double worst = 0;
  for (int it = 0; it < 200; ++it) {
    const int v = rng.uniform_int(ts.model.n_vertices());
    Vec3 dir(rng.normal(), rng.normal(), rng.normal());
    dir.normalize();
    const Vec3 x_p = Vec3(ts.mesh.vertices.row(v).transpose()) + 0.01 * dir;
    const CanonicalQuery q = canonicalize(x_p, ts.mesh, *ts.index, ts.scene.skin, nullptr);
    const Vec3 back = forward_skin(q.x_c, ts.mesh, ts.canon, canon_index, ts.scene.skin);
    worst = std::max(worst, (back - x_p).norm());
  }
  CHECK(worst <= 1e-3);
}

TEST_CASE("canonicalize with a zero-initialized residual adds nothing") {
  oracle::TestScene ts = oracle::make_toy_scene(9);
  const DeformationField residual = DeformationField::create(64, 1234, 0.1);
  Rng rng(10);
  for (int it = 0; it < 50; ++it) {
    const Vec3 x(rng.uniform(-0.5, 0.5), rng.uniform(-0.7, 0.7), rng.uniform(-0.3, 0.3));
    const CanonicalQuery q = canonicalize(x, ts.mesh, *ts.index, ts.scene.skin, &residual);
    CHECK((q.x_c_tilde - q.x_c).norm() == 0.0);
  }
}

TEST_CASE("canonicalize gradients match finite differences") {
  oracle::TestScene ts = oracle::make_toy_scene(44);
  DeformationField residual = DeformationField::create(32, 7, 0.05);
  Rng rng(15);
  for (Eigen::Index i = 0; i < residual.w3.size(); ++i)
    residual.w3.data()[i] = 0.1 * rng.normal();

  // stable query point: comfortably outside the surface
  const Vec3 x_p(0.31, 0.05, 0.12);
  const Vec3 up(rng.normal(), rng.normal(), rng.normal());

  const CanonicalQuery q = canonicalize(x_p, ts.mesh, *ts.index, ts.scene.skin, &residual);
  VecX d_params = VecX::Zero(residual.param_count());
  SkinGradSink sink;
  sink.d_residual_params = &d_params;
  const Vec3 d_xp =
      canonicalize_backward(q, ts.mesh, ts.scene.skin, &residual, up, &sink);

  // residual parameters
  VecX flat;
  residual.to_flat(&flat);
  Rng pick(16);
  for (int probe = 0; probe < 12; ++probe) {
    const int i = pick.uniform_int(static_cast<int>(flat.size()));
    const double fd = oracle::central_diff(
        [&](double v) {
          DeformationField r2 = residual;
          VecX f2 = flat;
          f2[i] = v;
          r2.from_flat(f2);
          const CanonicalQuery q2 = canonicalize(x_p, ts.mesh, *ts.index, ts.scene.skin, &r2);
          return up.dot(q2.x_c_tilde);
        },
        flat[i], 1e-4);
    CHECK(oracle::rel_err(d_params[i], fd, 1e-8) < 1e-3);
  }

  // query point
  for (int a = 0; a < 3; ++a) {
    const double fd = oracle::central_diff(
        [&](double v) {
          Vec3 x2 = x_p;
          x2[a] = v;
          const CanonicalQuery q2 = canonicalize(x2, ts.mesh, *ts.index, ts.scene.skin, &residual);
          return up.dot(q2.x_c_tilde);
        },
        x_p[a], 1e-5);
    CHECK(oracle::rel_err(d_xp[a], fd) < 1e-3);
  }
}

TEST_CASE("small input perturbations stay bounded away from joint seams") {
  oracle::TestScene ts = oracle::make_toy_scene(45);
  Rng rng(18);
  const double eps = 1e-4;
  int tested = 0;
  for (int it = 0; it < 300 && tested < 60; ++it) {
    const int v = rng.uniform_int(ts.model.n_vertices());
    Vec3 dir(rng.normal(), rng.normal(), rng.normal());
    dir.normalize();
    const Vec3 x = Vec3(ts.mesh.vertices.row(v).transpose()) + 0.02 * dir;
    // only probe where the neighbor set has margin (away from seams)
    const auto nn = nearest_neighbors(x, ts.mesh.vertices, ts.scene.skin.k + 1);
    const double dk =
        (Vec3(ts.mesh.vertices.row(nn[static_cast<size_t>(ts.scene.skin.k - 1)]).transpose()) - x)
            .norm();
    const double dk1 =
        (Vec3(ts.mesh.vertices.row(nn[static_cast<size_t>(ts.scene.skin.k)]).transpose()) - x)
            .norm();
    if (dk1 - dk < 1e-3) continue;
    ++tested;
    const CanonicalQuery q0 = canonicalize(x, ts.mesh, *ts.index, ts.scene.skin, nullptr);
    Vec3 pdir(rng.normal(), rng.normal(), rng.normal());
    pdir.normalize();
    const CanonicalQuery q1 =
        canonicalize(x + eps * pdir, ts.mesh, *ts.index, ts.scene.skin, nullptr);
    CHECK((q1.x_c - q0.x_c).norm() <= 100.0 * eps);
  }
  CHECK(tested >= 50);
}
