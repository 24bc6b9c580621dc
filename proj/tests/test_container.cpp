#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "avatar/container.hpp"
#include "avatar/image.hpp"

using namespace avatar;

namespace {
std::string tmp_path(const char* name) {
  return std::string("/tmp/avatar_test_") + name;
}
}  // namespace

TEST_CASE("container roundtrip preserves arrays and meta") {
  Container c;
  c.meta["kind"] = "unit-test";
  MatX m(2, 3);
  m << 1, 2, 3, 4, 5, 6;
  c.put("m", m);
  VecX v(4);
  v << -1, 0.5, 2.25, 1e6;
  c.put("v", v);
  FaceMat f(2, 3);
  f << 0, 1, 2, 2, 1, 0;
  c.put("f", f);
  c.put_ints("ids", {7, 8, 9});

  const std::string path = tmp_path("container.bin");
  write_container(path, c);
  const Container r = read_container(path);

  CHECK(r.meta.at("kind") == "unit-test");
  CHECK(r.get_matrix("m") == m);
  CHECK(r.get_vector("v") == v);
  CHECK(r.get_faces("f") == f);
  CHECK(r.get_ints("ids") == std::vector<int>{7, 8, 9});
}

TEST_CASE("container errors") {
  Container c;
  c.put("a", VecX(VecX::Zero(3)));
  const std::string path = tmp_path("container_err.bin");
  write_container(path, c);
  const Container r = read_container(path);
  CHECK_THROWS_AS(r.get("missing"), std::invalid_argument);
  CHECK_THROWS_AS(r.get_matrix("a"), std::invalid_argument);  // 1-d, not 2-d

  // corrupt the magic
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XX", 2);
  }
  CHECK_THROWS_AS(read_container(path), std::invalid_argument);
  CHECK_THROWS_AS(read_container("/tmp/definitely_missing_avtc"), std::invalid_argument);
}

TEST_CASE("png roundtrip at 8-bit resolution") {
  Image img(7, 5, 3);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 7; ++x)
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = (x * 31 + y * 7 + c * 3) % 256 / 255.0;
  const std::string path = tmp_path("img.png");
  write_png(path, img);
  const Image back = read_png(path);
  REQUIRE(back.width == 7);
  REQUIRE(back.height == 5);
  REQUIRE(back.channels == 3);
  for (size_t i = 0; i < img.data.size(); ++i)
    CHECK(back.data[i] == doctest::Approx(img.data[i]).epsilon(1e-12));

  Image gray(4, 4, 1, 0.25);
  write_png(tmp_path("gray.png"), gray);
  const Image gback = read_png(tmp_path("gray.png"));
  CHECK(gback.channels == 1);
  CHECK(gback.at(2, 2, 0) == doctest::Approx(64.0 / 255.0));
}

TEST_CASE("raw frame dump readable as container") {
  Image img(3, 2, 1);
  img.at(1, 0, 0) = 0.5;
  write_raw_dump(tmp_path("dump.bin"), {{"plane", &img}});
  const Container c = read_container(tmp_path("dump.bin"));
  CHECK(c.get("plane").shape == std::vector<int64_t>{2, 3, 1});
  CHECK(c.get("plane").data[1] == 0.5f);
}
