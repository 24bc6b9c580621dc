#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "avatar/types.hpp"

namespace avatar {

// On-disk tensor container: magic + JSON header (array names, shapes,
// dtype, byte offsets) followed by a single little-endian float32 blob.
// Used for model files, checkpoints and raw frame dumps.
struct ContainerArray {
  std::vector<int64_t> shape;
  std::vector<float> data;

  int64_t size() const {
    int64_t n = 1;
    for (int64_t s : shape) n *= s;
    return n;
  }
};

struct Container {
  nlohmann::json meta;
  std::map<std::string, ContainerArray> arrays;

  bool has(const std::string& name) const { return arrays.count(name) > 0; }

  void put(const std::string& name, const MatX& m);
  void put(const std::string& name, const VecX& v);
  void put(const std::string& name, const FaceMat& f);
  void put_ints(const std::string& name, const std::vector<int>& v);
  void put_raw(const std::string& name, std::vector<int64_t> shape, const double* data);

  MatX get_matrix(const std::string& name) const;  // requires 2-d shape
  VecX get_vector(const std::string& name) const;  // requires 1-d shape
  FaceMat get_faces(const std::string& name) const;
  std::vector<int> get_ints(const std::string& name) const;
  const ContainerArray& get(const std::string& name) const;
};

void write_container(const std::string& path, const Container& c);
Container read_container(const std::string& path);

}  // namespace avatar
