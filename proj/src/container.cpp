#include "avatar/container.hpp"

#include <cstring>
#include <fstream>

namespace avatar {

namespace {
constexpr char kMagic[8] = {'A', 'V', 'C', 'O', 'N', 'T', '1', '\n'};
}

void Container::put(const std::string& name, const MatX& m) {
  ContainerArray a;
  a.shape = {m.rows(), m.cols()};
  a.data.resize(static_cast<size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      a.data[static_cast<size_t>(r * m.cols() + c)] = static_cast<float>(m(r, c));
  arrays[name] = std::move(a);
}

void Container::put(const std::string& name, const VecX& v) {
  ContainerArray a;
  a.shape = {v.size()};
  a.data.resize(static_cast<size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) a.data[static_cast<size_t>(i)] = static_cast<float>(v[i]);
  arrays[name] = std::move(a);
}

void Container::put(const std::string& name, const FaceMat& f) {
  ContainerArray a;
  a.shape = {f.rows(), f.cols()};
  a.data.resize(static_cast<size_t>(f.size()));
  for (Eigen::Index r = 0; r < f.rows(); ++r)
    for (Eigen::Index c = 0; c < f.cols(); ++c)
      a.data[static_cast<size_t>(r * f.cols() + c)] = static_cast<float>(f(r, c));
  arrays[name] = std::move(a);
}

void Container::put_ints(const std::string& name, const std::vector<int>& v) {
  ContainerArray a;
  a.shape = {static_cast<int64_t>(v.size())};
  a.data.resize(v.size());
  for (size_t i = 0; i < v.size(); ++i) a.data[i] = static_cast<float>(v[i]);
  arrays[name] = std::move(a);
}

void Container::put_raw(const std::string& name, std::vector<int64_t> shape, const double* data) {
  ContainerArray a;
  a.shape = std::move(shape);
  a.data.resize(static_cast<size_t>(a.size()));
  for (size_t i = 0; i < a.data.size(); ++i) a.data[i] = static_cast<float>(data[i]);
  arrays[name] = std::move(a);
}

const ContainerArray& Container::get(const std::string& name) const {
  auto it = arrays.find(name);
  if (it == arrays.end()) throw std::invalid_argument("container: missing array '" + name + "'");
  return it->second;
}

MatX Container::get_matrix(const std::string& name) const {
  const ContainerArray& a = get(name);
  if (a.shape.size() != 2) throw std::invalid_argument("container: '" + name + "' is not 2-d");
  MatX m(a.shape[0], a.shape[1]);
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      m(r, c) = a.data[static_cast<size_t>(r * m.cols() + c)];
  return m;
}

VecX Container::get_vector(const std::string& name) const {
  const ContainerArray& a = get(name);
  if (a.shape.size() != 1) throw std::invalid_argument("container: '" + name + "' is not 1-d");
  VecX v(a.shape[0]);
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = a.data[static_cast<size_t>(i)];
  return v;
}

FaceMat Container::get_faces(const std::string& name) const {
  const ContainerArray& a = get(name);
  if (a.shape.size() != 2 || a.shape[1] != 3)
    throw std::invalid_argument("container: '" + name + "' is not n x 3");
  FaceMat f(a.shape[0], 3);
  for (Eigen::Index r = 0; r < f.rows(); ++r)
    for (Eigen::Index c = 0; c < 3; ++c) {
      const float x = a.data[static_cast<size_t>(r * 3 + c)];
      f(r, c) = static_cast<int>(x);
      if (static_cast<float>(f(r, c)) != x)
        throw std::invalid_argument("container: '" + name + "' holds non-integral values");
    }
  return f;
}

std::vector<int> Container::get_ints(const std::string& name) const {
  const ContainerArray& a = get(name);
  std::vector<int> v(a.data.size());
  for (size_t i = 0; i < v.size(); ++i) {
    v[i] = static_cast<int>(a.data[i]);
    if (static_cast<float>(v[i]) != a.data[i])
      throw std::invalid_argument("container: '" + name + "' holds non-integral values");
  }
  return v;
}

void write_container(const std::string& path, const Container& c) {
  nlohmann::json header;
  header["meta"] = c.meta;
  nlohmann::json arrs = nlohmann::json::array();
  int64_t offset = 0;
  for (const auto& [name, a] : c.arrays) {
    nlohmann::json e;
    e["name"] = name;
    e["shape"] = a.shape;
    e["dtype"] = "f32";
    e["offset"] = offset;
    offset += a.size() * static_cast<int64_t>(sizeof(float));
    arrs.push_back(e);
  }
  header["arrays"] = arrs;
  const std::string htext = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::invalid_argument("container: cannot open '" + path + "' for writing");
  out.write(kMagic, 8);
  const uint64_t hlen = htext.size();
  char lenbuf[8];
  for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<char>((hlen >> (8 * i)) & 0xff);
  out.write(lenbuf, 8);
  out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  for (const auto& [name, a] : c.arrays) {
    (void)name;
    // Values are already IEEE-754 f32; write little-endian (host is LE).
    out.write(reinterpret_cast<const char*>(a.data.data()),
              static_cast<std::streamsize>(a.data.size() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("container: write failed for '" + path + "'");
}

Container read_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("container: cannot open '" + path + "'");
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw std::invalid_argument("container: bad magic in '" + path + "'");
  char lenbuf[8];
  in.read(lenbuf, 8);
  if (!in) throw std::invalid_argument("container: truncated header in '" + path + "'");
  uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i) hlen |= static_cast<uint64_t>(static_cast<unsigned char>(lenbuf[i])) << (8 * i);
  if (hlen > (1ull << 30)) throw std::invalid_argument("container: implausible header size");
  std::string htext(hlen, '\0');
  in.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw std::invalid_argument("container: truncated header in '" + path + "'");

  nlohmann::json header = nlohmann::json::parse(htext, nullptr, false);
  if (header.is_discarded()) throw std::invalid_argument("container: invalid header JSON");

  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const int64_t blob_bytes = static_cast<int64_t>(blob.size());

  Container c;
  c.meta = header.value("meta", nlohmann::json::object());
  for (const auto& e : header.at("arrays")) {
    const std::string name = e.at("name").get<std::string>();
    if (e.at("dtype").get<std::string>() != "f32")
      throw std::invalid_argument("container: unsupported dtype for '" + name + "'");
    ContainerArray a;
    a.shape = e.at("shape").get<std::vector<int64_t>>();
    const int64_t offset = e.at("offset").get<int64_t>();
    const int64_t bytes = a.size() * static_cast<int64_t>(sizeof(float));
    if (offset < 0 || offset + bytes > blob_bytes)
      throw std::invalid_argument("container: array '" + name + "' out of blob bounds");
    a.data.resize(static_cast<size_t>(a.size()));
    std::memcpy(a.data.data(), blob.data() + offset, static_cast<size_t>(bytes));
    c.arrays[name] = std::move(a);
  }
  return c;
}

}  // namespace avatar
