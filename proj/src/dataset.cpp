#include "avatar/dataset.hpp"

#include <filesystem>
#include <fstream>

namespace avatar {

namespace {
std::string frame_name(const char* prefix, int i) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%04d.png", prefix, i);
  return buf;
}
}  // namespace

void write_dataset(const std::string& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json params;
  params["spec"] = ds.spec;
  params["n_frames"] = ds.frames.size();
  nlohmann::json frames = nlohmann::json::array();
  for (size_t i = 0; i < ds.frames.size(); ++i) {
    const FrameData& f = ds.frames[i];
    write_png(dir + "/" + frame_name("frame", static_cast<int>(i)), f.rgb);
    write_png(dir + "/" + frame_name("mask_s", static_cast<int>(i)), f.masks.S);
    write_png(dir + "/" + frame_name("mask_sb", static_cast<int>(i)), f.masks.S_b);
    write_png(dir + "/" + frame_name("mask_se", static_cast<int>(i)), f.masks.S_e);
    nlohmann::json e;
    e["theta"] = std::vector<double>(f.params.theta.data(), f.params.theta.data() + f.params.theta.size());
    e["psi"] = std::vector<double>(f.params.psi.data(), f.params.psi.data() + f.params.psi.size());
    e["camera"] = {{"scale", f.params.camera.scale},
                   {"tx", f.params.camera.translation[0]},
                   {"ty", f.params.camera.translation[1]},
                   {"width", f.params.camera.width},
                   {"height", f.params.camera.height}};
    frames.push_back(e);
  }
  params["frames"] = frames;
  std::ofstream out(dir + "/params.json");
  if (!out) throw std::invalid_argument("write_dataset: cannot write params.json in " + dir);
  out << params.dump(2) << "\n";
}

Dataset read_dataset(const std::string& dir) {
  std::ifstream in(dir + "/params.json");
  if (!in) throw std::invalid_argument("read_dataset: missing params.json in " + dir);
  nlohmann::json params = nlohmann::json::parse(in, nullptr, false);
  if (params.is_discarded()) throw std::invalid_argument("read_dataset: invalid params.json");

  Dataset ds;
  ds.spec = params.value("spec", nlohmann::json::object());
  const int n = params.at("n_frames").get<int>();
  for (int i = 0; i < n; ++i) {
    FrameData f;
    f.rgb = read_png(dir + "/" + frame_name("frame", i));
    f.masks.S = read_png(dir + "/" + frame_name("mask_s", i));
    f.masks.S_b = read_png(dir + "/" + frame_name("mask_sb", i));
    f.masks.S_e = read_png(dir + "/" + frame_name("mask_se", i));
    const nlohmann::json& e = params.at("frames").at(i);
    const auto theta = e.at("theta").get<std::vector<double>>();
    const auto psi = e.at("psi").get<std::vector<double>>();
    f.params.theta = Eigen::Map<const VecX>(theta.data(), static_cast<Eigen::Index>(theta.size()));
    f.params.psi = Eigen::Map<const VecX>(psi.data(), static_cast<Eigen::Index>(psi.size()));
    f.params.camera.scale = e.at("camera").at("scale").get<double>();
    f.params.camera.translation[0] = e.at("camera").at("tx").get<double>();
    f.params.camera.translation[1] = e.at("camera").at("ty").get<double>();
    f.params.camera.width = e.at("camera").at("width").get<int>();
    f.params.camera.height = e.at("camera").at("height").get<int>();
    ds.frames.push_back(std::move(f));
  }
  return ds;
}

}  // namespace avatar
