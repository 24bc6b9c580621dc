#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "avatar/geometry.hpp"

namespace avatar {

// Self-contained avatar snapshot: the model, shared parameters and every
// frame's parameters, stored in the float32 container format.
struct Checkpoint {
  ParametricModel model;
  AvatarParams avatar;
  std::vector<FrameParams> frames;
  nlohmann::json meta;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace avatar
