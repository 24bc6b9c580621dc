#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "avatar/geometry.hpp"
#include "avatar/image.hpp"
#include "avatar/losses.hpp"

namespace avatar {

struct FrameData {
  Image rgb;
  MaskSet masks;
  FrameParams params;  // initialization (ground truth for synthetic scenes)
};

struct Dataset {
  std::vector<FrameData> frames;
  nlohmann::json spec;  // the scene spec this dataset was generated from

  int width() const { return frames.empty() ? 0 : frames[0].rgb.width; }
  int height() const { return frames.empty() ? 0 : frames[0].rgb.height; }
};

// Directory layout: frame_XXXX.png, mask_s/sb/se_XXXX.png, params.json.
void write_dataset(const std::string& dir, const Dataset& ds);
Dataset read_dataset(const std::string& dir);

}  // namespace avatar
