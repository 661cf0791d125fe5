#pragma once

#include <string>

#include "mdtk/tensor.hpp"

namespace mdtk {

// Writes one frame of a clip tensor ([C,H,W] or frame `s` of [S,C,H,W],
// values in [0,1], C = 1 or 3) as an 8-bit PNG.
void write_png(const std::string& path, const Tensor& clip, int frame = -1);

// Writes every frame of an [S,C,H,W] clip as dir/frame_%04d.png.
void write_clip_frames(const std::string& dir, const Tensor& clip);

}  // namespace mdtk
