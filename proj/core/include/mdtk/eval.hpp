#pragma once

#include <vector>

#include "mdtk/io.hpp"
#include "mdtk/tensor.hpp"

namespace mdtk {

// Desk-scale metrics: landmark mean distance over lip points, PSNR,
// mouth-opening extraction and sync correlation.

// Mean Euclidean distance over lip points (48..67), averaged over frames,
// in normalized (inter-ocular) units. full_face extends the average to
// all 68 points.
double lmd(const Tensor& pred, const Tensor& gt, bool full_face = false);

// 10*log10(1/MSE) for clips in [0,1]; exact equality reported as the
// 99 dB cap.
constexpr double kPsnrCap = 99.0;
double psnr(const Tensor& a, const Tensor& b);

// Per-frame vertical gap between the inner-lip top and bottom midpoints
// (points 62 and 66).
std::vector<double> mouth_open_signal(const Tensor& seq);

// Pearson correlation; throws on zero-variance input.
double sync_corr(const std::vector<double>& s1, const std::vector<double>& s2);

// Mean absolute inter-frame pixel difference.
double temporal_consistency(const Tensor& clip);

// Raster mouth-box heuristic: mean darkness (1 - channel mean) over the
// inclusive pixel box, per frame. Used to read the lip opening back out
// of rendered video without landmarks; Pearson correlation against the
// true amplitude is invariant to the constant skin/lip offset.
std::vector<double> mouth_box_darkness(const Tensor& clip, int y0, int y1, int x0,
                                       int x1);

// Pixel box around the lip landmarks of a posed sequence, with margin.
struct PixelBox {
    int y0, y1, x0, x1;
};
PixelBox lip_pixel_box(const Tensor& posed_seq, int H, int W, int margin = 1);

// Downsample a 2S-rate audio signal to video rate by taking even samples.
std::vector<double> to_video_rate(const std::vector<double>& audio_rate);

// Aggregate report: per-clip values plus mean/std, as a key:value doc.
KvDoc metric_report(const std::vector<std::pair<std::string, std::vector<double>>>& metrics);

}  // namespace mdtk
