#pragma once

#include <Eigen/Dense>
#include <vector>

#include "mdtk/tensor.hpp"

namespace mdtk {

// 68-point 3D landmark manipulation: lip/non-lip split, similarity
// (Procrustes) alignment, frontalization, residual composition and
// rasterization to binary motion clips.
//
// LandmarkFrame    = Tensor [68,3]
// LandmarkSequence = Tensor [S,68,3]
// Frontal space: centroid at the origin, inter-ocular distance 1,
// image convention (y grows downward).

constexpr int kNumLandmarks = 68;

struct SimilarityTransform {
    double scale = 1.0;
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();

    Eigen::Vector3d apply(const Eigen::Vector3d& p) const {
        return scale * (rotation * p) + translation;
    }
    SimilarityTransform inverse() const;
    bool is_valid(double tol = 1e-9) const;
};

const std::vector<int>& lip_indices();     // mouth points 48..67
const std::vector<int>& nonlip_indices();  // 0..47

// Least-squares similarity transform src -> dst (Umeyama). src and dst
// are [K,3], K >= 3. Throws on degenerate (collinear) src.
SimilarityTransform estimate_similarity_transform(const Tensor& src,
                                                  const Tensor& dst);

Tensor apply_transform(const Tensor& seq, const SimilarityTransform& tf);
Tensor apply_transform(const Tensor& seq,
                       const std::vector<SimilarityTransform>& per_frame);

// Remove known head pose: apply_transform with each pose inverted.
Tensor frontalize(const Tensor& seq,
                  const std::vector<SimilarityTransform>& pose);

// Re-pose a frontal sequence onto a reference: per frame, estimate the
// similarity from the frontal non-lip subset to the reference non-lip
// subset and apply it to all 68 points. Lip articulation never enters
// the pose estimate.
Tensor align_motion_to_reference(const Tensor& frontal, const Tensor& reference);

// frame_i = l_id + delta_i
Tensor add_residual(const Tensor& l_id, const Tensor& delta);

// Rasterize landmarks to a binary S x 1 x H x W clip: one filled disc per
// point plus polylines along the standard 68-point contour groups.
// Landmark (x,y) in [-kRasterExtent, kRasterExtent] maps onto [0,W) x [0,H);
// points outside are clipped. Disc radius is 1 px at 32x32 and scales
// proportionally.
constexpr double kRasterExtent = 1.6;
Tensor rasterize_motion(const Tensor& seq, int H, int W);

// Helpers shared with the corpus generator.
Eigen::Vector3d landmark_point(const Tensor& frame_or_seq, int frame, int idx);
Tensor sequence_frame(const Tensor& seq, int i);  // [68,3] copy

}  // namespace mdtk
