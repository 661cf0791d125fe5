#include "mdtk/geometry.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mdtk {

namespace {

void check_frame_shape(const Tensor& t, const char* what) {
    if (!(t.ndim() == 2 && t.dim(0) == kNumLandmarks && t.dim(1) == 3))
        throw std::invalid_argument(std::string(what) + ": expected [68,3], got " +
                                    t.shape_str());
}

void check_seq_shape(const Tensor& t, const char* what) {
    if (!(t.ndim() == 3 && t.dim(1) == kNumLandmarks && t.dim(2) == 3 && t.dim(0) >= 1))
        throw std::invalid_argument(std::string(what) + ": expected [S,68,3], got " +
                                    t.shape_str());
}

}  // namespace

SimilarityTransform SimilarityTransform::inverse() const {
    if (scale <= 0.0) throw std::invalid_argument("SimilarityTransform: scale <= 0");
    SimilarityTransform inv;
    inv.scale = 1.0 / scale;
    inv.rotation = rotation.transpose();
    inv.translation = -(inv.scale) * (inv.rotation * translation);
    return inv;
}

bool SimilarityTransform::is_valid(double tol) const {
    if (!(scale > 0.0)) return false;
    Eigen::Matrix3d err = rotation.transpose() * rotation - Eigen::Matrix3d::Identity();
    if (err.cwiseAbs().maxCoeff() > tol) return false;
    return std::abs(rotation.determinant() - 1.0) <= tol;
}

const std::vector<int>& lip_indices() {
    static const std::vector<int> idx = [] {
        std::vector<int> v;
        for (int i = 48; i < 68; ++i) v.push_back(i);
        return v;
    }();
    return idx;
}

const std::vector<int>& nonlip_indices() {
    static const std::vector<int> idx = [] {
        std::vector<int> v;
        for (int i = 0; i < 48; ++i) v.push_back(i);
        return v;
    }();
    return idx;
}

SimilarityTransform estimate_similarity_transform(const Tensor& src,
                                                  const Tensor& dst) {
    if (src.ndim() != 2 || src.dim(1) != 3 || !src.same_shape(dst))
        throw std::invalid_argument("estimate_similarity_transform: need matching [K,3]");
    const int K = src.dim(0);
    if (K < 3) throw std::invalid_argument("estimate_similarity_transform: K < 3");

    Eigen::MatrixXd X(3, K), Y(3, K);
    for (int i = 0; i < K; ++i)
        for (int j = 0; j < 3; ++j) {
            X(j, i) = src.at(i, j);
            Y(j, i) = dst.at(i, j);
        }
    Eigen::Vector3d mx = X.rowwise().mean(), my = Y.rowwise().mean();
    X.colwise() -= mx;
    Y.colwise() -= my;

    double var_x = X.squaredNorm() / K;
    Eigen::Matrix3d cov = Y * X.transpose() / K;

    Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov,
                                          Eigen::ComputeFullU | Eigen::ComputeFullV);
    // rank of the centered source must be >= 2 (not collinear)
    Eigen::JacobiSVD<Eigen::MatrixXd> src_svd(X);
    if (src_svd.singularValues()(1) < 1e-9 * (src_svd.singularValues()(0) + 1e-300))
        throw std::invalid_argument(
            "estimate_similarity_transform: degenerate (collinear) source points");

    Eigen::Matrix3d U = svd.matrixU(), V = svd.matrixV();
    Eigen::Vector3d d = Eigen::Vector3d::Ones();
    if (U.determinant() * V.determinant() < 0.0) d(2) = -1.0;

    SimilarityTransform tf;
    tf.rotation = U * d.asDiagonal() * V.transpose();
    tf.scale = svd.singularValues().dot(d) / var_x;
    if (!(tf.scale > 0.0))
        throw std::invalid_argument("estimate_similarity_transform: nonpositive scale");
    tf.translation = my - tf.scale * (tf.rotation * mx);
    return tf;
}

Tensor apply_transform(const Tensor& seq, const SimilarityTransform& tf) {
    check_seq_shape(seq, "apply_transform");
    return apply_transform(
        seq, std::vector<SimilarityTransform>(static_cast<std::size_t>(seq.dim(0)), tf));
}

Tensor apply_transform(const Tensor& seq,
                       const std::vector<SimilarityTransform>& per_frame) {
    check_seq_shape(seq, "apply_transform");
    const int S = seq.dim(0);
    if (static_cast<int>(per_frame.size()) != S)
        throw std::invalid_argument("apply_transform: need one transform per frame");
    Tensor out(seq.shape());
    for (int s = 0; s < S; ++s) {
        const SimilarityTransform& tf = per_frame[static_cast<std::size_t>(s)];
        for (int i = 0; i < kNumLandmarks; ++i) {
            Eigen::Vector3d p(seq.at(s, i, 0), seq.at(s, i, 1), seq.at(s, i, 2));
            Eigen::Vector3d q = tf.apply(p);
            out.at(s, i, 0) = q(0);
            out.at(s, i, 1) = q(1);
            out.at(s, i, 2) = q(2);
        }
    }
    return out;
}

Tensor frontalize(const Tensor& seq, const std::vector<SimilarityTransform>& pose) {
    std::vector<SimilarityTransform> inv;
    inv.reserve(pose.size());
    for (const auto& p : pose) inv.push_back(p.inverse());
    return apply_transform(seq, inv);
}

Tensor align_motion_to_reference(const Tensor& frontal, const Tensor& reference) {
    check_seq_shape(frontal, "align_motion_to_reference");
    check_seq_shape(reference, "align_motion_to_reference");
    const int S = frontal.dim(0);
    if (reference.dim(0) != S)
        throw std::invalid_argument("align_motion_to_reference: frame count mismatch");

    const auto& rigid = nonlip_indices();
    const int K = static_cast<int>(rigid.size());
    std::vector<SimilarityTransform> tfs;
    tfs.reserve(static_cast<std::size_t>(S));
    for (int s = 0; s < S; ++s) {
        Tensor src({K, 3}), dst({K, 3});
        for (int k = 0; k < K; ++k)
            for (int j = 0; j < 3; ++j) {
                src.at(k, j) = frontal.at(s, rigid[static_cast<std::size_t>(k)], j);
                dst.at(k, j) = reference.at(s, rigid[static_cast<std::size_t>(k)], j);
            }
        tfs.push_back(estimate_similarity_transform(src, dst));
    }
    return apply_transform(frontal, tfs);
}

Tensor add_residual(const Tensor& l_id, const Tensor& delta) {
    check_frame_shape(l_id, "add_residual");
    check_seq_shape(delta, "add_residual");
    Tensor out(delta.shape());
    const int S = delta.dim(0);
    for (int s = 0; s < S; ++s)
        for (int i = 0; i < kNumLandmarks; ++i)
            for (int j = 0; j < 3; ++j)
                out.at(s, i, j) = l_id.at(i, j) + delta.at(s, i, j);
    return out;
}

namespace {

// Contour groups of the standard 68-point annotation.
struct Contour {
    int first, last;
    bool closed;
};
constexpr Contour kContours[] = {
    {0, 16, false},   // jaw
    {17, 21, false},  // right brow
    {22, 26, false},  // left brow
    {27, 30, false},  // nose bridge
    {31, 35, false},  // nostrils
    {36, 41, true},   // right eye
    {42, 47, true},   // left eye
    {48, 59, true},   // outer lip
    {60, 67, true},   // inner lip
};

void set_px(Tensor& clip, int s, int y, int x, int H, int W) {
    if (y >= 0 && y < H && x >= 0 && x < W) clip.at(s, 0, y, x) = 1.0;
}

void draw_disc(Tensor& clip, int s, int cy, int cx, int r, int H, int W) {
    for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx)
            if (dy * dy + dx * dx <= r * r) set_px(clip, s, cy + dy, cx + dx, H, W);
}

void draw_line(Tensor& clip, int s, int y0, int x0, int y1, int x1, int H, int W) {
    int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
        set_px(clip, s, y0, x0, H, W);
        if (x0 == x1 && y0 == y1) break;
        int e2 = 2 * err;
        if (e2 >= dy) {
            err += dy;
            x0 += sx;
        }
        if (e2 <= dx) {
            err += dx;
            y0 += sy;
        }
    }
}

}  // namespace

Tensor rasterize_motion(const Tensor& seq, int H, int W) {
    check_seq_shape(seq, "rasterize_motion");
    if (H < 8 || W < 8) throw std::invalid_argument("rasterize_motion: H,W must be >= 8");
    const int S = seq.dim(0);
    const int radius = std::max(1, H / 32);
    Tensor clip({S, 1, H, W});

    auto to_px = [&](double v, int extent) {
        return static_cast<int>(std::floor((v + kRasterExtent) / (2.0 * kRasterExtent) *
                                           extent));
    };

    for (int s = 0; s < S; ++s) {
        int px[kNumLandmarks], py[kNumLandmarks];
        bool in_box[kNumLandmarks];
        for (int i = 0; i < kNumLandmarks; ++i) {
            double x = seq.at(s, i, 0), y = seq.at(s, i, 1);
            px[i] = to_px(x, W);
            py[i] = to_px(y, H);
            in_box[i] = std::abs(x) <= kRasterExtent && std::abs(y) <= kRasterExtent;
        }
        for (int i = 0; i < kNumLandmarks; ++i)
            if (in_box[i]) draw_disc(clip, s, py[i], px[i], radius, H, W);
        for (const auto& c : kContours) {
            for (int i = c.first; i < c.last; ++i)
                if (in_box[i] && in_box[i + 1])
                    draw_line(clip, s, py[i], px[i], py[i + 1], px[i + 1], H, W);
            if (c.closed && in_box[c.last] && in_box[c.first])
                draw_line(clip, s, py[c.last], px[c.last], py[c.first], px[c.first], H, W);
        }
    }
    return clip;
}

Eigen::Vector3d landmark_point(const Tensor& t, int frame, int idx) {
    if (t.ndim() == 2) return {t.at(idx, 0), t.at(idx, 1), t.at(idx, 2)};
    return {t.at(frame, idx, 0), t.at(frame, idx, 1), t.at(frame, idx, 2)};
}

Tensor sequence_frame(const Tensor& seq, int i) {
    check_seq_shape(seq, "sequence_frame");
    Tensor f({kNumLandmarks, 3});
    for (int p = 0; p < kNumLandmarks; ++p)
        for (int j = 0; j < 3; ++j) f.at(p, j) = seq.at(i, p, j);
    return f;
}

}  // namespace mdtk
