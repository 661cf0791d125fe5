#include "mdtk/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>

#include "mdtk/io.hpp"
#include "mdtk/mtov.hpp"

namespace mdtk {

namespace {

constexpr double kPi = 3.14159265358979323846;

void set_point(Tensor& t, int i, double x, double y, double z) {
    t.at(i, 0) = x;
    t.at(i, 1) = y;
    t.at(i, 2) = z;
}

// Frontal template in face units, image convention (y grows downward,
// chin below eyes). Built mirror-symmetric by construction, then
// normalized to centroid 0 / inter-ocular distance 1.
Tensor build_template(double fw, double jd, double es, double eye_h, double lip_h) {
    Tensor t({kNumLandmarks, 3});
    // jaw 0..16, ellipse from left temple through chin to right temple
    for (int i = 0; i <= 16; ++i) {
        double a = kPi * i / 16.0;
        set_point(t, i, -fw * std::cos(a), jd * std::sin(a), 0.0);
    }
    // brows 17..26 at y ~ -0.55
    for (int k = 0; k < 5; ++k) {
        double x = (0.55 - 0.1 * k) * fw;
        double y = -0.55 - 0.05 * std::sin(kPi * k / 4.0);
        set_point(t, 17 + k, -x, y, 0.0);
        set_point(t, 26 - k, x, y, 0.0);
    }
    // nose bridge 27..30 and nostril line 31..35
    for (int k = 0; k < 4; ++k) set_point(t, 27 + k, 0.0, -0.45 + 0.5 * k / 3.0, 0.0);
    for (int k = 0; k < 5; ++k) set_point(t, 31 + k, (-0.16 + 0.08 * k) * fw, 0.15, 0.0);
    // eyes: right of subject (image left) 36..41, mirror 42..47
    double c = es / 2.0, ew = 0.12, eh = eye_h, ey = -0.3;
    set_point(t, 36, -c - ew, ey, 0.0);
    set_point(t, 37, -c - ew / 2, ey - eh, 0.0);
    set_point(t, 38, -c + ew / 2, ey - eh, 0.0);
    set_point(t, 39, -c + ew, ey, 0.0);
    set_point(t, 40, -c + ew / 2, ey + eh, 0.0);
    set_point(t, 41, -c - ew / 2, ey + eh, 0.0);
    set_point(t, 42, c - ew, ey, 0.0);
    set_point(t, 43, c - ew / 2, ey - eh, 0.0);
    set_point(t, 44, c + ew / 2, ey - eh, 0.0);
    set_point(t, 45, c + ew, ey, 0.0);
    set_point(t, 46, c + ew / 2, ey + eh, 0.0);
    set_point(t, 47, c - ew / 2, ey + eh, 0.0);
    // mouth at y = my, closed: inner lip flat on the mouth line
    double my = 0.55, mw = 0.25 * fw, lh = lip_h;
    set_point(t, 48, -mw, my, 0.0);
    set_point(t, 49, -0.6 * mw, my - lh, 0.0);
    set_point(t, 50, -0.25 * mw, my - 1.2 * lh, 0.0);
    set_point(t, 51, 0.0, my - 1.1 * lh, 0.0);
    set_point(t, 52, 0.25 * mw, my - 1.2 * lh, 0.0);
    set_point(t, 53, 0.6 * mw, my - lh, 0.0);
    set_point(t, 54, mw, my, 0.0);
    set_point(t, 55, 0.6 * mw, my + lh, 0.0);
    set_point(t, 56, 0.25 * mw, my + 1.2 * lh, 0.0);
    set_point(t, 57, 0.0, my + 1.3 * lh, 0.0);
    set_point(t, 58, -0.25 * mw, my + 1.2 * lh, 0.0);
    set_point(t, 59, -0.6 * mw, my + lh, 0.0);
    set_point(t, 60, -0.8 * mw, my, 0.0);
    set_point(t, 61, -0.3 * mw, my, 0.0);
    set_point(t, 62, 0.0, my, 0.0);
    set_point(t, 63, 0.3 * mw, my, 0.0);
    set_point(t, 64, 0.8 * mw, my, 0.0);
    set_point(t, 65, 0.3 * mw, my, 0.0);
    set_point(t, 66, 0.0, my, 0.0);
    set_point(t, 67, -0.3 * mw, my, 0.0);
    // depth: shallow ellipsoid bowl, nose tip toward the camera
    for (int i = 0; i < kNumLandmarks; ++i) {
        double x = t.at(i, 0) / fw, y = t.at(i, 1) / jd;
        t.at(i, 2) = 0.3 * (x * x + y * y);
    }
    t.at(30, 2) -= 0.2;  // nose tip
    for (int k = 0; k < 5; ++k) t.at(31 + k, 2) -= 0.1;

    // normalize: inter-ocular distance (between eye centers) 1, centroid 0
    Eigen::Vector3d re = Eigen::Vector3d::Zero(), le = Eigen::Vector3d::Zero();
    for (int i = 36; i <= 41; ++i) re += landmark_point(t, 0, i);
    for (int i = 42; i <= 47; ++i) le += landmark_point(t, 0, i);
    double iod = (le - re).norm() / 6.0;
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] /= iod;
    double cx = 0, cy = 0, cz = 0;
    for (int i = 0; i < kNumLandmarks; ++i) {
        cx += t.at(i, 0);
        cy += t.at(i, 1);
        cz += t.at(i, 2);
    }
    for (int i = 0; i < kNumLandmarks; ++i) {
        t.at(i, 0) -= cx / kNumLandmarks;
        t.at(i, 1) -= cy / kNumLandmarks;
        t.at(i, 2) -= cz / kNumLandmarks;
    }
    // x-centering is exact by symmetry; pin it against rounding
    for (int i : {27, 28, 29, 30, 33, 51, 57, 62, 66, 8}) t.at(i, 0) = 0.0;
    return t;
}

}  // namespace

const std::vector<int>& lower_lip_indices() {
    static const std::vector<int> idx = {55, 56, 57, 58, 59, 65, 66, 67};
    return idx;
}

IdentitySpec gen_identity(std::uint64_t seed) {
    Rng rng(Rng::mix(seed, 0x1dULL));
    IdentitySpec id;
    id.face_width = 1.2 + 0.15 * (2.0 * rng.uniform() - 1.0);
    id.jaw_depth = 1.5 + 0.2 * (2.0 * rng.uniform() - 1.0);
    id.eye_spacing = 0.6 + 0.08 * (2.0 * rng.uniform() - 1.0);
    double eye_h = 0.05 + 0.015 * rng.uniform();
    double lip_h = 0.06 + 0.02 * rng.uniform();
    id.template_landmarks =
        build_template(id.face_width, id.jaw_depth, id.eye_spacing, eye_h, lip_h);
    for (int c = 0; c < 3; ++c) {
        id.skin[c] = std::clamp(id.skin[c] + 0.08 * (2.0 * rng.uniform() - 1.0), 0.0, 1.0);
        id.lip[c] = std::clamp(id.lip[c] + 0.08 * (2.0 * rng.uniform() - 1.0), 0.0, 1.0);
    }
    return id;
}

PhonemeStream gen_phoneme_stream(std::uint64_t seed, int S, int d) {
    if (S < 2 || d < 1) throw std::invalid_argument("gen_phoneme_stream: S >= 2, d >= 1");
    Rng rng(Rng::mix(seed, 0xa0d10ULL));
    const int n = 2 * S;
    // Band-limited envelope: the fastest component has a period of ~4.5
    // video frames, so the opening survives frame-pair pooling intact.
    double f1 = rng.uniform(1.0, 2.0), f2 = rng.uniform(2.0, 3.5);
    double p1 = rng.uniform(0.0, 2.0 * kPi), p2 = rng.uniform(0.0, 2.0 * kPi);
    PhonemeStream ps;
    ps.amplitudes.resize(static_cast<std::size_t>(n));
    for (int t = 0; t < n; ++t) {
        double u = static_cast<double>(t) / n;
        double v = 0.5 + 0.35 * std::sin(2.0 * kPi * f1 * u + p1) +
                   0.25 * std::sin(2.0 * kPi * f2 * u + p2);
        v *= std::min(1.0, t / 4.0);  // first frame closed
        ps.amplitudes[static_cast<std::size_t>(t)] = std::clamp(v, 0.0, 1.0);
    }
    ps.amplitudes[0] = 0.0;
    ps.features = Tensor({n, d});
    std::vector<double> freq(static_cast<std::size_t>(d)), phase(freq.size());
    for (int c = 1; c < d; ++c) {
        freq[static_cast<std::size_t>(c)] = rng.uniform(0.5, 8.0);
        phase[static_cast<std::size_t>(c)] = rng.uniform(0.0, 2.0 * kPi);
    }
    for (int t = 0; t < n; ++t) {
        ps.features.at(t, 0) = ps.amplitudes[static_cast<std::size_t>(t)];
        for (int c = 1; c < d; ++c)
            ps.features.at(t, c) =
                0.3 * std::sin(2.0 * kPi * freq[static_cast<std::size_t>(c)] * t / n +
                               phase[static_cast<std::size_t>(c)]);
    }
    return ps;
}

std::vector<SimilarityTransform> gen_pose_trajectory(std::uint64_t seed, int S) {
    Rng rng(Rng::mix(seed, 0x905eULL));
    double yaw_amp = rng.uniform(5.0, 15.0) * kPi / 180.0;
    double pitch_amp = rng.uniform(3.0, 10.0) * kPi / 180.0;
    double yaw_phase = rng.uniform(0.0, 2.0 * kPi);
    double pitch_phase = rng.uniform(0.0, 2.0 * kPi);
    double scale_amp = rng.uniform(0.0, 0.05);
    double tx = rng.uniform(-0.05, 0.05), ty = rng.uniform(-0.05, 0.05);
    std::vector<SimilarityTransform> out;
    out.reserve(static_cast<std::size_t>(S));
    for (int s = 0; s < S; ++s) {
        double u = static_cast<double>(s) / S;
        double yaw = yaw_amp * std::sin(2.0 * kPi * u + yaw_phase);
        double pitch = pitch_amp * std::sin(2.0 * kPi * u + pitch_phase);
        SimilarityTransform tf;
        Eigen::Matrix3d ry, rx;
        ry = Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitY());
        rx = Eigen::AngleAxisd(pitch, Eigen::Vector3d::UnitX());
        tf.rotation = ry * rx;
        tf.scale = 1.0 + scale_amp * std::sin(2.0 * kPi * u);
        tf.translation = Eigen::Vector3d(tx * std::sin(2.0 * kPi * u),
                                         ty * std::cos(2.0 * kPi * u), 0.0);
        out.push_back(tf);
    }
    return out;
}

LandmarkClip gen_landmark_clip(const IdentitySpec& identity, const PhonemeStream& stream,
                               const std::vector<SimilarityTransform>& pose_traj) {
    const int S = static_cast<int>(pose_traj.size());
    if (static_cast<int>(stream.amplitudes.size()) != 2 * S)
        throw std::invalid_argument("gen_landmark_clip: stream/pose length mismatch");
    LandmarkClip clip;
    clip.frontal = Tensor({S, kNumLandmarks, 3});
    for (int s = 0; s < S; ++s) {
        double gap = mouth_gap_of_amplitude(stream.amplitudes[static_cast<std::size_t>(2 * s)]);
        for (int i = 0; i < kNumLandmarks; ++i)
            for (int j = 0; j < 3; ++j)
                clip.frontal.at(s, i, j) = identity.template_landmarks.at(i, j);
        for (int i : lower_lip_indices()) clip.frontal.at(s, i, 1) += gap;
    }
    clip.posed = apply_transform(clip.frontal, pose_traj);
    return clip;
}

namespace {

struct Poly {
    std::vector<double> xs, ys;
    void add(double x, double y) {
        xs.push_back(x);
        ys.push_back(y);
    }
};

void fill_poly(Tensor& clip, int s, const Poly& p, const double rgb[3], int H, int W) {
    const std::size_t n = p.xs.size();
    if (n < 3) return;
    double ymin = *std::min_element(p.ys.begin(), p.ys.end());
    double ymax = *std::max_element(p.ys.begin(), p.ys.end());
    int y0 = std::max(0, static_cast<int>(std::floor(ymin)));
    int y1 = std::min(H - 1, static_cast<int>(std::ceil(ymax)));
    std::vector<double> xs;
    for (int y = y0; y <= y1; ++y) {
        double yc = y + 0.5;
        xs.clear();
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t j = (i + 1) % n;
            double ya = p.ys[i], yb = p.ys[j];
            if ((ya <= yc && yb > yc) || (yb <= yc && ya > yc)) {
                double t = (yc - ya) / (yb - ya);
                xs.push_back(p.xs[i] + t * (p.xs[j] - p.xs[i]));
            }
        }
        std::sort(xs.begin(), xs.end());
        for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
            int xa = std::max(0, static_cast<int>(std::ceil(xs[k] - 0.5)));
            int xb = std::min(W - 1, static_cast<int>(std::floor(xs[k + 1] - 0.5)));
            for (int x = xa; x <= xb; ++x)
                for (int c = 0; c < 3; ++c) clip.at(s, c, y, x) = rgb[c];
        }
    }
}

// Coverage-weighted fill: 4 scanlines per pixel row with exact span
// lengths in x, so the painted area varies continuously with the polygon.
// The mouth interior uses this to keep the darkness signal un-quantized
// even at a 1-2 pixel lip gap.
void fill_poly_aa(Tensor& clip, int s, const Poly& p, const double rgb[3], int H, int W) {
    const std::size_t n = p.xs.size();
    if (n < 3) return;
    const int ss = 4;
    double ymin = *std::min_element(p.ys.begin(), p.ys.end());
    double ymax = *std::max_element(p.ys.begin(), p.ys.end());
    int y0 = std::max(0, static_cast<int>(std::floor(ymin)));
    int y1 = std::min(H - 1, static_cast<int>(std::ceil(ymax)));
    int x0 = std::max(0, static_cast<int>(std::floor(
                             *std::min_element(p.xs.begin(), p.xs.end()))));
    int x1 = std::min(W - 1, static_cast<int>(std::ceil(
                                 *std::max_element(p.xs.begin(), p.xs.end()))));
    if (x1 < x0) return;
    std::vector<double> xs, cover(static_cast<std::size_t>(x1 - x0 + 1));
    for (int y = y0; y <= y1; ++y) {
        std::fill(cover.begin(), cover.end(), 0.0);
        for (int sub = 0; sub < ss; ++sub) {
            double yc = y + (sub + 0.5) / ss;
            xs.clear();
            for (std::size_t i = 0; i < n; ++i) {
                std::size_t j = (i + 1) % n;
                double ya = p.ys[i], yb = p.ys[j];
                if ((ya <= yc && yb > yc) || (yb <= yc && ya > yc)) {
                    double t = (yc - ya) / (yb - ya);
                    xs.push_back(p.xs[i] + t * (p.xs[j] - p.xs[i]));
                }
            }
            std::sort(xs.begin(), xs.end());
            for (std::size_t k = 0; k + 1 < xs.size(); k += 2)
                for (int x = x0; x <= x1; ++x) {
                    double lo = std::max(xs[k], static_cast<double>(x));
                    double hi = std::min(xs[k + 1], static_cast<double>(x + 1));
                    if (hi > lo) cover[static_cast<std::size_t>(x - x0)] += (hi - lo) / ss;
                }
        }
        for (int x = x0; x <= x1; ++x) {
            double a = std::min(1.0, cover[static_cast<std::size_t>(x - x0)]);
            if (a <= 0.0) continue;
            for (int c = 0; c < 3; ++c)
                clip.at(s, c, y, x) = (1.0 - a) * clip.at(s, c, y, x) + a * rgb[c];
        }
    }
}

void brush_line(Tensor& clip, int s, double x0, double y0, double x1, double y1,
                const double rgb[3], int H, int W) {
    int steps = static_cast<int>(std::ceil(std::hypot(x1 - x0, y1 - y0))) + 1;
    for (int k = 0; k <= steps; ++k) {
        double t = static_cast<double>(k) / steps;
        int x = static_cast<int>(std::floor(x0 + t * (x1 - x0)));
        int y = static_cast<int>(std::floor(y0 + t * (y1 - y0)));
        if (x >= 0 && x < W && y >= 0 && y < H)
            for (int c = 0; c < 3; ++c) clip.at(s, c, y, x) = rgb[c];
    }
}

}  // namespace

Tensor render_face_clip(const Tensor& posed, const IdentitySpec& identity, int H, int W) {
    if (posed.ndim() != 3 || posed.dim(1) != kNumLandmarks)
        throw std::invalid_argument("render_face_clip: need [S,68,3]");
    if (H < 16 || W < 16) throw std::invalid_argument("render_face_clip: dims >= 16");
    const int S = posed.dim(0);
    Tensor clip({S, 3, H, W});
    const double bg[3] = {0.12, 0.12, 0.16};
    const double eye_rgb[3] = {0.15, 0.1, 0.1};
    const double brow_rgb[3] = {0.25, 0.17, 0.1};
    const double nose_rgb[3] = {0.6, 0.45, 0.38};
    const double inner_rgb[3] = {0.05, 0.02, 0.02};

    auto px = [&](double v) { return (v + kRasterExtent) / (2.0 * kRasterExtent) * W; };
    auto py = [&](double v) { return (v + kRasterExtent) / (2.0 * kRasterExtent) * H; };

    for (int s = 0; s < S; ++s) {
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) clip.at(s, c, y, x) = bg[c];

        double X[kNumLandmarks], Y[kNumLandmarks];
        for (int i = 0; i < kNumLandmarks; ++i) {
            X[i] = px(posed.at(s, i, 0));
            Y[i] = py(posed.at(s, i, 1));
        }
        // face blob: jaw contour closed by the jaw reflected through a
        // point above the eye line (forehead)
        double mx = 0.0, my_ = 0.0;
        for (int i = 36; i <= 47; ++i) {
            mx += X[i];
            my_ += Y[i];
        }
        mx /= 12.0;
        my_ /= 12.0;
        Poly face;
        for (int i = 0; i <= 16; ++i) face.add(X[i], Y[i]);
        for (int i = 15; i >= 1; --i) face.add(2.0 * mx - X[i], 2.0 * my_ - Y[i]);
        fill_poly(clip, s, face, identity.skin, H, W);

        Poly eye_r, eye_l;
        for (int i = 36; i <= 41; ++i) eye_r.add(X[i], Y[i]);
        for (int i = 42; i <= 47; ++i) eye_l.add(X[i], Y[i]);
        fill_poly(clip, s, eye_r, eye_rgb, H, W);
        fill_poly(clip, s, eye_l, eye_rgb, H, W);
        for (int i = 36; i < 41; ++i) brush_line(clip, s, X[i], Y[i], X[i + 1], Y[i + 1], eye_rgb, H, W);
        for (int i = 42; i < 47; ++i) brush_line(clip, s, X[i], Y[i], X[i + 1], Y[i + 1], eye_rgb, H, W);
        for (int i = 17; i < 21; ++i) brush_line(clip, s, X[i], Y[i], X[i + 1], Y[i + 1], brow_rgb, H, W);
        for (int i = 22; i < 26; ++i) brush_line(clip, s, X[i], Y[i], X[i + 1], Y[i + 1], brow_rgb, H, W);
        for (int i = 27; i < 30; ++i) brush_line(clip, s, X[i], Y[i], X[i + 1], Y[i + 1], nose_rgb, H, W);
        for (int i = 31; i < 35; ++i) brush_line(clip, s, X[i], Y[i], X[i + 1], Y[i + 1], nose_rgb, H, W);

        Poly outer, inner;
        for (int i = 48; i <= 59; ++i) outer.add(X[i], Y[i]);
        for (int i = 60; i <= 67; ++i) inner.add(X[i], Y[i]);
        fill_poly(clip, s, outer, identity.lip, H, W);
        fill_poly_aa(clip, s, inner, inner_rgb, H, W);
    }

    // Band-limit with a separable [1 2 1]/4 kernel (clamped borders): the
    // raw raster has single-pixel edges whose spectrum is unbounded, which
    // makes the clips needlessly hostile to any band-limited model.
    Tensor out(clip.shape());
    std::vector<double> row(static_cast<std::size_t>(std::max(H, W)));
    for (int s = 0; s < S; ++s)
        for (int c = 0; c < 3; ++c) {
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    int xl = std::max(0, x - 1), xr = std::min(W - 1, x + 1);
                    out.at(s, c, y, x) = 0.25 * clip.at(s, c, y, xl) +
                                         0.5 * clip.at(s, c, y, x) +
                                         0.25 * clip.at(s, c, y, xr);
                }
            for (int x = 0; x < W; ++x) {
                for (int y = 0; y < H; ++y) row[static_cast<std::size_t>(y)] =
                    out.at(s, c, y, x);
                for (int y = 0; y < H; ++y) {
                    int yu = std::max(0, y - 1), yd = std::min(H - 1, y + 1);
                    out.at(s, c, y, x) = 0.25 * row[static_cast<std::size_t>(yu)] +
                                         0.5 * row[static_cast<std::size_t>(y)] +
                                         0.25 * row[static_cast<std::size_t>(yd)];
                }
            }
        }
    return out;
}

Tensor poses_to_tensor(const std::vector<SimilarityTransform>& poses) {
    const int S = static_cast<int>(poses.size());
    Tensor t({S, 13});
    for (int s = 0; s < S; ++s) {
        const auto& p = poses[static_cast<std::size_t>(s)];
        t.at(s, 0) = p.scale;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) t.at(s, 1 + 3 * i + j) = p.rotation(i, j);
        for (int i = 0; i < 3; ++i) t.at(s, 10 + i) = p.translation(i);
    }
    return t;
}

std::vector<SimilarityTransform> poses_from_tensor(const Tensor& t) {
    if (t.ndim() != 2 || t.dim(1) != 13)
        throw std::invalid_argument("poses_from_tensor: need [S,13]");
    std::vector<SimilarityTransform> poses(static_cast<std::size_t>(t.dim(0)));
    for (int s = 0; s < t.dim(0); ++s) {
        auto& p = poses[static_cast<std::size_t>(s)];
        p.scale = t.at(s, 0);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) p.rotation(i, j) = t.at(s, 1 + 3 * i + j);
        for (int i = 0; i < 3; ++i) p.translation(i) = t.at(s, 10 + i);
    }
    return poses;
}

std::string gen_corpus(const CorpusConfig& cfg, std::uint64_t seed,
                       const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    KvDoc manifest;
    manifest.set("kind", std::string("mdtk-corpus"));
    manifest.set("seed", static_cast<long long>(seed));
    manifest.set("clips", static_cast<long long>(cfg.n_clips));
    manifest.set("frames", static_cast<long long>(cfg.frames));
    manifest.set("audio_dim", static_cast<long long>(cfg.audio_dim));
    manifest.set("height", static_cast<long long>(cfg.height));
    manifest.set("width", static_cast<long long>(cfg.width));

    for (int i = 0; i < cfg.n_clips; ++i) {
        std::uint64_t cs = Rng::mix(seed, static_cast<std::uint64_t>(i) + 1);
        IdentitySpec id = gen_identity(cs);
        PhonemeStream stream = gen_phoneme_stream(cs, cfg.frames, cfg.audio_dim);
        auto pose_traj = gen_pose_trajectory(cs, cfg.frames);
        LandmarkClip lm = gen_landmark_clip(id, stream, pose_traj);
        Tensor video = render_face_clip(lm.posed, id, cfg.height, cfg.width);
        Tensor pose_frames = make_pose_frames(video);
        // cold-start identity clip: static template face at the first pose
        Tensor tmpl_seq({cfg.frames, kNumLandmarks, 3});
        for (int s = 0; s < cfg.frames; ++s)
            for (int p = 0; p < kNumLandmarks; ++p)
                for (int j = 0; j < 3; ++j)
                    tmpl_seq.at(s, p, j) = id.template_landmarks.at(p, j);
        std::vector<SimilarityTransform> static_pose(
            static_cast<std::size_t>(cfg.frames), pose_traj[0]);
        Tensor identity_clip = render_face_clip(apply_transform(tmpl_seq, static_pose),
                                                id, cfg.height, cfg.width);

        char name[32];
        std::snprintf(name, sizeof(name), "clip_%04d", i);
        std::string dir = out_dir + "/" + name;
        fs::create_directories(dir);

        auto put = [&](const char* file, const Tensor& t) {
            NamedTensors nt;
            nt.add("data", t);
            std::string digest = save_tensors(dir + "/" + file, nt);
            manifest.set(std::string(name) + "/" + file, digest);
        };
        put("features.bin", stream.features);
        put("landmarks_frontal.bin", lm.frontal);
        put("landmarks_posed.bin", lm.posed);
        put("poses.bin", poses_to_tensor(pose_traj));
        put("video.bin", video);
        put("pose_frames.bin", pose_frames);
        put("identity.bin", identity_clip);
    }
    std::string manifest_path = out_dir + "/manifest.txt";
    manifest.save(manifest_path);
    return manifest_path;
}

CorpusClip load_clip(const std::string& dir) {
    CorpusClip c;
    c.features = load_tensors(dir + "/features.bin").get("data");
    c.landmarks_frontal = load_tensors(dir + "/landmarks_frontal.bin").get("data");
    c.landmarks_posed = load_tensors(dir + "/landmarks_posed.bin").get("data");
    c.poses = poses_from_tensor(load_tensors(dir + "/poses.bin").get("data"));
    c.video = load_tensors(dir + "/video.bin").get("data");
    c.pose_frames = load_tensors(dir + "/pose_frames.bin").get("data");
    c.identity = load_tensors(dir + "/identity.bin").get("data");
    return c;
}

std::vector<std::string> list_clip_dirs(const std::string& corpus_dir) {
    namespace fs = std::filesystem;
    std::vector<std::string> dirs;
    for (const auto& e : fs::directory_iterator(corpus_dir))
        if (e.is_directory() && e.path().filename().string().rfind("clip_", 0) == 0)
            dirs.push_back(e.path().string());
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty())
        throw std::runtime_error("no clip_* directories under " + corpus_dir);
    return dirs;
}

}  // namespace mdtk
