#include "mdtk/eval.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mdtk/geometry.hpp"

namespace mdtk {

double lmd(const Tensor& pred, const Tensor& gt, bool full_face) {
    if (!pred.same_shape(gt) || pred.ndim() != 3)
        throw std::invalid_argument("lmd: need matching [S,68,3]");
    const int S = pred.dim(0);
    const std::vector<int>* idx;
    std::vector<int> all;
    if (full_face) {
        for (int i = 0; i < kNumLandmarks; ++i) all.push_back(i);
        idx = &all;
    } else {
        idx = &lip_indices();
    }
    double acc = 0.0;
    for (int s = 0; s < S; ++s)
        for (int i : *idx) {
            double dx = pred.at(s, i, 0) - gt.at(s, i, 0);
            double dy = pred.at(s, i, 1) - gt.at(s, i, 1);
            double dz = pred.at(s, i, 2) - gt.at(s, i, 2);
            acc += std::sqrt(dx * dx + dy * dy + dz * dz);
        }
    return acc / (static_cast<double>(S) * static_cast<double>(idx->size()));
}

double psnr(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("psnr: shape mismatch");
    double mse = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        double d = a[i] - b[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.numel());
    if (mse <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

std::vector<double> mouth_open_signal(const Tensor& seq) {
    if (seq.ndim() != 3 || seq.dim(1) != kNumLandmarks)
        throw std::invalid_argument("mouth_open_signal: need [S,68,3]");
    std::vector<double> out(static_cast<std::size_t>(seq.dim(0)));
    for (int s = 0; s < seq.dim(0); ++s)
        out[static_cast<std::size_t>(s)] = seq.at(s, 66, 1) - seq.at(s, 62, 1);
    return out;
}

double sync_corr(const std::vector<double>& s1, const std::vector<double>& s2) {
    if (s1.size() != s2.size() || s1.size() < 3)
        throw std::invalid_argument("sync_corr: need equal lengths >= 3");
    const double n = static_cast<double>(s1.size());
    double m1 = 0, m2 = 0;
    for (std::size_t i = 0; i < s1.size(); ++i) {
        m1 += s1[i];
        m2 += s2[i];
    }
    m1 /= n;
    m2 /= n;
    double c = 0, v1 = 0, v2 = 0;
    for (std::size_t i = 0; i < s1.size(); ++i) {
        double a = s1[i] - m1, b = s2[i] - m2;
        c += a * b;
        v1 += a * a;
        v2 += b * b;
    }
    if (v1 <= 0.0 || v2 <= 0.0)
        throw std::invalid_argument("sync_corr: zero-variance input");
    return c / std::sqrt(v1 * v2);
}

double temporal_consistency(const Tensor& clip) {
    if (clip.ndim() != 4 || clip.dim(0) < 2)
        throw std::invalid_argument("temporal_consistency: need [S>=2,C,H,W]");
    const int S = clip.dim(0);
    const std::int64_t M = clip.numel() / S;
    double acc = 0.0;
    for (int s = 0; s + 1 < S; ++s)
        for (std::int64_t i = 0; i < M; ++i)
            acc += std::abs(clip[(s + 1) * M + i] - clip[s * M + i]);
    return acc / (static_cast<double>(S - 1) * static_cast<double>(M));
}

std::vector<double> mouth_box_darkness(const Tensor& clip, int y0, int y1, int x0,
                                       int x1) {
    if (clip.ndim() != 4) throw std::invalid_argument("mouth_box_darkness: need clip");
    const int S = clip.dim(0), C = clip.dim(1), H = clip.dim(2), W = clip.dim(3);
    y0 = std::clamp(y0, 0, H - 1);
    y1 = std::clamp(y1, y0, H - 1);
    x0 = std::clamp(x0, 0, W - 1);
    x1 = std::clamp(x1, x0, W - 1);
    std::vector<double> out(static_cast<std::size_t>(S));
    double area = static_cast<double>((y1 - y0 + 1) * (x1 - x0 + 1));
    for (int s = 0; s < S; ++s) {
        double dark = 0.0;
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                double v = 0.0;
                for (int c = 0; c < C; ++c) v += clip.at(s, c, y, x);
                dark += 1.0 - v / C;
            }
        out[static_cast<std::size_t>(s)] = dark / area;
    }
    return out;
}

PixelBox lip_pixel_box(const Tensor& posed_seq, int H, int W, int margin) {
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (int s = 0; s < posed_seq.dim(0); ++s)
        for (int i : lip_indices()) {
            xmin = std::min(xmin, posed_seq.at(s, i, 0));
            xmax = std::max(xmax, posed_seq.at(s, i, 0));
            ymin = std::min(ymin, posed_seq.at(s, i, 1));
            ymax = std::max(ymax, posed_seq.at(s, i, 1));
        }
    auto px = [&](double v, int e) {
        return static_cast<int>(std::floor((v + kRasterExtent) / (2.0 * kRasterExtent) * e));
    };
    PixelBox b;
    b.x0 = std::max(0, px(xmin, W) - margin);
    b.x1 = std::min(W - 1, px(xmax, W) + margin);
    b.y0 = std::max(0, px(ymin, H) - margin);
    b.y1 = std::min(H - 1, px(ymax, H) + margin);
    return b;
}

std::vector<double> to_video_rate(const std::vector<double>& audio_rate) {
    std::vector<double> out(audio_rate.size() / 2);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = audio_rate[2 * i];
    return out;
}

KvDoc metric_report(
    const std::vector<std::pair<std::string, std::vector<double>>>& metrics) {
    KvDoc doc;
    for (const auto& [name, vals] : metrics) {
        double mean = 0.0;
        for (std::size_t i = 0; i < vals.size(); ++i) {
            doc.set(name + ".clip" + std::to_string(i), vals[i]);
            mean += vals[i];
        }
        mean /= static_cast<double>(vals.size());
        double var = 0.0;
        for (double v : vals) var += (v - mean) * (v - mean);
        doc.set(name + ".mean", mean);
        doc.set(name + ".std", std::sqrt(var / static_cast<double>(vals.size())));
    }
    return doc;
}

}  // namespace mdtk
