#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mdtk/corpus.hpp"
#include "mdtk/eval.hpp"
#include "mdtk/rng.hpp"

using namespace mdtk;

TEST_CASE("lmd is zero on identical sequences and tracks lip offsets") {
    Rng rng(1);
    Tensor seq = rng.normal_tensor({4, kNumLandmarks, 3});
    CHECK(lmd(seq, seq) == 0.0);
    CHECK(lmd(seq, seq, true) == 0.0);

    Tensor shifted = seq;
    for (int s = 0; s < 4; ++s)
        for (int p : lip_indices()) shifted.at(s, p, 1) += 0.1;
    CHECK(lmd(shifted, seq) == doctest::Approx(0.1).epsilon(1e-12));
    // Only 20 of 68 points moved, so the full-face average shrinks.
    CHECK(lmd(shifted, seq, true) == doctest::Approx(0.1 * 20.0 / 68.0).epsilon(1e-12));

    // Moving a non-lip point leaves the lip-only metric untouched.
    Tensor brow = seq;
    brow.at(0, 20, 0) += 5.0;
    CHECK(lmd(brow, seq) == 0.0);
}

TEST_CASE("psnr basics") {
    Tensor a({1, 1, 2, 2}, {0.0, 0.5, 1.0, 0.25});
    CHECK(psnr(a, a) == kPsnrCap);
    Tensor b = a;
    for (auto& v : b.vec()) v += 0.1;
    CHECK(psnr(a, b) == doctest::Approx(10.0 * std::log10(1.0 / 0.01)).epsilon(1e-9));
    CHECK(psnr(a, b) < psnr(a, a));
    Tensor c({1, 1, 1, 1});
    CHECK_THROWS(psnr(a, c));
}

TEST_CASE("mouth open signal reads inner-lip midpoints") {
    Tensor seq({2, kNumLandmarks, 3});
    seq.at(0, 62, 1) = 0.1;
    seq.at(0, 66, 1) = 0.3;
    seq.at(1, 62, 1) = 0.1;
    seq.at(1, 66, 1) = 0.1;
    std::vector<double> sig = mouth_open_signal(seq);
    REQUIRE(sig.size() == 2);
    CHECK(sig[0] == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(sig[1] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("sync correlation is affine invariant and signed") {
    std::vector<double> s1{0.0, 0.2, 0.5, 0.3, 0.9, 0.1};
    std::vector<double> s2;
    for (double v : s1) s2.push_back(3.0 * v + 7.0);
    CHECK(sync_corr(s1, s2) == doctest::Approx(1.0).epsilon(1e-12));
    std::vector<double> s3;
    for (double v : s1) s3.push_back(-2.0 * v + 1.0);
    CHECK(sync_corr(s1, s3) == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK_THROWS(sync_corr(s1, std::vector<double>(6, 0.5)));
    CHECK_THROWS(sync_corr(s1, std::vector<double>{1.0}));
}

TEST_CASE("temporal consistency of a static clip is zero") {
    Rng rng(3);
    Tensor frame = rng.uniform_tensor({1, 3, 4, 4}, 0.0, 1.0);
    Tensor clip({3, 3, 4, 4});
    for (int s = 0; s < 3; ++s)
        std::copy_n(frame.data(), frame.numel(), clip.data() + s * frame.numel());
    CHECK(temporal_consistency(clip) == 0.0);
    clip.at(2, 0, 0, 0) += 1.0;
    CHECK(temporal_consistency(clip) > 0.0);
}

TEST_CASE("mouth box darkness averages inverted brightness inside the box") {
    Tensor clip({1, 3, 8, 8});
    for (auto& v : clip.vec()) v = 1.0;  // bright everywhere
    for (int c = 0; c < 3; ++c) clip.at(0, c, 4, 4) = 0.0;
    CHECK(mouth_box_darkness(clip, 4, 4, 4, 4)[0] == 1.0);
    CHECK(mouth_box_darkness(clip, 0, 2, 0, 2)[0] == 0.0);
    // Inclusive 2x2 box with one fully dark pixel.
    CHECK(mouth_box_darkness(clip, 4, 5, 4, 5)[0] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("to_video_rate keeps the even samples") {
    std::vector<double> audio{0.0, 9.0, 1.0, 9.0, 2.0, 9.0};
    CHECK(to_video_rate(audio) == std::vector<double>{0.0, 1.0, 2.0});
}

TEST_CASE("metric report aggregates mean and std") {
    KvDoc report = metric_report({{"psnr", {30.0, 34.0}}});
    REQUIRE(report.find("psnr.mean"));
    CHECK(*report.find("psnr.mean") == std::string("32"));
    REQUIRE(report.find("psnr.std"));
    CHECK(std::stod(*report.find("psnr.std")) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(report.find("psnr.clip0"));
    CHECK(report.find("psnr.clip1"));
}
