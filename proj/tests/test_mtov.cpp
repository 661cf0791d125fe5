#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "grad_check.hpp"
#include "mdtk/corpus.hpp"
#include "mdtk/mtov.hpp"

using namespace mdtk;
using namespace mdtk::nn;

namespace {

MtovConfig tiny_config() {
    MtovConfig cfg;
    cfg.latent_channels = 2;
    cfg.base_channels = 4;
    cfg.n_heads = 2;
    cfg.time_dim = 8;
    cfg.T = 50;
    cfg.sample_steps = 5;
    return cfg;
}

TriPlaneLatent random_latent(std::uint64_t seed, int c = 2, int h = 4, int w = 4,
                             int s = 2) {
    Rng rng(seed);
    return {rng.normal_tensor({c, h, w}), rng.normal_tensor({c, h, s}),
            rng.normal_tensor({c, w, s})};
}

ConditionSet random_conditions(std::uint64_t seed) {
    return {random_latent(Rng::mix(seed, 1)), random_latent(Rng::mix(seed, 2)),
            random_latent(Rng::mix(seed, 3))};
}

}  // namespace

TEST_CASE("config validation") {
    MtovConfig cfg = tiny_config();
    cfg.validate();
    CHECK(cfg.stem_channels() == 8);
    cfg.n_heads = 3;  // must divide base channels
    CHECK_THROWS(cfg.validate());
    cfg = tiny_config();
    cfg.eta = 2.0;
    CHECK_THROWS(cfg.validate());
}

TEST_CASE("condition sets enforce matching extents") {
    ConditionSet good = random_conditions(1);
    good.validate();
    ConditionSet bad = good;
    bad.z_identity = random_latent(9, 2, 4, 4, 4);
    CHECK_THROWS(bad.validate());
}

TEST_CASE("denoiser preserves plane shapes and is deterministic") {
    MtovModel model(tiny_config(), 2);
    TriPlaneLatent z = random_latent(3);
    ConditionSet cond = random_conditions(4);
    TriPlaneLatent out = model.mtov_denoise(z, 7, cond);
    CHECK(out.hw.same_shape(z.hw));
    CHECK(out.hs.same_shape(z.hs));
    CHECK(out.ws.same_shape(z.ws));
    CHECK(all_finite(out.pack()));
    TriPlaneLatent again = model.mtov_denoise(z, 7, cond);
    CHECK(out.pack().vec() == again.pack().vec());
    TriPlaneLatent other_t = model.mtov_denoise(z, 40, cond);
    CHECK(out.pack().vec() != other_t.pack().vec());
}

TEST_CASE("channel mismatch against the config is rejected") {
    MtovModel model(tiny_config(), 5);
    TriPlaneLatent z = random_latent(6, 3);  // wrong channel count
    ConditionSet cond{random_latent(7, 3), random_latent(8, 3), random_latent(9, 3)};
    CHECK_THROWS(model.mtov_denoise(z, 3, cond));
}

TEST_CASE("landmark condition connectivity") {
    MtovModel model(tiny_config(), 11);
    TriPlaneLatent z = random_latent(12);
    ConditionSet cond = random_conditions(13);
    TriPlaneLatent out = model.mtov_denoise(z, 9, cond);
    ConditionSet zeroed = cond;
    zeroed.z_landmark = {Tensor(cond.z_landmark.hw.shape()),
                         Tensor(cond.z_landmark.hs.shape()),
                         Tensor(cond.z_landmark.ws.shape())};
    TriPlaneLatent out2 = model.mtov_denoise(z, 9, zeroed);
    CHECK(out.pack().vec() != out2.pack().vec());
}

TEST_CASE("gradient check on the tiny model") {
    MtovModel model(tiny_config(), 21);
    TriPlaneLatent z = random_latent(22);
    TriPlaneLatent target = random_latent(23);
    ConditionSet cond = random_conditions(24);
    auto loss = [&] {
        MtovModel::PlaneSet out =
            model.denoise_graph(MtovModel::lift(z), 13, MtovModel::lift(cond.z_landmark),
                                MtovModel::lift(cond.z_pose),
                                MtovModel::lift(cond.z_identity));
        auto t = [](const Tensor& p) {
            return constant(p.reshaped({1, p.dim(0), p.dim(1), p.dim(2)}));
        };
        return add(add(mse(out.hw, t(target.hw)), mse(out.hs, t(target.hs))),
                   mse(out.ws, t(target.ws)));
    };
    int checked = mdtk::testing::check_grads(model.params(), loss, 1e-3, 2);
    CHECK(checked >= 50);
}

TEST_CASE("make_pose_frames masks exactly the lower half") {
    Tensor clip({2, 3, 8, 8});
    for (auto& v : clip.vec()) v = 1.0;
    Tensor masked = make_pose_frames(clip);
    for (int s = 0; s < 2; ++s)
        for (int c = 0; c < 3; ++c)
            for (int h = 0; h < 8; ++h)
                for (int w = 0; w < 8; ++w)
                    CHECK(masked.at(s, c, h, w) == (h < 4 ? 1.0 : 0.0));
    // Idempotent and upper half untouched.
    CHECK(make_pose_frames(masked).vec() == masked.vec());
    Tensor odd({1, 1, 7, 8});
    CHECK_THROWS(make_pose_frames(odd));
}

TEST_CASE("blend properties") {
    Rng rng(31);
    Tensor g = rng.uniform_tensor({2, 3, 8, 8}, 0, 1);
    Tensor b = rng.uniform_tensor({2, 3, 8, 8}, 0, 1);

    SUBCASE("sigma 0 is a bit-exact hard paste") {
        Tensor out = blend(g, b, 0.0);
        for (int s = 0; s < 2; ++s)
            for (int c = 0; c < 3; ++c)
                for (int h = 0; h < 8; ++h)
                    for (int w = 0; w < 8; ++w)
                        CHECK(out.at(s, c, h, w) ==
                              (h < 4 ? b.at(s, c, h, w) : g.at(s, c, h, w)));
    }
    SUBCASE("identical inputs are a fixed point for any sigma") {
        for (double sigma : {0.0, 0.7, 2.0}) {
            Tensor out = blend(g, g, sigma);
            for (std::int64_t i = 0; i < g.numel(); ++i)
                CHECK(out[i] == doctest::Approx(g[i]).epsilon(1e-12));
        }
    }
    SUBCASE("outputs are convex combinations") {
        Tensor out = blend(g, b, 1.5);
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            CHECK(out[i] >= std::min(g[i], b[i]) - 1e-12);
            CHECK(out[i] <= std::max(g[i], b[i]) + 1e-12);
        }
    }
    SUBCASE("bad arguments rejected") {
        CHECK_THROWS(blend(g, Tensor({1, 3, 8, 8}), 0.0));
        CHECK_THROWS(blend(g, b, -1.0));
    }
}

TEST_CASE("condition isolation across inputs") {
    CodecConfig ccfg;
    ccfg.clip_len = 8;
    ccfg.input_res = 8;
    ccfg.base_channels = 4;
    ccfg.emb_dim = 2;
    ccfg.phase_dim = 2;
    VideoCodec codec(ccfg, 41);
    VideoCodec motion_codec(ccfg, 41);
    motion_codec.copy_params_from(codec);

    IdentitySpec id = gen_identity(1);
    PhonemeStream stream = gen_phoneme_stream(2, ccfg.clip_len, 4);
    std::vector<SimilarityTransform> poses(static_cast<std::size_t>(ccfg.clip_len));
    LandmarkClip clip = gen_landmark_clip(id, stream, poses);
    Rng rng(42);
    Tensor pose_clip = rng.uniform_tensor({8, 3, 8, 8}, 0, 1);
    Tensor identity_clip = rng.uniform_tensor({8, 3, 8, 8}, 0, 1);

    ConditionSet base = build_conditions(clip.posed, make_pose_frames(pose_clip),
                                         identity_clip, motion_codec, codec, codec);

    // New identity clip: only Z_I changes.
    Tensor identity2 = rng.uniform_tensor({8, 3, 8, 8}, 0, 1);
    ConditionSet swapped_id = build_conditions(clip.posed, make_pose_frames(pose_clip),
                                               identity2, motion_codec, codec, codec);
    CHECK(swapped_id.z_landmark.pack().vec() == base.z_landmark.pack().vec());
    CHECK(swapped_id.z_pose.pack().vec() == base.z_pose.pack().vec());
    CHECK(swapped_id.z_identity.pack().vec() != base.z_identity.pack().vec());

    // Lip-only landmark change: Z_P and Z_I untouched.
    Tensor moved = clip.posed;
    for (int s = 0; s < ccfg.clip_len; ++s)
        for (int p : lower_lip_indices()) moved.at(s, p, 1) += 0.3;
    ConditionSet swapped_lm = build_conditions(moved, make_pose_frames(pose_clip),
                                               identity_clip, motion_codec, codec, codec);
    CHECK(swapped_lm.z_pose.pack().vec() == base.z_pose.pack().vec());
    CHECK(swapped_lm.z_identity.pack().vec() == base.z_identity.pack().vec());
    CHECK(swapped_lm.z_landmark.pack().vec() != base.z_landmark.pack().vec());
}

TEST_CASE("short training run is deterministic and improves a fixed task") {
    MtovConfig cfg = tiny_config();
    cfg.lr = 2e-3;
    std::vector<MtovTrainItem> items{{random_latent(51), random_conditions(52)}};

    auto eval_model = [&](const MtovModel& m) {
        DiffusionSchedule sched = m.schedule();
        Tensor z0 = items[0].z0.pack();
        Rng noise(53);
        Tensor eps = noise.normal_tensor(z0.shape());
        Tensor noisy = forward_noise(z0, cfg.T / 2, eps, sched);
        TriPlaneLatent pred = m.mtov_denoise(TriPlaneLatent::unpack(noisy, items[0].z0),
                                             cfg.T / 2, items[0].cond);
        return x0_loss(pred.pack(), z0);
    };

    auto run = [&] {
        MtovModel model(cfg, 54);
        std::ostringstream log;
        train_mtov(model, items, 80, 55, &log);
        CHECK(log.str().find("step 0 loss") != std::string::npos);
        return std::pair{eval_model(model), model.params().digest()};
    };
    MtovModel untrained(cfg, 54);
    double before = eval_model(untrained);
    auto [after_a, digest_a] = run();
    auto [after_b, digest_b] = run();
    CHECK(digest_a == digest_b);
    CHECK(after_a == after_b);
    CHECK(after_a < before);
}
