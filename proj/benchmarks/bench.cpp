#include <benchmark/benchmark.h>

#include "mdtk/atom.hpp"
#include "mdtk/codec.hpp"
#include "mdtk/corpus.hpp"
#include "mdtk/diffusion.hpp"
#include "mdtk/geometry.hpp"
#include "mdtk/nn.hpp"

using namespace mdtk;

static void BM_DdimSample(benchmark::State& state) {
    DiffusionSchedule sched = make_linear_schedule(1000, 0.0015, 0.0195);
    Rng rng(1);
    Tensor z0 = rng.normal_tensor({16, 204});
    auto denoiser = [&](const Tensor&, int) { return z0; };
    for (auto _ : state) {
        SampleResult res =
            sample(denoiser, z0.shape(), sched, static_cast<int>(state.range(0)), 7);
        benchmark::DoNotOptimize(res.z0.data());
    }
}
BENCHMARK(BM_DdimSample)->Arg(10)->Arg(50);

static void BM_Conv2dForward(benchmark::State& state) {
    Rng rng(2);
    Tensor x = rng.normal_tensor({16, 16, 32, 32});
    Tensor w = rng.normal_tensor({16, 16, 3, 3}, 0.1);
    Tensor b = rng.normal_tensor({16});
    nn::NoGrad ng;
    for (auto _ : state) {
        nn::Var y = nn::conv2d(nn::constant(x), nn::constant(w), nn::constant(b), 1, 1);
        benchmark::DoNotOptimize(y->val.data());
    }
}
BENCHMARK(BM_Conv2dForward);

static void BM_RenderClip(benchmark::State& state) {
    IdentitySpec id = gen_identity(3);
    PhonemeStream stream = gen_phoneme_stream(4, 16, 8);
    auto poses = gen_pose_trajectory(5, 16);
    LandmarkClip clip = gen_landmark_clip(id, stream, poses);
    for (auto _ : state) {
        Tensor video = render_face_clip(clip.posed, id, 32, 32);
        benchmark::DoNotOptimize(video.data());
    }
}
BENCHMARK(BM_RenderClip);

static void BM_Procrustes(benchmark::State& state) {
    IdentitySpec id = gen_identity(6);
    SimilarityTransform st;
    st.scale = 1.2;
    st.rotation = Eigen::AngleAxisd(0.2, Eigen::Vector3d::UnitY()).toRotationMatrix();
    st.translation = Eigen::Vector3d(0.3, -0.1, 0.2);
    Tensor tpl = id.template_landmarks.reshaped({1, kNumLandmarks, 3});
    Tensor moved = apply_transform(tpl, st).reshaped({kNumLandmarks, 3});
    for (auto _ : state) {
        SimilarityTransform rec =
            estimate_similarity_transform(id.template_landmarks, moved);
        benchmark::DoNotOptimize(&rec);
    }
}
BENCHMARK(BM_Procrustes);

static void BM_AtomDenoise(benchmark::State& state) {
    AtomConfig cfg;
    AtomModel model(cfg, 9);
    Rng rng(10);
    Tensor delta = rng.normal_tensor({cfg.n_frames, cfg.point_dim()});
    Tensor features = rng.normal_tensor({cfg.audio_frames(), cfg.audio_dim});
    Tensor l_id = rng.normal_tensor({kNumLandmarks, 3});
    Tensor fa = model.encode_audio(features);
    Tensor fl = model.encode_init_landmark(l_id);
    for (auto _ : state) {
        Tensor out = model.atom_denoise(delta, 500, fa, fl);
        benchmark::DoNotOptimize(out.data());
    }
}
BENCHMARK(BM_AtomDenoise);

static void BM_CodecEncode(benchmark::State& state) {
    CodecConfig cfg;
    VideoCodec codec(cfg, 11);
    Rng rng(12);
    Tensor clip = rng.uniform_tensor({cfg.clip_len, cfg.in_channels, cfg.input_res,
                                      cfg.input_res},
                                     0.0, 1.0);
    for (auto _ : state) {
        TriPlaneLatent z = codec.encode_video(clip);
        benchmark::DoNotOptimize(z.hw.data());
    }
}
BENCHMARK(BM_CodecEncode);

BENCHMARK_MAIN();
