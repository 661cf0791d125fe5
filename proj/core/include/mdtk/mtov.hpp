#pragma once

#include <ostream>
#include <vector>

#include "mdtk/atom.hpp"
#include "mdtk/codec.hpp"
#include "mdtk/diffusion.hpp"
#include "mdtk/nn.hpp"
#include "mdtk/tensor.hpp"

namespace mdtk {

// MToV: conditional diffusion over tri-plane video latents. One shared
// 2D U-Net runs per plane; its stem sees the channel concatenation
// [z_t | Z_L | Z_P | Z_I] and the mid stage attends across the three
// planes' flattened tokens so they stay mutually consistent.

struct MtovConfig {
    int latent_channels = 4;  // per-plane channels; must match the codec emb_dim
    int base_channels = 16;   // paper 128
    int n_heads = 2;          // paper 8
    int time_dim = 32;
    int T = 1000;
    double beta_start = 0.0015, beta_end = 0.0195;
    int sample_steps = 50;
    double eta = 0.0;
    double lr = 2e-3;

    int stem_channels() const { return 4 * latent_channels; }
    void validate() const;
};

struct ConditionSet {
    TriPlaneLatent z_landmark, z_pose, z_identity;
    void validate() const;  // matching plane extents
};

class MtovModel {
public:
    MtovModel(MtovConfig cfg, std::uint64_t init_seed);

    const MtovConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return ps_; }
    const nn::ParamStore& params() const { return ps_; }
    DiffusionSchedule schedule() const;

    struct PlaneSet {
        nn::Var hw, hs, ws;  // each [1,c,·,·]
    };
    // Conditions stay Vars so connectivity / gradient paths are testable.
    PlaneSet denoise_graph(const PlaneSet& z_t, int t, const PlaneSet& z_l,
                           const PlaneSet& z_p, const PlaneSet& z_i) const;

    TriPlaneLatent mtov_denoise(const TriPlaneLatent& z_t, int t,
                                const ConditionSet& cond) const;

    static PlaneSet lift(const TriPlaneLatent& z);  // constants, [1,c,·,·]

private:
    struct Conv {
        nn::Param *W = nullptr, *b = nullptr;
        int stride = 1, pad = 1;
        nn::Var operator()(const nn::Var& x) const;
    };
    struct Norm {
        nn::Param *gamma = nullptr, *beta = nullptr;
        nn::Var operator()(const nn::Var& x) const;
    };
    // Pre-norm residual conv block; the time embedding enters through a
    // per-block FiLM projection.
    struct ResBlock {
        Norm n1, n2;
        Conv c1, c2;
        nn::Linear film_lin;
        nn::Var operator()(const nn::Var& x, const nn::Var& temb) const;
    };

    Conv make_conv(const std::string& name, int cin, int cout, int k, int stride,
                   int pad, Rng& rng);
    Norm make_norm(const std::string& name, int ch);
    ResBlock make_res(const std::string& name, int ch, Rng& rng);

    nn::Var time_embedding(int t) const;  // [1,F]
    // Per-plane halves of the U-Net around the shared cross-plane middle.
    struct DownState {
        nn::Var skip, bottom;
    };
    DownState run_down(const nn::Var& x, const nn::Var& temb) const;
    nn::Var run_up(const nn::Var& mid, const nn::Var& skip, const nn::Var& temb) const;

    MtovConfig cfg_;
    nn::ParamStore ps_;
    int ps_f_ = 0;  // base channel count cached for block construction

    nn::Linear time_fc1_, time_fc2_;
    Conv stem_, down_, up_, fuse_, out_;
    ResBlock rb1_, rb2_, rb3_, rb4_;
    Norm out_norm_;
    nn::LayerNormGain attn_ln_;
    nn::MultiHeadAttention attn_;
};

// Copy of `clip` with rows H/2..H-1 zeroed in every frame. H must be even.
Tensor make_pose_frames(const Tensor& clip);

// Z_L from the rasterized landmark sequence through the motion codec,
// Z_P / Z_I from the pose and identity clips through their codecs.
// `landmarks` must already be pose-aligned (align_motion_to_reference).
ConditionSet build_conditions(const Tensor& landmarks, const Tensor& pose_frames,
                              const Tensor& identity_clip, const VideoCodec& motion_codec,
                              const VideoCodec& pose_codec,
                              const VideoCodec& identity_codec);

// Alpha-composite `generated` over `background` with a lower-half row
// mask whose boundary is Gaussian-smoothed with parameter sigma.
// sigma == 0 degenerates to a bit-exact hard paste.
Tensor blend(const Tensor& generated, const Tensor& background, double sigma);

struct MtovTrainItem {
    TriPlaneLatent z0;  // encode_video(X_0) through the frozen video codec
    ConditionSet cond;
};

// x0-prediction MSE over noised tri-plane latents. Deterministic per
// (model init, seed); NaN losses abort with diagnostics.
TrainStats train_mtov(MtovModel& model, const std::vector<MtovTrainItem>& items,
                      long long steps, std::uint64_t seed, std::ostream* log = nullptr,
                      double stop_below_loss = 0.0);

struct PipelineModels {
    const AtomModel* atom = nullptr;
    const MtovModel* mtov = nullptr;
    const VideoCodec* video_codec = nullptr;     // defines the diffusion latent space
    const VideoCodec* motion_codec = nullptr;    // fine-tuned on raster clips
    const VideoCodec* pose_codec = nullptr;      // may alias video_codec weights
    const VideoCodec* identity_codec = nullptr;  // may alias video_codec weights
};

struct GenerateResult {
    Tensor video;      // [S,3,H,W]
    Tensor landmarks;  // frontal motion from the first stage, [S,68,3]
    int atom_invocations = 0;
    int mtov_invocations = 0;
};

// Full two-stage pipeline for one S-frame clip. frame_by_frame runs the
// video diffusion once per frame on S=1 sub-clips (S * n_steps denoiser
// calls) instead of once jointly (n_steps calls).
GenerateResult generate_clip(const Tensor& features, const Tensor& identity_clip,
                             const Tensor& pose_source_clip,
                             const Tensor& pose_source_landmarks, const Tensor& l_id,
                             const PipelineModels& models, int n_steps,
                             std::uint64_t seed, bool frame_by_frame = false,
                             double blend_sigma = 0.0);

struct LongGenerateResult {
    Tensor video;  // [k*S,3,H,W]
    std::vector<GenerateResult> clips;
    std::vector<Tensor> identity_inputs;  // X_I actually fed to each clip
};

// k chained generate_clip calls: clip j>0 reuses clip j-1's output as its
// identity clip and clip j-1's final frontal landmark frame as l_id.
LongGenerateResult generate_long(const Tensor& features_long,
                                 const Tensor& seed_identity_clip,
                                 const Tensor& pose_source_clip,
                                 const Tensor& pose_source_landmarks, const Tensor& l_id,
                                 const PipelineModels& models, int n_steps,
                                 std::uint64_t seed, double blend_sigma = 0.0);

}  // namespace mdtk
