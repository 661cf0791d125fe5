#pragma once

#include <ostream>
#include <vector>

#include "mdtk/nn.hpp"
#include "mdtk/tensor.hpp"

namespace mdtk {

// Tri-plane video autoencoder: per-frame 2D features are pooled along
// time, width and height into three planes {hw, hs, ws}, each projected
// to emb_dim channels; the decoder rebuilds per-frame feature maps from
// plane columns and upsamples back to pixels. Trained with L1 plus a
// fixed random-feature perceptual term; a motion variant fine-tunes the
// encoder stem against binary motion clips with the decoder frozen.

struct TriPlaneLatent {
    Tensor hw;  // [c,h,w]
    Tensor hs;  // [c,h,s]
    Tensor ws;  // [c,w,s]

    std::int64_t numel() const { return hw.numel() + hs.numel() + ws.numel(); }
    Tensor pack() const;  // flat [numel]
    static TriPlaneLatent unpack(const Tensor& flat, const TriPlaneLatent& like);
};

struct CodecConfig {
    int clip_len = 16;  // S; paper 16
    int input_res = 32;  // paper 256
    int in_channels = 3;
    int base_channels = 16;  // paper 384
    int n_resblocks = 2;     // matches the paper
    int emb_dim = 4;         // c; paper 4
    int downsample = 2;      // spatial and temporal reduction
    int phase_dim = 4;       // decoder sub-slot embedding channels
    double lr = 3e-3;
    double lambda1 = 1.0, lambda2 = 0.2;
    long long phase2_start = 1000;  // step at which the perceptual term turns on

    void validate() const;
    int plane_res() const { return input_res / downsample; }
};

class VideoCodec {
public:
    VideoCodec(CodecConfig cfg, std::uint64_t init_seed);

    const CodecConfig& config() const { return cfg_; }
    nn::ParamStore& encoder_params() { return enc_ps_; }
    nn::ParamStore& decoder_params() { return dec_ps_; }
    const nn::ParamStore& encoder_params() const { return enc_ps_; }
    const nn::ParamStore& decoder_params() const { return dec_ps_; }

    // Encoder parameters adapted during the motion fine-tune (input stem
    // plus first residual block); everything else stays frozen there.
    std::vector<nn::Param*> finetune_params() const;

    struct PlaneVars {
        nn::Var hw, hs, ws;  // each [1,c,·,·]
    };
    PlaneVars encode_graph(const nn::Var& clip) const;  // clip [S,C,H,W]
    nn::Var decode_graph(const PlaneVars& z, int S) const;

    TriPlaneLatent encode_video(const Tensor& clip) const;
    Tensor decode_triplane(const TriPlaneLatent& z, int S = -1) const;

    void copy_params_from(const VideoCodec& other);

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
    struct ResBlock {
        Norm n1, n2;
        Conv c1, c2;
        nn::Var operator()(const nn::Var& x) const;
    };

    Conv make_conv(nn::ParamStore& ps, const std::string& name, int cin, int cout,
                   int k, int stride, int pad, Rng& rng);
    Norm make_norm(nn::ParamStore& ps, const std::string& name, int ch);
    ResBlock make_res(nn::ParamStore& ps, const std::string& name, int ch, Rng& rng);

    CodecConfig cfg_;
    nn::ParamStore enc_ps_, dec_ps_;

    Conv stem_, down_, head_, proj_hw_, proj_hs_, proj_ws_;
    std::vector<ResBlock> res1_, res2_;
    Conv dec_stem_, dec_up_, dec_out_;
    std::vector<ResBlock> dec_res1_, dec_res2_;
    Norm dec_out_norm_;
    nn::Param* phase_emb_ = nullptr;
};

// Fixed seeded multi-scale random-convolution feature pyramid standing in
// for a pretrained perceptual extractor; weights are constants.
class PerceptualFeatures {
public:
    PerceptualFeatures(int in_channels, std::uint64_t seed = 0x9e5eedULL);
    nn::Var diff_l1(const nn::Var& a, const nn::Var& b) const;
    double value(const Tensor& a, const Tensor& b) const;

private:
    std::vector<Tensor> weights_;  // per scale
    Tensor bias_;
};

// lambda1 * L1 + lambda2 * perceptual L1
double codec_loss(const Tensor& clip, const Tensor& recon, double lambda1,
                  double lambda2, const PerceptualFeatures& phi);

struct CodecTrainStats {
    double final_loss = 0.0;
    double final_psnr = 0.0;
    long long steps = 0;
    long long phase2_start = 0;
};

CodecTrainStats train_codec(VideoCodec& codec, const std::vector<Tensor>& clips,
                            long long steps, std::uint64_t seed,
                            std::ostream* log = nullptr, double stop_at_psnr = 0.0);

// Copies `rgb` into a motion codec and fine-tunes only finetune_params()
// against binary motion clips (1 channel replicated to in_channels). The
// decoder and non-designated encoder layers stay bit-identical.
struct FinetuneStats {
    double loss_before = 0.0, loss_after = 0.0;
    long long steps = 0;
};
FinetuneStats finetune_motion_encoder(VideoCodec& motion, const VideoCodec& rgb,
                                      const std::vector<Tensor>& motion_clips,
                                      long long steps, std::uint64_t seed,
                                      std::ostream* log = nullptr);

Tensor replicate_channels(const Tensor& clip, int channels);

}  // namespace mdtk
