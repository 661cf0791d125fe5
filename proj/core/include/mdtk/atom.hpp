#pragma once

#include <ostream>
#include <vector>

#include "mdtk/diffusion.hpp"
#include "mdtk/nn.hpp"
#include "mdtk/tensor.hpp"

namespace mdtk {

// AToM: transformer diffusion over residual landmark sequences. The
// denoiser splits coordinates into a lip stream (audio cross-attention)
// and a non-lip stream (no audio path), merges them back in original
// column order and conditions the merged trunk on the initial-landmark
// embedding. Timesteps enter every block through FiLM.

struct AtomConfig {
    int n_frames = 16;    // S; paper 156
    int audio_dim = 8;    // per-frame audio feature width
    int latent_dim = 64;  // paper 512
    int n_blocks = 2;     // per-stream disentangled blocks; paper 8
    int n_merge_blocks = 1;
    int n_cond_blocks = 2;  // audio / landmark encoder depth
    int n_heads = 2;
    bool merge_identity = false;  // ablation: merge trunk as identity
    double w_recon = 1.0, w_vel = 1.0;
    // Residuals are diffused as residual_scale * delta so their variance is
    // comparable to the unit Gaussian noise; samples are divided back.
    double residual_scale = 8.0;
    int T = 1000;
    double beta_start = 0.0015, beta_end = 0.0195;
    int sample_steps = 50;
    double lr = 3e-3;

    int point_dim() const { return 204; }
    int audio_frames() const { return 2 * n_frames; }
    void validate() const;
};

class AtomModel {
public:
    AtomModel(AtomConfig cfg, std::uint64_t init_seed);

    const AtomConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return ps_; }
    const nn::ParamStore& params() const { return ps_; }
    DiffusionSchedule schedule() const;

    // Graph-building forms; conditions stay Vars so gradient paths are
    // inspectable (disentanglement property).
    nn::Var encode_audio_graph(const nn::Var& features) const;        // [2S,d] -> [2S,L]
    nn::Var encode_init_landmark_graph(const nn::Var& l_id_row) const;  // [1,204] -> [S,L]
    nn::Var denoise_graph(const nn::Var& delta_t, int t, const nn::Var& f_audio,
                          const nn::Var& f_landmark) const;  // [S,204] -> [S,204]

    Tensor encode_audio(const Tensor& features) const;
    Tensor encode_init_landmark(const Tensor& l_id) const;  // [68,3] -> [S,L]
    Tensor atom_denoise(const Tensor& delta_t, int t, const Tensor& f_audio,
                        const Tensor& f_landmark) const;

private:
    struct EncoderBlock {
        nn::LayerNormGain ln1, ln2;
        nn::MultiHeadAttention attn;
        nn::FeedForward ffn;
    };
    struct DecoderBlock {
        nn::LayerNormGain ln1, ln2, ln3;
        nn::MultiHeadAttention self_attn, cross_attn;
        nn::FeedForward ffn;
        nn::Linear film;  // time embedding -> scale|shift
    };

    nn::Var run_encoder(const std::vector<EncoderBlock>& blocks, nn::Var x) const;
    nn::Var run_decoder(const std::vector<DecoderBlock>& blocks, nn::Var x,
                        const nn::Var& temb, const nn::Var& memory) const;
    nn::Var time_embedding(int t) const;  // [1,L]

    AtomConfig cfg_;
    nn::ParamStore ps_;

    nn::Linear audio_in_;
    nn::Param* audio_pos_ = nullptr;
    std::vector<EncoderBlock> audio_blocks_;
    nn::Linear lm_in_;
    nn::Param* lm_pos_ = nullptr;
    std::vector<EncoderBlock> lm_blocks_;

    nn::Linear lip_in_, nonlip_in_;
    nn::Param *lip_pos_ = nullptr, *nonlip_pos_ = nullptr;
    std::vector<DecoderBlock> lip_blocks_, nonlip_blocks_;
    nn::Linear lip_out_, nonlip_out_;

    nn::Linear merge_in_;
    nn::Param* merge_pos_ = nullptr;
    std::vector<DecoderBlock> merge_blocks_;
    nn::Linear merge_out_;

    nn::Linear time_fc1_, time_fc2_;
};

// w_recon * MSE(pred, target) + w_vel * MSE(diff_t pred, diff_t target)
nn::Var atom_loss(const nn::Var& pred, const nn::Var& target, double w_recon,
                  double w_vel);
double atom_loss_value(const Tensor& pred, const Tensor& target, double w_recon,
                       double w_vel);

struct AtomTrainItem {
    Tensor features;  // [2S,d]
    Tensor frontal;   // [S,68,3]; frame 0 is the identity landmark
};

struct TrainStats {
    double final_loss = 0.0;
    long long steps = 0;
};

// Deterministic per (model init, seed). Streams "step loss recon vel"
// records to `log` when given. Aborts with diagnostics on NaN loss.
TrainStats train_atom(AtomModel& model, const std::vector<AtomTrainItem>& items,
                      long long steps, std::uint64_t seed, std::ostream* log = nullptr,
                      double stop_below_loss = 0.0);

// Diffusion sampling in residual space followed by add_residual.
Tensor sample_motion(const AtomModel& model, const Tensor& features, const Tensor& l_id,
                     int n_steps, std::uint64_t seed, int* invocations = nullptr);

// k chained sample_motion calls; each clip reuses the previous clip's
// final frame as its identity landmark.
Tensor chain_motion(const AtomModel& model, const Tensor& features_long,
                    const Tensor& l_id, int n_steps, std::uint64_t seed);

}  // namespace mdtk
