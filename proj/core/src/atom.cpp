#include "mdtk/atom.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "mdtk/geometry.hpp"

namespace mdtk {

using namespace nn;

void AtomConfig::validate() const {
    if (n_frames < 2 || audio_dim < 1 || latent_dim < 2 || n_blocks < 1 ||
        n_heads < 1 || latent_dim % n_heads != 0 || latent_dim % 2 != 0)
        throw std::invalid_argument("AtomConfig: invalid dimensions");
    if (w_recon < 0.0 || w_vel < 0.0)
        throw std::invalid_argument("AtomConfig: negative loss weights");
    if (residual_scale <= 0.0)
        throw std::invalid_argument("AtomConfig: residual_scale must be positive");
    if (T < 1 || sample_steps < 1 || sample_steps > T)
        throw std::invalid_argument("AtomConfig: invalid step counts");
    if (beta_start <= 0.0 || beta_end >= 1.0 || beta_start > beta_end)
        throw std::invalid_argument("AtomConfig: invalid beta range");
}

DiffusionSchedule AtomModel::schedule() const {
    return make_linear_schedule(cfg_.T, cfg_.beta_start, cfg_.beta_end);
}

AtomModel::AtomModel(AtomConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(Rng::mix(init_seed, 0xa70aULL));
    const int L = cfg_.latent_dim;
    const int hid = 2 * L;

    auto make_encoder = [&](const std::string& name, int depth) {
        std::vector<EncoderBlock> blocks;
        for (int i = 0; i < depth; ++i) {
            std::string p = name + std::to_string(i);
            EncoderBlock b;
            b.ln1 = LayerNormGain(ps_, p + ".ln1", L);
            b.ln2 = LayerNormGain(ps_, p + ".ln2", L);
            b.attn = MultiHeadAttention(ps_, p + ".attn", L, cfg_.n_heads, rng);
            b.ffn = FeedForward(ps_, p + ".ffn", L, hid, rng);
            blocks.push_back(std::move(b));
        }
        return blocks;
    };
    auto make_decoder = [&](const std::string& name, int depth) {
        std::vector<DecoderBlock> blocks;
        for (int i = 0; i < depth; ++i) {
            std::string p = name + std::to_string(i);
            DecoderBlock b;
            b.ln1 = LayerNormGain(ps_, p + ".ln1", L);
            b.ln2 = LayerNormGain(ps_, p + ".ln2", L);
            b.ln3 = LayerNormGain(ps_, p + ".ln3", L);
            b.self_attn = MultiHeadAttention(ps_, p + ".self", L, cfg_.n_heads, rng);
            b.cross_attn = MultiHeadAttention(ps_, p + ".cross", L, cfg_.n_heads, rng);
            b.ffn = FeedForward(ps_, p + ".ffn", L, hid, rng);
            b.film = Linear(ps_, p + ".film", L, 2 * L, rng);
            blocks.push_back(std::move(b));
        }
        return blocks;
    };

    const int S = cfg_.n_frames;
    const int lip_w = static_cast<int>(lip_indices().size()) * 3;
    const int nonlip_w = cfg_.point_dim() - lip_w;

    audio_in_ = Linear(ps_, "audio_in", cfg_.audio_dim, L, rng);
    audio_pos_ = &ps_.make("audio_pos",
                           rng.normal_tensor({cfg_.audio_frames(), L}, 0.02));
    audio_blocks_ = make_encoder("audio_enc", cfg_.n_cond_blocks);
    lm_in_ = Linear(ps_, "lm_in", cfg_.point_dim(), L, rng);
    lm_pos_ = &ps_.make("lm_pos", rng.normal_tensor({S, L}, 0.02));
    lm_blocks_ = make_encoder("lm_enc", cfg_.n_cond_blocks);

    lip_in_ = Linear(ps_, "lip_in", lip_w, L, rng);
    nonlip_in_ = Linear(ps_, "nonlip_in", nonlip_w, L, rng);
    lip_pos_ = &ps_.make("lip_pos", rng.normal_tensor({S, L}, 0.02));
    nonlip_pos_ = &ps_.make("nonlip_pos", rng.normal_tensor({S, L}, 0.02));
    lip_blocks_ = make_decoder("lip_block", cfg_.n_blocks);
    nonlip_blocks_ = make_decoder("nonlip_block", cfg_.n_blocks);
    lip_out_ = Linear(ps_, "lip_out", L, lip_w, rng);
    nonlip_out_ = Linear(ps_, "nonlip_out", L, nonlip_w, rng);

    merge_in_ = Linear(ps_, "merge_in", cfg_.point_dim(), L, rng);
    merge_pos_ = &ps_.make("merge_pos", rng.normal_tensor({S, L}, 0.02));
    merge_blocks_ = make_decoder("merge_block", cfg_.n_merge_blocks);
    merge_out_ = Linear(ps_, "merge_out", L, cfg_.point_dim(), rng);

    time_fc1_ = Linear(ps_, "time_fc1", L, L, rng);
    time_fc2_ = Linear(ps_, "time_fc2", L, L, rng);
}

Var AtomModel::time_embedding(int t) const {
    Tensor feat = timestep_features(t, cfg_.latent_dim).reshaped({1, cfg_.latent_dim});
    return time_fc2_(gelu(time_fc1_(constant(feat))));
}

Var AtomModel::run_encoder(const std::vector<EncoderBlock>& blocks, Var x) const {
    for (const auto& b : blocks) {
        x = add(x, b.attn(b.ln1(x), b.ln1(x)));
        x = add(x, b.ffn(b.ln2(x)));
    }
    return x;
}

Var AtomModel::run_decoder(const std::vector<DecoderBlock>& blocks, Var x,
                           const Var& temb, const Var& memory) const {
    const int L = cfg_.latent_dim;
    for (const auto& b : blocks) {
        Var ss = b.film(temb);  // [1, 2L]
        Var sc = reshape(narrow(ss, 1, 0, L), {L});
        Var sh = reshape(narrow(ss, 1, L, L), {L});
        x = add_rowvec(mul_rowvec(x, add_scalar(sc, 1.0)), sh);
        Var q = b.ln1(x);
        x = add(x, b.self_attn(q, q));
        x = add(x, b.cross_attn(b.ln2(x), memory));
        x = add(x, b.ffn(b.ln3(x)));
    }
    return x;
}

Var AtomModel::encode_audio_graph(const Var& features) const {
    if (features->val.ndim() != 2 || features->val.dim(0) != cfg_.audio_frames() ||
        features->val.dim(1) != cfg_.audio_dim)
        throw std::invalid_argument("encode_audio: expected [" +
                                    std::to_string(cfg_.audio_frames()) + "," +
                                    std::to_string(cfg_.audio_dim) + "], got " +
                                    features->val.shape_str());
    Var x = add(audio_in_(features), leaf(*audio_pos_));
    return run_encoder(audio_blocks_, x);
}

Var AtomModel::encode_init_landmark_graph(const Var& l_id_row) const {
    if (l_id_row->val.ndim() != 2 || l_id_row->val.dim(0) != 1 ||
        l_id_row->val.dim(1) != cfg_.point_dim())
        throw std::invalid_argument("encode_init_landmark: expected [1,204]");
    if (!all_finite(l_id_row->val))
        throw std::invalid_argument("encode_init_landmark: non-finite input");
    Var x = add(repeat_rows(lm_in_(l_id_row), cfg_.n_frames), leaf(*lm_pos_));
    return run_encoder(lm_blocks_, x);
}

Var AtomModel::denoise_graph(const Var& delta_t, int t, const Var& f_audio,
                             const Var& f_landmark) const {
    const int S = cfg_.n_frames;
    if (delta_t->val.ndim() != 2 || delta_t->val.dim(0) != S ||
        delta_t->val.dim(1) != cfg_.point_dim())
        throw std::invalid_argument("atom_denoise: expected [S,204], got " +
                                    delta_t->val.shape_str());
    const auto& lips = lip_indices();
    const auto& nonlips = nonlip_indices();
    std::vector<int> lip_cols, nonlip_cols;
    for (int i : lips)
        for (int j = 0; j < 3; ++j) lip_cols.push_back(3 * i + j);
    for (int i : nonlips)
        for (int j = 0; j < 3; ++j) nonlip_cols.push_back(3 * i + j);

    Var temb = time_embedding(t);
    Var lip_mem = concat({f_audio, temb}, 0);  // audio only reaches the lip stream
    Var nonlip_mem = temb;

    Var lip_x = add(lip_in_(select_cols(delta_t, lip_cols)), leaf(*lip_pos_));
    lip_x = run_decoder(lip_blocks_, lip_x, temb, lip_mem);
    Var nonlip_x = add(nonlip_in_(select_cols(delta_t, nonlip_cols)), leaf(*nonlip_pos_));
    nonlip_x = run_decoder(nonlip_blocks_, nonlip_x, temb, nonlip_mem);

    Var merged = add(scatter_cols(lip_out_(lip_x), lip_cols, cfg_.point_dim()),
                     scatter_cols(nonlip_out_(nonlip_x), nonlip_cols, cfg_.point_dim()));
    if (cfg_.merge_identity) return merged;

    Var h = add(merge_in_(merged), leaf(*merge_pos_));
    Var merge_mem = concat({f_landmark, temb}, 0);
    h = run_decoder(merge_blocks_, h, temb, merge_mem);
    return add(merged, merge_out_(h));
}

Tensor AtomModel::encode_audio(const Tensor& features) const {
    NoGrad ng;
    return encode_audio_graph(constant(features))->val;
}

Tensor AtomModel::encode_init_landmark(const Tensor& l_id) const {
    NoGrad ng;
    Tensor row = l_id.reshaped({1, cfg_.point_dim()});
    return encode_init_landmark_graph(constant(row))->val;
}

Tensor AtomModel::atom_denoise(const Tensor& delta_t, int t, const Tensor& f_audio,
                               const Tensor& f_landmark) const {
    NoGrad ng;
    return denoise_graph(constant(delta_t), t, constant(f_audio), constant(f_landmark))
        ->val;
}

Var atom_loss(const Var& pred, const Var& target, double w_recon, double w_vel) {
    if (w_recon < 0.0 || w_vel < 0.0)
        throw std::invalid_argument("atom_loss: negative weights");
    Var loss = scale(mse(pred, target), w_recon);
    if (w_vel > 0.0)
        loss = add(loss, scale(mse(row_diff(pred), row_diff(target)), w_vel));
    return loss;
}

double atom_loss_value(const Tensor& pred, const Tensor& target, double w_recon,
                       double w_vel) {
    return atom_loss(constant(pred), constant(target), w_recon, w_vel)->val[0];
}

namespace {

Tensor residual_matrix(const Tensor& frontal, const Tensor& l_id) {
    const int S = frontal.dim(0);
    Tensor delta({S, 204});
    for (int s = 0; s < S; ++s)
        for (int i = 0; i < kNumLandmarks; ++i)
            for (int j = 0; j < 3; ++j)
                delta.at(s, 3 * i + j) = frontal.at(s, i, j) - l_id.at(i, j);
    return delta;
}

Tensor seq_from_matrix(const Tensor& m) {
    const int S = m.dim(0);
    Tensor seq({S, kNumLandmarks, 3});
    for (int s = 0; s < S; ++s)
        for (int i = 0; i < kNumLandmarks; ++i)
            for (int j = 0; j < 3; ++j) seq.at(s, i, j) = m.at(s, 3 * i + j);
    return seq;
}

}  // namespace

TrainStats train_atom(AtomModel& model, const std::vector<AtomTrainItem>& items,
                      long long steps, std::uint64_t seed, std::ostream* log,
                      double stop_below_loss) {
    if (items.empty()) throw std::invalid_argument("train_atom: empty corpus");
    const AtomConfig& cfg = model.config();
    DiffusionSchedule sched = model.schedule();
    Adam opt;
    opt.lr = cfg.lr;
    auto params = model.params().all();

    struct Prepared {
        Tensor features, delta0, l_id_row;
    };
    std::vector<Prepared> prep;
    for (const auto& it : items) {
        if (it.frontal.dim(0) != cfg.n_frames)
            throw std::invalid_argument("train_atom: clip length != config n_frames");
        Prepared p;
        p.features = it.features;
        Tensor l_id = sequence_frame(it.frontal, 0);
        p.delta0 = residual_matrix(it.frontal, l_id);
        for (auto& v : p.delta0.vec()) v *= cfg.residual_scale;
        p.l_id_row = l_id.reshaped({1, cfg.point_dim()});
        prep.push_back(std::move(p));
    }

    Rng base(seed);
    TrainStats stats;
    double smooth = -1.0;
    for (long long step = 0; step < steps; ++step) {
        // Cosine decay to 2% of the base rate: the diffusion loss has an
        // irreducible per-step variance (random t and eps), so a constant
        // rate plateaus well above the overfit floor.
        double frac = static_cast<double>(step) / static_cast<double>(steps);
        opt.lr = cfg.lr * (0.02 + 0.98 * 0.5 * (1.0 + std::cos(std::numbers::pi * frac)));
        const Prepared& item = prep[static_cast<std::size_t>(step % prep.size())];
        Rng rng = base.fork(static_cast<std::uint64_t>(step));
        int t = rng.uniform_int(1, cfg.T);
        Tensor eps = rng.normal_tensor(item.delta0.shape());
        Tensor delta_t = forward_noise(item.delta0, t, eps, sched);

        Var f_audio = model.encode_audio_graph(constant(item.features));
        Var f_lm = model.encode_init_landmark_graph(constant(item.l_id_row));
        Var pred = model.denoise_graph(constant(delta_t), t, f_audio, f_lm);
        Var target = constant(item.delta0);
        Var recon = mse(pred, target);
        Var vel = mse(row_diff(pred), row_diff(target));
        Var loss = add(scale(recon, cfg.w_recon), scale(vel, cfg.w_vel));

        double lv = loss->val[0];
        if (!std::isfinite(lv)) {
            for (auto* p : params) p->zero_grad();
            throw std::runtime_error("train_atom: NaN loss at step " +
                                     std::to_string(step) + " (lr=" +
                                     std::to_string(opt.lr) + ", grad_norm=" +
                                     std::to_string(grad_norm(params)) + ")");
        }
        for (auto* p : params) p->zero_grad();
        backward(loss);
        opt.step(params);

        // Report in natural residual units (the optimization target is the
        // residual_scale'd version, which inflates the MSE by scale^2).
        double natural = lv / (cfg.residual_scale * cfg.residual_scale);
        smooth = smooth < 0.0 ? natural : 0.98 * smooth + 0.02 * natural;
        stats.final_loss = smooth;
        stats.steps = step + 1;
        if (log && (step % 50 == 0 || step + 1 == steps))
            (*log) << "step " << step << " loss " << natural << " recon "
                   << recon->val[0] << " vel " << vel->val[0] << "\n";
        if (stop_below_loss > 0.0 && smooth < stop_below_loss &&
            step >= static_cast<long long>(prep.size()))
            break;
    }
    return stats;
}

Tensor sample_motion(const AtomModel& model, const Tensor& features, const Tensor& l_id,
                     int n_steps, std::uint64_t seed, int* invocations) {
    const AtomConfig& cfg = model.config();
    if (features.dim(0) != cfg.audio_frames())
        throw std::invalid_argument("sample_motion: audio length != 2S");
    Tensor f_audio = model.encode_audio(features);
    Tensor f_lm = model.encode_init_landmark(l_id);
    DiffusionSchedule sched = model.schedule();
    auto denoiser = [&](const Tensor& z, int t) {
        Tensor out = model.atom_denoise(z, t, f_audio, f_lm);
        if (!all_finite(out))
            throw std::runtime_error("sample_motion: non-finite denoiser output");
        return out;
    };
    SampleResult res = sample(denoiser, {cfg.n_frames, cfg.point_dim()}, sched, n_steps,
                              seed);
    if (invocations) *invocations = res.invocations;
    Tensor delta = res.z0;
    for (auto& v : delta.vec()) v /= cfg.residual_scale;
    return add_residual(l_id, seq_from_matrix(delta));
}

Tensor chain_motion(const AtomModel& model, const Tensor& features_long,
                    const Tensor& l_id, int n_steps, std::uint64_t seed) {
    const AtomConfig& cfg = model.config();
    const int per = cfg.audio_frames();
    if (features_long.dim(0) % per != 0)
        throw std::invalid_argument("chain_motion: audio length not a multiple of 2S");
    const int k = features_long.dim(0) / per;
    Tensor out({k * cfg.n_frames, kNumLandmarks, 3});
    Tensor cur_id = l_id;
    for (int c = 0; c < k; ++c) {
        Tensor chunk({per, cfg.audio_dim});
        std::copy_n(features_long.data() +
                        static_cast<std::size_t>(c) * per * cfg.audio_dim,
                    static_cast<std::size_t>(per) * cfg.audio_dim, chunk.data());
        Tensor seq = sample_motion(model, chunk, cur_id, n_steps,
                                   Rng::mix(seed, static_cast<std::uint64_t>(c)));
        std::copy_n(seq.data(), seq.numel(),
                    out.data() + static_cast<std::size_t>(c) * seq.numel());
        cur_id = sequence_frame(seq, cfg.n_frames - 1);
    }
    return out;
}

}  // namespace mdtk
