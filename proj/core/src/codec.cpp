#include "mdtk/codec.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "mdtk/eval.hpp"

namespace mdtk {

using namespace nn;

Tensor TriPlaneLatent::pack() const {
    Tensor flat({static_cast<int>(numel())});
    std::int64_t off = 0;
    for (const Tensor* p : {&hw, &hs, &ws}) {
        std::copy_n(p->data(), p->numel(), flat.data() + off);
        off += p->numel();
    }
    return flat;
}

TriPlaneLatent TriPlaneLatent::unpack(const Tensor& flat, const TriPlaneLatent& like) {
    if (flat.numel() != like.numel())
        throw std::invalid_argument("TriPlaneLatent::unpack: size mismatch");
    TriPlaneLatent out{Tensor(like.hw.shape()), Tensor(like.hs.shape()),
                       Tensor(like.ws.shape())};
    std::int64_t off = 0;
    for (Tensor* p : {&out.hw, &out.hs, &out.ws}) {
        std::copy_n(flat.data() + off, p->numel(), p->data());
        off += p->numel();
    }
    return out;
}

void CodecConfig::validate() const {
    auto pow2 = [](int v) { return v >= 8 && (v & (v - 1)) == 0; };
    if (!pow2(clip_len) || !pow2(input_res))
        throw std::invalid_argument("CodecConfig: clip_len/input_res must be powers of two >= 8");
    if (emb_dim < 1 || base_channels < 1 || downsample < 1 || in_channels < 1 ||
        n_resblocks < 1)
        throw std::invalid_argument("CodecConfig: invalid dimensions");
    if (downsample != 2)
        throw std::invalid_argument("CodecConfig: only downsample=2 supported");
}

VideoCodec::Conv VideoCodec::make_conv(ParamStore& ps, const std::string& name, int cin,
                                       int cout, int k, int stride, int pad, Rng& rng) {
    Conv c;
    c.W = &ps.make(name + ".W", xavier_init(cin * k * k, cout * k * k,
                                            {cout, cin, k, k}, rng));
    c.b = &ps.make(name + ".b", Tensor({cout}));
    c.stride = stride;
    c.pad = pad;
    return c;
}

VideoCodec::Norm VideoCodec::make_norm(ParamStore& ps, const std::string& name, int ch) {
    Norm n;
    n.gamma = &ps.make(name + ".gamma", Tensor::full({ch}, 1.0));
    n.beta = &ps.make(name + ".beta", Tensor({ch}));
    return n;
}

VideoCodec::ResBlock VideoCodec::make_res(ParamStore& ps, const std::string& name,
                                          int ch, Rng& rng) {
    ResBlock r;
    r.n1 = make_norm(ps, name + ".n1", ch);
    r.n2 = make_norm(ps, name + ".n2", ch);
    r.c1 = make_conv(ps, name + ".c1", ch, ch, 3, 1, 1, rng);
    r.c2 = make_conv(ps, name + ".c2", ch, ch, 3, 1, 1, rng);
    return r;
}

Var VideoCodec::Conv::operator()(const Var& x) const {
    return conv2d(x, leaf(*W), leaf(*b), stride, pad);
}

Var VideoCodec::Norm::operator()(const Var& x) const {
    return channel_scale_shift(instance_norm(x), leaf(*gamma), leaf(*beta));
}

Var VideoCodec::ResBlock::operator()(const Var& x) const {
    Var h = c1(gelu(n1(x)));
    h = c2(gelu(n2(h)));
    return add(x, h);
}

VideoCodec::VideoCodec(CodecConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(Rng::mix(init_seed, 0xc0decULL));
    const int F = cfg_.base_channels, C = cfg_.in_channels, c = cfg_.emb_dim;

    auto make_res_stack = [&](ParamStore& ps, const std::string& name) {
        std::vector<ResBlock> stack;
        for (int i = 0; i < cfg_.n_resblocks; ++i)
            stack.push_back(make_res(ps, name + "." + std::to_string(i), F, rng));
        return stack;
    };
    stem_ = make_conv(enc_ps_, "stem", C, F, 3, 1, 1, rng);
    res1_ = make_res_stack(enc_ps_, "res1");
    down_ = make_conv(enc_ps_, "down", F, F, 3, 2, 1, rng);
    res2_ = make_res_stack(enc_ps_, "res2");
    head_ = make_conv(enc_ps_, "head", F, F, 3, 1, 1, rng);
    proj_hw_ = make_conv(enc_ps_, "proj_hw", F, c, 1, 1, 0, rng);
    proj_hs_ = make_conv(enc_ps_, "proj_hs", F, c, 1, 1, 0, rng);
    proj_ws_ = make_conv(enc_ps_, "proj_ws", F, c, 1, 1, 0, rng);

    const int dec_in = 3 * c + cfg_.phase_dim;
    phase_emb_ = &dec_ps_.make("phase_emb",
                               rng.normal_tensor({cfg_.downsample, cfg_.phase_dim}, 0.5));
    dec_stem_ = make_conv(dec_ps_, "dec_stem", dec_in, F, 3, 1, 1, rng);
    dec_res1_ = make_res_stack(dec_ps_, "dec_res1");
    dec_up_ = make_conv(dec_ps_, "dec_up", F, F, 3, 1, 1, rng);
    dec_res2_ = make_res_stack(dec_ps_, "dec_res2");
    dec_out_norm_ = make_norm(dec_ps_, "dec_out_norm", F);
    dec_out_ = make_conv(dec_ps_, "dec_out", F, C, 3, 1, 1, rng);
}

VideoCodec::PlaneVars VideoCodec::encode_graph(const Var& clip) const {
    const Tensor& v = clip->val;
    if (v.ndim() != 4 || v.dim(1) != cfg_.in_channels || v.dim(2) != cfg_.input_res ||
        v.dim(3) != cfg_.input_res)
        throw std::invalid_argument("encode_video: clip dims " + v.shape_str() +
                                    " do not match config");
    const int S = v.dim(0);
    Var x = stem_(clip);
    for (const auto& r : res1_) x = r(x);
    x = down_(x);
    for (const auto& r : res2_) x = r(x);
    x = head_(x);  // [S,F,h,w]
    int tf = (S % cfg_.downsample == 0) ? cfg_.downsample : 1;
    Var pooled = (tf > 1) ? avgpool_frames(x, tf) : x;
    PlaneVars z;
    z.hw = proj_hw_(plane_hw(pooled));
    z.hs = proj_hs_(plane_hs(pooled));
    z.ws = proj_ws_(plane_ws(pooled));
    return z;
}

Var VideoCodec::decode_graph(const PlaneVars& z, int S) const {
    const int h = z.hw->val.dim(2), w = z.hw->val.dim(3);
    const int s_extent = z.hs->val.dim(3);
    if (z.hs->val.dim(2) != h || z.ws->val.dim(2) != w ||
        z.ws->val.dim(3) != s_extent || z.hw->val.dim(1) != cfg_.emb_dim)
        throw std::invalid_argument("decode_triplane: inconsistent plane shapes");
    const int tf = S / s_extent;
    if (tf < 1 || S % s_extent != 0)
        throw std::invalid_argument("decode_triplane: frame count incompatible with planes");

    std::vector<Var> frames;
    frames.reserve(static_cast<std::size_t>(S));
    Var phase = leaf(*phase_emb_);
    for (int s = 0; s < S; ++s) {
        int ls = s / tf, ph = s % tf;
        Var pvec = reshape(narrow(phase, 0, ph, 1), {cfg_.phase_dim});
        Var fmap = concat_ch({z.hw, broadcast_col_hs(z.hs, ls, w),
                              broadcast_col_ws(z.ws, ls, h),
                              vec_to_map(pvec, h, w)});
        frames.push_back(fmap);
    }
    Var x = concat_frames(frames);  // [S, 3c+pe, h, w]
    x = dec_stem_(x);
    for (const auto& r : dec_res1_) x = r(x);
    x = dec_up_(upsample2x(x));
    for (const auto& r : dec_res2_) x = r(x);
    x = dec_out_(gelu(dec_out_norm_(x)));
    return sigmoid(x);
}

TriPlaneLatent VideoCodec::encode_video(const Tensor& clip) const {
    NoGrad ng;
    PlaneVars z = encode_graph(constant(clip));
    auto squeeze = [](const Tensor& t) {
        return t.reshaped({t.dim(1), t.dim(2), t.dim(3)});
    };
    return {squeeze(z.hw->val), squeeze(z.hs->val), squeeze(z.ws->val)};
}

Tensor VideoCodec::decode_triplane(const TriPlaneLatent& z, int S) const {
    NoGrad ng;
    if (S < 0) S = z.hs.dim(2) * cfg_.downsample;
    auto lift = [](const Tensor& t) {
        return constant(t.reshaped({1, t.dim(0), t.dim(1), t.dim(2)}));
    };
    PlaneVars pv{lift(z.hw), lift(z.hs), lift(z.ws)};
    return decode_graph(pv, S)->val;
}

std::vector<Param*> VideoCodec::finetune_params() const {
    std::vector<Param*> out;
    for (const auto& p : enc_ps_.owned)
        if (p->name.rfind("stem", 0) == 0 || p->name.rfind("res1", 0) == 0)
            out.push_back(p.get());
    return out;
}

void VideoCodec::copy_params_from(const VideoCodec& other) {
    enc_ps_.load(other.enc_ps_.to_tensors());
    dec_ps_.load(other.dec_ps_.to_tensors());
}

PerceptualFeatures::PerceptualFeatures(int in_channels, std::uint64_t seed) {
    Rng rng(seed);
    for (int scale = 0; scale < 3; ++scale)
        weights_.push_back(
            rng.normal_tensor({8, in_channels, 3, 3},
                              std::sqrt(2.0 / (in_channels * 9.0))));
    bias_ = Tensor({8});
}

Var PerceptualFeatures::diff_l1(const Var& a, const Var& b) const {
    Var xa = a, xb = b;
    Var total = constant(Tensor::scalar(0.0));
    for (std::size_t s = 0; s < weights_.size(); ++s) {
        Var wv = constant(weights_[s]);
        Var bv = constant(bias_);
        Var fa = conv2d(xa, wv, bv, 1, 1);
        Var fb = conv2d(xb, wv, bv, 1, 1);
        total = add(total, l1(fa, fb));
        if (s + 1 < weights_.size()) {
            if (xa->val.dim(2) % 2 != 0 || xa->val.dim(3) % 2 != 0) break;
            xa = avgpool2x(xa);
            xb = avgpool2x(xb);
        }
    }
    return scale(total, 1.0 / static_cast<double>(weights_.size()));
}

double PerceptualFeatures::value(const Tensor& a, const Tensor& b) const {
    NoGrad ng;
    return diff_l1(constant(a), constant(b))->val[0];
}

double codec_loss(const Tensor& clip, const Tensor& recon, double lambda1,
                  double lambda2, const PerceptualFeatures& phi) {
    if (!clip.same_shape(recon)) throw std::invalid_argument("codec_loss: shape mismatch");
    NoGrad ng;
    double loss = lambda1 * l1(constant(clip), constant(recon))->val[0];
    if (lambda2 > 0.0) loss += lambda2 * phi.value(clip, recon);
    return loss;
}

CodecTrainStats train_codec(VideoCodec& codec, const std::vector<Tensor>& clips,
                            long long steps, std::uint64_t seed, std::ostream* log,
                            double stop_at_psnr) {
    if (clips.empty()) throw std::invalid_argument("train_codec: empty corpus");
    const CodecConfig& cfg = codec.config();
    PerceptualFeatures phi(cfg.in_channels);
    Adam opt;
    opt.lr = cfg.lr;
    std::vector<Param*> params;
    for (auto* p : codec.encoder_params().all()) params.push_back(p);
    for (auto* p : codec.decoder_params().all()) params.push_back(p);

    (void)seed;  // training order is deterministic round-robin
    CodecTrainStats stats;
    stats.phase2_start = cfg.phase2_start;
    for (long long step = 0; step < steps; ++step) {
        // Cosine decay to 2% of the base rate, as in train_atom.
        double frac = static_cast<double>(step) / static_cast<double>(steps);
        opt.lr = cfg.lr * (0.02 + 0.98 * 0.5 * (1.0 + std::cos(std::numbers::pi * frac)));
        const Tensor& clip = clips[static_cast<std::size_t>(step % clips.size())];
        bool phase2 = step >= cfg.phase2_start && cfg.lambda2 > 0.0;
        Var cv = constant(clip);
        Var recon = codec.decode_graph(codec.encode_graph(cv), clip.dim(0));
        Var loss = scale(l1(recon, cv), cfg.lambda1);
        if (phase2) loss = add(loss, scale(phi.diff_l1(recon, cv), cfg.lambda2));

        double lv = loss->val[0];
        if (!std::isfinite(lv))
            throw std::runtime_error("train_codec: NaN loss at step " +
                                     std::to_string(step) + " (lr=" +
                                     std::to_string(opt.lr) + ", grad_norm=" +
                                     std::to_string(grad_norm(params)) + ")");
        for (auto* p : params) p->zero_grad();
        backward(loss);
        opt.step(params);
        stats.final_loss = lv;
        stats.steps = step + 1;

        if (step % 100 == 99 || step + 1 == steps) {
            double min_psnr = 1e300;
            for (const Tensor& c : clips) {
                Tensor r = codec.decode_triplane(codec.encode_video(c), c.dim(0));
                min_psnr = std::min(min_psnr, psnr(c, r));
            }
            stats.final_psnr = min_psnr;
            if (log)
                (*log) << "step " << step << " loss " << lv << " min_psnr " << min_psnr
                       << (phase2 ? " phase 2" : " phase 1") << "\n";
            if (stop_at_psnr > 0.0 && min_psnr >= stop_at_psnr &&
                (cfg.lambda2 == 0.0 || phase2))
                break;
        }
    }
    return stats;
}

Tensor replicate_channels(const Tensor& clip, int channels) {
    if (clip.ndim() != 4 || clip.dim(1) != 1)
        throw std::invalid_argument("replicate_channels: need [S,1,H,W]");
    Tensor out({clip.dim(0), channels, clip.dim(2), clip.dim(3)});
    const std::int64_t HW = static_cast<std::int64_t>(clip.dim(2)) * clip.dim(3);
    for (int s = 0; s < clip.dim(0); ++s)
        for (int c = 0; c < channels; ++c)
            std::copy_n(clip.data() + s * HW, HW,
                        out.data() + (static_cast<std::int64_t>(s) * channels + c) * HW);
    return out;
}

FinetuneStats finetune_motion_encoder(VideoCodec& motion, const VideoCodec& rgb,
                                      const std::vector<Tensor>& motion_clips,
                                      long long steps, std::uint64_t seed,
                                      std::ostream* log) {
    if (motion_clips.empty())
        throw std::invalid_argument("finetune_motion_encoder: empty corpus");
    motion.copy_params_from(rgb);
    const CodecConfig& cfg = motion.config();

    std::vector<Tensor> reps;
    for (const Tensor& m : motion_clips)
        reps.push_back(replicate_channels(m, cfg.in_channels));

    auto recon_loss = [&]() {
        NoGrad ng;
        double acc = 0.0;
        for (const Tensor& r : reps) {
            Tensor out = motion.decode_triplane(motion.encode_video(r), r.dim(0));
            acc += l1(constant(out), constant(r))->val[0];
        }
        return acc / static_cast<double>(reps.size());
    };

    FinetuneStats stats;
    stats.loss_before = recon_loss();
    Adam opt;
    opt.lr = cfg.lr;
    std::vector<Param*> tuned = motion.finetune_params();
    if (tuned.empty())
        throw std::runtime_error("finetune_motion_encoder: no designated layers");
    (void)seed;
    for (long long step = 0; step < steps; ++step) {
        const Tensor& r = reps[static_cast<std::size_t>(step % reps.size())];
        Var cv = constant(r);
        Var recon = motion.decode_graph(motion.encode_graph(cv), r.dim(0));
        Var loss = l1(recon, cv);
        double lv = loss->val[0];
        if (!std::isfinite(lv))
            throw std::runtime_error("finetune_motion_encoder: NaN loss at step " +
                                     std::to_string(step));
        for (auto* p : tuned) p->zero_grad();
        // frozen parameters accumulate no update: they are simply not stepped,
        // but zero their grads too so a later optimizer cannot pick them up
        for (auto* p : motion.decoder_params().all()) p->zero_grad();
        for (auto* p : motion.encoder_params().all()) p->zero_grad();
        backward(loss);
        opt.step(tuned);
        if (log && step % 50 == 0) (*log) << "step " << step << " loss " << lv << "\n";
        stats.steps = step + 1;
    }
    stats.loss_after = recon_loss();
    return stats;
}

}  // namespace mdtk
