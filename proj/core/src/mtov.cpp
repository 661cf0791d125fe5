#include "mdtk/mtov.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "mdtk/geometry.hpp"

namespace mdtk {

using namespace nn;

void MtovConfig::validate() const {
    if (latent_channels < 1 || base_channels < 1 || n_heads < 1 || time_dim < 2)
        throw std::invalid_argument("MtovConfig: invalid dimensions");
    if (base_channels % n_heads != 0)
        throw std::invalid_argument("MtovConfig: heads must divide base_channels");
    if (T < 1 || sample_steps < 1 || sample_steps > T)
        throw std::invalid_argument("MtovConfig: invalid step counts");
    if (eta < 0.0 || eta > 1.0)
        throw std::invalid_argument("MtovConfig: eta outside [0,1]");
}

void ConditionSet::validate() const {
    auto check = [&](const TriPlaneLatent& z, const char* what) {
        if (!z.hw.same_shape(z_landmark.hw) || !z.hs.same_shape(z_landmark.hs) ||
            !z.ws.same_shape(z_landmark.ws))
            throw std::invalid_argument(std::string("ConditionSet: ") + what +
                                        " plane extents disagree");
    };
    check(z_pose, "pose");
    check(z_identity, "identity");
}

Var MtovModel::Conv::operator()(const Var& x) const {
    return conv2d(x, leaf(*W), leaf(*b), stride, pad);
}

Var MtovModel::Norm::operator()(const Var& x) const {
    return channel_scale_shift(instance_norm(x), leaf(*gamma), leaf(*beta));
}

Var MtovModel::ResBlock::operator()(const Var& x, const Var& temb) const {
    const int F = x->val.dim(1);
    Var ss = film_lin(temb);  // [1,2F]
    Var sc = reshape(narrow(ss, 1, 0, F), {F});
    Var sh = reshape(narrow(ss, 1, F, F), {F});
    Var h = c1(gelu(n1(x)));
    h = film(h, sc, sh);
    h = c2(gelu(n2(h)));
    return add(x, h);
}

MtovModel::Conv MtovModel::make_conv(const std::string& name, int cin, int cout, int k,
                                     int stride, int pad, Rng& rng) {
    Conv c;
    c.W = &ps_.make(name + ".W",
                    xavier_init(cin * k * k, cout * k * k, {cout, cin, k, k}, rng));
    c.b = &ps_.make(name + ".b", Tensor({cout}));
    c.stride = stride;
    c.pad = pad;
    return c;
}

MtovModel::Norm MtovModel::make_norm(const std::string& name, int ch) {
    Norm n;
    n.gamma = &ps_.make(name + ".gamma", Tensor::full({ch}, 1.0));
    n.beta = &ps_.make(name + ".beta", Tensor({ch}));
    return n;
}

MtovModel::ResBlock MtovModel::make_res(const std::string& name, int ch, Rng& rng) {
    ResBlock r;
    r.n1 = make_norm(name + ".n1", ch);
    r.n2 = make_norm(name + ".n2", ch);
    r.c1 = make_conv(name + ".c1", ch, ch, 3, 1, 1, rng);
    r.c2 = make_conv(name + ".c2", ch, ch, 3, 1, 1, rng);
    r.film_lin = Linear(ps_, name + ".film", ps_f_, 2 * ch, rng);
    return r;
}

MtovModel::MtovModel(MtovConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(Rng::mix(init_seed, 0x303a0ULL));
    const int F = cfg_.base_channels;
    ps_f_ = F;
    time_fc1_ = Linear(ps_, "time.fc1", cfg_.time_dim, F, rng);
    time_fc2_ = Linear(ps_, "time.fc2", F, F, rng);
    stem_ = make_conv("stem", cfg_.stem_channels(), F, 3, 1, 1, rng);
    rb1_ = make_res("rb1", F, rng);
    down_ = make_conv("down", F, F, 3, 2, 1, rng);
    rb2_ = make_res("rb2", F, rng);
    attn_ln_ = LayerNormGain(ps_, "attn.ln", F);
    attn_ = MultiHeadAttention(ps_, "attn", F, cfg_.n_heads, rng);
    rb3_ = make_res("rb3", F, rng);
    up_ = make_conv("up", F, F, 3, 1, 1, rng);
    fuse_ = make_conv("fuse", 2 * F, F, 3, 1, 1, rng);
    rb4_ = make_res("rb4", F, rng);
    out_norm_ = make_norm("out.norm", F);
    out_ = make_conv("out", F, cfg_.latent_channels, 3, 1, 1, rng);
}

DiffusionSchedule MtovModel::schedule() const {
    return make_linear_schedule(cfg_.T, cfg_.beta_start, cfg_.beta_end, cfg_.eta);
}

Var MtovModel::time_embedding(int t) const {
    Var feats = constant(timestep_features(t, cfg_.time_dim).reshaped({1, cfg_.time_dim}));
    return time_fc2_(gelu(time_fc1_(feats)));
}

MtovModel::DownState MtovModel::run_down(const Var& x, const Var& temb) const {
    if (x->val.dim(1) != cfg_.stem_channels())
        throw std::invalid_argument("mtov_denoise: stem expects " +
                                    std::to_string(cfg_.stem_channels()) +
                                    " channels, got " + std::to_string(x->val.dim(1)));
    DownState st;
    st.skip = rb1_(stem_(x), temb);
    st.bottom = rb2_(down_(st.skip), temb);
    return st;
}

Var MtovModel::run_up(const Var& mid, const Var& skip, const Var& temb) const {
    Var h = rb3_(mid, temb);
    h = up_(upsample2x(h));
    h = crop2d(h, skip->val.dim(2), skip->val.dim(3));
    h = fuse_(concat_ch({h, skip}));
    h = rb4_(h, temb);
    return out_(gelu(out_norm_(h)));
}

MtovModel::PlaneSet MtovModel::denoise_graph(const PlaneSet& z_t, int t,
                                             const PlaneSet& z_l, const PlaneSet& z_p,
                                             const PlaneSet& z_i) const {
    Var temb = time_embedding(t);
    Var in_hw = concat_ch({z_t.hw, z_l.hw, z_p.hw, z_i.hw});
    Var in_hs = concat_ch({z_t.hs, z_l.hs, z_p.hs, z_i.hs});
    Var in_ws = concat_ch({z_t.ws, z_l.ws, z_p.ws, z_i.ws});
    DownState hw = run_down(in_hw, temb);
    DownState hs = run_down(in_hs, temb);
    DownState ws = run_down(in_ws, temb);

    // Cross-plane attention over the concatenated bottom tokens.
    const auto bottom_tokens = [](const Var& v) { return chw_to_tokens(v); };
    Var tok_hw = bottom_tokens(hw.bottom);
    Var tok_hs = bottom_tokens(hs.bottom);
    Var tok_ws = bottom_tokens(ws.bottom);
    Var tokens = concat({tok_hw, tok_hs, tok_ws}, 0);
    Var normed = attn_ln_(tokens);
    Var attended = add(tokens, attn_(normed, normed));
    const int n_hw = tok_hw->val.dim(0), n_hs = tok_hs->val.dim(0),
              n_ws = tok_ws->val.dim(0);
    auto back = [&](int start, int len, const Var& like) {
        return tokens_to_chw(narrow(attended, 0, start, len), like->val.dim(2),
                             like->val.dim(3));
    };
    PlaneSet out;
    out.hw = run_up(back(0, n_hw, hw.bottom), hw.skip, temb);
    out.hs = run_up(back(n_hw, n_hs, hs.bottom), hs.skip, temb);
    out.ws = run_up(back(n_hw + n_hs, n_ws, ws.bottom), ws.skip, temb);
    return out;
}

MtovModel::PlaneSet MtovModel::lift(const TriPlaneLatent& z) {
    auto up = [](const Tensor& t) {
        return constant(t.reshaped({1, t.dim(0), t.dim(1), t.dim(2)}));
    };
    return {up(z.hw), up(z.hs), up(z.ws)};
}

TriPlaneLatent MtovModel::mtov_denoise(const TriPlaneLatent& z_t, int t,
                                       const ConditionSet& cond) const {
    cond.validate();
    NoGrad ng;
    PlaneSet out = denoise_graph(lift(z_t), t, lift(cond.z_landmark), lift(cond.z_pose),
                                 lift(cond.z_identity));
    auto squeeze = [](const Tensor& v) {
        return v.reshaped({v.dim(1), v.dim(2), v.dim(3)});
    };
    return {squeeze(out.hw->val), squeeze(out.hs->val), squeeze(out.ws->val)};
}

Tensor make_pose_frames(const Tensor& clip) {
    if (clip.ndim() != 4) throw std::invalid_argument("make_pose_frames: need [S,C,H,W]");
    const int H = clip.dim(2);
    if (H % 2 != 0) throw std::invalid_argument("make_pose_frames: H must be even");
    Tensor out = clip;
    const int W = clip.dim(3);
    for (int s = 0; s < clip.dim(0); ++s)
        for (int c = 0; c < clip.dim(1); ++c)
            for (int h = H / 2; h < H; ++h)
                for (int w = 0; w < W; ++w) out.at(s, c, h, w) = 0.0;
    return out;
}

ConditionSet build_conditions(const Tensor& landmarks, const Tensor& pose_frames,
                              const Tensor& identity_clip, const VideoCodec& motion_codec,
                              const VideoCodec& pose_codec,
                              const VideoCodec& identity_codec) {
    if (pose_frames.ndim() != 4 || identity_clip.ndim() != 4)
        throw std::invalid_argument("build_conditions: clips must be [S,C,H,W]");
    const int H = pose_frames.dim(2), W = pose_frames.dim(3);
    Tensor raster = rasterize_motion(landmarks, H, W);
    ConditionSet cond;
    cond.z_landmark = motion_codec.encode_video(
        replicate_channels(raster, motion_codec.config().in_channels));
    cond.z_pose = pose_codec.encode_video(pose_frames);
    cond.z_identity = identity_codec.encode_video(identity_clip);
    cond.validate();
    return cond;
}

Tensor blend(const Tensor& generated, const Tensor& background, double sigma) {
    if (!generated.same_shape(background) || generated.ndim() != 4)
        throw std::invalid_argument("blend: clips must be [S,C,H,W] with equal dims");
    if (sigma < 0.0) throw std::invalid_argument("blend: sigma must be >= 0");
    const int H = generated.dim(2), W = generated.dim(3);

    std::vector<double> mask(static_cast<std::size_t>(H), 0.0);
    for (int h = H / 2; h < H; ++h) mask[static_cast<std::size_t>(h)] = 1.0;
    if (sigma > 0.0) {
        int radius = static_cast<int>(std::ceil(3.0 * sigma));
        std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
        double norm = 0.0;
        for (int i = -radius; i <= radius; ++i) {
            double v = std::exp(-0.5 * (i / sigma) * (i / sigma));
            kernel[static_cast<std::size_t>(i + radius)] = v;
            norm += v;
        }
        std::vector<double> smoothed(mask.size(), 0.0);
        for (int h = 0; h < H; ++h) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                int src = std::clamp(h + i, 0, H - 1);
                acc += kernel[static_cast<std::size_t>(i + radius)] *
                       mask[static_cast<std::size_t>(src)];
            }
            smoothed[static_cast<std::size_t>(h)] = acc / norm;
        }
        mask = std::move(smoothed);
    }

    Tensor out(generated.shape());
    for (int s = 0; s < generated.dim(0); ++s)
        for (int c = 0; c < generated.dim(1); ++c)
            for (int h = 0; h < H; ++h) {
                double a = mask[static_cast<std::size_t>(h)];
                for (int w = 0; w < W; ++w)
                    out.at(s, c, h, w) = (a == 0.0)   ? background.at(s, c, h, w)
                                         : (a == 1.0) ? generated.at(s, c, h, w)
                                                      : a * generated.at(s, c, h, w) +
                                                            (1.0 - a) * background.at(s, c, h, w);
            }
    return out;
}

TrainStats train_mtov(MtovModel& model, const std::vector<MtovTrainItem>& items,
                      long long steps, std::uint64_t seed, std::ostream* log,
                      double stop_below_loss) {
    if (items.empty()) throw std::invalid_argument("train_mtov: empty corpus");
    const MtovConfig& cfg = model.config();
    DiffusionSchedule sched = model.schedule();
    Adam opt;
    opt.lr = cfg.lr;
    std::vector<Param*> params = model.params().all();
    Rng rng(Rng::mix(seed, 0x77a111ULL));

    TrainStats stats;
    double smooth = -1.0;
    for (long long step = 0; step < steps; ++step) {
        // Cosine decay to 2% of the base rate, as in train_atom.
        double frac = static_cast<double>(step) / static_cast<double>(steps);
        opt.lr = cfg.lr * (0.02 + 0.98 * 0.5 * (1.0 + std::cos(std::numbers::pi * frac)));
        const MtovTrainItem& item =
            items[static_cast<std::size_t>(step % static_cast<long long>(items.size()))];
        Tensor z0 = item.z0.pack();
        int t = rng.uniform_int(1, cfg.T);
        Tensor eps = rng.normal_tensor(z0.shape());
        Tensor z_t_flat = forward_noise(z0, t, eps, sched);
        TriPlaneLatent z_t = TriPlaneLatent::unpack(z_t_flat, item.z0);

        MtovModel::PlaneSet pred = model.denoise_graph(
            MtovModel::lift(z_t), t, MtovModel::lift(item.cond.z_landmark),
            MtovModel::lift(item.cond.z_pose), MtovModel::lift(item.cond.z_identity));
        auto target = [](const Tensor& p) {
            return constant(p.reshaped({1, p.dim(0), p.dim(1), p.dim(2)}));
        };
        const double total = static_cast<double>(item.z0.numel());
        Var loss = scale(mse(pred.hw, target(item.z0.hw)),
                         static_cast<double>(item.z0.hw.numel()) / total);
        loss = add(loss, scale(mse(pred.hs, target(item.z0.hs)),
                               static_cast<double>(item.z0.hs.numel()) / total));
        loss = add(loss, scale(mse(pred.ws, target(item.z0.ws)),
                               static_cast<double>(item.z0.ws.numel()) / total));

        double lv = loss->val[0];
        if (!std::isfinite(lv))
            throw std::runtime_error("train_mtov: NaN loss at step " +
                                     std::to_string(step) + " (t=" + std::to_string(t) +
                                     ", lr=" + std::to_string(opt.lr) + ", grad_norm=" +
                                     std::to_string(grad_norm(params)) + ")");
        for (auto* p : params) p->zero_grad();
        backward(loss);
        opt.step(params);
        stats.final_loss = lv;
        stats.steps = step + 1;
        smooth = (smooth < 0.0) ? lv : 0.95 * smooth + 0.05 * lv;
        if (log && step % 50 == 0) (*log) << "step " << step << " loss " << lv << "\n";
        if (stop_below_loss > 0.0 && step > 50 && smooth < stop_below_loss) break;
    }
    return stats;
}

namespace {

Tensor frame_slice(const Tensor& clip, int start, int len) {
    std::vector<int> shape = clip.shape();
    shape[0] = len;
    Tensor out(shape);
    const std::int64_t per = clip.numel() / clip.dim(0);
    std::copy_n(clip.data() + start * per, len * per, out.data());
    return out;
}

Tensor frame_concat(const std::vector<Tensor>& parts) {
    std::vector<int> shape = parts.at(0).shape();
    int S = 0;
    for (const Tensor& p : parts) S += p.dim(0);
    shape[0] = S;
    Tensor out(shape);
    std::int64_t off = 0;
    for (const Tensor& p : parts) {
        std::copy_n(p.data(), p.numel(), out.data() + off);
        off += p.numel();
    }
    return out;
}

[[noreturn]] void stage_fail(const char* stage, const std::exception& e) {
    throw std::runtime_error(std::string("generate_clip[") + stage + "]: " + e.what());
}

}  // namespace

GenerateResult generate_clip(const Tensor& features, const Tensor& identity_clip,
                             const Tensor& pose_source_clip,
                             const Tensor& pose_source_landmarks, const Tensor& l_id,
                             const PipelineModels& models, int n_steps,
                             std::uint64_t seed, bool frame_by_frame,
                             double blend_sigma) {
    if (!models.atom || !models.mtov || !models.video_codec || !models.motion_codec ||
        !models.pose_codec || !models.identity_codec)
        throw std::invalid_argument("generate_clip: missing model");
    const int S = pose_source_clip.dim(0);
    if (features.ndim() != 2 || features.dim(0) != 2 * S)
        throw std::invalid_argument("generate_clip: audio length must be 2S");

    GenerateResult res;
    try {
        res.landmarks = sample_motion(*models.atom, features, l_id,
                                      models.atom->config().sample_steps,
                                      Rng::mix(seed, 0xa703ULL), &res.atom_invocations);
    } catch (const std::exception& e) {
        stage_fail("sample_motion", e);
    }

    Tensor aligned;
    try {
        aligned = align_motion_to_reference(res.landmarks, pose_source_landmarks);
    } catch (const std::exception& e) {
        stage_fail("align_motion", e);
    }

    Tensor pose_frames;
    ConditionSet cond;
    try {
        pose_frames = make_pose_frames(pose_source_clip);
        cond = build_conditions(aligned, pose_frames, identity_clip, *models.motion_codec,
                                *models.pose_codec, *models.identity_codec);
    } catch (const std::exception& e) {
        stage_fail("build_conditions", e);
    }

    const DiffusionSchedule sched = models.mtov->schedule();
    Tensor decoded;
    try {
        if (!frame_by_frame) {
            TriPlaneLatent like = cond.z_pose;
            DenoiseFn den = [&](const Tensor& z_flat, int t) {
                TriPlaneLatent z = TriPlaneLatent::unpack(z_flat, like);
                return models.mtov->mtov_denoise(z, t, cond).pack();
            };
            SampleResult sr =
                sample(den, {static_cast<int>(like.numel())}, sched, n_steps,
                       Rng::mix(seed, 0xb1de0ULL));
            res.mtov_invocations = sr.invocations;
            decoded = models.video_codec->decode_triplane(
                TriPlaneLatent::unpack(sr.z0, like), S);
        } else {
            std::vector<Tensor> frames;
            for (int s = 0; s < S; ++s) {
                ConditionSet fcond = build_conditions(
                    frame_slice(aligned, s, 1), frame_slice(pose_frames, s, 1),
                    frame_slice(identity_clip, s, 1), *models.motion_codec,
                    *models.pose_codec, *models.identity_codec);
                TriPlaneLatent like = fcond.z_pose;
                DenoiseFn den = [&](const Tensor& z_flat, int t) {
                    TriPlaneLatent z = TriPlaneLatent::unpack(z_flat, like);
                    return models.mtov->mtov_denoise(z, t, fcond).pack();
                };
                SampleResult sr =
                    sample(den, {static_cast<int>(like.numel())}, sched, n_steps,
                           Rng::mix(seed, Rng::mix(0xf2a3eULL, static_cast<std::uint64_t>(s))));
                res.mtov_invocations += sr.invocations;
                frames.push_back(models.video_codec->decode_triplane(
                    TriPlaneLatent::unpack(sr.z0, like), 1));
            }
            decoded = frame_concat(frames);
        }
    } catch (const std::exception& e) {
        stage_fail("video_diffusion", e);
    }

    try {
        res.video = blend(decoded, pose_source_clip, blend_sigma);
    } catch (const std::exception& e) {
        stage_fail("blend", e);
    }
    return res;
}

LongGenerateResult generate_long(const Tensor& features_long,
                                 const Tensor& seed_identity_clip,
                                 const Tensor& pose_source_clip,
                                 const Tensor& pose_source_landmarks, const Tensor& l_id,
                                 const PipelineModels& models, int n_steps,
                                 std::uint64_t seed, double blend_sigma) {
    const int S = pose_source_clip.dim(0);
    if (features_long.ndim() != 2 || features_long.dim(0) % (2 * S) != 0 ||
        features_long.dim(0) == 0)
        throw std::invalid_argument("generate_long: audio length must be a positive multiple of 2S");
    const int k = features_long.dim(0) / (2 * S);

    LongGenerateResult out;
    Tensor identity = seed_identity_clip;
    Tensor cur_l_id = l_id;
    std::vector<Tensor> videos;
    for (int j = 0; j < k; ++j) {
        Tensor feats = frame_slice(features_long, j * 2 * S, 2 * S);
        out.identity_inputs.push_back(identity);
        GenerateResult r =
            generate_clip(feats, identity, pose_source_clip, pose_source_landmarks,
                          cur_l_id, models, n_steps,
                          Rng::mix(seed, static_cast<std::uint64_t>(j)), false,
                          blend_sigma);
        identity = r.video;
        cur_l_id = sequence_frame(r.landmarks, S - 1);
        videos.push_back(r.video);
        out.clips.push_back(std::move(r));
    }
    out.video = frame_concat(videos);
    return out;
}

}  // namespace mdtk
