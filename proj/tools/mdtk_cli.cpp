// Command-line driver: one subcommand per pipeline stage, text manifests
// with digests next to every artifact so runs are reproducible and
// auditable.
#include <CLI11.hpp>
#include <filesystem>
#include <iostream>

#include "mdtk/config.hpp"
#include "mdtk/eval.hpp"
#include "mdtk/image.hpp"
#include "mdtk/mtov.hpp"

namespace fs = std::filesystem;
using namespace mdtk;

namespace {

struct CommonOpts {
    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

ExperimentConfig resolve_config(const CommonOpts& c) {
    ExperimentConfig cfg;
    if (!c.config_path.empty()) cfg = ExperimentConfig::load(c.config_path);
    if (c.seed_set) cfg.seed = c.seed;
    cfg.validate();
    return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& c) {
    cmd->add_option("--config", c.config_path, "Experiment config file (key: value)");
    cmd->add_option("--seed", c.seed, "Override the experiment seed")
        ->each([&c](const std::string&) { c.seed_set = true; });
}

std::vector<CorpusClip> load_corpus(const std::string& dir) {
    std::vector<CorpusClip> clips;
    for (const std::string& d : list_clip_dirs(dir)) clips.push_back(load_clip(d));
    if (clips.empty()) throw std::runtime_error("no clips found under " + dir);
    return clips;
}

void write_manifest(const std::string& path, const ExperimentConfig& cfg,
                    std::vector<std::pair<std::string, std::string>> digests) {
    make_manifest(cfg, digests).save(path);
}

std::string save_checkpoint(const std::string& path, const NamedTensors& t) {
    return save_tensors(path, t);
}

AtomModel load_atom(const ExperimentConfig& cfg, const std::string& ckpt) {
    AtomModel model(cfg.atom, cfg.seed);
    model.params().load(load_tensors(ckpt), "atom.");
    return model;
}

VideoCodec load_codec(const ExperimentConfig& cfg, const std::string& ckpt,
                      int in_channels) {
    CodecConfig cc = cfg.codec;
    cc.in_channels = in_channels;
    VideoCodec codec(cc, cfg.seed);
    NamedTensors t = load_tensors(ckpt);
    codec.encoder_params().load(t, "enc.");
    codec.decoder_params().load(t, "dec.");
    return codec;
}

MtovModel load_mtov(const ExperimentConfig& cfg, const std::string& ckpt) {
    MtovModel model(cfg.mtov, cfg.seed);
    model.params().load(load_tensors(ckpt), "mtov.");
    return model;
}

NamedTensors codec_tensors(const VideoCodec& codec) {
    NamedTensors t = codec.encoder_params().to_tensors("enc.");
    for (auto& [name, tensor] : codec.decoder_params().to_tensors("dec.").entries)
        t.add(name, std::move(tensor));
    return t;
}

std::vector<MtovTrainItem> build_mtov_items(const std::vector<CorpusClip>& clips,
                                            const VideoCodec& video_codec,
                                            const VideoCodec& motion_codec) {
    std::vector<MtovTrainItem> items;
    for (const CorpusClip& clip : clips) {
        MtovTrainItem item;
        item.z0 = video_codec.encode_video(clip.video);
        item.cond = build_conditions(clip.landmarks_posed, clip.pose_frames,
                                     clip.identity, motion_codec, video_codec,
                                     video_codec);
        items.push_back(std::move(item));
    }
    return items;
}

int run(int argc, char** argv) {
    CLI::App app{"Two-stage talking-head pipeline: landmark diffusion, tri-plane "
                 "video diffusion, synthetic corpus and evaluation"};
    app.require_subcommand(1);

    // gen-corpus
    auto* gen = app.add_subcommand("gen-corpus", "Generate the synthetic corpus");
    CommonOpts gen_c;
    std::string gen_out = "corpus";
    add_common(gen, gen_c);
    gen->add_option("--out", gen_out, "Output directory");
    int gen_clips = -1, gen_frames = -1;
    gen->add_option("--clips", gen_clips, "Number of clips");
    gen->add_option("--frames", gen_frames, "Frames per clip");
    gen->callback([&] {
        ExperimentConfig cfg = resolve_config(gen_c);
        if (gen_clips > 0) cfg.corpus.n_clips = gen_clips;
        if (gen_frames > 0) cfg.corpus.frames = gen_frames;
        cfg.validate();
        std::string manifest = gen_corpus(cfg.corpus, cfg.seed, gen_out);
        std::cout << "wrote " << cfg.corpus.n_clips << " clips, manifest " << manifest
                  << "\n";
    });

    // train-atom
    auto* ta = app.add_subcommand("train-atom", "Train the audio-to-motion model");
    CommonOpts ta_c;
    std::string ta_corpus = "corpus", ta_out = "atom.bin";
    long long ta_steps = 2000;
    double ta_stop = 0.0;
    add_common(ta, ta_c);
    ta->add_option("--corpus", ta_corpus, "Corpus directory");
    ta->add_option("--out", ta_out, "Checkpoint path");
    ta->add_option("--steps", ta_steps, "Training steps");
    ta->add_option("--stop-below-loss", ta_stop, "Early stop on smoothed loss");
    ta->callback([&] {
        ExperimentConfig cfg = resolve_config(ta_c);
        std::vector<AtomTrainItem> items;
        for (const CorpusClip& clip : load_corpus(ta_corpus))
            items.push_back({clip.features, clip.landmarks_frontal});
        AtomModel model(cfg.atom, cfg.seed);
        TrainStats stats =
            train_atom(model, items, ta_steps, cfg.seed, &std::cout, ta_stop);
        std::string digest = save_checkpoint(ta_out, model.params().to_tensors("atom."));
        write_manifest(ta_out + ".manifest", cfg,
                       {{"checkpoint", digest}});
        std::cout << "final loss " << stats.final_loss << " after " << stats.steps
                  << " steps, checkpoint " << ta_out << "\n";
    });

    // train-codec
    auto* tc = app.add_subcommand("train-codec", "Train the tri-plane video codec");
    CommonOpts tc_c;
    std::string tc_corpus = "corpus", tc_out = "codec.bin";
    long long tc_steps = 3000;
    double tc_stop_psnr = 0.0;
    add_common(tc, tc_c);
    tc->add_option("--corpus", tc_corpus, "Corpus directory");
    tc->add_option("--out", tc_out, "Checkpoint path");
    tc->add_option("--steps", tc_steps, "Training steps");
    tc->add_option("--stop-at-psnr", tc_stop_psnr, "Early stop once min PSNR reached");
    tc->callback([&] {
        ExperimentConfig cfg = resolve_config(tc_c);
        std::vector<Tensor> videos;
        for (const CorpusClip& clip : load_corpus(tc_corpus)) videos.push_back(clip.video);
        VideoCodec codec(cfg.codec, cfg.seed);
        CodecTrainStats stats =
            train_codec(codec, videos, tc_steps, cfg.seed, &std::cout, tc_stop_psnr);
        std::string digest = save_checkpoint(tc_out, codec_tensors(codec));
        write_manifest(tc_out + ".manifest", cfg, {{"checkpoint", digest}});
        std::cout << "final min PSNR " << stats.final_psnr << " dB after " << stats.steps
                  << " steps, checkpoint " << tc_out << "\n";
    });

    // finetune-motion-codec
    auto* fm = app.add_subcommand("finetune-motion-codec",
                                  "Fine-tune the codec encoder on motion rasters");
    CommonOpts fm_c;
    std::string fm_corpus = "corpus", fm_rgb = "codec.bin", fm_out = "motion_codec.bin";
    long long fm_steps = 500;
    add_common(fm, fm_c);
    fm->add_option("--corpus", fm_corpus, "Corpus directory");
    fm->add_option("--rgb", fm_rgb, "Trained video codec checkpoint");
    fm->add_option("--out", fm_out, "Checkpoint path");
    fm->add_option("--steps", fm_steps, "Fine-tune steps");
    fm->callback([&] {
        ExperimentConfig cfg = resolve_config(fm_c);
        VideoCodec rgb = load_codec(cfg, fm_rgb, cfg.codec.in_channels);
        std::vector<Tensor> motions;
        for (const CorpusClip& clip : load_corpus(fm_corpus))
            motions.push_back(rasterize_motion(clip.landmarks_posed, cfg.corpus.height,
                                               cfg.corpus.width));
        VideoCodec motion(cfg.codec, cfg.seed);
        FinetuneStats stats =
            finetune_motion_encoder(motion, rgb, motions, fm_steps, cfg.seed, &std::cout);
        std::string digest = save_checkpoint(fm_out, codec_tensors(motion));
        write_manifest(fm_out + ".manifest", cfg,
                       {{"checkpoint", digest}, {"rgb_codec", sha256_file(fm_rgb)}});
        std::cout << "motion reconstruction loss " << stats.loss_before << " -> "
                  << stats.loss_after << ", checkpoint " << fm_out << "\n";
    });

    // train-mtov
    auto* tm = app.add_subcommand("train-mtov", "Train the motion-to-video model");
    CommonOpts tm_c;
    std::string tm_corpus = "corpus", tm_vc = "codec.bin", tm_mc = "motion_codec.bin",
                tm_out = "mtov.bin";
    long long tm_steps = 3000;
    double tm_stop = 0.0;
    add_common(tm, tm_c);
    tm->add_option("--corpus", tm_corpus, "Corpus directory");
    tm->add_option("--video-codec", tm_vc, "Video codec checkpoint");
    tm->add_option("--motion-codec", tm_mc, "Motion codec checkpoint");
    tm->add_option("--out", tm_out, "Checkpoint path");
    tm->add_option("--steps", tm_steps, "Training steps");
    tm->add_option("--stop-below-loss", tm_stop, "Early stop on smoothed loss");
    tm->callback([&] {
        ExperimentConfig cfg = resolve_config(tm_c);
        VideoCodec video_codec = load_codec(cfg, tm_vc, cfg.codec.in_channels);
        VideoCodec motion_codec = load_codec(cfg, tm_mc, cfg.codec.in_channels);
        std::vector<MtovTrainItem> items =
            build_mtov_items(load_corpus(tm_corpus), video_codec, motion_codec);
        MtovModel model(cfg.mtov, cfg.seed);
        TrainStats stats =
            train_mtov(model, items, tm_steps, cfg.seed, &std::cout, tm_stop);
        std::string digest = save_checkpoint(tm_out, model.params().to_tensors("mtov."));
        write_manifest(tm_out + ".manifest", cfg,
                       {{"checkpoint", digest},
                        {"video_codec", sha256_file(tm_vc)},
                        {"motion_codec", sha256_file(tm_mc)}});
        std::cout << "final loss " << stats.final_loss << " after " << stats.steps
                  << " steps, checkpoint " << tm_out << "\n";
    });

    // shared generate options
    struct GenOpts {
        CommonOpts common;
        std::string corpus = "corpus", atom = "atom.bin", mtov = "mtov.bin";
        std::string video_codec = "codec.bin", motion_codec = "motion_codec.bin";
        std::string out = "generated";
        int clip = 0, steps = 50;
        double sigma = 0.0;
        bool frame_by_frame = false;
    };
    auto add_gen_opts = [](CLI::App* cmd, GenOpts& g) {
        add_common(cmd, g.common);
        cmd->add_option("--corpus", g.corpus, "Corpus directory");
        cmd->add_option("--clip", g.clip, "Corpus clip index used as driver/pose source");
        cmd->add_option("--atom", g.atom, "Motion model checkpoint");
        cmd->add_option("--mtov", g.mtov, "Video diffusion checkpoint");
        cmd->add_option("--video-codec", g.video_codec, "Video codec checkpoint");
        cmd->add_option("--motion-codec", g.motion_codec, "Motion codec checkpoint");
        cmd->add_option("--out", g.out, "Output directory");
        cmd->add_option("--steps", g.steps, "Video diffusion sampling steps");
        cmd->add_option("--sigma", g.sigma, "Blend mask smoothing");
    };

    auto* gc = app.add_subcommand("generate", "Generate one clip from corpus audio");
    GenOpts gc_o;
    add_gen_opts(gc, gc_o);
    gc->add_flag("--frame-by-frame", gc_o.frame_by_frame,
                 "Run the video diffusion once per frame (baseline mode)");
    gc->callback([&] {
        ExperimentConfig cfg = resolve_config(gc_o.common);
        AtomModel atom = load_atom(cfg, gc_o.atom);
        MtovModel mtov = load_mtov(cfg, gc_o.mtov);
        VideoCodec video_codec = load_codec(cfg, gc_o.video_codec, cfg.codec.in_channels);
        VideoCodec motion_codec = load_codec(cfg, gc_o.motion_codec, cfg.codec.in_channels);
        std::vector<std::string> dirs = list_clip_dirs(gc_o.corpus);
        CorpusClip clip = load_clip(dirs.at(static_cast<std::size_t>(gc_o.clip)));
        PipelineModels models{&atom, &mtov, &video_codec, &motion_codec, &video_codec,
                              &video_codec};
        GenerateResult res = generate_clip(
            clip.features, clip.identity, clip.video, clip.landmarks_posed,
            sequence_frame(clip.landmarks_frontal, 0), models, gc_o.steps, cfg.seed,
            gc_o.frame_by_frame, gc_o.sigma);
        fs::create_directories(gc_o.out);
        write_clip_frames(gc_o.out, res.video);
        NamedTensors dump;
        dump.add("video", res.video);
        dump.add("landmarks", res.landmarks);
        std::string digest = save_tensors(gc_o.out + "/clip.bin", dump);
        KvDoc manifest = make_manifest(cfg, {{"clip", digest},
                                             {"atom", sha256_file(gc_o.atom)},
                                             {"mtov", sha256_file(gc_o.mtov)}});
        manifest.set("frames", static_cast<long long>(res.video.dim(0)));
        manifest.set("atom_invocations", static_cast<long long>(res.atom_invocations));
        manifest.set("mtov_invocations", static_cast<long long>(res.mtov_invocations));
        manifest.save(gc_o.out + "/manifest.txt");
        std::cout << "wrote " << res.video.dim(0) << " frames to " << gc_o.out << " ("
                  << res.mtov_invocations << " video denoiser calls)\n";
    });

    auto* gl = app.add_subcommand("generate-long", "Generate a chained multi-clip video");
    GenOpts gl_o;
    int gl_chunks = 3;
    add_gen_opts(gl, gl_o);
    gl->add_option("--chunks", gl_chunks, "Number of chained clips");
    gl->callback([&] {
        ExperimentConfig cfg = resolve_config(gl_o.common);
        AtomModel atom = load_atom(cfg, gl_o.atom);
        MtovModel mtov = load_mtov(cfg, gl_o.mtov);
        VideoCodec video_codec = load_codec(cfg, gl_o.video_codec, cfg.codec.in_channels);
        VideoCodec motion_codec = load_codec(cfg, gl_o.motion_codec, cfg.codec.in_channels);
        std::vector<std::string> dirs = list_clip_dirs(gl_o.corpus);
        CorpusClip base = load_clip(dirs.at(static_cast<std::size_t>(gl_o.clip)));
        // Long audio track: features of `chunks` consecutive corpus clips.
        Tensor features_long({gl_chunks * base.features.dim(0), base.features.dim(1)});
        std::int64_t off = 0;
        for (int j = 0; j < gl_chunks; ++j) {
            CorpusClip c = load_clip(
                dirs.at(static_cast<std::size_t>((gl_o.clip + j) % static_cast<int>(dirs.size()))));
            std::copy_n(c.features.data(), c.features.numel(), features_long.data() + off);
            off += c.features.numel();
        }
        PipelineModels models{&atom, &mtov, &video_codec, &motion_codec, &video_codec,
                              &video_codec};
        LongGenerateResult res = generate_long(
            features_long, base.identity, base.video, base.landmarks_posed,
            sequence_frame(base.landmarks_frontal, 0), models, gl_o.steps, cfg.seed,
            gl_o.sigma);
        fs::create_directories(gl_o.out);
        write_clip_frames(gl_o.out, res.video);
        NamedTensors dump;
        dump.add("video", res.video);
        std::string digest = save_tensors(gl_o.out + "/clip.bin", dump);
        KvDoc manifest = make_manifest(cfg, {{"clip", digest}});
        manifest.set("frames", static_cast<long long>(res.video.dim(0)));
        manifest.set("chunks", static_cast<long long>(gl_chunks));
        manifest.save(gl_o.out + "/manifest.txt");
        std::cout << "wrote " << res.video.dim(0) << " frames to " << gl_o.out << "\n";
    });

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "Metric report for a generated clip");
    std::string ev_pred, ev_ref, ev_out = "report.txt";
    ev->add_option("--pred", ev_pred, "Generated clip.bin")->required();
    ev->add_option("--ref", ev_ref, "Reference corpus clip directory")->required();
    ev->add_option("--out", ev_out, "Report path");
    ev->callback([&] {
        NamedTensors pred = load_tensors(ev_pred);
        CorpusClip ref = load_clip(ev_ref);
        const Tensor& video = pred.get("video");
        std::vector<std::pair<std::string, std::vector<double>>> metrics;
        metrics.push_back({"psnr", {psnr(video, ref.video)}});
        metrics.push_back({"temporal_consistency", {temporal_consistency(video)}});
        if (pred.has("landmarks")) {
            metrics.push_back(
                {"lmd", {lmd(pred.get("landmarks"), ref.landmarks_frontal)}});
            std::vector<double> amp;
            for (int i = 0; i < ref.features.dim(0); ++i) amp.push_back(ref.features.at(i, 0));
            metrics.push_back(
                {"sync_corr", {sync_corr(mouth_open_signal(pred.get("landmarks")),
                                         to_video_rate(amp))}});
        }
        KvDoc report = metric_report(metrics);
        report.save(ev_out);
        std::cout << report.to_string();
    });

    // inspect
    auto* in = app.add_subcommand("inspect", "Print the contents of a tensor container");
    std::string in_file;
    in->add_option("--file", in_file, "Container path")->required();
    in->callback([&] {
        NamedTensors t = load_tensors(in_file);
        std::cout << t.entries.size() << " entries, sha256 " << sha256_file(in_file)
                  << "\n";
        for (const auto& [name, tensor] : t.entries) {
            double lo = 0.0, hi = 0.0;
            if (tensor.numel() > 0) {
                lo = hi = tensor[0];
                for (double v : tensor.vec()) {
                    lo = std::min(lo, v);
                    hi = std::max(hi, v);
                }
            }
            std::cout << name << " " << tensor.shape_str() << " min " << lo << " max "
                      << hi << "\n";
        }
    });

    CLI11_PARSE(app, argc, argv);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
