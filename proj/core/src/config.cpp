#include "mdtk/config.hpp"

#include <functional>
#include <set>
#include <stdexcept>

namespace mdtk {

namespace {

// Field registry: every key knows how to print itself into a KvDoc and
// parse itself back, so to_doc/from_doc cannot drift apart.
struct Field {
    std::string key;
    std::function<std::string(const ExperimentConfig&)> get;
    std::function<void(ExperimentConfig&, const std::string&)> set;
};

long long parse_int(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    long long out;
    try {
        out = std::stoll(v, &pos);
    } catch (const std::exception&) {
        throw std::invalid_argument("config: key '" + key + "' expects an integer, got '" + v + "'");
    }
    if (pos != v.size())
        throw std::invalid_argument("config: key '" + key + "' expects an integer, got '" + v + "'");
    return out;
}

double parse_real(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    double out;
    try {
        out = std::stod(v, &pos);
    } catch (const std::exception&) {
        throw std::invalid_argument("config: key '" + key + "' expects a real, got '" + v + "'");
    }
    if (pos != v.size())
        throw std::invalid_argument("config: key '" + key + "' expects a real, got '" + v + "'");
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw std::invalid_argument("config: key '" + key + "' expects true/false, got '" + v + "'");
}

std::string real_str(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

const std::vector<Field>& fields() {
    static const std::vector<Field> f = [] {
        std::vector<Field> out;
        auto add_int = [&out](const std::string& key, auto member) {
            out.push_back({key,
                           [member](const ExperimentConfig& c) {
                               return std::to_string(std::invoke(member, c));
                           },
                           [member, key](ExperimentConfig& c, const std::string& v) {
                               std::invoke(member, c) =
                                   static_cast<std::decay_t<decltype(std::invoke(member, c))>>(
                                       parse_int(key, v));
                           }});
        };
        auto add_real = [&out](const std::string& key, auto member) {
            out.push_back({key,
                           [member](const ExperimentConfig& c) {
                               return real_str(std::invoke(member, c));
                           },
                           [member, key](ExperimentConfig& c, const std::string& v) {
                               std::invoke(member, c) = parse_real(key, v);
                           }});
        };
        auto add_bool = [&out](const std::string& key, auto member) {
            out.push_back({key,
                           [member](const ExperimentConfig& c) {
                               return std::invoke(member, c) ? "true" : "false";
                           },
                           [member, key](ExperimentConfig& c, const std::string& v) {
                               std::invoke(member, c) = parse_bool(key, v);
                           }});
        };
        auto add_str = [&out](const std::string& key, auto member) {
            out.push_back({key,
                           [member](const ExperimentConfig& c) {
                               return std::invoke(member, c);
                           },
                           [member](ExperimentConfig& c, const std::string& v) {
                               std::invoke(member, c) = v;
                           }});
        };

        add_int("seed", &ExperimentConfig::seed);
        add_str("corpus_dir", &ExperimentConfig::corpus_dir);
        add_str("checkpoint_dir", &ExperimentConfig::checkpoint_dir);
        add_str("output_dir", &ExperimentConfig::output_dir);

        auto C = [](auto outer, auto inner) {
            return [outer, inner](auto& c) -> decltype(auto) {
                return std::invoke(inner, std::invoke(outer, c));
            };
        };
        auto corp = &ExperimentConfig::corpus;
        add_int("corpus.n_clips", C(corp, &CorpusConfig::n_clips));
        add_int("corpus.frames", C(corp, &CorpusConfig::frames));
        add_int("corpus.audio_dim", C(corp, &CorpusConfig::audio_dim));
        add_int("corpus.height", C(corp, &CorpusConfig::height));
        add_int("corpus.width", C(corp, &CorpusConfig::width));

        auto at = &ExperimentConfig::atom;
        add_int("atom.n_frames", C(at, &AtomConfig::n_frames));
        add_int("atom.audio_dim", C(at, &AtomConfig::audio_dim));
        add_int("atom.latent_dim", C(at, &AtomConfig::latent_dim));
        add_int("atom.n_blocks", C(at, &AtomConfig::n_blocks));
        add_int("atom.n_merge_blocks", C(at, &AtomConfig::n_merge_blocks));
        add_int("atom.n_cond_blocks", C(at, &AtomConfig::n_cond_blocks));
        add_int("atom.n_heads", C(at, &AtomConfig::n_heads));
        add_bool("atom.merge_identity", C(at, &AtomConfig::merge_identity));
        add_real("atom.w_recon", C(at, &AtomConfig::w_recon));
        add_real("atom.residual_scale", C(at, &AtomConfig::residual_scale));
        add_real("atom.w_vel", C(at, &AtomConfig::w_vel));
        add_int("atom.T", C(at, &AtomConfig::T));
        add_real("atom.beta_start", C(at, &AtomConfig::beta_start));
        add_real("atom.beta_end", C(at, &AtomConfig::beta_end));
        add_int("atom.sample_steps", C(at, &AtomConfig::sample_steps));
        add_real("atom.lr", C(at, &AtomConfig::lr));

        auto cd = &ExperimentConfig::codec;
        add_int("codec.clip_len", C(cd, &CodecConfig::clip_len));
        add_int("codec.input_res", C(cd, &CodecConfig::input_res));
        add_int("codec.in_channels", C(cd, &CodecConfig::in_channels));
        add_int("codec.base_channels", C(cd, &CodecConfig::base_channels));
        add_int("codec.n_resblocks", C(cd, &CodecConfig::n_resblocks));
        add_int("codec.emb_dim", C(cd, &CodecConfig::emb_dim));
        add_int("codec.downsample", C(cd, &CodecConfig::downsample));
        add_int("codec.phase_dim", C(cd, &CodecConfig::phase_dim));
        add_real("codec.lr", C(cd, &CodecConfig::lr));
        add_real("codec.lambda1", C(cd, &CodecConfig::lambda1));
        add_real("codec.lambda2", C(cd, &CodecConfig::lambda2));
        add_int("codec.phase2_start", C(cd, &CodecConfig::phase2_start));

        auto mt = &ExperimentConfig::mtov;
        add_int("mtov.latent_channels", C(mt, &MtovConfig::latent_channels));
        add_int("mtov.base_channels", C(mt, &MtovConfig::base_channels));
        add_int("mtov.n_heads", C(mt, &MtovConfig::n_heads));
        add_int("mtov.time_dim", C(mt, &MtovConfig::time_dim));
        add_int("mtov.T", C(mt, &MtovConfig::T));
        add_real("mtov.beta_start", C(mt, &MtovConfig::beta_start));
        add_real("mtov.beta_end", C(mt, &MtovConfig::beta_end));
        add_int("mtov.sample_steps", C(mt, &MtovConfig::sample_steps));
        add_real("mtov.eta", C(mt, &MtovConfig::eta));
        add_real("mtov.lr", C(mt, &MtovConfig::lr));
        return out;
    }();
    return f;
}

}  // namespace

KvDoc ExperimentConfig::to_doc() const {
    KvDoc doc;
    for (const Field& f : fields()) doc.set(f.key, f.get(*this));
    return doc;
}

ExperimentConfig ExperimentConfig::from_doc(const KvDoc& doc) {
    ExperimentConfig cfg;
    std::set<std::string> known;
    for (const Field& f : fields()) known.insert(f.key);
    for (const auto& [key, value] : doc.items)
        if (!known.count(key))
            throw std::invalid_argument("config: unknown key '" + key + "'");
    for (const Field& f : fields())
        if (const std::string* v = doc.find(f.key)) f.set(cfg, *v);
    return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    return from_doc(KvDoc::load(path));
}

void ExperimentConfig::save(const std::string& path) const { to_doc().save(path); }

void ExperimentConfig::validate() const {
    atom.validate();
    codec.validate();
    mtov.validate();
    if (corpus.n_clips < 1 || corpus.frames < 1 || corpus.audio_dim < 1 ||
        corpus.height < 8 || corpus.width < 8)
        throw std::invalid_argument("config: invalid corpus dimensions");
    if (atom.n_frames != corpus.frames || atom.audio_dim != corpus.audio_dim)
        throw std::invalid_argument("config: atom frame/audio dims disagree with corpus");
    if (codec.clip_len != corpus.frames || codec.input_res != corpus.height ||
        corpus.height != corpus.width)
        throw std::invalid_argument("config: codec geometry disagrees with corpus");
    if (mtov.latent_channels != codec.emb_dim)
        throw std::invalid_argument("config: mtov latent channels disagree with codec emb_dim");
}

KvDoc make_manifest(const ExperimentConfig& cfg,
                    const std::vector<std::pair<std::string, std::string>>& digests) {
    KvDoc doc = cfg.to_doc();
    for (const auto& [name, digest] : digests) doc.set("digest." + name, digest);
    return doc;
}

}  // namespace mdtk
