#pragma once

#include <string>

#include "mdtk/atom.hpp"
#include "mdtk/codec.hpp"
#include "mdtk/corpus.hpp"
#include "mdtk/io.hpp"
#include "mdtk/mtov.hpp"

namespace mdtk {

// One flat typed key:value document spanning every module config plus
// the experiment seed and output paths. Parsing rejects unknown keys and
// ill-typed values so stale config files fail loudly.
struct ExperimentConfig {
    CorpusConfig corpus;
    AtomConfig atom;
    CodecConfig codec;
    MtovConfig mtov;
    std::uint64_t seed = 7;
    std::string corpus_dir = "corpus";
    std::string checkpoint_dir = "checkpoints";
    std::string output_dir = "output";

    KvDoc to_doc() const;
    static ExperimentConfig from_doc(const KvDoc& doc);  // defaults + overrides
    static ExperimentConfig load(const std::string& path);
    void save(const std::string& path) const;

    void validate() const;
};

// Run manifest: resolved config plus named input/output digests.
KvDoc make_manifest(const ExperimentConfig& cfg,
                    const std::vector<std::pair<std::string, std::string>>& digests);

}  // namespace mdtk
