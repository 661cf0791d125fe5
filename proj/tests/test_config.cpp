#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "mdtk/config.hpp"

using namespace mdtk;
namespace fs = std::filesystem;

TEST_CASE("config document round trip preserves every field") {
    ExperimentConfig cfg;
    cfg.seed = 1234;
    cfg.corpus.n_clips = 3;
    cfg.atom.latent_dim = 48;
    cfg.atom.merge_identity = true;
    cfg.codec.lr = 0.00125;
    cfg.mtov.eta = 0.25;
    cfg.output_dir = "out/with spaces";

    ExperimentConfig back = ExperimentConfig::from_doc(cfg.to_doc());
    CHECK(back.seed == 1234);
    CHECK(back.corpus.n_clips == 3);
    CHECK(back.atom.latent_dim == 48);
    CHECK(back.atom.merge_identity == true);
    CHECK(back.codec.lr == 0.00125);
    CHECK(back.mtov.eta == 0.25);
    CHECK(back.output_dir == "out/with spaces");
    CHECK(back.to_doc().to_string() == cfg.to_doc().to_string());
}

TEST_CASE("unknown keys are rejected") {
    KvDoc doc;
    doc.set("atom.latent_dim", "32");
    doc.set("atom.latent_dims", "32");  // typo
    CHECK_THROWS_WITH_AS(ExperimentConfig::from_doc(doc),
                         doctest::Contains("atom.latent_dims"),
                         std::invalid_argument);
}

TEST_CASE("ill-typed values are rejected") {
    KvDoc bad_int;
    bad_int.set("corpus.n_clips", "eight");
    CHECK_THROWS_AS(ExperimentConfig::from_doc(bad_int), std::invalid_argument);

    KvDoc bad_real;
    bad_real.set("atom.lr", "1e-4x");
    CHECK_THROWS_AS(ExperimentConfig::from_doc(bad_real), std::invalid_argument);

    KvDoc bad_bool;
    bad_bool.set("atom.merge_identity", "yes");
    CHECK_THROWS_AS(ExperimentConfig::from_doc(bad_bool), std::invalid_argument);
}

TEST_CASE("partial documents keep defaults elsewhere") {
    KvDoc doc;
    doc.set("seed", "99");
    ExperimentConfig cfg = ExperimentConfig::from_doc(doc);
    CHECK(cfg.seed == 99);
    CHECK(cfg.corpus.n_clips == ExperimentConfig{}.corpus.n_clips);
}

TEST_CASE("validate catches cross-module disagreements") {
    ExperimentConfig cfg;
    cfg.validate();  // defaults are coherent
    cfg.atom.n_frames = cfg.corpus.frames + 1;
    CHECK_THROWS(cfg.validate());
    cfg = ExperimentConfig{};
    cfg.mtov.latent_channels = cfg.codec.emb_dim + 1;
    CHECK_THROWS(cfg.validate());
}

TEST_CASE("file round trip and manifest digests") {
    std::string path = (fs::temp_directory_path() / "mdtk_config_test.txt").string();
    ExperimentConfig cfg;
    cfg.seed = 5;
    cfg.save(path);
    ExperimentConfig back = ExperimentConfig::load(path);
    CHECK(back.seed == 5);
    fs::remove(path);

    KvDoc manifest = make_manifest(cfg, {{"checkpoint", "abc123"}});
    REQUIRE(manifest.find("digest.checkpoint"));
    CHECK(*manifest.find("digest.checkpoint") == "abc123");
    CHECK(manifest.find("seed"));
}
