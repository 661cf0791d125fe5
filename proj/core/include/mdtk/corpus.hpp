#pragma once

#include <string>
#include <vector>

#include "mdtk/geometry.hpp"
#include "mdtk/rng.hpp"
#include "mdtk/tensor.hpp"

namespace mdtk {

// Analytic stand-in for audio-feature / face-capture extraction: paired
// (audio features, frontal landmarks, head poses, rendered video) clips
// where the audio-to-lip mapping is known in closed form. Audio runs at
// twice the video rate; feature channel 0 carries the ground-truth lip
// opening amplitude.

struct IdentitySpec {
    Tensor template_landmarks;  // [68,3], frontal-normalized, mirror symmetric
    double face_width = 1.2, jaw_depth = 1.5, eye_spacing = 0.6;
    double skin[3] = {0.8, 0.65, 0.55};
    double lip[3] = {0.65, 0.3, 0.3};
};

struct PhonemeStream {
    std::vector<double> amplitudes;  // length 2S, in [0,1], amplitudes[0] == 0
    Tensor features;                 // [2S, d], channel 0 == amplitudes
};

// Linear lip-opening map; max opening 0.15 normalized units.
constexpr double kMouthGain = 0.15;
inline double mouth_gap_of_amplitude(double a) { return kMouthGain * a; }

// Indices displaced downward by the opening amplitude (lower lip).
const std::vector<int>& lower_lip_indices();

IdentitySpec gen_identity(std::uint64_t seed);
PhonemeStream gen_phoneme_stream(std::uint64_t seed, int S, int d);
std::vector<SimilarityTransform> gen_pose_trajectory(std::uint64_t seed, int S);

struct LandmarkClip {
    Tensor frontal;  // [S,68,3]
    Tensor posed;    // [S,68,3]
};
LandmarkClip gen_landmark_clip(const IdentitySpec& identity, const PhonemeStream& stream,
                               const std::vector<SimilarityTransform>& pose_traj);

// Deterministic analytic raster of a posed landmark sequence: filled face
// blob, eyes, brows, nose and a mouth whose dark inner area tracks the
// lip opening. Output [S,3,H,W] in [0,1].
Tensor render_face_clip(const Tensor& posed, const IdentitySpec& identity, int H, int W);

Tensor poses_to_tensor(const std::vector<SimilarityTransform>& poses);  // [S,13]
std::vector<SimilarityTransform> poses_from_tensor(const Tensor& t);

struct CorpusConfig {
    int n_clips = 8;
    int frames = 16;  // S
    int audio_dim = 8;
    int height = 32, width = 32;
};

// Writes out_dir/clip_%04d/{features,landmarks_frontal,landmarks_posed,
// poses,video,pose_frames,identity}.bin plus a corpus manifest with
// per-file digests. Returns the manifest path.
std::string gen_corpus(const CorpusConfig& cfg, std::uint64_t seed,
                       const std::string& out_dir);

struct CorpusClip {
    Tensor features;           // [2S,d]
    Tensor landmarks_frontal;  // [S,68,3]
    Tensor landmarks_posed;    // [S,68,3]
    std::vector<SimilarityTransform> poses;
    Tensor video;        // [S,3,H,W]
    Tensor pose_frames;  // [S,3,H,W]
    Tensor identity;     // [S,3,H,W]
};

CorpusClip load_clip(const std::string& clip_dir);
std::vector<std::string> list_clip_dirs(const std::string& corpus_dir);

}  // namespace mdtk
