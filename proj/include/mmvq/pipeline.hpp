#pragma once

// End-to-end orchestration shared by the CLI and the acceptance suite:
// feature extraction to the FVTC cache, representation training, session
// embedding, downstream training with prediction files, evaluation, and the
// gradient verification suite.

#include <filesystem>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "mmvq/config.hpp"
#include "mmvq/data.hpp"
#include "mmvq/downstream.hpp"
#include "mmvq/metrics.hpp"
#include "mmvq/mrl.hpp"

namespace mmvq::pipeline {

using Logger = std::function<void(const std::string&)>;
inline Logger null_logger() {
    return [](const std::string&) {};
}
Logger stream_logger(std::ostream& os);

struct ExtractResult {
    int sessions = 0;
    int segments = 0;
    std::vector<std::string> warnings;
};

// Channel CSVs -> per-segment FVTC matrices cached in one container, entries
// named "{session}/{segment}/{modality}".
ExtractResult extract_features(const data::Manifest& manifest, const std::filesystem::path& data_dir,
                               const config::RunConfig& cfg, const std::filesystem::path& out_cache,
                               const Logger& log = null_logger());

std::vector<mrl::SegmentSample<float>> load_segment_samples(const std::filesystem::path& cache_path,
                                                            const data::Manifest& manifest);

struct SplitIndices {
    std::vector<size_t> train, val, test;
};

template <typename Item>
SplitIndices split_indices(const std::vector<Item>& items, const data::SplitAssignment& split) {
    SplitIndices out;
    for (size_t i = 0; i < items.size(); ++i) {
        switch (split.of(items[i].subject_id)) {
            case data::Split::train: out.train.push_back(i); break;
            case data::Split::val: out.val.push_back(i); break;
            case data::Split::test: out.test.push_back(i); break;
        }
    }
    return out;
}

mrl::MrlCheckpoint<float> run_train_mrl(const std::filesystem::path& cache_path, const data::Manifest& manifest,
                                        const config::RunConfig& cfg, const Logger& log = null_logger());

struct EmbedResult {
    int sessions = 0;
    int t_max = 0;
    int dim = 0;
};

// Quantized fused latents per segment, stacked per session into zero-padded
// matrices with masks; written as "{session}/values" and "{session}/mask".
EmbedResult embed_sessions(mrl::MrlCheckpoint<float>& ck, const std::filesystem::path& cache_path,
                           const data::Manifest& manifest, const config::RunConfig& cfg,
                           const std::filesystem::path& out_path, const Logger& log = null_logger());

struct SessionDataset {
    std::vector<downstream::SessionMatrix> sessions;
    std::vector<downstream::SessionTarget> targets;
    int t_max = 0;
    int dim = 0;
};

SessionDataset load_session_dataset(const std::filesystem::path& sessions_path, const data::Manifest& manifest);

struct DownstreamRun {
    downstream::DownstreamCheckpoint<float> checkpoint;
    std::vector<io::PredictionRow> test_predictions;
    std::vector<io::PredictionRow> all_predictions;
};

DownstreamRun run_train_downstream(const SessionDataset& dataset, const data::SplitAssignment& split,
                                   const config::RunConfig& cfg, downstream::TaskMode mode,
                                   const Logger& log = null_logger());

// ---- gradient verification suite ----

struct GradCheckLine {
    std::string name;
    double max_rel_err = 0.0;
};

// Per-primitive finite-difference checks at 64-bit plus the composed model
// losses on tiny dimensions (straight-through path frozen at the base point).
std::vector<GradCheckLine> run_grad_suite();

// Tiny model configuration used by the composed checks.
mrl::MrlConfig tiny_mrl_config();

}  // namespace mmvq::pipeline
