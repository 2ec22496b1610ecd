#pragma once

// Run configuration: JSON with sections {features, encoder, fusion, codebook,
// training, downstream, data, split}, deep-merged over defaults. The resolved
// document is written next to every run's outputs and its hash names the run
// directory.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmvq/data.hpp"
#include "mmvq/downstream.hpp"
#include "mmvq/mrl.hpp"

namespace mmvq::config {

struct FeaturesConfig {
    double window_s = 40.0;
    double overlap_s = 5.0;
    double audio_rate_hz = 100.0;
    double video_rate_hz = 30.0;
    int audio_channels = 8;
    int video_channels = 10;
    std::vector<int> delays_frames = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};

    int audio_fvtc_rows() const { return audio_channels; }
    int audio_fvtc_cols() const { return audio_channels * static_cast<int>(delays_frames.size()); }
    int video_fvtc_rows() const { return video_channels; }
    int video_fvtc_cols() const { return video_channels * static_cast<int>(delays_frames.size()); }
};

class RunConfig {
public:
    static nlohmann::json default_json();
    static RunConfig defaults();
    static RunConfig load(const std::filesystem::path& path);  // defaults deep-merged with the file
    static RunConfig from_json(const nlohmann::json& overrides);

    uint64_t seed() const;
    void set_seed(uint64_t s);
    uint64_t hash() const;          // over the full resolved document
    uint64_t mrl_hash() const;      // over the sections that shape the MRL model
    std::string dump(int indent = 2) const;
    const nlohmann::json& doc() const { return j_; }
    nlohmann::json& doc() { return j_; }

    FeaturesConfig features() const;
    mrl::MrlConfig mrl() const;  // encoder input shapes derived from features
    downstream::DownstreamConfig downstream(int input_dim, int t_max) const;
    data::CohortConfig cohort() const;
    std::array<double, 3> split_ratios() const;

private:
    nlohmann::json j_;
};

// temp file + rename
void atomic_write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace mmvq::config
