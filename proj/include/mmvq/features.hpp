#pragma once

// Session time series -> per-segment channel-delay correlation matrices.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mmvq/errors.hpp"

namespace mmvq::features {

enum class Modality { audio, video };

inline const char* to_string(Modality m) { return m == Modality::audio ? "audio" : "video"; }

// Per-session multichannel series, samples stored [channels x frames].
struct ChannelSeries {
    Modality modality = Modality::audio;
    std::vector<std::string> channel_names;
    double rate_hz = 0.0;
    int n_channels = 0;
    int64_t n_frames = 0;
    std::vector<double> samples;  // row-major, channel-major
    std::string session_id;
    std::string subject_id;

    double duration_s() const { return static_cast<double>(n_frames) / rate_hz; }
    std::span<const double> channel(int c) const {
        return {samples.data() + static_cast<size_t>(c) * n_frames, static_cast<size_t>(n_frames)};
    }
    double& at(int c, int64_t f) { return samples[static_cast<size_t>(c) * n_frames + f]; }
    double at(int c, int64_t f) const { return samples[static_cast<size_t>(c) * n_frames + f]; }

    void validate() const;
};

// One fixed-length window of a session. Holds frame ranges into both series;
// the series must outlive the segment.
struct Segment {
    double start_s = 0.0;
    double end_s = 0.0;
    int segment_index = 0;
    const ChannelSeries* audio = nullptr;
    const ChannelSeries* video = nullptr;
    int64_t audio_begin = 0, audio_end = 0;
    int64_t video_begin = 0, video_end = 0;
};

// Channel-delay correlation matrix for one segment of one modality:
// values[i, j*D + k] = delayed Pearson correlation of channel i against
// channel j at delays[k]. All entries in [-1, 1].
struct FvtcMatrix {
    Modality modality = Modality::audio;
    int n_channels = 0;
    std::vector<int> delays_frames;
    std::vector<double> values;  // [n_channels x n_channels*D], row-major
    int segment_index = 0;
    std::vector<int> constant_channels;  // zero-variance channels found while building

    int rows() const { return n_channels; }
    int cols() const { return n_channels * static_cast<int>(delays_frames.size()); }
    double at(int i, int j, int k) const {
        return values[static_cast<size_t>(i) * cols() + static_cast<size_t>(j) * delays_frames.size() + k];
    }
};

// Pearson correlation of x[0..T-d) against y[d..T). Returns 0 when either
// slice has zero variance.
double delay_correlation(std::span<const double> x, std::span<const double> y, int d);

// Cut both series into window_s-long segments, consecutive windows sharing
// overlap_s seconds. Trailing partial windows are dropped. Sessions shorter
// than one window produce an empty list plus a warning record.
std::vector<Segment> segment_session(const ChannelSeries& audio, const ChannelSeries& video, double window_s,
                                     double overlap_s, std::vector<std::string>* warnings = nullptr);

FvtcMatrix build_fvtc(const Segment& segment, Modality modality, const std::vector<int>& delays_frames);

}  // namespace mmvq::features
