#include "mmvq/features.hpp"

#include <cmath>

namespace mmvq::features {

void ChannelSeries::validate() const {
    if (rate_hz <= 0.0) throw ValidationError("ChannelSeries: rate_hz must be positive");
    if (n_channels <= 0) throw ValidationError("ChannelSeries: no channels");
    if (static_cast<int>(channel_names.size()) != n_channels)
        throw ValidationError("ChannelSeries: channel_names count " + std::to_string(channel_names.size()) +
                              " != n_channels " + std::to_string(n_channels));
    if (static_cast<int64_t>(samples.size()) != static_cast<int64_t>(n_channels) * n_frames)
        throw ValidationError("ChannelSeries: samples size does not match channels x frames");
}

double delay_correlation(std::span<const double> x, std::span<const double> y, int d) {
    if (x.size() != y.size()) throw ValidationError("delay_correlation: series lengths differ");
    const int64_t T = static_cast<int64_t>(x.size());
    if (d < 0 || d > T - 2)
        throw ValidationError("delay_correlation: delay " + std::to_string(d) + " out of range [0," +
                              std::to_string(T - 2) + "]");
    const int64_t n = T - d;
    // constant slices have zero variance by definition; an exact scan avoids
    // roundoff turning them into spurious +/-1 correlations
    bool x_const = true, y_const = true;
    for (int64_t t = 1; t < n && (x_const || y_const); ++t) {
        if (x[static_cast<size_t>(t)] != x[0]) x_const = false;
        if (y[static_cast<size_t>(t + d)] != y[static_cast<size_t>(d)]) y_const = false;
    }
    if (x_const || y_const) return 0.0;
    double mx = 0.0, my = 0.0;
    for (int64_t t = 0; t < n; ++t) {
        mx += x[static_cast<size_t>(t)];
        my += y[static_cast<size_t>(t + d)];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (int64_t t = 0; t < n; ++t) {
        const double dx = x[static_cast<size_t>(t)] - mx;
        const double dy = y[static_cast<size_t>(t + d)] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx <= 0.0 || syy <= 0.0) return 0.0;
    double r = sxy / std::sqrt(sxx * syy);
    // clamp roundoff spill
    if (r > 1.0) r = 1.0;
    if (r < -1.0) r = -1.0;
    return r;
}

std::vector<Segment> segment_session(const ChannelSeries& audio, const ChannelSeries& video, double window_s,
                                     double overlap_s, std::vector<std::string>* warnings) {
    audio.validate();
    video.validate();
    if (overlap_s < 0.0 || window_s <= overlap_s)
        throw ValidationError("segment_session: require window_s > overlap_s >= 0");
    if (audio.session_id != video.session_id)
        throw ValidationError("segment_session: modalities belong to different sessions ('" + audio.session_id +
                              "' vs '" + video.session_id + "')");
    const double hop = window_s - overlap_s;
    const double T = std::min(audio.duration_s(), video.duration_s());
    std::vector<Segment> out;
    if (T + 1e-9 < window_s) {
        if (warnings)
            warnings->push_back("session " + audio.session_id + ": duration " + std::to_string(T) +
                                "s shorter than window " + std::to_string(window_s) + "s, no segments");
        return out;
    }
    const int count = static_cast<int>(std::floor((T - window_s) / hop + 1e-9)) + 1;
    out.reserve(static_cast<size_t>(count));
    for (int k = 0; k < count; ++k) {
        Segment s;
        s.segment_index = k;
        s.start_s = static_cast<double>(k) * hop;
        s.end_s = s.start_s + window_s;
        s.audio = &audio;
        s.video = &video;
        s.audio_begin = std::llround(s.start_s * audio.rate_hz);
        s.audio_end = std::llround(s.end_s * audio.rate_hz);
        s.video_begin = std::llround(s.start_s * video.rate_hz);
        s.video_end = std::llround(s.end_s * video.rate_hz);
        out.push_back(s);
    }
    return out;
}

FvtcMatrix build_fvtc(const Segment& segment, Modality modality, const std::vector<int>& delays_frames) {
    const ChannelSeries* series = modality == Modality::audio ? segment.audio : segment.video;
    if (!series) throw ValidationError("build_fvtc: segment has no series for the requested modality");
    const int64_t begin = modality == Modality::audio ? segment.audio_begin : segment.video_begin;
    const int64_t end = modality == Modality::audio ? segment.audio_end : segment.video_end;
    if (begin < 0 || end > series->n_frames || end <= begin)
        throw ValidationError("build_fvtc: segment frame range out of bounds");
    const int64_t T = end - begin;
    for (int d : delays_frames)
        if (d < 0 || d > T - 2)
            throw ValidationError("build_fvtc: delay " + std::to_string(d) + " invalid for segment of " +
                                  std::to_string(T) + " frames");
    const int N = series->n_channels;
    const int D = static_cast<int>(delays_frames.size());

    FvtcMatrix m;
    m.modality = modality;
    m.n_channels = N;
    m.delays_frames = delays_frames;
    m.segment_index = segment.segment_index;
    m.values.assign(static_cast<size_t>(N) * N * D, 0.0);

    std::vector<std::span<const double>> slices(static_cast<size_t>(N));
    for (int c = 0; c < N; ++c)
        slices[static_cast<size_t>(c)] = series->channel(c).subspan(static_cast<size_t>(begin),
                                                                    static_cast<size_t>(T));

    for (int c = 0; c < N; ++c) {
        const auto s = slices[static_cast<size_t>(c)];
        const double first = s[0];
        bool constant = true;
        for (size_t t = 1; t < s.size(); ++t)
            if (s[t] != first) {
                constant = false;
                break;
            }
        if (constant) m.constant_channels.push_back(c);
    }

    for (int i = 0; i < N; ++i)
        for (int j = 0; j < N; ++j)
            for (int k = 0; k < D; ++k)
                m.values[(static_cast<size_t>(i) * N + j) * D + k] =
                    delay_correlation(slices[static_cast<size_t>(i)], slices[static_cast<size_t>(j)],
                                      delays_frames[static_cast<size_t>(k)]);
    return m;
}

}  // namespace mmvq::features
