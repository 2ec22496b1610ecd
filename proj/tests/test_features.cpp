#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "mmvq/features.hpp"

using namespace mmvq;
using namespace mmvq::features;

namespace {

ChannelSeries make_series(Modality m, int channels, double rate, int64_t frames, uint64_t seed,
                          const std::string& session = "sess1") {
    ChannelSeries s;
    s.modality = m;
    s.rate_hz = rate;
    s.n_channels = channels;
    s.n_frames = frames;
    s.session_id = session;
    s.subject_id = "subj1";
    for (int c = 0; c < channels; ++c) s.channel_names.push_back("ch" + std::to_string(c));
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    s.samples.resize(static_cast<size_t>(channels) * frames);
    for (auto& v : s.samples) v = dist(rng);
    return s;
}

// Two-pass Pearson, independent of the production code path.
double pearson_oracle(std::span<const double> x, std::span<const double> y) {
    const size_t n = x.size();
    double mx = 0, my = 0;
    for (size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxx = 0, syy = 0, sxy = 0;
    for (size_t i = 0; i < n; ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    if (sxx <= 0 || syy <= 0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

}  // namespace

TEST_CASE("delay_correlation hand cases") {
    std::vector<double> x = {1, 2, 3, 4};
    std::vector<double> rev = {4, 3, 2, 1};
    CHECK(delay_correlation(x, x, 0) == doctest::Approx(1.0));
    CHECK(delay_correlation(x, rev, 0) == doctest::Approx(-1.0));

    std::vector<double> a = {1, 2, 3, 4, 5};
    std::vector<double> b = {0, 1, 2, 3, 4};
    CHECK(delay_correlation(a, b, 1) == doctest::Approx(1.0));

    CHECK_THROWS_AS(delay_correlation(x, x, 3), ValidationError);
    CHECK_THROWS_AS(delay_correlation(x, x, -1), ValidationError);

    std::vector<double> flat = {2, 2, 2, 2};
    CHECK(delay_correlation(x, flat, 0) == doctest::Approx(0.0));
}

TEST_CASE("segment_session counts and boundaries") {
    auto audio = make_series(Modality::audio, 2, 100.0, 11000, 0);  // 110 s
    auto video = make_series(Modality::video, 2, 30.0, 3300, 1);    // 110 s
    auto segs = segment_session(audio, video, 40.0, 5.0);
    REQUIRE(segs.size() == 3);
    CHECK(segs[0].start_s == doctest::Approx(0.0));
    CHECK(segs[1].start_s == doctest::Approx(35.0));
    CHECK(segs[2].start_s == doctest::Approx(70.0));
    for (const auto& s : segs) {
        CHECK(s.end_s - s.start_s == doctest::Approx(40.0));
        CHECK(s.audio_begin == std::llround(s.start_s * 100.0));
        CHECK(s.audio_end == std::llround(s.end_s * 100.0));
        CHECK(s.video_begin == std::llround(s.start_s * 30.0));
        CHECK(s.video_end == std::llround(s.end_s * 30.0));
    }
    // consecutive windows share exactly the overlap
    for (size_t i = 1; i < segs.size(); ++i)
        CHECK(segs[i - 1].end_s - segs[i].start_s == doctest::Approx(5.0));

    auto a40 = make_series(Modality::audio, 2, 100.0, 4000, 2);
    auto v40 = make_series(Modality::video, 2, 30.0, 1200, 3);
    CHECK(segment_session(a40, v40, 40.0, 5.0).size() == 1);

    // the longest-session shape from the stacked-input size
    auto a_long = make_series(Modality::audio, 2, 100.0, 396000, 4);
    auto v_long = make_series(Modality::video, 2, 30.0, 118800, 5);
    CHECK(segment_session(a_long, v_long, 40.0, 5.0).size() == 113);

    auto a_short = make_series(Modality::audio, 2, 100.0, 3000, 6);
    auto v_short = make_series(Modality::video, 2, 30.0, 900, 7);
    std::vector<std::string> warnings;
    CHECK(segment_session(a_short, v_short, 40.0, 5.0, &warnings).empty());
    CHECK(warnings.size() == 1);

    CHECK_THROWS_AS(segment_session(a40, v40, 5.0, 5.0), ValidationError);
}

TEST_CASE("build_fvtc reduces to the plain correlation matrix for delay 0") {
    auto audio = make_series(Modality::audio, 2, 100.0, 4000, 11);
    auto video = make_series(Modality::video, 2, 30.0, 1200, 12);
    auto segs = segment_session(audio, video, 40.0, 5.0);
    REQUIRE(segs.size() == 1);
    auto m = build_fvtc(segs[0], Modality::audio, {0});
    CHECK(m.rows() == 2);
    CHECK(m.cols() == 2);
    CHECK(m.at(0, 0, 0) == doctest::Approx(1.0));
    CHECK(m.at(1, 1, 0) == doctest::Approx(1.0));
    const double r01 = pearson_oracle(audio.channel(0), audio.channel(1));
    CHECK(m.at(0, 1, 0) == doctest::Approx(r01).epsilon(1e-9));
    CHECK(m.at(1, 0, 0) == doctest::Approx(r01).epsilon(1e-9));
}

TEST_CASE("build_fvtc default shapes and bounds") {
    auto audio = make_series(Modality::audio, 8, 100.0, 4000, 21);
    auto video = make_series(Modality::video, 10, 30.0, 1200, 22);
    auto segs = segment_session(audio, video, 40.0, 5.0);
    REQUIRE(!segs.empty());
    std::vector<int> delays = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    auto ma = build_fvtc(segs[0], Modality::audio, delays);
    auto mv = build_fvtc(segs[0], Modality::video, delays);
    CHECK(ma.rows() == 8);
    CHECK(ma.cols() == 80);
    CHECK(mv.rows() == 10);
    CHECK(mv.cols() == 100);
    for (double v : ma.values) CHECK(std::abs(v) <= 1.0 + 1e-12);
    for (int i = 0; i < 8; ++i) CHECK(ma.at(i, i, 0) == doctest::Approx(1.0));
}

TEST_CASE("build_fvtc equals the brute-force Pearson oracle") {
    std::mt19937_64 rng(33);
    for (int trial = 0; trial < 20; ++trial) {
        auto audio = make_series(Modality::audio, 4, 50.0, 50, 100 + static_cast<uint64_t>(trial));
        auto video = make_series(Modality::video, 4, 50.0, 50, 200 + static_cast<uint64_t>(trial));
        Segment seg;
        seg.audio = &audio;
        seg.video = &video;
        seg.audio_begin = 0;
        seg.audio_end = 50;
        seg.video_begin = 0;
        seg.video_end = 50;
        std::vector<int> delays = {0, 1, 3};
        auto m = build_fvtc(seg, Modality::audio, delays);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j)
                for (size_t k = 0; k < delays.size(); ++k) {
                    const int d = delays[k];
                    auto xi = audio.channel(i);
                    auto xj = audio.channel(j);
                    const double expect =
                        pearson_oracle(xi.subspan(0, static_cast<size_t>(50 - d)), xj.subspan(static_cast<size_t>(d)));
                    CHECK(std::abs(m.at(i, j, static_cast<int>(k)) - expect) < 1e-6);
                }
    }
}

TEST_CASE("build_fvtc is invariant to positive affine rescaling per channel") {
    auto audio = make_series(Modality::audio, 3, 50.0, 80, 55);
    auto video = make_series(Modality::video, 3, 50.0, 80, 56);
    Segment seg;
    seg.audio = &audio;
    seg.video = &video;
    seg.audio_end = seg.video_end = 80;
    std::vector<int> delays = {0, 2};
    auto base = build_fvtc(seg, Modality::audio, delays);

    auto scaled = audio;
    for (int c = 0; c < 3; ++c)
        for (int64_t f = 0; f < 80; ++f) scaled.at(c, f) = scaled.at(c, f) * (1.5 + c) + 7.0 * (c + 1);
    Segment seg2 = seg;
    seg2.audio = &scaled;
    auto rescaled = build_fvtc(seg2, Modality::audio, delays);
    for (size_t i = 0; i < base.values.size(); ++i) CHECK(std::abs(base.values[i] - rescaled.values[i]) < 1e-6);
}

TEST_CASE("constant channels give zero correlations and are reported") {
    auto audio = make_series(Modality::audio, 3, 50.0, 60, 77);
    for (int64_t f = 0; f < 60; ++f) audio.at(1, f) = 4.2;
    auto video = make_series(Modality::video, 3, 50.0, 60, 78);
    Segment seg;
    seg.audio = &audio;
    seg.video = &video;
    seg.audio_end = seg.video_end = 60;
    auto m = build_fvtc(seg, Modality::audio, {0, 1});
    REQUIRE(m.constant_channels == std::vector<int>{1});
    for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 2; ++k) {
            CHECK(m.at(1, j, k) == doctest::Approx(0.0));
            CHECK(m.at(j, 1, k) == doctest::Approx(0.0));
        }
}
