#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <numeric>

#include "mmvq/data.hpp"

using namespace mmvq;
using namespace mmvq::data;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("mmvq_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

Manifest tiny_manifest(int subjects, int sessions_each) {
    Manifest m;
    for (int s = 0; s < subjects; ++s)
        for (int k = 0; k < sessions_each; ++k) {
            SessionRecord r;
            r.subject_id = "S" + std::to_string(s);
            r.session_id = "S" + std::to_string(s) + "_" + std::to_string(k);
            r.audio_csv = "a.csv";
            r.video_csv = "v.csv";
            r.bprs_items.fill(1);
            m.sessions.push_back(r);
        }
    return m;
}

}  // namespace

TEST_CASE("assign_subtype follows the threshold rule") {
    std::array<int, 18> items;
    items.fill(1);
    CHECK(assign_subtype(items) == SymptomClass::HC);

    // positive items at 4 (mean 4.0 > 3.5), everything else low
    for (int i : {3, 7, 11, 14}) items[static_cast<size_t>(i)] = 4;
    CHECK(assign_subtype(items) == SymptomClass::PSZ);

    // negative items also at 4: two subtype means exceed the threshold
    for (int i : {2, 12, 15, 17}) items[static_cast<size_t>(i)] = 4;
    CHECK(assign_subtype(items) == SymptomClass::MSZ);

    items.fill(1);
    items[0] = 9;
    CHECK_THROWS_AS(assign_subtype(items), ValidationError);

    // boundary: mean exactly 3.5 does not exceed
    items.fill(1);
    items[3] = items[7] = 3;
    items[11] = items[14] = 4;  // mean 3.5
    CHECK(assign_subtype(items) == SymptomClass::HC);
}

TEST_CASE("split_subjects is subject-keyed, deterministic, and a partition") {
    auto m = tiny_manifest(10, 1);
    auto split = split_subjects(m, {0.70, 0.15, 0.15}, 42);
    int train = 0, val = 0, test = 0;
    for (const auto& [sid, sp] : split.by_subject) {
        if (sp == Split::train) ++train;
        if (sp == Split::val) ++val;
        if (sp == Split::test) ++test;
    }
    CHECK(train == 7);
    CHECK(val + test == 3);
    CHECK(val >= 1);
    CHECK(test >= 1);
    CHECK(split.by_subject.size() == 10);

    auto again = split_subjects(m, {0.70, 0.15, 0.15}, 42);
    CHECK(split.by_subject == again.by_subject);

    // two sessions of a subject land in one split by construction
    auto m2 = tiny_manifest(5, 2);
    auto split2 = split_subjects(m2, {0.70, 0.15, 0.15}, 1);
    for (const auto& rec : m2.sessions) CHECK(split2.of(rec.subject_id) == split2.by_subject.at(rec.subject_id));

    // renaming session files does not change the assignment
    auto m3 = m;
    for (auto& rec : m3.sessions) rec.audio_csv = "different.csv";
    auto split3 = split_subjects(m3, {0.70, 0.15, 0.15}, 42);
    CHECK(split3.by_subject == split.by_subject);

    CHECK_THROWS_AS(split_subjects(tiny_manifest(2, 1), {0.7, 0.15, 0.15}, 0), ValidationError);
}

TEST_CASE("synthetic generator: labels, ranges, determinism") {
    CohortConfig cfg;
    cfg.subjects = 8;
    cfg.sessions_min = 1;
    cfg.sessions_max = 2;
    cfg.duration_min_s = 5.0;
    cfg.duration_max_s = 8.0;
    cfg.extreme_subjects = 1;
    const auto dir = temp_dir("gen");
    auto manifest = generate_synthetic(cfg, 7, dir);

    CHECK(manifest.subject_ids().size() == 8);
    int extremes = 0;
    std::map<std::string, std::string> subject_class;
    for (const auto& rec : manifest.sessions) {
        const int total = rec.bprs_total();
        CHECK(total >= 19);
        CHECK(total <= 62);
        CHECK(to_string(assign_subtype(rec.bprs_items)) == rec.clazz);
        CHECK(std::filesystem::exists(dir / rec.audio_csv));
        CHECK(std::filesystem::exists(dir / rec.video_csv));
        if (total >= 58) ++extremes;
        auto it = subject_class.find(rec.subject_id);
        if (it == subject_class.end())
            subject_class[rec.subject_id] = rec.clazz;
        else
            CHECK(it->second == rec.clazz);  // class is a subject property
    }
    CHECK(extremes >= 1);

    // same seed, byte-identical output
    const auto dir2 = temp_dir("gen2");
    auto manifest2 = generate_synthetic(cfg, 7, dir2);
    REQUIRE(manifest.sessions.size() == manifest2.sessions.size());
    for (size_t i = 0; i < manifest.sessions.size(); ++i) {
        CHECK(slurp(dir / manifest.sessions[i].audio_csv) == slurp(dir2 / manifest2.sessions[i].audio_csv));
        CHECK(slurp(dir / manifest.sessions[i].video_csv) == slurp(dir2 / manifest2.sessions[i].video_csv));
    }
    CHECK(slurp(dir / "manifest.jsonl") == slurp(dir2 / "manifest.jsonl"));

    // manifest round-trip
    auto loaded = Manifest::load(dir / "manifest.jsonl");
    REQUIRE(loaded.sessions.size() == manifest.sessions.size());
    for (size_t i = 0; i < loaded.sessions.size(); ++i) {
        CHECK(loaded.sessions[i].subject_id == manifest.sessions[i].subject_id);
        CHECK(loaded.sessions[i].session_id == manifest.sessions[i].session_id);
        CHECK(loaded.sessions[i].bprs_items == manifest.sessions[i].bprs_items);
        CHECK(loaded.sessions[i].clazz == manifest.sessions[i].clazz);
    }
    std::filesystem::remove_all(dir);
    std::filesystem::remove_all(dir2);
}

TEST_CASE("synthetic generator hits the target severity moments at desk scale") {
    CohortConfig cfg;
    cfg.subjects = 20;
    cfg.sessions_min = 3;
    cfg.sessions_max = 3;
    cfg.duration_min_s = 5.0;  // short signals; only the labels matter here
    cfg.duration_max_s = 6.0;
    const auto dir = temp_dir("moments");
    auto manifest = generate_synthetic(cfg, 7, dir);
    CHECK(manifest.sessions.size() == 60);
    std::vector<double> totals;
    for (const auto& rec : manifest.sessions) totals.push_back(rec.bprs_total());
    const double mean = std::accumulate(totals.begin(), totals.end(), 0.0) / totals.size();
    double var = 0.0;
    for (double t : totals) var += (t - mean) * (t - mean);
    const double sd = std::sqrt(var / totals.size());
    CHECK(mean > 28.0);
    CHECK(mean < 38.0);
    CHECK(sd > 7.0);
    CHECK(sd < 15.0);

    // the injected extreme subject sits at least 2 SDs above the mean
    std::map<std::string, std::pair<double, int>> by_subject;
    for (const auto& rec : manifest.sessions) {
        by_subject[rec.subject_id].first += rec.bprs_total();
        by_subject[rec.subject_id].second += 1;
    }
    double max_subject_mean = 0.0;
    for (const auto& [sid, acc] : by_subject) max_subject_mean = std::max(max_subject_mean, acc.first / acc.second);
    CHECK(max_subject_mean >= mean + 2.0 * sd);
    std::filesystem::remove_all(dir);
}

TEST_CASE("generator rejects unsatisfiable configs") {
    CohortConfig cfg;
    cfg.subjects = 2;
    const auto dir = temp_dir("reject");
    CHECK_THROWS_AS(generate_synthetic(cfg, 0, dir), ValidationError);
    cfg.subjects = 10;
    cfg.hc_fraction = 0.5;
    CHECK_THROWS_AS(generate_synthetic(cfg, 0, dir), ValidationError);  // mix does not sum to 1
    std::filesystem::remove_all(dir);
}
