#pragma once

// Dataset manifest handling, symptom-subtype labeling, subject-independent
// splitting, and the synthetic cohort generator that stands in for the
// clinical corpus.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mmvq/errors.hpp"

namespace mmvq::data {

enum class SymptomClass { HC, PSZ, MSZ };

const char* to_string(SymptomClass c);
SymptomClass symptom_class_from_string(const std::string& s);

struct SessionRecord {
    std::string subject_id;
    std::string session_id;
    std::string audio_csv;
    std::string video_csv;
    std::array<int, 18> bprs_items{};
    std::string clazz;  // optional; derivable from items

    int bprs_total() const;
};

struct Manifest {
    std::vector<SessionRecord> sessions;

    std::vector<std::string> subject_ids() const;  // unique, in first-seen order
    void save(const std::filesystem::path& path) const;
    static Manifest load(const std::filesystem::path& path, bool check_files = true);
};

// BPRS item index sets (0-based within the 18-item scale) whose mean score
// decides the subtype. Only the positive set is named by the class rule;
// the rest are configurable.
struct SubtypeConfig {
    std::map<std::string, std::vector<int>> subtype_items = {
        {"positive", {3, 7, 11, 14}},   // conceptual disorganization, grandiosity,
                                        // hallucinatory behavior, unusual thought content
        {"negative", {2, 12, 15, 17}},  // emotional withdrawal, motor retardation,
                                        // blunted affect, disorientation
    };
    double threshold = 3.5;
};

// HC when no subtype mean exceeds the threshold; P-SZ when only the positive
// one does; M-SZ otherwise.
SymptomClass assign_subtype(const std::array<int, 18>& items, const SubtypeConfig& cfg = SubtypeConfig{});

enum class Split { train, val, test };
const char* to_string(Split s);

struct SplitAssignment {
    std::map<std::string, Split> by_subject;

    Split of(const std::string& subject_id) const;
};

// Shuffles subjects by seed and partitions them so cumulative session counts
// track the requested ratios. Every session of a subject stays in one split;
// all three splits are non-empty.
SplitAssignment split_subjects(const Manifest& manifest, std::array<double, 3> ratios, uint64_t seed);

struct CohortConfig {
    int subjects = 20;
    int sessions_min = 2;
    int sessions_max = 4;
    double duration_min_s = 110.0;
    double duration_max_s = 220.0;
    double hc_fraction = 0.4;
    double psz_fraction = 0.3;
    double msz_fraction = 0.3;
    int extreme_subjects = 1;  // M-SZ subjects pushed >= 2 SD above the cohort mean
    int audio_channels = 8;
    int video_channels = 10;
    double audio_rate_hz = 100.0;
    double video_rate_hz = 30.0;
};

// Writes channel CSVs under out_dir and returns the manifest (also written to
// out_dir/manifest.jsonl). Deterministic per seed, byte-identical CSVs.
Manifest generate_synthetic(const CohortConfig& cfg, uint64_t seed, const std::filesystem::path& out_dir);

}  // namespace mmvq::data
