#include "mmvq/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

#include "mmvq/csv.hpp"
#include "mmvq/hash.hpp"

namespace mmvq::data {

using nlohmann::json;

const char* to_string(SymptomClass c) {
    switch (c) {
        case SymptomClass::HC: return "HC";
        case SymptomClass::PSZ: return "P-SZ";
        case SymptomClass::MSZ: return "M-SZ";
    }
    return "?";
}

SymptomClass symptom_class_from_string(const std::string& s) {
    if (s == "HC") return SymptomClass::HC;
    if (s == "P-SZ") return SymptomClass::PSZ;
    if (s == "M-SZ") return SymptomClass::MSZ;
    throw ValidationError("unknown symptom class '" + s + "'");
}

int SessionRecord::bprs_total() const { return std::accumulate(bprs_items.begin(), bprs_items.end(), 0); }

std::vector<std::string> Manifest::subject_ids() const {
    std::vector<std::string> out;
    for (const auto& s : sessions)
        if (std::find(out.begin(), out.end(), s.subject_id) == out.end()) out.push_back(s.subject_id);
    return out;
}

void Manifest::save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw ValidationError("manifest: cannot open '" + path.string() + "' for writing");
    for (const auto& s : sessions) {
        json j;
        j["subject_id"] = s.subject_id;
        j["session_id"] = s.session_id;
        j["audio_csv"] = s.audio_csv;
        j["video_csv"] = s.video_csv;
        j["bprs_items"] = s.bprs_items;
        if (!s.clazz.empty()) j["class"] = s.clazz;
        os << j.dump() << "\n";
    }
}

Manifest Manifest::load(const std::filesystem::path& path, bool check_files) {
    std::ifstream is(path);
    if (!is) throw ValidationError("manifest: cannot open '" + path.string() + "'");
    Manifest m;
    std::string line;
    std::map<std::string, bool> seen;
    const auto base = path.parent_path();
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw ValidationError("manifest: invalid JSON on line " + std::to_string(line_no) + " of '" +
                                  path.string() + "'");
        SessionRecord s;
        s.subject_id = j.at("subject_id").get<std::string>();
        s.session_id = j.at("session_id").get<std::string>();
        s.audio_csv = j.at("audio_csv").get<std::string>();
        s.video_csv = j.at("video_csv").get<std::string>();
        const auto items = j.at("bprs_items").get<std::vector<int>>();
        if (items.size() != 18)
            throw ValidationError("manifest: session '" + s.session_id + "' has " + std::to_string(items.size()) +
                                  " BPRS items, expected 18");
        std::copy(items.begin(), items.end(), s.bprs_items.begin());
        for (int v : s.bprs_items)
            if (v < 1 || v > 7)
                throw ValidationError("manifest: session '" + s.session_id + "' has BPRS item " +
                                      std::to_string(v) + " outside [1,7]");
        if (j.contains("class")) s.clazz = j.at("class").get<std::string>();
        if (seen.count(s.session_id))
            throw ValidationError("manifest: duplicate session_id '" + s.session_id + "'");
        seen[s.session_id] = true;
        if (check_files) {
            for (const auto& rel : {s.audio_csv, s.video_csv}) {
                const auto p = base / rel;
                if (!std::filesystem::exists(p))
                    throw ValidationError("manifest: referenced file '" + p.string() + "' does not exist");
            }
        }
        m.sessions.push_back(std::move(s));
    }
    return m;
}

SymptomClass assign_subtype(const std::array<int, 18>& items, const SubtypeConfig& cfg) {
    for (int v : items)
        if (v < 1 || v > 7) throw ValidationError("assign_subtype: item score " + std::to_string(v) + " outside [1,7]");
    std::vector<std::string> exceeding;
    for (const auto& [name, idx] : cfg.subtype_items) {
        if (idx.empty()) continue;
        double sum = 0.0;
        for (int i : idx) {
            if (i < 0 || i >= 18)
                throw ValidationError("assign_subtype: subtype '" + name + "' has item index " + std::to_string(i) +
                                      " outside [0,18)");
            sum += items[static_cast<size_t>(i)];
        }
        if (sum / static_cast<double>(idx.size()) > cfg.threshold) exceeding.push_back(name);
    }
    if (exceeding.empty()) return SymptomClass::HC;
    if (exceeding.size() == 1 && exceeding[0] == "positive") return SymptomClass::PSZ;
    return SymptomClass::MSZ;
}

const char* to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

Split SplitAssignment::of(const std::string& subject_id) const {
    auto it = by_subject.find(subject_id);
    if (it == by_subject.end()) throw ValidationError("split: unknown subject '" + subject_id + "'");
    return it->second;
}

namespace {

// Explicit Fisher-Yates so shuffles do not depend on std library internals.
template <typename T>
void seeded_shuffle(std::vector<T>& v, std::mt19937_64& rng) {
    for (size_t i = v.size(); i > 1; --i) {
        const size_t j = static_cast<size_t>(rng() % i);
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace

SplitAssignment split_subjects(const Manifest& manifest, std::array<double, 3> ratios, uint64_t seed) {
    auto subjects = manifest.subject_ids();
    if (subjects.size() < 3)
        throw ValidationError("split_subjects: need at least 3 subjects, got " + std::to_string(subjects.size()));
    const double rsum = ratios[0] + ratios[1] + ratios[2];
    if (rsum <= 0.0) throw ValidationError("split_subjects: ratios must be positive");

    std::map<std::string, int> session_count;
    for (const auto& s : manifest.sessions) session_count[s.subject_id]++;
    int total_sessions = static_cast<int>(manifest.sessions.size());

    std::mt19937_64 rng(seed);
    seeded_shuffle(subjects, rng);

    // Walk the shuffled subjects, growing each split while that brings its
    // cumulative session count strictly closer to the target.
    SplitAssignment out;
    const std::array<double, 3> targets = {ratios[0] / rsum * total_sessions, ratios[1] / rsum * total_sessions,
                                           ratios[2] / rsum * total_sessions};
    const std::array<Split, 3> kinds = {Split::train, Split::val, Split::test};
    size_t pos = 0;
    for (int part = 0; part < 3; ++part) {
        double cum = 0.0;
        while (pos < subjects.size()) {
            const size_t remaining_parts = static_cast<size_t>(2 - part);
            const size_t remaining_subjects = subjects.size() - pos;
            if (remaining_subjects <= remaining_parts) break;  // keep later splits non-empty
            const double next = cum + session_count[subjects[pos]];
            if (part < 2 && std::abs(next - targets[static_cast<size_t>(part)]) >
                                std::abs(cum - targets[static_cast<size_t>(part)]) &&
                cum > 0.0)
                break;
            out.by_subject[subjects[pos]] = kinds[static_cast<size_t>(part)];
            cum = next;
            ++pos;
            if (part == 2) continue;  // last split takes everything left
        }
    }
    while (pos < subjects.size()) out.by_subject[subjects[pos++]] = Split::test;

    std::array<int, 3> counts{0, 0, 0};
    for (const auto& [sid, sp] : out.by_subject) counts[static_cast<size_t>(sp)]++;
    if (counts[0] == 0 || counts[1] == 0 || counts[2] == 0)
        throw ValidationError("split_subjects: a split ended up empty; too few subjects for the ratios");
    return out;
}

namespace {

struct ClassPlan {
    SymptomClass clazz;
    bool extreme = false;
};

// Item groups: the positive/negative subtype sets of SubtypeConfig defaults,
// everything else is "other".
const std::vector<int> kPositiveItems = {3, 7, 11, 14};
const std::vector<int> kNegativeItems = {2, 12, 15, 17};

std::vector<int> other_items() {
    std::vector<int> out;
    for (int i = 0; i < 18; ++i)
        if (std::find(kPositiveItems.begin(), kPositiveItems.end(), i) == kPositiveItems.end() &&
            std::find(kNegativeItems.begin(), kNegativeItems.end(), i) == kNegativeItems.end())
            out.push_back(i);
    return out;
}

struct ItemBounds {
    int pos_lo, pos_hi, neg_lo, neg_hi, oth_lo, oth_hi;
    int total_lo, total_hi;  // per-session clamp for the class
};

ItemBounds bounds_for(SymptomClass c, bool extreme) {
    switch (c) {
        case SymptomClass::HC: return {1, 2, 1, 2, 1, 3, 19, 28};
        case SymptomClass::PSZ: return {4, 6, 1, 3, 1, 3, 30, 40};
        case SymptomClass::MSZ:
            if (extreme) return {4, 6, 4, 6, 1, 2, 58, 62};
            return {4, 6, 4, 6, 1, 2, 42, 52};
    }
    throw ValidationError("bounds_for: bad class");
}

std::array<int, 18> draw_items(std::mt19937_64& rng, SymptomClass clazz, bool extreme, int target_total) {
    const ItemBounds b = bounds_for(clazz, extreme);
    const auto others = other_items();
    auto draw_in = [&](int lo, int hi) {
        return lo + static_cast<int>(rng() % static_cast<uint64_t>(hi - lo + 1));
    };
    std::array<int, 18> items{};
    std::array<int, 18> lo{}, hi{};
    for (int i : kPositiveItems) { lo[static_cast<size_t>(i)] = b.pos_lo; hi[static_cast<size_t>(i)] = b.pos_hi; }
    for (int i : kNegativeItems) { lo[static_cast<size_t>(i)] = b.neg_lo; hi[static_cast<size_t>(i)] = b.neg_hi; }
    for (int i : others) { lo[static_cast<size_t>(i)] = b.oth_lo; hi[static_cast<size_t>(i)] = b.oth_hi; }
    for (int i = 0; i < 18; ++i) items[static_cast<size_t>(i)] = draw_in(lo[static_cast<size_t>(i)], hi[static_cast<size_t>(i)]);

    int total = std::accumulate(items.begin(), items.end(), 0);
    int guard = 0;
    while (total != target_total) {
        if (++guard > 10000)
            throw ValidationError("generate_synthetic: cannot reach target BPRS total " +
                                  std::to_string(target_total) + " under class constraints");
        const int dir = total < target_total ? 1 : -1;
        std::vector<int> candidates;
        for (int i = 0; i < 18; ++i) {
            const int v = items[static_cast<size_t>(i)] + dir;
            if (v >= lo[static_cast<size_t>(i)] && v <= hi[static_cast<size_t>(i)]) candidates.push_back(i);
        }
        if (candidates.empty())
            throw ValidationError("generate_synthetic: BPRS target " + std::to_string(target_total) +
                                  " infeasible for class " + to_string(clazz));
        const int pick = candidates[static_cast<size_t>(rng() % candidates.size())];
        items[static_cast<size_t>(pick)] += dir;
        total += dir;
    }
    return items;
}

// Order-1 autoregressive channels sharing a common driver. Coupling pattern
// depends on the class, coupling strength and output variance grow
// monotonically with the severity total, and per-channel lags give the
// delayed correlations structure.
std::vector<double> synth_channels(std::mt19937_64& rng, SymptomClass clazz, int total, int n_channels,
                                   int64_t frames, double phi) {
    const double u = (static_cast<double>(total) - 19.0) / (62.0 - 19.0);
    const double strength = 0.75 + 0.4 * u;
    const double amp = 1.0 + 1.5 * u;
    const int max_lag = 2;
    const int64_t burn = 300;

    std::normal_distribution<double> gauss(0.0, 1.0);
    const double innov = std::sqrt(1.0 - phi * phi);

    const int64_t drv_len = frames + burn + max_lag;
    std::vector<double> shared(static_cast<size_t>(drv_len));
    double s = 0.0;
    for (int64_t t = 0; t < drv_len; ++t) {
        s = phi * s + innov * gauss(rng);
        shared[static_cast<size_t>(t)] = s;
    }

    std::vector<double> out(static_cast<size_t>(n_channels) * frames);
    for (int c = 0; c < n_channels; ++c) {
        double base;
        switch (clazz) {
            case SymptomClass::HC: base = 0.25; break;
            case SymptomClass::PSZ: base = (c < (n_channels + 1) / 2) ? 0.85 : 0.25; break;
            case SymptomClass::MSZ: base = 0.85; break;
            default: base = 0.25; break;
        }
        const double lam = std::min(0.95, base * strength);
        const int lag = c % (max_lag + 1);
        const double offset = 0.1 * static_cast<double>(c);
        double p = 0.0;
        for (int64_t t = 0; t < burn; ++t) p = phi * p + innov * gauss(rng);
        for (int64_t t = 0; t < frames; ++t) {
            p = phi * p + innov * gauss(rng);
            const double drv = shared[static_cast<size_t>(burn + t + max_lag - lag)];
            const double x = lam * drv + (1.0 - lam) * p + 0.01 * gauss(rng);
            out[static_cast<size_t>(c) * frames + t] = amp * x + offset;
        }
    }
    return out;
}

std::vector<std::string> audio_channel_names(int n) {
    // 6 vocal tract variables plus the two source features
    static const std::vector<std::string> base = {"LA",   "LP",   "TBCL", "TBCD",
                                                  "TTCL", "TTCD", "aperiodicity", "periodicity"};
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i)
        out.push_back(i < static_cast<int>(base.size()) ? base[static_cast<size_t>(i)]
                                                        : "audio_ch" + std::to_string(i));
    return out;
}

std::vector<std::string> video_channel_names(int n) {
    // action units around the eyes, nose and lips
    static const std::vector<std::string> base = {"AU01", "AU02", "AU04", "AU05", "AU06",
                                                  "AU07", "AU09", "AU10", "AU12", "AU25"};
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i)
        out.push_back(i < static_cast<int>(base.size()) ? base[static_cast<size_t>(i)]
                                                        : "video_ch" + std::to_string(i));
    return out;
}

}  // namespace

Manifest generate_synthetic(const CohortConfig& cfg, uint64_t seed, const std::filesystem::path& out_dir) {
    if (cfg.subjects < 3) throw ValidationError("generate_synthetic: need at least 3 subjects");
    if (cfg.sessions_min < 1 || cfg.sessions_max < cfg.sessions_min)
        throw ValidationError("generate_synthetic: bad sessions range");
    if (cfg.duration_min_s <= 0 || cfg.duration_max_s < cfg.duration_min_s)
        throw ValidationError("generate_synthetic: bad duration range");
    const double mix_sum = cfg.hc_fraction + cfg.psz_fraction + cfg.msz_fraction;
    if (std::abs(mix_sum - 1.0) > 1e-6)
        throw ValidationError("generate_synthetic: class mix must sum to 1");
    if (cfg.extreme_subjects < 0 || cfg.extreme_subjects > cfg.subjects)
        throw ValidationError("generate_synthetic: bad extreme_subjects count");

    std::filesystem::create_directories(out_dir);

    // class plan: rounded mix, extremes carved out of the M-SZ quota
    int n_hc = static_cast<int>(std::lround(cfg.hc_fraction * cfg.subjects));
    int n_psz = static_cast<int>(std::lround(cfg.psz_fraction * cfg.subjects));
    int n_msz = cfg.subjects - n_hc - n_psz;
    if (n_msz < cfg.extreme_subjects)
        throw ValidationError("generate_synthetic: extreme_subjects exceeds the M-SZ quota");
    if (n_hc <= 0 || n_psz <= 0 || n_msz <= 0)
        throw ValidationError("generate_synthetic: class mix leaves an empty class at this cohort size");

    std::vector<ClassPlan> plan;
    for (int i = 0; i < n_hc; ++i) plan.push_back({SymptomClass::HC, false});
    for (int i = 0; i < n_psz; ++i) plan.push_back({SymptomClass::PSZ, false});
    for (int i = 0; i < n_msz; ++i) plan.push_back({SymptomClass::MSZ, i < cfg.extreme_subjects});

    std::mt19937_64 plan_rng(derive_seed(seed, "data/plan"));
    seeded_shuffle(plan, plan_rng);

    Manifest manifest;
    for (int si = 0; si < cfg.subjects; ++si) {
        const ClassPlan& cp = plan[static_cast<size_t>(si)];
        char sbuf[16];
        std::snprintf(sbuf, sizeof(sbuf), "S%03d", si + 1);
        const std::string subject_id = sbuf;

        std::mt19937_64 subj_rng(derive_seed(seed, "data/subject/" + subject_id));
        const int n_sessions =
            cfg.sessions_min + static_cast<int>(subj_rng() % static_cast<uint64_t>(cfg.sessions_max - cfg.sessions_min + 1));
        const ItemBounds b = bounds_for(cp.clazz, cp.extreme);
        const int base_total = b.total_lo + 2 + static_cast<int>(subj_rng() % static_cast<uint64_t>(
                                                    std::max(1, b.total_hi - b.total_lo - 3)));

        for (int k = 0; k < n_sessions; ++k) {
            char sess[32];
            std::snprintf(sess, sizeof(sess), "%s_sess%02d", subject_id.c_str(), k + 1);
            const std::string session_id = sess;
            std::mt19937_64 rng(derive_seed(seed, "data/session/" + session_id));

            const int jitter = static_cast<int>(rng() % 5) - 2;
            const int target = std::clamp(base_total + jitter, b.total_lo, b.total_hi);
            SessionRecord rec;
            rec.subject_id = subject_id;
            rec.session_id = session_id;
            rec.bprs_items = draw_items(rng, cp.clazz, cp.extreme, target);
            rec.clazz = to_string(assign_subtype(rec.bprs_items));
            if (rec.clazz != to_string(cp.clazz))
                throw NumericError("generate_synthetic: item sampler violated the class rule for " + session_id);

            const double dur_span = cfg.duration_max_s - cfg.duration_min_s;
            const double duration =
                std::floor(cfg.duration_min_s + dur_span * (static_cast<double>(rng() % 10000) / 10000.0));
            const int64_t audio_frames = static_cast<int64_t>(std::llround(duration * cfg.audio_rate_hz));
            const int64_t video_frames = static_cast<int64_t>(std::llround(duration * cfg.video_rate_hz));

            const int total = rec.bprs_total();
            auto audio = synth_channels(rng, cp.clazz, total, cfg.audio_channels, audio_frames, 0.97);
            auto video = synth_channels(rng, cp.clazz, total, cfg.video_channels, video_frames, 0.92);

            rec.audio_csv = session_id + "_audio.csv";
            rec.video_csv = session_id + "_video.csv";
            io::write_channel_csv(out_dir / rec.audio_csv, audio_channel_names(cfg.audio_channels), audio,
                                  audio_frames);
            io::write_channel_csv(out_dir / rec.video_csv, video_channel_names(cfg.video_channels), video,
                                  video_frames);
            manifest.sessions.push_back(std::move(rec));
        }
    }
    manifest.save(out_dir / "manifest.jsonl");
    return manifest;
}

}  // namespace mmvq::data
