#include "mmvq/csv.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace mmvq::io {

namespace {

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace

features::ChannelSeries read_channel_csv(const std::filesystem::path& path, features::Modality modality,
                                         double rate_hz, const std::string& session_id,
                                         const std::string& subject_id) {
    std::ifstream is(path);
    if (!is) throw ValidationError("channel csv: cannot open '" + path.string() + "'");
    std::string line;
    if (!std::getline(is, line)) throw ValidationError("channel csv: empty file '" + path.string() + "'");
    features::ChannelSeries s;
    s.modality = modality;
    s.rate_hz = rate_hz;
    s.session_id = session_id;
    s.subject_id = subject_id;
    s.channel_names = split_line(line);
    s.n_channels = static_cast<int>(s.channel_names.size());

    std::vector<double> frame_major;
    int64_t frames = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto cells = split_line(line);
        if (static_cast<int>(cells.size()) != s.n_channels)
            throw ValidationError("channel csv: row " + std::to_string(frames + 2) + " of '" + path.string() +
                                  "' has " + std::to_string(cells.size()) + " cells, expected " +
                                  std::to_string(s.n_channels));
        for (const auto& c : cells) frame_major.push_back(std::stod(c));
        ++frames;
    }
    if (frames == 0) throw ValidationError("channel csv: no frames in '" + path.string() + "'");
    s.n_frames = frames;
    s.samples.resize(frame_major.size());
    for (int64_t f = 0; f < frames; ++f)
        for (int c = 0; c < s.n_channels; ++c)
            s.samples[static_cast<size_t>(c) * frames + f] =
                frame_major[static_cast<size_t>(f) * s.n_channels + c];
    s.validate();
    return s;
}

void write_channel_csv(const std::filesystem::path& path, const std::vector<std::string>& channel_names,
                       const std::vector<double>& samples_channel_major, int64_t n_frames) {
    const int C = static_cast<int>(channel_names.size());
    if (static_cast<int64_t>(samples_channel_major.size()) != static_cast<int64_t>(C) * n_frames)
        throw ValidationError("channel csv: sample buffer does not match channels x frames");
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw ValidationError("channel csv: cannot open '" + path.string() + "' for writing");
    for (int c = 0; c < C; ++c) os << (c ? "," : "") << channel_names[static_cast<size_t>(c)];
    os << "\n";
    char buf[32];
    for (int64_t f = 0; f < n_frames; ++f) {
        std::string line;
        for (int c = 0; c < C; ++c) {
            std::snprintf(buf, sizeof(buf), "%.5f", samples_channel_major[static_cast<size_t>(c) * n_frames + f]);
            if (c) line.push_back(',');
            line += buf;
        }
        line.push_back('\n');
        os << line;
    }
}

void write_predictions_csv(const std::filesystem::path& path, const std::vector<PredictionRow>& rows) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw ValidationError("predictions csv: cannot open '" + path.string() + "' for writing");
    os << "subject_id,session_id,true_class,pred_class,p_hc,p_psz,p_msz,true_bprs,pred_bprs\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.6f,%.6f,%.6f,%.4f,%.4f", r.p_hc, r.p_psz, r.p_msz, r.true_bprs,
                      r.pred_bprs);
        os << r.subject_id << ',' << r.session_id << ',' << r.true_class << ',' << r.pred_class << ',' << buf
           << "\n";
    }
}

std::vector<PredictionRow> read_predictions_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ValidationError("predictions csv: cannot open '" + path.string() + "'");
    std::string line;
    if (!std::getline(is, line)) throw ValidationError("predictions csv: empty file '" + path.string() + "'");
    const auto header = split_line(line);
    const std::vector<std::string> expected = {"subject_id", "session_id", "true_class", "pred_class", "p_hc",
                                               "p_psz",      "p_msz",      "true_bprs",  "pred_bprs"};
    if (header != expected) throw ValidationError("predictions csv: unexpected header in '" + path.string() + "'");
    std::vector<PredictionRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto cells = split_line(line);
        if (cells.size() != expected.size())
            throw ValidationError("predictions csv: malformed row in '" + path.string() + "'");
        PredictionRow r;
        r.subject_id = cells[0];
        r.session_id = cells[1];
        r.true_class = cells[2];
        r.pred_class = cells[3];
        r.p_hc = std::stod(cells[4]);
        r.p_psz = std::stod(cells[5]);
        r.p_msz = std::stod(cells[6]);
        r.true_bprs = std::stod(cells[7]);
        r.pred_bprs = std::stod(cells[8]);
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace mmvq::io
