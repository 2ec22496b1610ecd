#pragma once

// Channel CSVs (header row of channel names, one frame per row) and the
// downstream predictions CSV.

#include <filesystem>
#include <string>
#include <vector>

#include "mmvq/features.hpp"

namespace mmvq::io {

features::ChannelSeries read_channel_csv(const std::filesystem::path& path, features::Modality modality,
                                         double rate_hz, const std::string& session_id,
                                         const std::string& subject_id);

void write_channel_csv(const std::filesystem::path& path, const std::vector<std::string>& channel_names,
                       const std::vector<double>& samples_channel_major, int64_t n_frames);

struct PredictionRow {
    std::string subject_id;
    std::string session_id;
    std::string true_class;
    std::string pred_class;
    double p_hc = 0.0, p_psz = 0.0, p_msz = 0.0;
    double true_bprs = 0.0;
    double pred_bprs = 0.0;
};

void write_predictions_csv(const std::filesystem::path& path, const std::vector<PredictionRow>& rows);
std::vector<PredictionRow> read_predictions_csv(const std::filesystem::path& path);

}  // namespace mmvq::io
