#pragma once

// Classification/regression evaluation and the leave-subject-out error
// analysis over a predictions file.

#include <array>
#include <map>
#include <string>
#include <vector>

#include "mmvq/csv.hpp"
#include "mmvq/errors.hpp"

namespace mmvq::metrics {

struct PerClass {
    std::string label;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    int support = 0;
};

struct SubjectMae {
    std::string subject_id;
    int sessions = 0;
    double mae = 0.0;
};

struct EvalReport {
    double weighted_f1 = 0.0;
    double weighted_accuracy = 0.0;   // support-weighted recall == plain accuracy
    double balanced_accuracy = 0.0;   // macro recall
    double auc_roc = 0.0;
    double mae = 0.0;
    double constant_mean_mae = 0.0;   // baseline: always predict the mean target
    std::vector<PerClass> per_class;
    std::vector<SubjectMae> per_subject_mae;
    int n_sessions = 0;

    std::string to_json() const;
    std::string pretty(const std::string& title = "") const;  // percentages
};

double weighted_f1(const std::vector<int>& pred, const std::vector<int>& truth);

// Returns {weighted accuracy, balanced accuracy}.
std::pair<double, double> accuracy_scores(const std::vector<int>& pred, const std::vector<int>& truth);

// Binary AUC from the rank statistic, half credit for ties. Depends only on
// the score ordering, so it is invariant to strictly monotone transforms.
double auc_binary(const std::vector<double>& scores, const std::vector<bool>& positive);

// One-vs-rest AUC per class from a rank statistic with half credit for ties,
// support-weighted over classes present in the truth.
double auc_roc_ovr(const std::vector<std::array<double, 3>>& probs, const std::vector<int>& truth);

double mae(const std::vector<double>& pred, const std::vector<double>& truth);

EvalReport evaluate_predictions(const std::vector<io::PredictionRow>& rows);

struct LeaveOutRow {
    std::string subject_id;
    int sessions = 0;
    double subject_mae = 0.0;        // MAE over this subject's sessions
    double mae_excluded = 0.0;       // cohort MAE with this subject removed
    double percent_change = 0.0;     // (baseline - excluded)/baseline * 100
    double z_distance = 0.0;         // |subject mean true - cohort mean| in cohort SDs
};

struct LeaveOutReport {
    double baseline_mae = 0.0;
    double cohort_mean_true = 0.0;
    double cohort_sd_true = 0.0;
    std::vector<LeaveOutRow> rows;  // sorted by exclusion impact, biggest drop first

    std::string pretty() const;
    std::string to_json() const;
};

LeaveOutReport leave_subject_out_mae(const std::vector<io::PredictionRow>& rows);

// Removal-plus-replacement variant: MAE after dropping `excluded` and adding
// the replacement rows (typically a different subject's predictions).
double replacement_mae(const std::vector<io::PredictionRow>& rows, const std::string& excluded,
                       const std::vector<io::PredictionRow>& replacement);

// Side-by-side table over named prediction sets, one row per model. Cells for
// tasks a model was not trained on are dashed out.
struct ComparisonRow {
    std::string name;
    EvalReport report;
    bool classification = true;
    bool regression = true;
};
std::string comparison_table(const std::vector<ComparisonRow>& rows);

}  // namespace mmvq::metrics
