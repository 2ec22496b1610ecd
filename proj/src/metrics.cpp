#include "mmvq/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "mmvq/data.hpp"

namespace mmvq::metrics {

namespace {

constexpr int kClasses = 3;

void check_labels(const std::vector<int>& pred, const std::vector<int>& truth, const char* op) {
    if (pred.empty() || truth.empty()) throw ValidationError(std::string(op) + ": empty input");
    if (pred.size() != truth.size()) throw ValidationError(std::string(op) + ": length mismatch");
    for (int v : pred)
        if (v < 0 || v >= kClasses) throw ValidationError(std::string(op) + ": label out of range");
    for (int v : truth)
        if (v < 0 || v >= kClasses) throw ValidationError(std::string(op) + ": label out of range");
}

struct Confusion {
    std::array<std::array<int, kClasses>, kClasses> m{};  // [truth][pred]
    std::array<int, kClasses> support{};

    static Confusion from(const std::vector<int>& pred, const std::vector<int>& truth) {
        Confusion c;
        for (size_t i = 0; i < truth.size(); ++i) {
            c.m[static_cast<size_t>(truth[i])][static_cast<size_t>(pred[i])]++;
            c.support[static_cast<size_t>(truth[i])]++;
        }
        return c;
    }
};

}  // namespace

double weighted_f1(const std::vector<int>& pred, const std::vector<int>& truth) {
    check_labels(pred, truth, "weighted_f1");
    const auto c = Confusion::from(pred, truth);
    const double total = static_cast<double>(truth.size());
    double out = 0.0;
    for (int k = 0; k < kClasses; ++k) {
        const int tp = c.m[static_cast<size_t>(k)][static_cast<size_t>(k)];
        int pred_k = 0, true_k = c.support[static_cast<size_t>(k)];
        for (int t = 0; t < kClasses; ++t) pred_k += c.m[static_cast<size_t>(t)][static_cast<size_t>(k)];
        const double precision = pred_k > 0 ? static_cast<double>(tp) / pred_k : 0.0;
        const double recall = true_k > 0 ? static_cast<double>(tp) / true_k : 0.0;
        const double f1 = (precision + recall) > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
        out += f1 * static_cast<double>(true_k) / total;
    }
    return out;
}

std::pair<double, double> accuracy_scores(const std::vector<int>& pred, const std::vector<int>& truth) {
    check_labels(pred, truth, "accuracy_scores");
    const auto c = Confusion::from(pred, truth);
    const double total = static_cast<double>(truth.size());
    double weighted = 0.0, balanced = 0.0;
    int present = 0;
    for (int k = 0; k < kClasses; ++k) {
        const int sup = c.support[static_cast<size_t>(k)];
        if (sup == 0) continue;
        const double recall = static_cast<double>(c.m[static_cast<size_t>(k)][static_cast<size_t>(k)]) / sup;
        weighted += recall * static_cast<double>(sup) / total;
        balanced += recall;
        ++present;
    }
    balanced /= static_cast<double>(present);
    return {weighted, balanced};
}

double auc_binary(const std::vector<double>& scores, const std::vector<bool>& positive) {
    if (scores.empty() || scores.size() != positive.size()) throw ValidationError("auc_binary: bad input sizes");
    const int n = static_cast<int>(scores.size());
    int n_pos = 0;
    for (bool p : positive) n_pos += p ? 1 : 0;
    const int n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) throw ValidationError("auc_binary: need both positives and negatives");
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return scores[static_cast<size_t>(a)] < scores[static_cast<size_t>(b)]; });
    std::vector<double> rank(static_cast<size_t>(n));
    int i = 0;
    while (i < n) {
        int j = i;
        while (j + 1 < n && scores[static_cast<size_t>(order[static_cast<size_t>(j + 1)])] ==
                                scores[static_cast<size_t>(order[static_cast<size_t>(i)])])
            ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (int t = i; t <= j; ++t) rank[static_cast<size_t>(order[static_cast<size_t>(t)])] = avg;
        i = j + 1;
    }
    double rank_sum = 0.0;
    for (int t = 0; t < n; ++t)
        if (positive[static_cast<size_t>(t)]) rank_sum += rank[static_cast<size_t>(t)];
    return (rank_sum - static_cast<double>(n_pos) * (n_pos + 1) / 2.0) /
           (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double auc_roc_ovr(const std::vector<std::array<double, 3>>& probs, const std::vector<int>& truth) {
    if (probs.empty() || probs.size() != truth.size()) throw ValidationError("auc_roc_ovr: bad input sizes");
    for (const auto& row : probs) {
        const double s = row[0] + row[1] + row[2];
        if (std::abs(s - 1.0) > 1e-6)
            throw ValidationError("auc_roc_ovr: probability row does not sum to 1");
    }
    int distinct = 0;
    std::array<int, kClasses> support{};
    for (int v : truth) support[static_cast<size_t>(v)]++;
    for (int k = 0; k < kClasses; ++k)
        if (support[static_cast<size_t>(k)] > 0) ++distinct;
    if (distinct < 2) throw ValidationError("auc_roc_ovr: undefined with a single distinct true class");

    const int n = static_cast<int>(truth.size());
    double weighted = 0.0, weight_sum = 0.0;
    for (int k = 0; k < kClasses; ++k) {
        const int n_pos = support[static_cast<size_t>(k)];
        const int n_neg = n - n_pos;
        if (n_pos == 0 || n_neg == 0) continue;  // class absent (or universal): skip with renormalized weights
        std::vector<double> scores(static_cast<size_t>(n));
        std::vector<bool> positive(static_cast<size_t>(n));
        for (int t = 0; t < n; ++t) {
            scores[static_cast<size_t>(t)] = probs[static_cast<size_t>(t)][static_cast<size_t>(k)];
            positive[static_cast<size_t>(t)] = truth[static_cast<size_t>(t)] == k;
        }
        weighted += auc_binary(scores, positive) * n_pos;
        weight_sum += n_pos;
    }
    return weighted / weight_sum;
}

double mae(const std::vector<double>& pred, const std::vector<double>& truth) {
    if (pred.empty() || pred.size() != truth.size()) throw ValidationError("mae: bad input sizes");
    double acc = 0.0;
    for (size_t i = 0; i < pred.size(); ++i) acc += std::abs(pred[i] - truth[i]);
    return acc / static_cast<double>(pred.size());
}

namespace {

int class_index(const std::string& s) {
    return static_cast<int>(data::symptom_class_from_string(s));
}

}  // namespace

EvalReport evaluate_predictions(const std::vector<io::PredictionRow>& rows) {
    if (rows.empty()) throw ValidationError("evaluate_predictions: no rows");
    std::vector<int> pred, truth;
    std::vector<std::array<double, 3>> probs;
    std::vector<double> pred_bprs, true_bprs;
    for (const auto& r : rows) {
        pred.push_back(class_index(r.pred_class));
        truth.push_back(class_index(r.true_class));
        probs.push_back({r.p_hc, r.p_psz, r.p_msz});
        pred_bprs.push_back(r.pred_bprs);
        true_bprs.push_back(r.true_bprs);
    }
    EvalReport rep;
    rep.n_sessions = static_cast<int>(rows.size());
    rep.weighted_f1 = weighted_f1(pred, truth);
    std::tie(rep.weighted_accuracy, rep.balanced_accuracy) = accuracy_scores(pred, truth);
    int distinct = 0;
    {
        std::array<int, 3> sup{};
        for (int v : truth) sup[static_cast<size_t>(v)]++;
        for (int k = 0; k < 3; ++k)
            if (sup[static_cast<size_t>(k)]) ++distinct;
    }
    rep.auc_roc = distinct >= 2 ? auc_roc_ovr(probs, truth) : 0.0;
    rep.mae = mae(pred_bprs, true_bprs);
    const double mean_true = std::accumulate(true_bprs.begin(), true_bprs.end(), 0.0) / true_bprs.size();
    double cm = 0.0;
    for (double v : true_bprs) cm += std::abs(v - mean_true);
    rep.constant_mean_mae = cm / static_cast<double>(true_bprs.size());

    const auto c = Confusion::from(pred, truth);
    static const char* names[3] = {"HC", "P-SZ", "M-SZ"};
    for (int k = 0; k < 3; ++k) {
        PerClass pc;
        pc.label = names[k];
        pc.support = c.support[static_cast<size_t>(k)];
        const int tp = c.m[static_cast<size_t>(k)][static_cast<size_t>(k)];
        int pred_k = 0;
        for (int t = 0; t < 3; ++t) pred_k += c.m[static_cast<size_t>(t)][static_cast<size_t>(k)];
        pc.precision = pred_k > 0 ? static_cast<double>(tp) / pred_k : 0.0;
        pc.recall = pc.support > 0 ? static_cast<double>(tp) / pc.support : 0.0;
        pc.f1 = (pc.precision + pc.recall) > 0 ? 2 * pc.precision * pc.recall / (pc.precision + pc.recall) : 0.0;
        rep.per_class.push_back(pc);
    }

    std::map<std::string, std::pair<double, int>> by_subject;  // sum abs err, count
    for (const auto& r : rows) {
        auto& e = by_subject[r.subject_id];
        e.first += std::abs(r.pred_bprs - r.true_bprs);
        e.second += 1;
    }
    for (const auto& [sid, e] : by_subject)
        rep.per_subject_mae.push_back({sid, e.second, e.first / e.second});
    return rep;
}

std::string EvalReport::to_json() const {
    nlohmann::json j;
    j["weighted_f1"] = weighted_f1;
    j["weighted_accuracy"] = weighted_accuracy;
    j["balanced_accuracy"] = balanced_accuracy;
    j["auc_roc"] = auc_roc;
    j["mae"] = mae;
    j["constant_mean_mae"] = constant_mean_mae;
    j["n_sessions"] = n_sessions;
    for (const auto& pc : per_class)
        j["per_class"].push_back({{"class", pc.label},
                                  {"precision", pc.precision},
                                  {"recall", pc.recall},
                                  {"f1", pc.f1},
                                  {"support", pc.support}});
    for (const auto& sm : per_subject_mae)
        j["per_subject_mae"].push_back({{"subject_id", sm.subject_id}, {"sessions", sm.sessions}, {"mae", sm.mae}});
    return j.dump(2);
}

std::string EvalReport::pretty(const std::string& title) const {
    std::ostringstream os;
    char buf[256];
    if (!title.empty()) os << title << "\n";
    std::snprintf(buf, sizeof(buf),
                  "  W.Acc (balanced) %6.2f | W.Acc (support)  %6.2f | W.F1 %6.2f | AUC-ROC %6.2f\n",
                  balanced_accuracy * 100.0, weighted_accuracy * 100.0, weighted_f1 * 100.0, auc_roc * 100.0);
    os << buf;
    std::snprintf(buf, sizeof(buf), "  MAE %.2f (constant-mean baseline %.2f) over %d sessions\n", mae,
                  constant_mean_mae, n_sessions);
    os << buf;
    for (const auto& pc : per_class) {
        std::snprintf(buf, sizeof(buf), "    %-5s precision %6.2f recall %6.2f f1 %6.2f support %d\n",
                      pc.label.c_str(), pc.precision * 100.0, pc.recall * 100.0, pc.f1 * 100.0, pc.support);
        os << buf;
    }
    return os.str();
}

LeaveOutReport leave_subject_out_mae(const std::vector<io::PredictionRow>& rows) {
    if (rows.empty()) throw ValidationError("leave_subject_out_mae: no rows");
    std::map<std::string, std::vector<const io::PredictionRow*>> by_subject;
    for (const auto& r : rows) by_subject[r.subject_id].push_back(&r);
    if (by_subject.size() < 2)
        throw ValidationError("leave_subject_out_mae: need at least 2 subjects, got " +
                              std::to_string(by_subject.size()));

    LeaveOutReport rep;
    double abs_sum = 0.0, true_sum = 0.0;
    for (const auto& r : rows) {
        abs_sum += std::abs(r.pred_bprs - r.true_bprs);
        true_sum += r.true_bprs;
    }
    const double n = static_cast<double>(rows.size());
    rep.baseline_mae = abs_sum / n;
    rep.cohort_mean_true = true_sum / n;
    double var = 0.0;
    for (const auto& r : rows) var += (r.true_bprs - rep.cohort_mean_true) * (r.true_bprs - rep.cohort_mean_true);
    rep.cohort_sd_true = std::sqrt(var / n);

    for (const auto& [sid, subject_rows] : by_subject) {
        LeaveOutRow row;
        row.subject_id = sid;
        row.sessions = static_cast<int>(subject_rows.size());
        double subj_abs = 0.0, subj_true = 0.0;
        for (const auto* r : subject_rows) {
            subj_abs += std::abs(r->pred_bprs - r->true_bprs);
            subj_true += r->true_bprs;
        }
        row.subject_mae = subj_abs / row.sessions;
        const double rest = n - row.sessions;
        row.mae_excluded = rest > 0 ? (abs_sum - subj_abs) / rest : 0.0;
        row.percent_change = rep.baseline_mae > 0 ? (rep.baseline_mae - row.mae_excluded) / rep.baseline_mae * 100.0
                                                  : 0.0;
        row.z_distance = rep.cohort_sd_true > 0
                             ? std::abs(subj_true / row.sessions - rep.cohort_mean_true) / rep.cohort_sd_true
                             : 0.0;
        rep.rows.push_back(row);
    }
    std::sort(rep.rows.begin(), rep.rows.end(), [](const LeaveOutRow& a, const LeaveOutRow& b) {
        if (a.mae_excluded != b.mae_excluded) return a.mae_excluded < b.mae_excluded;
        return a.subject_id < b.subject_id;
    });
    return rep;
}

double replacement_mae(const std::vector<io::PredictionRow>& rows, const std::string& excluded,
                       const std::vector<io::PredictionRow>& replacement) {
    std::vector<double> pred, truth;
    for (const auto& r : rows) {
        if (r.subject_id == excluded) continue;
        pred.push_back(r.pred_bprs);
        truth.push_back(r.true_bprs);
    }
    for (const auto& r : replacement) {
        pred.push_back(r.pred_bprs);
        truth.push_back(r.true_bprs);
    }
    if (pred.empty()) throw ValidationError("replacement_mae: nothing left to evaluate");
    return mae(pred, truth);
}

std::string LeaveOutReport::pretty() const {
    std::ostringstream os;
    char buf[256];
    std::snprintf(buf, sizeof(buf), "baseline MAE %.3f | cohort true mean %.2f sd %.2f\n", baseline_mae,
                  cohort_mean_true, cohort_sd_true);
    os << buf;
    os << "subject      sessions  subject-MAE  MAE-without  %change  z-dist\n";
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%-12s %8d %12.3f %12.3f %+8.2f %7.2f\n", r.subject_id.c_str(), r.sessions,
                      r.subject_mae, r.mae_excluded, r.percent_change, r.z_distance);
        os << buf;
    }
    return os.str();
}

std::string LeaveOutReport::to_json() const {
    nlohmann::json j;
    j["baseline_mae"] = baseline_mae;
    j["cohort_mean_true"] = cohort_mean_true;
    j["cohort_sd_true"] = cohort_sd_true;
    for (const auto& r : rows)
        j["rows"].push_back({{"subject_id", r.subject_id},
                             {"sessions", r.sessions},
                             {"subject_mae", r.subject_mae},
                             {"mae_excluded", r.mae_excluded},
                             {"percent_change", r.percent_change},
                             {"z_distance", r.z_distance}});
    return j.dump(2);
}

std::string comparison_table(const std::vector<ComparisonRow>& rows) {
    std::ostringstream os;
    os << "model                          W.Acc    W.F1  AUC-ROC     MAE\n";
    char buf[256];
    for (const auto& row : rows) {
        const auto& rep = row.report;
        std::string acc = "     -", f1 = "     -", auc = "      -", m = "      -";
        if (row.classification) {
            std::snprintf(buf, sizeof(buf), "%6.2f", rep.balanced_accuracy * 100); acc = buf;
            std::snprintf(buf, sizeof(buf), "%6.2f", rep.weighted_f1 * 100); f1 = buf;
            std::snprintf(buf, sizeof(buf), "%7.2f", rep.auc_roc * 100); auc = buf;
        }
        if (row.regression) {
            std::snprintf(buf, sizeof(buf), "%7.2f", rep.mae); m = buf;
        }
        std::snprintf(buf, sizeof(buf), "%-28s %s  %s  %s %s\n", row.name.c_str(), acc.c_str(), f1.c_str(),
                      auc.c_str(), m.c_str());
        os << buf;
    }
    return os.str();
}

}  // namespace mmvq::metrics
