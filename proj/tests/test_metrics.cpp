#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "mmvq/metrics.hpp"

using namespace mmvq;
using namespace mmvq::metrics;

namespace {

// Independent confusion-matrix oracle.
struct OracleScores {
    double weighted_f1 = 0, weighted_acc = 0, balanced_acc = 0;
};

OracleScores confusion_oracle(const std::vector<int>& pred, const std::vector<int>& truth) {
    OracleScores out;
    const double n = static_cast<double>(truth.size());
    double bal = 0;
    int present = 0;
    for (int k = 0; k < 3; ++k) {
        int tp = 0, fp = 0, fn = 0, support = 0;
        for (size_t i = 0; i < truth.size(); ++i) {
            if (truth[i] == k) {
                ++support;
                if (pred[i] == k) ++tp;
                else ++fn;
            } else if (pred[i] == k) {
                ++fp;
            }
        }
        const double p = tp + fp > 0 ? double(tp) / (tp + fp) : 0;
        const double r = tp + fn > 0 ? double(tp) / (tp + fn) : 0;
        const double f1 = p + r > 0 ? 2 * p * r / (p + r) : 0;
        out.weighted_f1 += f1 * support / n;
        out.weighted_acc += (support > 0 ? r : 0) * support / n;
        if (support > 0) {
            bal += r;
            ++present;
        }
    }
    out.balanced_acc = bal / present;
    return out;
}

// All-pairs AUC oracle with half credit for ties.
double auc_pairs_oracle(const std::vector<double>& scores, const std::vector<bool>& pos) {
    double credit = 0;
    int64_t pairs = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
        if (!pos[i]) continue;
        for (size_t j = 0; j < scores.size(); ++j) {
            if (pos[j]) continue;
            ++pairs;
            if (scores[i] > scores[j]) credit += 1.0;
            else if (scores[i] == scores[j]) credit += 0.5;
        }
    }
    return credit / static_cast<double>(pairs);
}

std::vector<io::PredictionRow> rows_from(const std::vector<std::pair<std::string, std::pair<double, double>>>& data) {
    // (subject, (true, pred))
    std::vector<io::PredictionRow> rows;
    int i = 0;
    for (const auto& [subject, tp] : data) {
        io::PredictionRow r;
        r.subject_id = subject;
        r.session_id = subject + "_s" + std::to_string(i++);
        r.true_class = "HC";
        r.pred_class = "HC";
        r.p_hc = 1.0;
        r.true_bprs = tp.first;
        r.pred_bprs = tp.second;
        rows.push_back(r);
    }
    return rows;
}

}  // namespace

TEST_CASE("weighted_f1 hand cases") {
    CHECK(weighted_f1({0, 1, 2, 0}, {0, 1, 2, 0}) == doctest::Approx(1.0));
    // true [0,0,1], pred [0,1,1]: both classes get F1 2/3
    CHECK(weighted_f1({0, 1, 1}, {0, 0, 1}) == doctest::Approx(2.0 / 3.0));
    // all-one-class predictor on balanced data
    std::vector<int> truth = {0, 0, 1, 1, 2, 2};
    std::vector<int> pred(6, 0);
    CHECK(weighted_f1(pred, truth) < 0.2);
    CHECK_THROWS_AS(weighted_f1({}, {}), ValidationError);
}

TEST_CASE("accuracy_scores hand cases and permutation invariance") {
    auto [w, b] = accuracy_scores({0, 1, 2}, {0, 1, 2});
    CHECK(w == doctest::Approx(1.0));
    CHECK(b == doctest::Approx(1.0));

    auto [w2, b2] = accuracy_scores({0, 0, 0, 0}, {0, 0, 0, 1});
    CHECK(w2 == doctest::Approx(0.75));
    CHECK(b2 == doctest::Approx(0.5));

    auto [w3, b3] = accuracy_scores({0, 0, 0, 0}, {1, 0, 0, 0});
    CHECK(w3 == doctest::Approx(w2));
    CHECK(b3 == doctest::Approx(b2));
}

TEST_CASE("auc_roc_ovr basics") {
    // perfectly separated
    std::vector<std::array<double, 3>> probs = {{0.8, 0.1, 0.1}, {0.7, 0.2, 0.1}, {0.1, 0.8, 0.1}, {0.2, 0.1, 0.7}};
    std::vector<int> truth = {0, 0, 1, 2};
    CHECK(auc_roc_ovr(probs, truth) == doctest::Approx(1.0));

    // identical rows: pure tie credit
    std::vector<std::array<double, 3>> same(4, {1.0 / 3, 1.0 / 3, 1.0 / 3});
    CHECK(auc_roc_ovr(same, truth) == doctest::Approx(0.5));

    CHECK_THROWS_AS(auc_roc_ovr(probs, {0, 0, 0, 0}), ValidationError);
    std::vector<std::array<double, 3>> bad = {{0.5, 0.1, 0.1}};
    CHECK_THROWS_AS(auc_roc_ovr(bad, {0}), ValidationError);
}

TEST_CASE("auc hand case equals the all-pairs oracle, and is rank invariant") {
    std::vector<double> scores = {0.9, 0.4, 0.4, 0.1};
    std::vector<bool> pos = {true, false, true, false};
    CHECK(auc_binary(scores, pos) == doctest::Approx(auc_pairs_oracle(scores, pos)));

    // strictly monotone transform leaves the rank statistic unchanged
    std::vector<double> transformed;
    for (double s : scores) transformed.push_back(std::exp(3.0 * s) + 1.0);
    CHECK(auc_binary(transformed, pos) == doctest::Approx(auc_binary(scores, pos)));
}

TEST_CASE("metrics match brute-force oracles on random instances") {
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 5 + static_cast<int>(rng() % 40);
        std::vector<int> truth(static_cast<size_t>(n)), pred(static_cast<size_t>(n));
        for (auto& v : truth) v = static_cast<int>(rng() % 3);
        for (auto& v : pred) v = static_cast<int>(rng() % 3);
        // ensure at least two distinct true classes for AUC
        truth[0] = 0;
        truth[1] = 1;
        const auto oracle = confusion_oracle(pred, truth);
        CHECK(std::abs(weighted_f1(pred, truth) - oracle.weighted_f1) < 1e-9);
        auto [w, b] = accuracy_scores(pred, truth);
        CHECK(std::abs(w - oracle.weighted_acc) < 1e-9);
        CHECK(std::abs(b - oracle.balanced_acc) < 1e-9);

        std::vector<std::array<double, 3>> probs(static_cast<size_t>(n));
        std::uniform_real_distribution<double> unif(0.01, 1.0);
        for (auto& row : probs) {
            double a = unif(rng), bb = unif(rng), c = unif(rng);
            if (rng() % 4 == 0) bb = a;  // force ties sometimes
            const double s = a + bb + c;
            row = {a / s, bb / s, c / s};
        }
        double expected = 0, weight = 0;
        for (int k = 0; k < 3; ++k) {
            std::vector<double> scores;
            std::vector<bool> pos;
            int n_pos = 0;
            for (int i = 0; i < n; ++i) {
                scores.push_back(probs[static_cast<size_t>(i)][static_cast<size_t>(k)]);
                pos.push_back(truth[static_cast<size_t>(i)] == k);
                n_pos += pos.back() ? 1 : 0;
            }
            if (n_pos == 0 || n_pos == n) continue;
            expected += auc_pairs_oracle(scores, pos) * n_pos;
            weight += n_pos;
        }
        CHECK(std::abs(auc_roc_ovr(probs, truth) - expected / weight) < 1e-9);
    }
}

TEST_CASE("mae basics") {
    CHECK(mae({1, 2}, {1, 2}) == doctest::Approx(0.0));
    CHECK(mae({30, 40}, {33, 36}) == doctest::Approx(3.5));
    CHECK_THROWS_AS(mae({}, {}), ValidationError);

    // constant mean predictor equals the mean absolute deviation
    std::vector<double> truth = {20, 30, 40, 55};
    const double mean = (20 + 30 + 40 + 55) / 4.0;
    std::vector<double> pred(truth.size(), mean);
    double mad = 0;
    for (double t : truth) mad += std::abs(t - mean);
    mad /= static_cast<double>(truth.size());
    CHECK(mae(pred, truth) == doctest::Approx(mad));
}

TEST_CASE("leave_subject_out_mae hand cases") {
    // subject A errors {10,10}, subject B errors {2,2}
    auto rows = rows_from({{"A", {50, 60}}, {"A", {50, 40}}, {"B", {30, 32}}, {"B", {30, 28}}});
    auto rep = leave_subject_out_mae(rows);
    CHECK(rep.baseline_mae == doctest::Approx(6.0));
    REQUIRE(rep.rows.size() == 2);
    CHECK(rep.rows[0].subject_id == "A");  // excluding A gives the biggest drop
    CHECK(rep.rows[0].mae_excluded == doctest::Approx(2.0));
    CHECK(rep.rows[0].percent_change == doctest::Approx(100.0 * (6.0 - 2.0) / 6.0));

    // excluding a zero-error subject cannot lower the MAE
    auto rows2 = rows_from({{"A", {50, 50}}, {"B", {30, 36}}});
    auto rep2 = leave_subject_out_mae(rows2);
    for (const auto& r : rep2.rows)
        if (r.subject_id == "A") CHECK(r.mae_excluded >= rep2.baseline_mae);

    CHECK_THROWS_AS(leave_subject_out_mae(rows_from({{"A", {50, 60}}})), ValidationError);
}

TEST_CASE("percent change formula and the replacement variant") {
    // (old - new) / old
    CHECK(100.0 * (7.19 - 5.13) / 7.19 == doctest::Approx(28.65).epsilon(0.01));
    // the published pairing uses a replacement subject: 7.19 -> 5.59
    CHECK(100.0 * (7.19 - 5.59) / 7.19 == doctest::Approx(22.25).epsilon(0.01));

    // two subjects with errors {10,10} and {2,2}; replace A by C with errors {4,4}
    auto rows = rows_from({{"A", {50, 60}}, {"A", {50, 40}}, {"B", {30, 32}}, {"B", {30, 28}}});
    auto replacement = rows_from({{"C", {40, 44}}, {"C", {40, 36}}});
    CHECK(replacement_mae(rows, "A", replacement) == doctest::Approx(3.0));
    CHECK_THROWS_AS(replacement_mae(rows_from({{"A", {1, 2}}}), "A", {}), ValidationError);
}

TEST_CASE("evaluate_predictions assembles a full report") {
    std::vector<io::PredictionRow> rows;
    const char* classes[3] = {"HC", "P-SZ", "M-SZ"};
    std::mt19937_64 rng(5);
    for (int i = 0; i < 12; ++i) {
        io::PredictionRow r;
        r.subject_id = "S" + std::to_string(i / 3);
        r.session_id = "sess" + std::to_string(i);
        const int truth = i % 3;
        r.true_class = classes[truth];
        r.pred_class = classes[truth];
        r.p_hc = truth == 0 ? 0.8 : 0.1;
        r.p_psz = truth == 1 ? 0.8 : 0.1;
        r.p_msz = truth == 2 ? 0.8 : 0.1;
        const double s = r.p_hc + r.p_psz + r.p_msz;
        r.p_hc /= s;
        r.p_psz /= s;
        r.p_msz /= s;
        r.true_bprs = 20 + truth * 10;
        r.pred_bprs = r.true_bprs;
        rows.push_back(r);
    }
    auto rep = evaluate_predictions(rows);
    CHECK(rep.weighted_f1 == doctest::Approx(1.0));
    CHECK(rep.weighted_accuracy == doctest::Approx(1.0));
    CHECK(rep.balanced_accuracy == doctest::Approx(1.0));
    CHECK(rep.auc_roc == doctest::Approx(1.0));
    CHECK(rep.mae == doctest::Approx(0.0));
    CHECK(rep.n_sessions == 12);
    int support = 0;
    for (const auto& pc : rep.per_class) support += pc.support;
    CHECK(support == 12);
    CHECK(rep.pretty("test").find("100.00") != std::string::npos);
    CHECK(!rep.to_json().empty());
}
