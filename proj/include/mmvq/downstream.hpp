#pragma once

// Session-level multi-task model: stacked per-segment embeddings, a temporal
// conv over the segment axis, masked mean pooling, a shared trunk, and
// classification + severity heads under homoscedastic uncertainty weighting.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "mmvq/autodiff.hpp"
#include "mmvq/checkpoint.hpp"
#include "mmvq/errors.hpp"
#include "mmvq/hash.hpp"
#include "mmvq/optim.hpp"

namespace mmvq::downstream {

struct SessionMatrix {
    std::string session_id;
    std::string subject_id;
    int t_max = 0;
    int dim = 0;
    int count = 0;               // rows holding real segments
    std::vector<float> values;   // [t_max x dim], zero-padded rows after count
    std::vector<float> mask;     // [t_max], 1 for real rows
};

// Stack per-segment embeddings in segment order and zero-pad to t_max.
template <typename T>
SessionMatrix stack_session(const std::vector<std::vector<T>>& embeddings, int t_max) {
    if (embeddings.empty()) throw ValidationError("stack_session: no embeddings");
    const int count = static_cast<int>(embeddings.size());
    if (count > t_max)
        throw ValidationError("stack_session: session has " + std::to_string(count) + " segments but t_max is " +
                              std::to_string(t_max) + "; re-derive t_max from the corpus");
    const int dim = static_cast<int>(embeddings[0].size());
    SessionMatrix m;
    m.t_max = t_max;
    m.dim = dim;
    m.count = count;
    m.values.assign(static_cast<size_t>(t_max) * dim, 0.0f);
    m.mask.assign(static_cast<size_t>(t_max), 0.0f);
    for (int t = 0; t < count; ++t) {
        if (static_cast<int>(embeddings[static_cast<size_t>(t)].size()) != dim)
            throw ValidationError("stack_session: embedding dim mismatch at segment " + std::to_string(t));
        for (int l = 0; l < dim; ++l)
            m.values[static_cast<size_t>(t) * dim + l] = static_cast<float>(embeddings[static_cast<size_t>(t)][static_cast<size_t>(l)]);
        m.mask[static_cast<size_t>(t)] = 1.0f;
    }
    return m;
}

struct PlateauConfig {
    double factor = 0.5;
    double threshold = 0.001;  // minimum absolute improvement
    int patience = 150;
};

// Reduce-on-plateau state machine over the validation loss.
struct PlateauScheduler {
    PlateauConfig cfg;
    double lr;
    double best = 0.0;
    int bad_epochs = 0;
    bool seen_any = false;
    int reductions = 0;

    PlateauScheduler(const PlateauConfig& c, double initial_lr) : cfg(c), lr(initial_lr) {}

    // Returns true when this update reduced the learning rate.
    bool update(double val_loss) {
        if (!seen_any) {
            best = val_loss;
            seen_any = true;
            return false;
        }
        if (val_loss < best - cfg.threshold) {
            best = val_loss;
            bad_epochs = 0;
            return false;
        }
        if (++bad_epochs >= cfg.patience) {
            lr *= cfg.factor;
            bad_epochs = 0;
            ++reductions;
            return true;
        }
        return false;
    }
};

enum class TaskMode { mtl, classification_only, regression_only };

inline const char* to_string(TaskMode m) {
    switch (m) {
        case TaskMode::mtl: return "mtl";
        case TaskMode::classification_only: return "cls";
        case TaskMode::regression_only: return "reg";
    }
    return "?";
}

inline TaskMode task_mode_from_string(const std::string& s) {
    if (s == "mtl") return TaskMode::mtl;
    if (s == "cls" || s == "classification_only") return TaskMode::classification_only;
    if (s == "reg" || s == "regression_only") return TaskMode::regression_only;
    throw ValidationError("unknown task mode '" + s + "'");
}

struct DownstreamConfig {
    int input_dim = 1024;
    int t_max = 113;
    int temporal_channels = 128;
    int temporal_kernel = 5;
    int trunk_dim = 128;
    int epochs = 1000;
    double learning_rate = 1e-5;
    int batch_size = 32;
    PlateauConfig plateau;
    TaskMode mode = TaskMode::mtl;
};

template <typename T>
class MtlModel {
public:
    DownstreamConfig cfg;
    std::vector<ad::Parameter<T>> params;

    static MtlModel init(const DownstreamConfig& cfg, uint64_t seed) {
        MtlModel m;
        m.cfg = cfg;
        std::mt19937_64 rng(seed);
        const int tc = cfg.temporal_channels, k = cfg.temporal_kernel, L = cfg.input_dim, tr = cfg.trunk_dim;
        m.add("tconv_k", {tc, L, 1, k}, ad::uniform_fan_in<T>(rng, static_cast<int64_t>(tc) * L * k,
                                                              static_cast<int64_t>(L) * k));
        m.add("tconv_b", {tc}, std::vector<T>(static_cast<size_t>(tc), T(0)));
        m.add("trunk_w", {tc, tr}, ad::uniform_fan_in<T>(rng, static_cast<int64_t>(tc) * tr, tc));
        m.add("trunk_b", {tr}, std::vector<T>(static_cast<size_t>(tr), T(0)));
        m.add("cls_w", {tr, 3}, ad::uniform_fan_in<T>(rng, static_cast<int64_t>(tr) * 3, tr));
        m.add("cls_b", {3}, std::vector<T>(3, T(0)));
        m.add("reg_w", {tr, 1}, ad::uniform_fan_in<T>(rng, tr, tr));
        m.add("reg_b", {1}, std::vector<T>(1, T(0)));
        m.add("log_sigma1", {1}, std::vector<T>(1, T(0)));  // sigma = 1 at init
        m.add("log_sigma2", {1}, std::vector<T>(1, T(0)));
        return m;
    }

    ad::Parameter<T>& param(const std::string& name) { return params[index_.at(name)]; }
    const ad::Parameter<T>& param(const std::string& name) const { return params[index_.at(name)]; }
    std::vector<ad::Parameter<T>*> param_ptrs() {
        std::vector<ad::Parameter<T>*> out;
        for (auto& p : params) out.push_back(&p);
        return out;
    }

    struct Graph {
        std::vector<ad::BoundParam<T>> bound;
        const std::map<std::string, size_t>* index;
        ad::Var<T> operator[](const std::string& name) const { return bound[index->at(name)].var; }
        void collect_grads() {
            for (auto& b : bound) b.collect_grad();
        }
    };

    Graph bind(ad::Tape<T>& tape, bool trainable) {
        Graph g;
        g.index = &index_;
        for (auto& p : params) g.bound.push_back(ad::BoundParam<T>{tape.leaf(p.shape, p.value, trainable), &p});
        return g;
    }

    // Batch input: x[N, L, 1, T] with padding rows already zeroed, and the
    // per-session masks. Pooling divides by the mask sum, never by t_max.
    struct Heads {
        ad::Var<T> logits;   // [N,3]
        ad::Var<T> score_z;  // [N,1]
    };

    Heads forward(ad::Tape<T>& tape, const Graph& g, ad::Var<T> x, const std::vector<T>& masks) const {
        const auto& xs = x.shape();
        const int N = xs[0], Tlen = xs[3];
        if (xs[1] != cfg.input_dim || xs[2] != 1)
            throw ValidationError("mtl_forward: input must be [N," + std::to_string(cfg.input_dim) + ",1,T]");
        if (static_cast<int>(masks.size()) != N * Tlen) throw ValidationError("mtl_forward: mask size mismatch");
        std::vector<T> weights(masks.size());
        for (int n = 0; n < N; ++n) {
            T msum = T(0);
            for (int t = 0; t < Tlen; ++t) msum += masks[static_cast<size_t>(n) * Tlen + t];
            if (msum <= T(0)) throw ValidationError("mtl_forward: all-zero mask for batch row " + std::to_string(n));
            for (int t = 0; t < Tlen; ++t)
                weights[static_cast<size_t>(n) * Tlen + t] = masks[static_cast<size_t>(n) * Tlen + t] / msum;
        }
        const int pad_w = (cfg.temporal_kernel - 1) / 2;
        auto h = ad::relu(ad::add_channel_bias(ad::conv2d_hw(x, g["tconv_k"], 1, 0, pad_w), g["tconv_b"]));
        auto pooled = ad::weighted_time_pool(h, weights);  // [N, tc]
        auto trunk = ad::relu(ad::linear(pooled, g["trunk_w"], g["trunk_b"]));
        Heads out;
        out.logits = ad::linear(trunk, g["cls_w"], g["cls_b"]);
        out.score_z = ad::linear(trunk, g["reg_w"], g["reg_b"]);
        return out;
    }

    // Uncertainty-weighted total:
    //   L = L_cls/(2 sigma1^2) + log sigma1 + L_reg/(2 sigma2^2) + log sigma2
    // with sigma_i = exp(log_sigma_i), so log sigma_i is the raw parameter.
    ad::Var<T> mtl_loss(ad::Tape<T>& tape, const Graph& g, ad::Var<T> l_cls, ad::Var<T> l_reg) const {
        auto s1 = g["log_sigma1"];
        auto s2 = g["log_sigma2"];
        auto w1 = ad::scale(ad::vexp(ad::scale(s1, T(-2))), T(0.5));  // 1/(2 sigma1^2)
        auto w2 = ad::scale(ad::vexp(ad::scale(s2, T(-2))), T(0.5));
        auto cls_term = ad::add(ad::mul(l_cls, w1), s1);
        auto reg_term = ad::add(ad::mul(l_reg, w2), s2);
        return ad::add(cls_term, reg_term);
    }

private:
    std::map<std::string, size_t> index_;
    void add(const std::string& name, ad::Shape shape, std::vector<T> value) {
        index_[name] = params.size();
        params.emplace_back(name, std::move(shape), std::move(value));
    }
};

// Direct evaluation of the uncertainty-weighted total, used as the oracle in
// tests and reports.
inline double mtl_loss_formula(double l_cls, double l_reg, double sigma1, double sigma2) {
    return l_cls / (2.0 * sigma1 * sigma1) + std::log(sigma1) + l_reg / (2.0 * sigma2 * sigma2) + std::log(sigma2);
}

struct SessionTarget {
    int class_index = 0;   // 0=HC, 1=P-SZ, 2=M-SZ
    double bprs_total = 0;
};

struct DownstreamHistory {
    std::vector<double> train, val;
    std::vector<double> lr;
    std::vector<int> lr_reduction_epochs;
};

template <typename T>
struct DownstreamCheckpoint {
    MtlModel<T> model;
    TaskMode mode = TaskMode::mtl;
    double train_mean = 0.0;  // standardization of the severity target
    double train_std = 1.0;
    DownstreamHistory history;
    int best_epoch = 0;
    std::string config_json;
};

struct Prediction {
    std::array<double, 3> probs{};
    double bprs_pred = 0.0;
    int pred_class = 0;
};

namespace detail {

template <typename T>
void fill_batch(const std::vector<SessionMatrix>& sessions, const std::vector<size_t>& order, size_t begin,
                size_t count, int L, int Tlen, std::vector<T>& x, std::vector<T>& masks) {
    x.assign(count * static_cast<size_t>(L) * Tlen, T(0));
    masks.assign(count * static_cast<size_t>(Tlen), T(0));
    for (size_t i = 0; i < count; ++i) {
        const auto& s = sessions[order[begin + i]];
        if (s.dim != L || s.t_max != Tlen)
            throw ValidationError("downstream: session matrix " + s.session_id + " has shape " +
                                  std::to_string(s.t_max) + "x" + std::to_string(s.dim) + ", expected " +
                                  std::to_string(Tlen) + "x" + std::to_string(L));
        for (int t = 0; t < Tlen; ++t) {
            const T mv = static_cast<T>(s.mask[static_cast<size_t>(t)]);
            masks[i * static_cast<size_t>(Tlen) + t] = mv;
            if (mv == T(0)) continue;  // padding rows stay zero regardless of stored values
            for (int l = 0; l < L; ++l)
                x[(i * static_cast<size_t>(L) + l) * Tlen + t] =
                    static_cast<T>(s.values[static_cast<size_t>(t) * L + l]) * mv;
        }
    }
}

}  // namespace detail

template <typename T>
Prediction predict_session(DownstreamCheckpoint<T>& ck, const SessionMatrix& m) {
    std::vector<size_t> order = {0};
    std::vector<SessionMatrix> one = {m};
    std::vector<T> x, masks;
    detail::fill_batch(one, order, 0, 1, ck.model.cfg.input_dim, ck.model.cfg.t_max, x, masks);
    ad::Tape<T> tape;
    auto g = ck.model.bind(tape, false);
    auto xin = tape.constant({1, ck.model.cfg.input_dim, 1, ck.model.cfg.t_max}, x);
    auto heads = ck.model.forward(tape, g, xin, masks);
    const auto& lv = heads.logits.value();
    double mx = std::max({lv[0], lv[1], lv[2]});
    double z = 0.0;
    Prediction p;
    for (int c = 0; c < 3; ++c) z += std::exp(static_cast<double>(lv[static_cast<size_t>(c)]) - mx);
    for (int c = 0; c < 3; ++c)
        p.probs[static_cast<size_t>(c)] = std::exp(static_cast<double>(lv[static_cast<size_t>(c)]) - mx) / z;
    p.pred_class = 0;
    for (int c = 1; c < 3; ++c)
        if (p.probs[static_cast<size_t>(c)] > p.probs[static_cast<size_t>(p.pred_class)]) p.pred_class = c;
    const double raw = static_cast<double>(heads.score_z.value()[0]) * ck.train_std + ck.train_mean;
    p.bprs_pred = std::min(126.0, std::max(18.0, raw));
    return p;
}

// Mean loss over a split under the configured mode, forward only.
template <typename T>
double downstream_eval_loss(MtlModel<T>& model, const std::vector<SessionMatrix>& sessions,
                            const std::vector<SessionTarget>& targets, const std::vector<size_t>& indices,
                            double train_mean, double train_std) {
    if (indices.empty()) return 0.0;
    const auto& cfg = model.cfg;
    double acc = 0.0;
    std::vector<T> x, masks;
    for (size_t begin = 0; begin < indices.size(); begin += static_cast<size_t>(cfg.batch_size)) {
        const size_t count = std::min(static_cast<size_t>(cfg.batch_size), indices.size() - begin);
        detail::fill_batch(sessions, indices, begin, count, cfg.input_dim, cfg.t_max, x, masks);
        std::vector<int> labels;
        std::vector<T> ztargets;
        for (size_t i = 0; i < count; ++i) {
            const auto& tg = targets[indices[begin + i]];
            labels.push_back(tg.class_index);
            ztargets.push_back(static_cast<T>((tg.bprs_total - train_mean) / train_std));
        }
        ad::Tape<T> tape;
        auto g = model.bind(tape, false);
        auto xin = tape.constant({static_cast<int>(count), cfg.input_dim, 1, cfg.t_max}, x);
        auto heads = model.forward(tape, g, xin, masks);
        auto l_cls = ad::softmax_cross_entropy(heads.logits, labels);
        auto l_reg = ad::mse(heads.score_z, tape.constant({static_cast<int>(count), 1}, ztargets));
        double loss;
        switch (cfg.mode) {
            case TaskMode::classification_only: loss = l_cls.value()[0]; break;
            case TaskMode::regression_only: loss = l_reg.value()[0]; break;
            default: loss = model.mtl_loss(tape, g, l_cls, l_reg).value()[0]; break;
        }
        acc += loss * static_cast<double>(count);
    }
    return acc / static_cast<double>(indices.size());
}

// Adam + reduce-on-plateau over the chosen objective; keeps the epoch with the
// lowest validation loss.
template <typename T>
DownstreamCheckpoint<T> train_downstream(const std::vector<SessionMatrix>& sessions,
                                         const std::vector<SessionTarget>& targets,
                                         const std::vector<size_t>& train_idx, const std::vector<size_t>& val_idx,
                                         const DownstreamConfig& cfg, uint64_t seed,
                                         const std::function<void(int, double, double)>& on_epoch = nullptr) {
    if (train_idx.empty()) throw ValidationError("train_downstream: empty train split");
    if (sessions.size() != targets.size()) throw ValidationError("train_downstream: sessions/targets size mismatch");

    DownstreamCheckpoint<T> ck;
    ck.mode = cfg.mode;
    ck.model = MtlModel<T>::init(cfg, derive_seed(seed, "downstream/init"));
    auto& model = ck.model;

    double mean = 0.0;
    for (size_t i : train_idx) mean += targets[i].bprs_total;
    mean /= static_cast<double>(train_idx.size());
    double var = 0.0;
    for (size_t i : train_idx) var += (targets[i].bprs_total - mean) * (targets[i].bprs_total - mean);
    ck.train_mean = mean;
    ck.train_std = std::max(std::sqrt(var / static_cast<double>(train_idx.size())), 1e-9);

    ad::Adam<T> opt(static_cast<T>(cfg.learning_rate));
    auto param_ptrs = model.param_ptrs();
    PlateauScheduler sched(cfg.plateau, cfg.learning_rate);

    std::mt19937_64 shuffle_rng(derive_seed(seed, "downstream/shuffle"));
    std::vector<size_t> order = train_idx;
    double best_val = 0.0;
    std::vector<std::vector<T>> best_values;
    std::vector<T> x, masks;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng() % i]);
        double epoch_loss = 0.0;
        for (size_t begin = 0; begin < order.size(); begin += static_cast<size_t>(cfg.batch_size)) {
            const size_t count = std::min(static_cast<size_t>(cfg.batch_size), order.size() - begin);
            detail::fill_batch(sessions, order, begin, count, cfg.input_dim, cfg.t_max, x, masks);
            std::vector<int> labels;
            std::vector<T> ztargets;
            for (size_t i = 0; i < count; ++i) {
                const auto& tg = targets[order[begin + i]];
                labels.push_back(tg.class_index);
                ztargets.push_back(static_cast<T>((tg.bprs_total - ck.train_mean) / ck.train_std));
            }
            ad::Tape<T> tape;
            auto g = model.bind(tape, true);
            auto xin = tape.constant({static_cast<int>(count), cfg.input_dim, 1, cfg.t_max}, x);
            auto heads = model.forward(tape, g, xin, masks);
            auto l_cls = ad::softmax_cross_entropy(heads.logits, labels);
            auto l_reg = ad::mse(heads.score_z, tape.constant({static_cast<int>(count), 1}, ztargets));
            ad::Var<T> loss;
            switch (cfg.mode) {
                case TaskMode::classification_only: loss = l_cls; break;
                case TaskMode::regression_only: loss = l_reg; break;
                default: loss = model.mtl_loss(tape, g, l_cls, l_reg); break;
            }
            const double lv = loss.value()[0];
            if (!std::isfinite(lv))
                throw NumericError("train_downstream: non-finite loss at epoch " + std::to_string(epoch));
            epoch_loss += lv * static_cast<double>(count);
            tape.backward(loss);
            for (auto& p : model.params) p.zero_grad();
            g.collect_grads();
            opt.lr = static_cast<T>(sched.lr);
            opt.step(param_ptrs);
        }
        epoch_loss /= static_cast<double>(order.size());
        const double val_loss = val_idx.empty()
                                    ? epoch_loss
                                    : downstream_eval_loss(model, sessions, targets, val_idx, ck.train_mean,
                                                           ck.train_std);
        if (sched.update(val_loss)) ck.history.lr_reduction_epochs.push_back(epoch);
        ck.history.train.push_back(epoch_loss);
        ck.history.val.push_back(val_loss);
        ck.history.lr.push_back(sched.lr);
        if (on_epoch) on_epoch(epoch, epoch_loss, val_loss);
        if (epoch == 1 || val_loss < best_val) {
            best_val = val_loss;
            ck.best_epoch = epoch;
            best_values.clear();
            for (const auto& p : model.params) best_values.push_back(p.value);
        }
    }
    if (!best_values.empty())
        for (size_t i = 0; i < model.params.size(); ++i) model.params[i].value = best_values[i];
    return ck;
}

// ---- checkpoint io ----

std::string downstream_config_to_json(const DownstreamConfig& cfg);
DownstreamConfig downstream_config_from_json(const std::string& text);

template <typename T>
void save_downstream_checkpoint(const DownstreamCheckpoint<T>& ck, const std::filesystem::path& path) {
    io::Container c;
    c.put_string("__config__", downstream_config_to_json(ck.model.cfg));
    if (!ck.config_json.empty()) c.put_string("__run_config__", ck.config_json);
    c.put_string("__mode__", to_string(ck.mode));
    c.put_f32("__meta__/standardize", {2}, {static_cast<float>(ck.train_mean), static_cast<float>(ck.train_std)});
    c.put_f32("__meta__/best_epoch", {1}, {static_cast<float>(ck.best_epoch)});
    for (const auto& p : ck.model.params) {
        std::vector<uint32_t> dims;
        for (int d : p.shape) dims.push_back(static_cast<uint32_t>(d));
        c.put_f32("param/" + p.name, std::move(dims), std::vector<float>(p.value.begin(), p.value.end()));
    }
    c.save(path);
}

template <typename T>
DownstreamCheckpoint<T> load_downstream_checkpoint(const std::filesystem::path& path) {
    io::Container c = io::Container::load(path);
    DownstreamCheckpoint<T> ck;
    if (c.has("__run_config__")) ck.config_json = c.get_string("__run_config__");
    ck.model = MtlModel<T>::init(downstream_config_from_json(c.get_string("__config__")), 0);
    ck.mode = task_mode_from_string(c.get_string("__mode__"));
    const auto& st = c.get("__meta__/standardize").f32;
    ck.train_mean = st.at(0);
    ck.train_std = st.at(1);
    ck.best_epoch = static_cast<int>(c.get("__meta__/best_epoch").f32.at(0));
    for (auto& p : ck.model.params) {
        const auto& e = c.get("param/" + p.name);
        if (e.f32.size() != p.value.size())
            throw ValidationError("checkpoint: parameter '" + p.name + "' has wrong size");
        std::copy(e.f32.begin(), e.f32.end(), p.value.begin());
    }
    return ck;
}

}  // namespace mmvq::downstream
