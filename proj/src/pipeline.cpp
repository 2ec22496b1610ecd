#include "mmvq/pipeline.hpp"

#include <algorithm>
#include <random>
#include <sstream>

#include <json.hpp>

#include "mmvq/csv.hpp"
#include "mmvq/gradcheck.hpp"

namespace mmvq::pipeline {

using nlohmann::json;

Logger stream_logger(std::ostream& os) {
    return [&os](const std::string& line) { os << line << "\n"; };
}

namespace {

std::string fvtc_entry_name(const std::string& session, int segment, features::Modality m) {
    return session + "/" + std::to_string(segment) + "/" + features::to_string(m);
}

}  // namespace

ExtractResult extract_features(const data::Manifest& manifest, const std::filesystem::path& data_dir,
                               const config::RunConfig& cfg, const std::filesystem::path& out_cache,
                               const Logger& log) {
    const config::FeaturesConfig f = cfg.features();
    io::Container cache;
    ExtractResult res;
    json quality = json::array();
    for (const auto& rec : manifest.sessions) {
        auto audio = io::read_channel_csv(data_dir / rec.audio_csv, features::Modality::audio, f.audio_rate_hz,
                                          rec.session_id, rec.subject_id);
        auto video = io::read_channel_csv(data_dir / rec.video_csv, features::Modality::video, f.video_rate_hz,
                                          rec.session_id, rec.subject_id);
        if (audio.n_channels != f.audio_channels)
            throw ValidationError("extract: session '" + rec.session_id + "' has " +
                                  std::to_string(audio.n_channels) + " audio channels, config expects " +
                                  std::to_string(f.audio_channels));
        if (video.n_channels != f.video_channels)
            throw ValidationError("extract: session '" + rec.session_id + "' has " +
                                  std::to_string(video.n_channels) + " video channels, config expects " +
                                  std::to_string(f.video_channels));
        auto segments = features::segment_session(audio, video, f.window_s, f.overlap_s, &res.warnings);
        for (const auto& seg : segments) {
            for (auto modality : {features::Modality::audio, features::Modality::video}) {
                auto fvtc = features::build_fvtc(seg, modality, f.delays_frames);
                std::vector<float> values(fvtc.values.begin(), fvtc.values.end());
                cache.put_f32(fvtc_entry_name(rec.session_id, seg.segment_index, modality),
                              {static_cast<uint32_t>(fvtc.rows()), static_cast<uint32_t>(fvtc.cols())},
                              std::move(values));
                for (int ch : fvtc.constant_channels)
                    quality.push_back({{"session", rec.session_id},
                                       {"segment", seg.segment_index},
                                       {"modality", features::to_string(modality)},
                                       {"constant_channel", ch}});
            }
            ++res.segments;
        }
        ++res.sessions;
        log("extracted " + rec.session_id + ": " + std::to_string(segments.size()) + " segments");
    }
    json meta;
    meta["warnings"] = res.warnings;
    meta["quality"] = quality;
    cache.put_string("__meta__", meta.dump());
    cache.save(out_cache);
    return res;
}

std::vector<mrl::SegmentSample<float>> load_segment_samples(const std::filesystem::path& cache_path,
                                                            const data::Manifest& manifest) {
    io::Container cache = io::Container::load(cache_path);
    std::vector<mrl::SegmentSample<float>> out;
    for (const auto& rec : manifest.sessions) {
        for (int seg = 0;; ++seg) {
            const std::string a_name = fvtc_entry_name(rec.session_id, seg, features::Modality::audio);
            const std::string v_name = fvtc_entry_name(rec.session_id, seg, features::Modality::video);
            if (!cache.has(a_name)) break;
            if (!cache.has(v_name))
                throw ValidationError("cache: session '" + rec.session_id + "' segment " + std::to_string(seg) +
                                      " is missing its video matrix");
            mrl::SegmentSample<float> s;
            s.subject_id = rec.subject_id;
            s.session_id = rec.session_id;
            s.segment_index = seg;
            s.audio = cache.get(a_name).f32;
            s.video = cache.get(v_name).f32;
            out.push_back(std::move(s));
        }
    }
    return out;
}

mrl::MrlCheckpoint<float> run_train_mrl(const std::filesystem::path& cache_path, const data::Manifest& manifest,
                                        const config::RunConfig& cfg, const Logger& log) {
    auto samples = load_segment_samples(cache_path, manifest);
    if (samples.empty()) throw ValidationError("train-mrl: the FVTC cache holds no segments");
    const auto split = data::split_subjects(manifest, cfg.split_ratios(), derive_seed(cfg.seed(), "split"));
    const auto idx = split_indices(samples, split);
    log("mrl training on " + std::to_string(idx.train.size()) + " segments (val " + std::to_string(idx.val.size()) +
        ", test " + std::to_string(idx.test.size()) + ")");
    auto ck = mrl::train_mrl<float>(samples, idx.train, idx.val, idx.test, cfg.mrl(), cfg.seed(),
                                    [&](int epoch, double train, double val, double test) {
                                        std::ostringstream os;
                                        os << "epoch " << epoch << " train " << train << " val " << val << " test "
                                           << test;
                                        log(os.str());
                                    });
    ck.run_config_json = cfg.dump();
    ck.run_config_mrl_hash = cfg.mrl_hash();
    return ck;
}

EmbedResult embed_sessions(mrl::MrlCheckpoint<float>& ck, const std::filesystem::path& cache_path,
                           const data::Manifest& manifest, const config::RunConfig& cfg,
                           const std::filesystem::path& out_path, const Logger& log) {
    if (ck.run_config_mrl_hash != 0 && ck.run_config_mrl_hash != cfg.mrl_hash())
        throw ValidationError("embed: run config hash " + hash_hex(cfg.mrl_hash()) +
                              " does not match the checkpoint's " + hash_hex(ck.run_config_mrl_hash));
    auto samples = load_segment_samples(cache_path, manifest);
    std::map<std::string, std::vector<const mrl::SegmentSample<float>*>> by_session;
    for (const auto& s : samples) by_session[s.session_id].push_back(&s);

    int t_max = 0;
    for (const auto& [sid, v] : by_session) t_max = std::max(t_max, static_cast<int>(v.size()));
    const int dim = ck.model.cfg.fusion.fused_dim;

    io::Container out;
    EmbedResult res;
    res.t_max = t_max;
    res.dim = dim;
    json meta;
    meta["t_max"] = t_max;
    meta["dim"] = dim;
    meta["mrl_hash"] = hash_hex(ck.run_config_mrl_hash);
    out.put_string("__meta__", meta.dump());
    for (const auto& rec : manifest.sessions) {
        auto it = by_session.find(rec.session_id);
        if (it == by_session.end()) continue;  // too short for one window
        std::vector<std::vector<float>> embeddings;
        for (const auto* s : it->second) embeddings.push_back(ck.model.embed_segment(s->audio, s->video).first);
        auto m = downstream::stack_session(embeddings, t_max);
        out.put_f32(rec.session_id + "/values", {static_cast<uint32_t>(t_max), static_cast<uint32_t>(dim)},
                    std::vector<float>(m.values.begin(), m.values.end()));
        out.put_f32(rec.session_id + "/mask", {static_cast<uint32_t>(t_max)},
                    std::vector<float>(m.mask.begin(), m.mask.end()));
        ++res.sessions;
        log("embedded " + rec.session_id + ": " + std::to_string(it->second.size()) + " segments");
    }
    out.save(out_path);
    return res;
}

SessionDataset load_session_dataset(const std::filesystem::path& sessions_path, const data::Manifest& manifest) {
    io::Container c = io::Container::load(sessions_path);
    json meta = json::parse(c.get_string("__meta__"));
    SessionDataset d;
    d.t_max = meta.at("t_max").get<int>();
    d.dim = meta.at("dim").get<int>();
    for (const auto& rec : manifest.sessions) {
        if (!c.has(rec.session_id + "/values")) continue;
        downstream::SessionMatrix m;
        m.session_id = rec.session_id;
        m.subject_id = rec.subject_id;
        m.t_max = d.t_max;
        m.dim = d.dim;
        m.values = c.get(rec.session_id + "/values").f32;
        m.mask = c.get(rec.session_id + "/mask").f32;
        m.count = 0;
        for (float v : m.mask)
            if (v > 0.5f) ++m.count;
        downstream::SessionTarget t;
        const auto clazz = rec.clazz.empty() ? data::assign_subtype(rec.bprs_items)
                                             : data::symptom_class_from_string(rec.clazz);
        t.class_index = static_cast<int>(clazz);
        t.bprs_total = rec.bprs_total();
        d.sessions.push_back(std::move(m));
        d.targets.push_back(t);
    }
    return d;
}

DownstreamRun run_train_downstream(const SessionDataset& dataset, const data::SplitAssignment& split,
                                   const config::RunConfig& cfg, downstream::TaskMode mode, const Logger& log) {
    auto dcfg = cfg.downstream(dataset.dim, dataset.t_max);
    dcfg.mode = mode;
    const auto idx = split_indices(dataset.sessions, split);
    log("downstream (" + std::string(downstream::to_string(mode)) + ") on " + std::to_string(idx.train.size()) +
        " sessions (val " + std::to_string(idx.val.size()) + ", test " + std::to_string(idx.test.size()) + ")");
    DownstreamRun run;
    run.checkpoint = downstream::train_downstream<float>(
        dataset.sessions, dataset.targets, idx.train, idx.val, dcfg, cfg.seed(),
        [&](int epoch, double train, double val) {
            if (epoch % 50 == 0 || epoch == 1) {
                std::ostringstream os;
                os << "epoch " << epoch << " train " << train << " val " << val;
                log(os.str());
            }
        });
    run.checkpoint.config_json = cfg.dump();

    static const char* kClassNames[3] = {"HC", "P-SZ", "M-SZ"};
    auto predict_rows = [&](const std::vector<size_t>& indices) {
        std::vector<io::PredictionRow> rows;
        for (size_t i : indices) {
            const auto& m = dataset.sessions[i];
            const auto& t = dataset.targets[i];
            auto p = downstream::predict_session(run.checkpoint, m);
            io::PredictionRow r;
            r.subject_id = m.subject_id;
            r.session_id = m.session_id;
            r.true_class = kClassNames[t.class_index];
            r.pred_class = kClassNames[p.pred_class];
            r.p_hc = p.probs[0];
            r.p_psz = p.probs[1];
            r.p_msz = p.probs[2];
            r.true_bprs = t.bprs_total;
            r.pred_bprs = p.bprs_pred;
            rows.push_back(std::move(r));
        }
        return rows;
    };
    run.test_predictions = predict_rows(idx.test);
    std::vector<size_t> all(dataset.sessions.size());
    std::iota(all.begin(), all.end(), size_t{0});
    run.all_predictions = predict_rows(all);
    return run;
}

// ---- gradient verification suite ----

mrl::MrlConfig tiny_mrl_config() {
    mrl::MrlConfig cfg;
    for (auto* e : {&cfg.audio, &cfg.video}) {
        e->in_h = 3;
        e->in_w = 6;
        e->conv1_channels = 2;
        e->conv2_channels = 3;
        e->kernel = 2;
        e->stride = 1;
        e->padding = 0;
        e->residual_blocks = 2;
        e->projection_channels = 3;
        e->latent_dim = 4;
    }
    cfg.fusion.rank = 2;
    cfg.fusion.chunk_in = 2;
    cfg.fusion.chunk_out = 3;
    cfg.fusion.fused_dim = 6;
    cfg.codebook.entries = 5;
    cfg.codebook.beta = 0.25;
    return cfg;
}

namespace {

using ad::Shape;
using ad::Tape;
using ad::Var;

std::vector<double> gaussian(std::mt19937_64& rng, size_t n, double sd = 1.0) {
    std::normal_distribution<double> d(0.0, sd);
    std::vector<double> out(n);
    for (auto& x : out) x = d(rng);
    return out;
}

double composed_vqvae_check() {
    auto cfg = tiny_mrl_config();
    auto model = mrl::VqVaeModel<double>::init(cfg, 99);
    std::mt19937_64 rng(5);
    const int N = 2;
    auto xa = gaussian(rng, static_cast<size_t>(N) * cfg.audio.in_h * cfg.audio.in_w, 0.5);
    auto xv = gaussian(rng, static_cast<size_t>(N) * cfg.video.in_h * cfg.video.in_w, 0.5);
    const auto frozen = model.capture_quant(xa, xv, N);

    auto loss_value = [&]() {
        Tape<double> tape;
        auto g = model.bind(tape, false);
        auto a = tape.constant({N, 1, cfg.audio.in_h, cfg.audio.in_w}, xa);
        auto v = tape.constant({N, 1, cfg.video.in_h, cfg.video.in_w}, xv);
        return static_cast<double>(model.build_loss(tape, g, a, v, &frozen).total.value()[0]);
    };
    {
        Tape<double> tape;
        auto g = model.bind(tape, true);
        auto a = tape.constant({N, 1, cfg.audio.in_h, cfg.audio.in_w}, xa);
        auto v = tape.constant({N, 1, cfg.video.in_h, cfg.video.in_w}, xv);
        auto parts = model.build_loss(tape, g, a, v, &frozen);
        tape.backward(parts.total);
        for (auto& p : model.params) p.zero_grad();
        g.collect_grads();
    }
    return ad::grad_check_params<double>(loss_value, model.param_ptrs(), 1e-5);
}

double composed_mtl_check() {
    downstream::DownstreamConfig cfg;
    cfg.input_dim = 6;
    cfg.t_max = 4;
    cfg.temporal_channels = 5;
    cfg.temporal_kernel = 3;
    cfg.trunk_dim = 4;
    auto model = downstream::MtlModel<double>::init(cfg, 17);
    std::mt19937_64 rng(6);
    const int N = 3;
    auto x = gaussian(rng, static_cast<size_t>(N) * cfg.input_dim * cfg.t_max, 0.8);
    std::vector<double> masks = {1, 1, 0, 0, 1, 1, 1, 0, 1, 1, 1, 1};
    // zero the padding steps as the batch assembler would
    for (int n = 0; n < N; ++n)
        for (int l = 0; l < cfg.input_dim; ++l)
            for (int t = 0; t < cfg.t_max; ++t)
                if (masks[static_cast<size_t>(n) * cfg.t_max + t] == 0.0)
                    x[(static_cast<size_t>(n) * cfg.input_dim + l) * cfg.t_max + t] = 0.0;
    std::vector<int> labels = {0, 2, 1};
    std::vector<double> ztargets = {-0.5, 1.2, 0.3};

    auto build = [&](Tape<double>& tape, bool trainable) {
        auto g = model.bind(tape, trainable);
        auto xin = tape.constant({N, cfg.input_dim, 1, cfg.t_max}, x);
        auto heads = model.forward(tape, g, xin, masks);
        auto l_cls = ad::softmax_cross_entropy(heads.logits, labels);
        auto l_reg = ad::mse(heads.score_z, tape.constant({N, 1}, ztargets));
        return std::make_pair(model.mtl_loss(tape, g, l_cls, l_reg), std::move(g));
    };
    auto loss_value = [&]() {
        Tape<double> tape;
        return static_cast<double>(build(tape, false).first.value()[0]);
    };
    {
        Tape<double> tape;
        auto [loss, g] = build(tape, true);
        tape.backward(loss);
        for (auto& p : model.params) p.zero_grad();
        g.collect_grads();
    }
    return ad::grad_check_params<double>(loss_value, model.param_ptrs(), 1e-5);
}

}  // namespace

std::vector<GradCheckLine> run_grad_suite() {
    std::vector<GradCheckLine> lines;
    std::mt19937_64 rng(31);
    auto add = [&](const std::string& name, double err) { lines.push_back({name, err}); };

    add("relu", ad::grad_check<double>(
                    [](Tape<double>&, Var<double> x) { return ad::sum(ad::square(ad::relu(x))); }, {8},
                    [&] {  // keep all coordinates away from the kink
                        auto v = gaussian(rng, 8);
                        for (auto& x : v)
                            if (std::abs(x) < 0.2) x = x < 0 ? x - 0.2 : x + 0.2;
                        return v;
                    }(),
                    1e-6));
    add("square", ad::grad_check<double>(
                      [](Tape<double>&, Var<double> x) { return ad::sum(ad::square(x)); }, {8}, gaussian(rng, 8),
                      1e-6));
    add("exp", ad::grad_check<double>(
                   [](Tape<double>&, Var<double> x) { return ad::sum(ad::vexp(x)); }, {8}, gaussian(rng, 8), 1e-6));
    {
        auto other = gaussian(rng, 8);
        add("add/sub/mul/scale",
            ad::grad_check<double>(
                [&](Tape<double>& t, Var<double> x) {
                    auto o = t.leaf({8}, other, false);
                    return ad::sum(ad::square(ad::add(ad::mul(x, o), ad::scale(ad::sub(x, o), 0.7))));
                },
                {8}, gaussian(rng, 8), 1e-6));
    }
    {
        auto w = gaussian(rng, 12);
        auto b = gaussian(rng, 3);
        add("linear", ad::grad_check<double>(
                          [&](Tape<double>& t, Var<double> x) {
                              auto wv = t.leaf({4, 3}, w, false);
                              auto bv = t.leaf({3}, b, false);
                              return ad::sum(ad::square(ad::linear(x, wv, bv)));
                          },
                          {2, 4}, gaussian(rng, 8), 1e-6));
        auto xm = gaussian(rng, 8);
        add("matmul(weight)", ad::grad_check<double>(
                                  [&](Tape<double>& t, Var<double> wv) {
                                      auto x = t.leaf({2, 4}, xm, false);
                                      return ad::sum(ad::square(ad::matmul(x, wv)));
                                  },
                                  {4, 3}, w, 1e-6));
    }
    {
        const int N = 1, C = 2, H = 5, W = 4, F = 3, k = 3;
        auto xc = gaussian(rng, static_cast<size_t>(N) * C * H * W);
        auto kc = gaussian(rng, static_cast<size_t>(F) * C * k * k);
        add("conv2d(input)", ad::grad_check<double>(
                                 [&](Tape<double>& t, Var<double> x) {
                                     auto kv = t.leaf({F, C, k, k}, kc, false);
                                     return ad::sum(ad::square(ad::conv2d(x, kv, 2, 1)));
                                 },
                                 {N, C, H, W}, xc, 1e-5));
        add("conv2d(kernel)", ad::grad_check<double>(
                                  [&](Tape<double>& t, Var<double> kv) {
                                      auto x = t.leaf({N, C, H, W}, xc, false);
                                      return ad::sum(ad::square(ad::conv2d(x, kv, 2, 1)));
                                  },
                                  {F, C, k, k}, kc, 1e-5));
    }
    {
        const int N = 1, Cin = 2, H = 3, W = 3, Cout = 2, k = 4;
        auto xc = gaussian(rng, static_cast<size_t>(N) * Cin * H * W);
        auto kc = gaussian(rng, static_cast<size_t>(Cin) * Cout * k * k);
        add("conv2d_transpose(input)",
            ad::grad_check<double>(
                [&](Tape<double>& t, Var<double> x) {
                    auto kv = t.leaf({Cin, Cout, k, k}, kc, false);
                    return ad::sum(ad::square(ad::conv2d_transpose(x, kv, 2, 1, 1, 1)));
                },
                {N, Cin, H, W}, xc, 1e-5));
        add("conv2d_transpose(kernel)",
            ad::grad_check<double>(
                [&](Tape<double>& t, Var<double> kv) {
                    auto x = t.leaf({N, Cin, H, W}, xc, false);
                    return ad::sum(ad::square(ad::conv2d_transpose(x, kv, 2, 1, 1, 1)));
                },
                {Cin, Cout, k, k}, kc, 1e-5));
    }
    {
        const int N = 2, R = 2, c = 2, cp = 3;
        auto xb = gaussian(rng, static_cast<size_t>(N) * R * c);
        auto yb = gaussian(rng, static_cast<size_t>(N) * R * c);
        auto core = gaussian(rng, static_cast<size_t>(R) * c * c * cp);
        add("block_bilinear(core)",
            ad::grad_check<double>(
                [&](Tape<double>& t, Var<double> cr) {
                    auto x = t.leaf({N, R * c}, xb, false);
                    auto y = t.leaf({N, R * c}, yb, false);
                    return ad::sum(ad::square(ad::block_bilinear(x, y, cr, R, c, cp)));
                },
                {R, c, c, cp}, core, 1e-5));
    }
    {
        auto table = gaussian(rng, 5 * 4);
        add("embedding_select", ad::grad_check<double>(
                                    [&](Tape<double>&, Var<double> tab) {
                                        return ad::sum(ad::square(ad::embedding_select(tab, {1, 3, 1})));
                                    },
                                    {5, 4}, table, 1e-6));
    }
    {
        auto lv = gaussian(rng, 4 * 3);
        add("softmax_cross_entropy",
            ad::grad_check<double>(
                [&](Tape<double>&, Var<double> l) { return ad::softmax_cross_entropy(l, {0, 2, 1, 1}); }, {4, 3},
                lv, 1e-6));
    }
    {
        auto target = gaussian(rng, 6);
        add("mse", ad::grad_check<double>(
                       [&](Tape<double>& t, Var<double> x) { return ad::mse(x, t.leaf({6}, target, false)); }, {6},
                       gaussian(rng, 6), 1e-6));
    }
    {
        std::vector<double> w = {0.5, 0.5, 0, 0, 0.25, 0.25, 0.25, 0.25};
        add("weighted_time_pool",
            ad::grad_check<double>(
                [&](Tape<double>&, Var<double> h) { return ad::sum(ad::square(ad::weighted_time_pool(h, w))); },
                {2, 3, 1, 4}, gaussian(rng, 24), 1e-6));
    }
    add("vqvae_total_loss(composed)", composed_vqvae_check());
    add("mtl_loss(composed)", composed_mtl_check());
    return lines;
}

}  // namespace mmvq::pipeline
