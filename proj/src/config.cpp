#include "mmvq/config.hpp"

#include <fstream>

#include "mmvq/hash.hpp"

namespace mmvq::config {

using nlohmann::json;

namespace {

void deep_merge(json& base, const json& overrides) {
    if (!overrides.is_object()) {
        base = overrides;
        return;
    }
    if (!base.is_object()) base = json::object();
    for (auto it = overrides.begin(); it != overrides.end(); ++it) {
        if (it.value().is_object() && base.contains(it.key()))
            deep_merge(base[it.key()], it.value());
        else
            base[it.key()] = it.value();
    }
}

}  // namespace

json RunConfig::default_json() {
    json j;
    j["seed"] = 7;
    j["features"] = {{"window_s", 40.0},
                     {"overlap_s", 5.0},
                     {"audio_rate_hz", 100.0},
                     {"video_rate_hz", 30.0},
                     {"audio_channels", 8},
                     {"video_channels", 10},
                     {"delays_frames", {0, 1, 2, 3, 4, 5, 6, 7, 8, 9}}};
    j["encoder"] = {{"conv1_channels", 32}, {"conv2_channels", 64},      {"kernel", 4},
                    {"stride", 2},          {"padding", 1},              {"residual_blocks", 2},
                    {"projection_channels", 64}, {"latent_dim", 512}};
    j["fusion"] = {{"rank", 16}, {"chunk_in", 32}, {"chunk_out", 64}, {"fused_dim", 1024}, {"normalize", false}};
    j["codebook"] = {{"entries", 1024}, {"beta", 0.25}};
    j["training"] = {{"epochs", 100}, {"learning_rate", 1e-4}, {"batch_size", 32}, {"select_on", "val"}};
    j["downstream"] = {{"temporal_channels", 128},
                       {"temporal_kernel", 5},
                       {"trunk_dim", 128},
                       {"epochs", 1000},
                       {"learning_rate", 1e-5},
                       {"batch_size", 32},
                       {"plateau", {{"factor", 0.5}, {"threshold", 0.001}, {"patience", 150}}},
                       {"mode", "mtl"}};
    j["data"] = {{"subjects", 20},
                 {"sessions_min", 2},
                 {"sessions_max", 4},
                 {"duration_min_s", 110.0},
                 {"duration_max_s", 220.0},
                 {"class_mix", {{"HC", 0.4}, {"P-SZ", 0.3}, {"M-SZ", 0.3}}},
                 {"extreme_subjects", 1}};
    j["split"] = {{"ratios", {0.70, 0.15, 0.15}}};
    return j;
}

RunConfig RunConfig::defaults() {
    RunConfig c;
    c.j_ = default_json();
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ValidationError("config: cannot open '" + path.string() + "'");
    json overrides = json::parse(is, nullptr, false);
    if (overrides.is_discarded()) throw ValidationError("config: invalid JSON in '" + path.string() + "'");
    return from_json(overrides);
}

RunConfig RunConfig::from_json(const json& overrides) {
    RunConfig c;
    c.j_ = default_json();
    deep_merge(c.j_, overrides);
    return c;
}

uint64_t RunConfig::seed() const { return j_.at("seed").get<uint64_t>(); }
void RunConfig::set_seed(uint64_t s) { j_["seed"] = s; }

uint64_t RunConfig::hash() const { return fnv1a(j_.dump()); }

uint64_t RunConfig::mrl_hash() const {
    json sub;
    for (const char* k : {"features", "encoder", "fusion", "codebook"}) sub[k] = j_.at(k);
    return fnv1a(sub.dump());
}

std::string RunConfig::dump(int indent) const { return j_.dump(indent); }

FeaturesConfig RunConfig::features() const {
    const auto& f = j_.at("features");
    FeaturesConfig c;
    c.window_s = f.at("window_s").get<double>();
    c.overlap_s = f.at("overlap_s").get<double>();
    c.audio_rate_hz = f.at("audio_rate_hz").get<double>();
    c.video_rate_hz = f.at("video_rate_hz").get<double>();
    c.audio_channels = f.at("audio_channels").get<int>();
    c.video_channels = f.at("video_channels").get<int>();
    c.delays_frames = f.at("delays_frames").get<std::vector<int>>();
    if (c.window_s <= c.overlap_s || c.overlap_s < 0)
        throw ValidationError("config: require window_s > overlap_s >= 0");
    if (c.delays_frames.empty()) throw ValidationError("config: delays_frames must be non-empty");
    return c;
}

mrl::MrlConfig RunConfig::mrl() const {
    const FeaturesConfig f = features();
    const auto& e = j_.at("encoder");
    mrl::MrlConfig m;
    auto fill_encoder = [&](mrl::EncoderConfig& c, int in_h, int in_w) {
        c.in_h = in_h;
        c.in_w = in_w;
        c.conv1_channels = e.at("conv1_channels").get<int>();
        c.conv2_channels = e.at("conv2_channels").get<int>();
        c.kernel = e.at("kernel").get<int>();
        c.stride = e.at("stride").get<int>();
        c.padding = e.at("padding").get<int>();
        c.residual_blocks = e.at("residual_blocks").get<int>();
        c.projection_channels = e.at("projection_channels").get<int>();
        c.latent_dim = e.at("latent_dim").get<int>();
    };
    fill_encoder(m.audio, f.audio_fvtc_rows(), f.audio_fvtc_cols());
    fill_encoder(m.video, f.video_fvtc_rows(), f.video_fvtc_cols());
    const auto& fu = j_.at("fusion");
    m.fusion.rank = fu.at("rank").get<int>();
    m.fusion.chunk_in = fu.at("chunk_in").get<int>();
    m.fusion.chunk_out = fu.at("chunk_out").get<int>();
    m.fusion.fused_dim = fu.at("fused_dim").get<int>();
    m.fusion.normalize = fu.at("normalize").get<bool>();
    const auto& cb = j_.at("codebook");
    m.codebook.entries = cb.at("entries").get<int>();
    m.codebook.beta = cb.at("beta").get<double>();
    const auto& tr = j_.at("training");
    m.train.epochs = tr.at("epochs").get<int>();
    m.train.learning_rate = tr.at("learning_rate").get<double>();
    m.train.batch_size = tr.at("batch_size").get<int>();
    m.train.select_on = tr.at("select_on").get<std::string>();
    m.validate();
    return m;
}

downstream::DownstreamConfig RunConfig::downstream(int input_dim, int t_max) const {
    const auto& d = j_.at("downstream");
    downstream::DownstreamConfig c;
    c.input_dim = input_dim;
    c.t_max = t_max;
    c.temporal_channels = d.at("temporal_channels").get<int>();
    c.temporal_kernel = d.at("temporal_kernel").get<int>();
    c.trunk_dim = d.at("trunk_dim").get<int>();
    c.epochs = d.at("epochs").get<int>();
    c.learning_rate = d.at("learning_rate").get<double>();
    c.batch_size = d.at("batch_size").get<int>();
    const auto& p = d.at("plateau");
    c.plateau.factor = p.at("factor").get<double>();
    c.plateau.threshold = p.at("threshold").get<double>();
    c.plateau.patience = p.at("patience").get<int>();
    c.mode = downstream::task_mode_from_string(d.at("mode").get<std::string>());
    return c;
}

data::CohortConfig RunConfig::cohort() const {
    const FeaturesConfig f = features();
    const auto& d = j_.at("data");
    data::CohortConfig c;
    c.subjects = d.at("subjects").get<int>();
    c.sessions_min = d.at("sessions_min").get<int>();
    c.sessions_max = d.at("sessions_max").get<int>();
    c.duration_min_s = d.at("duration_min_s").get<double>();
    c.duration_max_s = d.at("duration_max_s").get<double>();
    const auto& mix = d.at("class_mix");
    c.hc_fraction = mix.at("HC").get<double>();
    c.psz_fraction = mix.at("P-SZ").get<double>();
    c.msz_fraction = mix.at("M-SZ").get<double>();
    c.extreme_subjects = d.at("extreme_subjects").get<int>();
    c.audio_channels = f.audio_channels;
    c.video_channels = f.video_channels;
    c.audio_rate_hz = f.audio_rate_hz;
    c.video_rate_hz = f.video_rate_hz;
    return c;
}

std::array<double, 3> RunConfig::split_ratios() const {
    const auto r = j_.at("split").at("ratios").get<std::vector<double>>();
    if (r.size() != 3) throw ValidationError("config: split.ratios must have 3 entries");
    return {r[0], r[1], r[2]};
}

void atomic_write_text(const std::filesystem::path& path, const std::string& text) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::trunc);
        if (!os) throw ValidationError("cannot open '" + tmp.string() + "' for writing");
        os << text;
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace mmvq::config

// ---- module config serialization (declared in mrl.hpp / downstream.hpp) ----

namespace mmvq::mrl {

using nlohmann::json;

std::string mrl_config_to_json(const MrlConfig& cfg) {
    json j;
    auto enc = [](const EncoderConfig& c) {
        return json{{"in_h", c.in_h},
                    {"in_w", c.in_w},
                    {"conv1_channels", c.conv1_channels},
                    {"conv2_channels", c.conv2_channels},
                    {"kernel", c.kernel},
                    {"stride", c.stride},
                    {"padding", c.padding},
                    {"residual_blocks", c.residual_blocks},
                    {"projection_channels", c.projection_channels},
                    {"latent_dim", c.latent_dim}};
    };
    j["audio"] = enc(cfg.audio);
    j["video"] = enc(cfg.video);
    j["fusion"] = {{"rank", cfg.fusion.rank},
                   {"chunk_in", cfg.fusion.chunk_in},
                   {"chunk_out", cfg.fusion.chunk_out},
                   {"fused_dim", cfg.fusion.fused_dim},
                   {"normalize", cfg.fusion.normalize}};
    j["codebook"] = {{"entries", cfg.codebook.entries}, {"beta", cfg.codebook.beta}};
    j["train"] = {{"epochs", cfg.train.epochs},
                  {"learning_rate", cfg.train.learning_rate},
                  {"batch_size", cfg.train.batch_size},
                  {"select_on", cfg.train.select_on}};
    return j.dump();
}

MrlConfig mrl_config_from_json(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ValidationError("mrl config: invalid JSON");
    MrlConfig cfg;
    auto enc = [](const json& e, EncoderConfig& c) {
        c.in_h = e.at("in_h").get<int>();
        c.in_w = e.at("in_w").get<int>();
        c.conv1_channels = e.at("conv1_channels").get<int>();
        c.conv2_channels = e.at("conv2_channels").get<int>();
        c.kernel = e.at("kernel").get<int>();
        c.stride = e.at("stride").get<int>();
        c.padding = e.at("padding").get<int>();
        c.residual_blocks = e.at("residual_blocks").get<int>();
        c.projection_channels = e.at("projection_channels").get<int>();
        c.latent_dim = e.at("latent_dim").get<int>();
    };
    enc(j.at("audio"), cfg.audio);
    enc(j.at("video"), cfg.video);
    cfg.fusion.rank = j.at("fusion").at("rank").get<int>();
    cfg.fusion.chunk_in = j.at("fusion").at("chunk_in").get<int>();
    cfg.fusion.chunk_out = j.at("fusion").at("chunk_out").get<int>();
    cfg.fusion.fused_dim = j.at("fusion").at("fused_dim").get<int>();
    cfg.fusion.normalize = j.at("fusion").at("normalize").get<bool>();
    cfg.codebook.entries = j.at("codebook").at("entries").get<int>();
    cfg.codebook.beta = j.at("codebook").at("beta").get<double>();
    cfg.train.epochs = j.at("train").at("epochs").get<int>();
    cfg.train.learning_rate = j.at("train").at("learning_rate").get<double>();
    cfg.train.batch_size = j.at("train").at("batch_size").get<int>();
    cfg.train.select_on = j.at("train").at("select_on").get<std::string>();
    cfg.validate();
    return cfg;
}

}  // namespace mmvq::mrl

namespace mmvq::downstream {

using nlohmann::json;

std::string downstream_config_to_json(const DownstreamConfig& cfg) {
    json j;
    j["input_dim"] = cfg.input_dim;
    j["t_max"] = cfg.t_max;
    j["temporal_channels"] = cfg.temporal_channels;
    j["temporal_kernel"] = cfg.temporal_kernel;
    j["trunk_dim"] = cfg.trunk_dim;
    j["epochs"] = cfg.epochs;
    j["learning_rate"] = cfg.learning_rate;
    j["batch_size"] = cfg.batch_size;
    j["plateau"] = {{"factor", cfg.plateau.factor},
                    {"threshold", cfg.plateau.threshold},
                    {"patience", cfg.plateau.patience}};
    j["mode"] = to_string(cfg.mode);
    return j.dump();
}

DownstreamConfig downstream_config_from_json(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ValidationError("downstream config: invalid JSON");
    DownstreamConfig cfg;
    cfg.input_dim = j.at("input_dim").get<int>();
    cfg.t_max = j.at("t_max").get<int>();
    cfg.temporal_channels = j.at("temporal_channels").get<int>();
    cfg.temporal_kernel = j.at("temporal_kernel").get<int>();
    cfg.trunk_dim = j.at("trunk_dim").get<int>();
    cfg.epochs = j.at("epochs").get<int>();
    cfg.learning_rate = j.at("learning_rate").get<double>();
    cfg.batch_size = j.at("batch_size").get<int>();
    cfg.plateau.factor = j.at("plateau").at("factor").get<double>();
    cfg.plateau.threshold = j.at("plateau").at("threshold").get<double>();
    cfg.plateau.patience = j.at("plateau").at("patience").get<int>();
    cfg.mode = task_mode_from_string(j.at("mode").get<std::string>());
    return cfg;
}

}  // namespace mmvq::downstream
