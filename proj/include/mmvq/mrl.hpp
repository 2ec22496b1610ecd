#pragma once

// Multimodal VQ-VAE representation learner: per-modality CNN encoders,
// bilinear block fusion of the two latents, vector quantization against a
// learned codebook, mirrored decoders, and the training loop.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mmvq/autodiff.hpp"
#include "mmvq/checkpoint.hpp"
#include "mmvq/errors.hpp"
#include "mmvq/gradcheck.hpp"
#include "mmvq/hash.hpp"
#include "mmvq/optim.hpp"

namespace mmvq::mrl {

struct EncoderConfig {
    int in_h = 8;
    int in_w = 80;
    int conv1_channels = 32;
    int conv2_channels = 64;
    int kernel = 4;
    int stride = 2;
    int padding = 1;
    int residual_blocks = 2;
    int projection_channels = 64;
    int latent_dim = 512;
};

struct FusionConfig {
    int rank = 16;       // number of block cores
    int chunk_in = 32;   // per-block input chunk size
    int chunk_out = 64;  // per-block output chunk size
    int fused_dim = 1024;
    bool normalize = false;  // signed sqrt + row L2 after the bilinear stage
};

struct CodebookConfig {
    int entries = 1024;
    double beta = 0.25;  // commitment weight
};

struct MrlTrainConfig {
    int epochs = 100;
    double learning_rate = 1e-4;
    int batch_size = 32;
    std::string select_on = "val";  // or "test"
};

struct MrlConfig {
    EncoderConfig audio;
    EncoderConfig video;
    FusionConfig fusion;
    CodebookConfig codebook;
    MrlTrainConfig train;

    void validate() const {
        if (codebook.entries < 2) throw ValidationError("codebook: need K >= 2");
        if (fusion.fused_dim < 1) throw ValidationError("fusion: fused_dim must be positive");
        if (audio.latent_dim != video.latent_dim)
            throw ValidationError("encoders: unimodal latent dims must match for fusion");
    }
};

// Spatial bookkeeping for one encoder and its mirrored decoder. The decoder's
// transposed convs need per-layer output padding whenever a strided layer
// floored away rows or columns.
struct EncoderShapes {
    int h1, w1, h2, w2;
    int opad1_h, opad1_w, opad2_h, opad2_w;
    int flat;
};

inline EncoderShapes trace_shapes(const EncoderConfig& c) {
    EncoderShapes s{};
    const auto out = [&](int in) { return ad::conv_out_dim(in, c.kernel, c.stride, c.padding); };
    const auto back = [&](int in) { return ad::conv_transpose_out_dim(in, c.kernel, c.stride, c.padding, 0); };
    s.h1 = out(c.in_h);
    s.w1 = out(c.in_w);
    s.h2 = out(s.h1);
    s.w2 = out(s.w1);
    if (s.h2 < 1 || s.w2 < 1)
        throw ValidationError("encoder: input " + std::to_string(c.in_h) + "x" + std::to_string(c.in_w) +
                              " too small for two strided conv layers");
    s.opad2_h = s.h1 - back(s.h2);
    s.opad2_w = s.w1 - back(s.w2);
    s.opad1_h = c.in_h - back(s.h1);
    s.opad1_w = c.in_w - back(s.w1);
    for (int v : {s.opad1_h, s.opad1_w, s.opad2_h, s.opad2_w})
        if (v < 0 || v >= c.stride)
            throw ValidationError("encoder: shape not mirrorable, required output padding " + std::to_string(v) +
                                  " outside [0, stride)");
    s.flat = c.projection_channels * s.h2 * s.w2;
    return s;
}

// Nearest codebook row by Euclidean distance, ties resolved to the lowest
// index. Throws on non-finite input.
template <typename T>
int nearest_codebook_row(const T* z, const std::vector<T>& codebook, int K, int L) {
    for (int l = 0; l < L; ++l)
        if (!std::isfinite(static_cast<double>(z[l])))
            throw NumericError("quantize: non-finite latent value");
    int best = 0;
    double best_d = 0.0;
    for (int k = 0; k < K; ++k) {
        const T* row = codebook.data() + static_cast<size_t>(k) * L;
        double d = 0.0;
        for (int l = 0; l < L; ++l) {
            const double diff = static_cast<double>(z[l]) - static_cast<double>(row[l]);
            d += diff * diff;
        }
        if (k == 0 || d < best_d) {
            best_d = d;
            best = k;
        }
    }
    return best;
}

template <typename T>
struct QuantizeResult {
    std::vector<T> zq;
    int index = 0;
    double codebook_loss = 0.0;
    double commitment_loss = 0.0;
};

// Plain single-vector quantization (inference / tests).
template <typename T>
QuantizeResult<T> quantize_vector(const std::vector<T>& z, const std::vector<T>& codebook, int K, int L) {
    if (static_cast<int>(z.size()) != L) throw ValidationError("quantize: latent size mismatch");
    if (K < 1 || static_cast<int>(codebook.size()) != K * L)
        throw ValidationError("quantize: empty or malformed codebook");
    QuantizeResult<T> r;
    r.index = nearest_codebook_row(z.data(), codebook, K, L);
    r.zq.assign(codebook.begin() + static_cast<size_t>(r.index) * L,
                codebook.begin() + static_cast<size_t>(r.index + 1) * L);
    for (int l = 0; l < L; ++l) {
        const double d = static_cast<double>(z[static_cast<size_t>(l)]) - static_cast<double>(r.zq[static_cast<size_t>(l)]);
        r.codebook_loss += d * d;
    }
    r.commitment_loss = r.codebook_loss;
    return r;
}

// Quantization assignment frozen at a base point, used by the gradient-check
// suite: the straight-through path becomes z + const and the stop-gradient
// constants stay fixed while parameters are perturbed.
template <typename T>
struct FrozenQuant {
    std::vector<int> indices;
    std::vector<T> z0;  // fused latents at the base point, [N*L]
    std::vector<T> e0;  // selected codebook rows at the base point, [N*L]
};

template <typename T>
class VqVaeModel {
public:
    MrlConfig cfg;
    EncoderShapes audio_shapes{}, video_shapes{};
    std::vector<ad::Parameter<T>> params;
    std::vector<int64_t> codebook_usage;  // per-epoch histogram, reset by the train loop

    static VqVaeModel init(const MrlConfig& cfg, uint64_t seed) {
        cfg.validate();
        VqVaeModel m;
        m.cfg = cfg;
        m.audio_shapes = trace_shapes(cfg.audio);
        m.video_shapes = trace_shapes(cfg.video);
        std::mt19937_64 rng(seed);
        m.add_encoder_params("audio_enc", cfg.audio, m.audio_shapes, rng);
        m.add_encoder_params("video_enc", cfg.video, m.video_shapes, rng);
        m.add_fusion_params(rng);
        m.add_decoder_params("audio_dec", cfg.audio, m.audio_shapes, rng);
        m.add_decoder_params("video_dec", cfg.video, m.video_shapes, rng);
        const int K = cfg.codebook.entries, L = cfg.fusion.fused_dim;
        m.add_param("codebook", {K, L},
                    ad::uniform_range<T>(rng, static_cast<int64_t>(K) * L, -1.0 / K, 1.0 / K));
        m.codebook_usage.assign(static_cast<size_t>(K), 0);
        return m;
    }

    ad::Parameter<T>& param(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ValidationError("model: unknown parameter '" + name + "'");
        return params[it->second];
    }
    const ad::Parameter<T>& param(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ValidationError("model: unknown parameter '" + name + "'");
        return params[it->second];
    }

    std::vector<ad::Parameter<T>*> param_ptrs() {
        std::vector<ad::Parameter<T>*> out;
        out.reserve(params.size());
        for (auto& p : params) out.push_back(&p);
        return out;
    }

    // Leaves for every parameter on the given tape. trainable=false builds a
    // constant graph for evaluation/embedding.
    struct Graph {
        std::vector<ad::BoundParam<T>> bound;
        const std::map<std::string, size_t>* index;

        ad::Var<T> operator[](const std::string& name) const {
            auto it = index->find(name);
            if (it == index->end()) throw ValidationError("graph: unknown parameter '" + name + "'");
            return bound[it->second].var;
        }
        void collect_grads() {
            for (auto& b : bound) b.collect_grad();
        }
    };

    Graph bind(ad::Tape<T>& tape, bool trainable) {
        Graph g;
        g.index = &index_;
        g.bound.reserve(params.size());
        for (auto& p : params)
            g.bound.push_back(ad::BoundParam<T>{tape.leaf(p.shape, p.value, trainable), &p});
        return g;
    }

    // ---- forward pieces (batched) ----

    ad::Var<T> encode(ad::Tape<T>& tape, const Graph& g, ad::Var<T> x, const std::string& prefix,
                      const EncoderConfig& c, const EncoderShapes& s) const {
        const auto& xs = x.shape();
        if (xs.size() != 4 || xs[1] != 1 || xs[2] != c.in_h || xs[3] != c.in_w)
            throw ValidationError("encode: input shape " + ad::shape_str(xs) + " does not match configured " +
                                  std::to_string(c.in_h) + "x" + std::to_string(c.in_w));
        auto h = ad::relu(ad::add_channel_bias(ad::conv2d(x, g[prefix + "/conv1_k"], c.stride, c.padding),
                                               g[prefix + "/conv1_b"]));
        h = ad::relu(ad::add_channel_bias(ad::conv2d(h, g[prefix + "/conv2_k"], c.stride, c.padding),
                                          g[prefix + "/conv2_b"]));
        for (int r = 0; r < c.residual_blocks; ++r) h = residual_block(g, h, prefix + "/res" + std::to_string(r));
        h = ad::add_channel_bias(ad::conv2d(h, g[prefix + "/proj_k"], 1, 0), g[prefix + "/proj_b"]);
        auto flat = ad::reshape(h, {xs[0], s.flat});
        return ad::linear(flat, g[prefix + "/fc_w"], g[prefix + "/fc_b"]);
    }

    ad::Var<T> decode(ad::Tape<T>& tape, const Graph& g, ad::Var<T> zq, const std::string& prefix,
                      const EncoderConfig& c, const EncoderShapes& s) const {
        const int N = zq.shape()[0];
        auto flat = ad::linear(zq, g[prefix + "/fc_w"], g[prefix + "/fc_b"]);
        auto h = ad::reshape(flat, {N, c.projection_channels, s.h2, s.w2});
        h = ad::add_channel_bias(ad::conv2d(h, g[prefix + "/proj_k"], 1, 0), g[prefix + "/proj_b"]);
        for (int r = 0; r < c.residual_blocks; ++r) h = residual_block(g, h, prefix + "/res" + std::to_string(r));
        h = ad::relu(h);
        h = ad::add_channel_bias(
            ad::conv2d_transpose(h, g[prefix + "/tconv2_k"], c.stride, c.padding, s.opad2_h, s.opad2_w),
            g[prefix + "/tconv2_b"]);
        h = ad::relu(h);
        return ad::add_channel_bias(
            ad::conv2d_transpose(h, g[prefix + "/tconv1_k"], c.stride, c.padding, s.opad1_h, s.opad1_w),
            g[prefix + "/tconv1_b"]);
    }

    // BLOCK fusion: project each latent to rank*chunk_in, contract per-block
    // core tensors, then project the concatenated block outputs to fused_dim.
    ad::Var<T> fuse(ad::Tape<T>& tape, const Graph& g, ad::Var<T> za, ad::Var<T> zv) const {
        const auto& f = cfg.fusion;
        auto xa = ad::matmul(za, g["fusion/proj_a"]);
        auto xv = ad::matmul(zv, g["fusion/proj_b"]);
        auto bb = ad::block_bilinear(xa, xv, g["fusion/cores"], f.rank, f.chunk_in, f.chunk_out);
        if (f.normalize) bb = ad::l2_normalize_rows(ad::signed_sqrt(bb));
        return ad::linear(bb, g["fusion/out_w"], g["fusion/out_b"]);
    }

    struct QuantOut {
        ad::Var<T> zq;
        ad::Var<T> codebook_loss;    // mean over batch of ||sg(z) - e||^2
        ad::Var<T> commitment_loss;  // mean over batch of ||z - sg(e)||^2
        std::vector<int> indices;
    };

    // In-graph quantization: nearest-row assignment from current values, a
    // straight-through value path, and the two stop-gradient loss terms. A
    // frozen assignment turns the whole thing into a smooth surrogate for
    // finite-difference checks.
    QuantOut quantize(ad::Tape<T>& tape, const Graph& g, ad::Var<T> z, const FrozenQuant<T>* frozen = nullptr) const {
        const int N = z.shape()[0];
        const int L = cfg.fusion.fused_dim;
        const int K = cfg.codebook.entries;
        if (z.shape() != ad::Shape{N, L}) throw ValidationError("quantize: latent shape mismatch");
        auto codebook = g["codebook"];

        QuantOut out;
        if (frozen) {
            out.indices = frozen->indices;
        } else {
            const auto& zv = z.value();
            const auto& cb = z.tape->node(codebook.id).value;
            out.indices.resize(static_cast<size_t>(N));
            for (int n = 0; n < N; ++n)
                out.indices[static_cast<size_t>(n)] =
                    nearest_codebook_row(zv.data() + static_cast<size_t>(n) * L, cb, K, L);
        }
        auto e = ad::embedding_select(codebook, out.indices);
        const T inv_n = T(1) / static_cast<T>(N);
        if (frozen) {
            // zq = z + (e0 - z0), constants captured at the base point
            std::vector<T> offset(frozen->e0.size());
            for (size_t i = 0; i < offset.size(); ++i) offset[i] = frozen->e0[i] - frozen->z0[i];
            out.zq = ad::add(z, tape.constant(z.shape(), std::move(offset)));
            out.codebook_loss = ad::scale(ad::sum(ad::square(ad::sub(e, tape.constant(z.shape(), frozen->z0)))), inv_n);
            out.commitment_loss =
                ad::scale(ad::sum(ad::square(ad::sub(z, tape.constant(z.shape(), frozen->e0)))), inv_n);
        } else {
            out.zq = ad::straight_through(z, e);
            out.codebook_loss = ad::scale(ad::sum(ad::square(ad::sub(e, tape.constant(z.shape(), z.value())))), inv_n);
            out.commitment_loss =
                ad::scale(ad::sum(ad::square(ad::sub(z, tape.constant(z.shape(), e.value())))), inv_n);
        }
        return out;
    }

    struct LossParts {
        ad::Var<T> total, recon_audio, recon_video, codebook, commitment;
        std::vector<int> indices;
    };

    // Four-term objective: audio reconstruction + video reconstruction +
    // codebook loss + beta * commitment loss.
    LossParts build_loss(ad::Tape<T>& tape, Graph& g, ad::Var<T> xa, ad::Var<T> xv,
                         const FrozenQuant<T>* frozen = nullptr) const {
        auto za = encode(tape, g, xa, "audio_enc", cfg.audio, audio_shapes);
        auto zv = encode(tape, g, xv, "video_enc", cfg.video, video_shapes);
        auto z = fuse(tape, g, za, zv);
        auto q = quantize(tape, g, z, frozen);
        auto xa_hat = decode(tape, g, q.zq, "audio_dec", cfg.audio, audio_shapes);
        auto xv_hat = decode(tape, g, q.zq, "video_dec", cfg.video, video_shapes);
        LossParts parts;
        parts.recon_audio = ad::mse(xa_hat, xa);
        parts.recon_video = ad::mse(xv_hat, xv);
        parts.codebook = q.codebook_loss;
        parts.commitment = q.commitment_loss;
        parts.total = ad::add(ad::add(parts.recon_audio, parts.recon_video),
                              ad::add(parts.codebook, ad::scale(parts.commitment, static_cast<T>(cfg.codebook.beta))));
        parts.indices = q.indices;
        return parts;
    }

    // Capture the quantization assignment at the current parameter values.
    FrozenQuant<T> capture_quant(const std::vector<T>& xa, const std::vector<T>& xv, int batch) {
        ad::Tape<T> tape;
        auto g = bind(tape, false);
        auto a = tape.constant({batch, 1, cfg.audio.in_h, cfg.audio.in_w}, xa);
        auto v = tape.constant({batch, 1, cfg.video.in_h, cfg.video.in_w}, xv);
        auto za = encode(tape, g, a, "audio_enc", cfg.audio, audio_shapes);
        auto zv = encode(tape, g, v, "video_enc", cfg.video, video_shapes);
        auto z = fuse(tape, g, za, zv);
        auto q = quantize(tape, g, z, nullptr);
        FrozenQuant<T> f;
        f.indices = q.indices;
        f.z0 = z.value();
        f.e0 = q.zq.value();
        return f;
    }

    // Inference: quantized fused latent for one aligned segment pair.
    std::pair<std::vector<T>, int> embed_segment(const std::vector<T>& fvtc_audio, const std::vector<T>& fvtc_video) {
        ad::Tape<T> tape;
        auto g = bind(tape, false);
        auto a = tape.constant({1, 1, cfg.audio.in_h, cfg.audio.in_w}, fvtc_audio);
        auto v = tape.constant({1, 1, cfg.video.in_h, cfg.video.in_w}, fvtc_video);
        auto za = encode(tape, g, a, "audio_enc", cfg.audio, audio_shapes);
        auto zv = encode(tape, g, v, "video_enc", cfg.video, video_shapes);
        auto z = fuse(tape, g, za, zv);
        auto q = quantize(tape, g, z, nullptr);
        return {q.zq.value(), q.indices[0]};
    }

private:
    std::map<std::string, size_t> index_;

    void add_param(const std::string& name, ad::Shape shape, std::vector<T> value) {
        index_[name] = params.size();
        params.emplace_back(name, std::move(shape), std::move(value));
    }

    void add_conv(const std::string& name, int out_c, int in_c, int kh, int kw, std::mt19937_64& rng) {
        const int64_t fan_in = static_cast<int64_t>(in_c) * kh * kw;
        add_param(name + "_k", {out_c, in_c, kh, kw},
                  ad::uniform_fan_in<T>(rng, static_cast<int64_t>(out_c) * in_c * kh * kw, fan_in));
        add_param(name + "_b", {out_c}, std::vector<T>(static_cast<size_t>(out_c), T(0)));
    }

    void add_linear(const std::string& name, int in_d, int out_d, std::mt19937_64& rng, bool bias = true) {
        add_param(name + "_w", {in_d, out_d}, ad::uniform_fan_in<T>(rng, static_cast<int64_t>(in_d) * out_d, in_d));
        if (bias) add_param(name + "_b", {out_d}, std::vector<T>(static_cast<size_t>(out_d), T(0)));
    }

    void add_encoder_params(const std::string& prefix, const EncoderConfig& c, const EncoderShapes& s,
                            std::mt19937_64& rng) {
        add_conv(prefix + "/conv1", c.conv1_channels, 1, c.kernel, c.kernel, rng);
        add_conv(prefix + "/conv2", c.conv2_channels, c.conv1_channels, c.kernel, c.kernel, rng);
        for (int r = 0; r < c.residual_blocks; ++r) {
            add_conv(prefix + "/res" + std::to_string(r) + "/c3", c.conv2_channels, c.conv2_channels, 3, 3, rng);
            add_conv(prefix + "/res" + std::to_string(r) + "/c1", c.conv2_channels, c.conv2_channels, 1, 1, rng);
        }
        add_conv(prefix + "/proj", c.projection_channels, c.conv2_channels, 1, 1, rng);
        add_linear(prefix + "/fc", s.flat, c.latent_dim, rng);
    }

    void add_decoder_params(const std::string& prefix, const EncoderConfig& c, const EncoderShapes& s,
                            std::mt19937_64& rng) {
        add_linear(prefix + "/fc", cfg.fusion.fused_dim, s.flat, rng);
        add_conv(prefix + "/proj", c.conv2_channels, c.projection_channels, 1, 1, rng);
        for (int r = 0; r < c.residual_blocks; ++r) {
            add_conv(prefix + "/res" + std::to_string(r) + "/c3", c.conv2_channels, c.conv2_channels, 3, 3, rng);
            add_conv(prefix + "/res" + std::to_string(r) + "/c1", c.conv2_channels, c.conv2_channels, 1, 1, rng);
        }
        // transposed conv kernels are [Cin, Cout, kH, kW]
        const int64_t fan2 = static_cast<int64_t>(c.conv2_channels) * c.kernel * c.kernel;
        add_param(prefix + "/tconv2_k", {c.conv2_channels, c.conv1_channels, c.kernel, c.kernel},
                  ad::uniform_fan_in<T>(rng, static_cast<int64_t>(c.conv2_channels) * c.conv1_channels * c.kernel * c.kernel, fan2));
        add_param(prefix + "/tconv2_b", {c.conv1_channels}, std::vector<T>(static_cast<size_t>(c.conv1_channels), T(0)));
        const int64_t fan1 = static_cast<int64_t>(c.conv1_channels) * c.kernel * c.kernel;
        add_param(prefix + "/tconv1_k", {c.conv1_channels, 1, c.kernel, c.kernel},
                  ad::uniform_fan_in<T>(rng, static_cast<int64_t>(c.conv1_channels) * c.kernel * c.kernel, fan1));
        add_param(prefix + "/tconv1_b", {1}, std::vector<T>(1, T(0)));
    }

    void add_fusion_params(std::mt19937_64& rng) {
        const auto& f = cfg.fusion;
        const int latent = cfg.audio.latent_dim;
        add_param("fusion/proj_a", {latent, f.rank * f.chunk_in},
                  ad::uniform_fan_in<T>(rng, static_cast<int64_t>(latent) * f.rank * f.chunk_in, latent));
        add_param("fusion/proj_b", {latent, f.rank * f.chunk_in},
                  ad::uniform_fan_in<T>(rng, static_cast<int64_t>(latent) * f.rank * f.chunk_in, latent));
        add_param("fusion/cores", {f.rank, f.chunk_in, f.chunk_in, f.chunk_out},
                  ad::uniform_fan_in<T>(rng, static_cast<int64_t>(f.rank) * f.chunk_in * f.chunk_in * f.chunk_out,
                                        static_cast<int64_t>(f.chunk_in) * f.chunk_in));
        add_linear("fusion/out", f.rank * f.chunk_out, f.fused_dim, rng);
    }

    ad::Var<T> residual_block(const Graph& g, ad::Var<T> x, const std::string& prefix) const {
        auto h = ad::relu(x);
        h = ad::add_channel_bias(ad::conv2d(h, g[prefix + "/c3_k"], 1, 1), g[prefix + "/c3_b"]);
        h = ad::relu(h);
        h = ad::add_channel_bias(ad::conv2d(h, g[prefix + "/c1_k"], 1, 0), g[prefix + "/c1_b"]);
        return ad::add(x, h);
    }
};

// ---- training ----

template <typename T>
struct SegmentSample {
    std::string subject_id;
    std::string session_id;
    int segment_index = 0;
    std::vector<T> audio;  // flattened FVTC, [in_h * in_w]
    std::vector<T> video;
};

struct MrlHistory {
    std::vector<double> train, val, test;
};

template <typename T>
struct MrlCheckpoint {
    VqVaeModel<T> model;
    MrlHistory history;
    int best_epoch = 0;               // 1-based
    std::string run_config_json;      // full resolved run config (provenance)
    uint64_t run_config_mrl_hash = 0; // hash of the model-shaping sections
    std::vector<int64_t> usage;       // codebook usage in the final epoch
};

namespace detail {

template <typename T>
void fill_batch(const std::vector<SegmentSample<T>>& data, const std::vector<size_t>& order, size_t begin,
                size_t count, std::vector<T>& xa, std::vector<T>& xv) {
    const size_t na = data[order[begin]].audio.size();
    const size_t nv = data[order[begin]].video.size();
    xa.resize(count * na);
    xv.resize(count * nv);
    for (size_t i = 0; i < count; ++i) {
        const auto& s = data[order[begin + i]];
        std::copy(s.audio.begin(), s.audio.end(), xa.begin() + static_cast<long>(i * na));
        std::copy(s.video.begin(), s.video.end(), xv.begin() + static_cast<long>(i * nv));
    }
}

}  // namespace detail

// Mean total loss over a dataset slice, forward only.
template <typename T>
double mrl_eval_loss(VqVaeModel<T>& model, const std::vector<SegmentSample<T>>& data,
                     const std::vector<size_t>& indices, int batch_size) {
    if (indices.empty()) return 0.0;
    double acc = 0.0;
    std::vector<T> xa, xv;
    for (size_t begin = 0; begin < indices.size(); begin += static_cast<size_t>(batch_size)) {
        const size_t count = std::min(static_cast<size_t>(batch_size), indices.size() - begin);
        detail::fill_batch(data, indices, begin, count, xa, xv);
        ad::Tape<T> tape;
        auto g = model.bind(tape, false);
        auto a = tape.constant({static_cast<int>(count), 1, model.cfg.audio.in_h, model.cfg.audio.in_w}, xa);
        auto v = tape.constant({static_cast<int>(count), 1, model.cfg.video.in_h, model.cfg.video.in_w}, xv);
        auto parts = model.build_loss(tape, g, a, v);
        acc += static_cast<double>(parts.total.value()[0]) * static_cast<double>(count);
    }
    return acc / static_cast<double>(indices.size());
}

// Adam over the four-term loss; per-epoch train/val/test histories; the
// checkpoint keeps the parameters from the epoch with the lowest selection
// loss (validation by default, test split behind the compatibility switch).
template <typename T>
MrlCheckpoint<T> train_mrl(const std::vector<SegmentSample<T>>& data, const std::vector<size_t>& train_idx,
                           const std::vector<size_t>& val_idx, const std::vector<size_t>& test_idx,
                           const MrlConfig& cfg, uint64_t seed,
                           const std::function<void(int, double, double, double)>& on_epoch = nullptr) {
    if (train_idx.empty()) throw ValidationError("train_mrl: empty train split");
    if (cfg.train.select_on != "val" && cfg.train.select_on != "test")
        throw ValidationError("train_mrl: select_on must be 'val' or 'test'");

    MrlCheckpoint<T> ck;
    ck.model = VqVaeModel<T>::init(cfg, derive_seed(seed, "mrl/init"));
    auto& model = ck.model;
    ad::Adam<T> opt(static_cast<T>(cfg.train.learning_rate));
    auto param_ptrs = model.param_ptrs();

    std::mt19937_64 shuffle_rng(derive_seed(seed, "mrl/shuffle"));
    std::vector<size_t> order = train_idx;

    double best_select = 0.0;
    std::vector<std::vector<T>> best_values;
    std::vector<T> xa, xv;

    for (int epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng() % i]);
        std::fill(model.codebook_usage.begin(), model.codebook_usage.end(), int64_t{0});

        double epoch_loss = 0.0;
        for (size_t begin = 0; begin < order.size(); begin += static_cast<size_t>(cfg.train.batch_size)) {
            const size_t count = std::min(static_cast<size_t>(cfg.train.batch_size), order.size() - begin);
            detail::fill_batch(data, order, begin, count, xa, xv);
            ad::Tape<T> tape;
            auto g = model.bind(tape, true);
            auto a = tape.constant({static_cast<int>(count), 1, cfg.audio.in_h, cfg.audio.in_w}, xa);
            auto v = tape.constant({static_cast<int>(count), 1, cfg.video.in_h, cfg.video.in_w}, xv);
            auto parts = model.build_loss(tape, g, a, v);
            const double loss = static_cast<double>(parts.total.value()[0]);
            if (!std::isfinite(loss))
                throw NumericError("train_mrl: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                   std::to_string(begin / static_cast<size_t>(cfg.train.batch_size)));
            epoch_loss += loss * static_cast<double>(count);
            for (int idx : parts.indices) model.codebook_usage[static_cast<size_t>(idx)]++;

            tape.backward(parts.total);
            for (auto& p : model.params) p.zero_grad();
            g.collect_grads();
            opt.step(param_ptrs);
        }
        epoch_loss /= static_cast<double>(order.size());

        const double val_loss = mrl_eval_loss(model, data, val_idx, cfg.train.batch_size);
        const double test_loss = mrl_eval_loss(model, data, test_idx, cfg.train.batch_size);
        ck.history.train.push_back(epoch_loss);
        ck.history.val.push_back(val_loss);
        ck.history.test.push_back(test_loss);
        if (on_epoch) on_epoch(epoch, epoch_loss, val_loss, test_loss);

        const bool select_empty = cfg.train.select_on == "val" ? val_idx.empty() : test_idx.empty();
        const double select = select_empty ? epoch_loss : (cfg.train.select_on == "val" ? val_loss : test_loss);
        if (epoch == 1 || select < best_select) {
            best_select = select;
            ck.best_epoch = epoch;
            best_values.clear();
            for (const auto& p : model.params) best_values.push_back(p.value);
        }
    }
    ck.usage = model.codebook_usage;
    if (!best_values.empty())
        for (size_t i = 0; i < model.params.size(); ++i) model.params[i].value = best_values[i];
    return ck;
}

// ---- checkpoint io ----

std::string mrl_config_to_json(const MrlConfig& cfg);
MrlConfig mrl_config_from_json(const std::string& text);

template <typename T>
void save_mrl_checkpoint(const MrlCheckpoint<T>& ck, const std::filesystem::path& path) {
    io::Container c;
    c.put_string("__config__", mrl_config_to_json(ck.model.cfg));
    if (!ck.run_config_json.empty()) c.put_string("__run_config__", ck.run_config_json);
    c.put_string("__mrl_hash__", hash_hex(ck.run_config_mrl_hash));
    {
        std::vector<float> meta = {static_cast<float>(ck.best_epoch)};
        c.put_f32("__meta__/best_epoch", {1}, meta);
        auto to_f32 = [](const std::vector<double>& v) {
            return std::vector<float>(v.begin(), v.end());
        };
        c.put_f32("__meta__/history_train", {static_cast<uint32_t>(ck.history.train.size())}, to_f32(ck.history.train));
        c.put_f32("__meta__/history_val", {static_cast<uint32_t>(ck.history.val.size())}, to_f32(ck.history.val));
        c.put_f32("__meta__/history_test", {static_cast<uint32_t>(ck.history.test.size())}, to_f32(ck.history.test));
        std::vector<float> usage(ck.usage.begin(), ck.usage.end());
        c.put_f32("__meta__/usage", {static_cast<uint32_t>(usage.size())}, usage);
    }
    for (const auto& p : ck.model.params) {
        std::vector<uint32_t> dims;
        for (int d : p.shape) dims.push_back(static_cast<uint32_t>(d));
        std::vector<float> data(p.value.begin(), p.value.end());
        c.put_f32("param/" + p.name, std::move(dims), std::move(data));
    }
    c.save(path);
}

template <typename T>
MrlCheckpoint<T> load_mrl_checkpoint(const std::filesystem::path& path) {
    io::Container c = io::Container::load(path);
    MrlCheckpoint<T> ck;
    const MrlConfig cfg = mrl_config_from_json(c.get_string("__config__"));
    if (c.has("__run_config__")) ck.run_config_json = c.get_string("__run_config__");
    ck.run_config_mrl_hash = std::stoull(c.get_string("__mrl_hash__"), nullptr, 16);
    ck.model = VqVaeModel<T>::init(cfg, 0);
    for (auto& p : ck.model.params) {
        const auto& e = c.get("param/" + p.name);
        if (e.f32.size() != p.value.size())
            throw ValidationError("checkpoint: parameter '" + p.name + "' has wrong size");
        std::copy(e.f32.begin(), e.f32.end(), p.value.begin());
    }
    ck.best_epoch = static_cast<int>(c.get("__meta__/best_epoch").f32.at(0));
    auto hist = [&](const char* name) {
        const auto& e = c.get(name);
        return std::vector<double>(e.f32.begin(), e.f32.end());
    };
    ck.history.train = hist("__meta__/history_train");
    ck.history.val = hist("__meta__/history_val");
    ck.history.test = hist("__meta__/history_test");
    const auto& usage = c.get("__meta__/usage").f32;
    ck.usage.assign(usage.begin(), usage.end());
    return ck;
}

}  // namespace mmvq::mrl
