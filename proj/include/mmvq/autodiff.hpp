#pragma once

// Reverse-mode tape autodiff over dense tensors. Scalar type is a template
// parameter: float is the working precision, double is used by the
// gradient-check suites.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mmvq/errors.hpp"

namespace mmvq::ad {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// Plain tensor value, detached from any tape.
template <typename T>
struct TensorData {
    Shape shape;
    std::vector<T> data;

    TensorData() = default;
    TensorData(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel(shape) != static_cast<int64_t>(data.size()))
            throw ValidationError("TensorData: shape " + shape_str(shape) + " does not match data size " +
                                  std::to_string(data.size()));
    }
    static TensorData zeros(Shape s) {
        auto n = numel(s);
        return TensorData(std::move(s), std::vector<T>(static_cast<size_t>(n), T(0)));
    }
};

template <typename T>
class Tape;

template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    int id = -1;

    const Shape& shape() const;
    const std::vector<T>& value() const;
    const std::vector<T>& grad() const;  // zeros if nothing flowed in
};

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // allocated on first touch
    bool requires_grad = false;
    std::function<void(Tape<T>&, int self)> backward;  // empty for leaves
};

// The tape records primitives in execution order; backward replays it in
// exact reverse order, visiting each node once. Gradients accumulate (+=)
// until zero_grad, so repeated backward calls add up.
template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> leaf(Shape shape, std::vector<T> value, bool requires_grad) {
        if (numel(shape) != static_cast<int64_t>(value.size()))
            throw ValidationError("leaf: shape " + shape_str(shape) + " does not match data size " +
                                  std::to_string(value.size()));
        Node<T> n;
        n.shape = std::move(shape);
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
    }

    Var<T> constant(Shape shape, std::vector<T> value) { return leaf(std::move(shape), std::move(value), false); }

    Var<T> scalar_const(T v) { return constant({1}, {v}); }

    Var<T> emit(Shape shape, std::vector<T> value, bool requires_grad,
                std::function<void(Tape<T>&, int self)> backward) {
        Node<T> n;
        n.shape = std::move(shape);
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        if (requires_grad) n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
    }

    Node<T>& node(int id) { return nodes_[static_cast<size_t>(id)]; }
    const Node<T>& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
    int size() const { return static_cast<int>(nodes_.size()); }

    bool needs_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

    std::vector<T>& ensure_grad(int id) {
        Node<T>& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
        return n.grad;
    }

    void backward(Var<T> loss) {
        Node<T>& ln = node(loss.id);
        if (numel(ln.shape) != 1)
            throw ValidationError("backward: loss must be scalar, got shape " + shape_str(ln.shape));
        // Stash previously accumulated gradients so each backward call
        // propagates an independent unit seed; stashed values are added back
        // at the end, which makes repeated calls sum their gradients.
        std::vector<std::pair<int, std::vector<T>>> stash;
        for (int i = 0; i <= loss.id; ++i) {
            Node<T>& n = nodes_[static_cast<size_t>(i)];
            if (!n.grad.empty()) {
                stash.emplace_back(i, std::move(n.grad));
                n.grad.clear();
            }
        }
        ensure_grad(loss.id)[0] = T(1);
        for (int i = loss.id; i >= 0; --i) {
            Node<T>& n = nodes_[static_cast<size_t>(i)];
            if (n.requires_grad && n.backward && !n.grad.empty()) n.backward(*this, i);
        }
        for (auto& [id, g] : stash) {
            auto& ng = ensure_grad(id);
            for (size_t i = 0; i < g.size(); ++i) ng[i] += g[i];
        }
    }

    void zero_grad() {
        for (auto& n : nodes_) std::fill(n.grad.begin(), n.grad.end(), T(0));
    }

private:
    std::vector<Node<T>> nodes_;
};

template <typename T>
const Shape& Var<T>::shape() const { return tape->node(id).shape; }
template <typename T>
const std::vector<T>& Var<T>::value() const { return tape->node(id).value; }
template <typename T>
const std::vector<T>& Var<T>::grad() const { return tape->ensure_grad(id); }

namespace detail {

inline void check_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b)
        throw ValidationError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

inline void check_same_tape(const void* a, const void* b, const char* op) {
    if (a != b) throw ValidationError(std::string(op) + ": operands belong to different tapes");
}

// C[M,N] (+)= A[M,K] * B[K,N]
template <typename T>
void gemm_nn(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate) {
    if (!accumulate) std::fill(C, C + static_cast<size_t>(M) * N, T(0));
    for (int i = 0; i < M; ++i) {
        const T* a = A + static_cast<size_t>(i) * K;
        T* c = C + static_cast<size_t>(i) * N;
        for (int k = 0; k < K; ++k) {
            const T av = a[k];
            const T* b = B + static_cast<size_t>(k) * N;
            for (int j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// C[M,N] (+)= A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate) {
    for (int i = 0; i < M; ++i) {
        const T* a = A + static_cast<size_t>(i) * K;
        T* c = C + static_cast<size_t>(i) * N;
        for (int j = 0; j < N; ++j) {
            const T* b = B + static_cast<size_t>(j) * K;
            T acc = accumulate ? c[j] : T(0);
            for (int k = 0; k < K; ++k) acc += a[k] * b[k];
            c[j] = acc;
        }
    }
}

// C[M,N] (+)= A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate) {
    if (!accumulate) std::fill(C, C + static_cast<size_t>(M) * N, T(0));
    for (int k = 0; k < K; ++k) {
        const T* a = A + static_cast<size_t>(k) * M;
        const T* b = B + static_cast<size_t>(k) * N;
        for (int i = 0; i < M; ++i) {
            const T av = a[i];
            T* c = C + static_cast<size_t>(i) * N;
            for (int j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// Unfold one [C,H,W] image into [C*kH*kW, OH*OW] columns, zero outside.
template <typename T>
void im2col(const T* x, int C, int H, int W, int kH, int kW, int stride, int pad_h, int pad_w, int OH, int OW,
            T* cols) {
    for (int c = 0; c < C; ++c) {
        for (int u = 0; u < kH; ++u) {
            for (int v = 0; v < kW; ++v) {
                const int row = (c * kH + u) * kW + v;
                T* dst = cols + static_cast<size_t>(row) * OH * OW;
                for (int oi = 0; oi < OH; ++oi) {
                    const int i = oi * stride - pad_h + u;
                    if (i < 0 || i >= H) {
                        std::fill(dst + static_cast<size_t>(oi) * OW, dst + static_cast<size_t>(oi + 1) * OW, T(0));
                        continue;
                    }
                    const T* src = x + (static_cast<size_t>(c) * H + i) * W;
                    for (int oj = 0; oj < OW; ++oj) {
                        const int j = oj * stride - pad_w + v;
                        dst[static_cast<size_t>(oi) * OW + oj] = (j >= 0 && j < W) ? src[j] : T(0);
                    }
                }
            }
        }
    }
}

// Scatter-accumulate inverse of im2col: x[c,i,j] += cols[row, oi*OW+oj].
template <typename T>
void col2im(const T* cols, int C, int H, int W, int kH, int kW, int stride, int pad_h, int pad_w, int OH, int OW,
            T* x) {
    for (int c = 0; c < C; ++c) {
        for (int u = 0; u < kH; ++u) {
            for (int v = 0; v < kW; ++v) {
                const int row = (c * kH + u) * kW + v;
                const T* src = cols + static_cast<size_t>(row) * OH * OW;
                for (int oi = 0; oi < OH; ++oi) {
                    const int i = oi * stride - pad_h + u;
                    if (i < 0 || i >= H) continue;
                    T* dst = x + (static_cast<size_t>(c) * H + i) * W;
                    for (int oj = 0; oj < OW; ++oj) {
                        const int j = oj * stride - pad_w + v;
                        if (j >= 0 && j < W) dst[j] += src[static_cast<size_t>(oi) * OW + oj];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// ---- elementwise ----

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    detail::check_same_tape(a.tape, b.tape, "add");
    detail::check_same_shape(a.shape(), b.shape(), "add");
    const auto& av = a.value();
    const auto& bv = b.value();
    std::vector<T> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
    const bool rg = a.tape->needs_grad(a.id) || b.tape->needs_grad(b.id);
    const int aid = a.id, bid = b.id;
    return a.tape->emit(a.shape(), std::move(out), rg, [aid, bid](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        if (t.needs_grad(aid)) {
            auto& ga = t.ensure_grad(aid);
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (t.needs_grad(bid)) {
            auto& gb = t.ensure_grad(bid);
            for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    detail::check_same_tape(a.tape, b.tape, "sub");
    detail::check_same_shape(a.shape(), b.shape(), "sub");
    const auto& av = a.value();
    const auto& bv = b.value();
    std::vector<T> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
    const bool rg = a.tape->needs_grad(a.id) || b.tape->needs_grad(b.id);
    const int aid = a.id, bid = b.id;
    return a.tape->emit(a.shape(), std::move(out), rg, [aid, bid](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        if (t.needs_grad(aid)) {
            auto& ga = t.ensure_grad(aid);
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (t.needs_grad(bid)) {
            auto& gb = t.ensure_grad(bid);
            for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    detail::check_same_tape(a.tape, b.tape, "mul");
    detail::check_same_shape(a.shape(), b.shape(), "mul");
    const auto& av = a.value();
    const auto& bv = b.value();
    std::vector<T> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
    const bool rg = a.tape->needs_grad(a.id) || b.tape->needs_grad(b.id);
    const int aid = a.id, bid = b.id;
    return a.tape->emit(a.shape(), std::move(out), rg, [aid, bid](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        if (t.needs_grad(aid)) {
            auto& ga = t.ensure_grad(aid);
            const auto& bval = t.node(bid).value;
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bval[i];
        }
        if (t.needs_grad(bid)) {
            auto& gb = t.ensure_grad(bid);
            const auto& aval = t.node(aid).value;
            for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * aval[i];
        }
    });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
    const auto& av = a.value();
    std::vector<T> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * c;
    const int aid = a.id;
    return a.tape->emit(a.shape(), std::move(out), a.tape->needs_grad(aid), [aid, c](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        auto& ga = t.ensure_grad(aid);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
}

// relu gradient is 0 at exactly x == 0.
template <typename T>
Var<T> relu(Var<T> a) {
    const auto& av = a.value();
    std::vector<T> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
    const int aid = a.id;
    return a.tape->emit(a.shape(), std::move(out), a.tape->needs_grad(aid), [aid](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        const auto& xv = t.node(aid).value;
        auto& ga = t.ensure_grad(aid);
        for (size_t i = 0; i < g.size(); ++i)
            if (xv[i] > T(0)) ga[i] += g[i];
    });
}

template <typename T>
Var<T> square(Var<T> a) {
    const auto& av = a.value();
    std::vector<T> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * av[i];
    const int aid = a.id;
    return a.tape->emit(a.shape(), std::move(out), a.tape->needs_grad(aid), [aid](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        const auto& xv = t.node(aid).value;
        auto& ga = t.ensure_grad(aid);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += T(2) * xv[i] * g[i];
    });
}

template <typename T>
Var<T> vexp(Var<T> a) {
    const auto& av = a.value();
    std::vector<T> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = std::exp(av[i]);
    const int aid = a.id;
    return a.tape->emit(a.shape(), std::move(out), a.tape->needs_grad(aid), [aid](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        const auto& ov = t.node(self).value;
        auto& ga = t.ensure_grad(aid);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * ov[i];
    });
}

template <typename T>
Var<T> signed_sqrt(Var<T> a) {
    const auto& av = a.value();
    std::vector<T> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] >= T(0) ? std::sqrt(av[i]) : -std::sqrt(-av[i]);
    const int aid = a.id;
    return a.tape->emit(a.shape(), std::move(out), a.tape->needs_grad(aid), [aid](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        const auto& xv = t.node(aid).value;
        auto& ga = t.ensure_grad(aid);
        for (size_t i = 0; i < g.size(); ++i) {
            const T ax = std::abs(xv[i]);
            if (ax > T(0)) ga[i] += g[i] / (T(2) * std::sqrt(ax));
        }
    });
}

// Normalize each row of a [N,M] matrix to unit L2 norm; rows with zero norm
// pass through unchanged.
template <typename T>
Var<T> l2_normalize_rows(Var<T> a) {
    const auto& as = a.shape();
    if (as.size() != 2) throw ValidationError("l2_normalize_rows: expects rank 2, got " + shape_str(as));
    const int N = as[0], M = as[1];
    const auto& av = a.value();
    std::vector<T> out(av.size());
    std::vector<T> norms(static_cast<size_t>(N));
    for (int n = 0; n < N; ++n) {
        const T* row = av.data() + static_cast<size_t>(n) * M;
        T s = T(0);
        for (int m = 0; m < M; ++m) s += row[m] * row[m];
        const T norm = std::sqrt(s);
        norms[static_cast<size_t>(n)] = norm;
        T* orow = out.data() + static_cast<size_t>(n) * M;
        if (norm > T(0))
            for (int m = 0; m < M; ++m) orow[m] = row[m] / norm;
        else
            std::copy_n(row, M, orow);
    }
    const int aid = a.id;
    return a.tape->emit(as, std::move(out), a.tape->needs_grad(aid),
                        [aid, norms = std::move(norms), N, M](Tape<T>& t, int self) {
                            const auto& g = t.node(self).grad;
                            const auto& yv = t.node(self).value;
                            auto& ga = t.ensure_grad(aid);
                            for (int n = 0; n < N; ++n) {
                                const T norm = norms[static_cast<size_t>(n)];
                                const T* gr = g.data() + static_cast<size_t>(n) * M;
                                const T* yr = yv.data() + static_cast<size_t>(n) * M;
                                T* gar = ga.data() + static_cast<size_t>(n) * M;
                                if (norm <= T(0)) {
                                    for (int m = 0; m < M; ++m) gar[m] += gr[m];
                                    continue;
                                }
                                T dot = T(0);
                                for (int m = 0; m < M; ++m) dot += gr[m] * yr[m];
                                for (int m = 0; m < M; ++m) gar[m] += (gr[m] - dot * yr[m]) / norm;
                            }
                        });
}

// ---- reductions ----

template <typename T>
Var<T> sum(Var<T> a) {
    const auto& av = a.value();
    T s = std::accumulate(av.begin(), av.end(), T(0));
    const int aid = a.id;
    return a.tape->emit({1}, {s}, a.tape->needs_grad(aid), [aid](Tape<T>& t, int self) {
        const T g = t.node(self).grad[0];
        auto& ga = t.ensure_grad(aid);
        for (auto& v : ga) v += g;
    });
}

// ---- linear algebra ----

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    detail::check_same_tape(a.tape, b.tape, "matmul");
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (as.size() != 2 || bs.size() != 2)
        throw ValidationError("matmul: expects rank-2 operands, got " + shape_str(as) + " and " + shape_str(bs));
    if (as[1] != bs[0])
        throw ValidationError("matmul: inner dimensions differ, a " + shape_str(as) + " vs b " + shape_str(bs));
    const int M = as[0], K = as[1], N = bs[1];
    std::vector<T> out(static_cast<size_t>(M) * N);
    detail::gemm_nn(M, N, K, a.value().data(), b.value().data(), out.data(), false);
    const bool rg = a.tape->needs_grad(a.id) || b.tape->needs_grad(b.id);
    const int aid = a.id, bid = b.id;
    return a.tape->emit({M, N}, std::move(out), rg, [aid, bid, M, K, N](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        if (t.needs_grad(aid))
            detail::gemm_nt(M, K, N, g.data(), t.node(bid).value.data(), t.ensure_grad(aid).data(), true);
        if (t.needs_grad(bid))
            detail::gemm_tn(K, N, M, t.node(aid).value.data(), g.data(), t.ensure_grad(bid).data(), true);
    });
}

// a[N,M] + bias[M] broadcast over rows
template <typename T>
Var<T> add_rowvec(Var<T> a, Var<T> bias) {
    detail::check_same_tape(a.tape, bias.tape, "add_rowvec");
    const auto& as = a.shape();
    const auto& bs = bias.shape();
    if (as.size() != 2 || bs.size() != 1 || bs[0] != as[1])
        throw ValidationError("add_rowvec: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
    const int N = as[0], M = as[1];
    const auto& av = a.value();
    const auto& bv = bias.value();
    std::vector<T> out(av.size());
    for (int n = 0; n < N; ++n)
        for (int m = 0; m < M; ++m) out[static_cast<size_t>(n) * M + m] = av[static_cast<size_t>(n) * M + m] + bv[m];
    const bool rg = a.tape->needs_grad(a.id) || bias.tape->needs_grad(bias.id);
    const int aid = a.id, bid = bias.id;
    return a.tape->emit(as, std::move(out), rg, [aid, bid, N, M](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        if (t.needs_grad(aid)) {
            auto& ga = t.ensure_grad(aid);
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (t.needs_grad(bid)) {
            auto& gb = t.ensure_grad(bid);
            for (int n = 0; n < N; ++n)
                for (int m = 0; m < M; ++m) gb[m] += g[static_cast<size_t>(n) * M + m];
        }
    });
}

// out = x * w + bias, x[N,D], w[D,M], bias[M]
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> bias) {
    return add_rowvec(matmul(x, w), bias);
}

template <typename T>
Var<T> reshape(Var<T> a, Shape s) {
    if (numel(s) != numel(a.shape()))
        throw ValidationError("reshape: element count mismatch " + shape_str(a.shape()) + " -> " + shape_str(s));
    const int aid = a.id;
    return a.tape->emit(std::move(s), a.value(), a.tape->needs_grad(aid), [aid](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        auto& ga = t.ensure_grad(aid);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

// ---- convolutions ----

inline int conv_out_dim(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }
inline int conv_transpose_out_dim(int in, int k, int stride, int pad, int out_pad) {
    return (in - 1) * stride - 2 * pad + k + out_pad;
}

// x[N,C,H,W], k[F,C,kH,kW] -> [N,F,OH,OW], with independent height/width
// zero padding.
template <typename T>
Var<T> conv2d_hw(Var<T> x, Var<T> k, int stride, int pad_h, int pad_w) {
    detail::check_same_tape(x.tape, k.tape, "conv2d");
    const auto& xs = x.shape();
    const auto& ks = k.shape();
    if (xs.size() != 4) throw ValidationError("conv2d: input must be rank 4 [N,C,H,W], got " + shape_str(xs));
    if (ks.size() != 4) throw ValidationError("conv2d: kernel must be rank 4 [F,C,kH,kW], got " + shape_str(ks));
    if (stride < 1) throw ValidationError("conv2d: stride must be >= 1");
    if (pad_h < 0 || pad_w < 0) throw ValidationError("conv2d: padding must be >= 0");
    const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const int F = ks[0], kC = ks[1], kH = ks[2], kW = ks[3];
    if (kC != C)
        throw ValidationError("conv2d: channel axis mismatch, input C=" + std::to_string(C) +
                              " vs kernel C=" + std::to_string(kC));
    if (kH > H + 2 * pad_h)
        throw ValidationError("conv2d: kernel height " + std::to_string(kH) + " exceeds padded input height " +
                              std::to_string(H + 2 * pad_h));
    if (kW > W + 2 * pad_w)
        throw ValidationError("conv2d: kernel width " + std::to_string(kW) + " exceeds padded input width " +
                              std::to_string(W + 2 * pad_w));
    const int OH = conv_out_dim(H, kH, stride, pad_h);
    const int OW = conv_out_dim(W, kW, stride, pad_w);
    const int ck = C * kH * kW;
    std::vector<T> out(static_cast<size_t>(N) * F * OH * OW);
    std::vector<T> cols(static_cast<size_t>(ck) * OH * OW);
    for (int n = 0; n < N; ++n) {
        detail::im2col(x.value().data() + static_cast<size_t>(n) * C * H * W, C, H, W, kH, kW, stride, pad_h, pad_w,
                       OH, OW, cols.data());
        detail::gemm_nn(F, OH * OW, ck, k.value().data(), cols.data(),
                        out.data() + static_cast<size_t>(n) * F * OH * OW, false);
    }
    const bool rg = x.tape->needs_grad(x.id) || k.tape->needs_grad(k.id);
    const int xid = x.id, kid = k.id;
    return x.tape->emit({N, F, OH, OW}, std::move(out), rg,
                        [xid, kid, N, C, H, W, F, kH, kW, stride, pad_h, pad_w, OH, OW, ck](Tape<T>& t, int self) {
                            const auto& g = t.node(self).grad;
                            const bool gx = t.needs_grad(xid);
                            const bool gk = t.needs_grad(kid);
                            std::vector<T> cols(static_cast<size_t>(ck) * OH * OW);
                            for (int n = 0; n < N; ++n) {
                                const T* gn = g.data() + static_cast<size_t>(n) * F * OH * OW;
                                if (gk) {
                                    detail::im2col(t.node(xid).value.data() + static_cast<size_t>(n) * C * H * W, C, H,
                                                   W, kH, kW, stride, pad_h, pad_w, OH, OW, cols.data());
                                    detail::gemm_nt(F, ck, OH * OW, gn, cols.data(), t.ensure_grad(kid).data(), true);
                                }
                                if (gx) {
                                    detail::gemm_tn(ck, OH * OW, F, t.node(kid).value.data(), gn, cols.data(), false);
                                    detail::col2im(cols.data(), C, H, W, kH, kW, stride, pad_h, pad_w, OH, OW,
                                                   t.ensure_grad(xid).data() + static_cast<size_t>(n) * C * H * W);
                                }
                            }
                        });
}

// x[N,C,H,W], k[F,C,kH,kW] -> [N,F,OH,OW]
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> k, int stride, int pad) {
    return conv2d_hw(x, k, stride, pad, pad);
}

// x[N,Cin,H,W], k[Cin,Cout,kH,kW] -> [N,Cout,OH,OW];
// OH = (H-1)*stride - 2*pad + kH + out_pad_h. out_pad resolves the output
// size ambiguity when mirroring a strided conv over odd input sizes.
template <typename T>
Var<T> conv2d_transpose(Var<T> x, Var<T> k, int stride, int pad, int out_pad_h = 0, int out_pad_w = 0) {
    detail::check_same_tape(x.tape, k.tape, "conv2d_transpose");
    const auto& xs = x.shape();
    const auto& ks = k.shape();
    if (xs.size() != 4)
        throw ValidationError("conv2d_transpose: input must be rank 4 [N,C,H,W], got " + shape_str(xs));
    if (ks.size() != 4)
        throw ValidationError("conv2d_transpose: kernel must be rank 4 [Cin,Cout,kH,kW], got " + shape_str(ks));
    if (stride < 1) throw ValidationError("conv2d_transpose: stride must be >= 1");
    if (out_pad_h < 0 || out_pad_h >= stride || out_pad_w < 0 || out_pad_w >= stride)
        throw ValidationError("conv2d_transpose: output padding must be in [0, stride)");
    const int N = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
    const int kCin = ks[0], Cout = ks[1], kH = ks[2], kW = ks[3];
    if (kCin != Cin)
        throw ValidationError("conv2d_transpose: channel axis mismatch, input C=" + std::to_string(Cin) +
                              " vs kernel C=" + std::to_string(kCin));
    const int OH = conv_transpose_out_dim(H, kH, stride, pad, out_pad_h);
    const int OW = conv_transpose_out_dim(W, kW, stride, pad, out_pad_w);
    if (OH < 1 || OW < 1)
        throw ValidationError("conv2d_transpose: output size would be empty for input " + shape_str(xs));
    const int ck = Cout * kH * kW;
    std::vector<T> out(static_cast<size_t>(N) * Cout * OH * OW, T(0));
    std::vector<T> cols(static_cast<size_t>(ck) * H * W);
    for (int n = 0; n < N; ++n) {
        // cols = K^T * x_n, then scatter into the output image grid
        detail::gemm_tn(ck, H * W, Cin, k.value().data(), x.value().data() + static_cast<size_t>(n) * Cin * H * W,
                        cols.data(), false);
        detail::col2im(cols.data(), Cout, OH, OW, kH, kW, stride, pad, pad, H, W,
                       out.data() + static_cast<size_t>(n) * Cout * OH * OW);
    }
    const bool rg = x.tape->needs_grad(x.id) || k.tape->needs_grad(k.id);
    const int xid = x.id, kid = k.id;
    return x.tape->emit({N, Cout, OH, OW}, std::move(out), rg,
                        [xid, kid, N, Cin, H, W, Cout, kH, kW, stride, pad, OH, OW, ck](Tape<T>& t, int self) {
                            const auto& g = t.node(self).grad;
                            const bool gx = t.needs_grad(xid);
                            const bool gk = t.needs_grad(kid);
                            std::vector<T> gcols(static_cast<size_t>(ck) * H * W);
                            for (int n = 0; n < N; ++n) {
                                const T* gn = g.data() + static_cast<size_t>(n) * Cout * OH * OW;
                                detail::im2col(gn, Cout, OH, OW, kH, kW, stride, pad, pad, H, W, gcols.data());
                                if (gx)
                                    detail::gemm_nn(Cin, H * W, ck, t.node(kid).value.data(), gcols.data(),
                                                    t.ensure_grad(xid).data() + static_cast<size_t>(n) * Cin * H * W,
                                                    true);
                                if (gk)
                                    detail::gemm_nt(Cin, ck, H * W,
                                                    t.node(xid).value.data() + static_cast<size_t>(n) * Cin * H * W,
                                                    gcols.data(), t.ensure_grad(kid).data(), true);
                            }
                        });
}

// x[N,C,H,W] + bias[C] broadcast over N,H,W
template <typename T>
Var<T> add_channel_bias(Var<T> x, Var<T> bias) {
    detail::check_same_tape(x.tape, bias.tape, "add_channel_bias");
    const auto& xs = x.shape();
    const auto& bs = bias.shape();
    if (xs.size() != 4 || bs.size() != 1 || bs[0] != xs[1])
        throw ValidationError("add_channel_bias: incompatible shapes " + shape_str(xs) + " and " + shape_str(bs));
    const int N = xs[0], C = xs[1], HW = xs[2] * xs[3];
    const auto& xv = x.value();
    const auto& bv = bias.value();
    std::vector<T> out(xv.size());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const size_t base = (static_cast<size_t>(n) * C + c) * HW;
            for (int i = 0; i < HW; ++i) out[base + i] = xv[base + i] + bv[c];
        }
    const bool rg = x.tape->needs_grad(x.id) || bias.tape->needs_grad(bias.id);
    const int xid = x.id, bid = bias.id;
    return x.tape->emit(xs, std::move(out), rg, [xid, bid, N, C, HW](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        if (t.needs_grad(xid)) {
            auto& gx = t.ensure_grad(xid);
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (t.needs_grad(bid)) {
            auto& gb = t.ensure_grad(bid);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const size_t base = (static_cast<size_t>(n) * C + c) * HW;
                    T acc = T(0);
                    for (int i = 0; i < HW; ++i) acc += g[base + i];
                    gb[c] += acc;
                }
        }
    });
}

// ---- embedding / quantization support ----

// table[K,L], idx[N] -> [N,L]; backward scatters rows. Rows never selected
// receive no gradient.
template <typename T>
Var<T> embedding_select(Var<T> table, std::vector<int> idx) {
    const auto& ts = table.shape();
    if (ts.size() != 2) throw ValidationError("embedding_select: table must be rank 2, got " + shape_str(ts));
    const int K = ts[0], L = ts[1];
    for (int i : idx)
        if (i < 0 || i >= K)
            throw ValidationError("embedding_select: index " + std::to_string(i) + " out of range [0," +
                                  std::to_string(K) + ")");
    const int N = static_cast<int>(idx.size());
    const auto& tv = table.value();
    std::vector<T> out(static_cast<size_t>(N) * L);
    for (int n = 0; n < N; ++n)
        std::copy_n(tv.data() + static_cast<size_t>(idx[static_cast<size_t>(n)]) * L, L,
                    out.data() + static_cast<size_t>(n) * L);
    const int tid = table.id;
    return table.tape->emit({N, L}, std::move(out), table.tape->needs_grad(tid),
                            [tid, idx = std::move(idx), L](Tape<T>& t, int self) {
                                const auto& g = t.node(self).grad;
                                auto& gt = t.ensure_grad(tid);
                                for (size_t n = 0; n < idx.size(); ++n) {
                                    T* dst = gt.data() + static_cast<size_t>(idx[n]) * L;
                                    const T* src = g.data() + n * L;
                                    for (int l = 0; l < L; ++l) dst[l] += src[l];
                                }
                            });
}

// Forward takes the value of q; backward routes the full gradient to z and
// none to q (straight-through estimator).
template <typename T>
Var<T> straight_through(Var<T> z, Var<T> q) {
    detail::check_same_tape(z.tape, q.tape, "straight_through");
    detail::check_same_shape(z.shape(), q.shape(), "straight_through");
    const int zid = z.id;
    return z.tape->emit(z.shape(), q.value(), z.tape->needs_grad(zid), [zid](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        auto& gz = t.ensure_grad(zid);
        for (size_t i = 0; i < g.size(); ++i) gz[i] += g[i];
    });
}

// ---- bilinear block fusion core ----

// x[N,R*c], y[N,R*c], core[R,c,c,cp] flattened -> [N,R*cp]
// out[n, r*cp+k] = sum_{m,q} x[n,r*c+m] * y[n,r*c+q] * core[r,m,q,k]
template <typename T>
Var<T> block_bilinear(Var<T> x, Var<T> y, Var<T> core, int R, int c, int cp) {
    detail::check_same_tape(x.tape, y.tape, "block_bilinear");
    detail::check_same_tape(x.tape, core.tape, "block_bilinear");
    const auto& xs = x.shape();
    const auto& ys = y.shape();
    const auto& cs = core.shape();
    if (xs.size() != 2 || xs[1] != R * c)
        throw ValidationError("block_bilinear: x must be [N," + std::to_string(R * c) + "], got " + shape_str(xs));
    if (ys != xs) throw ValidationError("block_bilinear: y shape " + shape_str(ys) + " != x shape " + shape_str(xs));
    if (numel(cs) != static_cast<int64_t>(R) * c * c * cp)
        throw ValidationError("block_bilinear: core shape " + shape_str(cs) + " != R*c*c*cp");
    const int N = xs[0];
    const auto& xv = x.value();
    const auto& yv = y.value();
    const auto& cv = core.value();
    std::vector<T> out(static_cast<size_t>(N) * R * cp, T(0));
    for (int n = 0; n < N; ++n)
        for (int r = 0; r < R; ++r) {
            const T* xn = xv.data() + static_cast<size_t>(n) * R * c + static_cast<size_t>(r) * c;
            const T* yn = yv.data() + static_cast<size_t>(n) * R * c + static_cast<size_t>(r) * c;
            T* on = out.data() + static_cast<size_t>(n) * R * cp + static_cast<size_t>(r) * cp;
            for (int m = 0; m < c; ++m) {
                if (xn[m] == T(0)) continue;
                for (int q = 0; q < c; ++q) {
                    const T w = xn[m] * yn[q];
                    const T* cr = cv.data() + ((static_cast<size_t>(r) * c + m) * c + q) * cp;
                    for (int k = 0; k < cp; ++k) on[k] += w * cr[k];
                }
            }
        }
    const bool rg = x.tape->needs_grad(x.id) || y.tape->needs_grad(y.id) || core.tape->needs_grad(core.id);
    const int xid = x.id, yid = y.id, cid = core.id;
    return x.tape->emit({N, R * cp}, std::move(out), rg, [xid, yid, cid, N, R, c, cp](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        const auto& xv = t.node(xid).value;
        const auto& yv = t.node(yid).value;
        const auto& cv = t.node(cid).value;
        const bool gx = t.needs_grad(xid), gy = t.needs_grad(yid), gc = t.needs_grad(cid);
        for (int n = 0; n < N; ++n)
            for (int r = 0; r < R; ++r) {
                const T* xn = xv.data() + static_cast<size_t>(n) * R * c + static_cast<size_t>(r) * c;
                const T* yn = yv.data() + static_cast<size_t>(n) * R * c + static_cast<size_t>(r) * c;
                const T* gn = g.data() + static_cast<size_t>(n) * R * cp + static_cast<size_t>(r) * cp;
                for (int m = 0; m < c; ++m)
                    for (int q = 0; q < c; ++q) {
                        const T* cr = cv.data() + ((static_cast<size_t>(r) * c + m) * c + q) * cp;
                        T dot = T(0);
                        for (int k = 0; k < cp; ++k) dot += gn[k] * cr[k];
                        if (gx) t.ensure_grad(xid)[static_cast<size_t>(n) * R * c + static_cast<size_t>(r) * c + m] += dot * yn[q];
                        if (gy) t.ensure_grad(yid)[static_cast<size_t>(n) * R * c + static_cast<size_t>(r) * c + q] += dot * xn[m];
                        if (gc) {
                            const T w = xn[m] * yn[q];
                            T* gcr = t.ensure_grad(cid).data() + ((static_cast<size_t>(r) * c + m) * c + q) * cp;
                            for (int k = 0; k < cp; ++k) gcr[k] += w * gn[k];
                        }
                    }
            }
    });
}

// ---- pooling ----

// h[N,C,1,T] pooled with constant per-sample weights w[N,T]:
// out[n,c] = sum_t h[n,c,0,t] * w[n,t]
template <typename T>
Var<T> weighted_time_pool(Var<T> h, const std::vector<T>& w) {
    const auto& hs = h.shape();
    if (hs.size() != 4 || hs[2] != 1)
        throw ValidationError("weighted_time_pool: input must be [N,C,1,T], got " + shape_str(hs));
    const int N = hs[0], C = hs[1], Tlen = hs[3];
    if (static_cast<int64_t>(w.size()) != static_cast<int64_t>(N) * Tlen)
        throw ValidationError("weighted_time_pool: weight size mismatch");
    const auto& hv = h.value();
    std::vector<T> out(static_cast<size_t>(N) * C, T(0));
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* src = hv.data() + (static_cast<size_t>(n) * C + c) * Tlen;
            const T* wn = w.data() + static_cast<size_t>(n) * Tlen;
            T acc = T(0);
            for (int t = 0; t < Tlen; ++t) acc += src[t] * wn[t];
            out[static_cast<size_t>(n) * C + c] = acc;
        }
    const int hid = h.id;
    return h.tape->emit({N, C}, std::move(out), h.tape->needs_grad(hid),
                        [hid, w, N, C, Tlen](Tape<T>& t, int self) {
                            const auto& g = t.node(self).grad;
                            auto& gh = t.ensure_grad(hid);
                            for (int n = 0; n < N; ++n)
                                for (int c = 0; c < C; ++c) {
                                    const T gv = g[static_cast<size_t>(n) * C + c];
                                    T* dst = gh.data() + (static_cast<size_t>(n) * C + c) * Tlen;
                                    const T* wn = w.data() + static_cast<size_t>(n) * Tlen;
                                    for (int tt = 0; tt < Tlen; ++tt) dst[tt] += gv * wn[tt];
                                }
                        });
}

// Multiply each time step by a constant per-sample weight: x[N,C,1,T] * w[N,T].
template <typename T>
Var<T> scale_time_steps(Var<T> x, const std::vector<T>& w) {
    const auto& xs = x.shape();
    if (xs.size() != 4 || xs[2] != 1)
        throw ValidationError("scale_time_steps: input must be [N,C,1,T], got " + shape_str(xs));
    const int N = xs[0], C = xs[1], Tlen = xs[3];
    if (static_cast<int64_t>(w.size()) != static_cast<int64_t>(N) * Tlen)
        throw ValidationError("scale_time_steps: weight size mismatch");
    const auto& xv = x.value();
    std::vector<T> out(xv.size());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const size_t base = (static_cast<size_t>(n) * C + c) * Tlen;
            const T* wn = w.data() + static_cast<size_t>(n) * Tlen;
            for (int t = 0; t < Tlen; ++t) out[base + t] = xv[base + t] * wn[t];
        }
    const int xid = x.id;
    return x.tape->emit(xs, std::move(out), x.tape->needs_grad(xid), [xid, w, N, C, Tlen](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        auto& gx = t.ensure_grad(xid);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const size_t base = (static_cast<size_t>(n) * C + c) * Tlen;
                const T* wn = w.data() + static_cast<size_t>(n) * Tlen;
                for (int tt = 0; tt < Tlen; ++tt) gx[base + tt] += g[base + tt] * wn[tt];
            }
    });
}

// ---- losses ----

// Mean over all elements of (pred - target)^2.
template <typename T>
Var<T> mse(Var<T> pred, Var<T> target) {
    detail::check_same_tape(pred.tape, target.tape, "mse");
    detail::check_same_shape(pred.shape(), target.shape(), "mse");
    const auto& pv = pred.value();
    const auto& tv = target.value();
    const T inv_n = T(1) / static_cast<T>(pv.size());
    T acc = T(0);
    for (size_t i = 0; i < pv.size(); ++i) {
        const T d = pv[i] - tv[i];
        acc += d * d;
    }
    acc *= inv_n;
    const bool rg = pred.tape->needs_grad(pred.id) || target.tape->needs_grad(target.id);
    const int pid = pred.id, tid = target.id;
    return pred.tape->emit({1}, {acc}, rg, [pid, tid, inv_n](Tape<T>& t, int self) {
        const T g = t.node(self).grad[0];
        const auto& pv = t.node(pid).value;
        const auto& tv = t.node(tid).value;
        if (t.needs_grad(pid)) {
            auto& gp = t.ensure_grad(pid);
            for (size_t i = 0; i < pv.size(); ++i) gp[i] += g * T(2) * (pv[i] - tv[i]) * inv_n;
        }
        if (t.needs_grad(tid)) {
            auto& gt = t.ensure_grad(tid);
            for (size_t i = 0; i < pv.size(); ++i) gt[i] -= g * T(2) * (pv[i] - tv[i]) * inv_n;
        }
    });
}

// Mean over the batch of -log softmax(logits)[label]. logits[N,C].
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, const std::vector<int>& labels) {
    const auto& ls = logits.shape();
    if (ls.size() != 2) throw ValidationError("softmax_cross_entropy: logits must be [N,C], got " + shape_str(ls));
    const int N = ls[0], C = ls[1];
    if (static_cast<int>(labels.size()) != N)
        throw ValidationError("softmax_cross_entropy: label count " + std::to_string(labels.size()) +
                              " != batch size " + std::to_string(N));
    for (int y : labels)
        if (y < 0 || y >= C)
            throw ValidationError("softmax_cross_entropy: class index " + std::to_string(y) + " out of range [0," +
                                  std::to_string(C) + ")");
    const auto& lv = logits.value();
    std::vector<T> probs(lv.size());
    T loss = T(0);
    for (int n = 0; n < N; ++n) {
        const T* row = lv.data() + static_cast<size_t>(n) * C;
        T mx = row[0];
        for (int c = 1; c < C; ++c) mx = std::max(mx, row[c]);
        T z = T(0);
        for (int c = 0; c < C; ++c) z += std::exp(row[c] - mx);
        const T logz = std::log(z) + mx;
        for (int c = 0; c < C; ++c) probs[static_cast<size_t>(n) * C + c] = std::exp(row[c] - logz);
        loss += logz - row[labels[static_cast<size_t>(n)]];
    }
    loss /= static_cast<T>(N);
    const int lid = logits.id;
    return logits.tape->emit({1}, {loss}, logits.tape->needs_grad(lid),
                             [lid, labels, probs = std::move(probs), N, C](Tape<T>& t, int self) {
                                 const T g = t.node(self).grad[0];
                                 auto& gl = t.ensure_grad(lid);
                                 const T inv_n = T(1) / static_cast<T>(N);
                                 for (int n = 0; n < N; ++n)
                                     for (int c = 0; c < C; ++c) {
                                         T d = probs[static_cast<size_t>(n) * C + c];
                                         if (c == labels[static_cast<size_t>(n)]) d -= T(1);
                                         gl[static_cast<size_t>(n) * C + c] += g * d * inv_n;
                                     }
                             });
}

}  // namespace mmvq::ad
