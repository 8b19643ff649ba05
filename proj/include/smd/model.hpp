// Copyright 2026 The SMD Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "smd/binary_io.hpp"
#include "smd/defects.hpp"
#include "smd/errors.hpp"
#include "smd/rng.hpp"

namespace smd {

enum class ReadoutKind { Mlp, ResBlock };

inline const char *to_string(ReadoutKind k) { return k == ReadoutKind::Mlp ? "mlp" : "resblock"; }

inline ReadoutKind parse_readout_kind(const std::string &s) {
    if (s == "mlp") {
        return ReadoutKind::Mlp;
    }
    if (s == "resblock") {
        return ReadoutKind::ResBlock;
    }
    throw DomainError("unknown readout kind '" + s + "'");
}

/// Architecture hyperparameters. Field names double as the JSON keys.
struct ModelConfig {
    int d_model = 64;
    int L = 2;
    int d_state = 16;
    int d_conv = 4;
    int expand = 2;
    int w_gate = 2;
    ReadoutKind readout = ReadoutKind::Mlp;
    int d_read = 0;  // 0 = d_model
    int L_res = 2;
    int heads = 2;
    double dropout = 0.0;
    double pool_epsilon = 1e-6;
    int k_max = 64;

    int d_inner() const { return expand * d_model; }
    int dt_rank() const { return (d_model + 15) / 16; }
    int gate_width() const { return w_gate * d_model; }
    int readout_width() const { return d_read > 0 ? d_read : d_model; }

    void validate() const {
        for (int v : {d_model, L, d_state, d_conv, expand, w_gate, L_res, k_max}) {
            if (v < 1) {
                throw DomainError("model dimensions must be >= 1");
            }
        }
        if (d_read < 0) {
            throw DomainError("d_read must be >= 0");
        }
        if (heads != 1 && heads != 2) {
            throw DomainError("heads must be 1 or 2");
        }
        if (!(dropout >= 0.0 && dropout < 1.0)) {
            throw DomainError("dropout must lie in [0, 1)");
        }
        if (!(pool_epsilon > 0.0)) {
            throw DomainError("pool_epsilon must be > 0");
        }
    }

    bool operator==(const ModelConfig &) const = default;
};

inline void to_json(nlohmann::json &j, const ModelConfig &c) {
    j = nlohmann::json{{"d_model", c.d_model}, {"L", c.L},           {"d_state", c.d_state}, {"d_conv", c.d_conv},
                       {"expand", c.expand},   {"w_gate", c.w_gate}, {"readout", to_string(c.readout)},
                       {"d_read", c.d_read},   {"L_res", c.L_res},   {"heads", c.heads},     {"dropout", c.dropout},
                       {"pool_epsilon", c.pool_epsilon},             {"k_max", c.k_max}};
}

inline void from_json(const nlohmann::json &j, ModelConfig &c) {
    ModelConfig d;
    c.d_model = j.value("d_model", d.d_model);
    c.L = j.value("L", d.L);
    c.d_state = j.value("d_state", d.d_state);
    c.d_conv = j.value("d_conv", d.d_conv);
    c.expand = j.value("expand", d.expand);
    c.w_gate = j.value("w_gate", d.w_gate);
    c.readout = parse_readout_kind(j.value("readout", std::string(to_string(d.readout))));
    c.d_read = j.value("d_read", d.d_read);
    c.L_res = j.value("L_res", d.L_res);
    c.heads = j.value("heads", d.heads);
    c.dropout = j.value("dropout", d.dropout);
    c.pool_epsilon = j.value("pool_epsilon", d.pool_epsilon);
    c.k_max = j.value("k_max", d.k_max);
    c.validate();
}

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Every tensor is a row-major matrix; 1-D tensors are stored as 1 x n.
template <class T>
struct LayerParams {
    Mat<T> rms1;     // 1 x D
    Mat<T> w_in;     // 2E x D, rows [0,E) feed the scan, [E,2E) the output gate
    Mat<T> conv_w;   // E x K, column K-1 multiplies the current token
    Mat<T> conv_b;   // 1 x E
    Mat<T> w_x;      // (R + 2S) x E, rows: dt low-rank | B | C
    Mat<T> w_dt;     // E x R
    Mat<T> b_dt;     // 1 x E
    Mat<T> a_log;    // E x S, A = -exp(a_log)
    Mat<T> d_skip;   // 1 x E
    Mat<T> w_out;    // D x E
    Mat<T> rms2;     // 1 x D
    Mat<T> w_a;      // G x D
    Mat<T> w_b;      // G x D
    Mat<T> w_c;      // D x G
};

template <class T>
struct ResBlockParams {
    Mat<T> ln;  // 1 x Dr
    Mat<T> w1;  // Dr x Dr
    Mat<T> b1;  // 1 x Dr
    Mat<T> w2;  // Dr x Dr
    Mat<T> b2;  // 1 x Dr
};

template <class T>
struct MlpHeadParams {
    Mat<T> w1;  // Dr x D
    Mat<T> b1;  // 1 x Dr
    Mat<T> w2;  // 1 x Dr
    Mat<T> b2;  // 1 x 1
};

/// All trainable tensors. Gradients and optimizer moments reuse this type.
template <class T>
struct Parameters {
    ModelConfig config;
    // Embedder: LN(W2 GELU(LN(W1 f + b1)) + b2), LayerNorm with gain only.
    Mat<T> emb_w1;  // D x 13
    Mat<T> emb_b1;
    Mat<T> emb_ln1;
    Mat<T> emb_w2;  // D x D
    Mat<T> emb_b2;
    Mat<T> emb_ln2;
    std::vector<LayerParams<T>> layers;
    // mlp readout: one hidden layer per head.
    std::vector<MlpHeadParams<T>> mlp_heads;
    // resblock readout: input projection, L_res pre-norm residual blocks, linear head.
    Mat<T> res_in_w;  // Dr x D
    Mat<T> res_in_b;
    std::vector<ResBlockParams<T>> res_blocks;
    Mat<T> res_out_w;  // heads x Dr
    Mat<T> res_out_b;  // 1 x heads
};

struct TensorInfo {
    std::string name;
    std::vector<size_t> shape;
};

namespace detail {

// Visits every tensor in a fixed order with its name and logical shape.
template <class P, class F>
void visit_tensors(P &p, F &&f) {
    const ModelConfig &c = p.config;
    const size_t D = static_cast<size_t>(c.d_model);
    const size_t E = static_cast<size_t>(c.d_inner());
    const size_t S = static_cast<size_t>(c.d_state);
    const size_t K = static_cast<size_t>(c.d_conv);
    const size_t R = static_cast<size_t>(c.dt_rank());
    const size_t G = static_cast<size_t>(c.gate_width());
    const size_t Dr = static_cast<size_t>(c.readout_width());
    const size_t H = static_cast<size_t>(c.heads);
    using V = std::vector<size_t>;
    f("embed.w1", V{D, kNumFeatures}, p.emb_w1);
    f("embed.b1", V{D}, p.emb_b1);
    f("embed.ln1", V{D}, p.emb_ln1);
    f("embed.w2", V{D, D}, p.emb_w2);
    f("embed.b2", V{D}, p.emb_b2);
    f("embed.ln2", V{D}, p.emb_ln2);
    for (size_t l = 0; l < p.layers.size(); ++l) {
        auto &L = p.layers[l];
        const std::string pre = "layer" + std::to_string(l) + ".";
        f(pre + "rms1", V{D}, L.rms1);
        f(pre + "w_in", V{2 * E, D}, L.w_in);
        f(pre + "conv_w", V{E, K}, L.conv_w);
        f(pre + "conv_b", V{E}, L.conv_b);
        f(pre + "w_x", V{R + 2 * S, E}, L.w_x);
        f(pre + "w_dt", V{E, R}, L.w_dt);
        f(pre + "b_dt", V{E}, L.b_dt);
        f(pre + "a_log", V{E, S}, L.a_log);
        f(pre + "d_skip", V{E}, L.d_skip);
        f(pre + "w_out", V{D, E}, L.w_out);
        f(pre + "rms2", V{D}, L.rms2);
        f(pre + "w_a", V{G, D}, L.w_a);
        f(pre + "w_b", V{G, D}, L.w_b);
        f(pre + "w_c", V{D, G}, L.w_c);
    }
    if (c.readout == ReadoutKind::Mlp) {
        for (size_t h = 0; h < p.mlp_heads.size(); ++h) {
            auto &m = p.mlp_heads[h];
            const std::string pre = "readout.head" + std::to_string(h) + ".";
            f(pre + "w1", V{Dr, D}, m.w1);
            f(pre + "b1", V{Dr}, m.b1);
            f(pre + "w2", V{1, Dr}, m.w2);
            f(pre + "b2", V{1}, m.b2);
        }
    } else {
        f("readout.in_w", V{Dr, D}, p.res_in_w);
        f("readout.in_b", V{Dr}, p.res_in_b);
        for (size_t b = 0; b < p.res_blocks.size(); ++b) {
            auto &blk = p.res_blocks[b];
            const std::string pre = "readout.block" + std::to_string(b) + ".";
            f(pre + "ln", V{Dr}, blk.ln);
            f(pre + "w1", V{Dr, Dr}, blk.w1);
            f(pre + "b1", V{Dr}, blk.b1);
            f(pre + "w2", V{Dr, Dr}, blk.w2);
            f(pre + "b2", V{Dr}, blk.b2);
        }
        f("readout.out_w", V{H, Dr}, p.res_out_w);
        f("readout.out_b", V{H}, p.res_out_b);
    }
}

inline std::pair<Eigen::Index, Eigen::Index> storage_dims(const std::vector<size_t> &shape) {
    if (shape.size() == 1) {
        return {1, static_cast<Eigen::Index>(shape[0])};
    }
    return {static_cast<Eigen::Index>(shape[0]), static_cast<Eigen::Index>(shape[1])};
}

}  // namespace detail

/// Parameters with every tensor allocated to its configured shape and zeroed.
template <class T>
Parameters<T> zero_params(const ModelConfig &config) {
    config.validate();
    Parameters<T> p;
    p.config = config;
    p.layers.resize(static_cast<size_t>(config.L));
    if (config.readout == ReadoutKind::Mlp) {
        p.mlp_heads.resize(static_cast<size_t>(config.heads));
    } else {
        p.res_blocks.resize(static_cast<size_t>(config.L_res));
    }
    detail::visit_tensors(p, [](const std::string &, const std::vector<size_t> &shape, Mat<T> &m) {
        const auto [r, c] = detail::storage_dims(shape);
        m = Mat<T>::Zero(r, c);
    });
    return p;
}

template <class T>
std::vector<TensorInfo> tensor_manifest(const Parameters<T> &p) {
    std::vector<TensorInfo> out;
    detail::visit_tensors(p, [&](const std::string &name, const std::vector<size_t> &shape, const Mat<T> &) {
        out.push_back({name, shape});
    });
    return out;
}

template <class T>
size_t parameter_count(const Parameters<T> &p) {
    size_t n = 0;
    detail::visit_tensors(p, [&](const std::string &, const std::vector<size_t> &, const Mat<T> &m) {
        n += static_cast<size_t>(m.size());
    });
    return n;
}

/// Closed-form parameter count for a config.
inline size_t parameter_count(const ModelConfig &c) {
    const size_t D = static_cast<size_t>(c.d_model);
    const size_t E = static_cast<size_t>(c.d_inner());
    const size_t S = static_cast<size_t>(c.d_state);
    const size_t K = static_cast<size_t>(c.d_conv);
    const size_t R = static_cast<size_t>(c.dt_rank());
    const size_t G = static_cast<size_t>(c.gate_width());
    const size_t Dr = static_cast<size_t>(c.readout_width());
    const size_t H = static_cast<size_t>(c.heads);
    const size_t embed = D * kNumFeatures + D * D + 4 * D;
    const size_t layer = 2 * D + 2 * E * D + E * K + E + (R + 2 * S) * E + E * R + E + E * S + E + D * E + 3 * G * D;
    const size_t readout = c.readout == ReadoutKind::Mlp
                               ? H * (Dr * D + 2 * Dr + 1)
                               : Dr * D + Dr + static_cast<size_t>(c.L_res) * (2 * Dr * Dr + 3 * Dr) + H * Dr + H;
    return embed + static_cast<size_t>(c.L) * layer + readout;
}

template <class To, class From>
Parameters<To> cast_params(const Parameters<From> &src) {
    Parameters<To> dst = zero_params<To>(src.config);
    std::vector<const Mat<From> *> from;
    detail::visit_tensors(src, [&](const std::string &, const std::vector<size_t> &, const Mat<From> &m) {
        from.push_back(&m);
    });
    size_t i = 0;
    detail::visit_tensors(dst, [&](const std::string &, const std::vector<size_t> &, Mat<To> &m) {
        m = from[i++]->template cast<To>();
    });
    return dst;
}

/// Deterministic initialization. Weights are uniform in +-1/sqrt(fan_in), biases
/// zero, norm gains one. The dt bias is the inverse softplus of a log-uniform
/// draw in [1e-3, 1e-1]; a_log(c, n) = log(n + 1) so A = -(1, 2, ..., S) in
/// every channel; the skip D is one.
template <class T>
Parameters<T> init_params(const ModelConfig &config, uint64_t seed) {
    Parameters<T> p = zero_params<T>(config);
    Rng rng(seed);
    detail::visit_tensors(p, [&](const std::string &name, const std::vector<size_t> &shape, Mat<T> &m) {
        const auto ends_with = [&](const char *suffix) {
            const std::string s(suffix);
            return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
        };
        if (ends_with("ln1") || ends_with("ln2") || ends_with(".ln") || ends_with("rms1") || ends_with("rms2") ||
            ends_with("d_skip")) {
            m.setOnes();
        } else if (ends_with("b_dt")) {
            for (Eigen::Index i = 0; i < m.size(); ++i) {
                const double u = uniform01(rng);
                const double dt = std::exp(std::log(1e-3) + u * (std::log(1e-1) - std::log(1e-3)));
                m.data()[i] = static_cast<T>(dt + std::log(-std::expm1(-dt)));
            }
        } else if (ends_with("a_log")) {
            for (Eigen::Index r = 0; r < m.rows(); ++r) {
                for (Eigen::Index c = 0; c < m.cols(); ++c) {
                    m(r, c) = static_cast<T>(std::log(static_cast<double>(c + 1)));
                }
            }
        } else if (shape.size() == 2) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(shape[1]));
            for (Eigen::Index i = 0; i < m.size(); ++i) {
                m.data()[i] = static_cast<T>((2.0 * uniform01(rng) - 1.0) * bound);
            }
        }
    });
    return p;
}

namespace detail {

template <class T>
T sigmoid(T x) {
    return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}
template <class T>
T softplus(T x) {
    return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}
template <class T>
T silu(T x) {
    return x * sigmoid(x);
}
template <class T>
T silu_grad(T x) {
    const T s = sigmoid(x);
    return s * (T(1) + x * (T(1) - s));
}
template <class T>
T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(0.70710678118654752440)));
}
template <class T>
T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.70710678118654752440)));
    const T pdf = std::exp(T(-0.5) * x * x) * T(0.39894228040143267794);
    return cdf + x * pdf;
}

inline constexpr double kNormEps = 1e-5;

template <class T>
struct LayerNormCache {
    Mat<T> xhat;
    std::vector<T> inv_sigma;
};

// Row-wise LayerNorm with gain only.
template <class T>
Mat<T> layer_norm(const Mat<T> &x, const Mat<T> &gain, LayerNormCache<T> *cache) {
    Mat<T> y(x.rows(), x.cols());
    if (cache) {
        cache->xhat.resize(x.rows(), x.cols());
        cache->inv_sigma.resize(static_cast<size_t>(x.rows()));
    }
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const T mu = x.row(r).mean();
        const T var = (x.row(r).array() - mu).square().mean();
        const T inv = T(1) / std::sqrt(var + T(kNormEps));
        for (Eigen::Index c = 0; c < x.cols(); ++c) {
            const T xh = (x(r, c) - mu) * inv;
            y(r, c) = xh * gain(0, c);
            if (cache) {
                cache->xhat(r, c) = xh;
            }
        }
        if (cache) {
            cache->inv_sigma[static_cast<size_t>(r)] = inv;
        }
    }
    return y;
}

template <class T>
struct RmsNormCache {
    Mat<T> x;
    std::vector<T> inv_rms;
};

template <class T>
Mat<T> rms_norm(const Mat<T> &x, const Mat<T> &gain, RmsNormCache<T> *cache) {
    Mat<T> y(x.rows(), x.cols());
    if (cache) {
        cache->x = x;
        cache->inv_rms.resize(static_cast<size_t>(x.rows()));
    }
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const T inv = T(1) / std::sqrt(x.row(r).squaredNorm() / static_cast<T>(x.cols()) + T(kNormEps));
        y.row(r) = (x.row(r).array() * inv * gain.row(0).array()).matrix();
        if (cache) {
            cache->inv_rms[static_cast<size_t>(r)] = inv;
        }
    }
    return y;
}

// d/dx of (exp(x) - 1) / x, stable near zero.
inline double expm1_over_x_grad(double x) {
    if (std::abs(x) < 1e-3) {
        return 0.5 + x / 3.0 + x * x / 8.0 + x * x * x / 30.0;
    }
    return (x * std::exp(x) - std::expm1(x)) / (x * x);
}

}  // namespace detail

/// Real tokens of a batch packed back to back. Row b owns tokens
/// [offsets[b], offsets[b+1]).
template <class T>
struct PackedTokens {
    Mat<T> features;  // N x 13
    std::vector<size_t> offsets;
    size_t rows() const { return offsets.size() - 1; }
    size_t length(size_t b) const { return offsets[b + 1] - offsets[b]; }
};

/// Packs the real tokens of every row. Masks must be prefixes (Batch::validate).
template <class T>
PackedTokens<T> pack_tokens(const Batch &batch) {
    batch.validate();
    PackedTokens<T> p;
    p.offsets.assign(batch.batch_size + 1, 0);
    for (size_t b = 0; b < batch.batch_size; ++b) {
        p.offsets[b + 1] = p.offsets[b] + batch.k[b];
    }
    p.features.resize(static_cast<Eigen::Index>(p.offsets.back()), kNumFeatures);
    for (size_t b = 0; b < batch.batch_size; ++b) {
        const float *row = batch.row_features(b);
        for (size_t j = 0; j < batch.k[b]; ++j) {
            for (int f = 0; f < kNumFeatures; ++f) {
                p.features(static_cast<Eigen::Index>(p.offsets[b] + j), f) = static_cast<T>(row[j * kNumFeatures + static_cast<size_t>(f)]);
            }
        }
    }
    return p;
}

/// Activations kept by a training forward pass for the backward pass.
template <class T>
struct ForwardCache {
    struct Embed {
        Mat<T> f;
        Mat<T> pre1;
        detail::LayerNormCache<T> ln1;
        Mat<T> n1;
        Mat<T> act;
        detail::LayerNormCache<T> ln2;
    } embed;
    struct Layer {
        detail::RmsNormCache<T> rms1;
        Mat<T> xn1;
        Mat<T> xi;      // scan input before the conv
        Mat<T> zg;      // output-gate input
        Mat<T> cv;      // conv output
        Mat<T> u;       // SiLU(cv)
        Mat<T> q;       // [dt low-rank | B | C]
        Mat<T> dt_pre;  // before softplus
        Mat<T> delta;
        std::vector<double> h;  // N x E x S scan states
        Mat<T> y;               // scan output before the gate
        Mat<T> g;               // gated scan output
        Mat<T> drop1;           // dropout scale per element, empty if off
        detail::RmsNormCache<T> rms2;
        Mat<T> xn2;
        Mat<T> a1;
        Mat<T> b1;
        Mat<T> m;
        Mat<T> drop2;
    };
    std::vector<Layer> layers;
    Mat<T> h_final;  // N x D
    Mat<T> pooled;   // B x D
    std::vector<Mat<T>> mlp_pre;  // per head: B x Dr
    Mat<T> res_r0;
    std::vector<Mat<T>> res_in;  // per block: residual input
    std::vector<detail::LayerNormCache<T>> res_ln;
    std::vector<Mat<T>> res_n;
    std::vector<Mat<T>> res_pre;
    Mat<T> res_final;
    PackedTokens<T> tokens;
};

/// Per-token embedder over packed tokens (N x 13 -> N x D).
template <class T>
Mat<T> embed_tokens(const Mat<T> &f, const Parameters<T> &p, typename ForwardCache<T>::Embed *cache = nullptr) {
    if (f.cols() != kNumFeatures) {
        throw DimensionError("embed expects " + std::to_string(kNumFeatures) + " features, got " +
                             std::to_string(f.cols()));
    }
    Mat<T> pre1 = f * p.emb_w1.transpose();
    pre1.rowwise() += p.emb_b1.row(0);
    Mat<T> n1 = detail::layer_norm(pre1, p.emb_ln1, cache ? &cache->ln1 : nullptr);
    Mat<T> act = n1.unaryExpr([](T v) { return detail::gelu(v); });
    Mat<T> pre2 = act * p.emb_w2.transpose();
    pre2.rowwise() += p.emb_b2.row(0);
    Mat<T> out = detail::layer_norm(pre2, p.emb_ln2, cache ? &cache->ln2 : nullptr);
    if (cache) {
        cache->f = f;
        cache->pre1 = std::move(pre1);
        cache->n1 = std::move(n1);
        cache->act = std::move(act);
    }
    return out;
}

/// The selective state-space block on packed sequences (N x D -> N x D):
/// in-projection, depthwise causal conv, SiLU, input-dependent dt/B/C, exact
/// zero-order-hold discretization of the diagonal A, the recurrence
/// h_t = exp(dt A) h_{t-1} + (exp(dt A) - 1)/A * B_t u_t, readout
/// y_t = C_t . h_t + D u_t, SiLU gate and out-projection. The recurrence state
/// is accumulated in double.
template <class T>
Mat<T> mamba_block(const Mat<T> &x, const LayerParams<T> &lp, const ModelConfig &c, std::span<const size_t> offsets,
                   typename ForwardCache<T>::Layer *cache = nullptr) {
    const Eigen::Index N = x.rows();
    const Eigen::Index E = c.d_inner();
    const Eigen::Index S = c.d_state;
    const Eigen::Index K = c.d_conv;
    const Eigen::Index R = c.dt_rank();
    if (x.cols() != c.d_model) {
        throw DimensionError("mamba block expects width " + std::to_string(c.d_model));
    }
    const Mat<T> proj = x * lp.w_in.transpose();
    Mat<T> xi = proj.leftCols(E);
    Mat<T> zg = proj.rightCols(E);

    Mat<T> cv(N, E);
    for (size_t b = 0; b + 1 < offsets.size(); ++b) {
        const Eigen::Index o = static_cast<Eigen::Index>(offsets[b]);
        const Eigen::Index len = static_cast<Eigen::Index>(offsets[b + 1] - offsets[b]);
        for (Eigen::Index t = 0; t < len; ++t) {
            for (Eigen::Index ch = 0; ch < E; ++ch) {
                T acc = lp.conv_b(0, ch);
                for (Eigen::Index j = 0; j < K; ++j) {
                    const Eigen::Index src = t - (K - 1) + j;
                    if (src >= 0) {
                        acc += lp.conv_w(ch, j) * xi(o + src, ch);
                    }
                }
                cv(o + t, ch) = acc;
            }
        }
    }
    Mat<T> u = cv.unaryExpr([](T v) { return detail::silu(v); });
    Mat<T> q = u * lp.w_x.transpose();
    Mat<T> dt_pre = q.leftCols(R) * lp.w_dt.transpose();
    dt_pre.rowwise() += lp.b_dt.row(0);
    Mat<T> delta = dt_pre.unaryExpr([](T v) { return detail::softplus(v); });

    std::vector<double> A(static_cast<size_t>(E * S));
    for (Eigen::Index ch = 0; ch < E; ++ch) {
        for (Eigen::Index n = 0; n < S; ++n) {
            A[static_cast<size_t>(ch * S + n)] = -std::exp(static_cast<double>(lp.a_log(ch, n)));
        }
    }
    Mat<T> y(N, E);
    if (cache) {
        cache->h.assign(static_cast<size_t>(N * E * S), 0.0);
    }
    std::vector<double> h(static_cast<size_t>(E * S));
    for (size_t b = 0; b + 1 < offsets.size(); ++b) {
        std::fill(h.begin(), h.end(), 0.0);
        for (size_t tok = offsets[b]; tok < offsets[b + 1]; ++tok) {
            const Eigen::Index t = static_cast<Eigen::Index>(tok);
            for (Eigen::Index ch = 0; ch < E; ++ch) {
                const double dt = static_cast<double>(delta(t, ch));
                const double ut = static_cast<double>(u(t, ch));
                double acc = 0.0;
                double *hc = h.data() + ch * S;
                const double *ac = A.data() + ch * S;
                for (Eigen::Index n = 0; n < S; ++n) {
                    // abar = exp(dt A), bbar = (exp(dt A) - 1) / A; A < 0 always.
                    const double em1 = std::expm1(dt * ac[n]);
                    const double abar = 1.0 + em1;
                    const double bbar = em1 / ac[n];
                    hc[n] = abar * hc[n] + bbar * static_cast<double>(q(t, R + n)) * ut;
                    acc += static_cast<double>(q(t, R + S + n)) * hc[n];
                }
                y(t, ch) = static_cast<T>(acc + static_cast<double>(lp.d_skip(0, ch)) * ut);
                if (cache) {
                    std::copy(hc, hc + S, cache->h.begin() + (t * E + ch) * S);
                }
            }
        }
    }
    Mat<T> g(N, E);
    for (Eigen::Index t = 0; t < N; ++t) {
        for (Eigen::Index ch = 0; ch < E; ++ch) {
            g(t, ch) = y(t, ch) * detail::silu(zg(t, ch));
        }
    }
    Mat<T> out = g * lp.w_out.transpose();
    if (cache) {
        cache->xi = std::move(xi);
        cache->zg = std::move(zg);
        cache->cv = std::move(cv);
        cache->u = std::move(u);
        cache->q = std::move(q);
        cache->dt_pre = std::move(dt_pre);
        cache->delta = std::move(delta);
        cache->y = std::move(y);
        cache->g = std::move(g);
    }
    return out;
}

/// Single-sequence form: x is k_max x D and mask a prefix of ones. Rows past
/// the prefix come back as zeros.
template <class T>
Mat<T> mamba_scan(const Mat<T> &x, const LayerParams<T> &lp, const ModelConfig &c, std::span<const uint8_t> mask) {
    if (static_cast<Eigen::Index>(mask.size()) != x.rows()) {
        throw DimensionError("mask length does not match sequence length");
    }
    size_t k = 0;
    while (k < mask.size() && mask[k]) {
        ++k;
    }
    for (size_t j = k; j < mask.size(); ++j) {
        if (mask[j]) {
            throw DimensionError("mask must be a prefix of ones");
        }
    }
    const std::vector<size_t> offsets{0, k};
    Mat<T> out = Mat<T>::Zero(x.rows(), c.d_model);
    if (k > 0) {
        out.topRows(static_cast<Eigen::Index>(k)) =
            mamba_block<T>(x.topRows(static_cast<Eigen::Index>(k)), lp, c, offsets);
    }
    return out;
}

/// W_c (SiLU(W_a x) * W_b x), row-wise.
template <class T>
Mat<T> gated_dense(const Mat<T> &x, const LayerParams<T> &lp, typename ForwardCache<T>::Layer *cache = nullptr) {
    Mat<T> a1 = x * lp.w_a.transpose();
    Mat<T> b1 = x * lp.w_b.transpose();
    Mat<T> m = a1.unaryExpr([](T v) { return detail::silu(v); }).cwiseProduct(b1);
    Mat<T> out = m * lp.w_c.transpose();
    if (cache) {
        cache->a1 = std::move(a1);
        cache->b1 = std::move(b1);
        cache->m = std::move(m);
    }
    return out;
}

/// Inverted-dropout scale matrix (0 or 1/(1-rate)).
template <class T>
Mat<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng &rng) {
    Mat<T> m(rows, cols);
    const T keep = static_cast<T>(1.0 / (1.0 - rate));
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = uniform01(rng) < rate ? T(0) : keep;
    }
    return m;
}

/// Backbone over packed tokens: embed, then L mixer layers. Dropout runs only
/// when `dropout_rng` is given and the config rate is positive.
template <class T>
Mat<T> backbone(const PackedTokens<T> &tokens, const Parameters<T> &p, ForwardCache<T> *cache = nullptr,
                Rng *dropout_rng = nullptr) {
    const ModelConfig &c = p.config;
    Mat<T> h = embed_tokens(tokens.features, p, cache ? &cache->embed : nullptr);
    if (cache) {
        cache->layers.assign(p.layers.size(), {});
    }
    const bool drop = dropout_rng && c.dropout > 0.0;
    for (size_t l = 0; l < p.layers.size(); ++l) {
        const auto &lp = p.layers[l];
        auto *lc = cache ? &cache->layers[l] : nullptr;
        Mat<T> xn1 = detail::rms_norm(h, lp.rms1, lc ? &lc->rms1 : nullptr);
        Mat<T> o1 = mamba_block<T>(xn1, lp, c, tokens.offsets, lc);
        if (drop) {
            Mat<T> dm = dropout_mask<T>(o1.rows(), o1.cols(), c.dropout, *dropout_rng);
            o1 = o1.cwiseProduct(dm);
            if (lc) {
                lc->drop1 = std::move(dm);
            }
        }
        Mat<T> z = h + o1;
        Mat<T> xn2 = detail::rms_norm(z, lp.rms2, lc ? &lc->rms2 : nullptr);
        Mat<T> o2 = gated_dense<T>(xn2, lp, lc);
        if (drop) {
            Mat<T> dm = dropout_mask<T>(o2.rows(), o2.cols(), c.dropout, *dropout_rng);
            o2 = o2.cwiseProduct(dm);
            if (lc) {
                lc->drop2 = std::move(dm);
            }
        }
        if (lc) {
            lc->xn1 = std::move(xn1);
            lc->xn2 = std::move(xn2);
        }
        h = z + o2;
    }
    return h;
}

/// sum_j m_j h_j / (sum_j m_j + eps) per row.
template <class T>
Mat<T> masked_mean_pool(const Mat<T> &h, std::span<const size_t> offsets, double eps) {
    const size_t B = offsets.size() - 1;
    Mat<T> pooled = Mat<T>::Zero(static_cast<Eigen::Index>(B), h.cols());
    for (size_t b = 0; b < B; ++b) {
        const Eigen::Index o = static_cast<Eigen::Index>(offsets[b]);
        const Eigen::Index len = static_cast<Eigen::Index>(offsets[b + 1] - offsets[b]);
        if (len > 0) {
            pooled.row(static_cast<Eigen::Index>(b)) =
                h.middleRows(o, len).colwise().sum() / static_cast<T>(static_cast<double>(len) + eps);
        }
    }
    return pooled;
}

/// Readout on pooled vectors (B x D -> B x heads logits).
template <class T>
Mat<T> readout(const Mat<T> &pooled, const Parameters<T> &p, ForwardCache<T> *cache = nullptr) {
    const ModelConfig &c = p.config;
    const Eigen::Index B = pooled.rows();
    Mat<T> logits(B, c.heads);
    if (c.readout == ReadoutKind::Mlp) {
        if (cache) {
            cache->mlp_pre.assign(p.mlp_heads.size(), {});
        }
        for (size_t hd = 0; hd < p.mlp_heads.size(); ++hd) {
            const auto &m = p.mlp_heads[hd];
            Mat<T> pre = pooled * m.w1.transpose();
            pre.rowwise() += m.b1.row(0);
            const Mat<T> act = pre.unaryExpr([](T v) { return detail::gelu(v); });
            logits.col(static_cast<Eigen::Index>(hd)) = act * m.w2.row(0).transpose();
            logits.col(static_cast<Eigen::Index>(hd)).array() += m.b2(0, 0);
            if (cache) {
                cache->mlp_pre[hd] = std::move(pre);
            }
        }
        return logits;
    }
    Mat<T> r = pooled * p.res_in_w.transpose();
    r.rowwise() += p.res_in_b.row(0);
    if (cache) {
        cache->res_r0 = r;
        cache->res_in.assign(p.res_blocks.size(), {});
        cache->res_ln.assign(p.res_blocks.size(), {});
        cache->res_n.assign(p.res_blocks.size(), {});
        cache->res_pre.assign(p.res_blocks.size(), {});
    }
    for (size_t i = 0; i < p.res_blocks.size(); ++i) {
        const auto &blk = p.res_blocks[i];
        Mat<T> n = detail::layer_norm(r, blk.ln, cache ? &cache->res_ln[i] : nullptr);
        Mat<T> pre = n * blk.w1.transpose();
        pre.rowwise() += blk.b1.row(0);
        Mat<T> branch = pre.unaryExpr([](T v) { return detail::gelu(v); }) * blk.w2.transpose();
        branch.rowwise() += blk.b2.row(0);
        if (cache) {
            cache->res_in[i] = r;
            cache->res_n[i] = std::move(n);
            cache->res_pre[i] = std::move(pre);
        }
        r += branch;
    }
    logits = r * p.res_out_w.transpose();
    logits.rowwise() += p.res_out_b.row(0);
    if (cache) {
        cache->res_final = std::move(r);
    }
    return logits;
}

/// Logits for packed tokens; the full pipeline behind forward().
template <class T>
Mat<T> forward_logits(const PackedTokens<T> &tokens, const Parameters<T> &p, ForwardCache<T> *cache = nullptr,
                      Rng *dropout_rng = nullptr) {
    Mat<T> h = backbone(tokens, p, cache, dropout_rng);
    Mat<T> pooled = masked_mean_pool(h, tokens.offsets, p.config.pool_epsilon);
    Mat<T> logits = readout(pooled, p, cache);
    if (cache) {
        cache->h_final = std::move(h);
        cache->pooled = std::move(pooled);
        cache->tokens = tokens;
    }
    return logits;
}

/// Per-row, per-head outputs. Head 0 is lambda_Z, head 1 lambda_X.
struct Predictions {
    size_t batch_size = 0;
    int heads = 1;
    std::vector<double> logits;  // B x heads
    std::vector<double> probs;
    std::vector<uint8_t> lambda;

    double logit(size_t b, int h) const { return logits[b * static_cast<size_t>(heads) + static_cast<size_t>(h)]; }
    uint8_t predicted(size_t b, int h) const { return lambda[b * static_cast<size_t>(heads) + static_cast<size_t>(h)]; }
};

/// Builds predictions from logits; lambda = 1 iff sigma(z) > 0.5, so z = 0 maps to 0.
template <class T>
Predictions predictions_from_logits(const Mat<T> &logits) {
    Predictions out;
    out.batch_size = static_cast<size_t>(logits.rows());
    out.heads = static_cast<int>(logits.cols());
    for (Eigen::Index b = 0; b < logits.rows(); ++b) {
        for (Eigen::Index h = 0; h < logits.cols(); ++h) {
            const double z = static_cast<double>(logits(b, h));
            const double pr = detail::sigmoid(z);
            out.logits.push_back(z);
            out.probs.push_back(pr);
            out.lambda.push_back(pr > 0.5 ? 1 : 0);
        }
    }
    return out;
}

/// Inference forward pass (dropout off).
template <class T>
Predictions forward(const Parameters<T> &p, const Batch &batch) {
    if (batch.k_max > static_cast<size_t>(p.config.k_max)) {
        throw DimensionError("batch k_max " + std::to_string(batch.k_max) + " exceeds model k_max " +
                             std::to_string(p.config.k_max));
    }
    const auto tokens = pack_tokens<T>(batch);
    return predictions_from_logits(forward_logits(tokens, p));
}

// Weights file:
//   "SMDW" | version u32 | manifest length u32 | manifest JSON (UTF-8)
//   | payload: f32 little-endian, tensors back to back in manifest order
//   | crc32 u32 over manifest + payload
// The manifest carries {"config", "tensors": [{"name", "shape", "offset"}],
// "payload_bytes"} and optionally "train_config".
inline constexpr char kWeightsMagic[5] = "SMDW";
inline constexpr uint32_t kWeightsVersion = 1;

template <class T>
void save_params(const Parameters<T> &p, const std::string &path, const nlohmann::json &extra = nullptr) {
    nlohmann::json manifest;
    manifest["config"] = p.config;
    manifest["tensors"] = nlohmann::json::array();
    std::vector<unsigned char> payload;
    detail::visit_tensors(p, [&](const std::string &name, const std::vector<size_t> &shape, const Mat<T> &m) {
        manifest["tensors"].push_back({{"name", name}, {"shape", shape}, {"offset", payload.size()}});
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            binio::append_le<float>(payload, static_cast<float>(m.data()[i]));
        }
    });
    manifest["payload_bytes"] = payload.size();
    if (!extra.is_null()) {
        manifest["train_config"] = extra;
    }
    const std::string text = manifest.dump();
    std::vector<unsigned char> body(text.begin(), text.end());
    body.insert(body.end(), payload.begin(), payload.end());

    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot open '" + path + "' for writing");
    }
    binio::write_magic(out, kWeightsMagic);
    binio::write_le<uint32_t>(out, kWeightsVersion);
    binio::write_le<uint32_t>(out, static_cast<uint32_t>(text.size()));
    out.write(reinterpret_cast<const char *>(body.data()), static_cast<std::streamsize>(body.size()));
    binio::write_le<uint32_t>(out, binio::crc32_of(body));
    if (!out) {
        throw std::runtime_error("write to weights file failed");
    }
}

struct LoadedWeights {
    Parameters<float> params;
    nlohmann::json train_config;
};

/// Loads a weights file. Shapes are checked against the embedded config
/// before the checksum, so an edited manifest reports the offending tensor.
inline LoadedWeights load_weights(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open '" + path + "'");
    }
    binio::expect_magic(in, kWeightsMagic, "weights");
    const auto version = binio::read_le<uint32_t>(in, "version");
    if (version != kWeightsVersion) {
        throw FormatError("unsupported weights file version " + std::to_string(version));
    }
    const auto mlen = binio::read_le<uint32_t>(in, "manifest length");
    std::vector<unsigned char> body(mlen);
    in.read(reinterpret_cast<char *>(body.data()), mlen);
    if (static_cast<uint32_t>(in.gcount()) != mlen) {
        throw ChecksumError("weights file truncated inside the manifest");
    }
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(body.begin(), body.end());
    } catch (const nlohmann::json::exception &e) {
        throw FormatError(std::string("weights manifest is not valid JSON: ") + e.what());
    }
    LoadedWeights w;
    w.params = zero_params<float>(manifest.at("config").get<ModelConfig>());
    if (manifest.contains("train_config")) {
        w.train_config = manifest["train_config"];
    }
    const auto &tensors = manifest.at("tensors");
    const auto expected = tensor_manifest(w.params);
    if (tensors.size() != expected.size()) {
        throw ShapeMismatchError(tensors.size() < expected.size() ? expected[tensors.size()].name : "<extra>",
                                 "manifest lists " + std::to_string(tensors.size()) + " tensors, config implies " +
                                     std::to_string(expected.size()));
    }
    size_t payload_bytes = 0;
    for (size_t i = 0; i < expected.size(); ++i) {
        const auto name = tensors[i].at("name").get<std::string>();
        const auto shape = tensors[i].at("shape").get<std::vector<size_t>>();
        if (name != expected[i].name) {
            throw ShapeMismatchError(expected[i].name, "manifest has '" + name + "' in its place");
        }
        if (shape != expected[i].shape) {
            throw ShapeMismatchError(name, "manifest shape " + nlohmann::json(shape).dump() + ", config implies " +
                                               nlohmann::json(expected[i].shape).dump());
        }
        if (tensors[i].at("offset").get<size_t>() != payload_bytes) {
            throw FormatError("tensor '" + name + "' has an unexpected payload offset");
        }
        size_t n = 1;
        for (size_t s : shape) {
            n *= s;
        }
        payload_bytes += 4 * n;
    }
    if (manifest.at("payload_bytes").get<size_t>() != payload_bytes) {
        throw FormatError("payload size disagrees with the tensor list");
    }
    body.resize(mlen + payload_bytes);
    in.read(reinterpret_cast<char *>(body.data() + mlen), static_cast<std::streamsize>(payload_bytes));
    if (static_cast<size_t>(in.gcount()) != payload_bytes) {
        throw ChecksumError("weights file truncated: payload incomplete");
    }
    unsigned char crc_bytes[4];
    in.read(reinterpret_cast<char *>(crc_bytes), 4);
    if (in.gcount() != 4) {
        throw ChecksumError("weights file truncated: checksum missing");
    }
    if (binio::load_le<uint32_t>(crc_bytes) != binio::crc32_of(body)) {
        throw ChecksumError("weights file checksum mismatch");
    }
    size_t cursor = mlen;
    detail::visit_tensors(w.params, [&](const std::string &, const std::vector<size_t> &, Mat<float> &m) {
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            m.data()[i] = binio::load_le<float>(body.data() + cursor);
            cursor += 4;
        }
    });
    return w;
}

inline Parameters<float> load_params(const std::string &path) { return load_weights(path).params; }

}  // namespace smd
