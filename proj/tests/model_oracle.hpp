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

// Straight-line reference evaluations of the model's building blocks in long
// double, written directly from the layer equations.

#pragma once

#include <cmath>
#include <vector>

#include "smd/model.hpp"

namespace smd::testing {

using LD = long double;
using LMat = std::vector<std::vector<LD>>;

template <class T>
LMat to_ld(const Mat<T> &m) {
    LMat out(static_cast<size_t>(m.rows()), std::vector<LD>(static_cast<size_t>(m.cols())));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            out[static_cast<size_t>(r)][static_cast<size_t>(c)] = static_cast<LD>(m(r, c));
        }
    }
    return out;
}

inline LD sig(LD x) { return 1.0L / (1.0L + std::exp(-x)); }
inline LD silu_ld(LD x) { return x * sig(x); }
inline LD softplus_ld(LD x) { return std::log1p(std::exp(x)); }
inline LD gelu_ld(LD x) { return 0.5L * x * (1.0L + std::erf(x / std::sqrt(2.0L))); }

// out[i] = sum_j W[i][j] v[j] (+ b[i])
inline std::vector<LD> matvec(const LMat &W, const std::vector<LD> &v, size_t row0 = 0, size_t rows = 0) {
    if (rows == 0) {
        rows = W.size() - row0;
    }
    std::vector<LD> out(rows, 0.0L);
    for (size_t i = 0; i < rows; ++i) {
        for (size_t j = 0; j < v.size(); ++j) {
            out[i] += W[row0 + i][j] * v[j];
        }
    }
    return out;
}

// The selective-scan block on one sequence (rows of x), step by step.
template <class T>
LMat mamba_reference(const Mat<T> &x, const LayerParams<T> &lp, const ModelConfig &c) {
    const size_t E = static_cast<size_t>(c.d_inner());
    const size_t S = static_cast<size_t>(c.d_state);
    const size_t K = static_cast<size_t>(c.d_conv);
    const size_t R = static_cast<size_t>(c.dt_rank());
    const LMat X = to_ld(x), Win = to_ld(lp.w_in), Cw = to_ld(lp.conv_w), Cb = to_ld(lp.conv_b), Wx = to_ld(lp.w_x),
               Wdt = to_ld(lp.w_dt), Bdt = to_ld(lp.b_dt), Alog = to_ld(lp.a_log), Dk = to_ld(lp.d_skip),
               Wout = to_ld(lp.w_out);
    const size_t len = X.size();
    LMat xi(len), zg(len);
    for (size_t t = 0; t < len; ++t) {
        xi[t] = matvec(Win, X[t], 0, E);
        zg[t] = matvec(Win, X[t], E, E);
    }
    std::vector<std::vector<LD>> h(E, std::vector<LD>(S, 0.0L));
    LMat out(len);
    for (size_t t = 0; t < len; ++t) {
        std::vector<LD> u(E);
        for (size_t ch = 0; ch < E; ++ch) {
            LD acc = Cb[0][ch];
            for (size_t j = 0; j < K; ++j) {
                // Tap j looks back K-1-j tokens.
                const long src = static_cast<long>(t) - static_cast<long>(K - 1 - j);
                if (src >= 0) {
                    acc += Cw[ch][j] * xi[static_cast<size_t>(src)][ch];
                }
            }
            u[ch] = silu_ld(acc);
        }
        const std::vector<LD> low = matvec(Wx, u, 0, R);
        const std::vector<LD> Bv = matvec(Wx, u, R, S);
        const std::vector<LD> Cv = matvec(Wx, u, R + S, S);
        std::vector<LD> gated(E);
        for (size_t ch = 0; ch < E; ++ch) {
            LD pre = Bdt[0][ch];
            for (size_t r = 0; r < R; ++r) {
                pre += Wdt[ch][r] * low[r];
            }
            const LD dt = softplus_ld(pre);
            LD y = Dk[0][ch] * u[ch];
            for (size_t n = 0; n < S; ++n) {
                const LD A = -std::exp(Alog[ch][n]);
                const LD abar = std::exp(dt * A);
                const LD bbar = (abar - 1.0L) / A;
                h[ch][n] = abar * h[ch][n] + bbar * Bv[n] * u[ch];
                y += Cv[n] * h[ch][n];
            }
            gated[ch] = y * silu_ld(zg[t][ch]);
        }
        out[t] = matvec(Wout, gated);
    }
    return out;
}

// Max |a - ref| / max |ref| over all entries.
template <class T>
double relative_error(const Mat<T> &a, const LMat &ref) {
    LD num = 0.0L;
    LD den = 0.0L;
    for (size_t r = 0; r < ref.size(); ++r) {
        for (size_t c = 0; c < ref[r].size(); ++c) {
            num = std::max(num, std::abs(static_cast<LD>(a(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c))) -
                                         ref[r][c]));
            den = std::max(den, std::abs(ref[r][c]));
        }
    }
    return static_cast<double>(den > 0 ? num / den : num);
}

// A small config whose scan has enough state to exercise every path.
inline ModelConfig tiny_config(int d_model, int layers, int heads, ReadoutKind readout) {
    ModelConfig c;
    c.d_model = d_model;
    c.L = layers;
    c.d_state = 4;
    c.d_conv = 3;
    c.expand = 2;
    c.w_gate = 2;
    c.heads = heads;
    c.readout = readout;
    c.d_read = 0;
    c.L_res = 2;
    c.k_max = 32;
    return c;
}

}  // namespace smd::testing
