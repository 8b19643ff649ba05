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

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "smd/defects.hpp"
#include "smd/errors.hpp"
#include "smd/lattice.hpp"
#include "smd/model.hpp"
#include "smd/noise.hpp"
#include "smd/parallel.hpp"
#include "smd/rng.hpp"

namespace smd {

// ---------------------------------------------------------------------------
// Loss

/// Mean over rows of the per-head binary cross-entropy on logits, summed over
/// heads. labels is B x 2 (lambda_Z, lambda_X); a single head reads column 0.
template <class T>
double bce_loss(const Mat<T> &logits, std::span<const float> labels) {
    const Eigen::Index B = logits.rows();
    if (labels.size() != static_cast<size_t>(B) * Batch::kLabelColumns) {
        throw DimensionError("label array does not match the logits");
    }
    double total = 0.0;
    for (Eigen::Index b = 0; b < B; ++b) {
        for (Eigen::Index h = 0; h < logits.cols(); ++h) {
            const float y = labels[static_cast<size_t>(b) * Batch::kLabelColumns + static_cast<size_t>(h)];
            if (y != 0.0f && y != 1.0f) {
                throw DomainError("labels must be 0 or 1");
            }
            const double z = static_cast<double>(logits(b, h));
            total += detail::softplus(z) - static_cast<double>(y) * z;
        }
    }
    return B > 0 ? total / static_cast<double>(B) : 0.0;
}

// ---------------------------------------------------------------------------
// Reverse-mode gradients

namespace detail {

template <class T>
Mat<T> rms_norm_backward(const Mat<T> &dy, const Mat<T> &gain, const RmsNormCache<T> &c, Mat<T> &dgain) {
    const Eigen::Index D = dy.cols();
    Mat<T> dx(dy.rows(), D);
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        const T inv = c.inv_rms[static_cast<size_t>(r)];
        const auto x = c.x.row(r).array();
        const auto gdy = dy.row(r).array() * gain.row(0).array();
        dgain.row(0).array() += dy.row(r).array() * x * inv;
        const T dot = (gdy * x).sum();
        dx.row(r) = (gdy * inv - x * (inv * inv * inv * dot / static_cast<T>(D))).matrix();
    }
    return dx;
}

template <class T>
Mat<T> layer_norm_backward(const Mat<T> &dy, const Mat<T> &gain, const LayerNormCache<T> &c, Mat<T> &dgain) {
    Mat<T> dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        const auto xh = c.xhat.row(r).array();
        dgain.row(0).array() += dy.row(r).array() * xh;
        const auto dxh = (dy.row(r).array() * gain.row(0).array()).eval();
        const T m1 = dxh.mean();
        const T m2 = (dxh * xh).mean();
        dx.row(r) = ((dxh - m1 - xh * m2) * c.inv_sigma[static_cast<size_t>(r)]).matrix();
    }
    return dx;
}

template <class T>
void add_linear_grads(const Mat<T> &dout, const Mat<T> &in, Mat<T> &dw, Mat<T> *db) {
    dw.noalias() += dout.transpose() * in;
    if (db) {
        db->row(0) += dout.colwise().sum();
    }
}

// Backward through the selective-state-space block. Accumulates parameter
// gradients into g and returns the gradient w.r.t. the block input.
template <class T>
Mat<T> mamba_block_backward(const Mat<T> &dout, const Mat<T> &xn, const LayerParams<T> &lp, const ModelConfig &c,
                            std::span<const size_t> offsets, const typename ForwardCache<T>::Layer &fc,
                            LayerParams<T> &g) {
    const Eigen::Index N = dout.rows();
    const Eigen::Index E = c.d_inner();
    const Eigen::Index S = c.d_state;
    const Eigen::Index K = c.d_conv;
    const Eigen::Index R = c.dt_rank();

    add_linear_grads<T>(dout, fc.g, g.w_out, nullptr);
    const Mat<T> dgated = dout * lp.w_out;

    Mat<T> dy(N, E);
    Mat<T> dzg(N, E);
    for (Eigen::Index t = 0; t < N; ++t) {
        for (Eigen::Index ch = 0; ch < E; ++ch) {
            const T z = fc.zg(t, ch);
            dy(t, ch) = dgated(t, ch) * silu(z);
            dzg(t, ch) = dgated(t, ch) * fc.y(t, ch) * silu_grad(z);
        }
    }

    std::vector<double> A(static_cast<size_t>(E * S));
    for (Eigen::Index ch = 0; ch < E; ++ch) {
        for (Eigen::Index n = 0; n < S; ++n) {
            A[static_cast<size_t>(ch * S + n)] = -std::exp(static_cast<double>(lp.a_log(ch, n)));
        }
    }
    Mat<double> du = Mat<double>::Zero(N, E);
    Mat<double> dq = Mat<double>::Zero(N, R + 2 * S);
    Mat<double> ddelta = Mat<double>::Zero(N, E);
    std::vector<double> dA(static_cast<size_t>(E * S), 0.0);
    std::vector<double> dskip(static_cast<size_t>(E), 0.0);
    std::vector<double> dh(static_cast<size_t>(E * S));
    for (size_t b = 0; b + 1 < offsets.size(); ++b) {
        std::fill(dh.begin(), dh.end(), 0.0);
        const Eigen::Index first = static_cast<Eigen::Index>(offsets[b]);
        for (Eigen::Index t = static_cast<Eigen::Index>(offsets[b + 1]) - 1; t >= first; --t) {
            for (Eigen::Index ch = 0; ch < E; ++ch) {
                const double dyt = static_cast<double>(dy(t, ch));
                const double ut = static_cast<double>(fc.u(t, ch));
                const double dt = static_cast<double>(fc.delta(t, ch));
                dskip[static_cast<size_t>(ch)] += dyt * ut;
                double du_acc = dyt * static_cast<double>(lp.d_skip(0, ch));
                double ddt = 0.0;
                const double *ht = fc.h.data() + (t * E + ch) * S;
                const double *hp = t > first ? fc.h.data() + ((t - 1) * E + ch) * S : nullptr;
                double *dhc = dh.data() + ch * S;
                for (Eigen::Index n = 0; n < S; ++n) {
                    const double a = A[static_cast<size_t>(ch * S + n)];
                    const double cn = static_cast<double>(fc.q(t, R + S + n));
                    const double bn = static_cast<double>(fc.q(t, R + n));
                    dq(t, R + S + n) += dyt * ht[n];
                    const double dhn = dhc[n] + dyt * cn;
                    const double x = dt * a;
                    const double em1 = std::expm1(x);
                    const double abar = 1.0 + em1;
                    const double bbar = em1 / a;
                    const double hprev = hp ? hp[n] : 0.0;
                    dq(t, R + n) += dhn * bbar * ut;
                    du_acc += dhn * bbar * bn;
                    const double dbbar = dhn * bn * ut;
                    const double dabar = dhn * hprev;
                    ddt += dabar * abar * a + dbbar * abar;
                    dA[static_cast<size_t>(ch * S + n)] += dabar * abar * dt + dbbar * dt * dt * expm1_over_x_grad(x);
                    dhc[n] = dhn * abar;
                }
                du(t, ch) += du_acc;
                ddelta(t, ch) += ddt;
            }
        }
    }
    for (Eigen::Index ch = 0; ch < E; ++ch) {
        g.d_skip(0, ch) += static_cast<T>(dskip[static_cast<size_t>(ch)]);
        for (Eigen::Index n = 0; n < S; ++n) {
            const size_t i = static_cast<size_t>(ch * S + n);
            g.a_log(ch, n) += static_cast<T>(dA[i] * A[i]);
        }
    }

    Mat<T> ddt_pre(N, E);
    for (Eigen::Index t = 0; t < N; ++t) {
        for (Eigen::Index ch = 0; ch < E; ++ch) {
            ddt_pre(t, ch) = static_cast<T>(ddelta(t, ch)) * sigmoid(fc.dt_pre(t, ch));
        }
    }
    const Mat<T> q_low = fc.q.leftCols(R);
    add_linear_grads<T>(ddt_pre, q_low, g.w_dt, &g.b_dt);
    Mat<T> dqT = dq.template cast<T>();
    dqT.leftCols(R) += ddt_pre * lp.w_dt;
    add_linear_grads<T>(dqT, fc.u, g.w_x, nullptr);
    Mat<T> duT = du.template cast<T>() + dqT * lp.w_x;

    Mat<T> dcv(N, E);
    for (Eigen::Index t = 0; t < N; ++t) {
        for (Eigen::Index ch = 0; ch < E; ++ch) {
            dcv(t, ch) = duT(t, ch) * silu_grad(fc.cv(t, ch));
        }
    }
    Mat<T> dxi = Mat<T>::Zero(N, E);
    for (size_t b = 0; b + 1 < offsets.size(); ++b) {
        const Eigen::Index o = static_cast<Eigen::Index>(offsets[b]);
        const Eigen::Index len = static_cast<Eigen::Index>(offsets[b + 1] - offsets[b]);
        for (Eigen::Index t = 0; t < len; ++t) {
            for (Eigen::Index ch = 0; ch < E; ++ch) {
                const T d = dcv(o + t, ch);
                g.conv_b(0, ch) += d;
                for (Eigen::Index j = 0; j < K; ++j) {
                    const Eigen::Index src = t - (K - 1) + j;
                    if (src >= 0) {
                        g.conv_w(ch, j) += d * fc.xi(o + src, ch);
                        dxi(o + src, ch) += d * lp.conv_w(ch, j);
                    }
                }
            }
        }
    }
    Mat<T> dproj(N, 2 * E);
    dproj.leftCols(E) = dxi;
    dproj.rightCols(E) = dzg;
    add_linear_grads<T>(dproj, xn, g.w_in, nullptr);
    return dproj * lp.w_in;
}

template <class T>
Mat<T> gated_dense_backward(const Mat<T> &dout, const Mat<T> &xn, const LayerParams<T> &lp,
                            const typename ForwardCache<T>::Layer &fc, LayerParams<T> &g) {
    add_linear_grads<T>(dout, fc.m, g.w_c, nullptr);
    const Mat<T> dm = dout * lp.w_c;
    Mat<T> da(dm.rows(), dm.cols());
    Mat<T> db(dm.rows(), dm.cols());
    for (Eigen::Index i = 0; i < dm.size(); ++i) {
        const T a = fc.a1.data()[i];
        da.data()[i] = dm.data()[i] * fc.b1.data()[i] * silu_grad(a);
        db.data()[i] = dm.data()[i] * silu(a);
    }
    add_linear_grads<T>(da, xn, g.w_a, nullptr);
    add_linear_grads<T>(db, xn, g.w_b, nullptr);
    return da * lp.w_a + db * lp.w_b;
}

template <class T>
Mat<T> readout_backward(const Mat<T> &dlogits, const Parameters<T> &p, const ForwardCache<T> &fc,
                        Parameters<T> &g) {
    const Mat<T> &pooled = fc.pooled;
    Mat<T> dpooled = Mat<T>::Zero(pooled.rows(), pooled.cols());
    if (p.config.readout == ReadoutKind::Mlp) {
        for (size_t hd = 0; hd < p.mlp_heads.size(); ++hd) {
            const auto &m = p.mlp_heads[hd];
            auto &gm = g.mlp_heads[hd];
            const Mat<T> &pre = fc.mlp_pre[hd];
            const Mat<T> act = pre.unaryExpr([](T v) { return gelu(v); });
            const Mat<T> dz = dlogits.col(static_cast<Eigen::Index>(hd));
            add_linear_grads<T>(dz, act, gm.w2, &gm.b2);
            Mat<T> dpre = dz * m.w2;
            for (Eigen::Index i = 0; i < dpre.size(); ++i) {
                dpre.data()[i] *= gelu_grad(pre.data()[i]);
            }
            add_linear_grads<T>(dpre, pooled, gm.w1, &gm.b1);
            dpooled += dpre * m.w1;
        }
        return dpooled;
    }
    add_linear_grads<T>(dlogits, fc.res_final, g.res_out_w, &g.res_out_b);
    Mat<T> dr = dlogits * p.res_out_w;
    for (size_t i = p.res_blocks.size(); i-- > 0;) {
        const auto &blk = p.res_blocks[i];
        auto &gb = g.res_blocks[i];
        const Mat<T> &pre = fc.res_pre[i];
        const Mat<T> act = pre.unaryExpr([](T v) { return gelu(v); });
        add_linear_grads<T>(dr, act, gb.w2, &gb.b2);
        Mat<T> dpre = dr * blk.w2;
        for (Eigen::Index j = 0; j < dpre.size(); ++j) {
            dpre.data()[j] *= gelu_grad(pre.data()[j]);
        }
        add_linear_grads<T>(dpre, fc.res_n[i], gb.w1, &gb.b1);
        const Mat<T> dn = dpre * blk.w1;
        dr += layer_norm_backward<T>(dn, blk.ln, fc.res_ln[i], gb.ln);
    }
    add_linear_grads<T>(dr, pooled, g.res_in_w, &g.res_in_b);
    return dr * p.res_in_w;
}

}  // namespace detail

template <class T>
struct BackwardResult {
    double loss = 0.0;
    Parameters<T> grads;
};

/// Names the first parameter tensor holding a NaN/Inf, or "" if none.
template <class T>
std::string first_non_finite(const Parameters<T> &p) {
    std::string bad;
    detail::visit_tensors(p, [&](const std::string &name, const std::vector<size_t> &, const Mat<T> &m) {
        if (bad.empty() && !m.allFinite()) {
            bad = name;
        }
    });
    return bad;
}

/// Loss and exact gradients for every parameter tensor on one batch.
/// Dropout is active only when dropout_rng is given.
template <class T>
BackwardResult<T> backward(const Parameters<T> &p, const Batch &batch, Rng *dropout_rng = nullptr) {
    const ModelConfig &c = p.config;
    ForwardCache<T> fc;
    const auto tokens = pack_tokens<T>(batch);
    const Mat<T> logits = forward_logits(tokens, p, &fc, dropout_rng);

    BackwardResult<T> res;
    res.loss = bce_loss<T>(logits, batch.labels);
    if (!std::isfinite(res.loss)) {
        const std::string bad = first_non_finite(p);
        throw NonFiniteError(bad.empty() ? (logits.allFinite() ? "loss" : "logits") : bad,
                             "loss = " + std::to_string(res.loss));
    }
    res.grads = zero_params<T>(c);
    auto &g = res.grads;

    const Eigen::Index B = logits.rows();
    Mat<T> dlogits(B, logits.cols());
    for (Eigen::Index b = 0; b < B; ++b) {
        for (Eigen::Index h = 0; h < logits.cols(); ++h) {
            const T y = static_cast<T>(batch.label(static_cast<size_t>(b), static_cast<size_t>(h)));
            dlogits(b, h) = (detail::sigmoid(logits(b, h)) - y) / static_cast<T>(B);
        }
    }
    const Mat<T> dpooled = detail::readout_backward<T>(dlogits, p, fc, g);

    Mat<T> dh = Mat<T>::Zero(fc.h_final.rows(), fc.h_final.cols());
    for (size_t b = 0; b + 1 < tokens.offsets.size(); ++b) {
        const size_t len = tokens.length(b);
        const T scale = static_cast<T>(1.0 / (static_cast<double>(len) + c.pool_epsilon));
        for (size_t j = tokens.offsets[b]; j < tokens.offsets[b + 1]; ++j) {
            dh.row(static_cast<Eigen::Index>(j)) = dpooled.row(static_cast<Eigen::Index>(b)) * scale;
        }
    }

    for (size_t l = p.layers.size(); l-- > 0;) {
        const auto &lp = p.layers[l];
        const auto &lc = fc.layers[l];
        auto &gl = g.layers[l];
        Mat<T> do2 = lc.drop2.size() ? Mat<T>(dh.cwiseProduct(lc.drop2)) : dh;
        const Mat<T> dxn2 = detail::gated_dense_backward<T>(do2, lc.xn2, lp, lc, gl);
        Mat<T> dz = dh + detail::rms_norm_backward<T>(dxn2, lp.rms2, lc.rms2, gl.rms2);
        Mat<T> do1 = lc.drop1.size() ? Mat<T>(dz.cwiseProduct(lc.drop1)) : dz;
        const Mat<T> dxn1 = detail::mamba_block_backward<T>(do1, lc.xn1, lp, c, tokens.offsets, lc, gl);
        dh = dz + detail::rms_norm_backward<T>(dxn1, lp.rms1, lc.rms1, gl.rms1);
    }

    const auto &ec = fc.embed;
    Mat<T> dpre2 = detail::layer_norm_backward<T>(dh, p.emb_ln2, ec.ln2, g.emb_ln2);
    detail::add_linear_grads<T>(dpre2, ec.act, g.emb_w2, &g.emb_b2);
    Mat<T> dn1 = dpre2 * p.emb_w2;
    for (Eigen::Index i = 0; i < dn1.size(); ++i) {
        dn1.data()[i] *= detail::gelu_grad(ec.n1.data()[i]);
    }
    const Mat<T> dpre1 = detail::layer_norm_backward<T>(dn1, p.emb_ln1, ec.ln1, g.emb_ln1);
    detail::add_linear_grads<T>(dpre1, ec.f, g.emb_w1, &g.emb_b1);

    const std::string bad = first_non_finite(g);
    if (!bad.empty()) {
        throw NonFiniteError("grad:" + bad, "non-finite gradient");
    }
    return res;
}

/// Loss only, no dropout.
template <class T>
double batch_loss(const Parameters<T> &p, const Batch &batch) {
    return bce_loss<T>(forward_logits(pack_tokens<T>(batch), p), batch.labels);
}

// ---------------------------------------------------------------------------
// Tensor-wise helpers over Parameters

template <class T, class F>
void zip_tensors(Parameters<T> &a, const Parameters<T> &b, F &&f) {
    std::vector<const Mat<T> *> bs;
    detail::visit_tensors(b, [&](const std::string &, const std::vector<size_t> &, const Mat<T> &m) {
        bs.push_back(&m);
    });
    size_t i = 0;
    detail::visit_tensors(a, [&](const std::string &name, const std::vector<size_t> &, Mat<T> &m) {
        f(name, m, *bs[i++]);
    });
}

template <class T>
double global_norm(const Parameters<T> &g) {
    double s = 0.0;
    detail::visit_tensors(g, [&](const std::string &, const std::vector<size_t> &, const Mat<T> &m) {
        s += m.template cast<double>().squaredNorm();
    });
    return std::sqrt(s);
}

/// Scales g in place so its global norm is at most max_norm; returns the
/// norm before clipping. max_norm <= 0 disables clipping.
template <class T>
double clip_grad_norm(Parameters<T> &g, double max_norm) {
    const double norm = global_norm(g);
    if (max_norm > 0.0 && norm > max_norm) {
        const T scale = static_cast<T>(max_norm / norm);
        detail::visit_tensors(g, [&](const std::string &, const std::vector<size_t> &, Mat<T> &m) { m *= scale; });
    }
    return norm;
}

// ---------------------------------------------------------------------------
// Optimizers and schedule

enum class OptimizerKind { AdamW, Lion };
enum class ScheduleKind { Cosine, Constant };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::AdamW;
    double beta1 = 0.9;
    double beta2 = 0.999;  // Lion uses 0.99 by convention; set explicitly
    double eps = 1e-8;
    double weight_decay = 1e-2;
};

template <class T>
struct OptState {
    Parameters<T> m;
    Parameters<T> v;  // AdamW only
    long step = 0;
};

template <class T>
OptState<T> make_opt_state(const Parameters<T> &p) {
    return {zero_params<T>(p.config), zero_params<T>(p.config), 0};
}

/// Cosine from base (step 0) to floor (step total-1); constant returns base.
inline double scheduled_lr(ScheduleKind kind, double base, double floor, long step, long total_steps) {
    if (kind == ScheduleKind::Constant || total_steps <= 1) {
        return base;
    }
    const double frac = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps - 1), 0.0, 1.0);
    return floor + (base - floor) * 0.5 * (1.0 + std::cos(M_PI * frac));
}

/// One AdamW step with decoupled decay: p <- p (1 - lr wd) - lr mhat / (sqrt(vhat) + eps).
template <class T>
void adamw_step(Parameters<T> &p, const Parameters<T> &g, OptState<T> &st, const OptimizerConfig &cfg, double lr) {
    ++st.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    std::vector<Mat<T> *> ms, vs;
    detail::visit_tensors(st.m, [&](const std::string &, const std::vector<size_t> &, Mat<T> &m) { ms.push_back(&m); });
    detail::visit_tensors(st.v, [&](const std::string &, const std::vector<size_t> &, Mat<T> &m) { vs.push_back(&m); });
    size_t i = 0;
    zip_tensors(p, g, [&](const std::string &, Mat<T> &w, const Mat<T> &grad) {
        Mat<T> &m = *ms[i];
        Mat<T> &v = *vs[i];
        ++i;
        for (Eigen::Index j = 0; j < w.size(); ++j) {
            const double gj = static_cast<double>(grad.data()[j]);
            const double mj = cfg.beta1 * static_cast<double>(m.data()[j]) + (1.0 - cfg.beta1) * gj;
            const double vj = cfg.beta2 * static_cast<double>(v.data()[j]) + (1.0 - cfg.beta2) * gj * gj;
            m.data()[j] = static_cast<T>(mj);
            v.data()[j] = static_cast<T>(vj);
            const double update = (mj / bc1) / (std::sqrt(vj / bc2) + cfg.eps);
            const double wj = static_cast<double>(w.data()[j]);
            w.data()[j] = static_cast<T>(wj * (1.0 - lr * cfg.weight_decay) - lr * update);
        }
    });
}

/// One Lion step: p <- p (1 - lr wd) - lr sign(b1 m + (1-b1) g); m <- b2 m + (1-b2) g.
template <class T>
void lion_step(Parameters<T> &p, const Parameters<T> &g, OptState<T> &st, const OptimizerConfig &cfg, double lr) {
    ++st.step;
    std::vector<Mat<T> *> ms;
    detail::visit_tensors(st.m, [&](const std::string &, const std::vector<size_t> &, Mat<T> &m) { ms.push_back(&m); });
    size_t i = 0;
    zip_tensors(p, g, [&](const std::string &, Mat<T> &w, const Mat<T> &grad) {
        Mat<T> &m = *ms[i++];
        for (Eigen::Index j = 0; j < w.size(); ++j) {
            const double gj = static_cast<double>(grad.data()[j]);
            const double mj = static_cast<double>(m.data()[j]);
            const double c = cfg.beta1 * mj + (1.0 - cfg.beta1) * gj;
            const double s = c > 0.0 ? 1.0 : (c < 0.0 ? -1.0 : 0.0);
            const double wj = static_cast<double>(w.data()[j]);
            w.data()[j] = static_cast<T>(wj * (1.0 - lr * cfg.weight_decay) - lr * s);
            m.data()[j] = static_cast<T>(cfg.beta2 * mj + (1.0 - cfg.beta2) * gj);
        }
    });
}

// ---------------------------------------------------------------------------
// Augmentation

/// With probability apply_prob, zeroes round(fraction * n) of the n
/// (token, feature) entries of real tokens, chosen uniformly without
/// replacement. Padding, mask and labels are never touched.
inline Batch mask_features(const Batch &batch, double apply_prob, double fraction, uint64_t seed) {
    if (!(apply_prob >= 0.0 && apply_prob <= 1.0 && fraction >= 0.0 && fraction <= 1.0)) {
        throw DomainError("mask_features needs apply_prob and fraction in [0, 1]");
    }
    Batch out = batch;
    Rng rng(seed);
    if (!(uniform01(rng) < apply_prob)) {
        return out;
    }
    std::vector<size_t> entries;
    for (size_t b = 0; b < batch.batch_size; ++b) {
        for (size_t j = 0; j < batch.k[b]; ++j) {
            for (size_t f = 0; f < static_cast<size_t>(kNumFeatures); ++f) {
                entries.push_back((b * batch.k_max + j) * kNumFeatures + f);
            }
        }
    }
    const size_t n = static_cast<size_t>(std::llround(fraction * static_cast<double>(entries.size())));
    for (size_t i = 0; i < n; ++i) {
        const size_t pick = i + static_cast<size_t>(uniform_index(rng, entries.size() - i));
        std::swap(entries[i], entries[pick]);
        out.features[entries[i]] = 0.0f;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training loop

struct CurriculumStage {
    int max_rounds = 1;
    long from_step = 0;  // stage applies once the step counter reaches this
};

/// Training hyperparameters. Field names double as the JSON keys.
struct TrainConfig {
    std::string optimizer = "adamw";  // adamw | lion
    double lr = 1e-4;
    double lr_floor = 1e-6;
    std::string schedule = "cosine";  // cosine | constant
    int epochs = 1;
    long samples_per_epoch = 10000;
    int batch_size = 256;
    std::vector<double> train_p{0.01, 0.05, 0.10, 0.15};
    std::optional<double> p_meas;  // phenomenological; default 2p/3
    int rounds = 1;                // phenomenological rounds when no curriculum
    uint64_t seed = 1;
    double weight_decay = 1e-2;
    double clip_norm = 1.0;
    double mask_prob = 0.0;
    double mask_fraction = 0.5;
    double ema_decay = 0.0;  // 0 = off
    std::vector<CurriculumStage> curriculum;
    // Validation: val_shots fresh shots at val_p from the val_seed stream,
    // every val_every steps and at the end. val_shots = 0 disables.
    long val_shots = 10000;
    double val_p = 0.05;
    uint64_t val_seed = 0x5eed0001;
    long val_every = 0;  // 0 = once per epoch
    int workers = 0;     // 0 = default_workers()

    OptimizerKind optimizer_kind() const {
        if (optimizer == "adamw") {
            return OptimizerKind::AdamW;
        }
        if (optimizer == "lion") {
            return OptimizerKind::Lion;
        }
        throw DomainError("unknown optimizer '" + optimizer + "'");
    }
    ScheduleKind schedule_kind() const {
        if (schedule == "cosine") {
            return ScheduleKind::Cosine;
        }
        if (schedule == "constant") {
            return ScheduleKind::Constant;
        }
        throw DomainError("unknown schedule '" + schedule + "'");
    }
    long steps_per_epoch() const { return (samples_per_epoch + batch_size - 1) / batch_size; }
    long total_steps() const { return steps_per_epoch() * epochs; }

    void validate() const {
        optimizer_kind();
        schedule_kind();
        if (epochs < 0 || samples_per_epoch < 1 || batch_size < 1 || rounds < 1) {
            throw DomainError("epochs >= 0, samples_per_epoch, batch_size and rounds >= 1 required");
        }
        if (!(lr > 0.0) || lr_floor < 0.0 || weight_decay < 0.0 || clip_norm < 0.0) {
            throw DomainError("learning rates, weight decay and clip norm must be non-negative (lr > 0)");
        }
        if (train_p.empty()) {
            throw DomainError("train_p must list at least one error rate");
        }
        for (double p : train_p) {
            if (!(p >= 0.0 && p < 1.0)) {
                throw DomainError("training error rates must lie in [0, 1)");
            }
        }
        if (!(mask_prob >= 0.0 && mask_prob <= 1.0 && mask_fraction >= 0.0 && mask_fraction <= 1.0)) {
            throw DomainError("mask_prob and mask_fraction must lie in [0, 1]");
        }
        if (!(ema_decay >= 0.0 && ema_decay < 1.0)) {
            throw DomainError("ema_decay must lie in [0, 1)");
        }
        if (val_shots < 0 || !(val_p >= 0.0 && val_p < 1.0)) {
            throw DomainError("invalid validation settings");
        }
        if (val_shots > 0 && val_seed == seed) {
            throw DomainError("validation seed must differ from the training seed");
        }
        for (const auto &s : curriculum) {
            if (s.max_rounds < 1 || s.from_step < 0) {
                throw DomainError("curriculum stages need max_rounds >= 1 and from_step >= 0");
            }
        }
    }

    OptimizerConfig optimizer_config() const {
        OptimizerConfig o;
        o.kind = optimizer_kind();
        o.weight_decay = weight_decay;
        if (o.kind == OptimizerKind::Lion) {
            o.beta2 = 0.99;
        }
        return o;
    }

    /// Rounds in force at a given step.
    int rounds_at(long step) const {
        int r = rounds;
        long best = -1;
        for (const auto &s : curriculum) {
            if (s.from_step <= step && s.from_step > best) {
                best = s.from_step;
                r = s.max_rounds;
            }
        }
        return r;
    }
};

inline void to_json(nlohmann::json &j, const CurriculumStage &s) {
    j = nlohmann::json{{"max_rounds", s.max_rounds}, {"from_step", s.from_step}};
}
inline void from_json(const nlohmann::json &j, CurriculumStage &s) {
    s.max_rounds = j.at("max_rounds").get<int>();
    s.from_step = j.at("from_step").get<long>();
}

inline void to_json(nlohmann::json &j, const TrainConfig &c) {
    j = nlohmann::json{{"optimizer", c.optimizer},
                       {"lr", c.lr},
                       {"lr_floor", c.lr_floor},
                       {"schedule", c.schedule},
                       {"epochs", c.epochs},
                       {"samples_per_epoch", c.samples_per_epoch},
                       {"batch_size", c.batch_size},
                       {"train_p", c.train_p},
                       {"rounds", c.rounds},
                       {"seed", c.seed},
                       {"weight_decay", c.weight_decay},
                       {"clip_norm", c.clip_norm},
                       {"mask_prob", c.mask_prob},
                       {"mask_fraction", c.mask_fraction},
                       {"ema_decay", c.ema_decay},
                       {"curriculum", c.curriculum},
                       {"val_shots", c.val_shots},
                       {"val_p", c.val_p},
                       {"val_seed", c.val_seed},
                       {"val_every", c.val_every}};
    if (c.p_meas) {
        j["p_meas"] = *c.p_meas;
    }
}

inline void from_json(const nlohmann::json &j, TrainConfig &c) {
    TrainConfig d;
    c.optimizer = j.value("optimizer", d.optimizer);
    c.lr = j.value("lr", d.lr);
    c.lr_floor = j.value("lr_floor", d.lr_floor);
    c.schedule = j.value("schedule", d.schedule);
    c.epochs = j.value("epochs", d.epochs);
    c.samples_per_epoch = j.value("samples_per_epoch", d.samples_per_epoch);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.train_p = j.value("train_p", d.train_p);
    if (j.contains("p_meas") && !j["p_meas"].is_null()) {
        c.p_meas = j["p_meas"].get<double>();
    }
    c.rounds = j.value("rounds", d.rounds);
    c.seed = j.value("seed", d.seed);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.clip_norm = j.value("clip_norm", d.clip_norm);
    c.mask_prob = j.value("mask_prob", d.mask_prob);
    c.mask_fraction = j.value("mask_fraction", d.mask_fraction);
    c.ema_decay = j.value("ema_decay", d.ema_decay);
    c.curriculum = j.value("curriculum", d.curriculum);
    c.val_shots = j.value("val_shots", d.val_shots);
    c.val_p = j.value("val_p", d.val_p);
    c.val_seed = j.value("val_seed", d.val_seed);
    c.val_every = j.value("val_every", d.val_every);
    c.workers = j.value("workers", d.workers);
    c.validate();
}

struct HistoryRow {
    long step = 0;
    int epoch = 0;
    double lr = 0.0;
    double loss = 0.0;
    double val_ler = std::numeric_limits<double>::quiet_NaN();  // NaN = not evaluated
    double wallclock = 0.0;                                      // seconds since start
};

inline void write_history_csv(const std::string &path, const std::vector<HistoryRow> &history) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot open '" + path + "' for writing");
    }
    out << "step,epoch,lr,loss,val_ler,wallclock\n";
    char buf[256];
    for (const auto &r : history) {
        std::string val = std::isnan(r.val_ler) ? "" : std::to_string(r.val_ler);
        std::snprintf(buf, sizeof buf, "%ld,%d,%.9g,%.9g,%s,%.3f\n", r.step, r.epoch, r.lr, r.loss, val.c_str(),
                      r.wallclock);
        out << buf;
    }
}

/// Labels per head and combined failures of a model on a list of shots.
struct FailureCount {
    size_t shots = 0;
    size_t failures = 0;  // any head wrong
    size_t head_failures[2] = {0, 0};
    size_t truncated = 0;
};

/// Decodes shots in batches and counts failures. A single-head model is
/// scored on lambda_Z only.
template <class T>
FailureCount count_model_failures(const Parameters<T> &p, std::span<const Shot> shots, const Lattice &lattice,
                                  size_t batch_size = 1024) {
    FailureCount fc;
    const size_t k_max = static_cast<size_t>(p.config.k_max);
    for (size_t start = 0; start < shots.size(); start += batch_size) {
        const size_t end = std::min(shots.size(), start + batch_size);
        const Batch batch = make_batch(shots.subspan(start, end - start), lattice, k_max);
        const Predictions pred = forward(p, batch);
        for (size_t b = 0; b < batch.batch_size; ++b) {
            bool wrong = false;
            for (int h = 0; h < p.config.heads; ++h) {
                const bool w = pred.predicted(b, h) != static_cast<uint8_t>(batch.label(b, static_cast<size_t>(h)));
                fc.head_failures[h] += w;
                wrong |= w;
            }
            fc.failures += wrong;
            fc.truncated += batch.truncated[b];
        }
        fc.shots += batch.batch_size;
    }
    return fc;
}

/// Shots for a noise setting drawn from stream (master, first .. first+n-1),
/// generated in parallel; the result does not depend on the worker count.
inline std::vector<Shot> sample_range(const Lattice &lattice, const NoiseConfig &noise, uint64_t master,
                                      uint64_t first, size_t n, int workers) {
    std::vector<Shot> shots(n);
    parallel_chunks(n, workers, [&](size_t, size_t begin, size_t end) {
        for (size_t i = begin; i < end; ++i) {
            shots[i] = sample_indexed(lattice, noise, master, first + i);
        }
    });
    return shots;
}

struct TrainResult {
    Parameters<float> params;       // after the last step
    Parameters<float> best_params;  // lowest validation LER (last if never validated)
    std::optional<Parameters<float>> ema;
    double best_val_ler = std::numeric_limits<double>::quiet_NaN();
    std::vector<HistoryRow> history;
};

/// Fresh-data training. Each step draws p uniformly from train_p, samples
/// batch_size new shots from the (seed, global shot index) stream, applies
/// masking augmentation, and takes one optimizer step. With EMA enabled the
/// shadow weights are what validation scores.
inline TrainResult train(const ModelConfig &model_config, const TrainConfig &tc, const Lattice &lattice,
                         NoiseKind kind, std::ostream *log = nullptr) {
    model_config.validate();
    tc.validate();
    const int workers = tc.workers > 0 ? tc.workers : default_workers();
    TrainResult res;
    res.params = init_params<float>(model_config, splitmix64(tc.seed ^ 0x1234567ULL));
    res.best_params = res.params;
    if (tc.epochs == 0) {
        return res;
    }
    if (tc.ema_decay > 0.0) {
        res.ema = res.params;
    }
    const OptimizerConfig oc = tc.optimizer_config();
    OptState<float> st = make_opt_state(res.params);
    Rng rng(splitmix64(tc.seed));
    Rng dropout_rng(splitmix64(tc.seed ^ 0xD0D0ULL));
    const long total = tc.total_steps();
    const size_t k_max = static_cast<size_t>(model_config.k_max);

    std::vector<Shot> val_shots;
    if (tc.val_shots > 0) {
        NoiseConfig vn{kind, tc.val_p, tc.p_meas, kind == NoiseKind::CodeCapacity ? 1 : tc.rounds_at(total)};
        val_shots = sample_range(lattice, vn, tc.val_seed, 0, static_cast<size_t>(tc.val_shots), workers);
    }
    const auto t0 = std::chrono::steady_clock::now();
    const auto validate_now = [&](HistoryRow &row) {
        const Parameters<float> &scored = res.ema ? *res.ema : res.params;
        const auto fc = count_model_failures(scored, val_shots, lattice);
        row.val_ler = static_cast<double>(fc.failures) / static_cast<double>(fc.shots);
        if (std::isnan(res.best_val_ler) || row.val_ler < res.best_val_ler) {
            res.best_val_ler = row.val_ler;
            res.best_params = scored;
        }
    };

    uint64_t shot_index = 0;
    long step = 0;
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        long remaining = tc.samples_per_epoch;
        for (long s = 0; s < tc.steps_per_epoch(); ++s, ++step) {
            const size_t n = static_cast<size_t>(std::min<long>(remaining, tc.batch_size));
            remaining -= static_cast<long>(n);
            const double p = tc.train_p[uniform_index(rng, tc.train_p.size())];
            const int rounds = kind == NoiseKind::CodeCapacity ? 1 : tc.rounds_at(step);
            const NoiseConfig noise{kind, p, tc.p_meas, rounds};
            const auto shots = sample_range(lattice, noise, tc.seed, shot_index, n, workers);
            shot_index += n;
            Batch batch = make_batch(shots, lattice, k_max);
            if (tc.mask_prob > 0.0) {
                batch = mask_features(batch, tc.mask_prob, tc.mask_fraction, rng());
            }
            auto br = backward(res.params, batch, model_config.dropout > 0.0 ? &dropout_rng : nullptr);
            clip_grad_norm(br.grads, tc.clip_norm);
            const double lr = scheduled_lr(tc.schedule_kind(), tc.lr, tc.lr_floor, step, total);
            if (oc.kind == OptimizerKind::AdamW) {
                adamw_step(res.params, br.grads, st, oc, lr);
            } else {
                lion_step(res.params, br.grads, st, oc, lr);
            }
            if (res.ema) {
                const float d = static_cast<float>(tc.ema_decay);
                zip_tensors(*res.ema, res.params,
                            [&](const std::string &, Mat<float> &e, const Mat<float> &w) { e = d * e + (1.0f - d) * w; });
            }
            HistoryRow row;
            row.step = step;
            row.epoch = epoch;
            row.lr = lr;
            row.loss = br.loss;
            const bool last = step + 1 == total;
            const bool periodic = tc.val_every > 0 ? (step + 1) % tc.val_every == 0 : s + 1 == tc.steps_per_epoch();
            if (!val_shots.empty() && (periodic || last)) {
                validate_now(row);
            }
            row.wallclock = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            if (log && !std::isnan(row.val_ler)) {
                *log << "step " << row.step << " epoch " << epoch << " lr " << lr << " loss " << row.loss
                     << " val_ler " << row.val_ler << "\n";
            }
            res.history.push_back(row);
        }
    }
    if (val_shots.empty()) {
        res.best_params = res.ema ? *res.ema : res.params;
    }
    return res;
}

// ---------------------------------------------------------------------------
// Gradient verification

/// Adds uniform noise in +-scale to every parameter. Gradient checks run on
/// jittered weights because the default init leaves the scan's B, C and dt
/// paths with gradients near the finite-difference noise floor.
template <class T>
void jitter_params(Parameters<T> &p, double scale, uint64_t seed) {
    Rng rng(seed);
    detail::visit_tensors(p, [&](const std::string &, const std::vector<size_t> &, Mat<T> &m) {
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            m.data()[i] += static_cast<T>(scale * (2.0 * uniform01(rng) - 1.0));
        }
    });
}

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_tensor;
    size_t checked = 0;
};

/// Compares backward() against central differences with step h, in double.
/// Relative error per entry is |a - f| / max(|a|, |f|, floor); the floor keeps
/// entries whose gradient is at the finite-difference noise level (about 1e-11
/// for h = 1e-5) from dominating. With
/// max_entries > 0 only that many entries per tensor are probed (evenly spaced).
inline GradCheckResult gradcheck(const Parameters<double> &p, const Batch &batch, double h = 1e-5,
                                 double floor = 1e-6, size_t max_entries = 0) {
    const auto analytic = backward(p, batch).grads;
    Parameters<double> work = p;
    std::vector<std::pair<std::string, Mat<double> *>> params;
    detail::visit_tensors(work, [&](const std::string &name, const std::vector<size_t> &, Mat<double> &m) {
        params.emplace_back(name, &m);
    });
    std::vector<const Mat<double> *> grads;
    detail::visit_tensors(analytic, [&](const std::string &, const std::vector<size_t> &, const Mat<double> &m) {
        grads.push_back(&m);
    });
    GradCheckResult res;
    for (size_t t = 0; t < params.size(); ++t) {
        Mat<double> &m = *params[t].second;
        const Eigen::Index n = m.size();
        const Eigen::Index stride =
            max_entries > 0 && static_cast<size_t>(n) > max_entries ? n / static_cast<Eigen::Index>(max_entries) : 1;
        for (Eigen::Index i = 0; i < n; i += stride) {
            const double orig = m.data()[i];
            m.data()[i] = orig + h;
            const double up = batch_loss(work, batch);
            m.data()[i] = orig - h;
            const double down = batch_loss(work, batch);
            m.data()[i] = orig;
            const double fd = (up - down) / (2.0 * h);
            const double a = grads[t]->data()[i];
            const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), floor});
            ++res.checked;
            if (rel > res.max_rel_error) {
                res.max_rel_error = rel;
                res.worst_tensor = params[t].first;
            }
        }
    }
    return res;
}

}  // namespace smd
