#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "kfcl/data.hpp"
#include "kfcl/errors.hpp"
#include "kfcl/model.hpp"
#include "kfcl/tensor.hpp"

namespace kfcl {

// Receives every use of a Linear/Conv1d parameter slot during a
// per-instance backward pass: the augmented input x' (bias constant
// appended when the layer has one) and the gradient of the instance loss at
// the layer output y. Conv positions, attention positions, and per-candidate
// scoring calls each count as one use.
class UsageObserver {
public:
    virtual ~UsageObserver() = default;
    virtual void on_usage(std::size_t slot, const double* x_aug, std::size_t x_len,
                          const double* dy, std::size_t y_len) = 0;
};

namespace detail {

inline void ensure_matrix(Tensor& t, std::size_t rows, std::size_t cols) {
    if (t.rank() != 2 || t.rows() != rows || t.cols() != cols) t = Tensor::matrix(rows, cols);
}

// y = W'^T x' for one position; W is (p [+1]) x q.
inline void linear_apply(const Tensor& w, bool bias, const double* x, std::size_t p, double* y,
                         std::size_t q) {
    for (std::size_t j = 0; j < q; ++j) y[j] = bias ? w(p, j) : 0.0;
    for (std::size_t i = 0; i < p; ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        const double* wrow = w.row(i);
        for (std::size_t j = 0; j < q; ++j) y[j] += xi * wrow[j];
    }
}

// dx = W_weight dy (bias row excluded); dW += weight * x' dy^T.
inline void linear_backward_position(const Tensor& w, bool bias, const double* x, std::size_t p,
                                     const double* dy, std::size_t q, double* dx, Tensor& dw,
                                     double weight) {
    if (dx) {
        for (std::size_t i = 0; i < p; ++i) dx[i] += dot(w.row(i), dy, q);
    }
    for (std::size_t i = 0; i < p; ++i) {
        const double xi = x[i] * weight;
        if (xi == 0.0) continue;
        double* drow = dw.row(i);
        for (std::size_t j = 0; j < q; ++j) drow[j] += xi * dy[j];
    }
    if (bias) {
        double* drow = dw.row(p);
        for (std::size_t j = 0; j < q; ++j) drow[j] += weight * dy[j];
    }
}

inline double activate(ActivationKind k, double v) {
    switch (k) {
        case ActivationKind::ReLU: return v > 0.0 ? v : 0.0;
        case ActivationKind::Tanh: return std::tanh(v);
        case ActivationKind::Identity: return v;
    }
    return v;
}

inline double activate_grad(ActivationKind k, double in, double out) {
    switch (k) {
        case ActivationKind::ReLU: return in > 0.0 ? 1.0 : 0.0;
        case ActivationKind::Tanh: return 1.0 - out * out;
        case ActivationKind::Identity: return 1.0;
    }
    return 1.0;
}

} // namespace detail

// Reusable per-instance activation/gradient buffers. Reusing one Workspace
// across instances avoids reallocation in training loops.
struct Workspace {
    struct AttnTrace {
        Tensor q, k, v, p, ctx;
        Tensor dq, dk, dv, ds, dctx;
    };

    std::vector<Tensor> seq;                  // seq[b] = input of block b; seq[nblocks] = final
    std::vector<AttnTrace> attn;              // per block, used for attention blocks
    std::vector<Tensor> ln_xhat;              // per block, used for layernorm
    std::vector<std::vector<double>> ln_istd; // per block, per row 1/sqrt(var+eps)
    std::vector<double> pooled;               // mean-pooled context vector

    // scoring_act[c][j] = input of scoring layer j for candidate c; the last
    // entry is the final activation (the score).
    std::vector<std::vector<std::vector<double>>> scoring_act;
    std::vector<double> scores;
    std::vector<double> dscores;

    std::vector<Tensor> dseq;                 // gradient buffers mirroring seq
    std::vector<double> x_aug;                // scratch for augmented inputs
    std::vector<double> dh;
};

inline constexpr double kLayerNormEps = 1e-5;

namespace detail {

inline void context_forward(const Model& m, const RankingInstance& inst, Workspace& ws) {
    const std::size_t nb = m.context_blocks.size();
    ws.seq.resize(nb + 1);
    ws.attn.resize(nb);
    ws.ln_xhat.resize(nb);
    ws.ln_istd.resize(nb);

    for (std::size_t b = 0; b < nb; ++b) {
        const Block& blk = m.context_blocks[b];
        const Tensor* in = (b == 0) ? nullptr : &ws.seq[b];
        Tensor& out = ws.seq[b + 1];

        if (blk.kind == Block::Kind::Plain) {
            const LayerSpec& spec = m.layers[blk.first_layer];
            switch (spec.kind) {
                case LayerKind::Embedding: {
                    const Tensor& table = m.params[m.slot_of_layer[blk.first_layer]];
                    const std::size_t T = inst.context.size();
                    ensure_matrix(out, T, spec.output_dim);
                    for (std::size_t t = 0; t < T; ++t) {
                        const std::uint32_t tok = inst.context[t];
                        if (tok >= spec.input_dim)
                            throw ConfigError("token id out of vocabulary range");
                        std::copy_n(table.row(tok), spec.output_dim, out.row(t));
                    }
                    break;
                }
                case LayerKind::Linear: {
                    const Tensor& w = m.params[m.slot_of_layer[blk.first_layer]];
                    const std::size_t T = in->rows();
                    ensure_matrix(out, T, spec.output_dim);
                    for (std::size_t t = 0; t < T; ++t)
                        linear_apply(w, spec.has_bias, in->row(t), spec.input_dim, out.row(t),
                                     spec.output_dim);
                    break;
                }
                case LayerKind::Conv1d: {
                    const Tensor& w = m.params[m.slot_of_layer[blk.first_layer]];
                    const std::size_t T = in->rows();
                    if (T < spec.kernel_width)
                        throw ConfigError("context shorter than conv kernel");
                    const std::size_t To = T - spec.kernel_width + 1;
                    const std::size_t patch = spec.kernel_width * spec.input_dim;
                    ensure_matrix(out, To, spec.output_dim);
                    for (std::size_t t = 0; t < To; ++t)
                        linear_apply(w, spec.has_bias, in->row(t), patch, out.row(t),
                                     spec.output_dim);  // rows t..t+kw-1 are contiguous
                    break;
                }
                case LayerKind::LayerNorm: {
                    const Tensor& w = m.params[m.slot_of_layer[blk.first_layer]];
                    const std::size_t T = in->rows(), d = spec.output_dim;
                    ensure_matrix(out, T, d);
                    ensure_matrix(ws.ln_xhat[b], T, d);
                    ws.ln_istd[b].assign(T, 0.0);
                    for (std::size_t t = 0; t < T; ++t) {
                        const double* x = in->row(t);
                        double mean = 0.0;
                        for (std::size_t j = 0; j < d; ++j) mean += x[j];
                        mean /= static_cast<double>(d);
                        double var = 0.0;
                        for (std::size_t j = 0; j < d; ++j) {
                            const double c = x[j] - mean;
                            var += c * c;
                        }
                        var /= static_cast<double>(d);
                        const double istd = 1.0 / std::sqrt(var + kLayerNormEps);
                        ws.ln_istd[b][t] = istd;
                        double* xh = ws.ln_xhat[b].row(t);
                        double* o = out.row(t);
                        for (std::size_t j = 0; j < d; ++j) {
                            xh[j] = (x[j] - mean) * istd;
                            o[j] = w(0, j) * xh[j] + w(1, j);
                        }
                    }
                    break;
                }
                case LayerKind::Activation: {
                    const std::size_t T = in->rows(), d = spec.output_dim;
                    ensure_matrix(out, T, d);
                    for (std::size_t i = 0; i < in->size(); ++i)
                        out.values()[i] = activate(spec.activation_kind, in->values()[i]);
                    break;
                }
            }
        } else {
            // Single-head self-attention with a residual connection.
            const LayerSpec& qs = m.layers[blk.first_layer];
            const Tensor& wq = m.params[m.slot_of_layer[blk.first_layer]];
            const Tensor& wk = m.params[m.slot_of_layer[blk.first_layer + 1]];
            const Tensor& wv = m.params[m.slot_of_layer[blk.first_layer + 2]];
            const Tensor& wo = m.params[m.slot_of_layer[blk.first_layer + 3]];
            const LayerSpec& os = m.layers[blk.first_layer + 3];
            const std::size_t T = in->rows(), d = qs.input_dim, da = qs.output_dim;
            auto& tr = ws.attn[b];
            ensure_matrix(tr.q, T, da);
            ensure_matrix(tr.k, T, da);
            ensure_matrix(tr.v, T, da);
            ensure_matrix(tr.p, T, T);
            ensure_matrix(tr.ctx, T, da);
            for (std::size_t t = 0; t < T; ++t) {
                linear_apply(wq, qs.has_bias, in->row(t), d, tr.q.row(t), da);
                linear_apply(wk, qs.has_bias, in->row(t), d, tr.k.row(t), da);
                linear_apply(wv, qs.has_bias, in->row(t), d, tr.v.row(t), da);
            }
            const double alpha = 1.0 / std::sqrt(static_cast<double>(da));
            for (std::size_t t = 0; t < T; ++t) {
                double* prow = tr.p.row(t);
                double mx = -1e300;
                for (std::size_t u = 0; u < T; ++u) {
                    prow[u] = alpha * dot(tr.q.row(t), tr.k.row(u), da);
                    mx = std::max(mx, prow[u]);
                }
                double sum = 0.0;
                for (std::size_t u = 0; u < T; ++u) {
                    prow[u] = std::exp(prow[u] - mx);
                    sum += prow[u];
                }
                for (std::size_t u = 0; u < T; ++u) prow[u] /= sum;
            }
            for (std::size_t t = 0; t < T; ++t) {
                double* c = tr.ctx.row(t);
                std::fill_n(c, da, 0.0);
                const double* prow = tr.p.row(t);
                for (std::size_t u = 0; u < T; ++u) {
                    const double pv = prow[u];
                    const double* vrow = tr.v.row(u);
                    for (std::size_t j = 0; j < da; ++j) c[j] += pv * vrow[j];
                }
            }
            ensure_matrix(out, T, d);
            for (std::size_t t = 0; t < T; ++t) {
                linear_apply(wo, os.has_bias, tr.ctx.row(t), da, out.row(t), d);
                const double* x = in->row(t);
                double* o = out.row(t);
                for (std::size_t j = 0; j < d; ++j) o[j] += x[j];
            }
        }
    }

    // Mean pool over positions.
    const std::size_t enc = m.encoded_dim();
    ws.pooled.assign(enc, 0.0);
    if (enc > 0) {
        const Tensor& last = ws.seq[nb];
        const std::size_t T = last.rows();
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t j = 0; j < enc; ++j) ws.pooled[j] += last(t, j);
        for (std::size_t j = 0; j < enc; ++j) ws.pooled[j] /= static_cast<double>(last.rows());
    }
}

inline void scoring_forward(const Model& m, const RankingInstance& inst, Workspace& ws) {
    const std::size_t k = m.candidate_count;
    const std::size_t enc = m.encoded_dim();
    const std::size_t nl = m.layers.size() - m.scoring_start;
    ws.scoring_act.resize(k);
    ws.scores.assign(k, 0.0);
    for (std::size_t c = 0; c < k; ++c) {
        auto& acts = ws.scoring_act[c];
        acts.resize(nl + 1);
        acts[0].resize(enc + m.candidate_dim);
        std::copy(ws.pooled.begin(), ws.pooled.end(), acts[0].begin());
        std::copy_n(inst.candidates.row(c), m.candidate_dim, acts[0].begin() + enc);
        for (std::size_t j = 0; j < nl; ++j) {
            const LayerSpec& spec = m.layers[m.scoring_start + j];
            acts[j + 1].resize(spec.output_dim);
            if (spec.kind == LayerKind::Linear) {
                const Tensor& w = m.params[m.slot_of_layer[m.scoring_start + j]];
                linear_apply(w, spec.has_bias, acts[j].data(), spec.input_dim, acts[j + 1].data(),
                             spec.output_dim);
            } else {
                for (std::size_t i = 0; i < spec.output_dim; ++i)
                    acts[j + 1][i] = activate(spec.activation_kind, acts[j][i]);
            }
        }
        ws.scores[c] = acts[nl][0];
    }
}

inline void check_instance(const Model& m, const RankingInstance& inst) {
    if (inst.candidate_count() != m.candidate_count)
        throw ConfigError("instance candidate count does not match the model");
    if (inst.candidate_dim() != m.candidate_dim)
        throw ConfigError("instance candidate features do not match the model");
    if (m.scoring_start > 0 && inst.context.empty())
        throw ConfigError("instance has no context but the model encodes one");
}

} // namespace detail

// Scores all candidates of one instance. Deterministic in (params, instance).
inline std::vector<double> forward(const Model& m, const RankingInstance& inst, Workspace& ws) {
    detail::check_instance(m, inst);
    detail::context_forward(m, inst, ws);
    detail::scoring_forward(m, inst, ws);
    return ws.scores;
}

inline std::vector<double> forward(const Model& m, const RankingInstance& inst) {
    Workspace ws;
    return forward(m, inst, ws);
}

// Numerically stable mean softmax cross-entropy pieces.
inline double softmax_cross_entropy(const std::vector<double>& scores, std::size_t positive,
                                    std::vector<double>* dscores = nullptr) {
    const std::size_t k = scores.size();
    double mx = scores[0];
    for (double s : scores) mx = std::max(mx, s);
    double sum = 0.0;
    for (double s : scores) sum += std::exp(s - mx);
    const double lse = mx + std::log(sum);
    if (dscores) {
        dscores->resize(k);
        for (std::size_t c = 0; c < k; ++c) (*dscores)[c] = std::exp(scores[c] - mx) / sum;
        (*dscores)[positive] -= 1.0;
    }
    return lse - scores[positive];
}

inline void backward_attention(const Model& m, const Block& blk, std::size_t b, const Tensor& dout,
                               const Tensor& in, Tensor& din, Workspace& ws, GradientSet& grads,
                               double weight, UsageObserver* observer);

// Computes the instance loss and accumulates `weight` times its parameter
// gradient into `grads` (shape-congruent with the model's slots). The
// observer, when given, sees every kron-factorable layer use with gradients
// of the *unweighted* instance loss.
inline double instance_loss_and_backward(const Model& m, const RankingInstance& inst,
                                         Workspace& ws, GradientSet& grads, double weight,
                                         UsageObserver* observer = nullptr) {
    using namespace detail;
    check_instance(m, inst);
    context_forward(m, inst, ws);
    scoring_forward(m, inst, ws);
    const double loss = softmax_cross_entropy(ws.scores, inst.positive, &ws.dscores);

    const std::size_t enc = m.encoded_dim();
    const std::size_t nl = m.layers.size() - m.scoring_start;
    ws.dh.assign(enc, 0.0);

    // Scoring head backward, one pass per candidate.
    std::vector<double> dcur, dnext;
    for (std::size_t c = 0; c < m.candidate_count; ++c) {
        dcur.assign(1, ws.dscores[c]);
        for (std::size_t j = nl; j-- > 0;) {
            const std::size_t li = m.scoring_start + j;
            const LayerSpec& spec = m.layers[li];
            const auto& x = ws.scoring_act[c][j];
            dnext.assign(spec.input_dim, 0.0);
            if (spec.kind == LayerKind::Linear) {
                const std::size_t slot = m.slot_of_layer[li];
                if (observer) {
                    ws.x_aug.assign(x.begin(), x.end());
                    if (spec.has_bias) ws.x_aug.push_back(1.0);
                    observer->on_usage(slot, ws.x_aug.data(), ws.x_aug.size(), dcur.data(),
                                       spec.output_dim);
                }
                linear_backward_position(m.params[slot], spec.has_bias, x.data(), spec.input_dim,
                                         dcur.data(), spec.output_dim, dnext.data(), grads[slot],
                                         weight);
            } else {
                const auto& y = ws.scoring_act[c][j + 1];
                for (std::size_t i = 0; i < spec.input_dim; ++i)
                    dnext[i] = dcur[i] * activate_grad(spec.activation_kind, x[i], y[i]);
            }
            std::swap(dcur, dnext);
        }
        for (std::size_t i = 0; i < enc; ++i) ws.dh[i] += dcur[i];
    }

    if (m.scoring_start == 0) return loss;

    // Mean-pool backward into the final context sequence.
    const std::size_t nb = m.context_blocks.size();
    ws.dseq.resize(nb + 1);
    const std::size_t Tlast = ws.seq[nb].rows();
    ensure_matrix(ws.dseq[nb], Tlast, enc);
    ws.dseq[nb].fill(0.0);
    for (std::size_t t = 0; t < Tlast; ++t)
        for (std::size_t j = 0; j < enc; ++j)
            ws.dseq[nb](t, j) = ws.dh[j] / static_cast<double>(Tlast);

    // Context blocks, reversed.
    for (std::size_t b = nb; b-- > 0;) {
        const Block& blk = m.context_blocks[b];
        const Tensor& dout = ws.dseq[b + 1];
        const Tensor* in = (b == 0) ? nullptr : &ws.seq[b];
        if (b > 0) {
            ensure_matrix(ws.dseq[b], in->rows(), in->cols());
            ws.dseq[b].fill(0.0);
        }
        Tensor* din = (b == 0) ? nullptr : &ws.dseq[b];

        if (blk.kind == Block::Kind::Plain) {
            const LayerSpec& spec = m.layers[blk.first_layer];
            switch (spec.kind) {
                case LayerKind::Embedding: {
                    const std::size_t slot = m.slot_of_layer[blk.first_layer];
                    for (std::size_t t = 0; t < inst.context.size(); ++t) {
                        double* grow = grads[slot].row(inst.context[t]);
                        const double* drow = dout.row(t);
                        for (std::size_t j = 0; j < spec.output_dim; ++j)
                            grow[j] += weight * drow[j];
                    }
                    break;
                }
                case LayerKind::Linear: {
                    const std::size_t slot = m.slot_of_layer[blk.first_layer];
                    for (std::size_t t = 0; t < in->rows(); ++t) {
                        if (observer) {
                            ws.x_aug.assign(in->row(t), in->row(t) + spec.input_dim);
                            if (spec.has_bias) ws.x_aug.push_back(1.0);
                            observer->on_usage(slot, ws.x_aug.data(), ws.x_aug.size(), dout.row(t),
                                               spec.output_dim);
                        }
                        linear_backward_position(m.params[slot], spec.has_bias, in->row(t),
                                                 spec.input_dim, dout.row(t), spec.output_dim,
                                                 din ? din->row(t) : nullptr, grads[slot], weight);
                    }
                    break;
                }
                case LayerKind::Conv1d: {
                    const std::size_t slot = m.slot_of_layer[blk.first_layer];
                    const std::size_t patch = spec.kernel_width * spec.input_dim;
                    for (std::size_t t = 0; t < dout.rows(); ++t) {
                        if (observer) {
                            ws.x_aug.assign(in->row(t), in->row(t) + patch);
                            if (spec.has_bias) ws.x_aug.push_back(1.0);
                            observer->on_usage(slot, ws.x_aug.data(), ws.x_aug.size(), dout.row(t),
                                               spec.output_dim);
                        }
                        linear_backward_position(m.params[slot], spec.has_bias, in->row(t), patch,
                                                 dout.row(t), spec.output_dim,
                                                 din ? din->row(t) : nullptr, grads[slot], weight);
                    }
                    break;
                }
                case LayerKind::LayerNorm: {
                    const std::size_t slot = m.slot_of_layer[blk.first_layer];
                    const std::size_t d = spec.output_dim;
                    const Tensor& w = m.params[m.slot_of_layer[blk.first_layer]];
                    for (std::size_t t = 0; t < in->rows(); ++t) {
                        const double* dy = dout.row(t);
                        const double* xh = ws.ln_xhat[b].row(t);
                        const double istd = ws.ln_istd[b][t];
                        double* g0 = grads[slot].row(0);
                        double* g1 = grads[slot].row(1);
                        double m1 = 0.0, m2 = 0.0;
                        for (std::size_t j = 0; j < d; ++j) {
                            g0[j] += weight * dy[j] * xh[j];
                            g1[j] += weight * dy[j];
                            const double dxh = dy[j] * w(0, j);
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 /= static_cast<double>(d);
                        m2 /= static_cast<double>(d);
                        double* dx = din->row(t);
                        for (std::size_t j = 0; j < d; ++j) {
                            const double dxh = dy[j] * w(0, j);
                            dx[j] += istd * (dxh - m1 - xh[j] * m2);
                        }
                    }
                    break;
                }
                case LayerKind::Activation: {
                    for (std::size_t i = 0; i < in->size(); ++i)
                        din->values()[i] += dout.values()[i] *
                                            activate_grad(spec.activation_kind, in->values()[i],
                                                          ws.seq[b + 1].values()[i]);
                    break;
                }
            }
        } else {
            backward_attention(m, blk, b, dout, *in, *din, ws, grads, weight, observer);
        }
    }
    return loss;
}

// Self-attention backward; kept out of line for readability.
inline void backward_attention(const Model& m, const Block& blk, std::size_t b, const Tensor& dout,
                               const Tensor& in, Tensor& din, Workspace& ws, GradientSet& grads,
                               double weight, UsageObserver* observer) {
    using namespace detail;
    const LayerSpec& qs = m.layers[blk.first_layer];
    const LayerSpec& os = m.layers[blk.first_layer + 3];
    const std::size_t slot_q = m.slot_of_layer[blk.first_layer];
    const std::size_t slot_k = m.slot_of_layer[blk.first_layer + 1];
    const std::size_t slot_v = m.slot_of_layer[blk.first_layer + 2];
    const std::size_t slot_o = m.slot_of_layer[blk.first_layer + 3];
    const std::size_t T = in.rows(), d = qs.input_dim, da = qs.output_dim;
    auto& tr = ws.attn[b];
    const double alpha = 1.0 / std::sqrt(static_cast<double>(da));

    // Residual.
    for (std::size_t i = 0; i < din.size(); ++i) din.values()[i] += dout.values()[i];

    // Output projection: y_t = Wo' ctx'_t.
    ensure_matrix(tr.dctx, T, da);
    tr.dctx.fill(0.0);
    for (std::size_t t = 0; t < T; ++t) {
        if (observer) {
            ws.x_aug.assign(tr.ctx.row(t), tr.ctx.row(t) + da);
            if (os.has_bias) ws.x_aug.push_back(1.0);
            observer->on_usage(slot_o, ws.x_aug.data(), ws.x_aug.size(), dout.row(t), d);
        }
        linear_backward_position(m.params[slot_o], os.has_bias, tr.ctx.row(t), da, dout.row(t), d,
                                 tr.dctx.row(t), grads[slot_o], weight);
    }

    // ctx = P V.
    ensure_matrix(tr.ds, T, T);
    ensure_matrix(tr.dv, T, da);
    tr.dv.fill(0.0);
    for (std::size_t t = 0; t < T; ++t) {
        // dP row then softmax backward in place.
        double* dsrow = tr.ds.row(t);
        const double* prow = tr.p.row(t);
        double inner = 0.0;
        for (std::size_t u = 0; u < T; ++u) {
            dsrow[u] = dot(tr.dctx.row(t), tr.v.row(u), da);
            inner += dsrow[u] * prow[u];
        }
        for (std::size_t u = 0; u < T; ++u) dsrow[u] = prow[u] * (dsrow[u] - inner);
        for (std::size_t u = 0; u < T; ++u) {
            const double pv = prow[u];
            const double* dc = tr.dctx.row(t);
            double* dvrow = tr.dv.row(u);
            for (std::size_t j = 0; j < da; ++j) dvrow[j] += pv * dc[j];
        }
    }

    // S = alpha Q K^T.
    ensure_matrix(tr.dq, T, da);
    ensure_matrix(tr.dk, T, da);
    tr.dq.fill(0.0);
    tr.dk.fill(0.0);
    for (std::size_t t = 0; t < T; ++t) {
        const double* dsrow = tr.ds.row(t);
        for (std::size_t u = 0; u < T; ++u) {
            const double sv = alpha * dsrow[u];
            if (sv == 0.0) continue;
            const double* krow = tr.k.row(u);
            const double* qrow = tr.q.row(t);
            double* dqrow = tr.dq.row(t);
            double* dkrow = tr.dk.row(u);
            for (std::size_t j = 0; j < da; ++j) {
                dqrow[j] += sv * krow[j];
                dkrow[j] += sv * qrow[j];
            }
        }
    }

    // Q/K/V projections share the block input.
    const Tensor* douts[3] = {&tr.dq, &tr.dk, &tr.dv};
    const std::size_t slots[3] = {slot_q, slot_k, slot_v};
    for (int proj = 0; proj < 3; ++proj) {
        for (std::size_t t = 0; t < T; ++t) {
            if (observer) {
                ws.x_aug.assign(in.row(t), in.row(t) + d);
                if (qs.has_bias) ws.x_aug.push_back(1.0);
                observer->on_usage(slots[proj], ws.x_aug.data(), ws.x_aug.size(),
                                   douts[proj]->row(t), da);
            }
            linear_backward_position(m.params[slots[proj]], qs.has_bias, in.row(t), d,
                                     douts[proj]->row(t), da, din.row(t), grads[slots[proj]],
                                     weight);
        }
    }
}

// Mean softmax cross-entropy over a batch with exact reverse-mode gradients.
inline std::pair<double, GradientSet> loss_and_backward(const Model& m,
                                                        const std::vector<RankingInstance>& batch,
                                                        Workspace& ws) {
    if (batch.empty()) throw UsageError("loss_and_backward: empty batch");
    GradientSet grads = zero_like_params(m);
    const double w = 1.0 / static_cast<double>(batch.size());
    double loss = 0.0;
    for (const auto& inst : batch) loss += instance_loss_and_backward(m, inst, ws, grads, w);
    loss *= w;
    if (!std::isfinite(loss)) throw DivergenceError("non-finite loss");
    return {loss, std::move(grads)};
}

inline std::pair<double, GradientSet> loss_and_backward(const Model& m,
                                                        const std::vector<RankingInstance>& batch) {
    Workspace ws;
    return loss_and_backward(m, batch, ws);
}

} // namespace kfcl
