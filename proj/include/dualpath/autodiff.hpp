#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <utility>
#include <vector>

#include "dualpath/error.hpp"
#include "dualpath/simd.hpp"
#include "dualpath/tensor.hpp"

namespace dualpath {

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
    if (x > 0.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

// Loss and d(loss)/d(logit) for one weighted binary cross-entropy term.
// L = -[w*y*log sigma(z) + (1-y)*log(1-sigma(z))]
inline std::pair<double, double> weighted_bce_term(double z, bool y, double w) {
    const double yv = y ? 1.0 : 0.0;
    const double loss = w * yv * softplus(-z) + (1.0 - yv) * softplus(z);
    const double dldz = (w * yv + 1.0 - yv) * sigmoid(z) - w * yv;
    return {loss, dldz};
}

// Reverse-mode tape. Forward calls append records in execution order;
// backward() replays them in exact reverse order, so gradient accumulation
// is deterministic. Constructing with grad_enabled=false gives a record-free
// evaluation mode with identical forward numerics.
class Tape {
  public:
    using NodeId = std::size_t;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    NodeId constant(Tensor v) { return add_node(std::move(v), false, "constant"); }

    NodeId parameter(Tensor v) { return add_node(std::move(v), grad_enabled_, "parameter"); }

    // Zero-copy constant for tensors that outlive the tape (frozen model
    // weights). The caller owns the storage.
    NodeId frozen(const Tensor& v) {
        nodes_.push_back(Node{Tensor{}, &v, Tensor{}, false});
        return nodes_.size() - 1;
    }

    const Tensor& value(NodeId id) const {
        const Node& n = nodes_[id];
        return n.view != nullptr ? *n.view : n.value;
    }

    const Tensor& grad(NodeId id) const {
        if (!backward_done_) throw contract_error("grad(): backward has not run");
        return nodes_[id].grad;
    }

    bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }

    // ---- primitives ------------------------------------------------------

    NodeId matmul(NodeId a, NodeId b) {
        Tensor out = dualpath::matmul(value(a), value(b));
        return finish("matmul", std::move(out), {a, b}, [a, b](Tape& t, NodeId o) {
            const Tensor& g = t.nodes_[o].grad;
            if (t.nodes_[a].requires_grad) matmul_nt_acc(g, t.value(b), t.nodes_[a].grad);
            if (t.nodes_[b].requires_grad) matmul_tn_acc(t.value(a), g, t.nodes_[b].grad);
        });
    }

    // a * b^T
    NodeId matmul_nt(NodeId a, NodeId b) {
        Tensor out = dualpath::matmul_nt(value(a), value(b));
        return finish("matmul_nt", std::move(out), {a, b}, [a, b](Tape& t, NodeId o) {
            const Tensor& g = t.nodes_[o].grad;
            if (t.nodes_[a].requires_grad) matmul_into_acc(g, t.value(b), t.nodes_[a].grad);
            if (t.nodes_[b].requires_grad) matmul_tn_acc(g, t.value(a), t.nodes_[b].grad);
        });
    }

    NodeId add(NodeId a, NodeId b) {
        const Tensor& va = value(a);
        const Tensor& vb = value(b);
        require_same_shape(va, vb, "add");
        Tensor out = va;
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] += vb[i];
        return finish("add", std::move(out), {a, b}, [a, b](Tape& t, NodeId o) {
            const Tensor& g = t.nodes_[o].grad;
            if (t.nodes_[a].requires_grad) acc(t.nodes_[a].grad, g);
            if (t.nodes_[b].requires_grad) acc(t.nodes_[b].grad, g);
        });
    }

    NodeId mul(NodeId a, NodeId b) {
        const Tensor& va = value(a);
        const Tensor& vb = value(b);
        require_same_shape(va, vb, "mul");
        Tensor out = va;
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= vb[i];
        return finish("mul", std::move(out), {a, b}, [a, b](Tape& t, NodeId o) {
            const Tensor& g = t.nodes_[o].grad;
            const Tensor& va = t.value(a);
            const Tensor& vb = t.value(b);
            if (t.nodes_[a].requires_grad) {
                Tensor& da = t.nodes_[a].grad;
                for (std::size_t i = 0; i < g.numel(); ++i) da[i] += g[i] * vb[i];
            }
            if (t.nodes_[b].requires_grad) {
                Tensor& db = t.nodes_[b].grad;
                for (std::size_t i = 0; i < g.numel(); ++i) db[i] += g[i] * va[i];
            }
        });
    }

    NodeId scale(NodeId a, double c) {
        Tensor out = value(a);
        for (double& v : out.data) v *= c;
        return finish("scale", std::move(out), {a}, [a, c](Tape& t, NodeId o) {
            const Tensor& g = t.nodes_[o].grad;
            if (t.nodes_[a].requires_grad) {
                Tensor& da = t.nodes_[a].grad;
                for (std::size_t i = 0; i < g.numel(); ++i) da[i] += c * g[i];
            }
        });
    }

    // Elementwise product with a fixed tensor (dropout masks).
    NodeId apply_mask(NodeId a, Tensor mask) {
        const Tensor& va = value(a);
        require_same_shape(va, mask, "apply_mask");
        Tensor out = va;
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= mask[i];
        auto m = std::make_shared<Tensor>(std::move(mask));
        return finish("apply_mask", std::move(out), {a}, [a, m](Tape& t, NodeId o) {
            const Tensor& g = t.nodes_[o].grad;
            if (t.nodes_[a].requires_grad) {
                Tensor& da = t.nodes_[a].grad;
                for (std::size_t i = 0; i < g.numel(); ++i) da[i] += g[i] * (*m)[i];
            }
        });
    }

    // Row-wise softmax with per-row max subtraction.
    NodeId softmax_rows(NodeId x) {
        const Tensor& vx = value(x);
        Tensor out = softmax_rows_value(vx, /*causal=*/false);
        return finish("softmax_rows", std::move(out), {x}, [x](Tape& t, NodeId o) {
            if (!t.nodes_[x].requires_grad) return;
            softmax_backward(t.value(o), t.nodes_[o].grad, t.nodes_[x].grad, false);
        });
    }

    // Softmax over the causal prefix: row t normalizes columns 0..t, columns
    // beyond t are exactly zero. Input must be square [T x T].
    NodeId causal_softmax_rows(NodeId x) {
        const Tensor& vx = value(x);
        if (vx.rows() != vx.cols()) {
            throw dimension_error("causal_softmax_rows: expected square scores, got " + vx.shape_str());
        }
        Tensor out = softmax_rows_value(vx, /*causal=*/true);
        return finish("causal_softmax_rows", std::move(out), {x}, [x](Tape& t, NodeId o) {
            if (!t.nodes_[x].requires_grad) return;
            softmax_backward(t.value(o), t.nodes_[o].grad, t.nodes_[x].grad, true);
        });
    }

    // out = x / sqrt(mean(x^2, last axis) + eps) * gain, rows of a [T x d]
    // tensor normalized independently.
    NodeId rms_norm(NodeId x, NodeId gain, double eps) {
        const Tensor& vx = value(x);
        const Tensor& vg = value(gain);
        if (eps < 0.0) throw config_error("rms_norm: eps must be non-negative");
        const std::size_t d = vx.cols();
        if (vg.numel() != d) {
            throw dimension_error("rms_norm: gain length " + std::to_string(vg.numel()) +
                                  " != feature width " + std::to_string(d));
        }
        const std::size_t rows = vx.rows();
        Tensor out({rows, d});
        auto inv_rms = std::make_shared<std::vector<double>>(rows);
        for (std::size_t i = 0; i < rows; ++i) {
            double ms = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double v = vx.at(i, j);
                ms += v * v;
            }
            ms = ms / static_cast<double>(d) + eps;
            const double s = 1.0 / std::sqrt(ms);
            (*inv_rms)[i] = s;
            for (std::size_t j = 0; j < d; ++j) out.at(i, j) = vx.at(i, j) * s * vg[j];
        }
        return finish("rms_norm", std::move(out), {x, gain}, [x, gain, inv_rms](Tape& t, NodeId o) {
            const Tensor& g = t.nodes_[o].grad;
            const Tensor& vx = t.value(x);
            const Tensor& vg = t.value(gain);
            const std::size_t rows = vx.rows(), d = vx.cols();
            const bool need_x = t.nodes_[x].requires_grad;
            const bool need_gain = t.nodes_[gain].requires_grad;
            for (std::size_t i = 0; i < rows; ++i) {
                const double s = (*inv_rms)[i];
                if (need_x) {
                    double dot = 0.0;  // sum_j g_j * gain_j * x_j
                    for (std::size_t j = 0; j < d; ++j) dot += g.at(i, j) * vg[j] * vx.at(i, j);
                    const double c = s * s * s * dot / static_cast<double>(d);
                    Tensor& dx = t.nodes_[x].grad;
                    for (std::size_t j = 0; j < d; ++j) dx.at(i, j) += s * vg[j] * g.at(i, j) - c * vx.at(i, j);
                }
                if (need_gain) {
                    Tensor& dg = t.nodes_[gain].grad;
                    for (std::size_t j = 0; j < d; ++j) dg[j] += g.at(i, j) * vx.at(i, j) * s;
                }
            }
        });
    }

    NodeId relu(NodeId x) {
        const Tensor& vx = value(x);
        Tensor out = vx;
        for (double& v : out.data) v = v > 0.0 ? v : 0.0;
        return finish("relu", std::move(out), {x}, [x](Tape& t, NodeId o) {
            if (!t.nodes_[x].requires_grad) return;
            const Tensor& g = t.nodes_[o].grad;
            const Tensor& vx = t.value(x);
            Tensor& dx = t.nodes_[x].grad;
            for (std::size_t i = 0; i < g.numel(); ++i) {
                if (vx[i] > 0.0) dx[i] += g[i];
            }
        });
    }

    NodeId silu(NodeId x) {
        const Tensor& vx = value(x);
        Tensor out(vx.shape);
        vsigmoid(vx.data.data(), out.data.data(), vx.numel());
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= vx[i];
        return finish("silu", std::move(out), {x}, [x](Tape& t, NodeId o) {
            if (!t.nodes_[x].requires_grad) return;
            const Tensor& g = t.nodes_[o].grad;
            const Tensor& vx = t.value(x);
            Tensor& dx = t.nodes_[x].grad;
            std::vector<double> sig(vx.numel());
            vsigmoid(vx.data.data(), sig.data(), vx.numel());
            for (std::size_t i = 0; i < g.numel(); ++i) {
                const double s = sig[i];
                dx[i] += g[i] * s * (1.0 + vx[i] * (1.0 - s));
            }
        });
    }

    // Row gather: out[t] = table[ids[t]]. Repeated ids accumulate gradient in
    // ascending t order.
    NodeId gather_rows(NodeId table, std::vector<std::size_t> ids) {
        const Tensor& vt = value(table);
        const std::size_t d = vt.cols();
        for (std::size_t id : ids) {
            if (id >= vt.rows()) throw dimension_error("gather_rows: row id out of range");
        }
        Tensor out({ids.size(), d});
        for (std::size_t t = 0; t < ids.size(); ++t) {
            const double* src = vt.data.data() + ids[t] * d;
            std::copy(src, src + d, out.data.data() + t * d);
        }
        auto idv = std::make_shared<std::vector<std::size_t>>(std::move(ids));
        return finish("gather_rows", std::move(out), {table}, [table, idv](Tape& t, NodeId o) {
            if (!t.nodes_[table].requires_grad) return;
            const Tensor& g = t.nodes_[o].grad;
            Tensor& dt = t.nodes_[table].grad;
            const std::size_t d = g.cols();
            for (std::size_t r = 0; r < idv->size(); ++r) {
                double* dst = dt.data.data() + (*idv)[r] * d;
                const double* src = g.data.data() + r * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }

    NodeId slice_cols(NodeId x, std::size_t begin, std::size_t count) {
        const Tensor& vx = value(x);
        if (begin + count > vx.cols()) throw dimension_error("slice_cols: range out of bounds");
        const std::size_t rows = vx.rows(), n = vx.cols();
        Tensor out({rows, count});
        for (std::size_t i = 0; i < rows; ++i) {
            const double* src = vx.data.data() + i * n + begin;
            std::copy(src, src + count, out.data.data() + i * count);
        }
        return finish("slice_cols", std::move(out), {x}, [x, begin, count](Tape& t, NodeId o) {
            if (!t.nodes_[x].requires_grad) return;
            const Tensor& g = t.nodes_[o].grad;
            Tensor& dx = t.nodes_[x].grad;
            const std::size_t rows = g.rows(), n = dx.cols();
            for (std::size_t i = 0; i < rows; ++i) {
                double* dst = dx.data.data() + i * n + begin;
                const double* src = g.data.data() + i * count;
                for (std::size_t j = 0; j < count; ++j) dst[j] += src[j];
            }
        });
    }

    NodeId concat_cols(const std::vector<NodeId>& parts) {
        if (parts.empty()) throw contract_error("concat_cols: no inputs");
        const std::size_t rows = value(parts[0]).rows();
        std::size_t total = 0;
        for (NodeId p : parts) {
            if (value(p).rows() != rows) throw dimension_error("concat_cols: row count mismatch");
            total += value(p).cols();
        }
        Tensor out({rows, total});
        std::size_t off = 0;
        for (NodeId p : parts) {
            const Tensor& vp = value(p);
            const std::size_t c = vp.cols();
            for (std::size_t i = 0; i < rows; ++i) {
                std::copy(vp.data.data() + i * c, vp.data.data() + (i + 1) * c, out.data.data() + i * total + off);
            }
            off += c;
        }
        auto ps = std::make_shared<std::vector<NodeId>>(parts);
        return finish("concat_cols", std::move(out), parts, [ps](Tape& t, NodeId o) {
            const Tensor& g = t.nodes_[o].grad;
            const std::size_t rows = g.rows(), total = g.cols();
            std::size_t off = 0;
            for (NodeId p : *ps) {
                const std::size_t c = t.value(p).cols();
                if (t.nodes_[p].requires_grad) {
                    Tensor& dp = t.nodes_[p].grad;
                    for (std::size_t i = 0; i < rows; ++i) {
                        const double* src = g.data.data() + i * total + off;
                        double* dst = dp.data.data() + i * c;
                        for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
                    }
                }
                off += c;
            }
        });
    }

    // out = x[r] as a [1 x d] tensor.
    NodeId pick_row(NodeId x, std::size_t r) {
        const Tensor& vx = value(x);
        if (r >= vx.rows()) throw dimension_error("pick_row: row out of range");
        const std::size_t d = vx.cols();
        Tensor out({1, d});
        std::copy(vx.data.data() + r * d, vx.data.data() + (r + 1) * d, out.data.data());
        return finish("pick_row", std::move(out), {x}, [x, r](Tape& t, NodeId o) {
            if (!t.nodes_[x].requires_grad) return;
            const Tensor& g = t.nodes_[o].grad;
            Tensor& dx = t.nodes_[x].grad;
            const std::size_t d = g.numel();
            for (std::size_t j = 0; j < d; ++j) dx.data[r * d + j] += g[j];
        });
    }

    // Fused causal grouped-query attention: per query head h with kv group
    // g = h / (n_heads/n_kv_heads),
    //   out_h = causal_softmax(Q_h K_g^T / sqrt(head_dim)) V_g
    // Segments partition the rows into independently attended sequences
    // (packed micro-batches); position t attends within its own segment
    // only. One record; the probability blocks are saved for backward.
    NodeId causal_gqa_attention(NodeId q, NodeId k, NodeId v, std::size_t n_heads, std::size_t n_kv_heads,
                                std::size_t head_dim,
                                std::vector<std::pair<std::size_t, std::size_t>> segments = {}) {
        const Tensor& vq = value(q);
        const Tensor& vk = value(k);
        const Tensor& vv = value(v);
        const std::size_t t_len = vq.rows();
        if (n_kv_heads == 0 || n_heads % n_kv_heads != 0) {
            throw dimension_error("gqa: n_kv_heads must divide n_heads");
        }
        if (vq.cols() != n_heads * head_dim || vk.cols() != n_kv_heads * head_dim ||
            vv.cols() != n_kv_heads * head_dim || vk.rows() != t_len || vv.rows() != t_len) {
            throw dimension_error("gqa: shapes " + vq.shape_str() + ", " + vk.shape_str() + ", " + vv.shape_str() +
                                  " inconsistent with heads " + std::to_string(n_heads) + "/" +
                                  std::to_string(n_kv_heads) + " x " + std::to_string(head_dim));
        }
        if (segments.empty()) segments.push_back({0, t_len});
        std::size_t cursor = 0;
        std::size_t prob_size = 0;
        for (const auto& [b, e] : segments) {
            if (b != cursor || e <= b) throw dimension_error("gqa: segments must tile the rows in order");
            cursor = e;
            prob_size += n_heads * (e - b) * (e - b);
        }
        if (cursor != t_len) throw dimension_error("gqa: segments do not cover all rows");

        const std::size_t group_size = n_heads / n_kv_heads;
        const double inv_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

        Tensor out({t_len, n_heads * head_dim});
        auto probs = std::make_shared<std::vector<double>>(prob_size, 0.0);
        std::vector<double> srow;
        std::size_t seg_base = 0;
        for (const auto& [sb, se] : segments) {
            const std::size_t len = se - sb;
            srow.resize(len);
            for (std::size_t h = 0; h < n_heads; ++h) {
                const std::size_t qoff = h * head_dim;
                const std::size_t goff = (h / group_size) * head_dim;
                double* ph = probs->data() + seg_base + h * len * len;
                for (std::size_t tl = 0; tl < len; ++tl) {
                    const std::size_t t = sb + tl;
                    const double* qrow = vq.data.data() + t * vq.cols() + qoff;
                    double mx = -std::numeric_limits<double>::infinity();
                    for (std::size_t ul = 0; ul <= tl; ++ul) {
                        const double* krow = vk.data.data() + (sb + ul) * vk.cols() + goff;
                        double dot = 0.0;
                        for (std::size_t j = 0; j < head_dim; ++j) dot += qrow[j] * krow[j];
                        srow[ul] = dot * inv_scale;
                        mx = std::max(mx, srow[ul]);
                    }
                    for (std::size_t ul = 0; ul <= tl; ++ul) srow[ul] -= mx;
                    vexp(srow.data(), srow.data(), tl + 1);
                    double z = 0.0;
                    for (std::size_t ul = 0; ul <= tl; ++ul) z += srow[ul];
                    double* prow = ph + tl * len;
                    for (std::size_t ul = 0; ul <= tl; ++ul) prow[ul] = srow[ul] / z;
                    double* orow = out.data.data() + t * out.cols() + qoff;
                    for (std::size_t ul = 0; ul <= tl; ++ul) {
                        const double p = prow[ul];
                        const double* vrow = vv.data.data() + (sb + ul) * vv.cols() + goff;
                        for (std::size_t j = 0; j < head_dim; ++j) orow[j] += p * vrow[j];
                    }
                }
            }
            seg_base += n_heads * len * len;
        }

        auto segs = std::make_shared<std::vector<std::pair<std::size_t, std::size_t>>>(std::move(segments));
        return finish("causal_gqa_attention", std::move(out), {q, k, v},
                      [q, k, v, n_heads, head_dim, group_size, inv_scale, probs, segs](Tape& t, NodeId o) {
            const Tensor& vq = t.value(q);
            const Tensor& vk = t.value(k);
            const Tensor& vv = t.value(v);
            const Tensor& g = t.nodes_[o].grad;
            const bool need_q = t.nodes_[q].requires_grad;
            const bool need_k = t.nodes_[k].requires_grad;
            const bool need_v = t.nodes_[v].requires_grad;
            std::vector<double> dprow, dsrow;
            std::size_t seg_base = 0;
            for (const auto& [sb, se] : *segs) {
                const std::size_t len = se - sb;
                dprow.resize(len);
                dsrow.resize(len);
                for (std::size_t h = 0; h < n_heads; ++h) {
                    const std::size_t qoff = h * head_dim;
                    const std::size_t goff = (h / group_size) * head_dim;
                    const double* ph = probs->data() + seg_base + h * len * len;
                    for (std::size_t tl = 0; tl < len; ++tl) {
                        const std::size_t tt = sb + tl;
                        const double* grow = g.data.data() + tt * g.cols() + qoff;
                        const double* prow = ph + tl * len;
                        double rowdot = 0.0;
                        for (std::size_t ul = 0; ul <= tl; ++ul) {
                            const double* vrow = vv.data.data() + (sb + ul) * vv.cols() + goff;
                            double dp = 0.0;
                            for (std::size_t j = 0; j < head_dim; ++j) dp += grow[j] * vrow[j];
                            dprow[ul] = dp;
                            rowdot += dp * prow[ul];
                            if (need_v) {
                                double* dvrow = t.nodes_[v].grad.data.data() + (sb + ul) * vv.cols() + goff;
                                const double p = prow[ul];
                                for (std::size_t j = 0; j < head_dim; ++j) dvrow[j] += p * grow[j];
                            }
                        }
                        if (!need_q && !need_k) continue;
                        for (std::size_t ul = 0; ul <= tl; ++ul) {
                            dsrow[ul] = prow[ul] * (dprow[ul] - rowdot) * inv_scale;
                        }
                        const double* qrow = vq.data.data() + tt * vq.cols() + qoff;
                        double* dqrow = need_q ? t.nodes_[q].grad.data.data() + tt * vq.cols() + qoff : nullptr;
                        for (std::size_t ul = 0; ul <= tl; ++ul) {
                            const double ds = dsrow[ul];
                            if (ds == 0.0) continue;
                            const double* krow = vk.data.data() + (sb + ul) * vk.cols() + goff;
                            if (need_q) {
                                for (std::size_t j = 0; j < head_dim; ++j) dqrow[j] += ds * krow[j];
                            }
                            if (need_k) {
                                double* dkrow = t.nodes_[k].grad.data.data() + (sb + ul) * vk.cols() + goff;
                                for (std::size_t j = 0; j < head_dim; ++j) dkrow[j] += ds * qrow[j];
                            }
                        }
                    }
                }
                seg_base += n_heads * len * len;
            }
        });
    }

    NodeId sum(NodeId x) {
        const Tensor& vx = value(x);
        double s = 0.0;
        for (double v : vx.data) s += v;
        Tensor out({1}, {s});
        return finish("sum", std::move(out), {x}, [x](Tape& t, NodeId o) {
            if (!t.nodes_[x].requires_grad) return;
            const double g = t.nodes_[o].grad[0];
            Tensor& dx = t.nodes_[x].grad;
            for (double& v : dx.data) v += g;
        });
    }

    // Masked, positively weighted binary cross-entropy from logits. targets,
    // pos_weights, present act per slot; absent slots (present=0) contribute
    // exactly zero loss and exactly zero gradient. Returns a scalar node.
    NodeId weighted_bce(NodeId logits, std::vector<double> targets, std::vector<double> pos_weights,
                        std::vector<double> present) {
        const Tensor& vz = value(logits);
        const std::size_t c = vz.numel();
        if (targets.size() != c || pos_weights.size() != c || present.size() != c) {
            throw dimension_error("weighted_bce: slot count mismatch");
        }
        double total = 0.0;
        for (std::size_t i = 0; i < c; ++i) {
            if (present[i] == 0.0) continue;
            total += weighted_bce_term(vz[i], targets[i] != 0.0, pos_weights[i]).first;
        }
        Tensor out({1}, {total});
        auto saved = std::make_shared<std::array<std::vector<double>, 3>>(
            std::array<std::vector<double>, 3>{std::move(targets), std::move(pos_weights), std::move(present)});
        return finish("weighted_bce", std::move(out), {logits}, [logits, saved](Tape& t, NodeId o) {
            if (!t.nodes_[logits].requires_grad) return;
            const double g = t.nodes_[o].grad[0];
            const Tensor& vz = t.value(logits);
            Tensor& dz = t.nodes_[logits].grad;
            const auto& [targets, weights, present] = *saved;
            for (std::size_t i = 0; i < vz.numel(); ++i) {
                if (present[i] == 0.0) continue;
                dz[i] += g * weighted_bce_term(vz[i], targets[i] != 0.0, weights[i]).second;
            }
        });
    }

    // ---- backward --------------------------------------------------------

    void backward(NodeId loss) {
        if (!grad_enabled_) throw contract_error("backward: tape was built in evaluation mode");
        if (value(loss).numel() != 1) {
            throw contract_error("backward: loss must be scalar, got shape " + value(loss).shape_str());
        }
        for (Node& n : nodes_) {
            if (!n.requires_grad) continue;
            const Tensor& v = n.view != nullptr ? *n.view : n.value;
            n.grad.shape = v.shape;
            n.grad.data.assign(v.numel(), 0.0);
        }
        if (!nodes_[loss].requires_grad) {
            // loss independent of every parameter: gradients stay zero
            backward_done_ = true;
            for (Node& n : nodes_) {
                if (n.grad.data.empty()) {
                    const Tensor& v = n.view != nullptr ? *n.view : n.value;
                    n.grad.shape = v.shape;
                    n.grad.data.assign(v.numel(), 0.0);
                }
            }
            return;
        }
        nodes_[loss].grad[0] = 1.0;
        backward_done_ = true;
        for (std::size_t i = records_.size(); i > 0; --i) {
            records_[i - 1].fn(*this, records_[i - 1].out);
        }
    }

    std::size_t num_records() const { return records_.size(); }
    bool grad_enabled() const { return grad_enabled_; }

  private:
    struct Node {
        Tensor value;
        const Tensor* view = nullptr;  // set for frozen() nodes
        Tensor grad;
        bool requires_grad = false;
    };
    struct Record {
        NodeId out;
        std::function<void(Tape&, NodeId)> fn;
    };

    NodeId add_node(Tensor v, bool requires_grad, const char* op) {
        require_finite(v, op);
        nodes_.push_back(Node{std::move(v), nullptr, Tensor{}, requires_grad});
        return nodes_.size() - 1;
    }

    template <typename F>
    NodeId finish(const char* op, Tensor out, const std::vector<NodeId>& inputs, F&& fn) {
        require_finite(out, op);
        bool rg = false;
        if (grad_enabled_) {
            for (NodeId i : inputs) rg = rg || nodes_[i].requires_grad;
        }
        NodeId id = nodes_.size();
        nodes_.push_back(Node{std::move(out), nullptr, Tensor{}, rg});
        if (rg) records_.push_back(Record{id, std::forward<F>(fn)});
        return id;
    }

    static void acc(Tensor& dst, const Tensor& src) {
        for (std::size_t i = 0; i < src.numel(); ++i) dst[i] += src[i];
    }

    // out += a * b, accumulating into an existing gradient buffer.
    static void matmul_into_acc(const Tensor& a, const Tensor& b, Tensor& out) {
        matmul_acc_raw(a.data.data(), b.data.data(), out.data.data(), a.rows(), a.cols(), b.cols());
    }

    static Tensor softmax_rows_value(const Tensor& x, bool causal) {
        const std::size_t rows = x.rows(), n = x.cols();
        Tensor out({rows, n});
        for (std::size_t i = 0; i < rows; ++i) {
            const std::size_t span = causal ? i + 1 : n;
            const double* src = x.data.data() + i * n;
            double* dst = out.data.data() + i * n;
            double mx = src[0];
            for (std::size_t j = 1; j < span; ++j) mx = std::max(mx, src[j]);
            for (std::size_t j = 0; j < span; ++j) dst[j] = src[j] - mx;
            vexp(dst, dst, span);
            double z = 0.0;
            for (std::size_t j = 0; j < span; ++j) z += dst[j];
            for (std::size_t j = 0; j < span; ++j) dst[j] /= z;
        }
        return out;
    }

    static void softmax_backward(const Tensor& p, const Tensor& g, Tensor& dx, bool causal) {
        const std::size_t rows = p.rows(), n = p.cols();
        for (std::size_t i = 0; i < rows; ++i) {
            const std::size_t span = causal ? i + 1 : n;
            const double* pr = p.data.data() + i * n;
            const double* gr = g.data.data() + i * n;
            double* dr = dx.data.data() + i * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < span; ++j) dot += gr[j] * pr[j];
            for (std::size_t j = 0; j < span; ++j) dr[j] += pr[j] * (gr[j] - dot);
        }
    }

    std::vector<Node> nodes_;
    std::vector<Record> records_;
    bool grad_enabled_;
    bool backward_done_ = false;
};

// Central finite differences: (f(x + h e_i) - f(x - h e_i)) / 2h per
// coordinate. Test oracle for every differentiable primitive.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
    if (h <= 0.0) throw contract_error("finite_diff_grad: h must be positive");
    Tensor g(x.shape);
    Tensor probe = x;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double up = f(probe);
        probe[i] = orig - h;
        const double down = f(probe);
        probe[i] = orig;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

}  // namespace dualpath
