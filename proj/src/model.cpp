#include "rcm/model.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>

#include "json.hpp"

namespace rcm {

namespace {

// y = x + b broadcast over rows, at working precision.
Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    Tensor y(x.shape, x.prec);
    const int64_t cols = x.shape.back();
    const int64_t rows = x.numel() / cols;
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j) {
            double v = x.at(i * cols + j) + b.at(j);
            y.at(i * cols + j) = quantize(v, x.prec);
        }
    return y;
}

DualTensor dual_linear(const DualTensor& x, const Tensor& W, const Tensor& b) {
    Tensor p = add_rowvec(matmul(x.primal, W), b);
    Tensor t = matmul(x.tangent, W);
    return DualTensor(std::move(p), std::move(t));
}

// dX = dY W^T; gW += X^T dY; gb += colsum(dY)
Tensor linear_backward(const Tensor& X, const Tensor& W, const Tensor& dY, Tensor& gW,
                       Tensor& gb) {
    Tensor dX = matmul(dY, transpose2d(W));
    Tensor gw = matmul(transpose2d(X), dY);
    for (size_t i = 0; i < gW.data.size(); ++i) gW.data[i] += gw.data[i];
    for (int64_t i = 0; i < dY.shape[0]; ++i)
        for (int64_t j = 0; j < dY.shape[1]; ++j) gb.at(j) += dY.at(i, j);
    return dX;
}

Tensor activation_deriv_tensor(const Tensor& x, Activation k) {
    return dual_pointwise(DualTensor(x, full_like(x, 1.0)), k).tangent;
}

// backward of y = rmsnorm(x) * w (row-wise over the last axis)
Tensor rmsnorm_backward(const Tensor& x, const Tensor& w, double eps, const Tensor& dy,
                        Tensor& gw) {
    const int64_t n = x.shape.back();
    const int64_t rows = x.numel() / n;
    Tensor dx(x.shape, Precision::Double);
    for (int64_t i = 0; i < rows; ++i) {
        double ms = 0.0;
        for (int64_t j = 0; j < n; ++j) ms += x.at(i * n + j) * x.at(i * n + j);
        ms /= static_cast<double>(n);
        const double r = 1.0 / std::sqrt(ms + eps);
        double s = 0.0;  // sum_k dy_k x_k w_k
        for (int64_t j = 0; j < n; ++j) s += dy.at(i * n + j) * x.at(i * n + j) * w.at(j);
        for (int64_t j = 0; j < n; ++j) {
            dx.at(i * n + j) =
                r * w.at(j) * dy.at(i * n + j) - r * r * r / static_cast<double>(n) * x.at(i * n + j) * s;
            gw.at(j) += x.at(i * n + j) * r * dy.at(i * n + j);
        }
    }
    return dx;
}

Tensor row_of(const Tensor& table, int row) {
    Tensor r({1, table.shape[1]}, table.prec);
    for (int64_t j = 0; j < table.shape[1]; ++j) r.at(0, j) = table.at(row, j);
    return r;
}

DualTensor concat_cols(const std::vector<DualTensor>& parts) {
    int64_t rows = parts[0].primal.shape[0], cols = 0;
    for (const auto& p : parts) cols += p.primal.shape[1];
    Tensor prim({rows, cols}, parts[0].primal.prec), tang({rows, cols}, parts[0].primal.prec);
    int64_t off = 0;
    for (const auto& p : parts) {
        const int64_t c = p.primal.shape[1];
        for (int64_t i = 0; i < rows; ++i)
            for (int64_t j = 0; j < c; ++j) {
                prim.at(i, off + j) = p.primal.at(i, j);
                tang.at(i, off + j) = p.tangent.at(i, j);
            }
        off += c;
    }
    return DualTensor(std::move(prim), std::move(tang));
}

DualTensor slice_cols(const DualTensor& x, int64_t c0, int64_t c1) {
    Tensor p({x.primal.shape[0], c1 - c0}, x.primal.prec);
    Tensor t(p.shape, p.prec);
    for (int64_t i = 0; i < p.shape[0]; ++i)
        for (int64_t j = 0; j < c1 - c0; ++j) {
            p.at(i, j) = x.primal.at(i, c0 + j);
            t.at(i, j) = x.tangent.at(i, c0 + j);
        }
    return DualTensor(std::move(p), std::move(t));
}

// ym = y * (1 + g) + b with per-sample row vectors g, b (dual in g/b via c).
DualTensor modulate(const DualTensor& y, const DualTensor& g, const DualTensor& b) {
    Tensor p(y.primal.shape, y.primal.prec), t(p.shape, p.prec);
    const int64_t cols = y.primal.shape[1];
    for (int64_t i = 0; i < y.primal.shape[0]; ++i)
        for (int64_t j = 0; j < cols; ++j) {
            const double gj = g.primal.at(0, j), bj = b.primal.at(0, j);
            p.at(i, j) = quantize(y.primal.at(i, j) * (1.0 + gj) + bj, p.prec);
            t.at(i, j) = quantize(y.tangent.at(i, j) * (1.0 + gj) +
                                      y.primal.at(i, j) * g.tangent.at(0, j) + b.tangent.at(0, j),
                                  p.prec);
        }
    return DualTensor(std::move(p), std::move(t));
}

constexpr double kTembMaxPeriod = 10000.0;

// Sinusoidal embedding of a scalar with its t-tangent. AlwaysDouble keeps
// the trig evaluation in double even when the net runs single.
DualTensor embed_scalar(double t, double tt, int dim, Precision exec, TimeEmbedPrecision mode) {
    const int half = dim / 2;
    Tensor p({1, static_cast<int64_t>(dim)}, exec), tg({1, static_cast<int64_t>(dim)}, exec);
    for (int k = 0; k < half; ++k) {
        const double w =
            std::exp(-std::log(kTembMaxPeriod) * (half > 1 ? static_cast<double>(k) / (half - 1) : 0.0));
        double sv, cv;
        if (mode == TimeEmbedPrecision::AlwaysDouble || exec == Precision::Double) {
            sv = std::sin(w * t);
            cv = std::cos(w * t);
        } else {
            const float wf = static_cast<float>(w), tf = static_cast<float>(t);
            sv = static_cast<double>(std::sin(wf * tf));
            cv = static_cast<double>(std::cos(wf * tf));
        }
        p.at(0, k) = quantize(sv, exec);
        p.at(0, half + k) = quantize(cv, exec);
        tg.at(0, k) = quantize(tt * w * cv, exec);
        tg.at(0, half + k) = quantize(-tt * w * sv, exec);
    }
    return DualTensor(std::move(p), std::move(tg));
}

Tensor sinusoidal_positions(int L, int dim, Precision exec) {
    Tensor p({static_cast<int64_t>(L), static_cast<int64_t>(dim)}, exec);
    const int half = dim / 2;
    for (int l = 0; l < L; ++l)
        for (int k = 0; k < half; ++k) {
            const double w = std::exp(
                -std::log(kTembMaxPeriod) * (half > 1 ? static_cast<double>(k) / (half - 1) : 0.0));
            p.at(l, k) = quantize(std::sin(w * l), exec);
            p.at(l, half + k) = quantize(std::cos(w * l), exec);
        }
    return p;
}

// Softmax attention backward for one head: inputs are the scaled q, k, v.
void attention_backward_dense(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& dO,
                              Tensor& dq, Tensor& dk, Tensor& dv) {
    Tensor S = matmul(q, transpose2d(k));
    Tensor P = dual_softmax_rows(DualTensor::constant(S)).primal;
    dv = matmul(transpose2d(P), dO);
    Tensor dP = matmul(dO, transpose2d(v));
    // dS = P (.) (dP - rowsum(dP (.) P))
    Tensor dS(P.shape, Precision::Double);
    for (int64_t i = 0; i < P.shape[0]; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < P.shape[1]; ++j) s += dP.at(i, j) * P.at(i, j);
        for (int64_t j = 0; j < P.shape[1]; ++j)
            dS.at(i, j) = P.at(i, j) * (dP.at(i, j) - s);
    }
    dq = matmul(dS, k);
    dk = matmul(transpose2d(dS), q);
}

}  // namespace

Tensor& ParamStore::add(const std::string& name, Tensor init) {
    order.push_back(name);
    grad[name] = zeros_like(init);
    return value[name] = std::move(init);
}

Tensor& ParamStore::p(const std::string& name) {
    auto it = value.find(name);
    if (it == value.end()) throw std::invalid_argument("unknown parameter: " + name);
    return it->second;
}

const Tensor& ParamStore::p(const std::string& name) const {
    auto it = value.find(name);
    if (it == value.end()) throw std::invalid_argument("unknown parameter: " + name);
    return it->second;
}

Tensor& ParamStore::g(const std::string& name) { return grad.at(name); }

void ParamStore::zero_grad() {
    for (auto& [k, v] : grad) std::fill(v.data.begin(), v.data.end(), 0.0);
}

double ParamStore::grad_norm() const {
    double s = 0.0;
    for (const auto& [k, v] : grad)
        for (double x : v.data) s += x * x;
    return std::sqrt(s);
}

void NetConfig::validate() const {
    if (time_embed_dim % 2 != 0) throw std::invalid_argument("time_embed_dim must be even");
    if (variant == NetVariant::TinyTransformer) {
        if (d_model % n_heads != 0) throw std::invalid_argument("d_model must divide by n_heads");
        if (d_model % 2 != 0) throw std::invalid_argument("d_model must be even");
        if (has_s) throw std::invalid_argument("trajectory-time input is mlp-only");
    }
}

VelocityNet::VelocityNet(NetConfig c) : cfg(c) { cfg.validate(); }

void VelocityNet::init(Rng& rng) {
    auto dense = [&](int in, int out, double gain) {
        Tensor w({in, out});
        const double sd = gain / std::sqrt(static_cast<double>(in));
        for (auto& v : w.data) v = sd * rng.normal();
        return w;
    };
    auto zeros = [&](std::vector<int64_t> shape) { return Tensor(std::move(shape)); };
    auto ones_vec = [&](int n) {
        Tensor w({n});
        std::fill(w.data.begin(), w.data.end(), 1.0);
        return w;
    };
    const int E = cfg.time_embed_dim;
    if (cfg.variant == NetVariant::Mlp) {
        int in_dim = cfg.data_dim + E;
        if (cfg.cond_classes > 0) in_dim += E;
        if (cfg.has_s) in_dim += E;
        int prev = in_dim;
        for (int l = 0; l < cfg.n_hidden_layers; ++l) {
            params.add("mlp.l" + std::to_string(l) + ".w", dense(prev, cfg.hidden, 1.0));
            params.add("mlp.l" + std::to_string(l) + ".b", zeros({cfg.hidden}));
            prev = cfg.hidden;
        }
        params.add("mlp.out.w", zeros({prev, cfg.data_dim}));
        params.add("mlp.out.b", zeros({cfg.data_dim}));
        if (cfg.cond_classes > 0)
            params.add("cond.emb", dense(cfg.cond_classes + 1, E, 1.0));
    } else {
        const int dm = cfg.d_model;
        params.add("in.w", dense(cfg.data_dim, dm, 1.0));
        params.add("in.b", zeros({dm}));
        params.add("tmlp.w1", dense(E, dm, 1.0));
        params.add("tmlp.b1", zeros({dm}));
        params.add("tmlp.w2", dense(dm, dm, 1.0));
        params.add("tmlp.b2", zeros({dm}));
        if (cfg.cond_classes > 0) params.add("cond.emb", dense(cfg.cond_classes + 1, dm, 1.0));
        for (int k = 0; k < cfg.n_blocks; ++k) {
            const std::string pfx = "blk" + std::to_string(k) + ".";
            params.add(pfx + "norm1.w", ones_vec(dm));
            params.add(pfx + "ada.w", zeros({dm, 4 * dm}));  // starts as plain residual blocks
            params.add(pfx + "ada.b", zeros({4 * dm}));
            params.add(pfx + "qkv.w", dense(dm, 3 * dm, 1.0));
            params.add(pfx + "qkv.b", zeros({3 * dm}));
            params.add(pfx + "attn_out.w", dense(dm, dm, 1.0));
            params.add(pfx + "attn_out.b", zeros({dm}));
            params.add(pfx + "norm2.w", ones_vec(dm));
            params.add(pfx + "mlp.w1", dense(dm, cfg.hidden, 1.0));
            params.add(pfx + "mlp.b1", zeros({cfg.hidden}));
            params.add(pfx + "mlp.w2", dense(cfg.hidden, dm, 1.0));
            params.add(pfx + "mlp.b2", zeros({dm}));
        }
        params.add("fin.norm.w", ones_vec(dm));
        params.add("out.w", zeros({dm, cfg.data_dim}));
        params.add("out.b", zeros({cfg.data_dim}));
    }
}

// ---- tape ---------------------------------------------------------------

struct VelocityNet::Tape {
    // mlp
    Tensor mlp_in;                       // [B, in_dim]
    std::vector<Tensor> mlp_z;           // pre-activation per hidden layer
    std::vector<Tensor> mlp_a;           // post-activation
    std::vector<int> cond;               // token per sample
    // transformer (per sample)
    struct Block {
        Tensor x_in, y1, ym1, attn_cat, x_mid, y2, ym2, z1, a1;
        Tensor csil, g1, b1, g2, b2;
        std::vector<Tensor> q, k, v;  // scaled q
    };
    struct Sample {
        Tensor x_tokens;  // [L, C]
        Tensor x_proj;    // after input projection + positions
        Tensor temb, tz1, ta1;  // conditioning pipeline caches
        Tensor c;
        std::vector<Block> blocks;
        Tensor y_fin;
        Tensor x_last;
    };
    std::vector<Sample> samples;
};

VelocityNet::JvpResult VelocityNet::run(const Tensor& x, const std::vector<double>& t,
                                        const std::vector<int>& cond, const Tensor* tx,
                                        const std::vector<double>* tt, bool keep_tape,
                                        const std::vector<double>& s) {
    const Precision ep = cfg.exec_prec;
    const int64_t B = x.shape[0];
    if (static_cast<int64_t>(t.size()) != B)
        throw std::invalid_argument("forward: need one t per batch element");
    if (cfg.cond_classes > 0 && static_cast<int64_t>(cond.size()) != B)
        throw std::invalid_argument("forward: need one cond token per batch element");
    if (cfg.has_s && static_cast<int64_t>(s.size()) != B)
        throw std::invalid_argument("forward: trajectory-time net needs s per batch element");
    Tensor xq = to_precision(x, ep);
    Tensor txq = tx ? to_precision(*tx, ep) : zeros_like(xq);
    check_same_shape(xq, txq, "forward tangent");
    auto tt_of = [&](int64_t i) { return tt ? (*tt)[static_cast<size_t>(i)] : 0.0; };
    std::shared_ptr<Tape> tape = keep_tape ? std::make_shared<Tape>() : nullptr;
    const int E = cfg.time_embed_dim;

    auto P = [&](const std::string& n) { return to_precision(params.p(n), ep); };

    if (cfg.variant == NetVariant::Mlp) {
        if (x.ndim() != 2 || x.shape[1] != cfg.data_dim)
            throw std::invalid_argument("mlp forward: expected [B," +
                                        std::to_string(cfg.data_dim) + "], got " +
                                        shape_str(x.shape));
        // assemble [x | temb | cond | s-emb]
        std::vector<DualTensor> feat_rows;
        int in_dim = cfg.data_dim + E + (cfg.cond_classes > 0 ? E : 0) + (cfg.has_s ? E : 0);
        Tensor fp({B, in_dim}, ep), ft({B, in_dim}, ep);
        Tensor cond_table = cfg.cond_classes > 0 ? P("cond.emb") : Tensor();
        for (int64_t i = 0; i < B; ++i) {
            int64_t off = 0;
            for (int64_t j = 0; j < cfg.data_dim; ++j, ++off) {
                fp.at(i, off) = xq.at(i, j);
                ft.at(i, off) = txq.at(i, j);
            }
            DualTensor te = embed_scalar(t[static_cast<size_t>(i)], tt_of(i), E, ep, cfg.temb_prec);
            for (int64_t j = 0; j < E; ++j, ++off) {
                fp.at(i, off) = te.primal.at(0, j);
                ft.at(i, off) = te.tangent.at(0, j);
            }
            if (cfg.cond_classes > 0) {
                const int token = cond[static_cast<size_t>(i)];
                for (int64_t j = 0; j < E; ++j, ++off) {
                    fp.at(i, off) = cond_table.at(token, j);
                    ft.at(i, off) = 0.0;
                }
            }
            if (cfg.has_s) {
                DualTensor se = embed_scalar(s[static_cast<size_t>(i)], 0.0, E, ep, cfg.temb_prec);
                for (int64_t j = 0; j < E; ++j, ++off) {
                    fp.at(i, off) = se.primal.at(0, j);
                    ft.at(i, off) = se.tangent.at(0, j);
                }
            }
        }
        DualTensor h(fp, ft);
        if (tape) {
            tape->mlp_in = h.primal;
            tape->cond = cond;
        }
        for (int l = 0; l < cfg.n_hidden_layers; ++l) {
            const std::string pfx = "mlp.l" + std::to_string(l);
            DualTensor z = dual_linear(h, P(pfx + ".w"), P(pfx + ".b"));
            if (tape) tape->mlp_z.push_back(z.primal);
            h = dual_pointwise(z, Activation::Silu);
            if (tape) tape->mlp_a.push_back(h.primal);
        }
        DualTensor out = dual_linear(h, P("mlp.out.w"), P("mlp.out.b"));
        tape_ = tape;
        return {out.primal, out.tangent};
    }

    // tiny transformer
    if (x.ndim() != 3 || x.shape[1] != cfg.seq_len || x.shape[2] != cfg.data_dim)
        throw std::invalid_argument("transformer forward: expected [B," +
                                    std::to_string(cfg.seq_len) + "," +
                                    std::to_string(cfg.data_dim) + "], got " + shape_str(x.shape));
    const int dm = cfg.d_model, L = cfg.seq_len, dh = dm / cfg.n_heads;
    const double head_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const Tensor pos = sinusoidal_positions(L, dm, ep);
    const BlockSpec attn_blocks{16, 16};
    Tensor Fout({B, L, cfg.data_dim}, ep), tFout({B, L, cfg.data_dim}, ep);
    if (tape) tape->samples.resize(static_cast<size_t>(B));
    for (int64_t bi = 0; bi < B; ++bi) {
        Tape::Sample* sc = tape ? &tape->samples[static_cast<size_t>(bi)] : nullptr;
        Tensor xt({L, cfg.data_dim}, ep), txt({L, cfg.data_dim}, ep);
        for (int64_t l = 0; l < L; ++l)
            for (int64_t c = 0; c < cfg.data_dim; ++c) {
                xt.at(l, c) = xq.at((bi * L + l) * cfg.data_dim + c);
                txt.at(l, c) = txq.at((bi * L + l) * cfg.data_dim + c);
            }
        if (sc) sc->x_tokens = xt;
        DualTensor h = dual_linear(DualTensor(xt, txt), P("in.w"), P("in.b"));
        h.primal = add(h.primal, pos);
        if (sc) sc->x_proj = h.primal;

        // conditioning vector c = tmlp(temb) + cond embedding
        DualTensor te =
            embed_scalar(t[static_cast<size_t>(bi)], tt_of(bi), E, ep, cfg.temb_prec);
        DualTensor tz1 = dual_linear(te, P("tmlp.w1"), P("tmlp.b1"));
        DualTensor ta1 = dual_pointwise(tz1, Activation::Silu);
        DualTensor cvec = dual_linear(ta1, P("tmlp.w2"), P("tmlp.b2"));
        if (cfg.cond_classes > 0) {
            Tensor crow = row_of(P("cond.emb"), cond[static_cast<size_t>(bi)]);
            cvec.primal = add(cvec.primal, crow);
        }
        if (sc) {
            sc->temb = te.primal;
            sc->tz1 = tz1.primal;
            sc->ta1 = ta1.primal;
            sc->c = cvec.primal;
            sc->blocks.resize(static_cast<size_t>(cfg.n_blocks));
        }

        for (int k = 0; k < cfg.n_blocks; ++k) {
            const std::string pfx = "blk" + std::to_string(k) + ".";
            Tape::Block* bc = sc ? &sc->blocks[static_cast<size_t>(k)] : nullptr;
            if (bc) bc->x_in = h.primal;
            DualTensor csil = dual_pointwise(cvec, Activation::Silu);
            DualTensor ada = dual_linear(csil, P(pfx + "ada.w"), P(pfx + "ada.b"));
            DualTensor g1 = slice_cols(ada, 0, dm), b1 = slice_cols(ada, dm, 2 * dm);
            DualTensor g2 = slice_cols(ada, 2 * dm, 3 * dm), b2 = slice_cols(ada, 3 * dm, 4 * dm);
            if (bc) {
                bc->csil = csil.primal;
                bc->g1 = g1.primal;
                bc->b1 = b1.primal;
                bc->g2 = g2.primal;
                bc->b2 = b2.primal;
            }
            DualTensor y1 = dual_rmsnorm(h, P(pfx + "norm1.w"), 1e-5);
            DualTensor ym1 = modulate(y1, g1, b1);
            if (bc) {
                bc->y1 = y1.primal;
                bc->ym1 = ym1.primal;
            }
            DualTensor qkv = dual_linear(ym1, P(pfx + "qkv.w"), P(pfx + "qkv.b"));
            std::vector<DualTensor> heads;
            for (int hd = 0; hd < cfg.n_heads; ++hd) {
                DualTensor q = dual_scale(slice_cols(qkv, hd * dh, (hd + 1) * dh), head_scale);
                DualTensor kk = slice_cols(qkv, dm + hd * dh, dm + (hd + 1) * dh);
                DualTensor vv = slice_cols(qkv, 2 * dm + hd * dh, 2 * dm + (hd + 1) * dh);
                AttentionInputs ain;
                ain.Q = q.primal;
                ain.tQ = q.tangent;
                ain.K = kk.primal;
                ain.tK = kk.tangent;
                ain.V = vv.primal;
                ain.tV = vv.tangent;
                AttentionOutputs aout = attention_jvp_blocked(ain, attn_blocks);
                heads.push_back(DualTensor(aout.O, aout.tO));
                if (bc) {
                    bc->q.push_back(q.primal);
                    bc->k.push_back(kk.primal);
                    bc->v.push_back(vv.primal);
                }
            }
            DualTensor attn_cat = concat_cols(heads);
            if (bc) bc->attn_cat = attn_cat.primal;
            DualTensor attn = dual_linear(attn_cat, P(pfx + "attn_out.w"), P(pfx + "attn_out.b"));
            h = dual_add(h, attn);
            if (bc) bc->x_mid = h.primal;
            DualTensor y2 = dual_rmsnorm(h, P(pfx + "norm2.w"), 1e-5);
            DualTensor ym2 = modulate(y2, g2, b2);
            DualTensor z1 = dual_linear(ym2, P(pfx + "mlp.w1"), P(pfx + "mlp.b1"));
            DualTensor a1 = dual_pointwise(z1, Activation::GeluTanh);
            DualTensor m = dual_linear(a1, P(pfx + "mlp.w2"), P(pfx + "mlp.b2"));
            h = dual_add(h, m);
            if (bc) {
                bc->y2 = y2.primal;
                bc->ym2 = ym2.primal;
                bc->z1 = z1.primal;
                bc->a1 = a1.primal;
            }
        }
        if (sc) sc->x_last = h.primal;
        DualTensor yf = dual_rmsnorm(h, P("fin.norm.w"), 1e-5);
        if (sc) sc->y_fin = yf.primal;
        DualTensor out = dual_linear(yf, P("out.w"), P("out.b"));
        for (int64_t l = 0; l < L; ++l)
            for (int64_t c = 0; c < cfg.data_dim; ++c) {
                Fout.at((bi * L + l) * cfg.data_dim + c) = out.primal.at(l, c);
                tFout.at((bi * L + l) * cfg.data_dim + c) = out.tangent.at(l, c);
            }
    }
    if (tape) tape->cond = cond;
    tape_ = tape;
    return {Fout, tFout};
}

Tensor VelocityNet::forward(const Tensor& x, const std::vector<double>& t,
                            const std::vector<int>& cond, bool keep_tape,
                            const std::vector<double>& s) {
    return run(x, t, cond, nullptr, nullptr, keep_tape, s).F;
}

VelocityNet::JvpResult VelocityNet::forward_jvp(const Tensor& x, const std::vector<double>& t,
                                                const std::vector<int>& cond, const Tensor& tx,
                                                const std::vector<double>& tt,
                                                const std::vector<double>& s) {
    return run(x, t, cond, &tx, &tt, false, s);
}

void VelocityNet::backward(const Tensor& dF) {
    if (!tape_) throw std::logic_error("backward: no tape (run forward with keep_tape)");
    if (cfg.exec_prec != Precision::Double)
        throw std::logic_error("backward: supported in double precision only");
    Tape& tp = *tape_;
    const int E = cfg.time_embed_dim;

    if (cfg.variant == NetVariant::Mlp) {
        Tensor d = linear_backward(tp.mlp_a.back(), params.p("mlp.out.w"), dF,
                                   params.g("mlp.out.w"), params.g("mlp.out.b"));
        for (int l = cfg.n_hidden_layers - 1; l >= 0; --l) {
            d = mul(d, activation_deriv_tensor(tp.mlp_z[static_cast<size_t>(l)], Activation::Silu));
            const std::string pfx = "mlp.l" + std::to_string(l);
            const Tensor& in = l == 0 ? tp.mlp_in : tp.mlp_a[static_cast<size_t>(l - 1)];
            d = linear_backward(in, params.p(pfx + ".w"), d, params.g(pfx + ".w"),
                                params.g(pfx + ".b"));
        }
        if (cfg.cond_classes > 0) {
            // conditioning slice sits right after [x | temb]
            Tensor& ge = params.g("cond.emb");
            const int64_t off = cfg.data_dim + E;
            for (int64_t i = 0; i < d.shape[0]; ++i) {
                const int token = tp.cond[static_cast<size_t>(i)];
                for (int64_t j = 0; j < E; ++j) ge.at(token, j) += d.at(i, off + j);
            }
        }
        tape_.reset();
        return;
    }

    const int dm = cfg.d_model, L = cfg.seq_len, dh = dm / cfg.n_heads;
    const double head_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const int64_t B = static_cast<int64_t>(tp.samples.size());
    for (int64_t bi = 0; bi < B; ++bi) {
        Tape::Sample& sc = tp.samples[static_cast<size_t>(bi)];
        Tensor dout({L, cfg.data_dim});
        for (int64_t l = 0; l < L; ++l)
            for (int64_t c = 0; c < cfg.data_dim; ++c)
                dout.at(l, c) = dF.at((bi * L + l) * cfg.data_dim + c);
        Tensor dy = linear_backward(sc.y_fin, params.p("out.w"), dout, params.g("out.w"),
                                    params.g("out.b"));
        Tensor dh_acc =
            rmsnorm_backward(sc.x_last, params.p("fin.norm.w"), 1e-5, dy, params.g("fin.norm.w"));
        Tensor dc({1, dm});  // gradient into the conditioning vector
        for (int k = cfg.n_blocks - 1; k >= 0; --k) {
            const std::string pfx = "blk" + std::to_string(k) + ".";
            Tape::Block& bc = sc.blocks[static_cast<size_t>(k)];
            // mlp branch
            Tensor da1 = linear_backward(bc.a1, params.p(pfx + "mlp.w2"), dh_acc,
                                         params.g(pfx + "mlp.w2"), params.g(pfx + "mlp.b2"));
            Tensor dz1 = mul(da1, activation_deriv_tensor(bc.z1, Activation::GeluTanh));
            Tensor dym2 = linear_backward(bc.ym2, params.p(pfx + "mlp.w1"), dz1,
                                          params.g(pfx + "mlp.w1"), params.g(pfx + "mlp.b1"));
            // modulate backward: ym2 = y2*(1+g2)+b2
            Tensor dy2(bc.y2.shape, Precision::Double);
            Tensor dg2({1, dm}), db2({1, dm});
            for (int64_t l = 0; l < L; ++l)
                for (int64_t j = 0; j < dm; ++j) {
                    dy2.at(l, j) = dym2.at(l, j) * (1.0 + bc.g2.at(0, j));
                    dg2.at(0, j) += dym2.at(l, j) * bc.y2.at(l, j);
                    db2.at(0, j) += dym2.at(l, j);
                }
            Tensor dx_mid = rmsnorm_backward(bc.x_mid, params.p(pfx + "norm2.w"), 1e-5, dy2,
                                             params.g(pfx + "norm2.w"));
            dx_mid = add(dx_mid, dh_acc);  // residual
            // attention branch
            Tensor dattn_cat =
                linear_backward(bc.attn_cat, params.p(pfx + "attn_out.w"), dx_mid,
                                params.g(pfx + "attn_out.w"), params.g(pfx + "attn_out.b"));
            Tensor dqkv({L, 3 * dm});
            for (int hd = 0; hd < cfg.n_heads; ++hd) {
                Tensor dO({L, dh});
                for (int64_t l = 0; l < L; ++l)
                    for (int64_t j = 0; j < dh; ++j) dO.at(l, j) = dattn_cat.at(l, hd * dh + j);
                Tensor dq, dk, dv;
                attention_backward_dense(bc.q[static_cast<size_t>(hd)],
                                         bc.k[static_cast<size_t>(hd)],
                                         bc.v[static_cast<size_t>(hd)], dO, dq, dk, dv);
                for (int64_t l = 0; l < L; ++l)
                    for (int64_t j = 0; j < dh; ++j) {
                        dqkv.at(l, hd * dh + j) = dq.at(l, j) * head_scale;
                        dqkv.at(l, dm + hd * dh + j) = dk.at(l, j);
                        dqkv.at(l, 2 * dm + hd * dh + j) = dv.at(l, j);
                    }
            }
            Tensor dym1 = linear_backward(bc.ym1, params.p(pfx + "qkv.w"), dqkv,
                                          params.g(pfx + "qkv.w"), params.g(pfx + "qkv.b"));
            Tensor dy1(bc.y1.shape, Precision::Double);
            Tensor dg1({1, dm}), db1({1, dm});
            for (int64_t l = 0; l < L; ++l)
                for (int64_t j = 0; j < dm; ++j) {
                    dy1.at(l, j) = dym1.at(l, j) * (1.0 + bc.g1.at(0, j));
                    dg1.at(0, j) += dym1.at(l, j) * bc.y1.at(l, j);
                    db1.at(0, j) += dym1.at(l, j);
                }
            Tensor dx_in = rmsnorm_backward(bc.x_in, params.p(pfx + "norm1.w"), 1e-5, dy1,
                                            params.g(pfx + "norm1.w"));
            dh_acc = add(dx_in, dx_mid);  // residual into the block input
            // ada backward: [g1|b1|g2|b2] = linear(silu(c))
            Tensor dada({1, 4 * dm});
            for (int64_t j = 0; j < dm; ++j) {
                dada.at(0, j) = dg1.at(0, j);
                dada.at(0, dm + j) = db1.at(0, j);
                dada.at(0, 2 * dm + j) = dg2.at(0, j);
                dada.at(0, 3 * dm + j) = db2.at(0, j);
            }
            Tensor dcsil = linear_backward(bc.csil, params.p(pfx + "ada.w"), dada,
                                           params.g(pfx + "ada.w"), params.g(pfx + "ada.b"));
            dc = add(dc, mul(dcsil, activation_deriv_tensor(sc.c, Activation::Silu)));
        }
        // input projection
        linear_backward(sc.x_tokens, params.p("in.w"), dh_acc, params.g("in.w"),
                        params.g("in.b"));
        // conditioning pipeline
        if (cfg.cond_classes > 0) {
            Tensor& ge = params.g("cond.emb");
            const int token = tp.cond[static_cast<size_t>(bi)];
            for (int64_t j = 0; j < dm; ++j) ge.at(token, j) += dc.at(0, j);
        }
        Tensor dta1 = linear_backward(sc.ta1, params.p("tmlp.w2"), dc, params.g("tmlp.w2"),
                                      params.g("tmlp.b2"));
        Tensor dtz1 = mul(dta1, activation_deriv_tensor(sc.tz1, Activation::Silu));
        linear_backward(sc.temb, params.p("tmlp.w1"), dtz1, params.g("tmlp.w1"),
                        params.g("tmlp.b1"));
    }
    tape_.reset();
}

VelocityNet VelocityNet::clone() const {
    VelocityNet n(cfg);
    n.params = params;
    return n;
}

VelocityNet VelocityNet::with_precision(Precision p, TimeEmbedPrecision tp) const {
    VelocityNet n = clone();
    n.cfg.exec_prec = p;
    n.cfg.temb_prec = tp;
    return n;
}

Tensor consistency_apply(const Tensor& F, const Tensor& x_t, const std::vector<double>& t) {
    check_same_shape(F, x_t, "consistency_apply");
    const int64_t B = F.shape[0];
    const int64_t per = F.numel() / B;
    Tensor f(F.shape, F.prec);
    for (int64_t i = 0; i < B; ++i) {
        const double ct = std::cos(t[static_cast<size_t>(i)]);
        const double st = std::sin(t[static_cast<size_t>(i)]);
        for (int64_t j = 0; j < per; ++j)
            f.at(i * per + j) = quantize(ct * x_t.at(i * per + j) - st * F.at(i * per + j), f.prec);
    }
    return f;
}

Tensor cfg_velocity(VelocityNet& net, const Tensor& x_t, const std::vector<double>& t,
                    const std::vector<int>& cond, const CfgSpec& spec) {
    std::vector<int> null_cond(cond.size(), spec.null_cond);
    Tensor Fn = net.forward(x_t, t, null_cond);
    if (spec.scale == 0.0) return Fn;
    Tensor Fc = net.forward(x_t, t, cond);
    if (spec.scale == 1.0) return Fc;
    return axpy(Fn, spec.scale, sub(Fc, Fn));
}

void save_checkpoint(const VelocityNet& net, const std::string& path_prefix) {
    nlohmann::json manifest;
    manifest["format"] = "rcm-flat-v1";
    manifest["variant"] = net.cfg.variant == NetVariant::Mlp ? "mlp" : "tiny-transformer";
    manifest["params"] = nlohmann::json::array();
    std::ofstream bin(path_prefix + ".bin", std::ios::binary);
    if (!bin) throw std::runtime_error("save_checkpoint: cannot write " + path_prefix + ".bin");
    int64_t offset = 0;
    for (const auto& name : net.params.order) {
        const Tensor& t = net.params.p(name);
        manifest["params"].push_back({{"name", name},
                                      {"shape", t.shape},
                                      {"precision", precision_name(t.prec)},
                                      {"offset", offset}});
        bin.write(reinterpret_cast<const char*>(t.data.data()),
                  static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        offset += t.numel();
    }
    std::ofstream js(path_prefix + ".json");
    js << manifest.dump(2) << "\n";
}

void load_checkpoint(VelocityNet& net, const std::string& path_prefix) {
    std::ifstream js(path_prefix + ".json");
    if (!js) throw std::runtime_error("load_checkpoint: missing " + path_prefix + ".json");
    nlohmann::json manifest = nlohmann::json::parse(js);
    std::ifstream bin(path_prefix + ".bin", std::ios::binary);
    if (!bin) throw std::runtime_error("load_checkpoint: missing " + path_prefix + ".bin");
    for (const auto& entry : manifest.at("params")) {
        const std::string name = entry.at("name");
        Tensor& t = net.params.p(name);
        std::vector<int64_t> shape = entry.at("shape").get<std::vector<int64_t>>();
        if (shape != t.shape)
            throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
        bin.seekg(static_cast<std::streamoff>(entry.at("offset").get<int64_t>() *
                                              static_cast<int64_t>(sizeof(double))));
        bin.read(reinterpret_cast<char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
}

}  // namespace rcm
