#include "rcm/cpsim.hpp"

namespace rcm {

namespace {

void check_bhlc(const Tensor& x, const char* op) {
    if (x.ndim() != 4)
        throw std::invalid_argument(std::string(op) + ": expected [B,H,L,C], got " +
                                    shape_str(x.shape));
}

int64_t idx4(const Tensor& x, int64_t b, int64_t h, int64_t l, int64_t c) {
    return ((b * x.shape[1] + h) * x.shape[2] + l) * x.shape[3] + c;
}

}  // namespace

void ShardedSeq::validate() const {
    if (P < 1 || static_cast<int>(shards.size()) != P)
        throw std::invalid_argument("ShardedSeq: shard count != P");
    for (const auto& s : shards) check_bhlc(s, "ShardedSeq");
    for (const auto& s : shards)
        if (s.shape != shards[0].shape || s.prec != shards[0].prec)
            throw std::invalid_argument("ShardedSeq: inconsistent shard shapes");
}

ShardedSeq shard(const Tensor& x, int P) {
    check_bhlc(x, "shard");
    const int64_t L = x.shape[2];
    if (P < 1 || L % P != 0)
        throw std::invalid_argument("shard: L=" + std::to_string(L) +
                                    " not divisible by P=" + std::to_string(P));
    ShardedSeq s;
    s.P = P;
    s.axis = ShardAxis::Seq;
    const int64_t Lp = L / P;
    for (int i = 0; i < P; ++i) {
        Tensor t({x.shape[0], x.shape[1], Lp, x.shape[3]}, x.prec);
        for (int64_t b = 0; b < x.shape[0]; ++b)
            for (int64_t h = 0; h < x.shape[1]; ++h)
                for (int64_t l = 0; l < Lp; ++l)
                    for (int64_t c = 0; c < x.shape[3]; ++c)
                        t.at(idx4(t, b, h, l, c)) = x.at(idx4(x, b, h, i * Lp + l, c));
        s.shards.push_back(std::move(t));
    }
    return s;
}

Tensor unshard(const ShardedSeq& s) {
    s.validate();
    const Tensor& s0 = s.shards[0];
    std::vector<int64_t> shape = s0.shape;
    const int axis_dim = s.axis == ShardAxis::Seq ? 2 : 1;
    shape[static_cast<size_t>(axis_dim)] *= s.P;
    Tensor x(shape, s0.prec);
    for (int i = 0; i < s.P; ++i) {
        const Tensor& t = s.shards[static_cast<size_t>(i)];
        for (int64_t b = 0; b < t.shape[0]; ++b)
            for (int64_t h = 0; h < t.shape[1]; ++h)
                for (int64_t l = 0; l < t.shape[2]; ++l)
                    for (int64_t c = 0; c < t.shape[3]; ++c) {
                        int64_t gh = s.axis == ShardAxis::Head ? i * t.shape[1] + h : h;
                        int64_t gl = s.axis == ShardAxis::Seq ? i * t.shape[2] + l : l;
                        x.at(idx4(x, b, gh, gl, c)) = t.at(idx4(t, b, h, l, c));
                    }
    }
    return x;
}

ShardedSeq all_to_all(const ShardedSeq& s, ShardAxis to_axis) {
    s.validate();
    if (s.axis == to_axis) return s;
    const Tensor& s0 = s.shards[0];
    const int64_t B = s0.shape[0], C = s0.shape[3];
    ShardedSeq out;
    out.P = s.P;
    out.axis = to_axis;
    if (to_axis == ShardAxis::Head) {
        const int64_t H = s0.shape[1], Lp = s0.shape[2];
        if (H % s.P != 0)
            throw std::invalid_argument("all_to_all: H=" + std::to_string(H) +
                                        " not divisible by P=" + std::to_string(s.P));
        const int64_t Hp = H / s.P;
        // worker j gets heads [j*Hp,(j+1)*Hp) over full L; element (b,h,l,c)
        // of source worker i lands at (b, h - j*Hp, i*Lp + l, c).
        for (int j = 0; j < s.P; ++j) {
            Tensor t({B, Hp, Lp * s.P, C}, s0.prec);
            for (int i = 0; i < s.P; ++i) {
                const Tensor& src = s.shards[static_cast<size_t>(i)];
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t h = 0; h < Hp; ++h)
                        for (int64_t l = 0; l < Lp; ++l)
                            for (int64_t c = 0; c < C; ++c)
                                t.at(idx4(t, b, h, i * Lp + l, c)) =
                                    src.at(idx4(src, b, j * Hp + h, l, c));
            }
            out.shards.push_back(std::move(t));
        }
    } else {
        const int64_t Hp = s0.shape[1], L = s0.shape[2];
        if (L % s.P != 0)
            throw std::invalid_argument("all_to_all: L=" + std::to_string(L) +
                                        " not divisible by P=" + std::to_string(s.P));
        const int64_t Lp = L / s.P;
        for (int j = 0; j < s.P; ++j) {
            Tensor t({B, Hp * s.P, Lp, C}, s0.prec);
            for (int i = 0; i < s.P; ++i) {
                const Tensor& src = s.shards[static_cast<size_t>(i)];
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t h = 0; h < Hp; ++h)
                        for (int64_t l = 0; l < Lp; ++l)
                            for (int64_t c = 0; c < C; ++c)
                                t.at(idx4(t, b, i * Hp + h, l, c)) =
                                    src.at(idx4(src, b, h, j * Lp + l, c));
            }
            out.shards.push_back(std::move(t));
        }
    }
    return out;
}

void attention_jvp_multihead(const Tensor& Q, const Tensor& K, const Tensor& V, const Tensor& tQ,
                             const Tensor& tK, const Tensor& tV, const BlockSpec& blocks,
                             Tensor& O, Tensor& tO) {
    check_bhlc(Q, "attention_jvp_multihead");
    const int64_t B = Q.shape[0], H = Q.shape[1], L = Q.shape[2], C = Q.shape[3];
    O = Tensor(Q.shape, Q.prec);
    tO = Tensor(Q.shape, Q.prec);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < H; ++h) {
            AttentionInputs in;
            auto slice = [&](const Tensor& x) {
                Tensor t({L, C}, x.prec);
                for (int64_t l = 0; l < L; ++l)
                    for (int64_t c = 0; c < C; ++c) t.at(l, c) = x.at(idx4(x, b, h, l, c));
                return t;
            };
            in.Q = slice(Q);
            in.tQ = slice(tQ);
            in.K = slice(K);
            in.tK = slice(tK);
            in.V = slice(V);
            in.tV = slice(tV);
            AttentionOutputs out = attention_jvp_blocked(in, blocks);
            for (int64_t l = 0; l < L; ++l)
                for (int64_t c = 0; c < C; ++c) {
                    O.at(idx4(O, b, h, l, c)) = out.O.at(l, c);
                    tO.at(idx4(tO, b, h, l, c)) = out.tO.at(l, c);
                }
        }
}

CpAttentionResult cp_attention_jvp(const ShardedSeq& Q, const ShardedSeq& K, const ShardedSeq& V,
                                   const ShardedSeq& tQ, const ShardedSeq& tK,
                                   const ShardedSeq& tV, const BlockSpec& blocks) {
    for (const ShardedSeq* s : {&Q, &K, &V, &tQ, &tK, &tV}) {
        s->validate();
        if (s->P != Q.P || s->axis != Q.axis || s->shards[0].shape != Q.shards[0].shape)
            throw std::invalid_argument("cp_attention_jvp: inconsistent shard metadata");
    }
    if (Q.axis != ShardAxis::Seq)
        throw std::invalid_argument("cp_attention_jvp: inputs must be sequence-sharded");

    // First all-to-all: [B,H,L/P,C] -> [B,H/P,L,C], tangents redistributed
    // identically.
    ShardedSeq Qh = all_to_all(Q, ShardAxis::Head);
    ShardedSeq Kh = all_to_all(K, ShardAxis::Head);
    ShardedSeq Vh = all_to_all(V, ShardAxis::Head);
    ShardedSeq tQh = all_to_all(tQ, ShardAxis::Head);
    ShardedSeq tKh = all_to_all(tK, ShardAxis::Head);
    ShardedSeq tVh = all_to_all(tV, ShardAxis::Head);

    ShardedSeq Oh, tOh;
    Oh.P = tOh.P = Q.P;
    Oh.axis = tOh.axis = ShardAxis::Head;
    // Deterministic sequential worker schedule: each worker runs local
    // full-sequence attention on its head slice.
    for (int w = 0; w < Q.P; ++w) {
        Tensor O, tO;
        attention_jvp_multihead(Qh.shards[static_cast<size_t>(w)],
                                Kh.shards[static_cast<size_t>(w)],
                                Vh.shards[static_cast<size_t>(w)],
                                tQh.shards[static_cast<size_t>(w)],
                                tKh.shards[static_cast<size_t>(w)],
                                tVh.shards[static_cast<size_t>(w)], blocks, O, tO);
        Oh.shards.push_back(std::move(O));
        tOh.shards.push_back(std::move(tO));
    }

    // Restoring all-to-all back to sequence sharding.
    CpAttentionResult res;
    res.O = all_to_all(Oh, ShardAxis::Seq);
    res.tO = all_to_all(tOh, ShardAxis::Seq);
    return res;
}

}  // namespace rcm
