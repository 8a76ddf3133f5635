#include "rcm/attention.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace rcm {

void AttentionInputs::validate() const {
    if (Q.ndim() != 2 || K.ndim() != 2 || V.ndim() != 2)
        throw std::invalid_argument("attention: Q/K/V must be 2-D");
    check_same_shape(Q, tQ, "attention");
    check_same_shape(K, tK, "attention");
    check_same_shape(V, tV, "attention");
    if (K.shape != V.shape)
        throw std::invalid_argument("attention: K shape " + shape_str(K.shape) +
                                    " != V shape " + shape_str(V.shape));
    if (Q.shape[1] != K.shape[1])
        throw std::invalid_argument("attention: head dim mismatch " + shape_str(Q.shape) +
                                    " vs " + shape_str(K.shape));
    for (const Tensor* t : {&tQ, &K, &tK, &V, &tV})
        if (t->prec != Q.prec) throw std::invalid_argument("attention: mixed precisions");
    if (causal && Q.shape[0] != K.shape[0])
        throw std::invalid_argument("attention: causal requires N1 == N2, got N1=" +
                                    std::to_string(Q.shape[0]) +
                                    " N2=" + std::to_string(K.shape[0]));
}

namespace {

// Processes one row block [r0,r1) against column blocks of width Bc,
// maintaining running max m, normalizer l, accumulators O/A/B and tangent
// row-sum r, all rescaled by exp(m - m_new) on every column block.
template <typename T>
void row_block_pass(const AttentionInputs& in, int64_t r0, int64_t r1, int64_t Bc,
                    AttentionOutputs& out) {
    const int64_t n2 = in.n2(), d = in.d();
    const int64_t br = r1 - r0;
    const T neg_inf = -std::numeric_limits<T>::infinity();

    std::vector<T> m(static_cast<size_t>(br), neg_inf);
    std::vector<T> l(static_cast<size_t>(br), T(0));
    std::vector<T> rsum(static_cast<size_t>(br), T(0));
    std::vector<T> Oacc(static_cast<size_t>(br * d), T(0));
    std::vector<T> Aacc(static_cast<size_t>(br * d), T(0));
    std::vector<T> Bacc(static_cast<size_t>(br * d), T(0));
    std::vector<T> S(static_cast<size_t>(br * Bc));
    std::vector<T> tS(static_cast<size_t>(br * Bc));

    for (int64_t c0 = 0; c0 < n2; c0 += Bc) {
        const int64_t c1 = std::min(c0 + Bc, n2);
        const int64_t bc = c1 - c0;
        for (int64_t p = 0; p < br; ++p) {
            const int64_t row = r0 + p;
            const int64_t valid = in.causal ? std::min(bc, row - c0 + 1) : bc;
            if (valid <= 0) continue;
            // S = Q K^T, tS = tQ K^T + Q tK^T on the valid slice
            for (int64_t q = 0; q < valid; ++q) {
                const int64_t col = c0 + q;
                T s = T(0), ts1 = T(0), ts2 = T(0);
                for (int64_t k = 0; k < d; ++k) {
                    const T qk = static_cast<T>(in.Q.at(row, k));
                    const T kk = static_cast<T>(in.K.at(col, k));
                    s += qk * kk;
                    ts1 += static_cast<T>(in.tQ.at(row, k)) * kk;
                    ts2 += qk * static_cast<T>(in.tK.at(col, k));
                }
                S[static_cast<size_t>(p * Bc + q)] = s;
                tS[static_cast<size_t>(p * Bc + q)] = ts1 + ts2;
            }
            T m_new = m[static_cast<size_t>(p)];
            for (int64_t q = 0; q < valid; ++q)
                m_new = std::max(m_new, S[static_cast<size_t>(p * Bc + q)]);
            const T sc = m[static_cast<size_t>(p)] == neg_inf
                             ? T(0)
                             : std::exp(m[static_cast<size_t>(p)] - m_new);
            T lsum = T(0), hsum = T(0);
            for (int64_t q = 0; q < valid; ++q) {
                const T pq = std::exp(S[static_cast<size_t>(p * Bc + q)] - m_new);
                const T hq = pq * tS[static_cast<size_t>(p * Bc + q)];
                S[static_cast<size_t>(p * Bc + q)] = pq;   // reuse as P~
                tS[static_cast<size_t>(p * Bc + q)] = hq;  // reuse as H~
                lsum += pq;
                hsum += hq;
            }
            l[static_cast<size_t>(p)] = sc * l[static_cast<size_t>(p)] + lsum;
            rsum[static_cast<size_t>(p)] = sc * rsum[static_cast<size_t>(p)] + hsum;
            for (int64_t e = 0; e < d; ++e) {
                T o = sc * Oacc[static_cast<size_t>(p * d + e)];
                T a = sc * Aacc[static_cast<size_t>(p * d + e)];
                T b = sc * Bacc[static_cast<size_t>(p * d + e)];
                for (int64_t q = 0; q < valid; ++q) {
                    const int64_t col = c0 + q;
                    const T pq = S[static_cast<size_t>(p * Bc + q)];
                    const T hq = tS[static_cast<size_t>(p * Bc + q)];
                    o += pq * static_cast<T>(in.V.at(col, e));
                    a += pq * static_cast<T>(in.tV.at(col, e));
                    b += hq * static_cast<T>(in.V.at(col, e));
                }
                Oacc[static_cast<size_t>(p * d + e)] = o;
                Aacc[static_cast<size_t>(p * d + e)] = a;
                Bacc[static_cast<size_t>(p * d + e)] = b;
            }
            m[static_cast<size_t>(p)] = m_new;
        }
    }

    // Finalize: O = O/l, L = m + log l, tO = (A + B - diag(r) O_final) / l.
    for (int64_t p = 0; p < br; ++p) {
        const int64_t row = r0 + p;
        const T lp = l[static_cast<size_t>(p)];
        out.L.at(row) = static_cast<double>(m[static_cast<size_t>(p)] + std::log(lp));
        for (int64_t e = 0; e < d; ++e) {
            const T of = Oacc[static_cast<size_t>(p * d + e)] / lp;
            out.O.at(row, e) = static_cast<double>(of);
            const T c = rsum[static_cast<size_t>(p)] * of;
            out.tO.at(row, e) = static_cast<double>(
                (Aacc[static_cast<size_t>(p * d + e)] + Bacc[static_cast<size_t>(p * d + e)] - c) /
                lp);
        }
    }
}

}  // namespace

int64_t kernel_workspace_elements(int64_t Br, int64_t Bc, int64_t d) {
    return 2 * Br * Bc + 3 * Br * d + 3 * Br;
}

AttentionOutputs attention_dense(const AttentionInputs& in) {
    in.validate();
    // One row block spanning everything, serial: the stabilized dense loop.
    AttentionOutputs out;
    out.O = Tensor({in.n1(), in.d()}, in.Q.prec);
    out.L = Tensor({in.n1()}, in.Q.prec);
    out.tO = Tensor({in.n1(), in.d()}, in.Q.prec);
    if (in.Q.prec == Precision::Single)
        row_block_pass<float>(in, 0, in.n1(), in.n2(), out);
    else
        row_block_pass<double>(in, 0, in.n1(), in.n2(), out);
    return out;
}

AttentionOutputs attention_jvp_blocked(const AttentionInputs& in, const BlockSpec& blocks,
                                       KernelStats* stats) {
    in.validate();
    if (blocks.Br < 1 || blocks.Bc < 1)
        throw std::invalid_argument("attention_jvp_blocked: block sizes must be >= 1");
    AttentionOutputs out;
    out.O = Tensor({in.n1(), in.d()}, in.Q.prec);
    out.L = Tensor({in.n1()}, in.Q.prec);
    out.tO = Tensor({in.n1(), in.d()}, in.Q.prec);
    const int64_t n1 = in.n1();
    const int64_t Br = std::min(blocks.Br, n1);
    const int64_t Bc = std::min(blocks.Bc, in.n2());
    const int64_t n_blocks = (n1 + Br - 1) / Br;
#pragma omp parallel for schedule(static)
    for (int64_t b = 0; b < n_blocks; ++b) {
        const int64_t r0 = b * Br;
        const int64_t r1 = std::min(r0 + Br, n1);
        if (in.Q.prec == Precision::Single)
            row_block_pass<float>(in, r0, r1, Bc, out);
        else
            row_block_pass<double>(in, r0, r1, Bc, out);
    }
    if (stats) stats->temp_elements = kernel_workspace_elements(Br, Bc, in.d());
    return out;
}

AttentionOutputs attention_jvp_causal(const AttentionInputs& in, const BlockSpec& blocks) {
    AttentionInputs masked = in;
    masked.causal = true;
    return attention_jvp_blocked(masked, blocks);
}

std::vector<BenchRow> kernel_bench(const std::vector<std::array<int64_t, 3>>& sizes,
                                   const BlockSpec& blocks, int repeats, uint64_t seed) {
    if (repeats < 1) throw std::invalid_argument("kernel_bench: repeats must be >= 1");
    using clock = std::chrono::steady_clock;
    std::vector<BenchRow> rows;
    Rng rng(seed);
    for (const auto& sz : sizes) {
        const int64_t N1 = sz[0], N2 = sz[1], d = sz[2];
        AttentionInputs in;
        in.Q = rng.normal_tensor({N1, d});
        in.tQ = rng.normal_tensor({N1, d});
        in.K = rng.normal_tensor({N2, d});
        in.tK = rng.normal_tensor({N2, d});
        in.V = rng.normal_tensor({N2, d});
        in.tV = rng.normal_tensor({N2, d});
        AttentionOutputs ref = attention_dense(in);
        AttentionOutputs blk = attention_jvp_blocked(in, blocks);
        const double err = std::max(max_abs_diff(ref.O, blk.O), max_abs_diff(ref.tO, blk.tO));

        auto time_variant = [&](auto&& fn) {
            std::vector<double> samples;
            for (int i = 0; i < repeats; ++i) {
                auto t0 = clock::now();
                fn();
                auto t1 = clock::now();
                samples.push_back(std::chrono::duration<double>(t1 - t0).count());
            }
            std::sort(samples.begin(), samples.end());
            return samples[samples.size() / 2];
        };
        rows.push_back({N1, N2, d, blocks.Br, blocks.Bc, "dense",
                        time_variant([&] { attention_dense(in); }), 0.0});
        rows.push_back({N1, N2, d, blocks.Br, blocks.Bc, "blocked",
                        time_variant([&] { attention_jvp_blocked(in, blocks); }), err});
    }
    return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
    std::ostringstream os;
    os << "N1,N2,d,Br,Bc,variant,median_seconds,max_abs_err_vs_dense\n";
    for (const auto& r : rows)
        os << r.N1 << "," << r.N2 << "," << r.d << "," << r.Br << "," << r.Bc << "," << r.variant
           << "," << r.median_seconds << "," << r.max_abs_err_vs_dense << "\n";
    return os.str();
}

}  // namespace rcm
