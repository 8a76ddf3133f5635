#pragma once

#include <array>
#include <string>
#include <vector>

#include "rcm/dual.hpp"
#include "rcm/tensor.hpp"

namespace rcm {

// Q,tQ: [N1,d]; K,tK,V,tV: [N2,d]. All six share precision.
struct AttentionInputs {
    Tensor Q, tQ, K, tK, V, tV;
    bool causal = false;

    void validate() const;
    int64_t n1() const { return Q.shape[0]; }
    int64_t n2() const { return K.shape[0]; }
    int64_t d() const { return Q.shape[1]; }
};

struct AttentionOutputs {
    Tensor O;   // [N1,d]
    Tensor L;   // [N1] row log-sum-exp
    Tensor tO;  // [N1,d]
};

struct BlockSpec {
    int64_t Br = 16;
    int64_t Bc = 16;
};

// Peak per-row-block temporary footprint, in elements. Stays
// O(Br*Bc + Br*d) regardless of sequence lengths.
struct KernelStats {
    int64_t temp_elements = 0;
};

// Serial reference: stabilized dense evaluation of O, L and the tangent
// tO = P tV + H V - diag(rowsum(H)) O with H = P (.) tS. Oracle for the
// blocked kernel.
AttentionOutputs attention_dense(const AttentionInputs& in);

// Single-pass streaming kernel with fused tangent accumulators, row blocks
// processed in parallel. Ragged tail blocks run with reduced extents.
AttentionOutputs attention_jvp_blocked(const AttentionInputs& in, const BlockSpec& blocks,
                                       KernelStats* stats = nullptr);

// Causal-masked variant; requires N1 == N2.
AttentionOutputs attention_jvp_causal(const AttentionInputs& in, const BlockSpec& blocks);

int64_t kernel_workspace_elements(int64_t Br, int64_t Bc, int64_t d);

struct BenchRow {
    int64_t N1, N2, d, Br, Bc;
    std::string variant;
    double median_seconds;
    double max_abs_err_vs_dense;
};

// Times dense vs blocked on each size; outputs agree before timing.
std::vector<BenchRow> kernel_bench(const std::vector<std::array<int64_t, 3>>& sizes,
                                   const BlockSpec& blocks, int repeats, uint64_t seed);
std::string bench_csv(const std::vector<BenchRow>& rows);

}  // namespace rcm
