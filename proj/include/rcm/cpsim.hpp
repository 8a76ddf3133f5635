#pragma once

#include "rcm/attention.hpp"
#include "rcm/tensor.hpp"

namespace rcm {

// Axis currently sharded across workers for a [B,H,L,C] tensor.
enum class ShardAxis { Seq, Head };

struct ShardedSeq {
    int P = 1;
    ShardAxis axis = ShardAxis::Seq;
    std::vector<Tensor> shards;  // [B,H,L/P,C] or [B,H/P,L,C]

    void validate() const;
};

// Worker i receives rows [i*L/P, (i+1)*L/P). L must divide evenly.
ShardedSeq shard(const Tensor& x, int P);
Tensor unshard(const ShardedSeq& s);

// Pure permutation redistributing [B,H,L/P,C] -> [B,H/P,L,C] (or back).
ShardedSeq all_to_all(const ShardedSeq& s, ShardAxis to_axis);

struct CpAttentionResult {
    ShardedSeq O;   // seq-sharded [B,H,L/P,C]
    ShardedSeq tO;  // same sharding
};

// Ulysses pattern: all-to-all QKV (+ tangents) to head sharding, local
// blocked JVP attention over full sequences, all-to-all back. Bitwise
// equal to the unsharded kernel per head.
CpAttentionResult cp_attention_jvp(const ShardedSeq& Q, const ShardedSeq& K, const ShardedSeq& V,
                                   const ShardedSeq& tQ, const ShardedSeq& tK,
                                   const ShardedSeq& tV, const BlockSpec& blocks);

// Reference: unsharded multi-head attention over [B,H,L,C] inputs.
void attention_jvp_multihead(const Tensor& Q, const Tensor& K, const Tensor& V, const Tensor& tQ,
                             const Tensor& tK, const Tensor& tV, const BlockSpec& blocks,
                             Tensor& O, Tensor& tO);

}  // namespace rcm
