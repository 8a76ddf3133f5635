#pragma once

#include <functional>

#include "rcm/tensor.hpp"

namespace rcm {

// Primal/tangent pair: the carrier of every forward-mode derivative in the
// project. Both halves always share shape and precision.
struct DualTensor {
    Tensor primal;
    Tensor tangent;

    DualTensor() = default;
    DualTensor(Tensor p, Tensor t);
    static DualTensor constant(const Tensor& p) { return DualTensor(p, zeros_like(p)); }
};

enum class Activation { Identity, Silu, GeluTanh };
Activation activation_from_name(const std::string& name);

// primal = A.B, tangent = tA.B + A.tB
DualTensor dual_matmul(const DualTensor& a, const DualTensor& b);

// Row-wise softmax of a 2-D tensor with the product-rule tangent
// tP = P(.)tS - P(.)rowsum(P(.)tS).
DualTensor dual_softmax_rows(const DualTensor& s);

// y = x * rsqrt(mean(x^2) + eps) * weight along the last axis.
DualTensor dual_rmsnorm(const DualTensor& x, const Tensor& weight, double eps);

DualTensor dual_pointwise(const DualTensor& x, Activation kind);

DualTensor dual_add(const DualTensor& a, const DualTensor& b);
DualTensor dual_sub(const DualTensor& a, const DualTensor& b);
DualTensor dual_mul(const DualTensor& a, const DualTensor& b);  // product rule
DualTensor dual_scale(const DualTensor& a, double s);

// Central difference (f(x+eps v) - f(x-eps v)) / (2 eps): the independent
// oracle every dual primitive is checked against.
Tensor finite_difference_jvp(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                             const Tensor& v, double eps);

// Scalar activation values/derivatives (double precision), shared with the
// model layers.
double activation_value(Activation k, double x);
double activation_deriv(Activation k, double x);

}  // namespace rcm
