#pragma once

#include <functional>
#include <vector>

#include "rcm/model.hpp"
#include "rcm/tensor.hpp"

namespace rcm {

// Everything the consistency tangent needs at one (x_t, t):
// dfdt_weighted carries cos(t)sin(t) dF/dt, produced with the tangent
// direction (cos(t)sin(t) F_teacher, cos(t)sin(t)) in one fused JVP.
struct TangentPacket {
    Tensor F_sg;
    Tensor dfdt_weighted;
    Tensor F_teacher;
    Tensor x_t;
    std::vector<double> t;
};

struct WarmupState {
    double r = 1.0;
    static WarmupState at_iteration(int64_t i, int64_t H);
};

// g = -cos(t) sqrt(1 - r^2 sin^2 t) (F_sg - F_teacher)
//     - r (cos t sin t x_t + cos t sin t dF/dt)
Tensor scm_tangent(const TangentPacket& p, const WarmupState& w);

struct LossResult {
    double value = 0.0;
    Tensor grad;      // w.r.t. the live prediction
    bool floored = false;
};

// Per-sample tangent-normalized MSE against the stop-gradient target
// F_sg + g / (||g||_2 + c), averaged over the batch.
LossResult scm_loss(const Tensor& F_live, const Tensor& F_sg, const Tensor& g, double c);

// (cos(dt) F(x,t) - F(x,t-dt)) / sin(dt): finite-difference stand-in for
// the partial time derivative.
Tensor time_derivative_semicontinuous(VelocityNet& net, const Tensor& x_t,
                                      const std::vector<double>& t, double dt,
                                      const std::vector<int>& cond = {});

// cos(t)sin(t) dF/dt along dx/dt = F_teacher, fused into one JVP call.
Tensor dfdt_weighted_jvp(VelocityNet& net, const Tensor& x_t, const std::vector<double>& t,
                         const std::vector<int>& cond, const Tensor& F_teacher);

// Same quantity with the time part replaced by the semi-continuous quotient.
Tensor dfdt_weighted_semicontinuous(VelocityNet& net, const Tensor& x_t,
                                    const std::vector<double>& t, const std::vector<int>& cond,
                                    const Tensor& F_teacher, double dt);

// L = sum ||(f_fake - f_teacher) / normalizer||^2 with per-sample
// normalizer mean(abs(x0 - f_teacher)), floored at 1e-8.
// grad is w.r.t. x0_gen: 2 (f_fake - f_teacher) / normalizer.
LossResult dmd_loss(const Tensor& x0_gen, const Tensor& f_fake, const Tensor& f_teacher);

// MSE of F_fake against the target v = cos(t) eps - sin(t) x0.
LossResult flow_matching_loss(const Tensor& F_fake, const Tensor& x0, const Tensor& eps,
                              const std::vector<double>& t);
Tensor flow_matching_target(const Tensor& x0, const Tensor& eps, const std::vector<double>& t);

using TeacherVelocity =
    std::function<Tensor(const Tensor& x_t, const std::vector<double>& t)>;

// Trajectory-consistency objective for s-conditioned nets with
// f(x_t,t,s) = cos(t-s) x_t - sin(t-s) F(x_t,t,s) and w(t,s) = cos(t-s).
// At s = t it coincides with flow matching on the same batch.
LossResult sctm_loss(VelocityNet& net_with_s, const Tensor& x_t, const std::vector<double>& t,
                     const std::vector<double>& s, const TeacherVelocity& teacher);

}  // namespace rcm
