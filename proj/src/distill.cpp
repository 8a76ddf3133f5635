#include "rcm/distill.hpp"

#include <cmath>
#include <stdexcept>

namespace rcm {

namespace {

// per-sample L2 over all non-batch dimensions
double sample_norm(const Tensor& t, int64_t i, int64_t per) {
    double s = 0.0;
    for (int64_t j = 0; j < per; ++j) s += t.at(i * per + j) * t.at(i * per + j);
    return std::sqrt(s);
}

}  // namespace

WarmupState WarmupState::at_iteration(int64_t i, int64_t H) {
    if (H <= 0) return {1.0};
    return {std::min(1.0, static_cast<double>(i) / static_cast<double>(H))};
}

Tensor scm_tangent(const TangentPacket& p, const WarmupState& w) {
    check_same_shape(p.F_sg, p.F_teacher, "scm_tangent");
    check_same_shape(p.F_sg, p.dfdt_weighted, "scm_tangent");
    check_same_shape(p.F_sg, p.x_t, "scm_tangent");
    const int64_t B = p.F_sg.shape[0];
    const int64_t per = p.F_sg.numel() / B;
    Tensor g(p.F_sg.shape, Precision::Double);
    for (int64_t i = 0; i < B; ++i) {
        const double t = p.t[static_cast<size_t>(i)];
        const double ct = std::cos(t), st = std::sin(t);
        const double damp = ct * std::sqrt(1.0 - w.r * w.r * st * st);
        for (int64_t j = 0; j < per; ++j) {
            const int64_t k = i * per + j;
            g.at(k) = -damp * (p.F_sg.at(k) - p.F_teacher.at(k)) -
                      w.r * (ct * st * p.x_t.at(k) + p.dfdt_weighted.at(k));
        }
    }
    return g;
}

LossResult scm_loss(const Tensor& F_live, const Tensor& F_sg, const Tensor& g, double c) {
    if (c <= 0.0) throw std::invalid_argument("scm_loss: c must be positive");
    check_same_shape(F_live, F_sg, "scm_loss");
    check_same_shape(F_live, g, "scm_loss");
    const int64_t B = F_live.shape[0];
    const int64_t per = F_live.numel() / B;
    LossResult out;
    out.grad = zeros_like(F_live);
    for (int64_t i = 0; i < B; ++i) {
        const double denom = sample_norm(g, i, per) + c;
        double li = 0.0;
        for (int64_t j = 0; j < per; ++j) {
            const int64_t k = i * per + j;
            const double r = F_live.at(k) - F_sg.at(k) - g.at(k) / denom;
            li += r * r;
            out.grad.at(k) = 2.0 * r / static_cast<double>(B);
        }
        out.value += li / static_cast<double>(B);
    }
    return out;
}

Tensor time_derivative_semicontinuous(VelocityNet& net, const Tensor& x_t,
                                      const std::vector<double>& t, double dt,
                                      const std::vector<int>& cond) {
    for (double ti : t)
        if (ti <= dt)
            throw std::invalid_argument("time_derivative_semicontinuous: need t > dt");
    std::vector<double> tm = t;
    for (auto& v : tm) v -= dt;
    Tensor Ft = net.forward(x_t, t, cond);
    Tensor Fm = net.forward(x_t, tm, cond);
    const double cdt = std::cos(dt), sdt = std::sin(dt);
    return scale(axpy(scale(Ft, cdt), -1.0, Fm), 1.0 / sdt);
}

Tensor dfdt_weighted_jvp(VelocityNet& net, const Tensor& x_t, const std::vector<double>& t,
                         const std::vector<int>& cond, const Tensor& F_teacher) {
    const int64_t B = x_t.shape[0];
    const int64_t per = x_t.numel() / B;
    Tensor tx = zeros_like(x_t);
    std::vector<double> tt(static_cast<size_t>(B));
    for (int64_t i = 0; i < B; ++i) {
        const double w = std::cos(t[static_cast<size_t>(i)]) * std::sin(t[static_cast<size_t>(i)]);
        tt[static_cast<size_t>(i)] = w;
        for (int64_t j = 0; j < per; ++j) tx.at(i * per + j) = w * F_teacher.at(i * per + j);
    }
    return net.forward_jvp(x_t, t, cond, tx, tt).tF;
}

Tensor dfdt_weighted_semicontinuous(VelocityNet& net, const Tensor& x_t,
                                    const std::vector<double>& t, const std::vector<int>& cond,
                                    const Tensor& F_teacher, double dt) {
    const int64_t B = x_t.shape[0];
    const int64_t per = x_t.numel() / B;
    // spatial part via JVP with tt = 0, time part via the quotient
    Tensor space = net.forward_jvp(x_t, t, cond, F_teacher, std::vector<double>(B, 0.0)).tF;
    Tensor dtF = time_derivative_semicontinuous(net, x_t, t, dt, cond);
    Tensor out(x_t.shape, Precision::Double);
    for (int64_t i = 0; i < B; ++i) {
        const double w = std::cos(t[static_cast<size_t>(i)]) * std::sin(t[static_cast<size_t>(i)]);
        for (int64_t j = 0; j < per; ++j) {
            const int64_t k = i * per + j;
            out.at(k) = w * (space.at(k) + dtF.at(k));
        }
    }
    return out;
}

LossResult dmd_loss(const Tensor& x0_gen, const Tensor& f_fake, const Tensor& f_teacher) {
    check_same_shape(x0_gen, f_fake, "dmd_loss");
    check_same_shape(x0_gen, f_teacher, "dmd_loss");
    const int64_t B = x0_gen.shape[0];
    const int64_t per = x0_gen.numel() / B;
    LossResult out;
    out.grad = zeros_like(x0_gen);
    for (int64_t i = 0; i < B; ++i) {
        double norm = 0.0;
        for (int64_t j = 0; j < per; ++j)
            norm += std::abs(x0_gen.at(i * per + j) - f_teacher.at(i * per + j));
        norm /= static_cast<double>(per);
        if (norm < 1e-8) {
            norm = 1e-8;
            out.floored = true;
        }
        for (int64_t j = 0; j < per; ++j) {
            const int64_t k = i * per + j;
            const double d = (f_fake.at(k) - f_teacher.at(k)) / norm;
            out.value += d * d;
            out.grad.at(k) = 2.0 * d;
        }
    }
    return out;
}

Tensor flow_matching_target(const Tensor& x0, const Tensor& eps, const std::vector<double>& t) {
    check_same_shape(x0, eps, "flow_matching_target");
    const int64_t B = x0.shape[0];
    const int64_t per = x0.numel() / B;
    Tensor v(x0.shape, Precision::Double);
    for (int64_t i = 0; i < B; ++i) {
        const double ct = std::cos(t[static_cast<size_t>(i)]);
        const double st = std::sin(t[static_cast<size_t>(i)]);
        for (int64_t j = 0; j < per; ++j) {
            const int64_t k = i * per + j;
            v.at(k) = ct * eps.at(k) - st * x0.at(k);
        }
    }
    return v;
}

LossResult flow_matching_loss(const Tensor& F_fake, const Tensor& x0, const Tensor& eps,
                              const std::vector<double>& t) {
    Tensor v = flow_matching_target(x0, eps, t);
    check_same_shape(F_fake, v, "flow_matching_loss");
    LossResult out;
    out.grad = zeros_like(F_fake);
    const double n = static_cast<double>(F_fake.numel());
    for (int64_t k = 0; k < F_fake.numel(); ++k) {
        const double r = F_fake.at(k) - v.at(k);
        out.value += r * r / n;
        out.grad.at(k) = 2.0 * r / n;
    }
    return out;
}

LossResult sctm_loss(VelocityNet& net_with_s, const Tensor& x_t, const std::vector<double>& t,
                     const std::vector<double>& s, const TeacherVelocity& teacher) {
    const int64_t B = x_t.shape[0];
    for (int64_t i = 0; i < B; ++i)
        if (s[static_cast<size_t>(i)] > t[static_cast<size_t>(i)])
            throw std::invalid_argument("sctm_loss: requires s <= t");
    const int64_t per = x_t.numel() / B;
    Tensor v = teacher(x_t, t);
    // dF/dt along dx/dt = v; s rides along untouched
    auto jr = net_with_s.forward_jvp(x_t, t, {}, v, std::vector<double>(B, 1.0), s);
    const Tensor& F_sg = jr.F;
    Tensor target(x_t.shape, Precision::Double);
    for (int64_t i = 0; i < B; ++i) {
        const double d = t[static_cast<size_t>(i)] - s[static_cast<size_t>(i)];
        const double cd = std::cos(d), sd = std::sin(d), w = cd;
        for (int64_t j = 0; j < per; ++j) {
            const int64_t k = i * per + j;
            const double dfdt =
                -cd * (F_sg.at(k) - v.at(k)) - sd * (x_t.at(k) + jr.tF.at(k));
            target.at(k) = F_sg.at(k) + w * dfdt;
        }
    }
    Tensor F_live = net_with_s.forward(x_t, t, {}, false, s);
    LossResult out;
    out.grad = zeros_like(F_live);
    const double n = static_cast<double>(F_live.numel());
    for (int64_t k = 0; k < F_live.numel(); ++k) {
        const double r = F_live.at(k) - target.at(k);
        out.value += r * r / n;
        out.grad.at(k) = 2.0 * r / n;
    }
    return out;
}

}  // namespace rcm
