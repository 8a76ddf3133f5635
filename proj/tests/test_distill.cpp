#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "rcm/distill.hpp"
#include "rcm/schedule.hpp"

using namespace rcm;

namespace {

NetConfig tiny_mlp() {
    NetConfig c;
    c.variant = NetVariant::Mlp;
    c.data_dim = 2;
    c.hidden = 24;
    c.n_hidden_layers = 3;
    c.time_embed_dim = 8;
    return c;
}

VelocityNet make_random_net(Rng& rng, NetConfig c = tiny_mlp()) {
    VelocityNet net(c);
    net.init(rng);
    for (auto& v : net.params.p("mlp.out.w").data) v = 0.3 * rng.normal();
    for (auto& v : net.params.p("mlp.out.b").data) v = 0.1 * rng.normal();
    return net;
}

}  // namespace

TEST_CASE("warmup ramp r = min(1, i/H)") {
    CHECK(WarmupState::at_iteration(0, 100).r == 0.0);
    CHECK(WarmupState::at_iteration(50, 100).r == 0.5);
    CHECK(WarmupState::at_iteration(250, 100).r == 1.0);
    CHECK(WarmupState::at_iteration(3, 0).r == 1.0);
}

TEST_CASE("tangent at r=0 is the pure teacher-regression direction") {
    Rng rng(2);
    TangentPacket p;
    p.F_sg = rng.normal_tensor({4, 3});
    p.F_teacher = rng.normal_tensor({4, 3});
    p.dfdt_weighted = rng.normal_tensor({4, 3});
    p.x_t = rng.normal_tensor({4, 3});
    p.t = {0.3, 0.7, 1.1, 1.4};
    Tensor g = scm_tangent(p, {0.0});
    for (int64_t i = 0; i < 4; ++i)
        for (int64_t j = 0; j < 3; ++j)
            CHECK(g.at(i, j) ==
                  doctest::Approx(-std::cos(p.t[(size_t)i]) * (p.F_sg.at(i, j) - p.F_teacher.at(i, j)))
                      .epsilon(1e-14));
}

TEST_CASE("tangent vanishes when both terms cancel") {
    Rng rng(3);
    TangentPacket p;
    p.F_sg = rng.normal_tensor({3, 2});
    p.F_teacher = p.F_sg;
    p.t = {0.4, 0.9, 1.3};
    Tensor dFdt = rng.normal_tensor({3, 2});
    p.dfdt_weighted = Tensor({3, 2});
    p.x_t = Tensor({3, 2});
    for (int64_t i = 0; i < 3; ++i) {
        const double w = std::cos(p.t[(size_t)i]) * std::sin(p.t[(size_t)i]);
        for (int64_t j = 0; j < 2; ++j) {
            p.dfdt_weighted.at(i, j) = w * dFdt.at(i, j);
            p.x_t.at(i, j) = -dFdt.at(i, j);
        }
    }
    CHECK(max_abs(scm_tangent(p, {0.7})) <= 1e-15);
}

TEST_CASE("tangent at r=1 equals cos(t) times the instantaneous tangent") {
    Rng rng(5);
    TangentPacket p;
    p.F_sg = rng.normal_tensor({5, 2});
    p.F_teacher = rng.normal_tensor({5, 2});
    p.x_t = rng.normal_tensor({5, 2});
    Tensor dFdt = rng.normal_tensor({5, 2});
    p.dfdt_weighted = Tensor({5, 2});
    p.t = {0.2, 0.5, 0.8, 1.1, 1.5};
    for (int64_t i = 0; i < 5; ++i) {
        const double w = std::cos(p.t[(size_t)i]) * std::sin(p.t[(size_t)i]);
        for (int64_t j = 0; j < 2; ++j) p.dfdt_weighted.at(i, j) = w * dFdt.at(i, j);
    }
    Tensor g = scm_tangent(p, {1.0});
    for (int64_t i = 0; i < 5; ++i) {
        const double ct = std::cos(p.t[(size_t)i]), st = std::sin(p.t[(size_t)i]);
        for (int64_t j = 0; j < 2; ++j) {
            const double expanded =
                ct * (-ct * (p.F_sg.at(i, j) - p.F_teacher.at(i, j)) -
                      st * (p.x_t.at(i, j) + dFdt.at(i, j)));
            CHECK(std::abs(g.at(i, j) - expanded) <= 1e-12);
        }
    }
}

TEST_CASE("analytic Gaussian velocity has zero consistency tangent") {
    // a true consistency function's derivative along its own ODE vanishes
    Rng rng(7);
    const std::vector<double> mu = {0.8, -0.4};
    const double var = 0.5;
    // true consistency velocity: F*(x,t) = (cos t x - f_endpoint(x,t)) / sin t
    auto F_star = [&](const Tensor& x, double t) {
        Tensor f = gaussian_consistency(mu, var, x, t);
        return scale(axpy(f, -std::cos(t), x), -1.0 / std::sin(t));
    };
    for (double t : {0.2, 0.5, 0.9, 1.2, 1.5}) {
        Tensor x = rng.normal_tensor({6, 2});
        Tensor F = F_star(x, t);
        Tensor v = gaussian_velocity_trigflow(mu, var, x, t);
        // dF*/dt along the teacher ODE dx/dt = v, by central differences
        const double e = 1e-6;
        Tensor dFdt =
            scale(sub(F_star(axpy(x, e, v), t + e), F_star(axpy(x, -e, v), t - e)), 1.0 / (2 * e));
        TangentPacket p;
        p.F_sg = F;
        p.F_teacher = v;
        p.x_t = x;
        p.t.assign(6, t);
        p.dfdt_weighted = scale(dFdt, std::cos(t) * std::sin(t));
        Tensor g = scm_tangent(p, {1.0});
        CHECK(l2_norm(g) <= 1e-5);
    }
}

TEST_CASE("scm loss closed-form value and extremes") {
    Rng rng(11);
    Tensor F = rng.normal_tensor({4, 3});
    const double c = 0.1;
    SUBCASE("zero tangent gives zero loss") {
        CHECK(scm_loss(F, F, zeros_like(F), c).value == 0.0);
    }
    SUBCASE("value equals (|g|/(|g|+c))^2 averaged") {
        Tensor g = rng.normal_tensor({4, 3});
        double expect = 0.0;
        for (int64_t i = 0; i < 4; ++i) {
            double n = 0.0;
            for (int64_t j = 0; j < 3; ++j) n += g.at(i, j) * g.at(i, j);
            n = std::sqrt(n);
            expect += (n / (n + c)) * (n / (n + c)) / 4.0;
        }
        CHECK(std::abs(scm_loss(F, F, g, c).value - expect) <= 1e-12);
    }
    SUBCASE("large tangents pin the value near one") {
        Tensor g = scale(rng.normal_tensor({4, 3}), 1e4);
        const double v = scm_loss(F, F, g, c).value;
        CHECK(std::abs(v - 1.0) <= 1e-3);
    }
    SUBCASE("gradient matches finite differences") {
        Tensor g = rng.normal_tensor({4, 3});
        Tensor live = rng.normal_tensor({4, 3});
        LossResult r = scm_loss(live, F, g, c);
        const double e = 1e-6;
        for (int64_t k = 0; k < 4; ++k) {
            Tensor lp = live, lm = live;
            lp.at(k) += e;
            lm.at(k) -= e;
            const double fd = (scm_loss(lp, F, g, c).value - scm_loss(lm, F, g, c).value) / (2 * e);
            CHECK(std::abs(r.grad.at(k) - fd) <= 1e-8);
        }
    }
}

TEST_CASE("semi-continuous derivative: t-independent net gives O(dt) estimate") {
    Rng rng(13);
    VelocityNet net = make_random_net(rng);
    // cut the time-embedding input rows so the net ignores t
    Tensor& w0 = net.params.p("mlp.l0.w");
    for (int64_t r = net.cfg.data_dim; r < w0.shape[0]; ++r)
        for (int64_t j = 0; j < w0.shape[1]; ++j) w0.at(r, j) = 0.0;
    Tensor x = rng.normal_tensor({4, 2});
    std::vector<double> t(4, 0.8);
    Tensor F = net.forward(x, t, {});
    Tensor est = time_derivative_semicontinuous(net, x, t, 1e-4);
    CHECK(l2_norm(est) <= 1e-4 * std::max(1.0, l2_norm(F)));
    CHECK_THROWS_AS(time_derivative_semicontinuous(net, x, {1e-5, 0.8, 0.8, 0.8}, 1e-4),
                    std::invalid_argument);
}

TEST_CASE("semi-continuous derivative converges first-order to the exact JVP") {
    Rng rng(17);
    VelocityNet net = make_random_net(rng);
    Tensor x = rng.normal_tensor({4, 2});
    std::vector<double> t = {0.4, 0.7, 1.0, 1.3};
    Tensor exact = net.forward_jvp(x, t, {}, zeros_like(x), std::vector<double>(4, 1.0)).tF;
    Tensor F = net.forward(x, t, {});
    const double e1 = l2_norm(sub(time_derivative_semicontinuous(net, x, t, 1e-4), exact));
    CHECK(e1 <= 1e2 * std::max(1.0, l2_norm(F)) * 1e-4);
    const double e2 = l2_norm(sub(time_derivative_semicontinuous(net, x, t, 1e-3), exact));
    const double e3 = l2_norm(sub(time_derivative_semicontinuous(net, x, t, 5e-4), exact));
    const double slope = std::log(e2 / e3) / std::log(2.0);
    CHECK(slope >= 0.8);
    CHECK(slope <= 1.2);
}

TEST_CASE("fused and semi-continuous weighted derivatives agree to O(dt)") {
    Rng rng(19);
    VelocityNet net = make_random_net(rng);
    Tensor x = rng.normal_tensor({3, 2});
    std::vector<double> t = {0.5, 0.9, 1.2};
    Tensor Ft = rng.normal_tensor({3, 2});
    Tensor fused = dfdt_weighted_jvp(net, x, t, {}, Ft);
    Tensor semi = dfdt_weighted_semicontinuous(net, x, t, {}, Ft, 1e-5);
    CHECK(max_abs_diff(fused, semi) <= 1e-3);
}

TEST_CASE("dmd loss basics") {
    Rng rng(23);
    Tensor x0 = rng.normal_tensor({4, 3});
    Tensor ft = rng.normal_tensor({4, 3});
    SUBCASE("converged critic gives zero") {
        LossResult r = dmd_loss(x0, ft, ft);
        CHECK(r.value == 0.0);
        CHECK(max_abs(r.grad) == 0.0);
        CHECK(!r.floored);
    }
    SUBCASE("unit displacement counts elements") {
        Tensor ff = ft;
        for (int64_t i = 0; i < 4; ++i) {
            double norm = 0.0;
            for (int64_t j = 0; j < 3; ++j) norm += std::abs(x0.at(i, j) - ft.at(i, j));
            norm /= 3.0;
            for (int64_t j = 0; j < 3; ++j) ff.at(i, j) += norm;
        }
        CHECK(std::abs(dmd_loss(x0, ff, ft).value - 12.0) <= 1e-9);
    }
    SUBCASE("analytic gradient formula") {
        Tensor ff = rng.normal_tensor({4, 3});
        LossResult r = dmd_loss(x0, ff, ft);
        for (int64_t i = 0; i < 4; ++i) {
            double norm = 0.0;
            for (int64_t j = 0; j < 3; ++j) norm += std::abs(x0.at(i, j) - ft.at(i, j));
            norm /= 3.0;
            for (int64_t j = 0; j < 3; ++j)
                CHECK(std::abs(r.grad.at(i, j) - 2.0 * (ff.at(i, j) - ft.at(i, j)) / norm) <= 1e-10);
        }
    }
    SUBCASE("zero normalizer is floored and flagged") {
        LossResult r = dmd_loss(ft, x0, ft);
        CHECK(r.floored);
        CHECK(std::isfinite(r.value));
    }
}

TEST_CASE("dmd gradient aligns with the Gaussian score difference") {
    Rng rng(29);
    const std::vector<double> mu_t = {1.0, 0.0}, mu_s = {-0.5, 0.7};
    const double v_t = 0.6, v_s = 1.1, t = 0.9;
    const double a = std::cos(t), sg = std::sin(t);
    Tensor x0 = rng.normal_tensor({64, 2});
    Tensor xt(x0.shape);
    Tensor eps = rng.normal_tensor(x0.shape);
    for (int64_t k = 0; k < x0.numel(); ++k) xt.at(k) = a * x0.at(k) + sg * eps.at(k);
    Tensor f_teacher = gaussian_denoiser(mu_t, v_t, xt, a, sg);
    Tensor f_fake = gaussian_denoiser(mu_s, v_s, xt, a, sg);
    LossResult r = dmd_loss(x0, f_fake, f_teacher);
    // f_fake - f_teacher = (sigma^2/alpha)(score_fake - score_teacher)
    Tensor sd(x0.shape);
    for (int64_t i = 0; i < 64; ++i)
        for (int64_t j = 0; j < 2; ++j) {
            const double st = -(xt.at(i, j) - a * mu_t[(size_t)j]) / (a * a * v_t + sg * sg);
            const double ss = -(xt.at(i, j) - a * mu_s[(size_t)j]) / (a * a * v_s + sg * sg);
            sd.at(i, j) = ss - st;
        }
    // per-sample cosine (the normalizer rescales rows, never rotates them)
    for (int64_t i = 0; i < 64; ++i) {
        double num = 0.0, ng = 0.0, ns = 0.0;
        for (int64_t j = 0; j < 2; ++j) {
            num += r.grad.at(i, j) * sd.at(i, j);
            ng += r.grad.at(i, j) * r.grad.at(i, j);
            ns += sd.at(i, j) * sd.at(i, j);
        }
        CHECK(num / std::sqrt(ng * ns) >= 0.99);
    }
}

TEST_CASE("flow matching loss target and zero case") {
    Rng rng(31);
    Tensor x0 = rng.normal_tensor({5, 2});
    Tensor eps = rng.normal_tensor({5, 2});
    std::vector<double> t = {0.1, 0.5, 0.9, 1.2, 1.5};
    Tensor v = flow_matching_target(x0, eps, t);
    CHECK(flow_matching_loss(v, x0, eps, t).value == 0.0);
    CHECK(bitwise_equal(flow_matching_target(x0, eps, {0, 0, 0, 0, 0}), eps));
}

TEST_CASE("trained tiny net approaches the analytic flow-matching minimum") {
    Rng rng(37);
    const std::vector<double> mu = {0.5, -0.3};
    const double var = 0.4;
    NetConfig c = tiny_mlp();
    c.hidden = 32;
    VelocityNet net(c);
    net.init(rng);
    const double lr = 0.02;
    for (int iter = 0; iter < 4000; ++iter) {
        Tensor x0({32, 2});
        for (int64_t i = 0; i < 32; ++i)
            for (int64_t j = 0; j < 2; ++j)
                x0.at(i, j) = mu[(size_t)j] + std::sqrt(var) * rng.normal();
        Tensor eps = rng.normal_tensor({32, 2});
        std::vector<double> t(32);
        for (auto& z : t) z = 0.05 + (kHalfPi - 0.1) * rng.uniform();
        Tensor xt(x0.shape);
        for (int64_t i = 0; i < 32; ++i)
            for (int64_t j = 0; j < 2; ++j)
                xt.at(i, j) = std::cos(t[(size_t)i]) * x0.at(i, j) +
                              std::sin(t[(size_t)i]) * eps.at(i, j);
        net.params.zero_grad();
        Tensor F = net.forward(xt, t, {}, /*keep_tape=*/true);
        LossResult r = flow_matching_loss(F, x0, eps, t);
        net.backward(r.grad);
        for (const auto& name : net.params.order) {
            Tensor& p = net.params.p(name);
            const Tensor& g = net.params.g(name);
            for (size_t k = 0; k < p.data.size(); ++k) p.data[k] -= lr * g.data[k];
        }
    }
    // fresh batch: compare against the analytic optimum on the same draws
    double net_loss = 0.0, min_loss = 0.0;
    const int64_t N = 4096;
    Tensor x0({N, 2});
    for (int64_t i = 0; i < N; ++i)
        for (int64_t j = 0; j < 2; ++j) x0.at(i, j) = mu[(size_t)j] + std::sqrt(var) * rng.normal();
    Tensor eps = rng.normal_tensor({N, 2});
    std::vector<double> t(N);
    for (auto& z : t) z = 0.05 + (kHalfPi - 0.1) * rng.uniform();
    Tensor xt(x0.shape);
    for (int64_t i = 0; i < N; ++i)
        for (int64_t j = 0; j < 2; ++j)
            xt.at(i, j) = std::cos(t[(size_t)i]) * x0.at(i, j) + std::sin(t[(size_t)i]) * eps.at(i, j);
    Tensor F = net.forward(xt, t, {});
    Tensor v = flow_matching_target(x0, eps, t);
    for (int64_t i = 0; i < N; ++i) {
        Tensor row({1, 2});
        row.at(0) = xt.at(i, 0);
        row.at(1) = xt.at(i, 1);
        Tensor Fopt = gaussian_velocity_trigflow(mu, var, row, t[(size_t)i]);
        for (int64_t j = 0; j < 2; ++j) {
            net_loss += (F.at(i, j) - v.at(i, j)) * (F.at(i, j) - v.at(i, j));
            min_loss += (Fopt.at(j) - v.at(i, j)) * (Fopt.at(j) - v.at(i, j));
        }
    }
    CHECK(net_loss <= 1.10 * min_loss);
}

TEST_CASE("trajectory loss reduces to flow matching at s = t") {
    Rng rng(41);
    NetConfig c = tiny_mlp();
    c.has_s = true;
    VelocityNet net(c);
    net.init(rng);
    for (auto& v : net.params.p("mlp.out.w").data) v = 0.3 * rng.normal();
    Tensor x0 = rng.normal_tensor({6, 2});
    Tensor eps = rng.normal_tensor({6, 2});
    std::vector<double> t(6);
    for (auto& z : t) z = 0.2 + 1.2 * rng.uniform();
    Tensor xt(x0.shape);
    for (int64_t i = 0; i < 6; ++i)
        for (int64_t j = 0; j < 2; ++j)
            xt.at(i, j) = std::cos(t[(size_t)i]) * x0.at(i, j) + std::sin(t[(size_t)i]) * eps.at(i, j);
    Tensor vtgt = flow_matching_target(x0, eps, t);
    TeacherVelocity teacher = [&](const Tensor&, const std::vector<double>&) { return vtgt; };
    const double sctm = sctm_loss(net, xt, t, t, teacher).value;
    Tensor F = net.forward(xt, t, {}, false, t);
    double fm = 0.0;
    for (int64_t k = 0; k < F.numel(); ++k)
        fm += (F.at(k) - vtgt.at(k)) * (F.at(k) - vtgt.at(k)) / F.numel();
    CHECK(std::abs(sctm - fm) <= 1e-10);
    CHECK_THROWS_AS(sctm_loss(net, xt, t, std::vector<double>(6, 2.0), teacher),
                    std::invalid_argument);
}

TEST_CASE("the true Gaussian trajectory function has zero tangent") {
    // f*(x,t,s) = cos(t-s) x - sin(t-s) F*(x,t,s) maps x_t to x_s exactly;
    // its total t-derivative along the ODE must vanish for all (t, s).
    Rng rng(43);
    const std::vector<double> mu = {0.3, -0.6};
    const double var = 0.8;
    auto traj_F = [&](const Tensor& x, double t, double s) {
        // x_s via the quantile-preserving Gaussian flow, then invert the head
        const double ct = std::cos(t), st = std::sin(t);
        const double cs = std::cos(s), ss = std::sin(s);
        const double sd_t = std::sqrt(ct * ct * var + st * st);
        const double sd_s = std::sqrt(cs * cs * var + ss * ss);
        Tensor F(x.shape);
        for (int64_t i = 0; i < x.shape[0]; ++i)
            for (int64_t j = 0; j < 2; ++j) {
                const double xs =
                    cs * mu[(size_t)j] + sd_s * (x.at(i, j) - ct * mu[(size_t)j]) / sd_t;
                F.at(i, j) = (std::cos(t - s) * x.at(i, j) - xs) / std::sin(t - s);
            }
        return F;
    };
    for (int rep = 0; rep < 10; ++rep) {
        const double t = 0.4 + 1.0 * rng.uniform();
        const double s = 0.05 + 0.5 * rng.uniform() * t;
        Tensor x = rng.normal_tensor({5, 2});
        Tensor F = traj_F(x, t, s);
        Tensor v = gaussian_velocity_trigflow(mu, var, x, t);
        const double e = 1e-6;
        Tensor dFdt = scale(sub(traj_F(axpy(x, e, v), t + e, s), traj_F(axpy(x, -e, v), t - e, s)),
                            1.0 / (2 * e));
        const double cd = std::cos(t - s), sd = std::sin(t - s);
        Tensor dfdt = axpy(scale(sub(F, v), -cd), -sd, add(x, dFdt));
        CHECK(l2_norm(dfdt) <= 1e-5);
    }
}
