// Acceptance gate: one line per criterion, nonzero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <string>
#include <vector>

#include "rcm/cpsim.hpp"
#include "rcm/eval.hpp"

using namespace rcm;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(int idx, const char* name, bool ok, const std::string& detail) {
    std::printf("[%2d] %-28s %s  (%s)\n", idx, name, ok ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    if (!ok) ++g_failures;
}

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return buf;
}

double rel_l2(const Tensor& got, const Tensor& want) {
    return l2_norm(sub(got, want)) / std::max(1e-30, l2_norm(want));
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

// ---- 1: blocked kernel vs dense reference ------------------------------

void criterion_kernel() {
    auto t0 = Clock::now();
    Rng rng(101);
    const std::vector<int64_t> dims = {1, 4, 8, 16};
    const std::vector<int64_t> bsweep = {1, 3, 5, 7, 8, 13, 16, 17, 24, 31, 64};
    double worst_d = 0.0, worst_s = 0.0;
    for (int k = 0; k < 1000; ++k) {
        AttentionInputs in;
        const int64_t n1 = rng.uniform_int(1, 64), n2 = rng.uniform_int(1, 64);
        const int64_t d = dims[static_cast<size_t>(rng.uniform_int(0, 3))];
        in.Q = rng.normal_tensor({n1, d});
        in.tQ = rng.normal_tensor({n1, d});
        in.K = rng.normal_tensor({n2, d});
        in.tK = rng.normal_tensor({n2, d});
        in.V = rng.normal_tensor({n2, d});
        in.tV = rng.normal_tensor({n2, d});
        BlockSpec blocks{bsweep[static_cast<size_t>(rng.uniform_int(0, 10))],
                         bsweep[static_cast<size_t>(rng.uniform_int(0, 10))]};
        {
            AttentionOutputs ref = attention_dense(in);
            AttentionOutputs got = attention_jvp_blocked(in, blocks);
            const double den = std::max(1e-30, std::max(max_abs(ref.O), max_abs(ref.tO)));
            worst_d = std::max(worst_d, std::max(max_abs_diff(ref.O, got.O),
                                                 max_abs_diff(ref.tO, got.tO)) / den);
        }
        AttentionInputs fin;
        fin.Q = to_precision(in.Q, Precision::Single);
        fin.tQ = to_precision(in.tQ, Precision::Single);
        fin.K = to_precision(in.K, Precision::Single);
        fin.tK = to_precision(in.tK, Precision::Single);
        fin.V = to_precision(in.V, Precision::Single);
        fin.tV = to_precision(in.tV, Precision::Single);
        AttentionOutputs ref = attention_dense(fin);
        AttentionOutputs got = attention_jvp_blocked(fin, blocks);
        const double den = std::max(1e-30, std::max(max_abs(ref.O), max_abs(ref.tO)));
        worst_s = std::max(worst_s, std::max(max_abs_diff(ref.O, got.O),
                                             max_abs_diff(ref.tO, got.tO)) / den);
    }
    const double secs = seconds_since(t0);
    report(1, "kernel correctness", worst_d <= 1e-10 && worst_s <= 1e-3 && secs < 60.0,
           fmt("1000 cases, rel err double %.2e single %.2e, %.1fs", worst_d, worst_s, secs));
}

// ---- 2: JVP vs finite differences --------------------------------------

void criterion_jvp_fd() {
    auto t0 = Clock::now();
    Rng rng(202);
    const double e = 1e-5;
    double worst = 0.0;
    TaskSpec seq_spec;
    seq_spec.task = ToyTask::ToySeq;
    VelocityNet mlp(task_net_config(TaskSpec{}));
    VelocityNet tfm(task_net_config(seq_spec));
    mlp.init(rng);
    tfm.init(rng);
    for (VelocityNet* n : {&mlp, &tfm})
        for (const auto& name : n->params.order) {
            Tensor& p = n->params.p(name);
            if (max_abs(p) == 0.0)
                for (auto& v : p.data) v = 0.2 * rng.normal();
        }

    for (int k = 0; k < 500; ++k) {
        const int kind = static_cast<int>(rng.uniform_int(0, 5));
        double err = 0.0;
        if (kind == 0) {  // dual_matmul
            DualTensor a(rng.normal_tensor({3, 4}), rng.normal_tensor({3, 4}));
            DualTensor b(rng.normal_tensor({4, 2}), rng.normal_tensor({4, 2}));
            Tensor jvp = dual_matmul(a, b).tangent;
            Tensor fd = scale(sub(matmul(axpy(a.primal, e, a.tangent), axpy(b.primal, e, b.tangent)),
                                  matmul(axpy(a.primal, -e, a.tangent),
                                         axpy(b.primal, -e, b.tangent))),
                              1.0 / (2 * e));
            err = rel_l2(fd, jvp);
        } else if (kind == 1) {  // dual_softmax_rows
            Tensor x = rng.normal_tensor({3, 5}), v = rng.normal_tensor({3, 5});
            Tensor jvp = dual_softmax_rows(DualTensor(x, v)).tangent;
            Tensor fd = finite_difference_jvp(
                [](const Tensor& z) { return dual_softmax_rows(DualTensor::constant(z)).primal; },
                x, v, e);
            err = rel_l2(fd, jvp);
        } else if (kind == 2) {  // dual_rmsnorm
            Tensor x = rng.normal_tensor({3, 6}), v = rng.normal_tensor({3, 6});
            Tensor w = rng.uniform_tensor({1, 6}, 0.5, 1.5);
            Tensor jvp = dual_rmsnorm(DualTensor(x, v), w, 1e-6).tangent;
            Tensor fd = finite_difference_jvp(
                [&](const Tensor& z) { return dual_rmsnorm(DualTensor::constant(z), w, 1e-6).primal; },
                x, v, e);
            err = rel_l2(fd, jvp);
        } else if (kind == 3) {  // dual_pointwise, every activation
            for (Activation a : {Activation::Identity, Activation::Silu, Activation::GeluTanh}) {
                Tensor x = rng.normal_tensor({4, 4}), v = rng.normal_tensor({4, 4});
                Tensor jvp = dual_pointwise(DualTensor(x, v), a).tangent;
                Tensor fd = finite_difference_jvp(
                    [a](const Tensor& z) { return dual_pointwise(DualTensor::constant(z), a).primal; },
                    x, v, e);
                err = std::max(err, rel_l2(fd, jvp));
            }
        } else {  // network variants, joint (x, t) direction
            VelocityNet& net = kind == 4 ? mlp : tfm;
            const int64_t B = 2;
            Tensor x = rng.normal_tensor(kind == 4 ? std::vector<int64_t>{B, 2}
                                                   : std::vector<int64_t>{B, 8, 2});
            Tensor tx = rng.normal_tensor(x.shape);
            std::vector<double> t(B), tt(B);
            for (auto& z : t) z = 0.1 + 1.3 * rng.uniform();
            for (auto& z : tt) z = rng.normal();
            Tensor jvp = net.forward_jvp(x, t, {}, tx, tt).tF;
            std::vector<double> tp(B), tm(B);
            for (int64_t b = 0; b < B; ++b) {
                tp[static_cast<size_t>(b)] = t[static_cast<size_t>(b)] + e * tt[static_cast<size_t>(b)];
                tm[static_cast<size_t>(b)] = t[static_cast<size_t>(b)] - e * tt[static_cast<size_t>(b)];
            }
            Tensor fd = scale(sub(net.forward(axpy(x, e, tx), tp, {}),
                                  net.forward(axpy(x, -e, tx), tm, {})), 1.0 / (2 * e));
            err = rel_l2(fd, jvp);
        }
        worst = std::max(worst, err);
    }
    const double secs = seconds_since(t0);
    report(2, "jvp vs finite differences", worst <= 1e-6 && secs < 60.0,
           fmt("500 cases, max rel err %.2e, %.1fs", worst, secs));
}

// ---- 3: context-parallel bitwise equivalence ---------------------------

void criterion_cp() {
    Rng rng(303);
    bool ok = true;
    int cases = 0;
    for (Precision prec : {Precision::Double, Precision::Single}) {
        for (int P : {1, 2, 4}) {
            for (int64_t H : {4, 8}) {
                for (int64_t L : {8, 16, 32}) {
                    const int64_t B = 2, C = 8;
                    auto mk = [&] { return rng.normal_tensor({B, H, L, C}, prec); };
                    Tensor Q = mk(), K = mk(), V = mk(), tQ = mk(), tK = mk(), tV = mk();
                    BlockSpec blocks;
                    Tensor O, tO;
                    attention_jvp_multihead(Q, K, V, tQ, tK, tV, blocks, O, tO);
                    CpAttentionResult r =
                        cp_attention_jvp(shard(Q, P), shard(K, P), shard(V, P), shard(tQ, P),
                                         shard(tK, P), shard(tV, P), blocks);
                    ok = ok && bitwise_equal(unshard(r.O), O) && bitwise_equal(unshard(r.tO), tO);
                    ++cases;
                }
            }
        }
    }
    report(3, "context-parallel bitwise", ok, fmt("%d shard/size/precision cases", cases));
}

// ---- 4: schedule wrapping ----------------------------------------------

void criterion_wrapping() {
    Rng rng(404);
    Tensor x = rng.normal_tensor({4, 2});
    const std::vector<double> mu = {0.3, -0.7};
    const double var = 0.5;
    WrappedDenoiser w;
    w.raw_schedule = rectified_flow_schedule();
    w.raw_denoiser = [&](const Tensor& xt, double tr) {
        return gaussian_denoiser(mu, var, xt, 1.0 - tr, tr);
    };
    double worst = 0.0;
    for (int i = 0; i < 50; ++i) {
        const double t = 0.02 + (kHalfPi - 0.06) * i / 49.0;
        WrapResult res = wrap_denoiser(w, x, t);
        worst = std::max(worst, max_abs_diff(res.F, gaussian_velocity_trigflow(mu, var, x, t)));
    }
    WrapResult at0 = wrap_denoiser(w, x, 0.0);
    const bool boundary = bitwise_equal(at0.f, x) && !at0.velocity_defined;

    NoiseSchedule tf = trigflow_schedule();
    double worst_rt = 0.0;
    for (Parameterization p : {Parameterization::Eps, Parameterization::V,
                               Parameterization::Score}) {
        const double t = 0.2 + 1.1 * rng.uniform();
        Tensor x0 = rng.normal_tensor({4, 2});
        Tensor xt = rng.normal_tensor({4, 2});
        Tensor there = convert_parameterization(x0, Parameterization::X0, p, xt, tf, t);
        Tensor back = convert_parameterization(there, p, Parameterization::X0, xt, tf, t);
        worst_rt = std::max(worst_rt, rel_l2(back, x0));
    }
    report(4, "teacher wrapping", worst <= 1e-8 && boundary && worst_rt <= 1e-12,
           fmt("velocity err %.2e, boundary %s, round-trip %.2e", worst,
               boundary ? "exact" : "BROKEN", worst_rt));
}

// ---- 5: loss identities ------------------------------------------------

void criterion_losses() {
    Rng rng(505);
    bool ok = true;
    std::string detail;

    Tensor F = rng.normal_tensor({4, 3});
    Tensor g = rng.normal_tensor({4, 3});
    const double c = 0.1;
    double expect = 0.0;
    for (int64_t i = 0; i < 4; ++i) {
        double n = 0.0;
        for (int64_t j = 0; j < 3; ++j) n += g.at(i, j) * g.at(i, j);
        n = std::sqrt(n);
        expect += (n / (n + c)) * (n / (n + c)) / 4.0;
    }
    const double scm_err = std::abs(scm_loss(F, F, g, c).value - expect);
    ok = ok && scm_err <= 1e-12;

    Tensor x0 = rng.normal_tensor({4, 3});
    Tensor ff = rng.normal_tensor({4, 3});
    Tensor ft = rng.normal_tensor({4, 3});
    LossResult dmd = dmd_loss(x0, ff, ft);
    double dmd_err = 0.0;
    for (int64_t i = 0; i < 4; ++i) {
        double nrm = 0.0;
        for (int64_t j = 0; j < 3; ++j) nrm += std::abs(x0.at(i, j) - ft.at(i, j)) / 3.0;
        for (int64_t j = 0; j < 3; ++j)
            dmd_err = std::max(dmd_err, std::abs(dmd.grad.at(i, j) -
                                                 2.0 * (ff.at(i, j) - ft.at(i, j)) / nrm));
    }
    ok = ok && dmd_err <= 1e-10;

    NetConfig sc = task_net_config(TaskSpec{});
    sc.has_s = true;
    VelocityNet snet(sc);
    snet.init(rng);
    for (auto& v : snet.params.p("mlp.out.w").data) v = 0.3 * rng.normal();
    Tensor xt = rng.normal_tensor({6, 2});
    std::vector<double> t(6);
    for (auto& z : t) z = 0.2 + 1.2 * rng.uniform();
    const std::vector<double> mu = {0.4, -0.1};
    Tensor vt(xt.shape);
    for (int64_t i = 0; i < 6; ++i) {
        Tensor row({1, 2});
        row.at(0, 0) = xt.at(i, 0);
        row.at(0, 1) = xt.at(i, 1);
        Tensor v = gaussian_velocity_trigflow(mu, 0.5, row, t[static_cast<size_t>(i)]);
        vt.at(i, 0) = v.at(0, 0);
        vt.at(i, 1) = v.at(0, 1);
    }
    TeacherVelocity teacher = [&](const Tensor&, const std::vector<double>&) { return vt; };
    // at s = t the objective collapses to flow matching against the teacher
    LossResult tc = sctm_loss(snet, xt, t, t, teacher);
    Tensor Fv = snet.forward(xt, t, {}, false, t);
    double fm_like = 0.0;
    for (int64_t k = 0; k < Fv.numel(); ++k) {
        const double d = Fv.at(k) - vt.at(k);
        fm_like += d * d / static_cast<double>(Fv.numel());
    }
    const double sctm_err = std::abs(tc.value - fm_like);
    ok = ok && sctm_err <= 1e-10;

    // first-order convergence of the semi-continuous time derivative
    VelocityNet net(task_net_config(TaskSpec{}));
    net.init(rng);
    for (auto& v : net.params.p("mlp.out.w").data) v = 0.3 * rng.normal();
    Tensor xs = rng.normal_tensor({4, 2});
    std::vector<double> ts(4, 0.9);
    Tensor exact = net.forward_jvp(xs, ts, {}, zeros_like(xs), std::vector<double>(4, 1.0)).tF;
    // semi-continuous quotient approximates dF/dt - tan(dt)-weighted terms;
    // compare (quotient - exact) against dt in log-log slope
    std::vector<double> dts = {1e-2, 1e-3, 1e-4}, errs;
    for (double dt : dts) {
        Tensor q = time_derivative_semicontinuous(net, xs, ts, dt);
        errs.push_back(l2_norm(sub(q, exact)));
    }
    const double slope = std::log(errs[0] / errs[2]) / std::log(dts[0] / dts[2]);
    ok = ok && slope > 0.8 && slope < 1.2;

    report(5, "loss identities", ok,
           fmt("scm %.1e dmd %.1e sctm %.1e fd-slope %.2f", scm_err, dmd_err, sctm_err, slope));
}

// ---- 6: analytic zero tangent ------------------------------------------

void criterion_zero_tangent() {
    Rng rng(606);
    const std::vector<double> mu = {0.8, -0.4};
    const double var = 0.5;
    auto F_star = [&](const Tensor& x, double t) {
        Tensor f = gaussian_consistency(mu, var, x, t);
        return scale(axpy(f, -std::cos(t), x), -1.0 / std::sin(t));
    };
    double worst = 0.0;
    for (int i = 0; i < 15; ++i) {
        const double t = 0.1 + 1.4 * i / 14.0;
        Tensor x = rng.normal_tensor({6, 2});
        Tensor F = F_star(x, t);
        Tensor v = gaussian_velocity_trigflow(mu, var, x, t);
        const double e = 1e-6;
        Tensor dFdt = scale(
            sub(F_star(axpy(x, e, v), t + e), F_star(axpy(x, -e, v), t - e)), 1.0 / (2 * e));
        TangentPacket p;
        p.F_sg = F;
        p.F_teacher = v;
        p.x_t = x;
        p.t.assign(6, t);
        p.dfdt_weighted = scale(dFdt, std::cos(t) * std::sin(t));
        worst = std::max(worst, l2_norm(scm_tangent(p, {1.0})));
    }
    report(6, "analytic zero tangent", worst <= 1e-5, fmt("max |g| %.2e over 15 t", worst));
}

// ---- 7 and 8: end-to-end runs ------------------------------------------

void criterion_end_to_end(VelocityNet& teacher, const TaskSpec& spec) {
    auto t0 = Clock::now();

    Rng sr(42);
    const int64_t n = 2048;
    Tensor teacher_x0 = teacher_ode_solve(teacher, sr.normal_tensor({n, 2}), std::atan(80.0), 50);
    Rng dr(43);
    Tensor data = sample_task_data(spec, n, dr);
    Rng pr(7);
    const double w2_teacher = sliced_w2(teacher_x0, data, 128, pr);

    TrainConfig cfg;
    cfg.total_iters = 6000;
    cfg.lr_student = 1e-4;
    cfg.lr_fake = 2e-4;
    cfg.H = 100;
    cfg.batch = 64;
    cfg.seed = 11;
    TrainResult res = train_rcm(cfg, teacher);

    SampleSchedule two = SampleSchedule::for_steps(2, cfg.sigma_max);
    Rng gr(17);
    Tensor student_x0 = sample_consistency(res.ema_student, two, n, gr);
    Rng pr2(7);
    const double w2_student = sliced_w2(student_x0, data, 128, pr2);
    ModeReport modes = mode_coverage(student_x0, spec.mixture(), 0.02);

    TrainResult rerun = train_rcm(cfg, teacher);
    const bool deterministic = rerun.metrics_csv == res.metrics_csv;

    const double secs = seconds_since(t0);
    const bool ok = w2_student <= 1.5 * w2_teacher && modes.recovered >= 7 && deterministic &&
                    secs < 1800.0;
    report(7, "end-to-end distillation", ok,
           fmt("W2 student %.3f vs 1.5x teacher %.3f, modes %d/8, csv %s, %.0fs", w2_student,
               1.5 * w2_teacher, modes.recovered, deterministic ? "bitwise" : "DIVERGED", secs));
}

void criterion_error_accumulation(VelocityNet& teacher, const TaskSpec& spec) {
    TrainConfig cfg;
    cfg.total_iters = 1500;
    cfg.lr_student = 1e-4;
    cfg.lr_fake = 2e-4;
    cfg.H = 100;
    cfg.batch = 64;
    cfg.seed = 11;
    TrainConfig scm_cfg = cfg;
    scm_cfg.lambda_dmd = 0.0;

    TrainResult rcm = train_rcm(cfg, teacher);
    TrainResult scm = train_rcm(scm_cfg, teacher);
    Rng r1(31), r2(31);
    ErrorAccumulation ea_scm = error_accumulation(scm.ema_student, teacher, spec, 20, 256, 100, r1);
    ErrorAccumulation ea_rcm = error_accumulation(rcm.ema_student, teacher, spec, 20, 256, 100, r2);

    const bool ok = ea_scm.spearman > 0.0 && ea_rcm.gap.back() < ea_scm.gap.back();
    report(8, "error accumulation", ok,
           fmt("spearman(no dmd) %.3f, gap at t=%.2f: %.3f with dmd vs %.3f without",
               ea_scm.spearman, ea_scm.t_grid.back(), ea_rcm.gap.back(), ea_scm.gap.back()));
}

// ---- 9: precision study ------------------------------------------------

void criterion_precision() {
    TaskSpec spec;
    spec.task = ToyTask::ToySeq;
    Rng rng(909);
    VelocityNet net = pretrain_teacher(spec, 400, 32, 3e-3, rng);

    Rng r0(5);
    auto zero = precision_study(net, Precision::Double, Precision::Double, 100, 8, r0);
    bool all_zero = true;
    for (const auto& row : zero) all_zero = all_zero && row.out_rel == 0.0 && row.jvp_rel == 0.0;

    Rng r1(5);
    auto rows = precision_study(net, Precision::Single, Precision::Double, 100, 8, r1);
    std::vector<double> o, jv;
    for (const auto& row : rows) {
        o.push_back(row.out_rel);
        jv.push_back(row.jvp_rel);
    }
    const double ratio = median(jv) / median(o);
    report(9, "precision study", all_zero && ratio > 1.0,
           fmt("median jvp err %.2e / out err %.2e = %.2fx, equal-precision %s", median(jv),
               median(o), ratio, all_zero ? "all zero" : "NONZERO"));
}

// ---- 10: rollout statistics --------------------------------------------

void criterion_rollout_stats() {
    TimeDistSpec pd{TimeDistSpec::Kind::LognormalArctan, 0.0, 1.6, 1.0};
    const int64_t M = 100000;
    Rng rng(1010);
    std::vector<std::vector<double>> draws(4);
    for (int64_t i = 0; i < M; ++i) {
        std::vector<double> ts = sample_decreasing_timesteps(pd, 4, rng);
        for (int n = 1; n < 4; ++n) draws[static_cast<size_t>(n)].push_back(ts[static_cast<size_t>(n)]);
    }
    // entry n is the minimum of n-1 fresh p_D draws (pi/2 never binds)
    double worst_ks = 0.0;
    for (int n = 1; n < 4; ++n) {
        std::vector<double>& v = draws[static_cast<size_t>(n)];
        std::sort(v.begin(), v.end());
        for (int64_t i = 0; i < M; ++i) {
            const double F0 = time_dist_cdf(pd, v[static_cast<size_t>(i)]);
            const double F = 1.0 - std::pow(1.0 - F0, n);
            const double lo = static_cast<double>(i) / M, hi = static_cast<double>(i + 1) / M;
            worst_ks = std::max(worst_ks, std::max(std::abs(F - lo), std::abs(F - hi)));
        }
    }

    bool prefix = true;
    SampleSchedule four = SampleSchedule::for_steps(4, 80.0);
    SampleSchedule eight = SampleSchedule::for_steps(8, 80.0);
    for (int k = 1; k <= 8; ++k) {
        SampleSchedule s = SampleSchedule::for_steps(k, 80.0);
        const std::vector<double>& ladder = k <= 4 ? four.timesteps : eight.timesteps;
        for (int i = 0; i < k; ++i)
            prefix = prefix && s.timesteps[static_cast<size_t>(i)] == ladder[static_cast<size_t>(i)];
        prefix = prefix && s.timesteps[0] == std::atan(80.0);
    }
    report(10, "rollout statistics", worst_ks <= 0.02 && prefix,
           fmt("KS %.4f over %lld draws, prefix %s", worst_ks, static_cast<long long>(M),
               prefix ? "exact" : "BROKEN"));
}

}  // namespace

int main() {
    auto t0 = Clock::now();
    criterion_kernel();
    criterion_jvp_fd();
    criterion_cp();
    criterion_wrapping();
    criterion_losses();
    criterion_zero_tangent();

    TaskSpec spec;
    Rng trng(123);
    VelocityNet teacher = pretrain_teacher(spec, 3000, 128, 3e-3, trng);
    criterion_end_to_end(teacher, spec);
    criterion_error_accumulation(teacher, spec);

    criterion_precision();
    criterion_rollout_stats();

    std::printf("acceptance: %d/10 criteria passed in %.0fs\n", 10 - g_failures,
                seconds_since(t0));
    return g_failures == 0 ? 0 : 1;
}
