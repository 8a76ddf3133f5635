#include "rcm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace rcm {

ToyTask toy_task_from_name(const std::string& name) {
    if (name == "gmm2d") return ToyTask::Gmm2d;
    if (name == "checkerboard2d") return ToyTask::Checkerboard2d;
    if (name == "toyseq") return ToyTask::ToySeq;
    throw std::invalid_argument("unknown task: " + name);
}

OptimizerKind optimizer_from_name(const std::string& name) {
    if (name == "sgd") return OptimizerKind::Sgd;
    if (name == "paper-adamw") return OptimizerKind::PaperAdamW;
    throw std::invalid_argument("unknown optimizer: " + name);
}

IsoGmm TaskSpec::mixture() const {
    if (task == ToyTask::ToySeq) throw std::logic_error("toyseq has no mixture");
    return gmm_circle(modes, radius, var);
}

Tensor sample_task_data(const TaskSpec& spec, int64_t n, Rng& rng, std::vector<int>* labels) {
    if (labels) labels->assign(static_cast<size_t>(n), 0);
    switch (spec.task) {
        case ToyTask::Gmm2d: {
            IsoGmm g = spec.mixture();
            Tensor x({n, 2});
            const double sd = std::sqrt(spec.var);
            for (int64_t i = 0; i < n; ++i) {
                const int m = static_cast<int>(rng.uniform_int(0, spec.modes - 1));
                if (labels) (*labels)[static_cast<size_t>(i)] = m;
                for (int64_t j = 0; j < 2; ++j)
                    x.at(i, j) = g.means[static_cast<size_t>(m)][static_cast<size_t>(j)] +
                                 sd * rng.normal();
            }
            return x;
        }
        case ToyTask::Checkerboard2d: {
            // dark cells of a 4x4 board over [-2,2]^2
            Tensor x({n, 2});
            for (int64_t i = 0; i < n; ++i) {
                int ci, cj;
                do {
                    ci = static_cast<int>(rng.uniform_int(0, 3));
                    cj = static_cast<int>(rng.uniform_int(0, 3));
                } while ((ci + cj) % 2 != 0);
                x.at(i, 0) = -2.0 + ci + rng.uniform();
                x.at(i, 1) = -2.0 + cj + rng.uniform();
            }
            return x;
        }
        case ToyTask::ToySeq: {
            Tensor x({n, spec.seq_len, spec.channels});
            for (int64_t i = 0; i < n; ++i) {
                const double w = 0.3 + 0.7 * rng.uniform();
                for (int64_t c = 0; c < spec.channels; ++c) {
                    const double A = 0.5 + rng.uniform();
                    const double phi = 2.0 * kHalfPi * 2.0 * rng.uniform();
                    for (int64_t l = 0; l < spec.seq_len; ++l)
                        x.at((i * spec.seq_len + l) * spec.channels + c) =
                            A * std::sin(w * static_cast<double>(l) + phi);
                }
            }
            return x;
        }
    }
    throw std::logic_error("unreachable");
}

NetConfig task_net_config(const TaskSpec& spec) {
    NetConfig c;
    if (spec.task == ToyTask::ToySeq) {
        c.variant = NetVariant::TinyTransformer;
        c.data_dim = spec.channels;
        c.seq_len = spec.seq_len;
        c.d_model = 16;
        c.n_blocks = 2;
        c.n_heads = 2;
        c.hidden = 32;
        c.time_embed_dim = 8;
    } else {
        c.variant = NetVariant::Mlp;
        c.data_dim = 2;
        c.hidden = 64;
        c.n_hidden_layers = 3;
        c.time_embed_dim = 16;
        c.cond_classes = spec.conditional ? spec.modes : 0;
    }
    return c;
}

void Optimizer::step(ParamStore& params) {
    ++t;
    for (const auto& name : params.order) {
        Tensor& p = params.p(name);
        const Tensor& g = params.g(name);
        if (kind == OptimizerKind::Sgd) {
            for (size_t k = 0; k < p.data.size(); ++k) p.data[k] -= lr * g.data[k];
            continue;
        }
        Tensor& m2 = v2.try_emplace(name, zeros_like(p)).first->second;
        const double corr = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (size_t k = 0; k < p.data.size(); ++k) {
            m2.data[k] = beta2 * m2.data[k] + (1.0 - beta2) * g.data[k] * g.data[k];
            const double vhat = m2.data[k] / corr;
            p.data[k] -= lr * (g.data[k] / (std::sqrt(vhat) + eps) + weight_decay * p.data[k]);
        }
    }
}

double power_ema_gamma(double ema_length) {
    if (ema_length <= 1e-9) return 1e9;
    const double target = ema_length * ema_length;
    if (target >= 1.0 / 12.0)
        throw std::invalid_argument("ema length too large (must be < 1/sqrt(12))");
    auto sig2 = [](double g) { return (g + 1.0) / ((g + 2.0) * (g + 2.0) * (g + 3.0)); };
    double lo = 0.0, hi = 1.0;
    while (sig2(hi) > target) hi *= 2.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (sig2(mid) > target ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

EmaState EmaState::init(const VelocityNet& net, double ema_length) {
    EmaState s;
    s.ema_length = ema_length;
    s.gamma = power_ema_gamma(ema_length);
    for (const auto& name : net.params.order) s.shadow[name] = net.params.p(name);
    return s;
}

void EmaState::update(const ParamStore& live) {
    ++t;
    const double beta = std::pow(1.0 - 1.0 / static_cast<double>(t), gamma + 1.0);
    for (const auto& name : live.order) {
        Tensor& sh = shadow.at(name);
        const Tensor& p = live.p(name);
        for (size_t k = 0; k < sh.data.size(); ++k)
            sh.data[k] = beta * sh.data[k] + (1.0 - beta) * p.data[k];
    }
}

VelocityNet EmaState::apply_to(const VelocityNet& net) const {
    VelocityNet out = net.clone();
    for (const auto& name : out.params.order) out.params.p(name) = shadow.at(name);
    return out;
}

void TrainConfig::validate() const {
    if (lambda_dmd < 0.0) throw std::invalid_argument("config: lambda_dmd must be >= 0");
    if (c <= 0.0) throw std::invalid_argument("config: c must be > 0");
    if (N_max < 1) throw std::invalid_argument("config: N_max must be >= 1");
    if (F_update < 1) throw std::invalid_argument("config: F_update must be >= 1");
    if (batch < 1 || total_iters < 0) throw std::invalid_argument("config: bad sizes");
    if (sigma_max <= 0.0) throw std::invalid_argument("config: sigma_max must be > 0");
}

Tensor teacher_ode_solve(VelocityNet& net, const Tensor& x_t, double t_start, int steps,
                         const std::vector<int>& cond, double cfg_scale) {
    Tensor x = x_t;
    const double h = t_start / static_cast<double>(steps);
    const int64_t B = x.shape[0];
    auto vel = [&](const Tensor& xx, double tt) {
        std::vector<double> tv(static_cast<size_t>(B), tt);
        if (cfg_scale > 0.0)
            return cfg_velocity(net, xx, tv, cond, {cfg_scale, net.cfg.null_token()});
        return net.forward(xx, tv, cond);
    };
    for (int n = 0; n < steps; ++n) {
        const double t0 = t_start - h * n, t1 = t0 - h;
        Tensor k1 = vel(x, t0);
        Tensor k2 = vel(axpy(x, -h, k1), t1);
        x = axpy(x, -0.5 * h, add(k1, k2));
    }
    return x;
}

VelocityNet pretrain_teacher(const TaskSpec& spec, int64_t iters, int64_t batch, double lr,
                             Rng& rng) {
    VelocityNet net(task_net_config(spec));
    net.init(rng);
    Optimizer opt{OptimizerKind::PaperAdamW, lr};
    for (int64_t i = 1; i <= iters; ++i) {
        std::vector<int> labels;
        Tensor x0 = sample_task_data(spec, batch, rng, &labels);
        if (spec.conditional)  // 10% CFG dropout to the null token
            for (auto& l : labels)
                if (rng.uniform() < 0.1) l = net.cfg.null_token();
        Tensor eps = rng.normal_tensor(x0.shape);
        std::vector<double> t(static_cast<size_t>(batch));
        for (auto& z : t) z = 0.02 + (kHalfPi - 0.04) * rng.uniform();
        Tensor xt(x0.shape);
        const int64_t per = x0.numel() / batch;
        for (int64_t b = 0; b < batch; ++b)
            for (int64_t j = 0; j < per; ++j)
                xt.at(b * per + j) = std::cos(t[static_cast<size_t>(b)]) * x0.at(b * per + j) +
                                     std::sin(t[static_cast<size_t>(b)]) * eps.at(b * per + j);
        net.params.zero_grad();
        std::vector<int> cond = spec.conditional ? labels : std::vector<int>{};
        Tensor F = net.forward(xt, t, cond, /*keep_tape=*/true);
        LossResult r = flow_matching_loss(F, x0, eps, t);
        if (!std::isfinite(r.value))
            throw NumericalAbort(i, 0, "teacher pretraining diverged at iteration " +
                                           std::to_string(i));
        net.backward(r.grad);
        opt.step(net.params);
    }
    return net;
}

std::vector<double> sample_decreasing_timesteps(const TimeDistSpec& p_D, int64_t N, Rng& rng) {
    if (N < 1) throw std::invalid_argument("timesteps: N must be >= 1");
    std::vector<double> t(static_cast<size_t>(N));
    t[0] = kHalfPi;
    for (int64_t n = 1; n < N; ++n)
        t[static_cast<size_t>(n)] = std::min(sample_time(p_D, rng), t[static_cast<size_t>(n - 1)]);
    return t;
}

namespace {

RolloutTrace rollout_impl(const std::function<Tensor(const Tensor&, const std::vector<double>&,
                                                     bool)>& forward,
                          const std::vector<int64_t>& shape, const std::vector<double>& timesteps,
                          Rng& rng, bool grad_on_last) {
    RolloutTrace trace;
    trace.timesteps = timesteps;
    trace.grad_on_last = grad_on_last;
    const int64_t batch = shape[0];
    Tensor x = rng.normal_tensor(shape);  // x at t_1 = pi/2 is pure noise
    const int64_t N = static_cast<int64_t>(timesteps.size());
    Tensor x0;
    for (int64_t n = 0; n < N; ++n) {
        trace.states.push_back(x);
        const bool keep = grad_on_last && n == N - 1;
        std::vector<double> tv(static_cast<size_t>(batch), timesteps[static_cast<size_t>(n)]);
        Tensor F = forward(x, tv, keep);
        x0 = consistency_apply(F, x, tv);
        if (n + 1 < N) {
            Tensor eps = rng.normal_tensor(shape);
            const double tn = timesteps[static_cast<size_t>(n + 1)];
            x = axpy(scale(x0, std::cos(tn)), std::sin(tn), eps);
        }
    }
    trace.x0 = x0;
    return trace;
}

}  // namespace

RolloutTrace rollout(VelocityNet& net, const std::vector<double>& timesteps, int64_t batch,
                     Rng& rng, bool grad_on_last) {
    std::vector<int64_t> shape;
    if (net.cfg.variant == NetVariant::Mlp)
        shape = {batch, net.cfg.data_dim};
    else
        shape = {batch, net.cfg.seq_len, net.cfg.data_dim};
    return rollout_impl(
        [&](const Tensor& x, const std::vector<double>& t, bool keep) {
            return net.forward(x, t, {}, keep);
        },
        shape, timesteps, rng, grad_on_last);
}

RolloutTrace rollout_fn(const VelocityFn& F, const std::vector<int64_t>& sample_shape,
                        const std::vector<double>& timesteps, Rng& rng) {
    return rollout_impl(
        [&](const Tensor& x, const std::vector<double>& t, bool) { return F(x, t); },
        sample_shape, timesteps, rng, /*grad_on_last=*/false);
}

ErrorAccumulation error_accumulation(VelocityNet& student, VelocityNet& teacher,
                                     const TaskSpec& spec, int grid_points, int64_t pairs,
                                     int ode_steps, Rng& rng) {
    ErrorAccumulation out;
    for (int gi = 0; gi < grid_points; ++gi) {
        const double t = 0.05 + (1.5 - 0.05) * gi / (grid_points - 1);
        Tensor x0 = sample_task_data(spec, pairs, rng, nullptr);
        Tensor eps = rng.normal_tensor(x0.shape);
        Tensor xt = axpy(scale(x0, std::cos(t)), std::sin(t), eps);
        std::vector<double> tv(static_cast<size_t>(pairs), t);
        Tensor f_s = consistency_apply(student.forward(xt, tv, {}), xt, tv);
        Tensor x_sol = teacher_ode_solve(teacher, xt, t, ode_steps);
        const int64_t per = x0.numel() / pairs;
        double gap = 0.0;
        for (int64_t b = 0; b < pairs; ++b) {
            double d = 0.0;
            for (int64_t j = 0; j < per; ++j) {
                const double r = f_s.at(b * per + j) - x_sol.at(b * per + j);
                d += r * r;
            }
            gap += std::sqrt(d);
        }
        out.t_grid.push_back(t);
        out.gap.push_back(gap / static_cast<double>(pairs));
    }
    out.spearman = spearman_rho(out.t_grid, out.gap);
    return out;
}

double spearman_rho(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2)
        throw std::invalid_argument("spearman: need two equal-length series");
    auto ranks = [](const std::vector<double>& v) {
        std::vector<size_t> idx(v.size());
        std::iota(idx.begin(), idx.end(), size_t{0});
        std::sort(idx.begin(), idx.end(), [&](size_t i, size_t j) { return v[i] < v[j]; });
        std::vector<double> r(v.size());
        for (size_t k = 0; k < idx.size(); ++k) r[idx[k]] = static_cast<double>(k);
        return r;
    };
    std::vector<double> ra = ranks(a), rb = ranks(b);
    const double n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (size_t i = 0; i < ra.size(); ++i) {
        ma += ra[i] / n;
        mb += rb[i] / n;
    }
    double num = 0, da = 0, db = 0;
    for (size_t i = 0; i < ra.size(); ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    return num / std::sqrt(da * db);
}

TrainResult train_rcm(const TrainConfig& cfg, const VelocityNet& teacher) {
    cfg.validate();
    Rng rng(cfg.seed);
    VelocityNet teacher_net = teacher.clone();
    TrainResult res{teacher.clone(), teacher.clone(), teacher.clone(), "", 0, 0};
    VelocityNet& student = res.student;
    VelocityNet& fake = res.fake;
    Optimizer opt_s{cfg.optimizer, cfg.lr_student};
    Optimizer opt_f{cfg.optimizer, cfg.lr_fake};
    EmaState ema = EmaState::init(student, cfg.ema_length);
    const bool conditional = cfg.task.conditional;

    // optional synthetic-data pool drawn once from the teacher
    Tensor pool;
    if (cfg.synthetic_data) {
        std::vector<int64_t> shape;
        if (teacher_net.cfg.variant == NetVariant::Mlp)
            shape = {1024, teacher_net.cfg.data_dim};
        else
            shape = {1024, teacher_net.cfg.seq_len, teacher_net.cfg.data_dim};
        pool = teacher_ode_solve(teacher_net, rng.normal_tensor(shape), std::atan(cfg.sigma_max),
                                 50);
    }
    auto draw_data = [&](std::vector<int>* labels) {
        if (!cfg.synthetic_data) return sample_task_data(cfg.task, cfg.batch, rng, labels);
        if (labels) labels->assign(static_cast<size_t>(cfg.batch), 0);
        const int64_t per = pool.numel() / pool.shape[0];
        std::vector<int64_t> shape = pool.shape;
        shape[0] = cfg.batch;
        Tensor x(shape);
        for (int64_t b = 0; b < cfg.batch; ++b) {
            const int64_t r = rng.uniform_int(0, pool.shape[0] - 1);
            for (int64_t j = 0; j < per; ++j) x.at(b * per + j) = pool.at(r * per + j);
        }
        return x;
    };

    std::ostringstream csv;
    csv << "iter,step_kind,scm_loss,dmd_loss,fm_loss,g_norm_mean,ema_snapshot_id\n";
    char line[256];

    for (int64_t i = 1; i <= cfg.total_iters; ++i) {
        if (i <= cfg.H || i % cfg.F_update == 0) {
            // ---- generator step ----
            std::vector<int> labels;
            Tensor x0 = draw_data(conditional ? &labels : nullptr);
            Tensor eps = rng.normal_tensor(x0.shape);
            const int64_t per = x0.numel() / cfg.batch;
            std::vector<double> t(static_cast<size_t>(cfg.batch));
            for (auto& z : t) z = sample_time(cfg.p_G, rng);
            Tensor xt(x0.shape);
            for (int64_t b = 0; b < cfg.batch; ++b)
                for (int64_t j = 0; j < per; ++j)
                    xt.at(b * per + j) = std::cos(t[static_cast<size_t>(b)]) * x0.at(b * per + j) +
                                         std::sin(t[static_cast<size_t>(b)]) * eps.at(b * per + j);
            std::vector<int> cond = conditional ? labels : std::vector<int>{};
            Tensor F_teacher =
                (conditional && cfg.cfg_scale > 0.0)
                    ? cfg_velocity(teacher_net, xt, t, cond,
                                   {cfg.cfg_scale, teacher_net.cfg.null_token()})
                    : teacher_net.forward(xt, t, cond);
            // fused JVP on the stop-gradient student
            Tensor tx = zeros_like(xt);
            std::vector<double> tt(static_cast<size_t>(cfg.batch));
            for (int64_t b = 0; b < cfg.batch; ++b) {
                const double w = std::cos(t[static_cast<size_t>(b)]) *
                                 std::sin(t[static_cast<size_t>(b)]);
                tt[static_cast<size_t>(b)] = w;
                for (int64_t j = 0; j < per; ++j)
                    tx.at(b * per + j) = w * F_teacher.at(b * per + j);
            }
            auto jr = student.forward_jvp(xt, t, cond, tx, tt);
            TangentPacket pk{jr.F, jr.tF, F_teacher, xt, t};
            WarmupState warm = WarmupState::at_iteration(i, cfg.H);
            Tensor g = scm_tangent(pk, warm);
            double g_norm_mean = 0.0;
            for (int64_t b = 0; b < cfg.batch; ++b) {
                double s = 0.0;
                for (int64_t j = 0; j < per; ++j) s += g.at(b * per + j) * g.at(b * per + j);
                g_norm_mean += std::sqrt(s) / static_cast<double>(cfg.batch);
            }
            Tensor F_live = student.forward(xt, t, cond, /*keep_tape=*/true);
            LossResult scm = scm_loss(F_live, jr.F, g, cfg.c);
            if (!std::isfinite(scm.value))
                throw NumericalAbort(i, cfg.seed,
                                     "scm loss non-finite at iteration " + std::to_string(i));
            student.params.zero_grad();
            student.backward(scm.grad);

            double dmd_val = 0.0;
            if (i > cfg.H && cfg.lambda_dmd > 0.0) {
                const int64_t N = rng.uniform_int(1, cfg.N_max);
                std::vector<double> ts = sample_decreasing_timesteps(cfg.p_D, N, rng);
                RolloutTrace trace = rollout(student, ts, cfg.batch, rng, /*grad_on_last=*/true);
                std::vector<double> tD(static_cast<size_t>(cfg.batch));
                for (auto& z : tD) z = sample_time(cfg.p_D, rng);
                Tensor epsD = rng.normal_tensor(trace.x0.shape);
                Tensor xD(trace.x0.shape);
                for (int64_t b = 0; b < cfg.batch; ++b)
                    for (int64_t j = 0; j < per; ++j)
                        xD.at(b * per + j) =
                            std::cos(tD[static_cast<size_t>(b)]) * trace.x0.at(b * per + j) +
                            std::sin(tD[static_cast<size_t>(b)]) * epsD.at(b * per + j);
                Tensor f_fake = consistency_apply(fake.forward(xD, tD, {}), xD, tD);
                Tensor Ft = teacher_net.forward(xD, tD, {});
                Tensor f_teach = consistency_apply(Ft, xD, tD);
                LossResult dmd = dmd_loss(trace.x0, f_fake, f_teach);
                dmd_val = dmd.value;
                if (!std::isfinite(dmd_val))
                    throw NumericalAbort(i, cfg.seed,
                                         "dmd loss non-finite at iteration " + std::to_string(i));
                // x0 = cos(tN) x - sin(tN) F: inject the DMD gradient via the
                // final rollout forward only
                const double sN = std::sin(ts.back());
                Tensor dF = scale(dmd.grad, -sN * cfg.lambda_dmd);
                student.backward(dF);
            }
            opt_s.step(student.params);
            ema.update(student.params);
            ++res.generator_steps;
            std::snprintf(line, sizeof line, "%lld,generator,%.17g,%.17g,0,%.17g,%lld\n",
                          static_cast<long long>(i), scm.value, dmd_val, g_norm_mean,
                          static_cast<long long>(ema.t));
        } else {
            // ---- critic step ----
            const int64_t N = rng.uniform_int(1, cfg.N_max);
            std::vector<double> ts = sample_decreasing_timesteps(cfg.p_D, N, rng);
            RolloutTrace trace = rollout(student, ts, cfg.batch, rng, /*grad_on_last=*/false);
            const int64_t per = trace.x0.numel() / cfg.batch;
            std::vector<double> t(static_cast<size_t>(cfg.batch));
            for (auto& z : t) z = sample_time(cfg.p_D, rng);
            Tensor eps = rng.normal_tensor(trace.x0.shape);
            Tensor xt(trace.x0.shape);
            for (int64_t b = 0; b < cfg.batch; ++b)
                for (int64_t j = 0; j < per; ++j)
                    xt.at(b * per + j) =
                        std::cos(t[static_cast<size_t>(b)]) * trace.x0.at(b * per + j) +
                        std::sin(t[static_cast<size_t>(b)]) * eps.at(b * per + j);
            Tensor F_fake = fake.forward(xt, t, {}, /*keep_tape=*/true);
            LossResult fm = flow_matching_loss(F_fake, trace.x0, eps, t);
            if (!std::isfinite(fm.value))
                throw NumericalAbort(i, cfg.seed,
                                     "flow-matching loss non-finite at iteration " +
                                         std::to_string(i));
            fake.params.zero_grad();
            fake.backward(fm.grad);
            opt_f.step(fake.params);
            ++res.critic_steps;
            std::snprintf(line, sizeof line, "%lld,critic,0,0,%.17g,0,%lld\n",
                          static_cast<long long>(i), fm.value, static_cast<long long>(ema.t));
        }
        csv << line;
    }
    res.ema_student = ema.apply_to(student);
    res.metrics_csv = csv.str();
    if (!cfg.metrics_path.empty()) {
        FILE* f = std::fopen(cfg.metrics_path.c_str(), "wb");
        if (!f) throw std::runtime_error("cannot write metrics file: " + cfg.metrics_path);
        std::fwrite(res.metrics_csv.data(), 1, res.metrics_csv.size(), f);
        std::fclose(f);
    }
    return res;
}

}  // namespace rcm
