// Command-line front end: training, sampling, kernel verification, context-
// parallel checks, the precision study, and the kernel benchmark.
//
// Exit codes: 0 success, 1 verification failure, 2 configuration or usage
// error, 3 numerical abort during training. Errors print one line to stderr
// of the form "error: <category>: <message>".
//
// Environment overrides: RCM_SEED replaces every seed option; RCM_OUT_DIR is
// prepended to relative output paths.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "rcm/cpsim.hpp"
#include "rcm/eval.hpp"

using json = nlohmann::json;
using namespace rcm;

namespace {

std::string out_path(const std::string& p) {
    const char* dir = std::getenv("RCM_OUT_DIR");
    if (!dir || !*dir || p.empty() || p[0] == '/') return p;
    return std::string(dir) + "/" + p;
}

uint64_t effective_seed(uint64_t s) {
    const char* env = std::getenv("RCM_SEED");
    return env && *env ? std::strtoull(env, nullptr, 10) : s;
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << text;
}

TaskSpec task_from_json(const json& j) {
    TaskSpec s;
    s.task = toy_task_from_name(j.value("name", "gmm2d"));
    s.modes = j.value("modes", s.modes);
    s.radius = j.value("radius", s.radius);
    s.var = j.value("var", s.var);
    s.conditional = j.value("conditional", s.conditional);
    s.seq_len = j.value("seq_len", s.seq_len);
    s.channels = j.value("channels", s.channels);
    return s;
}

TimeDistSpec dist_from_json(const json& j, TimeDistSpec d) {
    const std::string kind = j.value("kind", "lognormal_arctan");
    if (kind == "lognormal_arctan")
        d.kind = TimeDistSpec::Kind::LognormalArctan;
    else if (kind == "uniform_shifted_rf")
        d.kind = TimeDistSpec::Kind::UniformShiftedRF;
    else
        throw std::invalid_argument("unknown time distribution: " + kind);
    d.mean = j.value("mean", d.mean);
    d.std = j.value("std", d.std);
    d.scale = j.value("scale", d.scale);
    return d;
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    if (j.contains("task")) c.task = task_from_json(j.at("task"));
    c.lambda_dmd = j.value("lambda_dmd", c.lambda_dmd);
    c.c = j.value("c", c.c);
    c.H = j.value("H", c.H);
    c.F_update = j.value("F_update", c.F_update);
    c.N_max = j.value("N_max", c.N_max);
    c.ema_length = j.value("ema_length", c.ema_length);
    if (j.contains("p_G")) c.p_G = dist_from_json(j.at("p_G"), c.p_G);
    if (j.contains("p_D")) c.p_D = dist_from_json(j.at("p_D"), c.p_D);
    c.lr_student = j.value("lr_student", c.lr_student);
    c.lr_fake = j.value("lr_fake", c.lr_fake);
    if (j.contains("optimizer")) c.optimizer = optimizer_from_name(j.at("optimizer"));
    c.cfg_scale = j.value("cfg_scale", c.cfg_scale);
    c.sigma_max = j.value("sigma_max", c.sigma_max);
    c.total_iters = j.value("total_iters", c.total_iters);
    c.batch = j.value("batch", c.batch);
    c.seed = j.value("seed", c.seed);
    c.synthetic_data = j.value("synthetic_data", c.synthetic_data);
    return c;
}

std::string samples_csv(const Tensor& x) {
    std::string s;
    char line[128];
    const int64_t n = x.shape[0];
    const int64_t per = x.numel() / n;
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < per; ++j) {
            std::snprintf(line, sizeof line, "%.17g%c", x.at(i * per + j),
                          j + 1 < per ? ',' : '\n');
            s += line;
        }
    }
    return s;
}

int cmd_train(const std::string& config_path) {
    std::ifstream f(config_path);
    if (!f) {
        std::cerr << "error: config: cannot open " << config_path << "\n";
        return 2;
    }
    json j;
    try {
        j = json::parse(f);
    } catch (const std::exception& e) {
        std::cerr << "error: config: " << e.what() << "\n";
        return 2;
    }
    TrainConfig cfg;
    int64_t teacher_iters = 3000, teacher_batch = 128;
    double teacher_lr = 3e-3;
    uint64_t teacher_seed = 123;
    try {
        cfg = train_config_from_json(j);
        if (j.contains("teacher")) {
            const json& t = j.at("teacher");
            teacher_iters = t.value("iters", teacher_iters);
            teacher_batch = t.value("batch", teacher_batch);
            teacher_lr = t.value("lr", teacher_lr);
            teacher_seed = t.value("seed", teacher_seed);
        }
        cfg.seed = effective_seed(cfg.seed);
        cfg.validate();
    } catch (const std::exception& e) {
        std::cerr << "error: config: " << e.what() << "\n";
        return 2;
    }
    try {
        Rng trng(teacher_seed);
        VelocityNet teacher = pretrain_teacher(cfg.task, teacher_iters, teacher_batch,
                                               teacher_lr, trng);
        TrainResult res = train_rcm(cfg, teacher);
        save_checkpoint(teacher, out_path("teacher"));
        save_checkpoint(res.student, out_path("student"));
        save_checkpoint(res.ema_student, out_path("ema_student"));
        save_checkpoint(res.fake, out_path("fake"));
        write_file(out_path("metrics.csv"), res.metrics_csv);
        write_file(out_path("run.json"), j.dump(2) + "\n");
        SampleSchedule sched = SampleSchedule::for_steps(2, cfg.sigma_max);
        Rng srng(cfg.seed + 1);
        Tensor x0 = sample_consistency(res.ema_student, sched, 1024, srng);
        write_file(out_path("samples.csv"), samples_csv(x0));
        if (x0.ndim() == 2 && x0.shape[1] == 2)
            write_svg_scatter(out_path("samples.svg"), x0);
        std::cout << "train: ok generator_steps=" << res.generator_steps
                  << " critic_steps=" << res.critic_steps << "\n";
        return 0;
    } catch (const NumericalAbort& e) {
        std::cerr << "error: numerical: " << e.what() << " (iter=" << e.iter
                  << " seed=" << e.seed << ")\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: runtime: " << e.what() << "\n";
        return 2;
    }
}

int cmd_sample(const std::string& run_dir, const std::string& which, int steps, int64_t count,
               uint64_t seed, const std::string& out) {
    try {
        std::ifstream f(run_dir + "/run.json");
        if (!f) throw std::invalid_argument("cannot open " + run_dir + "/run.json");
        json j = json::parse(f);
        TrainConfig cfg = train_config_from_json(j);
        VelocityNet net(task_net_config(cfg.task));
        Rng init_rng(0);
        net.init(init_rng);  // allocate parameters; values come from the checkpoint
        load_checkpoint(net, run_dir + "/" + which);
        SampleSchedule sched = SampleSchedule::for_steps(steps, cfg.sigma_max);
        Rng rng(effective_seed(seed));
        Tensor x0 = sample_consistency(net, sched, count, rng);
        write_file(out_path(out), samples_csv(x0));
        std::cout << "sample: ok count=" << count << " steps=" << steps << "\n";
        return 0;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: config: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: runtime: " << e.what() << "\n";
        return 2;
    }
}

int cmd_verify_kernel(int cases, uint64_t seed, double tol) {
    Rng rng(effective_seed(seed));
    double worst = 0.0;
    for (int k = 0; k < cases; ++k) {
        const int64_t n1 = rng.uniform_int(1, 64), n2 = rng.uniform_int(1, 64);
        const std::vector<int64_t> dims = {1, 4, 8, 16};
        const int64_t d = dims[static_cast<size_t>(rng.uniform_int(0, 3))];
        AttentionInputs in;
        in.Q = rng.normal_tensor({n1, d});
        in.tQ = rng.normal_tensor({n1, d});
        in.K = rng.normal_tensor({n2, d});
        in.tK = rng.normal_tensor({n2, d});
        in.V = rng.normal_tensor({n2, d});
        in.tV = rng.normal_tensor({n2, d});
        BlockSpec blocks{rng.uniform_int(1, 24), rng.uniform_int(1, 24)};
        AttentionOutputs ref = attention_dense(in);
        AttentionOutputs got = attention_jvp_blocked(in, blocks);
        const double den = std::max(1e-30, std::max(max_abs(ref.O), max_abs(ref.tO)));
        const double err = std::max(max_abs_diff(ref.O, got.O),
                                    max_abs_diff(ref.tO, got.tO)) / den;
        worst = std::max(worst, err);
    }
    std::printf("verify-kernel: cases=%d max_rel_err=%.3e tol=%.1e %s\n", cases, worst, tol,
                worst <= tol ? "pass" : "FAIL");
    return worst <= tol ? 0 : 1;
}

int cmd_cp_check() {
    Rng rng(301);
    bool ok = true;
    for (int P : {1, 2, 4}) {
        for (int64_t H : {4, 8}) {
            for (int64_t L : {8, 16, 32}) {
                const int64_t B = 2, C = 8;
                Tensor Q = rng.normal_tensor({B, H, L, C}), tQ = rng.normal_tensor({B, H, L, C});
                Tensor K = rng.normal_tensor({B, H, L, C}), tK = rng.normal_tensor({B, H, L, C});
                Tensor V = rng.normal_tensor({B, H, L, C}), tV = rng.normal_tensor({B, H, L, C});
                BlockSpec blocks;
                Tensor O, tO;
                attention_jvp_multihead(Q, K, V, tQ, tK, tV, blocks, O, tO);
                CpAttentionResult r = cp_attention_jvp(shard(Q, P), shard(K, P), shard(V, P),
                                                       shard(tQ, P), shard(tK, P), shard(tV, P),
                                                       blocks);
                const bool match = bitwise_equal(unshard(r.O), O) &&
                                   bitwise_equal(unshard(r.tO), tO);
                if (!match) {
                    std::printf("cp-check: P=%d H=%lld L=%lld MISMATCH\n", P,
                                static_cast<long long>(H), static_cast<long long>(L));
                    ok = false;
                }
            }
        }
    }
    std::printf("cp-check: %s\n", ok ? "bitwise equal for P in {1,2,4}" : "FAIL");
    return ok ? 0 : 1;
}

int cmd_precision_study(int grid, int64_t batch, uint64_t seed, const std::string& out) {
    TaskSpec spec;
    spec.task = ToyTask::ToySeq;
    VelocityNet net(task_net_config(spec));
    Rng rng(effective_seed(seed));
    net.init(rng);
    // give the zero-initialized heads signal so the study is not 0/0
    for (const auto& name : net.params.order) {
        Tensor& p = net.params.p(name);
        if (max_abs(p) == 0.0)
            for (auto& v : p.data) v = 0.2 * rng.normal();
    }
    Rng srng(effective_seed(seed) + 1);
    auto rows = precision_study(net, Precision::Single, Precision::Double, grid, batch, srng);
    write_file(out_path(out), precision_study_csv(rows));
    std::vector<double> o, jv;
    for (const auto& r : rows) o.push_back(r.out_rel), jv.push_back(r.jvp_rel);
    std::sort(o.begin(), o.end());
    std::sort(jv.begin(), jv.end());
    std::printf("precision-study: grid=%d median_out_rel=%.3e median_jvp_rel=%.3e\n", grid,
                o[o.size() / 2], jv[jv.size() / 2]);
    return 0;
}

int cmd_bench(int repeats, const std::string& out) {
    std::vector<std::array<int64_t, 3>> sizes = {
        {64, 64, 16}, {128, 128, 16}, {256, 256, 16}, {256, 256, 64}, {512, 512, 64}};
    auto rows = kernel_bench(sizes, BlockSpec{}, repeats, 17);
    const std::string csv = bench_csv(rows);
    if (!out.empty()) write_file(out_path(out), csv);
    std::fputs(csv.c_str(), stdout);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"score-regularized consistency distillation toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    auto* train = app.add_subcommand("train", "run distillation from a JSON config");
    train->add_option("--config", config_path, "JSON training configuration")->required();

    std::string run_dir, which = "ema_student", sample_out = "samples.csv";
    int steps = 2;
    int64_t count = 1024;
    uint64_t sample_seed = 0;
    auto* sample = app.add_subcommand("sample", "few-step sampling from a saved run");
    sample->add_option("--run-dir", run_dir, "directory written by train")->required();
    sample->add_option("--which", which, "teacher|student|ema_student|fake");
    sample->add_option("--steps", steps, "number of sampling steps (1-8)");
    sample->add_option("--count", count, "number of samples");
    sample->add_option("--seed", sample_seed, "sampling seed");
    sample->add_option("--out", sample_out, "output CSV path");

    int vk_cases = 200;
    uint64_t vk_seed = 11;
    double vk_tol = 1e-10;
    auto* verify = app.add_subcommand("verify-kernel", "blocked kernel vs dense reference");
    verify->add_option("--cases", vk_cases, "randomized cases");
    verify->add_option("--seed", vk_seed, "rng seed");
    verify->add_option("--tol", vk_tol, "max relative error");

    auto* cp = app.add_subcommand("cp-check", "context-parallel bitwise equivalence");

    int ps_grid = 100;
    int64_t ps_batch = 16;
    uint64_t ps_seed = 5;
    std::string ps_out = "precision_study.csv";
    auto* ps = app.add_subcommand("precision-study", "single vs double output and JVP error");
    ps->add_option("--grid", ps_grid, "t grid points");
    ps->add_option("--batch", ps_batch, "batch size");
    ps->add_option("--seed", ps_seed, "rng seed");
    ps->add_option("--out", ps_out, "output CSV path");

    int bench_repeats = 5;
    std::string bench_out;
    auto* bench = app.add_subcommand("bench", "time blocked kernel vs serial dense reference");
    bench->add_option("--repeats", bench_repeats, "timed repeats per size");
    bench->add_option("--out", bench_out, "optional CSV path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    if (train->parsed()) return cmd_train(config_path);
    if (sample->parsed()) return cmd_sample(run_dir, which, steps, count, sample_seed, sample_out);
    if (verify->parsed()) return cmd_verify_kernel(vk_cases, vk_seed, vk_tol);
    if (cp->parsed()) return cmd_cp_check();
    if (ps->parsed()) return cmd_precision_study(ps_grid, ps_batch, ps_seed, ps_out);
    if (bench->parsed()) return cmd_bench(bench_repeats, bench_out);
    return 2;
}
