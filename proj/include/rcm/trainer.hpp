#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "rcm/distill.hpp"
#include "rcm/model.hpp"
#include "rcm/schedule.hpp"

namespace rcm {

enum class ToyTask { Gmm2d, Checkerboard2d, ToySeq };
ToyTask toy_task_from_name(const std::string& name);

struct TaskSpec {
    ToyTask task = ToyTask::Gmm2d;
    int modes = 8;
    double radius = 1.5;
    double var = 0.0225;
    bool conditional = false;  // class label per mixture mode, with CFG dropout
    int seq_len = 8;           // toyseq only
    int channels = 2;

    IsoGmm mixture() const;  // gmm tasks only
};

Tensor sample_task_data(const TaskSpec& spec, int64_t n, Rng& rng,
                        std::vector<int>* labels = nullptr);
NetConfig task_net_config(const TaskSpec& spec);

enum class OptimizerKind { Sgd, PaperAdamW };
OptimizerKind optimizer_from_name(const std::string& name);

// Sgd: p -= lr g. PaperAdamW: beta1 = 0, beta2 = 0.999, decoupled weight
// decay 0.01, no gradient clipping.
struct Optimizer {
    OptimizerKind kind = OptimizerKind::Sgd;
    double lr = 1e-2;
    double beta2 = 0.999;
    double weight_decay = 0.01;
    double eps = 1e-8;
    int64_t t = 0;
    std::unordered_map<std::string, Tensor> v2;

    void step(ParamStore& params);
};

// Power-function EMA with relative width ema_length; history weights follow
// w_t proportional to t^gamma (closed form used as the test oracle).
double power_ema_gamma(double ema_length);

struct EmaState {
    double ema_length = 0.05;
    double gamma = 0.0;
    int64_t t = 0;
    std::unordered_map<std::string, Tensor> shadow;

    static EmaState init(const VelocityNet& net, double ema_length);
    void update(const ParamStore& live);
    VelocityNet apply_to(const VelocityNet& net) const;
};

struct TrainConfig {
    TaskSpec task;
    double lambda_dmd = 0.01;
    double c = 0.1;
    int64_t H = 100;
    int64_t F_update = 5;
    int64_t N_max = 4;
    double ema_length = 0.05;
    TimeDistSpec p_G{TimeDistSpec::Kind::LognormalArctan, -0.8, 1.6, 1.0};
    TimeDistSpec p_D{TimeDistSpec::Kind::LognormalArctan, 0.0, 1.6, 1.0};
    double lr_student = 1e-3;
    double lr_fake = 2e-3;
    OptimizerKind optimizer = OptimizerKind::PaperAdamW;
    double cfg_scale = 0.0;  // 0 = no guidance (unconditional task)
    double sigma_max = 80.0;
    int64_t total_iters = 2000;
    int64_t batch = 64;
    uint64_t seed = 0;
    bool synthetic_data = false;  // draw x_0 from teacher samples instead of data
    std::string metrics_path;     // empty = keep in memory only

    void validate() const;
};

// Heun integration of dx/dt = F(x, t) from t_start down to 0.
Tensor teacher_ode_solve(VelocityNet& net, const Tensor& x_t, double t_start, int steps,
                         const std::vector<int>& cond = {}, double cfg_scale = 0.0);

// Flow-matching pretraining on a toy task. Throws on non-finite loss.
VelocityNet pretrain_teacher(const TaskSpec& spec, int64_t iters, int64_t batch, double lr,
                             Rng& rng);

// t_1 = pi/2, then t_n = min(fresh p_D draw, t_{n-1}).
std::vector<double> sample_decreasing_timesteps(const TimeDistSpec& p_D, int64_t N, Rng& rng);

struct RolloutTrace {
    std::vector<double> timesteps;
    std::vector<Tensor> states;  // x at each t_n
    Tensor x0;                   // final output
    bool grad_on_last = false;   // last denoise left a tape on the net
};

RolloutTrace rollout(VelocityNet& net, const std::vector<double>& timesteps, int64_t batch,
                     Rng& rng, bool grad_on_last);

// Same simulation driven by a bare velocity map (analytic oracles).
using VelocityFn = std::function<Tensor(const Tensor&, const std::vector<double>&)>;
RolloutTrace rollout_fn(const VelocityFn& F, const std::vector<int64_t>& sample_shape,
                        const std::vector<double>& timesteps, Rng& rng);

struct TrainResult {
    VelocityNet student;
    VelocityNet ema_student;
    VelocityNet fake;
    std::string metrics_csv;
    int64_t generator_steps = 0;
    int64_t critic_steps = 0;
};

// Thrown when a loss turns non-finite; carries iteration and seed.
struct NumericalAbort : std::runtime_error {
    int64_t iter;
    uint64_t seed;
    NumericalAbort(int64_t i, uint64_t s, const std::string& what)
        : std::runtime_error(what), iter(i), seed(s) {}
};

TrainResult train_rcm(const TrainConfig& cfg, const VelocityNet& teacher);

// Denoiser gap vs teacher-ODE solution across a t grid, with its Spearman
// rank correlation against t.
struct ErrorAccumulation {
    std::vector<double> t_grid;
    std::vector<double> gap;
    double spearman = 0.0;
};

ErrorAccumulation error_accumulation(VelocityNet& student, VelocityNet& teacher,
                                     const TaskSpec& spec, int grid_points, int64_t pairs,
                                     int ode_steps, Rng& rng);

double spearman_rho(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace rcm
