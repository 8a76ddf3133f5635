#pragma once

#include <functional>
#include <optional>
#include <string>

#include "rcm/tensor.hpp"

namespace rcm {

constexpr double kHalfPi = 1.5707963267948966;

// alpha(t), sigma(t) and their time derivatives on a closed domain.
// snr = alpha/sigma is strictly monotone where defined.
struct NoiseSchedule {
    std::string name;
    std::function<double(double)> alpha, sigma, dalpha, dsigma;
    double t_min = 0.0, t_max = 1.0;
    // Closed-form inverse of sigma/alpha = ratio, when available.
    std::function<double(double)> snr_ratio_inverse;
};

NoiseSchedule trigflow_schedule();
NoiseSchedule rectified_flow_schedule();
// Variance-exploding: alpha = 1, sigma = t_raw on [0, sigma_max].
NoiseSchedule ve_schedule(double sigma_max);

// Solves sigma(t_raw)/alpha(t_raw) = tan(t) for t_raw; closed form when the
// schedule provides one, bisection (tol 1e-12, 200 iterations) otherwise.
double snr_match(const NoiseSchedule& raw, double t);

// Raw-schedule denoiser re-expressed in TrigFlow time via SNR matching.
struct WrappedDenoiser {
    std::function<Tensor(const Tensor&, double)> raw_denoiser;  // x0 prediction
    NoiseSchedule raw_schedule;
};

struct WrapResult {
    Tensor f;                      // denoiser value
    Tensor F;                      // TrigFlow velocity (cos(t)x - f)/sin(t)
    bool velocity_defined = true;  // false at t = 0
};

// All scalar conversions in double regardless of tensor precision.
WrapResult wrap_denoiser(const WrappedDenoiser& w, const Tensor& x_t, double t);

enum class Parameterization { X0, Eps, V, Score };
Parameterization parameterization_from_name(const std::string& s);

Tensor convert_parameterization(const Tensor& value, Parameterization from, Parameterization to,
                                const Tensor& x_t, const NoiseSchedule& sched, double t);

// Time distributions from the training configuration: either
// t = arctan(scale * exp(z)) with z ~ N(mean, std), or the shifted
// rectified-flow map t_RF = 5u/(1+4u), t = arctan(t_RF/(1-t_RF)).
struct TimeDistSpec {
    enum class Kind { LognormalArctan, UniformShiftedRF };
    Kind kind = Kind::LognormalArctan;
    double mean = -0.8;
    double std = 1.6;
    double scale = 1.0;
};

double sample_time(const TimeDistSpec& dist, Rng& rng);  // in (0, pi/2)
double time_dist_cdf(const TimeDistSpec& dist, double t);

// ---- Analytic oracles --------------------------------------------------

// Isotropic Gaussian mixture with shared component variance.
struct IsoGmm {
    int dim = 2;
    double var = 0.01;
    std::vector<double> weights;
    std::vector<std::vector<double>> means;
};

IsoGmm gmm_circle(int modes, double radius, double var);
Tensor gmm_sample(const IsoGmm& g, int64_t n, Rng& rng);

// Closed-form posterior mean E[x0 | x_t] under x_t = alpha x0 + sigma eps.
Tensor gmm_denoiser(const IsoGmm& g, const Tensor& x_t, double alpha, double sigma);
// PF-ODE velocity under TrigFlow: (cos(t) x - denoiser)/sin(t).
Tensor gmm_velocity_trigflow(const IsoGmm& g, const Tensor& x_t, double t);

// Single Gaussian N(mean, var I): exact consistency function (ODE endpoint)
// and exact TrigFlow velocity.
Tensor gaussian_consistency(const std::vector<double>& mean, double var, const Tensor& x_t,
                            double t);
Tensor gaussian_velocity_trigflow(const std::vector<double>& mean, double var, const Tensor& x_t,
                                  double t);
// Denoiser of the same distribution under an arbitrary schedule.
Tensor gaussian_denoiser(const std::vector<double>& mean, double var, const Tensor& x_t,
                         double alpha, double sigma);

}  // namespace rcm
