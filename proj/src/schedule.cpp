#include "rcm/schedule.hpp"

#include <algorithm>
#include <cmath>

namespace rcm {

NoiseSchedule trigflow_schedule() {
    NoiseSchedule s;
    s.name = "trigflow";
    s.alpha = [](double t) { return std::cos(t); };
    s.sigma = [](double t) { return std::sin(t); };
    s.dalpha = [](double t) { return -std::sin(t); };
    s.dsigma = [](double t) { return std::cos(t); };
    s.t_min = 0.0;
    s.t_max = kHalfPi;
    s.snr_ratio_inverse = [](double ratio) { return std::atan(ratio); };
    return s;
}

NoiseSchedule rectified_flow_schedule() {
    NoiseSchedule s;
    s.name = "rectified-flow";
    s.alpha = [](double t) { return 1.0 - t; };
    s.sigma = [](double t) { return t; };
    s.dalpha = [](double) { return -1.0; };
    s.dsigma = [](double) { return 1.0; };
    s.t_min = 0.0;
    s.t_max = 1.0;
    s.snr_ratio_inverse = [](double ratio) { return ratio / (1.0 + ratio); };
    return s;
}

NoiseSchedule ve_schedule(double sigma_max) {
    NoiseSchedule s;
    s.name = "ve";
    s.alpha = [](double) { return 1.0; };
    s.sigma = [](double t) { return t; };
    s.dalpha = [](double) { return 0.0; };
    s.dsigma = [](double) { return 1.0; };
    s.t_min = 0.0;
    s.t_max = sigma_max;
    s.snr_ratio_inverse = [](double ratio) { return ratio; };
    return s;
}

double snr_match(const NoiseSchedule& raw, double t) {
    const double target = std::tan(t);
    if (raw.snr_ratio_inverse) {
        double t_raw = raw.snr_ratio_inverse(target);
        if (t_raw < raw.t_min - 1e-12 || t_raw > raw.t_max + 1e-12)
            throw std::invalid_argument("snr_match: tan(t)=" + std::to_string(target) +
                                        " outside schedule range of " + raw.name);
        return std::clamp(t_raw, raw.t_min, raw.t_max);
    }
    auto ratio = [&](double tr) { return raw.sigma(tr) / raw.alpha(tr); };
    double lo = raw.t_min, hi = raw.t_max;
    const double rlo = ratio(lo), rhi = ratio(hi);
    if (target < std::min(rlo, rhi) || target > std::max(rlo, rhi))
        throw std::invalid_argument("snr_match: tan(t)=" + std::to_string(target) +
                                    " outside range [" + std::to_string(std::min(rlo, rhi)) +
                                    "," + std::to_string(std::max(rlo, rhi)) + "] of " + raw.name);
    const bool increasing = rhi > rlo;
    for (int i = 0; i < 200; ++i) {
        double mid = 0.5 * (lo + hi);
        double r = ratio(mid);
        if (std::abs(r - target) <= 1e-12) return mid;
        if ((r < target) == increasing)
            lo = mid;
        else
            hi = mid;
    }
    return 0.5 * (lo + hi);
}

WrapResult wrap_denoiser(const WrappedDenoiser& w, const Tensor& x_t, double t) {
    if (t < 0.0 || t >= kHalfPi) throw std::invalid_argument("wrap_denoiser: t outside [0, pi/2)");
    WrapResult r;
    if (t == 0.0) {
        // boundary: f(x, 0) = x, velocity undefined
        r.f = x_t;
        r.F = zeros_like(x_t);
        r.velocity_defined = false;
        return r;
    }
    const double t_raw = snr_match(w.raw_schedule, t);
    const double a = w.raw_schedule.alpha(t_raw);
    const double s = w.raw_schedule.sigma(t_raw);
    const double in_scale = std::sqrt(a * a + s * s);
    r.f = w.raw_denoiser(scale(x_t, in_scale), t_raw);
    r.F = scale(sub(scale(x_t, std::cos(t)), r.f), 1.0 / std::sin(t));
    r.velocity_defined = true;
    return r;
}

Parameterization parameterization_from_name(const std::string& s) {
    if (s == "x0") return Parameterization::X0;
    if (s == "eps") return Parameterization::Eps;
    if (s == "v") return Parameterization::V;
    if (s == "score") return Parameterization::Score;
    throw std::invalid_argument("unknown parameterization: " + s);
}

Tensor convert_parameterization(const Tensor& value, Parameterization from, Parameterization to,
                                const Tensor& x_t, const NoiseSchedule& sched, double t) {
    if (from == to) return value;
    const double a = sched.alpha(t), s = sched.sigma(t);
    const double da = sched.dalpha(t), ds = sched.dsigma(t);
    if (s <= 0.0 && (from == Parameterization::Eps || from == Parameterization::Score ||
                     to == Parameterization::Eps || to == Parameterization::Score))
        throw std::invalid_argument("convert_parameterization: sigma = 0 with eps/score state");

    // Recover (x0, eps) from the source prediction via x_t = a x0 + s eps.
    Tensor x0, eps;
    switch (from) {
        case Parameterization::X0:
            x0 = value;
            eps = scale(sub(x_t, scale(x0, a)), 1.0 / s);
            break;
        case Parameterization::Eps:
            eps = value;
            x0 = scale(sub(x_t, scale(eps, s)), 1.0 / a);
            break;
        case Parameterization::Score:
            eps = scale(value, -s);
            x0 = scale(sub(x_t, scale(eps, s)), 1.0 / a);
            break;
        case Parameterization::V: {
            // v = da x0 + ds eps; solve with x_t = a x0 + s eps
            const double det = ds * a - s * da;
            x0 = scale(sub(scale(x_t, ds), scale(value, s)), 1.0 / det);
            eps = scale(sub(scale(value, a), scale(x_t, da)), 1.0 / det);
            break;
        }
    }
    switch (to) {
        case Parameterization::X0:
            return x0;
        case Parameterization::Eps:
            return eps;
        case Parameterization::Score:
            return scale(eps, -1.0 / s);
        case Parameterization::V:
            return add(scale(x0, da), scale(eps, ds));
    }
    throw std::logic_error("convert_parameterization: unreachable");
}

double sample_time(const TimeDistSpec& dist, Rng& rng) {
    if (dist.std <= 0.0 && dist.kind == TimeDistSpec::Kind::LognormalArctan)
        throw std::invalid_argument("sample_time: std must be > 0");
    if (dist.scale <= 0.0) throw std::invalid_argument("sample_time: scale must be > 0");
    for (int attempt = 0; attempt < 1000; ++attempt) {
        double t;
        if (dist.kind == TimeDistSpec::Kind::LognormalArctan) {
            const double z = dist.mean + dist.std * rng.normal();
            t = std::atan(dist.scale * std::exp(z));
        } else {
            const double u = rng.uniform();
            const double t_rf = 5.0 * u / (1.0 + 4.0 * u);
            t = std::atan(t_rf / (1.0 - t_rf));
        }
        if (t > 0.0 && t < kHalfPi) return t;  // open-interval endpoints resampled
    }
    throw std::runtime_error("sample_time: resampling failed");
}

double time_dist_cdf(const TimeDistSpec& dist, double t) {
    if (t <= 0.0) return 0.0;
    if (t >= kHalfPi) return 1.0;
    if (dist.kind == TimeDistSpec::Kind::LognormalArctan) {
        const double z = std::log(std::tan(t) / dist.scale);
        return 0.5 * std::erfc(-(z - dist.mean) / (dist.std * std::sqrt(2.0)));
    }
    const double t_rf = std::tan(t) / (1.0 + std::tan(t));
    return t_rf / (5.0 - 4.0 * t_rf);
}

IsoGmm gmm_circle(int modes, double radius, double var) {
    IsoGmm g;
    g.dim = 2;
    g.var = var;
    for (int i = 0; i < modes; ++i) {
        const double th = 2.0 * M_PI * i / modes;
        g.weights.push_back(1.0 / modes);
        g.means.push_back({radius * std::cos(th), radius * std::sin(th)});
    }
    return g;
}

Tensor gmm_sample(const IsoGmm& g, int64_t n, Rng& rng) {
    Tensor x({n, g.dim}, Precision::Double);
    const double sd = std::sqrt(g.var);
    for (int64_t i = 0; i < n; ++i) {
        double u = rng.uniform();
        size_t k = 0;
        double acc = 0.0;
        for (; k < g.weights.size(); ++k) {
            acc += g.weights[k];
            if (u < acc) break;
        }
        k = std::min(k, g.weights.size() - 1);
        for (int64_t c = 0; c < g.dim; ++c)
            x.at(i, c) = g.means[k][static_cast<size_t>(c)] + sd * rng.normal();
    }
    return x;
}

Tensor gmm_denoiser(const IsoGmm& g, const Tensor& x_t, double alpha, double sigma) {
    const int64_t n = x_t.shape[0], d = x_t.shape[1];
    const double tv = alpha * alpha * g.var + sigma * sigma;  // marginal component variance
    Tensor out({n, d}, Precision::Double);
    for (int64_t i = 0; i < n; ++i) {
        // responsibilities via stabilized log weights
        std::vector<double> logw(g.weights.size());
        double mx = -1e300;
        for (size_t k = 0; k < g.weights.size(); ++k) {
            double sq = 0.0;
            for (int64_t c = 0; c < d; ++c) {
                const double dvc = x_t.at(i, c) - alpha * g.means[k][static_cast<size_t>(c)];
                sq += dvc * dvc;
            }
            logw[k] = std::log(g.weights[k]) - 0.5 * sq / tv;
            mx = std::max(mx, logw[k]);
        }
        double z = 0.0;
        for (double& lw : logw) {
            lw = std::exp(lw - mx);
            z += lw;
        }
        for (int64_t c = 0; c < d; ++c) {
            double acc = 0.0;
            for (size_t k = 0; k < g.weights.size(); ++k) {
                // posterior mean of component k
                const double pm = (sigma * sigma * g.means[k][static_cast<size_t>(c)] +
                                   alpha * g.var * x_t.at(i, c)) /
                                  tv;
                acc += (logw[k] / z) * pm;
            }
            out.at(i, c) = acc;
        }
    }
    return out;
}

Tensor gmm_velocity_trigflow(const IsoGmm& g, const Tensor& x_t, double t) {
    Tensor f = gmm_denoiser(g, x_t, std::cos(t), std::sin(t));
    return scale(sub(scale(x_t, std::cos(t)), f), 1.0 / std::sin(t));
}

Tensor gaussian_denoiser(const std::vector<double>& mean, double var, const Tensor& x_t,
                         double alpha, double sigma) {
    const double tv = alpha * alpha * var + sigma * sigma;
    Tensor out(x_t.shape, Precision::Double);
    const int64_t n = x_t.shape[0], d = x_t.shape[1];
    for (int64_t i = 0; i < n; ++i)
        for (int64_t c = 0; c < d; ++c)
            out.at(i, c) = (sigma * sigma * mean[static_cast<size_t>(c)] +
                            alpha * var * x_t.at(i, c)) /
                           tv;
    return out;
}

Tensor gaussian_consistency(const std::vector<double>& mean, double var, const Tensor& x_t,
                            double t) {
    // PF-ODE flow of a Gaussian maps quantiles: x_t = cos(t) mu + s(t) u with
    // s(t) = sqrt(cos^2 var + sin^2), so the endpoint is mu + sqrt(var) u.
    const double c = std::cos(t), s = std::sin(t);
    const double st = std::sqrt(c * c * var + s * s);
    Tensor out(x_t.shape, Precision::Double);
    const int64_t n = x_t.shape[0], d = x_t.shape[1];
    for (int64_t i = 0; i < n; ++i)
        for (int64_t k = 0; k < d; ++k) {
            const double u = (x_t.at(i, k) - c * mean[static_cast<size_t>(k)]) / st;
            out.at(i, k) = mean[static_cast<size_t>(k)] + std::sqrt(var) * u;
        }
    return out;
}

Tensor gaussian_velocity_trigflow(const std::vector<double>& mean, double var, const Tensor& x_t,
                                  double t) {
    Tensor f = gaussian_denoiser(mean, var, x_t, std::cos(t), std::sin(t));
    return scale(sub(scale(x_t, std::cos(t)), f), 1.0 / std::sin(t));
}

}  // namespace rcm
