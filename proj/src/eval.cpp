#include "rcm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace rcm {

SampleSchedule SampleSchedule::for_steps(int k, double sigma_max) {
    if (k < 1 || k > 8) throw std::invalid_argument("sample schedule: steps must be in [1,8]");
    const double t0 = std::atan(sigma_max);
    std::vector<double> base;
    if (k <= 4)
        base = {t0, 1.3, 1.0, 0.6};
    else
        base = {t0, 1.3, 1.0, 1.0, 0.6, 0.6, 0.3, 0.3};
    SampleSchedule s;
    s.timesteps.assign(base.begin(), base.begin() + k);
    s.validate();
    return s;
}

void SampleSchedule::validate() const {
    if (timesteps.empty()) throw std::invalid_argument("sample schedule: empty");
    for (size_t i = 1; i < timesteps.size(); ++i)
        if (timesteps[i] > timesteps[i - 1])
            throw std::invalid_argument("sample schedule: timesteps must be nonincreasing");
    if (timesteps.front() <= 0.0 || timesteps.front() >= kHalfPi)
        throw std::invalid_argument("sample schedule: first entry must lie in (0, pi/2)");
}

Tensor sample_consistency(VelocityNet& net, const SampleSchedule& schedule, int64_t count,
                          Rng& rng) {
    schedule.validate();
    return rollout(net, schedule.timesteps, count, rng, /*grad_on_last=*/false).x0;
}

ModeReport mode_coverage(const Tensor& samples, const IsoGmm& mixture, double share_threshold) {
    const int64_t n = samples.shape[0];
    const size_t M = mixture.means.size();
    const int64_t d = samples.shape[1];
    double min_dist = 1e300;
    for (size_t a = 0; a < M; ++a)
        for (size_t b = a + 1; b < M; ++b) {
            double s = 0.0;
            for (int64_t j = 0; j < d; ++j) {
                const double r = mixture.means[a][(size_t)j] - mixture.means[b][(size_t)j];
                s += r * r;
            }
            min_dist = std::min(min_dist, std::sqrt(s));
        }
    const double radius = 0.5 * min_dist;
    std::vector<int64_t> counts(M, 0);
    for (int64_t i = 0; i < n; ++i) {
        size_t best = 0;
        double best_d = 1e300;
        for (size_t m = 0; m < M; ++m) {
            double s = 0.0;
            for (int64_t j = 0; j < d; ++j) {
                const double r = samples.at(i, j) - mixture.means[m][(size_t)j];
                s += r * r;
            }
            if (s < best_d) {
                best_d = s;
                best = m;
            }
        }
        if (std::sqrt(best_d) <= radius) ++counts[best];
    }
    ModeReport rep;
    for (size_t m = 0; m < M; ++m) {
        const double share = static_cast<double>(counts[m]) / static_cast<double>(n);
        rep.shares.push_back(share);
        if (share >= share_threshold) ++rep.recovered;
    }
    return rep;
}

double sliced_w2(const Tensor& a, const Tensor& b, int projections, Rng& rng) {
    if (a.shape[0] < 1 || b.shape[0] < 1)
        throw std::invalid_argument("sliced_w2: empty sample set");
    if (a.shape[1] != b.shape[1]) throw std::invalid_argument("sliced_w2: dimension mismatch");
    const int64_t d = a.shape[1];
    const int64_t na = a.shape[0], nb = b.shape[0];
    const int64_t m = std::max<int64_t>(256, std::max(na, nb));
    std::vector<double> pa(static_cast<size_t>(na)), pb(static_cast<size_t>(nb));
    double acc = 0.0;
    for (int p = 0; p < projections; ++p) {
        std::vector<double> dir(static_cast<size_t>(d));
        double norm = 0.0;
        for (auto& v : dir) {
            v = rng.normal();
            norm += v * v;
        }
        norm = std::sqrt(norm);
        for (auto& v : dir) v /= norm;
        for (int64_t i = 0; i < na; ++i) {
            double s = 0.0;
            for (int64_t j = 0; j < d; ++j) s += a.at(i, j) * dir[(size_t)j];
            pa[(size_t)i] = s;
        }
        for (int64_t i = 0; i < nb; ++i) {
            double s = 0.0;
            for (int64_t j = 0; j < d; ++j) s += b.at(i, j) * dir[(size_t)j];
            pb[(size_t)i] = s;
        }
        std::sort(pa.begin(), pa.end());
        std::sort(pb.begin(), pb.end());
        double w2 = 0.0;  // quadrature over shared quantile levels
        for (int64_t q = 0; q < m; ++q) {
            const double u = (q + 0.5) / static_cast<double>(m);
            const double qa = pa[static_cast<size_t>(std::min<int64_t>(na - 1, (int64_t)(u * na)))];
            const double qb = pb[static_cast<size_t>(std::min<int64_t>(nb - 1, (int64_t)(u * nb)))];
            w2 += (qa - qb) * (qa - qb) / static_cast<double>(m);
        }
        acc += w2 / projections;
    }
    return std::sqrt(acc);
}

std::vector<PrecisionStudyRow> precision_study(const VelocityNet& net, Precision low,
                                               Precision high, int grid_points, int64_t batch,
                                               Rng& rng) {
    VelocityNet net_hi = net.with_precision(high, TimeEmbedPrecision::AlwaysDouble);
    VelocityNet net_lo = net.with_precision(low, TimeEmbedPrecision::SameAsNet);
    std::vector<int64_t> shape;
    if (net.cfg.variant == NetVariant::Mlp)
        shape = {batch, net.cfg.data_dim};
    else
        shape = {batch, net.cfg.seq_len, net.cfg.data_dim};
    Tensor x = rng.normal_tensor(shape);
    std::vector<PrecisionStudyRow> rows;
    for (int gi = 0; gi < grid_points; ++gi) {
        const double t = kHalfPi * (gi + 0.5) / grid_points;
        std::vector<double> tv(static_cast<size_t>(batch), t);
        // tangent direction fixed in double: the rearranged JVP weighting
        // along the high-precision velocity
        Tensor F_hi = net_hi.forward(x, tv, {});
        const double w = std::cos(t) * std::sin(t);
        Tensor tx = scale(F_hi, w);
        std::vector<double> tt(static_cast<size_t>(batch), w);
        auto jr_hi = net_hi.forward_jvp(x, tv, {}, tx, tt);
        auto jr_lo = net_lo.forward_jvp(x, tv, {}, tx, tt);
        PrecisionStudyRow row;
        row.t = t;
        const double fn = l2_norm(jr_hi.F), jn = l2_norm(jr_hi.tF);
        row.out_rel = l2_norm(sub(to_precision(jr_lo.F, Precision::Double), jr_hi.F)) /
                      (fn > 0 ? fn : 1.0);
        row.jvp_rel = l2_norm(sub(to_precision(jr_lo.tF, Precision::Double), jr_hi.tF)) /
                      (jn > 0 ? jn : 1.0);
        rows.push_back(row);
    }
    return rows;
}

std::string precision_study_csv(const std::vector<PrecisionStudyRow>& rows) {
    std::ostringstream out;
    out << "t,output_rel_l2,jvp_rel_l2\n";
    char line[128];
    for (const auto& r : rows) {
        std::snprintf(line, sizeof line, "%.17g,%.17g,%.17g\n", r.t, r.out_rel, r.jvp_rel);
        out << line;
    }
    return out.str();
}

void write_svg_scatter(const std::string& path, const Tensor& samples2d, double extent) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write svg: " + path);
    const int W = 480;
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << W
      << "\" viewBox=\"0 0 " << W << " " << W << "\">\n"
      << "<rect width=\"" << W << "\" height=\"" << W << "\" fill=\"white\"/>\n";
    for (int64_t i = 0; i < samples2d.shape[0]; ++i) {
        const double px = (samples2d.at(i, 0) + extent) / (2 * extent) * W;
        const double py = (extent - samples2d.at(i, 1)) / (2 * extent) * W;
        if (px < 0 || px > W || py < 0 || py > W) continue;
        f << "<circle cx=\"" << px << "\" cy=\"" << py << "\" r=\"1.6\" fill=\"#1f6fb2\" "
             "fill-opacity=\"0.55\"/>\n";
    }
    f << "</svg>\n";
}

}  // namespace rcm
