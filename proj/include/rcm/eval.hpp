#pragma once

#include <string>
#include <vector>

#include "rcm/model.hpp"
#include "rcm/schedule.hpp"
#include "rcm/trainer.hpp"

namespace rcm {

// Few-step sampling schedules: [arctan(sigma_max), 1.3, 1.0, 0.6] for up to
// 4 steps, prefix-truncated; 5-8 steps use the repeated-timestep refinement
// list [arctan(sigma_max), 1.3, 1.0, 1.0, 0.6, 0.6, 0.3, 0.3].
struct SampleSchedule {
    std::vector<double> timesteps;

    static SampleSchedule for_steps(int k, double sigma_max);
    void validate() const;  // nonincreasing, first entry arctan(sigma_max)
};

Tensor sample_consistency(VelocityNet& net, const SampleSchedule& schedule, int64_t count,
                          Rng& rng);

struct ModeReport {
    int recovered = 0;
    std::vector<double> shares;
    double sliced_w2 = 0.0;  // filled by the caller when a reference set exists
};

// Nearest-center assignment within half the minimum inter-center distance.
ModeReport mode_coverage(const Tensor& samples, const IsoGmm& mixture, double share_threshold);

// sqrt(mean over random unit projections of squared 1-D Wasserstein-2).
double sliced_w2(const Tensor& a, const Tensor& b, int projections, Rng& rng);

struct PrecisionStudyRow {
    double t = 0.0;
    double out_rel = 0.0;  // ||F_low - F_high|| / ||F_high||
    double jvp_rel = 0.0;  // same for cos(t)sin(t) dF/dt
};

// Runs the net at (low, high) precision pairs over a uniform t grid on
// (0, pi/2); tangent directions and all scalar weights stay in double.
std::vector<PrecisionStudyRow> precision_study(const VelocityNet& net, Precision low,
                                               Precision high, int grid_points, int64_t batch,
                                               Rng& rng);
std::string precision_study_csv(const std::vector<PrecisionStudyRow>& rows);

void write_svg_scatter(const std::string& path, const Tensor& samples2d, double extent = 3.0);

}  // namespace rcm
