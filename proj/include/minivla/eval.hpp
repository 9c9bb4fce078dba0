#pragma once

#include "minivla/pipeline.hpp"

#include <array>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace minivla {

// Minimum over samples of the mean Euclidean (x, y) displacement from the
// ground truth over the 64-step horizon; yaw is ignored. Double precision.
double min_ade(std::span<const Trajectory> samples, const Trajectory& gt);

// Mean pairwise ADE between samples; needs at least two.
double diversity(std::span<const Trajectory> samples);

// Unsigned distance from (x, y) to the nearest polyline segment; ties at
// shared vertices resolve to the smaller segment index.
double lateral_offset(std::span<const std::array<double, 2>> polyline, double x,
                      double y);

enum class FailureKind { Collision, OffDrivable, LateralDeviation, None };
const char* failure_kind_name(FailureKind k);

struct FailureEvent {
    FailureKind kind = FailureKind::None;
    double arc_length = 0.0;
    std::int64_t step = -1;
};

struct Obstacle {
    double x = 0.0, y = 0.0, radius = 1.0;
    double vx = 0.0, vy = 0.0;
};

enum class PlanSelector { Lane0, MinLateral };

struct ClosedLoopWorld {
    std::vector<std::array<double, 2>> centerline; // also the ground-truth path
    double halfwidth = 4.0;
    std::vector<Obstacle> obstacles;
    double max_distance = 100.0;
    std::int64_t replan_period = 5; // steps between plans (default 0.5 s)
    double initial_speed = 5.0;
    std::int64_t max_steps = 5000; // stall guard
    PlanSelector selector = PlanSelector::Lane0;

    void validate() const;
};

struct SimObservation {
    Pose world_pose;
    double speed = 0.0;
    PoseHistory history; // ego frame, final pose at the origin
    std::int64_t step = 0;
};

struct PlanSample {
    Trajectory trajectory; // ego frame
    ActionSequence actions;
};

using Policy = std::function<std::vector<PlanSample>(const SimObservation&)>;

struct SimStep {
    double x = 0.0, y = 0.0, yaw = 0.0;
    double v = 0.0;
    double odometer = 0.0;
};

struct SimResult {
    double dtf = 0.0;
    FailureEvent failure;
    std::vector<SimStep> trace;
};

// Receding-horizon rollout: replan every replan_period steps, execute the
// selected sample's next actions through the unicycle model, check failures
// in fixed precedence order after each step. DTF is the odometer reading
// before the first failing step, capped at max_distance.
SimResult simulate_closed_loop(const ClosedLoopWorld& world, const Policy& policy);

// Constant-action policy emitting n identical samples.
Policy scripted_policy(double accel, double curvature, int n_samples = 1);

struct OpenLoopCase {
    std::string id;
    Trajectory gt_future;
    std::filesystem::path source; // scenario file for engine-backed generators
};

using SampleGenerator =
    std::function<std::vector<Trajectory>(const OpenLoopCase&, int k)>;

struct OpenLoopOutcome {
    std::vector<std::pair<std::string, double>> per_case;
    double mean_min_ade = 0.0;
    std::int64_t skipped = 0;
};

// Cases that fail to evaluate are logged, counted, and skipped.
OpenLoopOutcome eval_open_loop(std::span<const OpenLoopCase> cases,
                               const SampleGenerator& generator, int k);

} // namespace minivla
