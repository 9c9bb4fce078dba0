#include "minivla/eval.hpp"

#include <cmath>
#include <deque>

namespace minivla {

namespace {

constexpr double kDt = 0.1;
constexpr double kEgoRadius = 1.0;
constexpr double kLateralDeviationLimit = 4.0;

double mean_displacement(const Trajectory& a, const Trajectory& b) {
    if (a.poses.size() != b.poses.size()) {
        throw InternalError("trajectory length mismatch");
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < a.poses.size(); ++i) {
        const double dx = static_cast<double>(a.poses[i].x) - b.poses[i].x;
        const double dy = static_cast<double>(a.poses[i].y) - b.poses[i].y;
        sum += std::sqrt(dx * dx + dy * dy);
    }
    return sum / static_cast<double>(a.poses.size());
}

} // namespace

const char* failure_kind_name(FailureKind k) {
    switch (k) {
        case FailureKind::Collision: return "collision";
        case FailureKind::OffDrivable: return "off_drivable";
        case FailureKind::LateralDeviation: return "lateral_deviation";
        case FailureKind::None: return "none";
    }
    return "?";
}

double min_ade(std::span<const Trajectory> samples, const Trajectory& gt) {
    if (samples.empty()) throw InternalError("min_ade: no samples");
    double best = mean_displacement(samples[0], gt);
    for (std::size_t i = 1; i < samples.size(); ++i) {
        best = std::min(best, mean_displacement(samples[i], gt));
    }
    return best;
}

double diversity(std::span<const Trajectory> samples) {
    if (samples.size() < 2) throw InternalError("diversity: need at least 2 samples");
    double sum = 0.0;
    std::int64_t pairs = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        for (std::size_t j = i + 1; j < samples.size(); ++j) {
            sum += mean_displacement(samples[i], samples[j]);
            pairs += 1;
        }
    }
    return sum / static_cast<double>(pairs);
}

double lateral_offset(std::span<const std::array<double, 2>> polyline, double x,
                      double y) {
    if (polyline.size() < 2) throw InternalError("polyline needs at least 2 points");
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i + 1 < polyline.size(); ++i) {
        const double ax = polyline[i][0], ay = polyline[i][1];
        const double bx = polyline[i + 1][0], by = polyline[i + 1][1];
        const double sx = bx - ax, sy = by - ay;
        const double len2 = sx * sx + sy * sy;
        double t = len2 > 0.0 ? ((x - ax) * sx + (y - ay) * sy) / len2 : 0.0;
        t = std::clamp(t, 0.0, 1.0);
        const double px = ax + t * sx, py = ay + t * sy;
        const double d = std::sqrt((x - px) * (x - px) + (y - py) * (y - py));
        if (d < best) best = d; // strict <: ties keep the smaller segment index
    }
    return best;
}

void ClosedLoopWorld::validate() const {
    if (centerline.size() < 2) throw ConfigError("world centerline needs >= 2 points");
    if (!(halfwidth > 0.0)) throw ConfigError("world halfwidth must be > 0");
    if (replan_period < 1) throw ConfigError("replan_period must be >= 1");
    if (!(max_distance > 0.0)) throw ConfigError("max_distance must be > 0");
}

Policy scripted_policy(double accel, double curvature, int n_samples) {
    return [=](const SimObservation& obs) {
        std::vector<PlanSample> out;
        ActionSequence actions;
        actions.steps.assign(64, {static_cast<float>(accel),
                                  static_cast<float>(curvature)});
        PlanSample sample{actions_to_trajectory(actions,
                                                static_cast<float>(obs.speed)),
                          actions};
        for (int i = 0; i < n_samples; ++i) out.push_back(sample);
        return out;
    };
}

SimResult simulate_closed_loop(const ClosedLoopWorld& world, const Policy& policy) {
    world.validate();

    // Start on the centerline, heading along the first segment.
    const double hx = world.centerline[1][0] - world.centerline[0][0];
    const double hy = world.centerline[1][1] - world.centerline[0][1];
    const double heading = std::atan2(hy, hx);

    double x = world.centerline[0][0];
    double y = world.centerline[0][1];
    double yaw = heading;
    double v = world.initial_speed;
    double odometer = 0.0;

    // Seed the pose history with a straight back-extrapolation.
    std::deque<SimStep> history;
    for (int i = 15; i >= 0; --i) {
        SimStep s;
        s.x = x - std::cos(heading) * v * kDt * i;
        s.y = y - std::sin(heading) * v * kDt * i;
        s.yaw = heading;
        s.v = v;
        history.push_back(s);
    }

    SimResult result;
    std::vector<PlanSample> plan;
    std::size_t selected = 0;
    std::int64_t plan_offset = 0;

    auto build_observation = [&](std::int64_t step) {
        SimObservation obs;
        obs.world_pose = {static_cast<float>(x), static_cast<float>(y),
                          static_cast<float>(yaw)};
        obs.speed = v;
        obs.step = step;
        const double c = std::cos(yaw), s = std::sin(yaw);
        for (int i = 0; i < 16; ++i) {
            const SimStep& w = history[history.size() - 16 + i];
            const double dx = w.x - x, dy = w.y - y;
            obs.history.poses[i] = {static_cast<float>(c * dx + s * dy),
                                    static_cast<float>(-s * dx + c * dy),
                                    static_cast<float>(w.yaw - yaw)};
        }
        // The current pose maps exactly to the origin.
        obs.history.poses[15] = {0.0f, 0.0f, 0.0f};
        return obs;
    };

    auto select_sample = [&](const std::vector<PlanSample>& samples) -> std::size_t {
        if (samples.empty()) throw InternalError("policy returned no samples");
        if (world.selector == PlanSelector::Lane0 || samples.size() == 1) return 0;
        const double c = std::cos(yaw), s = std::sin(yaw);
        std::size_t best = 0;
        double best_lat = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const Pose& end = samples[i].trajectory.poses.back();
            const double wx = x + c * end.x - s * end.y;
            const double wy = y + s * end.x + c * end.y;
            const double lat = lateral_offset(world.centerline, wx, wy);
            if (lat < best_lat) {
                best_lat = lat;
                best = i;
            }
        }
        return best;
    };

    for (std::int64_t step = 1; step <= world.max_steps; ++step) {
        if ((step - 1) % world.replan_period == 0) {
            const SimObservation obs = build_observation(step);
            plan = policy(obs);
            selected = select_sample(plan);
            plan_offset = 0;
        }
        const auto& steps = plan[selected].actions.steps;
        const ActionStep act =
            steps[std::min<std::int64_t>(plan_offset,
                                         static_cast<std::int64_t>(steps.size()) - 1)];
        plan_offset += 1;

        const double od_before = odometer;
        const double nx = x + v * std::cos(yaw) * kDt;
        const double ny = y + v * std::sin(yaw) * kDt;
        const double nyaw = yaw + act.curvature * v * kDt;
        const double nv = std::max(0.0, v + act.accel * kDt);
        odometer += v * kDt;
        x = nx;
        y = ny;
        yaw = nyaw;
        v = nv;

        SimStep snap{x, y, yaw, v, odometer};
        history.push_back(snap);
        if (history.size() > 64) history.pop_front();
        result.trace.push_back(snap);

        // Failure checks in fixed precedence order.
        const double t = static_cast<double>(step) * kDt;
        FailureKind kind = FailureKind::None;
        for (const Obstacle& ob : world.obstacles) {
            const double ox = ob.x + ob.vx * t;
            const double oy = ob.y + ob.vy * t;
            const double d = std::sqrt((x - ox) * (x - ox) + (y - oy) * (y - oy));
            if (d <= kEgoRadius + ob.radius) {
                kind = FailureKind::Collision;
                break;
            }
        }
        if (kind == FailureKind::None) {
            const double lat = lateral_offset(world.centerline, x, y);
            if (lat > world.halfwidth) {
                kind = FailureKind::OffDrivable;
            } else if (lat > kLateralDeviationLimit) {
                kind = FailureKind::LateralDeviation;
            }
        }
        if (kind != FailureKind::None) {
            result.failure = {kind, od_before, step};
            result.dtf = od_before;
            return result;
        }
        if (odometer >= world.max_distance) {
            result.failure = {FailureKind::None, world.max_distance, step};
            result.dtf = world.max_distance;
            return result;
        }
    }
    log_warn("closed-loop simulation hit the step cap before max_distance");
    result.failure = {FailureKind::None, odometer, world.max_steps};
    result.dtf = odometer;
    return result;
}

OpenLoopOutcome eval_open_loop(std::span<const OpenLoopCase> cases,
                               const SampleGenerator& generator, int k) {
    if (k < 1) throw ConfigError("open-loop evaluation needs k >= 1");
    OpenLoopOutcome outcome;
    double sum = 0.0;
    for (const OpenLoopCase& c : cases) {
        try {
            const std::vector<Trajectory> samples = generator(c, k);
            const double ade = min_ade(samples, c.gt_future);
            outcome.per_case.emplace_back(c.id, ade);
            sum += ade;
        } catch (const Error& e) {
            log_warn("open-loop case '" + c.id + "' skipped: " + e.what());
            outcome.skipped += 1;
        }
    }
    if (!outcome.per_case.empty()) {
        outcome.mean_min_ade = sum / static_cast<double>(outcome.per_case.size());
    }
    return outcome;
}

} // namespace minivla
