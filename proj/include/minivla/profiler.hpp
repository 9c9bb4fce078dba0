#pragma once

#include "minivla/common.hpp"
#include "minivla/substrate.hpp"

#include "json.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace minivla {

// The five reported components. Postprocessing is measured but kept in a
// debug field, not reported alongside these.
enum class LatencyComponent {
    Preprocessing = 0,
    ReasoningVision = 1,
    ReasoningPrefill = 2,
    ReasoningDecode = 3,
    ActionGen = 4,
};
inline constexpr int kLatencyComponents = 5;

const char* latency_component_key(LatencyComponent c); // e.g. "reasoning_vision_ms"

struct LatencyReport {
    std::array<double, kLatencyComponents> component_ms{};
    double total_ms = 0.0;
    double postprocessing_ms = 0.0; // debug field
    int repeats = 1;
    std::vector<double> action_gen_iter_ms; // one entry per diffusion iteration
    std::uint64_t alloc_count = 0;
    std::uint64_t dispatch_count = 0;
    std::uint64_t replay_count = 0;
    std::uint64_t bytes_allocated = 0;
    std::int64_t kv_bytes = 0;
    std::int64_t cot_tokens = 0;

    double component(LatencyComponent c) const {
        return component_ms[static_cast<int>(c)];
    }

    nlohmann::json to_json() const;
    static LatencyReport from_json(const nlohmann::json& j);
};

// Accumulates section durations into a report. Sections of the same component
// sum; they must not nest.
class SectionProfiler {
public:
    explicit SectionProfiler(LatencyReport& report) : report_(&report) {}

    double time_section(LatencyComponent c, const std::function<void()>& thunk);
    double time_postprocessing(const std::function<void()>& thunk);

private:
    LatencyReport* report_;
    std::array<bool, kLatencyComponents> active_{};
};

// latency(N_max) / latency(N=1); the sweep must contain N=1 with a nonzero
// latency.
double scaling_factor(std::span<const std::pair<std::int64_t, double>> sweep);

double tokens_per_second(std::int64_t tokens, double decode_ms);

double actiongen_proportion(const LatencyReport& report);

struct LinearFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r2 = 0.0;
};
LinearFit fit_line(std::span<const double> x, std::span<const double> y);

// Elementwise mean across repeats; counters and token counts are taken from
// the last run (they are seed-deterministic).
LatencyReport average_reports(std::span<const LatencyReport> reports);

struct ScalingReport {
    std::vector<std::int64_t> ns;
    std::map<std::string, std::vector<double>> latencies_ms; // per component + total
    std::map<std::string, double> factors;
    std::map<std::string, std::string> classifications; // constant | scaling | mixed

    nlohmann::json to_json() const;
};

ScalingReport build_scaling_report(
    std::span<const std::pair<std::int64_t, LatencyReport>> sweep);

} // namespace minivla
