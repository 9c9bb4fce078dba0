#include "minivla/profiler.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace minivla {

namespace {

double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

} // namespace

const char* latency_component_key(LatencyComponent c) {
    switch (c) {
        case LatencyComponent::Preprocessing: return "preprocessing_ms";
        case LatencyComponent::ReasoningVision: return "reasoning_vision_ms";
        case LatencyComponent::ReasoningPrefill: return "reasoning_prefill_ms";
        case LatencyComponent::ReasoningDecode: return "reasoning_decode_ms";
        case LatencyComponent::ActionGen: return "action_gen_ms";
    }
    return "?";
}

nlohmann::json LatencyReport::to_json() const {
    nlohmann::json j;
    for (int i = 0; i < kLatencyComponents; ++i) {
        j[latency_component_key(static_cast<LatencyComponent>(i))] = component_ms[i];
    }
    j["total_ms"] = total_ms;
    j["postprocessing_ms"] = postprocessing_ms;
    j["repeats"] = repeats;
    j["action_gen_iter_ms"] = action_gen_iter_ms;
    j["alloc_count"] = alloc_count;
    j["dispatch_count"] = dispatch_count;
    j["replay_count"] = replay_count;
    j["bytes_allocated"] = bytes_allocated;
    j["kv_bytes"] = kv_bytes;
    j["cot_tokens"] = cot_tokens;
    return j;
}

LatencyReport LatencyReport::from_json(const nlohmann::json& j) {
    LatencyReport r;
    for (int i = 0; i < kLatencyComponents; ++i) {
        r.component_ms[i] =
            j.at(latency_component_key(static_cast<LatencyComponent>(i)))
                .get<double>();
    }
    r.total_ms = j.at("total_ms").get<double>();
    r.postprocessing_ms = j.at("postprocessing_ms").get<double>();
    r.repeats = j.at("repeats").get<int>();
    r.action_gen_iter_ms = j.at("action_gen_iter_ms").get<std::vector<double>>();
    r.alloc_count = j.at("alloc_count").get<std::uint64_t>();
    r.dispatch_count = j.at("dispatch_count").get<std::uint64_t>();
    r.replay_count = j.at("replay_count").get<std::uint64_t>();
    r.bytes_allocated = j.at("bytes_allocated").get<std::uint64_t>();
    r.kv_bytes = j.at("kv_bytes").get<std::int64_t>();
    r.cot_tokens = j.at("cot_tokens").get<std::int64_t>();
    return r;
}

double SectionProfiler::time_section(LatencyComponent c,
                                     const std::function<void()>& thunk) {
    const int idx = static_cast<int>(c);
    if (active_[idx]) {
        throw InternalError(std::string("nested profiler section for ") +
                            latency_component_key(c));
    }
    active_[idx] = true;
    const double t0 = now_ms();
    thunk();
    const double dur = now_ms() - t0;
    active_[idx] = false;
    report_->component_ms[idx] += dur;
    return dur;
}

double SectionProfiler::time_postprocessing(const std::function<void()>& thunk) {
    const double t0 = now_ms();
    thunk();
    const double dur = now_ms() - t0;
    report_->postprocessing_ms += dur;
    return dur;
}

double scaling_factor(std::span<const std::pair<std::int64_t, double>> sweep) {
    if (sweep.empty()) throw InternalError("scaling_factor: empty sweep");
    double baseline = -1.0;
    std::int64_t n_max = 0;
    double at_max = 0.0;
    for (const auto& [n, latency] : sweep) {
        if (n == 1) baseline = latency;
        if (n >= n_max) {
            n_max = n;
            at_max = latency;
        }
    }
    if (baseline < 0.0) throw InternalError("scaling_factor: sweep must contain N=1");
    if (baseline == 0.0) throw InternalError("scaling_factor: zero baseline");
    return at_max / baseline;
}

double tokens_per_second(std::int64_t tokens, double decode_ms) {
    if (!(decode_ms > 0.0)) throw InternalError("tokens_per_second: zero duration");
    return static_cast<double>(tokens) / (decode_ms / 1000.0);
}

double actiongen_proportion(const LatencyReport& report) {
    if (!(report.total_ms > 0.0)) {
        throw InternalError("actiongen_proportion: zero total");
    }
    return report.component(LatencyComponent::ActionGen) / report.total_ms;
}

LinearFit fit_line(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw InternalError("fit_line: need at least two matched points");
    }
    const double n = static_cast<double>(x.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        sxy += x[i] * y[i];
    }
    const double denom = n * sxx - sx * sx;
    if (denom == 0.0) throw InternalError("fit_line: degenerate x values");
    LinearFit fit;
    fit.slope = (n * sxy - sx * sy) / denom;
    fit.intercept = (sy - fit.slope * sx) / n;
    double ss_res = 0, ss_tot = 0;
    const double mean_y = sy / n;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double pred = fit.slope * x[i] + fit.intercept;
        ss_res += (y[i] - pred) * (y[i] - pred);
        ss_tot += (y[i] - mean_y) * (y[i] - mean_y);
    }
    fit.r2 = ss_tot == 0.0 ? 1.0 : 1.0 - ss_res / ss_tot;
    return fit;
}

LatencyReport average_reports(std::span<const LatencyReport> reports) {
    if (reports.empty()) throw InternalError("average_reports: empty");
    LatencyReport avg = reports.back(); // counters from the last run
    avg.component_ms.fill(0.0);
    avg.total_ms = 0.0;
    avg.postprocessing_ms = 0.0;
    std::size_t iter_len = 0;
    for (const auto& r : reports) iter_len = std::max(iter_len, r.action_gen_iter_ms.size());
    avg.action_gen_iter_ms.assign(iter_len, 0.0);
    for (const auto& r : reports) {
        for (int i = 0; i < kLatencyComponents; ++i) {
            avg.component_ms[i] += r.component_ms[i];
        }
        avg.total_ms += r.total_ms;
        avg.postprocessing_ms += r.postprocessing_ms;
        for (std::size_t i = 0; i < r.action_gen_iter_ms.size(); ++i) {
            avg.action_gen_iter_ms[i] += r.action_gen_iter_ms[i];
        }
    }
    const double n = static_cast<double>(reports.size());
    for (int i = 0; i < kLatencyComponents; ++i) avg.component_ms[i] /= n;
    avg.total_ms /= n;
    avg.postprocessing_ms /= n;
    for (auto& v : avg.action_gen_iter_ms) v /= n;
    avg.repeats = static_cast<int>(reports.size());
    return avg;
}

ScalingReport build_scaling_report(
    std::span<const std::pair<std::int64_t, LatencyReport>> sweep) {
    ScalingReport out;
    for (const auto& [n, rep] : sweep) out.ns.push_back(n);

    auto add_series = [&](const std::string& key, auto getter) {
        std::vector<double>& series = out.latencies_ms[key];
        std::vector<std::pair<std::int64_t, double>> pairs;
        for (const auto& [n, rep] : sweep) {
            series.push_back(getter(rep));
            pairs.emplace_back(n, getter(rep));
        }
        const double factor = scaling_factor(pairs);
        out.factors[key] = factor;
        out.classifications[key] =
            factor <= 1.2 ? "constant" : (factor >= 2.0 ? "scaling" : "mixed");
    };
    for (int i = 0; i < kLatencyComponents; ++i) {
        const auto c = static_cast<LatencyComponent>(i);
        add_series(latency_component_key(c),
                   [c](const LatencyReport& r) { return r.component(c); });
    }
    add_series("total_ms", [](const LatencyReport& r) { return r.total_ms; });
    return out;
}

nlohmann::json ScalingReport::to_json() const {
    nlohmann::json j;
    j["ns"] = ns;
    j["latencies_ms"] = latencies_ms;
    j["factors"] = factors;
    j["classifications"] = classifications;
    return j;
}

} // namespace minivla
