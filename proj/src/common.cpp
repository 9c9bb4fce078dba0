#include "minivla/common.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <mutex>

namespace minivla {

namespace {

LogLevel parse_log_level() {
    const char* env = std::getenv("MINIVLA_LOG");
    if (!env) return LogLevel::Warn;
    std::string v(env);
    if (v == "silent" || v == "0") return LogLevel::Silent;
    if (v == "warn" || v == "1") return LogLevel::Warn;
    if (v == "info" || v == "2") return LogLevel::Info;
    if (v == "debug" || v == "3") return LogLevel::Debug;
    return LogLevel::Warn;
}

void emit(const char* tag, const std::string& msg) {
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    std::fprintf(stderr, "[minivla:%s] %s\n", tag, msg.c_str());
}

} // namespace

LogLevel log_level() {
    static const LogLevel level = parse_log_level();
    return level;
}

void log_warn(const std::string& msg) {
    if (log_level() >= LogLevel::Warn) emit("warn", msg);
}

void log_info(const std::string& msg) {
    if (log_level() >= LogLevel::Info) emit("info", msg);
}

void log_debug(const std::string& msg) {
    if (log_level() >= LogLevel::Debug) emit("debug", msg);
}

float Rng::normal() {
    // Guard against log(0).
    float u1 = next_float();
    float u2 = next_float();
    if (u1 < 1e-12f) u1 = 1e-12f;
    const float r = std::sqrt(-2.0f * std::log(u1));
    return r * std::cos(6.28318530717958647692f * u2);
}

std::uint64_t fnv1a(const void* data, std::size_t n) {
    Fnv1a h;
    h.update(data, n);
    return h.digest();
}

std::uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

} // namespace minivla
