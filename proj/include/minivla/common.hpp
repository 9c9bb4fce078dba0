#pragma once

#include <cstdint>
#include <cstddef>
#include <stdexcept>
#include <string>

namespace minivla {

// Error taxonomy maps onto CLI exit codes: IoError -> 1, ConfigError -> 2,
// InternalError -> 3.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct InternalError : Error {
    using Error::Error;
};

enum class LogLevel { Silent = 0, Warn = 1, Info = 2, Debug = 3 };

// Parsed once from MINIVLA_LOG (silent|warn|info|debug or 0..3). Default: warn.
LogLevel log_level();
void log_warn(const std::string& msg);
void log_info(const std::string& msg);
void log_debug(const std::string& msg);

// Deterministic, platform-independent generator (splitmix64). Used for weight
// init, stochastic sampling, and action-sequence initialization so that runs
// reproduce bit-for-bit from seeds alone.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // [0, 1) with 24 bits of mantissa.
    float next_float() {
        return static_cast<float>(next_u64() >> 40) * (1.0f / 16777216.0f);
    }

    float uniform(float lo, float hi) { return lo + (hi - lo) * next_float(); }

    // Box-Muller; consumes two draws per call.
    float normal();

private:
    std::uint64_t state_;
};

// Incremental FNV-1a over raw bytes; content fingerprints and the toy
// text-token hash both use it.
class Fnv1a {
public:
    void update(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            hash_ ^= p[i];
            hash_ *= 0x100000001b3ULL;
        }
    }
    std::uint64_t digest() const { return hash_; }

private:
    std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

std::uint64_t fnv1a(const void* data, std::size_t n);
std::uint64_t fnv1a(const std::string& s);

} // namespace minivla
