#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace minivla {

struct CliOptions {
    std::filesystem::path config_path;
    std::filesystem::path scenario_path; // scenario / dataset dir / world file
    std::filesystem::path out_path;
    std::optional<std::int64_t> num_traj;
    std::optional<std::string> topology; // multi | single | both (profile only)
    std::optional<std::string> kv;
    std::optional<std::string> executor;
    std::optional<std::uint64_t> seed;
    std::optional<int> repeats;
    std::vector<std::int64_t> sweep;
    bool parallel = false;
    std::string eval_mode; // open | closed
};

int cmd_generate(const CliOptions& opts);
int cmd_profile(const CliOptions& opts);
int cmd_compare_actiongen(const CliOptions& opts);
int cmd_eval(const CliOptions& opts);

// Parses argv and dispatches; maps errors onto exit codes
// (1 I/O, 2 configuration, 3 internal invariant).
int run_cli(int argc, const char* const* argv);

} // namespace minivla
