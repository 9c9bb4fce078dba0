#pragma once

#include "minivla/eval.hpp"
#include "minivla/model.hpp"
#include "minivla/pipeline.hpp"

#include "json.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace minivla {

// Scenario input file. `frames` accepts three forms:
//   nested arrays:   {"shape": [4,4,H,W,3], "data": [...flat floats...]}
//   raw f32le file:  {"shape": [4,4,H,W,3], "path": "frames.bin"}
//   synthetic:       {"shape": [4,4,H,W,3], "synthetic": "gradient"}
struct Scenario {
    Frames frames;
    PoseHistory past_poses;
    std::optional<Trajectory> gt_future;
    std::string system_prompt;
    std::string user_prompt;
};

Scenario load_scenario(const std::filesystem::path& path);
Scenario scenario_from_json(const nlohmann::json& j,
                            const std::filesystem::path& base_dir);

// Deterministic procedural frames for bundled fixtures.
Frames synthetic_frames(std::int64_t height, std::int64_t width,
                        const std::string& pattern = "gradient");

ClosedLoopWorld load_world(const std::filesystem::path& path);

enum class PolicyKind { Engine, ScriptedStraight, ScriptedArc };

struct RunConfig {
    ModelConfig model;
    Topology topology = Topology::Multi;
    KvStrategy kv_strategy = KvStrategy::Dynamic;
    ExecMode executor = ExecMode::Eager;
    std::int64_t num_trajectories = 1;
    std::uint64_t sampler_seed = 1;
    std::uint64_t action_init_seed = 2;
    std::uint64_t action_seed_stride = 1;
    SampleMode sampler_mode = SampleMode::Stochastic;
    std::int64_t forced_cot_tokens = 0;
    int repeats = 10;
    bool parallel_kernels = true;
    std::uint64_t dispatch_delay_ns = 0;
    PolicyKind policy = PolicyKind::Engine;
    double scripted_curvature = 0.05; // ScriptedArc
    PlanSelector selector = PlanSelector::Lane0;
    std::string default_system_prompt =
        "You are a driving assistant that generates safe and accurate actions.";
    std::string default_user_prompt =
        "Output the chain-of-thought reasoning of the driving process, then output "
        "the future trajectory.";

    SubstrateOptions substrate_options() const {
        return {parallel_kernels, dispatch_delay_ns};
    }
};

// Defaults overlaid with the file's values (when a path is given).
RunConfig load_run_config(const std::filesystem::path& path);
RunConfig run_config_from_json(const nlohmann::json& j);

InferenceRequest request_from_scenario(const Scenario& scenario, const RunConfig& cfg);

nlohmann::json result_to_json(const InferenceResult& result);
nlohmann::json trajectory_to_json(const Trajectory& t);
Trajectory trajectory_from_json(const nlohmann::json& j);

nlohmann::json read_json_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

} // namespace minivla
