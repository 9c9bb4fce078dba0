#include "minivla/scenario.hpp"

#include <cmath>
#include <fstream>

namespace minivla {

namespace {

using nlohmann::json;

void flatten_numbers(const json& node, std::vector<float>& out) {
    if (node.is_array()) {
        for (const auto& child : node) flatten_numbers(child, out);
    } else if (node.is_number()) {
        out.push_back(node.get<float>());
    } else {
        throw IoError("frame data must contain numbers only");
    }
}

std::vector<float> read_raw_f32(const std::filesystem::path& path,
                                std::size_t expected) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open raw frame file: " + path.string());
    std::vector<float> data(expected);
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(expected * sizeof(float)));
    if (static_cast<std::size_t>(in.gcount()) != expected * sizeof(float)) {
        throw IoError("raw frame file shorter than the declared shape: " +
                      path.string());
    }
    return data;
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    if (j.contains(key)) return j.at(key).get<T>();
    return fallback;
}

Pose pose_from_json(const json& j) {
    if (!j.is_array() || j.size() != 3) throw IoError("pose must be [x, y, yaw]");
    return {j[0].get<float>(), j[1].get<float>(), j[2].get<float>()};
}

} // namespace

json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open file: " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IoError("invalid JSON in " + path.string() + ": " + e.what());
    }
    return j;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write file: " + path.string());
    out << text;
}

Frames synthetic_frames(std::int64_t height, std::int64_t width,
                        const std::string& pattern) {
    Frames frames;
    frames.height = height;
    frames.width = width;
    frames.data.resize(frames.pixel_count());
    if (pattern != "gradient") {
        throw IoError("unknown synthetic frame pattern: " + pattern);
    }
    std::size_t i = 0;
    for (std::int64_t cam = 0; cam < frames.cams; ++cam) {
        for (std::int64_t step = 0; step < frames.steps; ++step) {
            for (std::int64_t y = 0; y < height; ++y) {
                for (std::int64_t x = 0; x < width; ++x) {
                    const float base =
                        std::sin(0.11f * static_cast<float>(x + 3 * y) +
                                 0.7f * static_cast<float>(cam)) *
                        0.5f;
                    const float drift = 0.01f * static_cast<float>(step);
                    frames.data[i++] = base + drift;
                    frames.data[i++] = base * 0.5f - drift;
                    frames.data[i++] =
                        0.25f * std::cos(0.07f * static_cast<float>(x - y));
                }
            }
        }
    }
    return frames;
}

Scenario scenario_from_json(const json& j, const std::filesystem::path& base_dir) {
    Scenario sc;
    if (!j.contains("frames")) throw IoError("scenario is missing 'frames'");
    const json& fr = j.at("frames");
    const auto shape = fr.at("shape").get<std::vector<std::int64_t>>();
    if (shape.size() != 5 || shape[0] != 4 || shape[1] != 4 || shape[4] != 3) {
        throw IoError("frame shape must be [4, 4, H, W, 3]");
    }
    sc.frames.cams = shape[0];
    sc.frames.steps = shape[1];
    sc.frames.height = shape[2];
    sc.frames.width = shape[3];
    const auto expected = static_cast<std::size_t>(sc.frames.pixel_count());

    if (fr.contains("data")) {
        flatten_numbers(fr.at("data"), sc.frames.data);
        if (sc.frames.data.size() != expected) {
            throw IoError("frame data does not match the declared shape");
        }
    } else if (fr.contains("path")) {
        const std::filesystem::path raw =
            base_dir / fr.at("path").get<std::string>();
        sc.frames.data = read_raw_f32(raw, expected);
    } else if (fr.contains("synthetic")) {
        sc.frames = synthetic_frames(shape[2], shape[3],
                                     fr.at("synthetic").get<std::string>());
    } else {
        throw IoError("frames need one of: data, path, synthetic");
    }

    const json& poses = j.at("past_poses");
    if (!poses.is_array() || poses.size() != 16) {
        throw IoError("past_poses must hold exactly 16 poses");
    }
    for (std::size_t i = 0; i < 16; ++i) {
        sc.past_poses.poses[i] = pose_from_json(poses[i]);
    }

    if (j.contains("gt_future")) {
        const json& gt = j.at("gt_future");
        if (!gt.is_array() || gt.size() != 64) {
            throw IoError("gt_future must hold exactly 64 poses");
        }
        Trajectory t;
        for (const auto& p : gt) t.poses.push_back(pose_from_json(p));
        sc.gt_future = std::move(t);
    }

    if (j.contains("prompts")) {
        sc.system_prompt = get_or<std::string>(j.at("prompts"), "system", "");
        sc.user_prompt = get_or<std::string>(j.at("prompts"), "user", "");
    }
    return sc;
}

Scenario load_scenario(const std::filesystem::path& path) {
    return scenario_from_json(read_json_file(path), path.parent_path());
}

ClosedLoopWorld load_world(const std::filesystem::path& path) {
    const json j = read_json_file(path);
    ClosedLoopWorld world;
    for (const auto& pt : j.at("centerline")) {
        if (!pt.is_array() || pt.size() != 2) {
            throw IoError("centerline points must be [x, y]");
        }
        world.centerline.push_back({pt[0].get<double>(), pt[1].get<double>()});
    }
    world.halfwidth = j.at("halfwidth").get<double>();
    if (j.contains("obstacles")) {
        for (const auto& ob : j.at("obstacles")) {
            if (!ob.is_array() || (ob.size() != 3 && ob.size() != 5)) {
                throw IoError("obstacles must be [x, y, r] or [x, y, r, vx, vy]");
            }
            Obstacle o;
            o.x = ob[0].get<double>();
            o.y = ob[1].get<double>();
            o.radius = ob[2].get<double>();
            if (ob.size() == 5) {
                o.vx = ob[3].get<double>();
                o.vy = ob[4].get<double>();
            }
            world.obstacles.push_back(o);
        }
    }
    world.max_distance = j.at("max_distance").get<double>();
    world.replan_period = get_or<std::int64_t>(j, "replan_period", 5);
    world.initial_speed = get_or<double>(j, "initial_speed", 5.0);
    world.max_steps = get_or<std::int64_t>(j, "max_steps", 5000);
    if (j.contains("selector")) {
        const auto sel = j.at("selector").get<std::string>();
        if (sel == "lane0") {
            world.selector = PlanSelector::Lane0;
        } else if (sel == "min_lateral") {
            world.selector = PlanSelector::MinLateral;
        } else {
            throw IoError("unknown selector: " + sel);
        }
    }
    world.validate();
    return world;
}

RunConfig run_config_from_json(const json& j) {
    RunConfig cfg;
    if (j.contains("model")) {
        const json& m = j.at("model");
        ModelConfig& mc = cfg.model;
        mc.vision_blocks = get_or<std::int64_t>(m, "vision_blocks", mc.vision_blocks);
        mc.decoder_blocks = get_or<std::int64_t>(m, "decoder_blocks", mc.decoder_blocks);
        mc.hidden_dim = get_or<std::int64_t>(m, "hidden_dim", mc.hidden_dim);
        mc.action_hidden_dim =
            get_or<std::int64_t>(m, "action_hidden_dim", mc.action_hidden_dim);
        mc.kv_dim = get_or<std::int64_t>(m, "kv_dim", mc.kv_dim);
        mc.heads = get_or<std::int64_t>(m, "heads", mc.heads);
        mc.vocab_size = get_or<std::int64_t>(m, "vocab_size", mc.vocab_size);
        mc.patch_size = get_or<std::int64_t>(m, "patch_size", mc.patch_size);
        mc.action_steps = get_or<std::int64_t>(m, "action_steps", mc.action_steps);
        mc.diffusion_iters =
            get_or<std::int64_t>(m, "diffusion_iters", mc.diffusion_iters);
        mc.update_scale = get_or<float>(m, "update_scale", mc.update_scale);
        mc.max_new_tokens =
            get_or<std::int64_t>(m, "max_new_tokens", mc.max_new_tokens);
        mc.weight_seed = get_or<std::uint64_t>(m, "weight_seed", mc.weight_seed);
    }
    if (j.contains("topology")) {
        const auto t = j.at("topology").get<std::string>();
        if (t == "multi") {
            cfg.topology = Topology::Multi;
        } else if (t == "single") {
            cfg.topology = Topology::Single;
        } else {
            throw ConfigError("unknown topology: " + t);
        }
    }
    if (j.contains("kv_strategy")) {
        const auto s = j.at("kv_strategy").get<std::string>();
        if (s == "dynamic") {
            cfg.kv_strategy = KvStrategy::Dynamic;
        } else if (s == "static") {
            cfg.kv_strategy = KvStrategy::Static;
        } else {
            throw ConfigError("unknown kv_strategy: " + s);
        }
    }
    if (j.contains("executor")) {
        const auto e = j.at("executor").get<std::string>();
        if (e == "eager") {
            cfg.executor = ExecMode::Eager;
        } else if (e == "graph") {
            cfg.executor = ExecMode::Graph;
        } else {
            throw ConfigError("unknown executor: " + e);
        }
    }
    cfg.num_trajectories =
        get_or<std::int64_t>(j, "num_trajectories", cfg.num_trajectories);
    cfg.sampler_seed = get_or<std::uint64_t>(j, "sampler_seed", cfg.sampler_seed);
    cfg.action_init_seed =
        get_or<std::uint64_t>(j, "action_init_seed", cfg.action_init_seed);
    cfg.action_seed_stride =
        get_or<std::uint64_t>(j, "action_seed_stride", cfg.action_seed_stride);
    if (j.contains("sampler_mode")) {
        const auto m = j.at("sampler_mode").get<std::string>();
        if (m == "greedy") {
            cfg.sampler_mode = SampleMode::Greedy;
        } else if (m == "stochastic") {
            cfg.sampler_mode = SampleMode::Stochastic;
        } else {
            throw ConfigError("unknown sampler_mode: " + m);
        }
    }
    cfg.forced_cot_tokens =
        get_or<std::int64_t>(j, "forced_cot_tokens", cfg.forced_cot_tokens);
    cfg.repeats = get_or<int>(j, "repeats", cfg.repeats);
    cfg.parallel_kernels = get_or<bool>(j, "parallel_kernels", cfg.parallel_kernels);
    cfg.dispatch_delay_ns =
        get_or<std::uint64_t>(j, "dispatch_delay_ns", cfg.dispatch_delay_ns);
    if (j.contains("policy")) {
        const auto p = j.at("policy").get<std::string>();
        if (p == "engine") {
            cfg.policy = PolicyKind::Engine;
        } else if (p == "scripted_straight") {
            cfg.policy = PolicyKind::ScriptedStraight;
        } else if (p == "scripted_arc") {
            cfg.policy = PolicyKind::ScriptedArc;
        } else {
            throw ConfigError("unknown policy: " + p);
        }
    }
    cfg.scripted_curvature =
        get_or<double>(j, "scripted_curvature", cfg.scripted_curvature);
    if (j.contains("selector")) {
        const auto sel = j.at("selector").get<std::string>();
        if (sel == "lane0") {
            cfg.selector = PlanSelector::Lane0;
        } else if (sel == "min_lateral") {
            cfg.selector = PlanSelector::MinLateral;
        } else {
            throw ConfigError("unknown selector: " + sel);
        }
    }
    cfg.default_system_prompt =
        get_or<std::string>(j, "system_prompt", cfg.default_system_prompt);
    cfg.default_user_prompt =
        get_or<std::string>(j, "user_prompt", cfg.default_user_prompt);
    cfg.model.validate();
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    if (path.empty()) return RunConfig{};
    return run_config_from_json(read_json_file(path));
}

InferenceRequest request_from_scenario(const Scenario& scenario, const RunConfig& cfg) {
    InferenceRequest req;
    req.frames = scenario.frames;
    req.system_prompt = scenario.system_prompt.empty() ? cfg.default_system_prompt
                                                       : scenario.system_prompt;
    req.user_prompt =
        scenario.user_prompt.empty() ? cfg.default_user_prompt : scenario.user_prompt;
    req.pose_history = scenario.past_poses;
    req.num_trajectories = cfg.num_trajectories;
    req.topology = cfg.topology;
    req.kv_strategy = cfg.kv_strategy;
    req.executor = cfg.executor;
    req.sampler_seed = cfg.sampler_seed;
    req.action_init_seed = cfg.action_init_seed;
    req.action_seed_stride = cfg.action_seed_stride;
    req.sampler_mode = cfg.sampler_mode;
    req.forced_cot_tokens = cfg.forced_cot_tokens;
    return req;
}

json trajectory_to_json(const Trajectory& t) {
    json arr = json::array();
    for (const Pose& p : t.poses) {
        arr.push_back({p.x, p.y, p.yaw});
    }
    return arr;
}

Trajectory trajectory_from_json(const json& j) {
    Trajectory t;
    for (const auto& p : j) t.poses.push_back(pose_from_json(p));
    return t;
}

json result_to_json(const InferenceResult& result) {
    json j;
    j["reasonings"] = result.reasonings;
    json trajs = json::array();
    for (const Trajectory& t : result.trajectories) trajs.push_back(trajectory_to_json(t));
    j["trajectories"] = std::move(trajs);
    json actions = json::array();
    for (const ActionSequence& a : result.actions) {
        json lane = json::array();
        for (const ActionStep& s : a.steps) lane.push_back({s.accel, s.curvature});
        actions.push_back(std::move(lane));
    }
    j["actions"] = std::move(actions);

    const LatencyReport& rep = result.latency;
    json latency;
    for (int i = 0; i < kLatencyComponents; ++i) {
        latency[latency_component_key(static_cast<LatencyComponent>(i))] =
            rep.component_ms[i];
    }
    latency["total_ms"] = rep.total_ms;
    latency["postprocessing_ms"] = rep.postprocessing_ms;
    latency["action_gen_iter_ms"] = rep.action_gen_iter_ms;
    latency["repeats"] = rep.repeats;
    j["latency"] = std::move(latency);

    j["counters"] = {{"alloc_count", rep.alloc_count},
                     {"dispatch_count", rep.dispatch_count},
                     {"replay_count", rep.replay_count},
                     {"kv_bytes", rep.kv_bytes},
                     {"cot_tokens", rep.cot_tokens}};
    return j;
}

} // namespace minivla
