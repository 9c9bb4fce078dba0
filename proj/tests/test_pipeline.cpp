#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "minivla/eval.hpp"
#include "minivla/pipeline.hpp"
#include "minivla/scenario.hpp"

#include <cmath>
#include <cstring>
#include <numbers>

using namespace minivla;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.vision_blocks = 1;
    cfg.decoder_blocks = 2;
    cfg.hidden_dim = 16;
    cfg.action_hidden_dim = 8;
    cfg.kv_dim = 8;
    cfg.heads = 2;
    cfg.vocab_size = 128;
    cfg.max_new_tokens = 8;
    cfg.weight_seed = 2024;
    return cfg;
}

PoseHistory straight_history(float speed) {
    PoseHistory h;
    for (int j = 0; j < 16; ++j) {
        h.poses[j] = {-(15.0f - j) * speed * 0.1f, 0.0f, 0.0f};
    }
    return h;
}

InferenceRequest tiny_request(std::int64_t n = 1) {
    InferenceRequest req;
    req.frames = synthetic_frames(14, 14);
    req.system_prompt = "drive safely";
    req.user_prompt = "plan ahead";
    req.pose_history = straight_history(5.0f);
    req.num_trajectories = n;
    return req;
}

bool same_trajectories(const std::vector<Trajectory>& a,
                       const std::vector<Trajectory>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].poses.size() != b[i].poses.size()) return false;
        if (std::memcmp(a[i].poses.data(), b[i].poses.data(),
                        a[i].poses.size() * sizeof(Pose)) != 0) {
            return false;
        }
    }
    return true;
}

// Reference integrator: the same unicycle model at 1000x finer steps.
Trajectory fine_step_trajectory(const ActionSequence& actions, double v0) {
    const double dt = 0.1;
    const int sub = 1000;
    double x = 0, y = 0, yaw = 0, v = v0;
    Trajectory out;
    for (const ActionStep& s : actions.steps) {
        for (int k = 0; k < sub; ++k) {
            const double h = dt / sub;
            const double nx = x + v * std::cos(yaw) * h;
            const double ny = y + v * std::sin(yaw) * h;
            const double nyaw = yaw + s.curvature * v * h;
            const double nv = v + s.accel * h;
            x = nx;
            y = ny;
            yaw = nyaw;
            v = nv;
        }
        out.poses.push_back({static_cast<float>(x), static_cast<float>(y),
                             static_cast<float>(yaw)});
    }
    return out;
}

ActionSequence constant_actions(float accel, float curvature) {
    ActionSequence a;
    a.steps.assign(64, {accel, curvature});
    return a;
}

} // namespace

TEST_CASE("text tokenizer") {
    Tokenizer tok(512);
    CHECK(tok.tokenize_text("").ids.empty());
    const auto a = tok.tokenize_text("slow down for the crossing");
    const auto b = tok.tokenize_text("slow down for the crossing");
    CHECK(a.ids == b.ids);
    CHECK(a.kinds.size() == a.ids.size());
    // Round trip over a whitespace-normalized corpus line.
    const std::string line = "the vehicle ahead brakes and we slow down";
    const auto seq = tok.tokenize_text(line);
    CHECK(tok.detokenize(seq.ids) == line);
}

TEST_CASE("trajectory tokenizer") {
    Tokenizer tok(512);

    SUBCASE("origin history lands in the center bins") {
        PoseHistory h{}; // all zeros
        const auto seq = tok.tokenize_trajectory(h);
        REQUIRE(seq.ids.size() == 48);
        for (std::size_t i = 0; i < 48; ++i) {
            const auto comp = static_cast<std::int64_t>(i % 3);
            CHECK(seq.ids[i] == tok.trajectory_token(comp, 16));
            CHECK(seq.kinds[i] == TokenKind::Trajectory);
        }
    }

    SUBCASE("range edges map to the edge bins") {
        CHECK(Tokenizer::quantize(-50.0f, -50.0f, 50.0f) == 0);
        CHECK(Tokenizer::quantize(50.0f, -50.0f, 50.0f) == 31);
        CHECK(Tokenizer::quantize(-51.0f, -50.0f, 50.0f) == 0);  // clamped
        CHECK(Tokenizer::quantize(120.0f, -50.0f, 50.0f) == 31); // clamped
    }

    SUBCASE("quantize-dequantize error stays within half a bin width") {
        const float lo = -50.0f, hi = 50.0f;
        const float width = (hi - lo) / 32.0f;
        for (int i = 0; i <= 2000; ++i) {
            const float v = lo + (hi - lo) * static_cast<float>(i) / 2000.0f;
            const auto bin = Tokenizer::quantize(v, lo, hi);
            const float back = Tokenizer::dequantize(bin, lo, hi);
            CHECK(std::fabs(back - v) <= width * 0.5f + 1e-4f);
        }
        // Yaw range too.
        const float ylo = -std::numbers::pi_v<float>, yhi = std::numbers::pi_v<float>;
        const float ywidth = (yhi - ylo) / 32.0f;
        for (int i = 0; i <= 500; ++i) {
            const float v = ylo + (yhi - ylo) * static_cast<float>(i) / 500.0f;
            const float back =
                Tokenizer::dequantize(Tokenizer::quantize(v, ylo, yhi), ylo, yhi);
            CHECK(std::fabs(back - v) <= ywidth * 0.5f + 1e-4f);
        }
    }
}

TEST_CASE("unicycle integration") {
    SUBCASE("zero actions, unit speed: straight line at 0.1 m per step") {
        const Trajectory t = actions_to_trajectory(constant_actions(0, 0), 1.0f);
        REQUIRE(t.poses.size() == 64);
        for (int i = 0; i < 64; ++i) {
            CHECK(t.poses[i].x == doctest::Approx(0.1 * (i + 1)).epsilon(1e-6));
            CHECK(t.poses[i].y == 0.0f);
            CHECK(t.poses[i].yaw == 0.0f);
        }
    }

    SUBCASE("constant curvature: circle of radius 10 within the Euler bound") {
        const ActionSequence a = constant_actions(0.0f, 0.1f);
        const Trajectory coarse = actions_to_trajectory(a, 1.0f);
        const Trajectory fine = fine_step_trajectory(a, 1.0);
        // The reference integrator stays on the analytic circle (center
        // (0, 10), radius 10) to well under a millimeter.
        for (const Pose& p : fine.poses) {
            const double r = std::sqrt(p.x * p.x + (p.y - 10.0) * (p.y - 10.0));
            CHECK(std::fabs(r - 10.0) < 1e-3);
        }
        // Explicit Euler at dt=0.1 drifts by at most ~5e-4 per step here;
        // 0.05 m bounds the accumulated error across the 6.4 s horizon.
        for (std::size_t i = 0; i < 64; ++i) {
            const double dx = coarse.poses[i].x - fine.poses[i].x;
            const double dy = coarse.poses[i].y - fine.poses[i].y;
            CHECK(std::sqrt(dx * dx + dy * dy) < 0.05);
        }
    }

    SUBCASE("constant acceleration from rest: discrete velocity sum") {
        const Trajectory t = actions_to_trajectory(constant_actions(1.0f, 0.0f), 0.0f);
        CHECK(t.poses[0].x == doctest::Approx(0.0));
        CHECK(t.poses[2].x == doctest::Approx(0.03).epsilon(1e-6)); // (0+0.1+0.2)*0.1
    }

    SUBCASE("NaN actions are rejected") {
        ActionSequence bad = constant_actions(0, 0);
        bad.steps[3].accel = std::nanf("");
        CHECK_THROWS_AS(actions_to_trajectory(bad, 1.0f), InternalError);
    }
}

TEST_CASE("initial speed comes from the last two history poses") {
    CHECK(initial_speed_from_history(straight_history(3.0f)) ==
          doctest::Approx(3.0).epsilon(1e-5));
    CHECK(initial_speed_from_history(straight_history(0.0f)) == doctest::Approx(0.0));
}

TEST_CASE("patchify shapes") {
    const Frames f = synthetic_frames(56, 56);
    CHECK(patches_per_frame(f, 14) == 16);
    const auto rows = patchify(f, 14);
    // 16 frames x 16 patches, each 14*14*3 wide.
    CHECK(rows.size() == 16u * 16u * 588u);
    Frames bad = synthetic_frames(56, 56);
    bad.width = 55;
    bad.data.resize(bad.pixel_count());
    CHECK_THROWS_AS(patchify(bad, 14), IoError);
}

TEST_CASE("run_reasoning topologies") {
    Engine engine(tiny_config());

    SUBCASE("single topology produces exactly one reasoning sequence") {
        InferenceRequest req = tiny_request(6);
        req.topology = Topology::Single;
        const ReasoningOutput out = engine.run_reasoning(req);
        CHECK(out.cot_tokens.size() == 1);
        CHECK(out.kv.layout().batch == 1);
        CHECK(out.kv.sealed());
        CHECK(out.kv.reasoning_len() == out.prompt_tokens + out.token_count);
    }

    SUBCASE("multi topology with greedy sampling: identical sequences per lane") {
        InferenceRequest req = tiny_request(3);
        req.topology = Topology::Multi;
        req.sampler_mode = SampleMode::Greedy;
        const ReasoningOutput out = engine.run_reasoning(req);
        REQUIRE(out.cot_tokens.size() == 3);
        CHECK(out.cot_tokens[0] == out.cot_tokens[1]);
        CHECK(out.cot_tokens[0] == out.cot_tokens[2]);
    }

    SUBCASE("stochastic lanes reproduce from their seed streams") {
        InferenceRequest req = tiny_request(2);
        req.topology = Topology::Multi;
        req.sampler_seed = 900;
        const ReasoningOutput two = engine.run_reasoning(req);
        // Lane 1's stream is sampler_seed + 1; a one-lane run seeded there
        // reproduces it exactly.
        InferenceRequest solo = tiny_request(1);
        solo.topology = Topology::Multi;
        solo.sampler_seed = 901;
        const ReasoningOutput one = engine.run_reasoning(solo);
        CHECK(one.cot_tokens[0] == two.cot_tokens[1]);
    }
}

TEST_CASE("run_action_generation seeding") {
    Engine engine(tiny_config());
    InferenceRequest req = tiny_request(2);
    req.topology = Topology::Single;
    req.kv_strategy = KvStrategy::Static;

    SUBCASE("zero stride gives identical lanes") {
        req.action_seed_stride = 0;
        ReasoningOutput reasoning = engine.run_reasoning(req);
        const auto actions = engine.run_action_generation(reasoning, req);
        REQUIRE(actions.size() == 2);
        CHECK(std::memcmp(actions[0].steps.data(), actions[1].steps.data(),
                          64 * sizeof(ActionStep)) == 0);
    }

    SUBCASE("distinct per-lane seeds give distinct sequences") {
        req.action_seed_stride = 1;
        ReasoningOutput reasoning = engine.run_reasoning(req);
        const auto actions = engine.run_action_generation(reasoning, req);
        float max_diff = 0.0f;
        for (int i = 0; i < 64; ++i) {
            max_diff = std::max(max_diff, std::fabs(actions[0].steps[i].accel -
                                                    actions[1].steps[i].accel));
        }
        CHECK(max_diff > 0.0f);
    }
}

TEST_CASE("infer contract") {
    Engine engine(tiny_config());

    SUBCASE("N=1: one trajectory, one reasoning, five positive components") {
        const InferenceResult res = engine.infer(tiny_request(1));
        CHECK(res.trajectories.size() == 1);
        CHECK(res.reasonings.size() == 1);
        CHECK(res.actions.size() == 1);
        for (int i = 0; i < kLatencyComponents; ++i) {
            CHECK(res.latency.component_ms[i] > 0.0);
        }
        CHECK(res.latency.total_ms > 0.0);
        CHECK(res.latency.dispatch_count > 0);
        CHECK(res.latency.kv_bytes > 0);
        CHECK(res.latency.action_gen_iter_ms.size() == 10);
    }

    SUBCASE("identical requests are deterministic") {
        const InferenceResult a = engine.infer(tiny_request(2));
        const InferenceResult b = engine.infer(tiny_request(2));
        CHECK(same_trajectories(a.trajectories, b.trajectories));
        CHECK(a.reasonings == b.reasonings);
    }

    SUBCASE("single topology at N=6: one reasoning, six trajectories") {
        InferenceRequest req = tiny_request(6);
        req.topology = Topology::Single;
        const InferenceResult res = engine.infer(req);
        CHECK(res.reasonings.size() == 1);
        CHECK(res.trajectories.size() == 6);

        // Lane fingerprints of the replicated cache agree before action
        // generation touches it.
        ReasoningOutput reasoning = engine.run_reasoning(req);
        const KvCache replicated = reasoning.kv.replicate_for_batch(6);
        const auto lane0 = replicated.lane_fingerprint(0);
        for (int l = 1; l < 6; ++l) CHECK(replicated.lane_fingerprint(l) == lane0);
    }

    SUBCASE("the five components cover at least 90% of total") {
        const InferenceResult res = engine.infer(tiny_request(2));
        double sum = 0.0;
        for (int i = 0; i < kLatencyComponents; ++i) sum += res.latency.component_ms[i];
        CHECK(sum >= 0.9 * res.latency.total_ms);
    }
}

TEST_CASE("topology equivalence at N=1") {
    Engine engine(tiny_config());
    InferenceRequest req = tiny_request(1);
    req.topology = Topology::Multi;
    const InferenceResult multi = engine.infer(req);
    req.topology = Topology::Single;
    const InferenceResult single = engine.infer(req);
    CHECK(same_trajectories(multi.trajectories, single.trajectories));
    CHECK(multi.reasonings == single.reasonings);
}

TEST_CASE("optimization transparency across kv strategies and executors") {
    Engine engine(tiny_config());
    auto run = [&](KvStrategy kv, ExecMode mode, Topology topo) {
        InferenceRequest req = tiny_request(2);
        req.topology = topo;
        req.kv_strategy = kv;
        req.executor = mode;
        return engine.infer(req).trajectories;
    };
    for (Topology topo : {Topology::Multi, Topology::Single}) {
        const auto baseline = run(KvStrategy::Dynamic, ExecMode::Eager, topo);
        CHECK(same_trajectories(baseline,
                                run(KvStrategy::Static, ExecMode::Eager, topo)));
        CHECK(same_trajectories(baseline,
                                run(KvStrategy::Static, ExecMode::Graph, topo)));
    }
}

TEST_CASE("graph executor with dynamic kv is a configuration error") {
    Engine engine(tiny_config());
    InferenceRequest req = tiny_request(1);
    req.kv_strategy = KvStrategy::Dynamic;
    req.executor = ExecMode::Graph;
    CHECK_THROWS_AS(engine.infer(req), ConfigError);
}

TEST_CASE("request validation") {
    Engine engine(tiny_config());
    SUBCASE("pose history must end at the origin") {
        InferenceRequest req = tiny_request(1);
        req.pose_history.poses[15] = {1.0f, 0.0f, 0.0f};
        CHECK_THROWS_AS(engine.infer(req), IoError);
    }
    SUBCASE("frame data must match the declared shape") {
        InferenceRequest req = tiny_request(1);
        req.frames.data.pop_back();
        CHECK_THROWS_AS(engine.infer(req), IoError);
    }
    SUBCASE("num_trajectories must be positive") {
        InferenceRequest req = tiny_request(1);
        req.num_trajectories = 0;
        CHECK_THROWS_AS(engine.infer(req), ConfigError);
    }
}

TEST_CASE("scenario frame forms: inline data and raw f32 file") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "minivla_scenario_forms";
    fs::create_directories(dir);
    const Frames ref = synthetic_frames(14, 14);

    nlohmann::json base;
    base["past_poses"] = nlohmann::json::array();
    for (int j = 0; j < 16; ++j) {
        base["past_poses"].push_back({-(15.0 - j) * 0.5, 0.0, 0.0});
    }

    SUBCASE("inline nested arrays") {
        nlohmann::json j = base;
        j["frames"]["shape"] = {4, 4, 14, 14, 3};
        // Nest one level to exercise recursive flattening.
        nlohmann::json data = nlohmann::json::array();
        const std::int64_t per_frame = 14 * 14 * 3;
        for (std::int64_t f = 0; f < 16; ++f) {
            nlohmann::json frame = nlohmann::json::array();
            for (std::int64_t i = 0; i < per_frame; ++i) {
                frame.push_back(ref.data[f * per_frame + i]);
            }
            data.push_back(std::move(frame));
        }
        j["frames"]["data"] = std::move(data);
        const fs::path path = dir / "inline.json";
        write_text_file(path, j.dump());
        const Scenario sc = load_scenario(path);
        CHECK(sc.frames.data == ref.data);
        CHECK_FALSE(sc.gt_future.has_value());
    }

    SUBCASE("raw little-endian f32 file with declared shape") {
        const fs::path raw = dir / "frames.bin";
        {
            std::ofstream out(raw, std::ios::binary);
            out.write(reinterpret_cast<const char*>(ref.data.data()),
                      static_cast<std::streamsize>(ref.data.size() * sizeof(float)));
        }
        nlohmann::json j = base;
        j["frames"]["shape"] = {4, 4, 14, 14, 3};
        j["frames"]["path"] = "frames.bin"; // relative to the scenario file
        const fs::path path = dir / "raw.json";
        write_text_file(path, j.dump());
        const Scenario sc = load_scenario(path);
        CHECK(sc.frames.data == ref.data);

        // A short file is an I/O error.
        {
            std::ofstream out(raw, std::ios::binary | std::ios::trunc);
            out.write(reinterpret_cast<const char*>(ref.data.data()), 64);
        }
        CHECK_THROWS_AS(load_scenario(path), IoError);
    }

    SUBCASE("shape mismatch in inline data is rejected") {
        nlohmann::json j = base;
        j["frames"]["shape"] = {4, 4, 14, 14, 3};
        j["frames"]["data"] = {1.0, 2.0, 3.0};
        const fs::path path = dir / "bad.json";
        write_text_file(path, j.dump());
        CHECK_THROWS_AS(load_scenario(path), IoError);
    }
}

TEST_CASE("stage errors carry a stage tag") {
    Engine engine(tiny_config());
    InferenceRequest req = tiny_request(1);
    req.frames = synthetic_frames(30, 30); // not divisible by the patch size
    CHECK_THROWS_WITH_AS(engine.infer(req), doctest::Contains("preprocessing:"),
                         IoError);
}

TEST_CASE("forced cot length pins the decode step count") {
    Engine engine(tiny_config());
    InferenceRequest req = tiny_request(1);
    req.forced_cot_tokens = 5;
    ReasoningOutput out = engine.run_reasoning(req);
    CHECK(out.token_count == 5);
    CHECK(out.kv.reasoning_len() == out.prompt_tokens + 5);
}
