#include "minivla/cli.hpp"

#include "minivla/eval.hpp"
#include "minivla/pipeline.hpp"
#include "minivla/profiler.hpp"
#include "minivla/scenario.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cstring>
#include <map>
#include <sstream>
#include <thread>

namespace minivla {

namespace {

using nlohmann::json;

std::string iso_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

RunConfig resolve_config(const CliOptions& opts) {
    RunConfig cfg = load_run_config(opts.config_path);
    if (opts.num_traj) cfg.num_trajectories = *opts.num_traj;
    if (opts.topology) {
        if (*opts.topology == "multi") {
            cfg.topology = Topology::Multi;
        } else if (*opts.topology == "single") {
            cfg.topology = Topology::Single;
        } else if (*opts.topology != "both") {
            throw ConfigError("unknown topology: " + *opts.topology);
        }
    }
    if (opts.kv) {
        if (*opts.kv == "dynamic") {
            cfg.kv_strategy = KvStrategy::Dynamic;
        } else if (*opts.kv == "static") {
            cfg.kv_strategy = KvStrategy::Static;
        } else {
            throw ConfigError("unknown kv strategy: " + *opts.kv);
        }
    }
    if (opts.executor) {
        if (*opts.executor == "eager") {
            cfg.executor = ExecMode::Eager;
        } else if (*opts.executor == "graph") {
            cfg.executor = ExecMode::Graph;
        } else {
            throw ConfigError("unknown executor: " + *opts.executor);
        }
    }
    if (opts.seed) {
        cfg.sampler_seed = *opts.seed;
        cfg.action_init_seed = *opts.seed + 1;
    }
    if (opts.repeats) cfg.repeats = *opts.repeats;
    if (cfg.executor == ExecMode::Graph && cfg.kv_strategy == KvStrategy::Dynamic) {
        throw ConfigError("graph executor requires the static kv strategy; "
                          "pass --kv static or --executor eager");
    }
    return cfg;
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

struct CsvWriter {
    std::ostringstream out;

    void row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out << ',';
            out << cells[i];
        }
        out << '\n';
    }
    std::string str() const { return out.str(); }
};

InferenceRequest build_request(const Scenario& scenario, const RunConfig& cfg,
                               Topology topology, std::int64_t n) {
    InferenceRequest req = request_from_scenario(scenario, cfg);
    req.topology = topology;
    req.num_trajectories = n;
    return req;
}

bool trajectories_equal(const std::vector<Trajectory>& a,
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

std::filesystem::path sibling_path(const std::filesystem::path& base,
                                   const std::string& suffix) {
    std::filesystem::path p = base;
    p.replace_extension();
    return p.string() + suffix;
}

std::vector<std::string> report_row(const std::string& topology,
                                    const std::string& kv, const std::string& executor,
                                    std::int64_t n, const LatencyReport& rep) {
    std::vector<std::string> cells = {topology, kv, executor, std::to_string(n),
                                      std::to_string(rep.repeats)};
    for (int i = 0; i < kLatencyComponents; ++i) {
        cells.push_back(format_double(rep.component_ms[i]));
    }
    cells.push_back(format_double(rep.total_ms));
    cells.push_back(std::to_string(rep.alloc_count));
    cells.push_back(std::to_string(rep.dispatch_count));
    cells.push_back(std::to_string(rep.replay_count));
    cells.push_back(std::to_string(rep.kv_bytes));
    cells.push_back(std::to_string(rep.cot_tokens));
    return cells;
}

} // namespace

int cmd_generate(const CliOptions& opts) {
    const RunConfig cfg = resolve_config(opts);
    if (opts.scenario_path.empty()) throw ConfigError("generate needs --scenario");
    const Scenario scenario = load_scenario(opts.scenario_path);
    Engine engine(cfg.model, cfg.substrate_options());
    const InferenceRequest req = build_request(scenario, cfg, cfg.topology,
                                               cfg.num_trajectories);
    const InferenceResult result = engine.infer(req);

    json out = result_to_json(result);
    out["meta"] = {{"timestamp", iso_timestamp()},
                   {"topology", topology_name(req.topology)},
                   {"kv_strategy", kv_strategy_name(req.kv_strategy)},
                   {"executor", exec_mode_name(req.executor)}};
    const std::filesystem::path path =
        opts.out_path.empty() ? std::filesystem::path("result.json") : opts.out_path;
    write_text_file(path, out.dump(2) + "\n");
    std::printf("generate: %zu trajectories, %zu reasonings, total %.2f ms -> %s\n",
                result.trajectories.size(), result.reasonings.size(),
                result.latency.total_ms, path.string().c_str());
    return 0;
}

int cmd_profile(const CliOptions& opts) {
    const RunConfig cfg = resolve_config(opts);
    if (opts.scenario_path.empty()) throw ConfigError("profile needs --scenario");
    std::vector<std::int64_t> sweep = opts.sweep;
    if (sweep.empty()) sweep = {1, 2, 3, 4, 5, 6};
    std::sort(sweep.begin(), sweep.end());
    if (std::find(sweep.begin(), sweep.end(), 1) == sweep.end()) {
        throw ConfigError("the profile sweep must contain N=1");
    }

    std::vector<Topology> topologies;
    if (opts.topology && *opts.topology == "both") {
        topologies = {Topology::Multi, Topology::Single};
    } else {
        topologies = {cfg.topology};
    }

    const Scenario scenario = load_scenario(opts.scenario_path);
    Engine engine(cfg.model, cfg.substrate_options());
    const int repeats = std::max(1, cfg.repeats);

    CsvWriter csv;
    csv.row({"topology", "kv", "executor", "n", "repeats", "preprocessing_ms",
             "reasoning_vision_ms", "reasoning_prefill_ms", "reasoning_decode_ms",
             "action_gen_ms", "total_ms", "alloc_count", "dispatch_count",
             "replay_count", "kv_bytes", "cot_tokens"});
    CsvWriter iters;
    iters.row({"topology", "kv", "executor", "n", "iteration", "ms"});

    json scaling = json::object();
    for (Topology topo : topologies) {
        std::vector<std::pair<std::int64_t, LatencyReport>> per_n;
        for (std::int64_t n : sweep) {
            const InferenceRequest req = build_request(scenario, cfg, topo, n);
            engine.infer(req); // warm-up, unmeasured
            std::vector<LatencyReport> reps;
            for (int r = 0; r < repeats; ++r) {
                reps.push_back(engine.infer(req).latency);
            }
            const LatencyReport avg = average_reports(reps);
            per_n.emplace_back(n, avg);
            csv.row(report_row(topology_name(topo), kv_strategy_name(cfg.kv_strategy),
                               exec_mode_name(cfg.executor), n, avg));
            for (std::size_t it = 0; it < avg.action_gen_iter_ms.size(); ++it) {
                iters.row({topology_name(topo), kv_strategy_name(cfg.kv_strategy),
                           exec_mode_name(cfg.executor), std::to_string(n),
                           std::to_string(it + 1),
                           format_double(avg.action_gen_iter_ms[it])});
            }
        }
        scaling[topology_name(topo)] = build_scaling_report(per_n).to_json();
    }

    if (topologies.size() == 2) {
        const InferenceResult a =
            engine.infer(build_request(scenario, cfg, Topology::Multi, 1));
        const InferenceResult b =
            engine.infer(build_request(scenario, cfg, Topology::Single, 1));
        scaling["topology_equivalence_at_n1"] =
            trajectories_equal(a.trajectories, b.trajectories);
    }
    scaling["meta"] = {{"timestamp", iso_timestamp()}, {"repeats", repeats}};

    const std::filesystem::path path =
        opts.out_path.empty() ? std::filesystem::path("profile.csv") : opts.out_path;
    write_text_file(path, csv.str());
    write_text_file(sibling_path(path, ".scaling.json"), scaling.dump(2) + "\n");
    write_text_file(sibling_path(path, "_iters.csv"), iters.str());
    std::printf("profile: %zu rows -> %s\n", topologies.size() * sweep.size(),
                path.string().c_str());
    return 0;
}

int cmd_compare_actiongen(const CliOptions& opts) {
    RunConfig cfg = resolve_config(opts);
    if (opts.scenario_path.empty()) {
        throw ConfigError("compare-actiongen needs --scenario");
    }
    std::vector<std::int64_t> ns = opts.sweep;
    if (ns.empty()) ns = {1};
    const Scenario scenario = load_scenario(opts.scenario_path);
    Engine engine(cfg.model, cfg.substrate_options());
    const int repeats = std::max(1, cfg.repeats);

    struct Variant {
        const char* name;
        KvStrategy kv;
        ExecMode mode;
    };
    const Variant variants[] = {{"baseline", KvStrategy::Dynamic, ExecMode::Eager},
                                {"+static_kv", KvStrategy::Static, ExecMode::Eager},
                                {"+graph", KvStrategy::Static, ExecMode::Graph}};

    CsvWriter csv;
    csv.row({"variant", "n", "action_gen_ms", "alloc_count", "dispatch_count",
             "replay_count"});

    for (std::int64_t n : ns) {
        std::vector<Trajectory> reference;
        for (const Variant& variant : variants) {
            InferenceRequest req = build_request(scenario, cfg, cfg.topology, n);
            req.kv_strategy = variant.kv;
            req.executor = variant.mode;

            double action_ms_sum = 0.0;
            DispatchStats counters{};
            std::vector<Trajectory> trajectories;
            for (int r = 0; r < repeats; ++r) {
                ReasoningOutput reasoning = engine.run_reasoning(req);
                Model::DiffusionResult diff;
                const auto t0 = std::chrono::steady_clock::now();
                const auto actions =
                    engine.run_action_generation(reasoning, req, &diff);
                action_ms_sum += std::chrono::duration<double, std::milli>(
                                     std::chrono::steady_clock::now() - t0)
                                     .count();
                counters = {};
                for (const DispatchStats& d : diff.iter_stats) {
                    counters.dispatch_count += d.dispatch_count;
                    counters.replay_count += d.replay_count;
                    counters.alloc_count += d.alloc_count;
                    counters.bytes_allocated += d.bytes_allocated;
                }
                const float v0 = initial_speed_from_history(req.pose_history);
                trajectories.clear();
                for (const auto& a : actions) {
                    trajectories.push_back(actions_to_trajectory(a, v0));
                }
            }
            if (reference.empty()) {
                reference = trajectories;
            } else if (!trajectories_equal(reference, trajectories)) {
                std::fprintf(stderr,
                             "variant '%s' diverged from baseline at n=%lld; "
                             "optimizations must be result-preserving\n",
                             variant.name, static_cast<long long>(n));
                throw InternalError("action-generation variants are not equivalent");
            }
            csv.row({variant.name, std::to_string(n),
                     format_double(action_ms_sum / repeats),
                     std::to_string(counters.alloc_count),
                     std::to_string(counters.dispatch_count),
                     std::to_string(counters.replay_count)});
        }
    }
    const std::filesystem::path path =
        opts.out_path.empty() ? std::filesystem::path("compare.csv") : opts.out_path;
    write_text_file(path, csv.str());
    std::printf("compare-actiongen: wrote %s\n", path.string().c_str());
    return 0;
}

namespace {

int eval_open(const CliOptions& opts, const RunConfig& cfg) {
    std::vector<std::filesystem::path> files;
    if (std::filesystem::is_directory(opts.scenario_path)) {
        for (const auto& entry :
             std::filesystem::directory_iterator(opts.scenario_path)) {
            if (entry.path().extension() == ".json") files.push_back(entry.path());
        }
        std::sort(files.begin(), files.end());
    } else {
        files.push_back(opts.scenario_path);
    }
    if (files.empty()) throw IoError("no scenario files in the dataset directory");

    const int k = opts.num_traj ? static_cast<int>(*opts.num_traj) : 6;

    struct CaseSlot {
        std::string id;
        std::filesystem::path path;
        double min_ade = 0.0;
        bool ok = false;
    };
    std::vector<CaseSlot> slots;
    for (const auto& f : files) slots.push_back({f.stem().string(), f, 0.0, false});

    auto run_case = [&](Engine& engine, CaseSlot& slot) {
        const Scenario scenario = load_scenario(slot.path);
        if (!scenario.gt_future) {
            throw IoError("case " + slot.id + " is missing gt_future");
        }
        const InferenceRequest req = build_request(scenario, cfg, cfg.topology, k);
        const InferenceResult result = engine.infer(req);
        std::vector<Trajectory> samples = result.trajectories;
        slot.min_ade = min_ade(samples, *scenario.gt_future);
        slot.ok = true;
    };

    std::int64_t skipped = 0;
    if (opts.parallel && slots.size() > 1) {
        const std::size_t workers =
            std::min<std::size_t>(slots.size(),
                                  std::max(1u, std::thread::hardware_concurrency()));
        std::vector<std::thread> pool;
        std::atomic<std::size_t> next{0};
        std::atomic<std::int64_t> skips{0};
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                Engine engine(cfg.model, cfg.substrate_options());
                while (true) {
                    const std::size_t i = next.fetch_add(1);
                    if (i >= slots.size()) break;
                    try {
                        run_case(engine, slots[i]);
                    } catch (const Error& e) {
                        log_warn("open-loop case '" + slots[i].id +
                                 "' skipped: " + e.what());
                        skips.fetch_add(1);
                    }
                }
            });
        }
        for (auto& t : pool) t.join();
        skipped = skips.load();
    } else {
        Engine engine(cfg.model, cfg.substrate_options());
        for (CaseSlot& slot : slots) {
            try {
                run_case(engine, slot);
            } catch (const Error& e) {
                log_warn("open-loop case '" + slot.id + "' skipped: " + e.what());
                skipped += 1;
            }
        }
    }

    CsvWriter csv;
    csv.row({"case_id", "min_ade_m"});
    double sum = 0.0;
    std::int64_t evaluated = 0;
    for (const CaseSlot& slot : slots) {
        if (!slot.ok) continue;
        csv.row({slot.id, format_double(slot.min_ade)});
        sum += slot.min_ade;
        evaluated += 1;
    }
    csv.row({"mean", format_double(evaluated ? sum / evaluated : 0.0)});
    const std::filesystem::path path =
        opts.out_path.empty() ? std::filesystem::path("open_loop.csv") : opts.out_path;
    write_text_file(path, csv.str());
    std::printf("eval open: %lld cases, %lld skipped, mean minADE %.4f m -> %s\n",
                static_cast<long long>(evaluated), static_cast<long long>(skipped),
                evaluated ? sum / evaluated : 0.0, path.string().c_str());
    return 0;
}

int eval_closed(const CliOptions& opts, const RunConfig& cfg) {
    ClosedLoopWorld world = load_world(opts.scenario_path);
    if (!read_json_file(opts.scenario_path).contains("selector")) {
        world.selector = cfg.selector;
    }

    Policy policy;
    std::optional<Engine> engine;
    switch (cfg.policy) {
        case PolicyKind::ScriptedStraight:
            policy = scripted_policy(0.0, 0.0, static_cast<int>(cfg.num_trajectories));
            break;
        case PolicyKind::ScriptedArc:
            policy = scripted_policy(0.0, cfg.scripted_curvature,
                                     static_cast<int>(cfg.num_trajectories));
            break;
        case PolicyKind::Engine: {
            engine.emplace(cfg.model, cfg.substrate_options());
            const Frames frames = synthetic_frames(56, 56);
            policy = [&engine, &cfg, frames](const SimObservation& obs) {
                InferenceRequest req;
                req.frames = frames;
                req.system_prompt = cfg.default_system_prompt;
                req.user_prompt = cfg.default_user_prompt;
                req.pose_history = obs.history;
                req.num_trajectories = cfg.num_trajectories;
                req.topology = cfg.topology;
                req.kv_strategy = cfg.kv_strategy;
                req.executor = cfg.executor;
                req.sampler_seed = cfg.sampler_seed + static_cast<std::uint64_t>(obs.step);
                req.action_init_seed =
                    cfg.action_init_seed + static_cast<std::uint64_t>(obs.step);
                req.sampler_mode = cfg.sampler_mode;
                const InferenceResult result = engine->infer(req);
                std::vector<PlanSample> samples;
                for (std::size_t i = 0; i < result.trajectories.size(); ++i) {
                    samples.push_back({result.trajectories[i], result.actions[i]});
                }
                return samples;
            };
            break;
        }
    }

    const SimResult result = simulate_closed_loop(world, policy);
    CsvWriter csv;
    csv.row({"scenario_id", "dtf_m", "failure_kind", "failure_step"});
    csv.row({opts.scenario_path.stem().string(), format_double(result.dtf),
             failure_kind_name(result.failure.kind),
             std::to_string(result.failure.step)});
    const std::filesystem::path path = opts.out_path.empty()
                                           ? std::filesystem::path("closed_loop.csv")
                                           : opts.out_path;
    write_text_file(path, csv.str());
    std::printf("eval closed: dtf %.2f m, failure %s at step %lld -> %s\n", result.dtf,
                failure_kind_name(result.failure.kind),
                static_cast<long long>(result.failure.step), path.string().c_str());
    return 0;
}

} // namespace

int cmd_eval(const CliOptions& opts) {
    const RunConfig cfg = resolve_config(opts);
    if (opts.scenario_path.empty()) {
        throw ConfigError("eval needs --scenario (dataset dir or world file)");
    }
    if (opts.eval_mode == "open") return eval_open(opts, cfg);
    if (opts.eval_mode == "closed") return eval_closed(opts, cfg);
    throw ConfigError("eval mode must be 'open' or 'closed'");
}

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"desk-scale reasoning-to-action inference runtime"};
    app.require_subcommand(1);

    CliOptions opts;
    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", opts.config_path, "run configuration JSON");
        cmd->add_option("--scenario", opts.scenario_path,
                        "scenario file, dataset directory, or world file");
        cmd->add_option("--num-traj", opts.num_traj, "trajectories per request");
        cmd->add_option("--topology", opts.topology, "multi | single | both");
        cmd->add_option("--kv", opts.kv, "dynamic | static");
        cmd->add_option("--executor", opts.executor, "eager | graph");
        cmd->add_option("--seed", opts.seed, "base seed (sampler; action = seed+1)");
        cmd->add_option("--repeats", opts.repeats, "measurement repetitions");
        cmd->add_option("--sweep", opts.sweep, "trajectory counts to sweep")
            ->delimiter(',');
        cmd->add_option("--out", opts.out_path, "output path");
        cmd->add_flag("--parallel", opts.parallel, "fan out open-loop cases");
    };

    CLI::App* generate = app.add_subcommand("generate", "run one inference request");
    add_common(generate);
    CLI::App* profile = app.add_subcommand("profile", "latency sweep over N");
    add_common(profile);
    CLI::App* compare = app.add_subcommand(
        "compare-actiongen", "baseline vs +static_kv vs +graph action generation");
    add_common(compare);
    CLI::App* eval = app.add_subcommand("eval", "open- or closed-loop evaluation");
    eval->add_option("mode", opts.eval_mode, "open | closed")->required();
    add_common(eval);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (generate->parsed()) return cmd_generate(opts);
        if (profile->parsed()) return cmd_profile(opts);
        if (compare->parsed()) return cmd_compare_actiongen(opts);
        if (eval->parsed()) return cmd_eval(opts);
        return 2;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "configuration error: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "i/o error: %s\n", e.what());
        return 1;
    } catch (const Error& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "unexpected error: %s\n", e.what());
        return 3;
    }
}

} // namespace minivla
