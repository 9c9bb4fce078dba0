#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "test_support.hpp"

#include <cmath>
#include <cstdlib>

using testsup::Csv;
using testsup::run_command;

namespace {

const std::string kBin = MINIVLA_BIN;
const std::string kFixtures = MINIVLA_FIXTURES;

std::string quick_config_path() {
    static bool written = false;
    const std::string path = "cli_quick_config.json";
    if (!written) {
        nlohmann::json cfg;
        cfg["model"] = {{"vision_blocks", 1}, {"decoder_blocks", 2},
                        {"hidden_dim", 16},  {"action_hidden_dim", 8},
                        {"kv_dim", 8},       {"heads", 2},
                        {"vocab_size", 128}, {"max_new_tokens", 8}};
        cfg["repeats"] = 2;
        std::ofstream out(path);
        out << cfg.dump(2);
        written = true;
    }
    return path;
}

std::string demo_scenario() { return kFixtures + "/demo_scenario.json"; }

} // namespace

TEST_CASE("generate: bundled demo scenario yields one trajectory") {
    const auto res = run_command(kBin + " generate --config " + quick_config_path() +
                                 " --scenario " + demo_scenario() +
                                 " --out cli_gen.json");
    CHECK(res.exit_code == 0);
    const auto j = nlohmann::json::parse(testsup::slurp("cli_gen.json"));
    CHECK(j.at("trajectories").size() == 1);
    CHECK(j.at("reasonings").size() == 1);
    CHECK(j.at("trajectories")[0].size() == 64);
    CHECK(j.at("counters").contains("kv_bytes"));
    CHECK(j.at("latency").contains("action_gen_iter_ms"));
}

TEST_CASE("generate: single topology keeps one reasoning for six trajectories") {
    const auto res = run_command(kBin + " generate --config " + quick_config_path() +
                                 " --scenario " + demo_scenario() +
                                 " --num-traj 6 --topology single --out cli_gen6.json");
    CHECK(res.exit_code == 0);
    const auto j = nlohmann::json::parse(testsup::slurp("cli_gen6.json"));
    CHECK(j.at("reasonings").size() == 1);
    CHECK(j.at("trajectories").size() == 6);
}

TEST_CASE("exit codes: io=1, config=2") {
    CHECK(run_command(kBin + " generate --config " + quick_config_path() +
                      " --scenario missing_scenario.json")
              .exit_code == 1);
    CHECK(run_command(kBin + " generate --config " + quick_config_path() +
                      " --scenario " + demo_scenario() +
                      " --executor graph --kv dynamic")
              .exit_code == 2);
    // The message names the violated constraint.
    const auto res = run_command(kBin + " generate --config " + quick_config_path() +
                                 " --scenario " + demo_scenario() +
                                 " --executor graph --kv dynamic");
    CHECK(res.output.find("static") != std::string::npos);
}

TEST_CASE("profile: sweep rows, repeats column, equivalence flag") {
    const auto res = run_command(kBin + " profile --config " + quick_config_path() +
                                 " --scenario " + demo_scenario() +
                                 " --sweep 1,2 --topology both --repeats 3"
                                 " --out cli_prof.csv");
    CHECK(res.exit_code == 0);
    const Csv csv = Csv::load("cli_prof.csv");
    CHECK(csv.rows.size() == 4); // 2 topologies x 2 Ns
    const auto rcol = csv.col("repeats");
    for (const auto& row : csv.rows) CHECK(row[rcol] == "3");

    const auto scaling = nlohmann::json::parse(testsup::slurp("cli_prof.scaling.json"));
    CHECK(scaling.contains("multi"));
    CHECK(scaling.contains("single"));
    CHECK(scaling.at("topology_equivalence_at_n1").get<bool>());
    CHECK(scaling.at("multi").contains("classifications"));

    const Csv iters = Csv::load("cli_prof_iters.csv");
    CHECK(iters.rows.size() == 4u * 10u); // 10 diffusion iterations per row
}

TEST_CASE("profile: a sweep without N=1 is a configuration error") {
    CHECK(run_command(kBin + " profile --config " + quick_config_path() +
                      " --scenario " + demo_scenario() + " --sweep 2,3")
              .exit_code == 2);
}

TEST_CASE("compare-actiongen: format and counter contracts") {
    const auto res = run_command(kBin + " compare-actiongen --config " +
                                 quick_config_path() + " --scenario " +
                                 demo_scenario() +
                                 " --sweep 1,2 --repeats 1 --out cli_cmp.csv");
    CHECK(res.exit_code == 0);
    const Csv csv = Csv::load("cli_cmp.csv");
    CHECK(csv.header == std::vector<std::string>{"variant", "n", "action_gen_ms",
                                                 "alloc_count", "dispatch_count",
                                                 "replay_count"});
    REQUIRE(csv.rows.size() == 6);
    const auto a = csv.col("alloc_count");
    const auto r = csv.col("replay_count");
    const auto d = csv.col("dispatch_count");
    for (std::size_t base = 0; base < 6; base += 3) {
        const auto& baseline = csv.rows[base];
        const auto& static_kv = csv.rows[base + 1];
        const auto& graph = csv.rows[base + 2];
        CHECK(baseline[0] == "baseline");
        CHECK(static_kv[0] == "+static_kv");
        CHECK(graph[0] == "+graph");
        // Allocations vanish with the static strategy.
        CHECK(std::stoll(baseline[a]) > std::stoll(static_kv[a]));
        CHECK(std::stoll(static_kv[a]) == 0);
        // Replays cover iterations 3..10; dispatches collapse accordingly.
        CHECK(std::stoll(graph[r]) == 8);
        CHECK(std::stoll(graph[d]) < std::stoll(static_kv[d]));
        CHECK(std::stoll(baseline[r]) == 0);
    }
}

TEST_CASE("eval open: bundled case set with an aggregate row") {
    const auto res = run_command(kBin + " eval open --config " + quick_config_path() +
                                 " --scenario " + kFixtures +
                                 "/open_loop --num-traj 2 --out cli_open.csv");
    CHECK(res.exit_code == 0);
    const Csv csv = Csv::load("cli_open.csv");
    CHECK(csv.header == std::vector<std::string>{"case_id", "min_ade_m"});
    REQUIRE(csv.rows.size() == 4); // 3 cases + mean
    CHECK(csv.rows.back()[0] == "mean");
    double sum = 0.0;
    for (std::size_t i = 0; i < 3; ++i) sum += std::stod(csv.rows[i][1]);
    CHECK(std::stod(csv.rows[3][1]) == doctest::Approx(sum / 3.0).epsilon(1e-5));
}

TEST_CASE("eval closed: scripted policies against the bundled worlds") {
    nlohmann::json cfg;
    cfg["model"] = {{"vision_blocks", 1}, {"decoder_blocks", 2}, {"hidden_dim", 16},
                    {"action_hidden_dim", 8}, {"kv_dim", 8}, {"heads", 2},
                    {"vocab_size", 128}, {"max_new_tokens", 8}};
    cfg["policy"] = "scripted_straight";
    {
        std::ofstream out("cli_straight_cfg.json");
        out << cfg.dump(2);
    }
    cfg["policy"] = "scripted_arc";
    cfg["scripted_curvature"] = 0.05;
    {
        std::ofstream out("cli_arc_cfg.json");
        out << cfg.dump(2);
    }

    SUBCASE("straight corridor, straight policy: dtf == max_distance") {
        const auto res = run_command(kBin + " eval closed --config cli_straight_cfg.json"
                                     " --scenario " + kFixtures +
                                     "/worlds/straight.json --out cli_closed.csv");
        CHECK(res.exit_code == 0);
        const Csv csv = Csv::load("cli_closed.csv");
        REQUIRE(csv.rows.size() == 1);
        CHECK(csv.rows[0][csv.col("failure_kind")] == "none");
        CHECK(std::stod(csv.rows[0][csv.col("dtf_m")]) == doctest::Approx(80.0));
    }

    SUBCASE("curved policy leaves the corridor at the oracle arc") {
        const auto res = run_command(kBin + " eval closed --config cli_arc_cfg.json"
                                     " --scenario " + kFixtures +
                                     "/worlds/curve_fail.json --out cli_curve.csv");
        CHECK(res.exit_code == 0);
        const Csv csv = Csv::load("cli_curve.csv");
        REQUIRE(csv.rows.size() == 1);
        CHECK(csv.rows[0][csv.col("failure_kind")] == "off_drivable");
        // Reference crossing of |y|=2 for v=5, k=0.05: arccos(0.9)/0.05 m.
        const double oracle = std::acos(1.0 - 2.0 * 0.05 / 1.0) / 0.05;
        CHECK(std::fabs(std::stod(csv.rows[0][csv.col("dtf_m")]) - oracle) <= 0.6);
    }

    SUBCASE("obstacle world: collision at the analytic contact distance") {
        const auto res = run_command(kBin + " eval closed --config cli_straight_cfg.json"
                                     " --scenario " + kFixtures +
                                     "/worlds/obstacle.json --out cli_obs.csv");
        CHECK(res.exit_code == 0);
        const Csv csv = Csv::load("cli_obs.csv");
        CHECK(csv.rows[0][csv.col("failure_kind")] == "collision");
        CHECK(std::fabs(std::stod(csv.rows[0][csv.col("dtf_m")]) - 8.0) <= 0.5 + 1e-9);
    }
}

TEST_CASE("re-running commands reproduces the data bytes") {
    auto canonical_after = [&](const std::string& cmd,
                               const std::string& out) -> std::string {
        const auto res = run_command(cmd + " --out " + out);
        REQUIRE(res.exit_code == 0);
        return testsup::canonical_output(out);
    };
    const std::string gen = kBin + " generate --config " + quick_config_path() +
                            " --scenario " + demo_scenario() + " --seed 42";
    CHECK(canonical_after(gen, "det_a.json") == canonical_after(gen, "det_b.json"));

    const std::string prof = kBin + " profile --config " + quick_config_path() +
                             " --scenario " + demo_scenario() +
                             " --sweep 1,2 --repeats 1 --seed 7";
    CHECK(canonical_after(prof, "det_a.csv") == canonical_after(prof, "det_b.csv"));

    const std::string open = kBin + " eval open --config " + quick_config_path() +
                             " --scenario " + kFixtures + "/open_loop --num-traj 2";
    CHECK(canonical_after(open, "det_open_a.csv") ==
          canonical_after(open, "det_open_b.csv"));
}
