#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "commands.hpp"
#include "stepleak/oracle.hpp"

using namespace stepleak;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

ModelSpec tiny_model() {
    ModelSpec m;
    m.layers = {{2, 3, make_activation(Activation::exponential)}};
    m.weights = {{0.31f, -0.22f, 0.17f, 0.28f, -0.41f, 0.09f}};
    m.biases = {{0.05f, -0.12f, 0.2f}};
    m.seed = 5;
    return m;
}

void write_config(const std::string& path, int depth, const std::string& strategy = "neuron",
                  const std::string& oracle = "direct") {
    AttackConfig cfg;
    cfg.max_depth = depth;
    cfg.strategy = strategy;
    cfg.oracle_mode = oracle_mode_from_name(oracle);
    cfg.seed = 77;
    cfg.to_json_file(path);
}

}  // namespace

TEST_CASE("gen-model writes a loadable preset, and the same seed twice is identical") {
    TempDir dir("stepleak_cli_gen");
    std::ostringstream out, err;
    CHECK(cli::cmd_gen_model("mult", 7, dir.file("m.json"), out, err) == 0);
    const ModelSpec loaded = load_model(dir.file("m.json"));
    const ModelSpec fresh = preset_model("mult", 7);
    CHECK(loaded.weights == fresh.weights);
    CHECK(loaded.biases == fresh.biases);

    CHECK(cli::cmd_gen_model("mult", 7, dir.file("m2.json"), out, err) == 0);
    CHECK(slurp(dir.file("m.json")) == slurp(dir.file("m2.json")));
}

TEST_CASE("gen-model rejects unknown presets with usage") {
    TempDir dir("stepleak_cli_bad");
    std::ostringstream out, err;
    CHECK(cli::cmd_gen_model("zebra", 1, dir.file("m.json"), out, err) == 2);
    CHECK(err.str().find("usage") != std::string::npos);
}

TEST_CASE("trace and parse commands round trip and match the direct oracle") {
    TempDir dir("stepleak_cli_trace");
    std::ostringstream out, err;
    save_model(tiny_model(), dir.file("m.json"));
    REQUIRE(cli::cmd_trace(dir.file("m.json"), "1.5,-2.0", dir.file("t.txt"), out, err) == 0);
    std::ostringstream parse_out;
    REQUIRE(cli::cmd_parse(dir.file("t.txt"), dir.file("m.json"), parse_out, err) == 0);

    // cross-check the printed regions against the direct oracle
    Oracle o(tiny_model(), OracleMode::direct);
    const QueryResult qr = o.query(std::vector<float>{1.5f, -2.0f});
    for (const Observation& obs : qr.layers[0]) {
        CHECK(parse_out.str().find(obs.region.label) != std::string::npos);
    }
}

TEST_CASE("trace command rejects wrong input arity") {
    TempDir dir("stepleak_cli_arity");
    std::ostringstream out, err;
    save_model(tiny_model(), dir.file("m.json"));
    CHECK(cli::cmd_trace(dir.file("m.json"), "1.0", dir.file("t.txt"), out, err) == 1);
}

TEST_CASE("attack command writes recovery, manifest, checkpoint, and errors") {
    TempDir dir("stepleak_cli_attack");
    std::ostringstream out, err;
    save_model(tiny_model(), dir.file("m.json"));
    write_config(dir.file("cfg.json"), 30);

    const int rc = cli::cmd_attack(dir.file("m.json"), dir.file("cfg.json"), dir.file("run"), out, err);
    CHECK(rc == 0);
    CHECK(fs::exists(dir.file("run") + "/recovered.json"));
    CHECK(fs::exists(dir.file("run") + "/errors.csv"));
    CHECK(fs::exists(dir.file("run") + "/checkpoint.json"));
    CHECK(fs::exists(dir.file("run") + "/manifest.json"));
    CHECK(out.str().find("Checkpoint saved.") != std::string::npos);
    CHECK(out.str().find("non-deterministic steps") != std::string::npos);
    CHECK(out.str().find("incomplete logs") != std::string::npos);
}

TEST_CASE("attack resumes from a checkpoint to identical outputs") {
    TempDir dir("stepleak_cli_resume");
    std::ostringstream out, err;
    save_model(tiny_model(), dir.file("m.json"));
    write_config(dir.file("cfg.json"), 25);

    REQUIRE(cli::cmd_attack(dir.file("m.json"), dir.file("cfg.json"), dir.file("run1"), out, err) == 0);
    const std::string uninterrupted = slurp(dir.file("run1") + "/recovered.json");

    // simulate an interrupted run: keep calibration plus one neuron
    REQUIRE(cli::cmd_attack(dir.file("m.json"), dir.file("cfg.json"), dir.file("run2"), out, err) == 0);
    {
        std::ifstream is(dir.file("run2") + "/checkpoint.json");
        std::stringstream buf;
        buf << is.rdbuf();
        std::string cp = buf.str();
        // drop neurons "1" and "2" from the checkpoint
        const auto pos = cp.find("\"1\":");
        REQUIRE(pos != std::string::npos);
        // crude but effective: reload as json via the config loader path
        std::ofstream os(dir.file("run2") + "/checkpoint.json");
        nlohmann::json j = nlohmann::json::parse(cp);
        j["neurons"].erase("1");
        j["neurons"].erase("2");
        os << j.dump(1) << '\n';
    }
    REQUIRE(cli::cmd_attack(dir.file("m.json"), dir.file("cfg.json"), dir.file("run2"), out, err) == 0);
    CHECK(slurp(dir.file("run2") + "/recovered.json") == uninterrupted);
    CHECK(slurp(dir.file("run2") + "/errors.csv") == slurp(dir.file("run1") + "/errors.csv"));
}

TEST_CASE("attack flag overrides beat the config file and join the run identity") {
    TempDir dir("stepleak_cli_override");
    std::ostringstream out, err;
    save_model(tiny_model(), dir.file("m.json"));
    write_config(dir.file("cfg.json"), 30);

    cli::AttackOverrides ov;
    ov.depth = 12;
    ov.seed = 5;
    REQUIRE(cli::cmd_attack(dir.file("m.json"), dir.file("cfg.json"), dir.file("a"), out, err, ov) == 0);
    REQUIRE(cli::cmd_attack(dir.file("m.json"), dir.file("cfg.json"), dir.file("b"), out, err) == 0);
    // different effective configs must not share results
    CHECK(slurp(dir.file("a") + "/recovered.json") != slurp(dir.file("b") + "/recovered.json"));
    CHECK(slurp(dir.file("a") + "/manifest.json").find("\"depth\": 12") != std::string::npos);

    // a checkpoint written under one override set is not resumed by another
    REQUIRE(cli::cmd_attack(dir.file("m.json"), dir.file("cfg.json"), dir.file("a"), out, err) == 0);
    CHECK(slurp(dir.file("a") + "/recovered.json") == slurp(dir.file("b") + "/recovered.json"));
}

TEST_CASE("rerunning the same attack reproduces report files byte for byte") {
    TempDir dir("stepleak_cli_repro");
    std::ostringstream out, err;
    save_model(tiny_model(), dir.file("m.json"));
    write_config(dir.file("cfg.json"), 20);
    REQUIRE(cli::cmd_attack(dir.file("m.json"), dir.file("cfg.json"), dir.file("a"), out, err) == 0);
    REQUIRE(cli::cmd_attack(dir.file("m.json"), dir.file("cfg.json"), dir.file("b"), out, err) == 0);
    CHECK(slurp(dir.file("a") + "/recovered.json") == slurp(dir.file("b") + "/recovered.json"));
    CHECK(slurp(dir.file("a") + "/errors.csv") == slurp(dir.file("b") + "/errors.csv"));
}

TEST_CASE("sweep writes one row per depth and reproduces byte-identically") {
    TempDir dir("stepleak_cli_sweep");
    std::ostringstream out, err;
    save_model(tiny_model(), dir.file("m.json"));
    AttackConfig cfg;
    cfg.seed = 7;

    REQUIRE(cli::cmd_sweep(dir.file("m.json"), {10}, dir.file("one.csv"), cfg, out, err) == 0);
    {
        std::ifstream is(dir.file("one.csv"));
        const auto rows = read_sweep_csv(is);
        REQUIRE(rows.size() == 1);
        CHECK(rows[0].depth == 10);
    }

    REQUIRE(cli::cmd_sweep(dir.file("m.json"), {5, 15, 30}, dir.file("a.csv"), cfg, out, err) == 0);
    REQUIRE(cli::cmd_sweep(dir.file("m.json"), {5, 15, 30}, dir.file("b.csv"), cfg, out, err) == 0);
    CHECK(slurp(dir.file("a.csv")) == slurp(dir.file("b.csv")));
    {
        std::ifstream is(dir.file("a.csv"));
        const auto rows = read_sweep_csv(is);
        REQUIRE(rows.size() == 3);
        CHECK(rows[2].stats.avg_abs <= rows[0].stats.avg_abs + 1e-9);
    }
}

TEST_CASE("budget command prints the formulas and reference projections") {
    std::ostringstream out, err;
    REQUIRE(cli::cmd_budget(785, 128, 55, 38, 0, true, out, err) == 0);
    const std::string text = out.str();
    CHECK(text.find("2,460,800") != std::string::npos);
    CHECK(text.find("1,180,765") != std::string::npos);
    CHECK(text.find("10,048,000") != std::string::npos);

    std::ostringstream out2;
    REQUIRE(cli::cmd_budget(12, 100, 55, 38, 0, false, out2, err) == 0);
    CHECK(out2.str().find("66,000") != std::string::npos);   // Q
    CHECK(out2.str().find("418") != std::string::npos);      // C = 11*38
}

TEST_CASE("depth list parsing") {
    CHECK(cli::parse_depth_list("5:15:5") == std::vector<int>{5, 10, 15});
    CHECK(cli::parse_depth_list("7") == std::vector<int>{7});
    CHECK(cli::parse_depth_list("3,9") == std::vector<int>{3, 9});
    CHECK_THROWS(cli::parse_depth_list(""));
}
