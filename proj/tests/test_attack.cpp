#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <set>

#include "stepleak/attack.hpp"
#include "stepleak/report.hpp"
#include "stepleak/rng.hpp"

using namespace stepleak;

namespace {

ModelSpec layer_model(std::vector<LayerSpec> layers, std::vector<std::vector<float>> w,
                      std::vector<std::vector<float>> b) {
    ModelSpec m;
    m.layers = std::move(layers);
    m.weights = std::move(w);
    m.biases = std::move(b);
    m.seed = 0;
    return m;
}

ModelSpec seeded_layer(std::uint64_t seed, int n_inputs, int n_neurons, Activation fn) {
    ModelSpec m;
    m.seed = seed;
    m.layers = {{n_inputs, n_neurons, make_activation(fn)}};
    Rng wr = substream(seed, "attack-test-w");
    Rng br = substream(seed, "attack-test-b");
    std::vector<float> w(static_cast<std::size_t>(n_inputs) * n_neurons);
    std::vector<float> b(n_neurons);
    for (auto& v : w) v = static_cast<float>(wr.normal(0.0, 0.3));
    for (auto& v : b) v = static_cast<float>(br.normal(0.0, 0.3));
    m.weights = {std::move(w)};
    m.biases = {std::move(b)};
    return m;
}

// independent check: smallest k with w * base^k classified saturated
int expected_saturation_exponent(const RegionMap& map, float w, double base, int max_exp) {
    for (int k = 0; k <= max_exp; ++k) {
        const float v = static_cast<float>(std::pow(base, k));
        const float sigma = w * v;
        const Observation obs = map.classify(sigma);
        if (map.is_right_saturated(obs.region) || map.is_left_saturated(obs.region)) return k;
    }
    return -1;
}

}  // namespace

TEST_CASE("calibration recovers signs and saturating magnitudes") {
    // weights chosen so the locked small values cannot move the outcome
    const ModelSpec m = layer_model({{3, 1, make_activation(Activation::exponential)}},
                                    {{0.1f, -0.1f, 0.0f}}, {{0.0f}});
    const RegionMap& map = region_map_for(LeakFnKind::expf_tlibc);
    Oracle o(m, OracleMode::direct);
    const CalibrationResult c = calibrate_neuron(o, 0, 3, 10.0, 38, 99);

    // +0.1 saturates overflow at 10^3 (0.1*1000 = 100 > 88.72)
    CHECK(c.signs[0] == +1);
    CHECK(c.maxvals[0] == 1000.0f);
    CHECK(expected_saturation_exponent(map, 0.1f, 10.0, 38) == 3);

    // -0.1 needs 10^4: 0.1*1000 = 100 does not clear the 103.97 underflow bound
    CHECK(c.signs[1] == -1);
    CHECK(c.maxvals[1] == 10000.0f);
    CHECK(expected_saturation_exponent(map, -0.1f, 10.0, 38) == 4);

    // a zero weight never saturates
    CHECK_FALSE(c.reachable[2]);
    CHECK(c.signs[2] == 0);
}

TEST_CASE("layer-wide calibration degenerates to the per-neuron result") {
    const ModelSpec m = layer_model({{2, 1, make_activation(Activation::exponential)}},
                                    {{0.1f, -0.2f}}, {{0.0f}});
    Oracle o1(m, OracleMode::direct);
    const CalibrationResult a = calibrate_neuron(o1, 0, 2, 10.0, 38, 1);
    Oracle o2(m, OracleMode::direct);
    const LayerCalibration lc = calibrate_layer_input_centric(o2, 0, 10.0, 38);
    REQUIRE(lc.per_neuron.size() == 1);
    CHECK(lc.per_neuron[0].signs == a.signs);
    CHECK(lc.per_neuron[0].maxvals == a.maxvals);
    CHECK(lc.queries <= 2u * 38u);
}

TEST_CASE("an all-zero weight column is unreachable for every neuron") {
    const ModelSpec m = layer_model({{2, 3, make_activation(Activation::exponential)}},
                                    {{0.0f, 0.5f, 0.0f, -0.4f, 0.0f, 0.2f}},
                                    {{0.0f, 0.0f, 0.0f}});
    Oracle o(m, OracleMode::direct);
    const LayerCalibration lc = calibrate_layer_input_centric(o, 0, 10.0, 38);
    for (const CalibrationResult& r : lc.per_neuron) {
        CHECK_FALSE(r.reachable[0]);
        CHECK(r.reachable[1]);
    }
}

TEST_CASE("binary search converges onto the saturation border") {
    // hidden weight 27.5846 on input 0; the other input carries no weight
    const ModelSpec m = layer_model({{2, 1, make_activation(Activation::exponential)}},
                                    {{27.5846f, 0.0f}}, {{0.0f}});
    Oracle o(m, OracleMode::direct);
    const std::vector<float> locked = {0.0f, 0.37f};

    ConvergenceSet cs = binary_search_threshold(o, 0, 0, locked, 10.0f, 200);
    CHECK(cs.ulp_tight);
    CHECK(cs.depth_used <= 64);  // float32 exhausts the bracket

    const float v = cs.inputs[0];
    CHECK(v == doctest::Approx(3.2164).epsilon(1e-4));
    CHECK(cs.threshold.below.label == "NormalPos");
    CHECK(cs.threshold.above.label == "Overflow");

    // the lower-side pre-activation sits exactly in the lower region and one
    // bracket step crosses
    const RegionMap& map = region_map_for(LeakFnKind::expf_tlibc);
    CHECK(map.interval_containing(27.5846f * v).id.label == "NormalPos");
    CHECK(map.interval_containing(27.5846f * cs.upper_value).id.label == "Overflow");
}

TEST_CASE("depth zero returns the calibration bracket unrefined") {
    const ModelSpec m = layer_model({{1, 1, make_activation(Activation::exponential)}}, {{2.0f}},
                                    {{0.0f}});
    Oracle o(m, OracleMode::direct);
    const ConvergenceSet cs = binary_search_threshold(o, 0, 0, {0.0f}, 100.0f, 0);
    CHECK(cs.depth_used == 0);
    CHECK(cs.inputs[0] == 0.0f);
    CHECK(cs.upper_value == 100.0f);
}

TEST_CASE("a non-saturating start is a lost bracket") {
    const ModelSpec m = layer_model({{1, 1, make_activation(Activation::exponential)}}, {{0.5f}},
                                    {{0.0f}});
    Oracle o(m, OracleMode::direct);
    CHECK_THROWS_AS(binary_search_threshold(o, 0, 0, {0.0f}, 1.0f, 10), LostBracket);
}

TEST_CASE("collected sets mix both outer thresholds") {
    const ModelSpec m = seeded_layer(41, 3, 2, Activation::exponential);
    Oracle o(m, OracleMode::direct);
    AttackConfig cfg;
    cfg.max_depth = 30;
    cfg.seed = 5;
    const LayerCalibration lc = calibrate_layer_input_centric(o, 0, cfg.base, cfg.max_exponent);
    const auto sets = collect_convergence_sets(o, 0, 4 + cfg.extras, cfg.max_depth,
                                               lc.per_neuron[0], cfg);
    REQUIRE(static_cast<int>(sets.size()) >= 4);
    std::set<float> thresholds;
    for (const auto& cs : sets) thresholds.insert(cs.threshold.value);
    CHECK(thresholds.size() >= 2);
}

TEST_CASE("branchy relu offers only the zero threshold, so diversity fails") {
    const ModelSpec m = seeded_layer(43, 2, 2, Activation::relu);
    ModelSpec branchy = m;
    for (LayerSpec& l : branchy.layers) l.activation = make_activation(Activation::relu, true);
    Oracle o(branchy, OracleMode::direct);
    AttackConfig cfg;
    const LayerCalibration lc = calibrate_layer_input_centric(o, 0, cfg.base, cfg.max_exponent);
    CHECK_THROWS_AS(
        collect_convergence_sets(o, 0, 3 + cfg.extras, cfg.max_depth, lc.per_neuron[0], cfg),
        InsufficientThresholdDiversity);
}

TEST_CASE("solve: exact single-unknown system") {
    ConvergenceSet a;
    a.inputs = {3.2164f};
    a.threshold.value = 88.723f;
    ConvergenceSet b;
    b.inputs = {6.4328f};
    b.threshold.value = 177.446f;
    const SolveResult s = solve_neuron({a, b});
    CHECK(s.weights[0] == doctest::Approx(27.5846).epsilon(1e-4));
    CHECK(std::fabs(s.bias) < 1e-9);
    CHECK(s.residual_max < 1e-9);
}

TEST_CASE("solve recovers a constructed three-unknown system exactly") {
    const double w1 = 0.148, w2 = -0.284, bias = 0.075;
    auto row = [&](float i1, float i2) {
        ConvergenceSet cs;
        cs.inputs = {i1, i2};
        cs.threshold.value =
            static_cast<float>(w1 * static_cast<double>(i1) + w2 * static_cast<double>(i2) + bias);
        return cs;
    };
    const std::vector<ConvergenceSet> sets = {row(599.0f, 0.0f), row(0.0f, -312.0f),
                                              row(150.0f, 75.0f)};
    const SolveResult s = solve_neuron(sets);
    // float32 quantisation of the threshold column bounds the error
    CHECK(s.weights[0] == doctest::Approx(w1).epsilon(1e-4));
    CHECK(s.weights[1] == doctest::Approx(w2).epsilon(1e-4));
    CHECK(s.bias == doctest::Approx(bias).epsilon(2e-3));
}

TEST_CASE("solve rejects degenerate systems") {
    ConvergenceSet dup;
    dup.inputs = {1.0f, 2.0f};
    dup.threshold.value = 88.7f;
    CHECK_THROWS_AS(solve_neuron({dup, dup, dup}), RankDeficient);

    ConvergenceSet ambiguous = dup;
    ambiguous.sign_known = false;
    CHECK_THROWS_AS(solve_neuron({ambiguous, dup, dup}), AttackError);

    CHECK_THROWS_AS(solve_neuron({dup}), RankDeficient);
}

TEST_CASE("first-layer recovery on a seeded exponential layer") {
    const ModelSpec m = seeded_layer(47, 3, 4, Activation::exponential);
    Oracle o(m, OracleMode::direct);
    AttackConfig cfg;
    cfg.max_depth = 45;
    cfg.seed = 9;
    const RecoveredLayer rec = recover_first_layer(o, cfg);
    CHECK(rec.unsolved.empty());

    const ErrorStats stats = layer_error_stats(rec, m);
    CHECK(stats.n_params == 4 * 4);
    CHECK(stats.avg_abs < 1e-4);
    CHECK(stats.max_abs < 1e-3);

    // sign handling: recovered signs match the ground truth above the floor
    const LayerCalibration lc = [&] {
        Oracle o2(m, OracleMode::direct);
        return calibrate_layer_input_centric(o2, 0, cfg.base, cfg.max_exponent);
    }();
    for (int n = 0; n < 4; ++n) {
        for (int j = 0; j < 3; ++j) {
            const float w = m.weight(0, n, j);
            if (std::fabs(w) > 1e-6f) {
                CHECK(lc.per_neuron[n].signs[j] == (w > 0 ? +1 : -1));
            }
        }
    }
}

TEST_CASE("query accounting is exact and within the budget formula") {
    const ModelSpec m = seeded_layer(53, 4, 3, Activation::exponential);
    Oracle o(m, OracleMode::direct);
    AttackConfig cfg;
    cfg.max_depth = 25;
    cfg.seed = 3;
    const RecoveredLayer rec = recover_first_layer(o, cfg);

    std::uint64_t phase_sum = 0;
    for (const auto& [phase, q] : o.queries_by_phase()) phase_sum += q;
    CHECK(phase_sum == o.query_count());
    CHECK(rec.queries_used == o.query_count());

    const int P = 4 + 1;
    const std::int64_t C = static_cast<std::int64_t>(4) * cfg.max_exponent;
    const std::int64_t bound =
        C + static_cast<std::int64_t>(3) * (P + cfg.extras) * (cfg.max_depth + kPerSetOverheadQueries);
    CHECK(static_cast<std::int64_t>(rec.queries_used) <= bound);
}

TEST_CASE("deeper searches only refine: error shrinks with depth") {
    const ModelSpec m = seeded_layer(59, 3, 3, Activation::exponential);
    std::vector<double> errs;
    std::vector<double> slacks;
    for (int depth : {8, 16, 32}) {
        Oracle o(m, OracleMode::direct);
        AttackConfig cfg;
        cfg.max_depth = depth;
        cfg.seed = 11;
        const RecoveredLayer rec = recover_first_layer(o, cfg);
        REQUIRE(rec.unsolved.empty());
        errs.push_back(layer_error_stats(rec, m).avg_abs);
        double r = 0.0;
        for (double v : rec.residual_rms) r = std::max(r, v);
        slacks.push_back(10.0 * r + 1e-9);
    }
    CHECK(errs[1] <= errs[0] + std::max(slacks[0], slacks[1]));
    CHECK(errs[2] <= errs[1] + std::max(slacks[1], slacks[2]));
}

TEST_CASE("noise-free optimality: solve error equals the propagated quantisation") {
    const ModelSpec m = seeded_layer(61, 3, 1, Activation::exponential);
    Oracle o(m, OracleMode::direct);
    AttackConfig cfg;
    cfg.max_depth = 200;  // ulp-tight
    cfg.seed = 13;
    const LayerCalibration lc = calibrate_layer_input_centric(o, 0, cfg.base, cfg.max_exponent);
    const auto sets = collect_convergence_sets(o, 0, 4 + cfg.extras, cfg.max_depth,
                                               lc.per_neuron[0], cfg);
    const SolveResult s = solve_neuron(sets);

    // double-precision forward pre-activations over the float32 parameters
    const int rows = static_cast<int>(sets.size());
    Eigen::MatrixXd a(rows, 4);
    Eigen::VectorXd delta(rows);
    for (int r = 0; r < rows; ++r) {
        double sigma = 0.0;
        for (int j = 0; j < 3; ++j) {
            a(r, j) = static_cast<double>(sets[r].inputs[j]);
            sigma += static_cast<double>(m.weight(0, 0, j)) * static_cast<double>(sets[r].inputs[j]);
        }
        a(r, 3) = 1.0;
        sigma += static_cast<double>(m.bias(0, 0));
        delta(r) = static_cast<double>(sets[r].threshold.value) - sigma;
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::VectorXd propagated = svd.solve(delta);

    for (int j = 0; j < 3; ++j) {
        const double err = s.weights[j] - static_cast<double>(m.weight(0, 0, j));
        CHECK(err == doctest::Approx(propagated(j)).epsilon(1e-6).scale(1e-12));
    }
    const double bias_err = s.bias - static_cast<double>(m.bias(0, 0));
    CHECK(bias_err == doctest::Approx(propagated(3)).epsilon(1e-6).scale(1e-12));
}

TEST_CASE("parallel recovery is bit-identical to the sequential schedule") {
    const ModelSpec m = seeded_layer(67, 3, 6, Activation::exponential);
    AttackConfig cfg;
    cfg.max_depth = 20;
    cfg.seed = 17;

    Oracle seq(m, OracleMode::direct);
    const RecoveredLayer a = recover_first_layer(seq, cfg);

    cfg.parallel = true;
    Oracle par(m, OracleMode::direct);
    const RecoveredLayer b = recover_first_layer(par, cfg);

    REQUIRE(a.weights.size() == b.weights.size());
    for (std::size_t n = 0; n < a.weights.size(); ++n) {
        for (std::size_t j = 0; j < a.weights[n].size(); ++j) {
            CHECK(std::bit_cast<std::uint64_t>(a.weights[n][j]) ==
                  std::bit_cast<std::uint64_t>(b.weights[n][j]));
        }
        CHECK(std::bit_cast<std::uint64_t>(a.biases[n]) == std::bit_cast<std::uint64_t>(b.biases[n]));
    }
    CHECK(a.queries_used == b.queries_used);
}

TEST_CASE("trace-mediated recovery bit-matches the direct oracle") {
    const ModelSpec m = seeded_layer(71, 2, 3, Activation::sigmoid);
    AttackConfig cfg;
    cfg.max_depth = 24;
    cfg.seed = 19;

    Oracle direct(m, OracleMode::direct);
    const RecoveredLayer a = recover_first_layer(direct, cfg);

    cfg.oracle_mode = OracleMode::trace;
    Oracle traced(m, OracleMode::trace);
    const RecoveredLayer b = recover_first_layer(traced, cfg);

    REQUIRE(a.unsolved == b.unsolved);
    for (std::size_t n = 0; n < a.weights.size(); ++n) {
        for (std::size_t j = 0; j < a.weights[n].size(); ++j) {
            CHECK(std::bit_cast<std::uint64_t>(a.weights[n][j]) ==
                  std::bit_cast<std::uint64_t>(b.weights[n][j]));
        }
    }
}

TEST_CASE("budget formulas") {
    const QueryBudget b = query_budget_estimate(12, 100, 55, 38, 0);
    CHECK(b.Q == 12 * 100 * 55);
    CHECK(b.C == 11 * 38);
    const QueryBudget be = query_budget_estimate(12, 100, 55, 38, 3);
    CHECK(be.Q == 15 * 100 * 55);
    CHECK_THROWS_AS(query_budget_estimate(0, 1, 1, 1, 0), AttackError);

    const ReferenceBudgets r = mnist_reference_budgets();
    CHECK(r.neuron_centric_full_depth == 2460800);
    CHECK(r.input_centric_with_calibration == 1180765);
    CHECK(r.per_parameter_baseline == (28 * 28 + 1) * 128 * 100);
}
