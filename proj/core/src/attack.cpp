#include "stepleak/attack.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <set>
#include <thread>

#include <Eigen/Dense>
#include <json.hpp>

#include "stepleak/rng.hpp"

namespace stepleak {
namespace {

using nlohmann::json;

enum class Side { none, left, right };

Side saturation_side(const RegionMap& map, const RegionId& obs) {
    if (map.is_right_saturated(obs)) return Side::right;
    if (map.is_left_saturated(obs)) return Side::left;
    return Side::none;
}

bool keys_adjacent(float a, float b) {
    return std::llabs(total_order_key(a) - total_order_key(b)) <= 1;
}

std::uint64_t neuron_set_key(int neuron, int set, int retry) {
    return (static_cast<std::uint64_t>(neuron) << 24) | (static_cast<std::uint64_t>(set) << 8) |
           static_cast<std::uint64_t>(retry);
}

float small_nonzero(Rng& rng) {
    for (;;) {
        const double v = rng.uniform(-0.1, 0.1);
        if (std::fabs(v) > 1e-3) return static_cast<float>(v);
    }
}

std::map<std::string, std::uint64_t> phase_delta(const std::map<std::string, std::uint64_t>& before,
                                                 const std::map<std::string, std::uint64_t>& after) {
    std::map<std::string, std::uint64_t> d;
    for (const auto& [k, v] : after) {
        const auto it = before.find(k);
        const std::uint64_t prev = it == before.end() ? 0 : it->second;
        if (v > prev) d[k] = v - prev;
    }
    return d;
}

}  // namespace

AttackConfig AttackConfig::from_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw AttackError("cannot open config: " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw AttackError(std::string("config: ") + e.what());
    }
    AttackConfig c;
    c.max_depth = j.value("depth", c.max_depth);
    c.extras = j.value("extras", c.extras);
    c.base = j.value("base", c.base);
    c.max_exponent = j.value("max_exponent", c.max_exponent);
    c.min_gap = j.value("min_gap", c.min_gap);
    c.strategy = j.value("strategy", c.strategy);
    c.seed = j.value("seed", c.seed);
    c.verify_certificates = j.value("verify_certificates", c.verify_certificates);
    c.parallel = j.value("parallel", c.parallel);
    c.first_layer_injectable = j.value("first_layer_injectable", c.first_layer_injectable);
    if (j.contains("oracle")) c.oracle_mode = oracle_mode_from_name(j["oracle"].get<std::string>());
    return c;
}

void AttackConfig::to_json_file(const std::string& path) const {
    json j;
    j["depth"] = max_depth;
    j["extras"] = extras;
    j["base"] = base;
    j["max_exponent"] = max_exponent;
    j["min_gap"] = min_gap;
    j["strategy"] = strategy;
    j["seed"] = seed;
    j["verify_certificates"] = verify_certificates;
    j["parallel"] = parallel;
    j["first_layer_injectable"] = first_layer_injectable;
    j["oracle"] = std::string(oracle_mode_name(oracle_mode));
    std::ofstream os(path);
    if (!os) throw AttackError("cannot write config: " + path);
    os << j.dump(1) << '\n';
}

QueryBudget query_budget_estimate(std::int64_t P, std::int64_t N, std::int64_t S, std::int64_t D,
                                  std::int64_t extras) {
    if (P < 1 || N < 1 || S < 0 || D < 0 || extras < 0) {
        throw AttackError("budget: parameters must be positive");
    }
    QueryBudget b;
    b.P = P;
    b.N = N;
    b.S = S;
    b.D = D;
    b.extras = extras;
    b.Q = (P + extras) * N * S;
    b.C = (P - 1) * D;
    return b;
}

ReferenceBudgets mnist_reference_budgets() { return ReferenceBudgets{}; }

// --- calibration -----------------------------------------------------------

CalibrationResult calibrate_neuron(Oracle& o, int neuron, int n_inputs, double base,
                                   int max_exponent, std::uint64_t seed) {
    const RegionMap& map = activation_map(o.model().layers[0].activation);
    CalibrationResult res;
    res.signs.assign(n_inputs, 0);
    res.maxvals.assign(n_inputs, 0.0f);
    res.reachable.assign(n_inputs, false);

    for (int i = 0; i < n_inputs; ++i) {
        Rng rng = substream(seed, "calibration-locked", (static_cast<std::uint64_t>(neuron) << 20) | i);
        std::vector<float> probe(n_inputs);
        for (float& v : probe) v = small_nonzero(rng);
        for (int k = 0; k <= max_exponent; ++k) {
            const float v = static_cast<float>(std::pow(base, k));
            if (!std::isfinite(v)) break;
            probe[i] = v;
            const Observation ob = o.query(probe).layers[0][neuron];
            const Side s = saturation_side(map, ob.region);
            if (s != Side::none) {
                res.signs[i] = s == Side::right ? +1 : -1;
                res.maxvals[i] = v;
                res.reachable[i] = true;
                break;
            }
        }
    }
    return res;
}

LayerCalibration calibrate_layer_input_centric(Oracle& o, int layer, double base, int max_exponent) {
    if (layer != 0) throw AttackError("layer calibration requires the injectable first layer");
    const LayerSpec& l0 = o.model().layers[0];
    const RegionMap& map = activation_map(l0.activation);
    const int n = l0.n_neurons;

    LayerCalibration lc;
    lc.per_neuron.resize(n);
    for (CalibrationResult& r : lc.per_neuron) {
        r.signs.assign(l0.n_inputs, 0);
        r.maxvals.assign(l0.n_inputs, 0.0f);
        r.reachable.assign(l0.n_inputs, false);
    }

    const std::uint64_t q0 = o.query_count();
    std::vector<float> probe(l0.n_inputs, 0.0f);
    for (int i = 0; i < l0.n_inputs; ++i) {
        std::fill(probe.begin(), probe.end(), 0.0f);
        int unresolved = n;
        for (int k = 0; k <= max_exponent && unresolved > 0; ++k) {
            const float v = static_cast<float>(std::pow(base, k));
            if (!std::isfinite(v)) break;
            probe[i] = v;
            const QueryResult qr = o.query(probe);
            for (int nn = 0; nn < n; ++nn) {
                CalibrationResult& r = lc.per_neuron[nn];
                if (r.reachable[i]) continue;
                const Side s = saturation_side(map, qr.layers[0][nn].region);
                if (s != Side::none) {
                    r.signs[i] = s == Side::right ? +1 : -1;
                    r.maxvals[i] = v;
                    r.reachable[i] = true;
                    --unresolved;
                }
            }
        }
    }
    lc.queries = o.query_count() - q0;
    return lc;
}

// --- binary search ----------------------------------------------------------

ConvergenceSet binary_search_threshold(Oracle& o, int neuron, int dyn_index,
                                       std::vector<float> locked, float start, int max_depth,
                                       bool verify_certificate, std::uint64_t* check_failures) {
    const RegionMap& map = activation_map(o.model().layers[0].activation);
    auto observe = [&](float v) {
        locked[dyn_index] = v;
        return o.query(locked).layers[0][neuron];
    };

    const Observation obs_start = observe(start);
    const Side side = saturation_side(map, obs_start.region);
    if (side == Side::none) throw LostBracket("start value does not saturate the neuron");
    auto saturated = [&](const Observation& ob) {
        return saturation_side(map, ob.region) == side;
    };

    float sat_end = start;
    float free_end = 0.0f;
    if (saturated(observe(free_end))) {
        throw LostBracket("locked values saturate the neuron on their own");
    }

    int depth = 0;
    while (depth < max_depth && !keys_adjacent(sat_end, free_end)) {
        float mid = 0.5f * (sat_end + free_end);
        if (mid == sat_end || mid == free_end) {
            mid = bit_midpoint(std::min(sat_end, free_end), std::max(sat_end, free_end));
            if (mid == sat_end || mid == free_end) break;
        }
        ++depth;
        if (saturated(observe(mid))) {
            sat_end = mid;
        } else {
            free_end = mid;
        }
    }

    ConvergenceSet cs;
    cs.threshold = side == Side::right ? map.right_saturation_threshold()
                                       : map.left_saturation_threshold();
    cs.layer = 0;
    cs.neuron = neuron;
    cs.dyn_index = dyn_index;
    cs.depth_used = depth;
    cs.ulp_tight = keys_adjacent(sat_end, free_end);
    // the equation pairs the lower-region side of the bracket with the
    // threshold value (the greatest float of the lower region)
    const float lower_v = side == Side::right ? free_end : sat_end;
    const float upper_v = side == Side::right ? sat_end : free_end;
    cs.inputs = std::move(locked);
    cs.inputs[dyn_index] = lower_v;
    cs.upper_value = upper_v;

    if (verify_certificate) {
        // fresh query pair: the lower side must still observe below the
        // border and the upper side above it (for a left search the
        // saturated region is the lower one)
        std::vector<float> probe = cs.inputs;
        const bool low_sat = saturated(o.query(probe).layers[0][neuron]);
        probe[dyn_index] = cs.upper_value;
        const bool up_sat = saturated(o.query(probe).layers[0][neuron]);
        const bool ok = side == Side::right ? (!low_sat && up_sat) : (low_sat && !up_sat);
        if (!ok) {
            if (check_failures) ++*check_failures;
            throw LostBracket("bracket certificate failed re-verification");
        }
    }
    return cs;
}

namespace {

ConvergenceSet search_with_escalation(Oracle& o, int neuron, int dyn_index,
                                      const std::vector<float>& locked, float start, double base,
                                      int max_depth, bool verify, std::uint64_t* check_failures) {
    float s = start;
    for (int attempt = 0; attempt < 3; ++attempt) {
        try {
            return binary_search_threshold(o, neuron, dyn_index, locked, s, max_depth, verify,
                                           check_failures);
        } catch (const LostBracket& e) {
            const std::string_view what(e.what());
            if (what.find("does not saturate") == std::string_view::npos) throw;
            double next = static_cast<double>(s) * base;
            if (std::fabs(next) > kMaxFinite) next = std::copysign(kMaxFinite, next);
            if (static_cast<float>(next) == s) throw;
            s = static_cast<float>(next);
        }
    }
    throw LostBracket("saturation unreachable after escalation");
}

}  // namespace

std::vector<ConvergenceSet> collect_convergence_sets(Oracle& o, int neuron, int n_sets,
                                                     int max_depth, const CalibrationResult& calib,
                                                     const AttackConfig& cfg,
                                                     std::uint64_t* check_failures) {
    const LayerSpec& l0 = o.model().layers[0];
    std::vector<int> usable;
    for (int i = 0; i < l0.n_inputs; ++i) {
        if (calib.reachable[i]) usable.push_back(i);
    }
    if (usable.empty()) throw AttackError("neuron has no reachable input");

    std::vector<ConvergenceSet> sets;
    for (int s = 0; s < n_sets; ++s) {
        const int dyn = usable[s % usable.size()];
        // alternate the targeted side so both outer thresholds enter the
        // system; which probe sign reaches which side depends on the
        // calibrated weight sign
        const bool want_left = (s % 2) == 1;
        const bool positive_probe_reaches = want_left == (calib.signs[dyn] < 0);
        float start = calib.maxvals[dyn];
        if (!positive_probe_reaches) {
            // crossing to the other side may need more magnitude: the outer
            // boundaries are not symmetric
            const double escalated = -static_cast<double>(start) * cfg.base;
            start = static_cast<float>(std::fabs(escalated) > kMaxFinite
                                           ? std::copysign(kMaxFinite, escalated)
                                           : escalated);
        }
        for (int retry = 0; retry < 8; ++retry) {
            Rng rng = substream(cfg.seed, "locked-values", neuron_set_key(neuron, s, retry));
            std::vector<float> locked(l0.n_inputs);
            for (float& v : locked) v = static_cast<float>(rng.uniform(-1.0, 1.0));
            try {
                ConvergenceSet cs = search_with_escalation(o, neuron, dyn, locked, start, cfg.base,
                                                           max_depth, cfg.verify_certificates,
                                                           check_failures);
                sets.push_back(std::move(cs));
                break;
            } catch (const LostBracket&) {
                continue;
            }
        }
    }

    std::set<float> distinct;
    for (const ConvergenceSet& cs : sets) distinct.insert(cs.threshold.value);
    if (distinct.size() < 2) {
        throw InsufficientThresholdDiversity("all convergence sets share one threshold");
    }
    return sets;
}

// --- solving -----------------------------------------------------------------

SolveResult solve_neuron(const std::vector<ConvergenceSet>& sets) {
    if (sets.empty()) throw RankDeficient("no convergence sets");
    for (const ConvergenceSet& cs : sets) {
        if (!cs.sign_known) {
            throw AttackError("sign-ambiguous convergence sets cannot be solved");
        }
    }
    const int n_inputs = static_cast<int>(sets.front().inputs.size());
    const int p = n_inputs + 1;
    const int rows = static_cast<int>(sets.size());
    if (rows < p) throw RankDeficient("fewer convergence sets than unknowns");

    Eigen::MatrixXd a(rows, p);
    Eigen::VectorXd t(rows);
    for (int r = 0; r < rows; ++r) {
        for (int j = 0; j < n_inputs; ++j) a(r, j) = static_cast<double>(sets[r].inputs[j]);
        a(r, n_inputs) = 1.0;
        t(r) = static_cast<double>(sets[r].threshold.value);
    }

    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    const double cond = sv(0) / sv(p - 1);
    if (!(cond < 1e12)) throw RankDeficient("condition estimate beyond tolerance");
    const Eigen::VectorXd x = svd.solve(t);
    const Eigen::VectorXd res = a * x - t;

    SolveResult out;
    out.weights.assign(x.data(), x.data() + n_inputs);
    out.bias = x(n_inputs);
    out.residual_rms = std::sqrt(res.squaredNorm() / rows);
    out.residual_max = res.cwiseAbs().maxCoeff();
    out.condition = cond;
    return out;
}

// --- first-layer drivers -------------------------------------------------------

bool RecoveredLayer::solved(int neuron) const {
    return std::find(unsolved.begin(), unsolved.end(), neuron) == unsolved.end();
}

namespace {

RecoveredLayer make_layer_result(const LayerSpec& l0) {
    RecoveredLayer rec;
    rec.layer = 0;
    rec.n_inputs = l0.n_inputs;
    rec.n_neurons = l0.n_neurons;
    rec.weights.assign(l0.n_neurons, std::vector<double>(l0.n_inputs, 0.0));
    rec.biases.assign(l0.n_neurons, 0.0);
    rec.residual_rms.assign(l0.n_neurons, 0.0);
    rec.condition.assign(l0.n_neurons, 0.0);
    return rec;
}

}  // namespace

NeuronRecovery recover_single_neuron(Oracle& o, int neuron, const CalibrationResult& calib,
                                     const AttackConfig& cfg) {
    const LayerSpec& l0 = o.model().layers[0];
    NeuronRecovery out;
    out.neuron = neuron;
    const int p = l0.n_inputs + 1;
    try {
        const std::vector<ConvergenceSet> sets = collect_convergence_sets(
            o, neuron, p + cfg.extras, cfg.max_depth, calib, cfg, &out.check_failures);
        out.solve = solve_neuron(sets);
        out.ok = true;
    } catch (const AttackError& e) {
        out.reason = e.what();
    }
    return out;
}

RecoveredLayer recover_first_layer(Oracle& o, const AttackConfig& cfg) {
    if (!cfg.first_layer_injectable) {
        throw AttackError("first layer marked non-injectable; use the grid-search path");
    }
    const LayerSpec& l0 = o.model().layers[0];
    RecoveredLayer rec = make_layer_result(l0);

    const std::uint64_t q0 = o.query_count();
    const auto phases0 = o.queries_by_phase();

    o.set_phase("calibration");
    const LayerCalibration calib =
        calibrate_layer_input_centric(o, 0, cfg.base, cfg.max_exponent);

    o.set_phase("search");
    std::vector<NeuronRecovery> outcomes(l0.n_neurons);
    if (!cfg.parallel) {
        for (int n = 0; n < l0.n_neurons; ++n) {
            outcomes[n] = recover_single_neuron(o, n, calib.per_neuron[n], cfg);
        }
    } else {
        // independent per-neuron searches on per-worker oracles; the split
        // RNG substreams make the result bit-identical to the sequential
        // schedule, and per-worker counters merge into the accounting
        const unsigned workers =
            std::max(1u, std::min(std::thread::hardware_concurrency(), 8u));
        std::vector<std::future<std::pair<std::uint64_t, std::vector<NeuronRecovery>>>> futs;
        for (unsigned w = 0; w < workers; ++w) {
            futs.push_back(std::async(std::launch::async, [&, w] {
                Oracle worker(o.model(), o.mode(), o.layout());
                worker.set_phase("search");
                std::vector<NeuronRecovery> mine;
                for (int n = static_cast<int>(w); n < l0.n_neurons; n += static_cast<int>(workers)) {
                    mine.push_back(recover_single_neuron(worker, n, calib.per_neuron[n], cfg));
                }
                return std::make_pair(worker.query_count(), std::move(mine));
            }));
        }
        std::uint64_t parallel_queries = 0;
        for (auto& f : futs) {
            auto [q, mine] = f.get();
            parallel_queries += q;
            for (NeuronRecovery& oc : mine) outcomes[oc.neuron] = std::move(oc);
        }
        rec.queries_by_phase["search"] = parallel_queries;
    }

    for (int n = 0; n < l0.n_neurons; ++n) {
        const NeuronRecovery& oc = outcomes[n];
        rec.neuron_check_failures += oc.check_failures;
        if (oc.ok) {
            rec.weights[n] = oc.solve.weights;
            rec.biases[n] = oc.solve.bias;
            rec.residual_rms[n] = oc.solve.residual_rms;
            rec.condition[n] = oc.solve.condition;
        } else {
            rec.unsolved.push_back(n);
            rec.unsolved_reason.push_back(oc.reason);
        }
    }

    const auto phase_d = phase_delta(phases0, o.queries_by_phase());
    for (const auto& [k, v] : phase_d) rec.queries_by_phase[k] += v;
    rec.queries_used = (o.query_count() - q0);
    if (cfg.parallel) rec.queries_used += rec.queries_by_phase["search"];
    return rec;
}

// --- input-centric strategy ---------------------------------------------------

InputCentricPass input_centric_pass(Oracle& o, int dyn_index, double other_value,
                                    const AttackConfig& cfg, int probe_sign) {
    const LayerSpec& l0 = o.model().layers[0];
    const RegionMap& map = activation_map(l0.activation);
    const int n = l0.n_neurons;
    const double base = 2.0;  // power-of-two probes keep gap spans halving cleanly
    const int max_k = 127;

    InputCentricPass pass;
    pass.per_neuron.resize(n);

    std::vector<float> probe(l0.n_inputs, static_cast<float>(other_value));
    o.set_phase("calibration");
    const std::uint64_t q0 = o.query_count();

    // one-shot calibration across the whole layer
    const float sgn = probe_sign < 0 ? -1.0f : 1.0f;
    std::vector<Side> side(n, Side::none);
    float vmax = 0.0f;
    int unresolved = n;
    for (int k = 0; k <= max_k && unresolved > 0; ++k) {
        const float v = static_cast<float>(std::pow(base, k));
        probe[dyn_index] = sgn * v;
        const QueryResult qr = o.query(probe);
        for (int nn = 0; nn < n; ++nn) {
            if (side[nn] != Side::none) continue;
            const Side s = saturation_side(map, qr.layers[0][nn].region);
            if (s != Side::none) {
                side[nn] = s;
                --unresolved;
            }
        }
        vmax = v;
        if (unresolved == 0) break;
    }
    pass.calibrated_to = vmax;

    // the shared free end; neurons already saturated at 0 cannot bracket
    probe[dyn_index] = 0.0f;  // sign irrelevant at zero
    const QueryResult at_zero = o.query(probe);
    std::vector<bool> active(n, false);
    for (int nn = 0; nn < n; ++nn) {
        if (side[nn] == Side::none) continue;
        if (saturation_side(map, at_zero.layers[0][nn].region) == side[nn]) continue;
        active[nn] = true;
    }
    pass.calibration_queries = o.query_count() - q0;

    struct Bracket {
        float lo = 0.0f;  // unsaturated end
        float hi = 0.0f;  // saturated end
    };
    std::vector<Bracket> br(n, Bracket{0.0f, vmax});

    o.set_phase("search");
    const std::uint64_t s0 = o.query_count();
    int levels = 0;
    for (;;) {
        // group live neurons by their bracket: one query serves a whole gap
        std::map<std::pair<std::uint32_t, std::uint32_t>, std::vector<int>> gaps;
        for (int nn = 0; nn < n; ++nn) {
            if (!active[nn]) continue;
            if (br[nn].hi - br[nn].lo <= static_cast<float>(cfg.min_gap) ||
                keys_adjacent(br[nn].lo, br[nn].hi)) {
                // terminal: emit the equation
                ConvergenceSet cs;
                cs.layer = 0;
                cs.neuron = nn;
                cs.dyn_index = dyn_index;
                cs.threshold = side[nn] == Side::right ? map.right_saturation_threshold()
                                                       : map.left_saturation_threshold();
                cs.depth_used = levels;
                cs.ulp_tight = keys_adjacent(br[nn].lo, br[nn].hi);
                cs.inputs.assign(l0.n_inputs, static_cast<float>(other_value));
                const float lower_v = side[nn] == Side::right ? br[nn].lo : br[nn].hi;
                const float upper_v = side[nn] == Side::right ? br[nn].hi : br[nn].lo;
                cs.inputs[dyn_index] = sgn * lower_v;
                cs.upper_value = sgn * upper_v;
                pass.per_neuron[nn] = std::move(cs);
                active[nn] = false;
                continue;
            }
            gaps[{float_bits(br[nn].lo), float_bits(br[nn].hi)}].push_back(nn);
        }
        if (gaps.empty()) break;
        ++levels;
        pass.gaps_per_level.push_back(static_cast<int>(gaps.size()));
        for (const auto& [bounds, members] : gaps) {
            const float lo = float_from_bits(bounds.first);
            const float hi = float_from_bits(bounds.second);
            float mid = 0.5f * (lo + hi);
            if (mid == lo || mid == hi) mid = bit_midpoint(std::min(lo, hi), std::max(lo, hi));
            probe[dyn_index] = sgn * mid;
            const QueryResult qr = o.query(probe);
            for (int nn : members) {
                if (saturation_side(map, qr.layers[0][nn].region) == side[nn]) {
                    br[nn].hi = mid;
                } else {
                    br[nn].lo = mid;
                }
            }
        }
    }
    pass.search_queries = o.query_count() - s0;
    return pass;
}

RecoveredLayer input_centric_recover(Oracle& o, const AttackConfig& cfg, std::ostream* log) {
    const LayerSpec& l0 = o.model().layers[0];
    RecoveredLayer rec = make_layer_result(l0);

    const std::uint64_t q0 = o.query_count();
    const auto phases0 = o.queries_by_phase();

    const int p = l0.n_inputs + 1;
    const int passes = p + cfg.extras;  // one equation per neuron per pass
    std::vector<std::vector<ConvergenceSet>> per_neuron_sets(l0.n_neurons);

    for (int pass_idx = 0; pass_idx < passes; ++pass_idx) {
        const int dyn = pass_idx % l0.n_inputs;
        // the second sweep over the inputs probes the opposite direction so
        // every neuron contributes both outer thresholds to its system
        const int sign = (pass_idx / l0.n_inputs) % 2 == 0 ? +1 : -1;
        Rng rng = substream(cfg.seed, "other-value", static_cast<std::uint64_t>(pass_idx));
        const double other = rng.uniform(0.005, 0.05);
        InputCentricPass pass = input_centric_pass(o, dyn, other, cfg, sign);
        if (log) {
            *log << "equation " << (pass_idx + 1) << '/' << passes << " / other value " << other
                 << " / input " << dyn << (sign < 0 ? " (negated)" : "") << '\n';
            *log << "  calibrated in " << pass.calibration_queries << " executions to "
                 << pass.calibrated_to << '\n';
            double span = pass.calibrated_to;
            for (std::size_t lvl = 0; lvl < pass.gaps_per_level.size(); ++lvl) {
                *log << "  iteration " << lvl << " / gaps " << pass.gaps_per_level[lvl]
                     << " / span " << span << '\n';
                span *= 0.5;
            }
            *log << "  pass complete in "
                 << (pass.calibration_queries + pass.search_queries) << " executions\n";
        }
        for (int nn = 0; nn < l0.n_neurons; ++nn) {
            if (pass.per_neuron[nn]) per_neuron_sets[nn].push_back(std::move(*pass.per_neuron[nn]));
        }
    }

    for (int nn = 0; nn < l0.n_neurons; ++nn) {
        try {
            if (static_cast<int>(per_neuron_sets[nn].size()) < p) {
                throw RankDeficient("fewer convergence sets than unknowns");
            }
            std::set<float> distinct;
            for (const auto& cs : per_neuron_sets[nn]) distinct.insert(cs.threshold.value);
            if (distinct.size() < 2) {
                throw InsufficientThresholdDiversity("all sets share one threshold");
            }
            const SolveResult sr = solve_neuron(per_neuron_sets[nn]);
            rec.weights[nn] = sr.weights;
            rec.biases[nn] = sr.bias;
            rec.residual_rms[nn] = sr.residual_rms;
            rec.condition[nn] = sr.condition;
        } catch (const AttackError& e) {
            rec.unsolved.push_back(nn);
            rec.unsolved_reason.push_back(e.what());
        }
    }

    const auto phase_d = phase_delta(phases0, o.queries_by_phase());
    for (const auto& [k, v] : phase_d) rec.queries_by_phase[k] += v;
    rec.queries_used = o.query_count() - q0;
    return rec;
}

// --- deeper layers --------------------------------------------------------------

SolvedLayer solved_from_truth(const ModelSpec& m, int layer) {
    SolvedLayer s;
    s.activation = m.layers[layer].activation;
    s.n_inputs = m.layers[layer].n_inputs;
    s.n_neurons = m.layers[layer].n_neurons;
    s.weights.assign(s.n_neurons, std::vector<double>(s.n_inputs, 0.0));
    s.biases.assign(s.n_neurons, 0.0);
    for (int n = 0; n < s.n_neurons; ++n) {
        for (int j = 0; j < s.n_inputs; ++j) s.weights[n][j] = m.weight(layer, n, j);
        s.biases[n] = m.bias(layer, n);
    }
    return s;
}

SolvedLayer solved_from_recovered(const RecoveredLayer& rec, const ActivationKind& kind) {
    SolvedLayer s;
    s.activation = kind;
    s.n_inputs = rec.n_inputs;
    s.n_neurons = rec.n_neurons;
    s.weights = rec.weights;
    s.biases = rec.biases;
    return s;
}

namespace {

double apply_activation(Activation a, double x) {
    switch (a) {
        case Activation::exponential: return std::exp(x);
        case Activation::sigmoid: return 1.0 / (1.0 + std::exp(-x));
        case Activation::tanh: return std::tanh(x);
        case Activation::relu: return x > 0.0 ? x : 0.0;
    }
    return x;
}

}  // namespace

std::vector<double> solved_forward(const std::vector<SolvedLayer>& solved,
                                   std::span<const double> input) {
    std::vector<double> cur(input.begin(), input.end());
    for (const SolvedLayer& l : solved) {
        if (static_cast<int>(cur.size()) != l.n_inputs) {
            throw AttackError("solved_forward: arity mismatch");
        }
        std::vector<double> next(l.n_neurons, 0.0);
        for (int n = 0; n < l.n_neurons; ++n) {
            double acc = 0.0;
            for (int j = 0; j < l.n_inputs; ++j) acc += l.weights[n][j] * cur[j];
            next[n] = apply_activation(l.activation.fn, acc + l.biases[n]);
        }
        cur.swap(next);
    }
    return cur;
}

std::vector<double> unwrap_layers(const std::vector<SolvedLayer>& solved,
                                  std::span<const double> target) {
    std::vector<double> t(target.begin(), target.end());
    for (auto it = solved.rbegin(); it != solved.rend(); ++it) {
        const SolvedLayer& l = *it;
        if (static_cast<int>(t.size()) != l.n_neurons) {
            throw AttackError("unwrap: target arity mismatch");
        }
        const auto inv = invertible_on(l.activation.fn);
        if (!inv) throw TargetUnreachable("activation has no inverse");
        Eigen::VectorXd p(l.n_neurons);
        for (int n = 0; n < l.n_neurons; ++n) {
            if (!inv->contains(t[n])) {
                throw TargetUnreachable("target outside the activation's output range");
            }
            p(n) = inverse_activation(l.activation.fn, t[n]) - l.biases[n];
        }
        Eigen::MatrixXd w(l.n_neurons, l.n_inputs);
        for (int n = 0; n < l.n_neurons; ++n) {
            for (int j = 0; j < l.n_inputs; ++j) w(n, j) = l.weights[n][j];
        }
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(w, Eigen::ComputeThinU | Eigen::ComputeThinV);
        const Eigen::VectorXd x = svd.solve(p);
        t.assign(x.data(), x.data() + l.n_inputs);
    }
    return t;
}

std::vector<ConvergenceSet> grid_search_deeper(Oracle& o, const std::vector<SolvedLayer>& solved,
                                               int layer_idx, int neuron, double resolution,
                                               double span, const AttackConfig& cfg) {
    if (static_cast<int>(solved.size()) != layer_idx) {
        throw AttackError("grid search requires every earlier layer solved");
    }
    const LayerSpec& target_layer = o.model().layers[layer_idx];
    const RegionMap& map = activation_map(target_layer.activation);
    if (resolution <= 0.0 || span <= 0.0) throw AttackError("grid search: bad resolution/span");

    // locked target values stay inside what the previous activation can emit
    double lo_bound = -span;
    double hi_bound = span;
    if (layer_idx > 0) {
        const OutputRange prev = output_range(solved.back().activation.fn);
        lo_bound = std::max(lo_bound, prev.lo + 1e-3);
        hi_bound = std::min(hi_bound, prev.hi - 1e-3);
        if (lo_bound >= hi_bound) throw NoClassChange("previous layer's range admits no scan");
    }

    Rng rng = substream(cfg.seed, "grid-locked",
                        (static_cast<std::uint64_t>(layer_idx) << 24) | static_cast<std::uint64_t>(neuron));
    std::vector<double> locked(target_layer.n_inputs);
    for (double& v : locked) v = rng.uniform(std::max(lo_bound, -1.0), std::min(hi_bound, 1.0));

    auto observe_target = [&](std::vector<double> target_vals) {
        const std::vector<double> x =
            layer_idx > 0 ? unwrap_layers(solved, target_vals) : target_vals;
        std::vector<float> xf(x.begin(), x.end());
        const QueryResult qr = o.query(xf);
        // the achieved layer inputs, per the attacker's solved prefix
        std::vector<double> achieved =
            layer_idx > 0 ? solved_forward(solved, x) : std::move(target_vals);
        return std::make_pair(qr.layers[layer_idx][neuron], std::move(achieved));
    };

    std::vector<ConvergenceSet> sets;
    for (int dyn = 0; dyn < target_layer.n_inputs; ++dyn) {
        // scan from +span down to -span at the chosen resolution
        std::vector<double> ds;
        for (double d = hi_bound; d >= lo_bound; d -= resolution) ds.push_back(d);
        if (ds.size() < 2) continue;

        std::optional<Observation> prev_obs;
        double prev_d = 0.0;
        for (double d : ds) {
            std::vector<double> target = locked;
            target[dyn] = d;
            auto [obs, achieved] = observe_target(target);
            if (prev_obs && !(obs == *prev_obs)) {
                // bisect the pair to a tight border in d
                double d_hi = prev_d, d_lo = d;  // d_hi has prev_obs, d_lo has obs
                Observation hi_obs = *prev_obs;
                for (int it = 0; it < 60; ++it) {
                    const double mid = 0.5 * (d_hi + d_lo);
                    if (mid == d_hi || mid == d_lo) break;
                    std::vector<double> tmid = locked;
                    tmid[dyn] = mid;
                    auto [mobs, mach] = observe_target(tmid);
                    if (mobs == hi_obs) d_hi = mid; else d_lo = mid;
                }
                std::vector<double> t_low = locked;
                t_low[dyn] = d_lo;
                auto [obs_low, achieved_low] = observe_target(t_low);
                std::vector<double> t_hi = locked;
                t_hi[dyn] = d_hi;
                auto [obs_hi_check, achieved_hi] = observe_target(t_hi);

                ConvergenceSet cs;
                cs.layer = layer_idx;
                cs.neuron = neuron;
                cs.dyn_index = dyn;
                cs.sign_known = false;
                cs.inputs.assign(achieved_low.begin(), achieved_low.end());
                // both bracket ends in achieved layer-input coordinates
                cs.upper_value = static_cast<float>(achieved_hi[dyn]);
                // without sign knowledge the class pair only pins a set of
                // mirrored candidate borders
                for (const Threshold& th : map.thresholds()) {
                    const RegionId below = map.observable_for(th.below);
                    const RegionId above = map.observable_for(th.above);
                    const bool match = (below == obs_low.region && above == hi_obs.region) ||
                                       (below == hi_obs.region && above == obs_low.region);
                    if (match) cs.candidate_thresholds.push_back(th.value);
                }
                if (!cs.candidate_thresholds.empty()) {
                    cs.threshold.value = cs.candidate_thresholds.front();
                    cs.threshold.fn_kind = map.kind();
                    sets.push_back(std::move(cs));
                }
            }
            prev_obs = obs;
            prev_d = d;
        }
    }
    if (sets.empty()) throw NoClassChange("grid scan saw a single instruction-count class");
    return sets;
}

}  // namespace stepleak
