#include "commands.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "stepleak/rng.hpp"

namespace stepleak::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

std::string with_commas(std::int64_t v) {
    std::string digits = std::to_string(v);
    std::string out;
    int place = 0;
    for (auto it = digits.rbegin(); it != digits.rend(); ++it) {
        if (place && place % 3 == 0 && *it != '-') out.push_back(',');
        out.push_back(*it);
        ++place;
    }
    std::reverse(out.begin(), out.end());
    return out;
}

std::string f64_hex(double v) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(std::bit_cast<std::uint64_t>(v)));
    return buf;
}

double f64_from_hex(const std::string& s) {
    return std::bit_cast<double>(static_cast<std::uint64_t>(std::stoull(s, nullptr, 16)));
}

std::uint64_t fnv_text(const std::string& text) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::string region_map_hash(LeakFnKind kind) {
    std::ostringstream os;
    region_map_for(kind).export_text(os);
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv_text(os.str())));
    return buf;
}

std::string file_hash(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv_text(ss.str())));
    return buf;
}

json config_json(const AttackConfig& c) {
    return json{{"depth", c.max_depth},
                {"extras", c.extras},
                {"base", c.base},
                {"max_exponent", c.max_exponent},
                {"min_gap", c.min_gap},
                {"strategy", c.strategy},
                {"seed", c.seed},
                {"verify_certificates", c.verify_certificates},
                {"parallel", c.parallel},
                {"first_layer_injectable", c.first_layer_injectable},
                {"oracle", std::string(oracle_mode_name(c.oracle_mode))}};
}

void write_recovered_json(const RecoveredLayer& rec, const std::string& path) {
    json j;
    j["layer"] = rec.layer;
    j["n_inputs"] = rec.n_inputs;
    j["n_neurons"] = rec.n_neurons;
    j["weights"] = json::array();
    j["biases"] = json::array();
    for (int n = 0; n < rec.n_neurons; ++n) {
        json row = json::array();
        for (double w : rec.weights[n]) row.push_back(f64_hex(w));
        j["weights"].push_back(std::move(row));
        j["biases"].push_back(f64_hex(rec.biases[n]));
    }
    j["residual_rms"] = rec.residual_rms;
    j["condition"] = rec.condition;
    j["unsolved"] = json::array();
    for (std::size_t i = 0; i < rec.unsolved.size(); ++i) {
        j["unsolved"].push_back({{"neuron", rec.unsolved[i]}, {"reason", rec.unsolved_reason[i]}});
    }
    std::ofstream os(path);
    os << j.dump(1) << '\n';
}

std::string sign_row(const CalibrationResult& c) {
    std::string s;
    for (std::size_t i = 0; i < c.signs.size(); ++i) {
        if (i) s += ' ';
        s += !c.reachable[i] ? '?' : (c.signs[i] > 0 ? '+' : '-');
    }
    return s;
}

std::string maxval_row(const CalibrationResult& c) {
    std::ostringstream s;
    for (std::size_t i = 0; i < c.maxvals.size(); ++i) {
        if (i) s << ' ';
        if (c.reachable[i]) s << c.maxvals[i]; else s << '?';
    }
    return s.str();
}

struct Checkpoint {
    std::string run_hash;
    LayerCalibration calibration;
    bool has_calibration = false;
    std::map<int, NeuronRecovery> neurons;
    std::map<int, std::uint64_t> neuron_queries;

    static Checkpoint load(const std::string& path, int n_inputs);
    void save(const std::string& path, int n_inputs) const;
};

Checkpoint Checkpoint::load(const std::string& path, int n_inputs) {
    Checkpoint cp;
    std::ifstream is(path);
    if (!is) return cp;
    json j;
    is >> j;
    cp.run_hash = j.value("run_hash", "");
    if (j.contains("calibration")) {
        cp.has_calibration = true;
        for (const auto& jn : j["calibration"]) {
            CalibrationResult r;
            for (const auto& v : jn["signs"]) r.signs.push_back(v.get<int>());
            for (const auto& v : jn["maxvals"])
                r.maxvals.push_back(float_from_bits(std::stoul(v.get<std::string>(), nullptr, 16)));
            for (const auto& v : jn["reachable"]) r.reachable.push_back(v.get<bool>());
            if (static_cast<int>(r.signs.size()) != n_inputs) {
                throw AttackError("checkpoint: calibration arity mismatch");
            }
            cp.calibration.per_neuron.push_back(std::move(r));
        }
        cp.calibration.queries = j.value("calibration_queries", std::uint64_t{0});
    }
    if (j.contains("neurons")) {
        for (const auto& [key, jn] : j["neurons"].items()) {
            NeuronRecovery nr;
            nr.neuron = std::stoi(key);
            nr.ok = jn.value("ok", false);
            nr.reason = jn.value("reason", "");
            nr.check_failures = jn.value("check_failures", std::uint64_t{0});
            if (nr.ok) {
                for (const auto& v : jn["weights"]) nr.solve.weights.push_back(f64_from_hex(v.get<std::string>()));
                nr.solve.bias = f64_from_hex(jn["bias"].get<std::string>());
                nr.solve.residual_rms = jn.value("residual_rms", 0.0);
                nr.solve.residual_max = jn.value("residual_max", 0.0);
                nr.solve.condition = jn.value("condition", 0.0);
            }
            cp.neuron_queries[nr.neuron] = jn.value("queries", std::uint64_t{0});
            cp.neurons[nr.neuron] = std::move(nr);
        }
    }
    return cp;
}

void Checkpoint::save(const std::string& path, int n_inputs) const {
    (void)n_inputs;
    json j;
    j["run_hash"] = run_hash;
    if (has_calibration) {
        j["calibration"] = json::array();
        for (const CalibrationResult& r : calibration.per_neuron) {
            json jn;
            jn["signs"] = r.signs;
            jn["maxvals"] = json::array();
            char buf[16];
            for (float v : r.maxvals) {
                std::snprintf(buf, sizeof buf, "%08x", float_bits(v));
                jn["maxvals"].push_back(std::string(buf));
            }
            jn["reachable"] = json::array();
            for (bool b : r.reachable) jn["reachable"].push_back(b);
            j["calibration"].push_back(std::move(jn));
        }
        j["calibration_queries"] = calibration.queries;
    }
    j["neurons"] = json::object();
    for (const auto& [n, nr] : neurons) {
        json jn;
        jn["ok"] = nr.ok;
        jn["reason"] = nr.reason;
        jn["check_failures"] = nr.check_failures;
        const auto qit = neuron_queries.find(n);
        jn["queries"] = qit == neuron_queries.end() ? 0 : qit->second;
        if (nr.ok) {
            jn["weights"] = json::array();
            for (double w : nr.solve.weights) jn["weights"].push_back(f64_hex(w));
            jn["bias"] = f64_hex(nr.solve.bias);
            jn["residual_rms"] = nr.solve.residual_rms;
            jn["residual_max"] = nr.solve.residual_max;
            jn["condition"] = nr.solve.condition;
        }
        j["neurons"][std::to_string(n)] = std::move(jn);
    }
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp);
        os << j.dump(1) << '\n';
    }
    fs::rename(tmp, path);
}

}  // namespace

std::vector<float> parse_csv_floats(const std::string& csv) {
    std::vector<float> out;
    std::istringstream is(csv);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        if (tok.empty()) continue;
        out.push_back(std::stof(tok));
    }
    return out;
}

std::vector<int> parse_depth_list(const std::string& text) {
    // "5:55:5" (start:stop:step) or "5,10,20"
    std::vector<int> out;
    if (text.find(':') != std::string::npos) {
        int start = 0, stop = 0, step = 1;
        if (std::sscanf(text.c_str(), "%d:%d:%d", &start, &stop, &step) < 2 || step <= 0) {
            throw std::invalid_argument("bad depth range: " + text);
        }
        for (int d = start; d <= stop; d += step) out.push_back(d);
    } else {
        std::istringstream is(text);
        std::string tok;
        while (std::getline(is, tok, ',')) {
            if (!tok.empty()) out.push_back(std::stoi(tok));
        }
    }
    if (out.empty()) throw std::invalid_argument("empty depth list");
    return out;
}

int cmd_gen_model(const std::string& preset, std::uint64_t seed, const std::string& out_path,
                  std::ostream& out, std::ostream& err) {
    try {
        const ModelSpec m = preset_model(preset, seed);
        save_model(m, out_path);
        std::int64_t params = 0;
        for (std::size_t k = 0; k < m.layers.size(); ++k) {
            params += static_cast<std::int64_t>(m.weights[k].size() + m.biases[k].size());
        }
        out << "wrote " << preset << " model (" << params << " parameters, seed " << seed
            << ") to " << out_path << '\n';
        return 0;
    } catch (const ModelError& e) {
        err << "gen-model: " << e.what() << '\n';
        err << "usage: stepleak gen-model {insurance|mult|mnist} <seed> <out.json>\n";
        return 2;
    } catch (const std::exception& e) {
        err << "gen-model: " << e.what() << '\n';
        return 1;
    }
}

int cmd_trace(const std::string& model_path, const std::string& input_csv,
              const std::string& out_trace, std::ostream& out, std::ostream& err) {
    try {
        const ModelSpec m = load_model(model_path);
        const std::vector<float> input = parse_csv_floats(input_csv);
        const InferResult inf = infer(m, input);
        const TraceLog t = emit_trace(inf.log, PageLayout{});
        std::ofstream os(out_trace);
        if (!os) throw TraceError("cannot write " + out_trace);
        write_trace(t, os);
        out << "wrote " << t.runs.size() << " runs to " << out_trace << '\n';
        return 0;
    } catch (const std::exception& e) {
        err << "trace: " << e.what() << '\n';
        return 1;
    }
}

int cmd_parse(const std::string& trace_path, const std::string& model_path, std::ostream& out,
              std::ostream& err) {
    try {
        const ModelSpec m = load_model(model_path);
        std::ifstream is(trace_path);
        if (!is) throw TraceError("cannot open " + trace_path);
        const TraceLog t = read_trace(is);
        const ParsedTrace parsed = parse_trace(t, PageLayout{}, m.layers);
        for (std::size_t k = 0; k < parsed.layers.size(); ++k) {
            out << "layer " << k << ':';
            for (const auto& neuron : parsed.layers[k]) {
                out << ' ';
                for (std::size_t e = 0; e < neuron.size(); ++e) {
                    if (e) out << '+';
                    out << neuron[e].label;
                }
            }
            out << '\n';
        }
        return 0;
    } catch (const std::exception& e) {
        err << "parse: " << e.what() << '\n';
        return 1;
    }
}

void AttackOverrides::apply(AttackConfig& cfg) const {
    if (depth) cfg.max_depth = *depth;
    if (extras) cfg.extras = *extras;
    if (strategy) cfg.strategy = *strategy;
    if (oracle) cfg.oracle_mode = oracle_mode_from_name(*oracle);
    if (min_gap) cfg.min_gap = *min_gap;
    if (seed) cfg.seed = *seed;
}

std::string AttackOverrides::fingerprint() const {
    std::ostringstream os;
    if (depth) os << "d" << *depth;
    if (extras) os << "e" << *extras;
    if (strategy) os << "s" << *strategy;
    if (oracle) os << "o" << *oracle;
    if (min_gap) os << "g" << *min_gap;
    if (seed) os << "r" << *seed;
    return os.str();
}

int cmd_attack(const std::string& model_path, const std::string& config_path,
               const std::string& out_dir, std::ostream& out, std::ostream& err,
               const AttackOverrides& overrides) {
    const auto t0 = Clock::now();
    try {
        const ModelSpec model = load_model(model_path);
        AttackConfig cfg = AttackConfig::from_json_file(config_path);
        overrides.apply(cfg);
        fs::create_directories(out_dir);
        const std::string recovered_path = out_dir + "/recovered.json";
        const std::string errors_path = out_dir + "/errors.csv";
        const std::string checkpoint_path = out_dir + "/checkpoint.json";
        const std::string manifest_path = out_dir + "/manifest.json";

        Oracle oracle(model, cfg.oracle_mode);
        const std::string run_hash =
            file_hash(model_path) + "-" + file_hash(config_path) + overrides.fingerprint();

        RecoveredLayer rec;
        bool resumed = false;

        if (cfg.strategy == "input") {
            rec = input_centric_recover(oracle, cfg, &out);
        } else if (cfg.strategy == "neuron") {
            const LayerSpec& l0 = model.layers[0];
            Checkpoint cp = Checkpoint::load(checkpoint_path, l0.n_inputs);
            if (!cp.run_hash.empty() && cp.run_hash != run_hash) {
                cp = Checkpoint{};  // checkpoint from a different run; start over
            }
            resumed = cp.has_calibration || !cp.neurons.empty();
            cp.run_hash = run_hash;

            if (!cp.has_calibration) {
                oracle.set_phase("calibration");
                cp.calibration = calibrate_layer_input_centric(oracle, 0, cfg.base, cfg.max_exponent);
                cp.has_calibration = true;
                cp.save(checkpoint_path, l0.n_inputs);
            }

            oracle.set_phase("search");
            rec.layer = 0;
            rec.n_inputs = l0.n_inputs;
            rec.n_neurons = l0.n_neurons;
            rec.weights.assign(l0.n_neurons, std::vector<double>(l0.n_inputs, 0.0));
            rec.biases.assign(l0.n_neurons, 0.0);
            rec.residual_rms.assign(l0.n_neurons, 0.0);
            rec.condition.assign(l0.n_neurons, 0.0);

            for (int n = 0; n < l0.n_neurons; ++n) {
                auto it = cp.neurons.find(n);
                if (it == cp.neurons.end()) {
                    const std::uint64_t q_before = oracle.query_count();
                    NeuronRecovery nr = recover_single_neuron(oracle, n, cp.calibration.per_neuron[n], cfg);
                    cp.neuron_queries[n] = oracle.query_count() - q_before;
                    it = cp.neurons.emplace(n, std::move(nr)).first;
                    cp.save(checkpoint_path, l0.n_inputs);

                    const double secs =
                        std::chrono::duration<double>(Clock::now() - t0).count();
                    out << "[ neuron " << n << " ]\n";
                    out << "  stats: " << secs << " s since start / " << oracle.query_count()
                        << " executions so far / " << oracle.incomplete_logs()
                        << " incomplete logs / " << oracle.nondeterministic_steps()
                        << " non-deterministic steps / " << it->second.check_failures
                        << " neuron-check failures\n";
                    out << "  function: " << leakfn_name(l0.activation.leak)
                        << " / strategy: seeded binary search\n";
                    out << "  calibration signs:   " << sign_row(cp.calibration.per_neuron[n]) << '\n';
                    out << "  calibration maxvals: " << maxval_row(cp.calibration.per_neuron[n]) << '\n';
                    if (it->second.ok) {
                        out << "  solved, residual rms " << it->second.solve.residual_rms << '\n';
                    } else {
                        out << "  unsolved: " << it->second.reason << '\n';
                    }
                    out << "Checkpoint saved.\n";
                }
                const NeuronRecovery& nr = it->second;
                rec.neuron_check_failures += nr.check_failures;
                if (nr.ok) {
                    rec.weights[n] = nr.solve.weights;
                    rec.biases[n] = nr.solve.bias;
                    rec.residual_rms[n] = nr.solve.residual_rms;
                    rec.condition[n] = nr.solve.condition;
                } else {
                    rec.unsolved.push_back(n);
                    rec.unsolved_reason.push_back(nr.reason);
                }
            }
            // cumulative accounting: work done before an interruption counts
            // once, so a resumed run reports the same totals
            std::uint64_t search_total = 0;
            for (const auto& [n, q] : cp.neuron_queries) search_total += q;
            rec.queries_used = cp.calibration.queries + search_total;
            rec.queries_by_phase["calibration"] = cp.calibration.queries;
            rec.queries_by_phase["search"] = search_total;
        } else {
            err << "attack: unknown strategy '" << cfg.strategy << "'\n";
            return 2;
        }

        write_recovered_json(rec, recovered_path);

        const ErrorStats stats = layer_error_stats(rec, model);
        SweepRow row{cfg.max_depth, stats, rec.queries_used, 0.0};
        for (double r : rec.residual_rms) row.max_residual_rms = std::max(row.max_residual_rms, r);
        {
            std::ofstream os(errors_path);
            write_sweep_csv(std::span<const SweepRow>{&row, 1}, os);
        }

        json manifest;
        manifest["tool"] = "stepleak";
        manifest["command"] = "attack";
        manifest["model"] = model_path;
        manifest["model_file_fnv"] = file_hash(model_path);
        manifest["config"] = config_json(cfg);
        manifest["region_maps"] = json::object();
        for (const LayerSpec& l : model.layers) {
            manifest["region_maps"][std::string(leakfn_name(l.activation.leak))] =
                region_map_hash(l.activation.leak);
        }
        manifest["outputs"] = {{"recovered", recovered_path},
                               {"errors", errors_path},
                               {"checkpoint", checkpoint_path}};
        manifest["queries"] = {{"total", rec.queries_used},
                               {"by_phase", rec.queries_by_phase},
                               {"incomplete_logs", oracle.incomplete_logs()},
                               {"nondeterministic_steps", oracle.nondeterministic_steps()},
                               {"neuron_check_failures", rec.neuron_check_failures}};
        manifest["unsolved"] = rec.unsolved;
        manifest["resumed"] = resumed;
        manifest["wall_clock_s"] = std::chrono::duration<double>(Clock::now() - t0).count();
        {
            std::ofstream os(manifest_path);
            os << manifest.dump(1) << '\n';
        }

        out << "recovered " << (rec.n_neurons - static_cast<int>(rec.unsolved.size())) << '/'
            << rec.n_neurons << " neurons in " << rec.queries_used << " executions";
        out << " (avg abs err " << stats.avg_abs << ")\n";
        return rec.unsolved.empty() ? 0 : 3;
    } catch (const std::exception& e) {
        err << "attack: " << e.what() << '\n';
        return 1;
    }
}

int cmd_sweep(const std::string& model_path, const std::vector<int>& depths,
              const std::string& out_csv, const AttackConfig& base_cfg, std::ostream& out,
              std::ostream& err) {
    try {
        const ModelSpec model = load_model(model_path);
        std::vector<SweepRow> rows;
        for (int depth : depths) {
            AttackConfig cfg = base_cfg;
            cfg.max_depth = depth;
            Oracle oracle(model, cfg.oracle_mode);
            const RecoveredLayer rec = cfg.strategy == "input"
                                           ? input_centric_recover(oracle, cfg)
                                           : recover_first_layer(oracle, cfg);
            SweepRow row{depth, layer_error_stats(rec, model), rec.queries_used, 0.0};
            for (double r : rec.residual_rms) row.max_residual_rms = std::max(row.max_residual_rms, r);
            rows.push_back(row);
            out << "depth " << depth << ": avg abs err " << row.stats.avg_abs << ", "
                << row.queries << " executions\n";
        }
        std::ofstream os(out_csv);
        if (!os) throw AttackError("cannot write " + out_csv);
        write_sweep_csv(rows, os);
        out << "wrote " << rows.size() << " rows to " << out_csv << '\n';
        return 0;
    } catch (const std::exception& e) {
        err << "sweep: " << e.what() << '\n';
        return 1;
    }
}

int cmd_budget(std::int64_t P, std::int64_t N, std::int64_t S, std::int64_t D, std::int64_t extras,
               bool mnist_reference, std::ostream& out, std::ostream& err) {
    try {
        const QueryBudget b = query_budget_estimate(P, N, S, D, extras);
        out << "Q = (P+extras)*N*S = (" << P << '+' << extras << ")*" << N << '*' << S << " = "
            << with_commas(b.Q) << '\n';
        out << "C = (P-1)*D = " << with_commas(b.C) << '\n';
        out << "Q+C = " << with_commas(b.Q + b.C) << '\n';
        if (mnist_reference) {
            const ReferenceBudgets r = mnist_reference_budgets();
            out << "reference projections (784x128 first layer):\n";
            out << "  neuron-centric full depth:       " << with_commas(r.neuron_centric_full_depth)
                << '\n';
            out << "  input-centric with calibration:  "
                << with_commas(r.input_centric_with_calibration) << '\n';
            out << "  100-queries-per-parameter:       " << with_commas(r.per_parameter_baseline)
                << '\n';
        }
        return 0;
    } catch (const std::exception& e) {
        err << "budget: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace stepleak::cli
