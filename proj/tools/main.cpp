#include <iostream>

#include <CLI11.hpp>

#include "commands.hpp"

// Flags mirror environment variables with the STEPLEAK_ prefix
// (e.g. --seed / STEPLEAK_SEED).

int main(int argc, char** argv) {
    using namespace stepleak;

    CLI::App app{"instruction-count leakage simulator and weight recovery toolkit"};
    app.require_subcommand(1);

    // gen-model
    std::string preset, out_path = "model.json";
    std::uint64_t seed = 1;
    auto* gen = app.add_subcommand("gen-model", "write a preset victim model");
    gen->add_option("preset", preset, "insurance|mult|mnist")->required();
    gen->add_option("seed", seed, "weight seed")->envname("STEPLEAK_SEED");
    gen->add_option("out", out_path, "output model file");

    // trace
    std::string model_path, input_csv, trace_path = "trace.txt";
    auto* tr = app.add_subcommand("trace", "run one inference and write its page trace");
    tr->add_option("model", model_path, "model file")->required();
    tr->add_option("input", input_csv, "comma-separated input vector")->required();
    tr->add_option("--out", trace_path, "trace output file")->envname("STEPLEAK_OUT");

    // parse
    std::string parse_trace_path, parse_model_path;
    auto* pa = app.add_subcommand("parse", "interpret a trace into per-neuron regions");
    pa->add_option("trace", parse_trace_path, "trace file")->required();
    pa->add_option("model", parse_model_path, "model file (architecture source)")->required();

    // attack
    std::string attack_model, attack_config, attack_out = "attack-out";
    cli::AttackOverrides ov;
    int ov_depth = 0, ov_extras = -1;
    double ov_min_gap = -1.0;
    std::string ov_strategy, ov_oracle;
    std::uint64_t ov_seed = 0;
    auto* at = app.add_subcommand("attack", "recover first-layer parameters");
    at->add_option("model", attack_model, "model file")->required();
    at->add_option("config", attack_config, "attack config json")->required();
    at->add_option("--out", attack_out, "output directory")->envname("STEPLEAK_OUT");
    auto* at_depth = at->add_option("--depth", ov_depth, "override: binary search depth")
                         ->envname("STEPLEAK_DEPTH");
    auto* at_extras = at->add_option("--extras", ov_extras, "override: extra convergence sets")
                          ->envname("STEPLEAK_EXTRAS");
    auto* at_strategy = at->add_option("--strategy", ov_strategy, "override: neuron|input")
                            ->envname("STEPLEAK_STRATEGY");
    auto* at_oracle = at->add_option("--oracle", ov_oracle, "override: direct|trace")
                          ->envname("STEPLEAK_ORACLE");
    auto* at_gap = at->add_option("--min-gap", ov_min_gap, "override: input-centric gap size")
                       ->envname("STEPLEAK_MIN_GAP");
    auto* at_seed = at->add_option("--seed", ov_seed, "override: attack seed")
                        ->envname("STEPLEAK_SEED");

    // sweep
    std::string sweep_model, sweep_depths = "5:55:5", sweep_out = "sweep.csv";
    AttackConfig sweep_cfg;
    std::string sweep_oracle = "direct";
    auto* sw = app.add_subcommand("sweep", "recovery error vs search depth");
    sw->add_option("model", sweep_model, "model file")->required();
    sw->add_option("--depths", sweep_depths, "start:stop:step or comma list");
    sw->add_option("--out", sweep_out, "csv output")->envname("STEPLEAK_OUT");
    sw->add_option("--seed", sweep_cfg.seed, "attack seed")->envname("STEPLEAK_SEED");
    sw->add_option("--extras", sweep_cfg.extras, "extra convergence sets")->envname("STEPLEAK_EXTRAS");
    sw->add_option("--strategy", sweep_cfg.strategy, "neuron|input")->envname("STEPLEAK_STRATEGY");
    sw->add_option("--oracle", sweep_oracle, "direct|trace")->envname("STEPLEAK_ORACLE");
    sw->add_option("--min-gap", sweep_cfg.min_gap, "input-centric gap size")->envname("STEPLEAK_MIN_GAP");

    // budget
    std::int64_t P = 0, N = 0, S = 0, D = 0, extras = 0;
    bool mnist_ref = false;
    auto* bu = app.add_subcommand("budget", "query budget estimates");
    bu->add_option("-P", P, "parameters per neuron (inputs+1)");
    bu->add_option("-N", N, "neurons");
    bu->add_option("-S", S, "search steps per set");
    bu->add_option("-D", D, "calibration exponent bound");
    bu->add_option("--extras", extras, "extra sets")->envname("STEPLEAK_EXTRAS");
    bu->add_flag("--mnist-reference", mnist_ref, "print the published 784x128 projections");

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) return cli::cmd_gen_model(preset, seed, out_path, std::cout, std::cerr);
    if (tr->parsed()) return cli::cmd_trace(model_path, input_csv, trace_path, std::cout, std::cerr);
    if (pa->parsed()) return cli::cmd_parse(parse_trace_path, parse_model_path, std::cout, std::cerr);
    if (at->parsed()) {
        if (*at_depth) ov.depth = ov_depth;
        if (*at_extras) ov.extras = ov_extras;
        if (*at_strategy) ov.strategy = ov_strategy;
        if (*at_oracle) ov.oracle = ov_oracle;
        if (*at_gap) ov.min_gap = ov_min_gap;
        if (*at_seed) ov.seed = ov_seed;
        return cli::cmd_attack(attack_model, attack_config, attack_out, std::cout, std::cerr, ov);
    }
    if (sw->parsed()) {
        try {
            sweep_cfg.oracle_mode = oracle_mode_from_name(sweep_oracle);
            const std::vector<int> depths = cli::parse_depth_list(sweep_depths);
            return cli::cmd_sweep(sweep_model, depths, sweep_out, sweep_cfg, std::cout, std::cerr);
        } catch (const std::exception& e) {
            std::cerr << "sweep: " << e.what() << '\n';
            return 2;
        }
    }
    if (bu->parsed()) {
        if (!mnist_ref && (P < 1 || N < 1)) {
            std::cerr << "budget: need -P and -N (or --mnist-reference)\n";
            return 2;
        }
        if (mnist_ref && P < 1) {
            P = 785; N = 128; S = 55; D = 38;
        }
        return cli::cmd_budget(P, N, S, D, extras, mnist_ref, std::cout, std::cerr);
    }
    return 2;
}
