#pragma once

#include <iosfwd>
#include <span>
#include <vector>

#include "stepleak/attack.hpp"

// Error accounting against ground truth (the simulator owns the victim, so
// truth is available for reporting) and the CSV emitters the sweep command
// writes.  Unsolved neurons are excluded from the averages and listed
// separately.

namespace stepleak {

struct ErrorStats {
    double avg_abs = 0.0;
    double max_abs = 0.0;
    double avg_pct = 0.0;  // percent stats skip |truth| < 1e-9
    double max_pct = 0.0;
    int n_params = 0;
    int n_unsolved = 0;
};

ErrorStats layer_error_stats(const RecoveredLayer& rec, const ModelSpec& truth);

// Per-parameter errors for one solved neuron (abs, percent); percent is NaN
// where |truth| < 1e-9.
struct NeuronErrors {
    std::vector<double> abs_err;   // weights then bias
    std::vector<double> pct_err;
};
NeuronErrors neuron_errors(const RecoveredLayer& rec, const ModelSpec& truth, int neuron);

struct SweepRow {
    int depth = 0;
    ErrorStats stats;
    std::uint64_t queries = 0;
    double max_residual_rms = 0.0;
};

// depth,avg_abs_err,max_abs_err,avg_pct_err,max_pct_err,queries,unsolved
void write_sweep_csv(std::span<const SweepRow> rows, std::ostream& os);
std::vector<SweepRow> read_sweep_csv(std::istream& is);

}  // namespace stepleak
