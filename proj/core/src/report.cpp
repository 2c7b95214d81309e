#include "stepleak/report.hpp"

#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

namespace stepleak {

NeuronErrors neuron_errors(const RecoveredLayer& rec, const ModelSpec& truth, int neuron) {
    const int layer = rec.layer;
    if (rec.n_inputs != truth.layers[layer].n_inputs || rec.n_neurons != truth.layers[layer].n_neurons) {
        throw AttackError("error report: recovered layer does not match the model shape");
    }
    NeuronErrors e;
    for (int j = 0; j <= rec.n_inputs; ++j) {
        const double est = j < rec.n_inputs ? rec.weights[neuron][j] : rec.biases[neuron];
        const double tru = j < rec.n_inputs ? truth.weight(layer, neuron, j) : truth.bias(layer, neuron);
        const double abs_err = std::fabs(est - tru);
        e.abs_err.push_back(abs_err);
        e.pct_err.push_back(std::fabs(tru) < 1e-9 ? std::numeric_limits<double>::quiet_NaN()
                                                  : 100.0 * abs_err / std::fabs(tru));
    }
    return e;
}

ErrorStats layer_error_stats(const RecoveredLayer& rec, const ModelSpec& truth) {
    ErrorStats s;
    double sum_abs = 0.0, sum_pct = 0.0;
    int n_pct = 0;
    for (int n = 0; n < rec.n_neurons; ++n) {
        if (!rec.solved(n)) continue;
        const NeuronErrors e = neuron_errors(rec, truth, n);
        for (std::size_t j = 0; j < e.abs_err.size(); ++j) {
            sum_abs += e.abs_err[j];
            s.max_abs = std::max(s.max_abs, e.abs_err[j]);
            ++s.n_params;
            if (!std::isnan(e.pct_err[j])) {
                sum_pct += e.pct_err[j];
                s.max_pct = std::max(s.max_pct, e.pct_err[j]);
                ++n_pct;
            }
        }
    }
    s.n_unsolved = static_cast<int>(rec.unsolved.size());
    if (s.n_params > 0) s.avg_abs = sum_abs / s.n_params;
    if (n_pct > 0) s.avg_pct = sum_pct / n_pct;
    return s;
}

void write_sweep_csv(std::span<const SweepRow> rows, std::ostream& os) {
    os << "depth,avg_abs_err,max_abs_err,avg_pct_err,max_pct_err,queries,unsolved\n";
    char buf[256];
    for (const SweepRow& r : rows) {
        std::snprintf(buf, sizeof buf, "%d,%.12e,%.12e,%.12e,%.12e,%llu,%d\n", r.depth,
                      r.stats.avg_abs, r.stats.max_abs, r.stats.avg_pct, r.stats.max_pct,
                      static_cast<unsigned long long>(r.queries), r.stats.n_unsolved);
        os << buf;
    }
}

std::vector<SweepRow> read_sweep_csv(std::istream& is) {
    std::vector<SweepRow> rows;
    std::string line;
    if (!std::getline(is, line)) return rows;  // header
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        SweepRow r;
        unsigned long long q = 0;
        if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf,%llu,%d", &r.depth, &r.stats.avg_abs,
                        &r.stats.max_abs, &r.stats.avg_pct, &r.stats.max_pct, &q,
                        &r.stats.n_unsolved) != 7) {
            throw AttackError("sweep csv: bad row '" + line + "'");
        }
        r.queries = q;
        rows.push_back(r);
    }
    return rows;
}

}  // namespace stepleak
