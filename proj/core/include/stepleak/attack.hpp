#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "stepleak/oracle.hpp"

// Weight and bias recovery from instruction-count observations alone.
//
// The first-layer attack runs in two phases per the observable Sigma-space
// map of the layer's activation: a cheap calibration pass recovers, for
// every (input, neuron) pair, the sign of the weight and the smallest
// base^k magnitude that saturates the neuron; a binary search then drives
// the neuron's pre-activation onto an exact region border, yielding one
// linear equation per convergence set.  Enough sets solve the neuron by
// least squares.  Deeper layers are reached by unwrapping already-solved
// layers and grid-scanning for class changes, which yields sign-ambiguous
// sets that are reported but never silently solved.

namespace stepleak {

class AttackError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};
// Observations stopped being consistent with a monotone crossing.
class LostBracket : public AttackError {
  public:
    using AttackError::AttackError;
};
// All collected sets share one threshold value.
class InsufficientThresholdDiversity : public AttackError {
  public:
    using AttackError::AttackError;
};
// Condition estimate of the system beyond tolerance.
class RankDeficient : public AttackError {
  public:
    using AttackError::AttackError;
};
// Requested output is outside the composed output range of solved layers.
class TargetUnreachable : public AttackError {
  public:
    using AttackError::AttackError;
};
// A grid scan saw a single instruction-count class.
class NoClassChange : public AttackError {
  public:
    using AttackError::AttackError;
};

struct AttackConfig {
    int max_depth = 55;
    int extras = 3;           // convergence sets beyond the P minimum
    double base = 10.0;       // calibration base (neuron-centric)
    int max_exponent = 38;    // D: largest probed base^k
    double min_gap = 0.1;     // input-centric terminal bracket width
    std::string strategy = "neuron";  // "neuron" | "input"
    OracleMode oracle_mode = OracleMode::direct;
    std::uint64_t seed = 1;
    bool verify_certificates = true;
    bool parallel = false;
    // When false the first layer is treated like a deeper layer (models a
    // network with input filtering; only the grid-search path applies).
    bool first_layer_injectable = true;

    static AttackConfig from_json_file(const std::string& path);
    void to_json_file(const std::string& path) const;
};

// Queries a search may spend besides its bisection steps: saturation check,
// free-end check, escalation allowance, and the certificate pair.
inline constexpr int kPerSetOverheadQueries = 6;

struct CalibrationResult {
    std::vector<int> signs;        // per input: +1, -1, or 0 (unreachable)
    std::vector<float> maxvals;    // per input: smallest saturating base^k; 0 if unreachable
    std::vector<bool> reachable;   // per input
};

// Per-layer calibration: signs/maxvals for every (neuron, input) pair.
struct LayerCalibration {
    std::vector<CalibrationResult> per_neuron;
    std::uint64_t queries = 0;
};

struct ConvergenceSet {
    std::vector<float> inputs;  // full input vector; dynamic coordinate at the
                                // lower-region end of the bracket
    float upper_value = 0.0f;   // dynamic coordinate one bracket step into the upper region
    Threshold threshold;
    int layer = 0;
    int neuron = 0;
    int dyn_index = 0;
    bool sign_known = true;
    int depth_used = 0;
    bool ulp_tight = false;
    // for sign-ambiguous (deeper-layer) sets: the mirrored candidate border
    // values the observed class pair is consistent with
    std::vector<float> candidate_thresholds;
};

struct SolveResult {
    std::vector<double> weights;
    double bias = 0.0;
    double residual_rms = 0.0;
    double residual_max = 0.0;
    double condition = 0.0;
};

struct RecoveredLayer {
    int layer = 0;
    int n_inputs = 0;
    int n_neurons = 0;
    std::vector<std::vector<double>> weights;  // per neuron
    std::vector<double> biases;
    std::vector<double> residual_rms;
    std::vector<double> condition;
    std::vector<int> unsolved;
    std::vector<std::string> unsolved_reason;
    std::uint64_t queries_used = 0;
    std::map<std::string, std::uint64_t> queries_by_phase;
    std::uint64_t neuron_check_failures = 0;

    bool solved(int neuron) const;
};

struct QueryBudget {
    std::int64_t P = 0;  // parameters per neuron (inputs + 1)
    std::int64_t N = 0;
    std::int64_t S = 0;
    std::int64_t D = 0;
    std::int64_t extras = 0;
    std::int64_t Q = 0;  // (P + extras) * N * S
    std::int64_t C = 0;  // (P - 1) * D
};

QueryBudget query_budget_estimate(std::int64_t P, std::int64_t N, std::int64_t S, std::int64_t D,
                                  std::int64_t extras = 0);

// Published reference projections for the 784->128 case study: neuron-centric
// full-depth, input-centric with calibration, and the 100-queries-per-
// parameter baseline (28*28+1)*128*100.
struct ReferenceBudgets {
    std::int64_t neuron_centric_full_depth = 2'460'800;
    std::int64_t input_centric_with_calibration = 1'180'765;
    std::int64_t per_parameter_baseline = 10'048'000;
};
ReferenceBudgets mnist_reference_budgets();

// --- calibration ---------------------------------------------------------

CalibrationResult calibrate_neuron(Oracle& o, int neuron, int n_inputs, double base,
                                   int max_exponent, std::uint64_t seed);

// One pass over the inputs saturates every neuron of the layer at once;
// query count <= n_inputs * max_exponent.
LayerCalibration calibrate_layer_input_centric(Oracle& o, int layer, double base, int max_exponent);

// --- searches ------------------------------------------------------------

// Bisects the dynamic input between a saturated start and an unsaturated
// free end until depth is exhausted or the bracket is ulp-tight.  Throws
// LostBracket when the endpoint observations are not a monotone crossing.
ConvergenceSet binary_search_threshold(Oracle& o, int neuron, int dyn_index,
                                       std::vector<float> locked, float start, int max_depth,
                                       bool verify_certificate = true,
                                       std::uint64_t* check_failures = nullptr);

std::vector<ConvergenceSet> collect_convergence_sets(Oracle& o, int neuron, int n_sets,
                                                     int max_depth, const CalibrationResult& calib,
                                                     const AttackConfig& cfg,
                                                     std::uint64_t* check_failures = nullptr);

// --- solving -------------------------------------------------------------

// Minimum-norm least squares over the convergence rows (inputs..., 1) = t.
// Double precision over float32 coefficients; condition estimates beyond
// 1e12 are rejected as RankDeficient.
SolveResult solve_neuron(const std::vector<ConvergenceSet>& sets);

// --- layer drivers -------------------------------------------------------

RecoveredLayer recover_first_layer(Oracle& o, const AttackConfig& cfg);

// Per-neuron unit of the neuron-centric attack, exposed so a driver can
// checkpoint between neurons.
struct NeuronRecovery {
    int neuron = 0;
    bool ok = false;
    std::string reason;
    SolveResult solve;
    std::uint64_t check_failures = 0;
};
NeuronRecovery recover_single_neuron(Oracle& o, int neuron, const CalibrationResult& calib,
                                     const AttackConfig& cfg);

// With a log stream, prints one block per equation pass (calibration
// executions, live gap count per halving level, pass total).
RecoveredLayer input_centric_recover(Oracle& o, const AttackConfig& cfg,
                                     std::ostream* log = nullptr);

// One input-centric pass: one equation per (reachable) neuron for the given
// input index.  Exposed for the efficiency accounting it is measured by.
// probe_sign flips the dynamic probes so a second sweep reaches each
// neuron's other outer threshold.
struct InputCentricPass {
    std::vector<std::optional<ConvergenceSet>> per_neuron;
    std::uint64_t calibration_queries = 0;
    std::uint64_t search_queries = 0;
    float calibrated_to = 0.0f;        // magnitude that saturated the layer
    std::vector<int> gaps_per_level;   // live gap count at each halving level
};
InputCentricPass input_centric_pass(Oracle& o, int dyn_index, double other_value,
                                    const AttackConfig& cfg, int probe_sign = +1);

// --- deeper layers -------------------------------------------------------

// One already-solved layer, as the attacker knows it.
struct SolvedLayer {
    ActivationKind activation;
    int n_inputs = 0;
    int n_neurons = 0;
    std::vector<std::vector<double>> weights;
    std::vector<double> biases;
};

SolvedLayer solved_from_truth(const ModelSpec& m, int layer);
SolvedLayer solved_from_recovered(const RecoveredLayer& rec, const ActivationKind& kind);

// Inverts the solved prefix: finds a network input whose forward pass
// through `solved` reproduces `target` (within least-squares reach).
// Throws TargetUnreachable when a target coordinate is outside the
// activation's invertible range.
std::vector<double> unwrap_layers(const std::vector<SolvedLayer>& solved,
                                  std::span<const double> target);

// Forward pass through solved layers in double precision (the attacker's
// model of what values actually reach the target layer).
std::vector<double> solved_forward(const std::vector<SolvedLayer>& solved,
                                   std::span<const double> input);

// Grid-scans the nominated dynamic coordinate of the target layer's input
// from +span down to -span, bisecting every class change.  Sets come back
// sign-ambiguous (sign_known = false).  Throws NoClassChange when the whole
// scan sits in one class.
std::vector<ConvergenceSet> grid_search_deeper(Oracle& o, const std::vector<SolvedLayer>& solved,
                                               int layer_idx, int neuron, double resolution,
                                               double span, const AttackConfig& cfg);

}  // namespace stepleak
