#pragma once

#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "stepleak/model.hpp"
#include "stepleak/trace.hpp"

// The attack's only window onto the victim.  Every query is one victim
// inference; the counter increments exactly once per inference and each
// query is attributed to the phase that issued it, so accounting can be
// audited against the per-phase totals.  A determinism guard remembers a
// digest of the observations for every input and flags any re-queried input
// that stops reproducing them.

namespace stepleak {

enum class OracleMode { direct, trace };

std::string_view oracle_mode_name(OracleMode m);
OracleMode oracle_mode_from_name(std::string_view name);

struct QueryResult {
    // Observable per neuron, resolved in each layer's own Sigma-space map.
    std::vector<std::vector<Observation>> layers;
    std::vector<float> output;
};

class Oracle {
  public:
    Oracle(ModelSpec model, OracleMode mode, PageLayout layout = {});

    QueryResult query(std::span<const float> input);

    std::uint64_t query_count() const { return count_; }
    std::uint64_t nondeterministic_steps() const { return nondet_; }
    std::uint64_t incomplete_logs() const { return incomplete_; }
    const std::map<std::string, std::uint64_t>& queries_by_phase() const { return by_phase_; }
    void set_phase(std::string name) { phase_ = std::move(name); }
    const std::string& phase() const { return phase_; }

    const ModelSpec& model() const { return model_; }
    OracleMode mode() const { return mode_; }
    const PageLayout& layout() const { return layout_; }

  private:
    ModelSpec model_;
    OracleMode mode_;
    PageLayout layout_;
    std::uint64_t count_ = 0;
    std::uint64_t nondet_ = 0;
    std::uint64_t incomplete_ = 0;
    std::string phase_ = "unattributed";
    std::map<std::string, std::uint64_t> by_phase_;
    std::unordered_map<std::uint64_t, std::uint64_t> guard_;
};

}  // namespace stepleak
