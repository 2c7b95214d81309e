#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "stepleak/attack.hpp"
#include "stepleak/report.hpp"

// Batch front end.  Each command is a plain function so the test suite can
// drive it without spawning processes; main() only parses flags.

namespace stepleak::cli {

int cmd_gen_model(const std::string& preset, std::uint64_t seed, const std::string& out_path,
                  std::ostream& out, std::ostream& err);

// `input_csv` is the comma-separated input vector.
int cmd_trace(const std::string& model_path, const std::string& input_csv,
              const std::string& out_trace, std::ostream& out, std::ostream& err);

int cmd_parse(const std::string& trace_path, const std::string& model_path, std::ostream& out,
              std::ostream& err);

// Flag-level overrides of the config file; folded into the run identity so
// a checkpoint only resumes runs with the same effective configuration.
struct AttackOverrides {
    std::optional<int> depth;
    std::optional<int> extras;
    std::optional<std::string> strategy;
    std::optional<std::string> oracle;
    std::optional<double> min_gap;
    std::optional<std::uint64_t> seed;

    void apply(AttackConfig& cfg) const;
    std::string fingerprint() const;
};

int cmd_attack(const std::string& model_path, const std::string& config_path,
               const std::string& out_dir, std::ostream& out, std::ostream& err,
               const AttackOverrides& overrides = {});

int cmd_sweep(const std::string& model_path, const std::vector<int>& depths,
              const std::string& out_csv, const AttackConfig& base_cfg, std::ostream& out,
              std::ostream& err);

int cmd_budget(std::int64_t P, std::int64_t N, std::int64_t S, std::int64_t D, std::int64_t extras,
               bool mnist_reference, std::ostream& out, std::ostream& err);

std::vector<float> parse_csv_floats(const std::string& csv);
std::vector<int> parse_depth_list(const std::string& text);

}  // namespace stepleak::cli
