#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "rat/data.hpp"
#include "rat/training.hpp"

namespace rat {

// Everything a subcommand may need. Every subcommand accepts every flag; a TOML file
// given with --config supplies defaults and the command line overrides it.
struct CliConfig {
    std::string data;                    // CSV dataset
    std::string label_column = "label";
    std::string timestamp_column;        // empty: row order is time
    std::vector<std::string> features;   // empty: every column except label and timestamp
    std::string delimiter = ",";
    SplitRatios ratios;
    std::string user_field;              // long-tail segments; empty: first feature
    std::string out = "out";
    std::string index;                   // RATI path; empty: <out>/index.rati
    std::string queries;                 // CSV for retrieve
    std::string checkpoint;              // RATM path; empty: <out>/model.ratm
    std::string segments;                // e.g. "tail10,tail20"
    std::size_t workers = 0;             // retrieval threads, 0 = hardware count
    std::size_t num_keys = 200;          // synthesize only
    TrainConfig train;

    bool operator==(const CliConfig&) const = default;
};

struct ParsedCommand {
    std::string name;  // subcommand; empty when only help was requested
    CliConfig config;
};

// Parses `args` (without the program name). Throws UsageError on bad flags or values and
// DataError when the --config file cannot be read.
ParsedCommand parse_command_line(std::span<const std::string> args);

// TOML text that parse_command_line reads back into an equal CliConfig.
std::string config_to_toml(const CliConfig& config);

// Runs one subcommand. Returns 0 on success, 1 on usage errors, 2 on data errors and
// 3 on any other failure; diagnostics go to `err`.
int run_cli(std::span<const std::string> args, std::ostream& out, std::ostream& err);

}  // namespace rat
