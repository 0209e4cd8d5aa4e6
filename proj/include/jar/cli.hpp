#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "jar/costmodel.hpp"
#include "jar/fusion.hpp"
#include "jar/tasks.hpp"

namespace jar::cli {

enum ExitCode : int { kSuccess = 0, kCheckFailed = 1, kUsageError = 2, kDiverged = 3 };

struct AblateSettings {
    std::size_t max_cells = 16;
    std::size_t steps = 200;
    std::size_t eval_samples = 100;
};

struct GradcheckSettings {
    fusion::FusionKind kind = fusion::FusionKind::Jar;
    fusion::FusionConfig model;
    std::size_t text_tokens = 6;
    fusion::ImageGeometry geometry{4, 4, 8};
    // Forward-pass roundoff (~1e-14 absolute on this loss) over 2h swamps
    // gradients near 1e-5 when h=1e-5; 1e-4 balances it against the h^2
    // truncation term.
    double step = 1e-4;
    double tolerance = 1e-4;

    GradcheckSettings();
};

inline constexpr std::size_t kGradcheckTokenCap = 32;

// Everything a subcommand may read. Filled from defaults, then the config
// file, then `--section.key value` overrides, then the global flags.
struct RunConfig {
    std::uint64_t seed = 0;
    std::string out_dir = "out";
    std::size_t jobs = 1;

    fusion::FusionKind kind = fusion::FusionKind::Jar;
    fusion::FusionConfig model;
    std::vector<tasks::TaskKind> task_kinds{tasks::TaskKind::Presence};
    tasks::TaskSpec task;  // shared by every entry of task_kinds
    tasks::TrainConfig train;
    cost::ArchSpec arch;
    AblateSettings ablate;
    GradcheckSettings gradcheck;

    RunConfig();

    std::vector<tasks::TaskSpec> task_list() const;
    // Throws ConfigError (or GenerationError) before any work starts.
    void validate() const;
};

struct ConfigKey {
    std::string name;  // "section.key"
    std::string help;
};

const std::vector<ConfigKey>& config_keys();

// Config grammar, one statement per line:
//   # comment            (also after a value)
//   [section]
//   key = value
// Errors are ConfigError with "<origin>:<line>: " prefixes.
void apply_config_text(RunConfig& config, std::string_view text, const std::string& origin);
void apply_config_file(RunConfig& config, const std::string& path);
// `key` is "section.key".
void apply_override(RunConfig& config, std::string_view key, std::string_view value);

// Entry point of the jarfuse tool; returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace jar::cli
