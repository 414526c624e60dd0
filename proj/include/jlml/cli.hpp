#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "jlml/ablation.hpp"
#include "jlml/kv.hpp"

namespace jlml {

// Exit codes shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;  // runtime, numeric or I/O failure
inline constexpr int kExitUsage = 2;    // bad flags or configuration

// "key=value" -> pair; throws ConfigError.
std::pair<std::string, std::string> parse_assignment(std::string_view text);

// Resolves a run configuration: the base, then the key=value file (if any),
// then the overrides in order. Unknown keys throw ConfigError naming the
// source. model.preset entries take effect before any other key of the same
// source so that "model.preset=toy" never erases a neighbouring override.
ExperimentConfig resolve_run_config(const ExperimentConfig& base, const std::optional<std::filesystem::path>& file,
                                    const KeyValues& overrides);
void apply_settings(ExperimentConfig& config, const KeyValues& settings, const std::string& source);

// Entry point of the jlml executable; args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace jlml
