#include "jlml/binary_io.hpp"
#include "jlml/cli.hpp"
#include "jlml/errors.hpp"

namespace jlml {

std::pair<std::string, std::string> parse_assignment(std::string_view text) {
  const auto eq = text.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("expected key=value, got '" + std::string(text) + "'");
  }
  auto trim = [](std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
    return std::string(s);
  };
  return {trim(text.substr(0, eq)), trim(text.substr(eq + 1))};
}

void apply_settings(ExperimentConfig& config, const KeyValues& settings, const std::string& source) {
  for (const auto& [k, v] : settings)
    if (k == "model.preset") config.apply(k, v);
  for (const auto& [k, v] : settings) {
    if (k == "model.preset") continue;
    if (!config.apply(k, v)) throw ConfigError(source + ": unknown key '" + k + "'");
  }
}

ExperimentConfig resolve_run_config(const ExperimentConfig& base, const std::optional<std::filesystem::path>& file,
                                    const KeyValues& overrides) {
  ExperimentConfig config = base;
  if (file) apply_settings(config, parse_key_values(binary::read_file(*file)), file->string());
  apply_settings(config, overrides, "command line");
  return config;
}

}  // namespace jlml
