#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "avatarkit/errors.hpp"
#include "json.hpp"

namespace avk {

// Command-line / config-file misuse; the CLI maps this to exit code 2.
struct UsageError : Error {
    using Error::Error;
};

// Full default run configuration (all sections).
nlohmann::json default_config();

// Defaults deep-merged with the user file. Keys that do not exist in the
// defaults are rejected.
nlohmann::json load_config(const std::filesystem::path& file);

// "a.b.c=value" with type coercion from the existing value
void apply_override(nlohmann::json& config, const std::string& assignment);

void write_effective_config(const nlohmann::json& config, const std::filesystem::path& out_dir);

}  // namespace avk
