#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

namespace vql::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2, kDataError = 3, kDivergence = 4 };

/// Applies "a.b.c=value". The value is parsed as JSON when possible and kept
/// as a string otherwise. Throws ConfigError on a malformed override.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Entry point of the vqlab tool; args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace vql::cli
