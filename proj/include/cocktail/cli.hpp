#pragma once

#include <string>
#include <vector>

namespace cocktail {

/// Runs one subcommand. Returns 0 on success, 1 on a contract error, 2 on a usage error.
int dispatch(int argc, const char* const* argv);
int dispatch(const std::vector<std::string>& args);

}  // namespace cocktail
