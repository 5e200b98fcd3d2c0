#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace metastate {

// Exit codes: 0 success, 1 a check or command failed, 2 usage error.
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace metastate
