#ifndef TOPOFUSE_CLI_HPP
#define TOPOFUSE_CLI_HPP

#include <iosfwd>
#include <string>
#include <vector>

namespace topofuse {

inline constexpr const char* version = "0.1.0";

/** Exit codes of `run`. */
enum ExitCode : int { exit_ok = 0, exit_user_error = 1, exit_internal_error = 2 };

/**
 * Runs one subcommand. `args` excludes the program name.
 * Errors are printed to `err` and mapped to an exit code; no exception escapes.
 */
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int run(int argc, const char* const* argv);

}

#endif
