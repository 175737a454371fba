#ifndef ECO_CLI_HPP_
#define ECO_CLI_HPP_

#include <iosfwd>
#include <string>
#include <vector>

namespace eco {

// Exit codes: 0 success, 1 user error (bad flags, missing files, failed
// validation), 2 internal error (corrupt inputs, library failures).
inline constexpr int kExitOk = 0;
inline constexpr int kExitUser = 1;
inline constexpr int kExitInternal = 2;

// Runs the command line `args` (args[0] is the program name).
int run_cli(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err);

}  // namespace eco

#endif  // ECO_CLI_HPP_
