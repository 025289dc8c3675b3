#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dinf {

/// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitUsage = 2;

/// Runs one command (`datagen`, `gradcheck`, `train`, `eval`, `analyze`).
/// `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dinf
