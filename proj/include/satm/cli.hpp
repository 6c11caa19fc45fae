#pragma once

#include <string>
#include <vector>

namespace satm {

// Exit codes shared by every subcommand.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;   // usage / configuration error
inline constexpr int kExitIo = 3;       // I/O or file-format error
inline constexpr int kExitNumeric = 4;  // numeric divergence

/// Runs one subcommand; args[0] is the subcommand name. Returns the exit
/// code. Every command writes a resolved-config manifest next to its
/// outputs; re-running from that manifest reproduces the outputs hash-equal.
int run_cli(const std::vector<std::string>& args);

}  // namespace satm
