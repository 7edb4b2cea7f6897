#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace amortenc::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;     // bad flags or parameter values
inline constexpr int kExitData = 2;      // unreadable, malformed or stale inputs
inline constexpr int kExitTraining = 3;  // divergence during training

// args[0] is the subcommand: gen-tasks, pretrain-mt, extract, train-head,
// eval, loto, cost-report. Every subcommand writes manifest.json under --out.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace amortenc::cli
