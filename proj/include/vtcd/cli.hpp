#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace vtcd {

/// Exit codes: 0 success, 1 invalid input (flags, files, formats, configs), 2 runtime failure.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, char** argv);

/// Applies VTCD_NUM_THREADS (if set) to the linear-algebra backend.
void apply_thread_env();

}  // namespace vtcd
