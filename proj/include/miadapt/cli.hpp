#pragma once

#include <string>
#include <vector>

namespace miadapt::cli {

/// Entry point for the `miadapt` tool. Exit codes: 0 success, 1 user error,
/// 2 internal error.
int run(int argc, char** argv);

/// Same as above with the arguments after the program name.
int run(const std::vector<std::string>& args);

}  // namespace miadapt::cli
