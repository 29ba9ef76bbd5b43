#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "app/config.hpp"

namespace gridlearn::app {

/// Runs one command line (without the program name) and returns the exit code.
int run(const std::vector<std::string>& args, const Env& env, std::ostream& out, std::ostream& err);

/// Creates the next free run-NNNN directory under `root`.
std::filesystem::path next_run_dir(const std::filesystem::path& root);

/// The 36-hour demand profile shipped with the tool.
std::vector<double> builtin_profile();

}  // namespace gridlearn::app
