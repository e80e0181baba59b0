#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace caqa::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kRuntime = 2, kDivergence = 3 };

/// Runs one command line (args[0] is the program name). Output directories
/// are staged next to their destination and renamed into place on success.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Hex SHA-256 of a file's bytes.
std::string sha256_file(const std::string& path);

}  // namespace caqa::cli
