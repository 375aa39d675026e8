#pragma once

#include <string>
#include <vector>

namespace sdseg::cli {

// full command-line surface; returns the process exit code
int run(const std::vector<std::string>& args);

}  // namespace sdseg::cli
