#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace refml::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kValidationError = 1;
inline constexpr int kRuntimeError = 2;

// Entry point of the `refml` command: generate | run | inspect.
int main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace refml::cli
