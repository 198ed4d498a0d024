#pragma once

#include <string>
#include <vector>

namespace celeste {

/// Entry point behind the celeste-mini binary: synth | infer | score |
/// bench. Returns 0 on success, 2 on usage errors, 1 on runtime failure.
int run_command(const std::vector<std::string>& args);
int run_command(int argc, const char* const* argv);

}  // namespace celeste
