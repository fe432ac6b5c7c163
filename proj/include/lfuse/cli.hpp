#pragma once

#include <ostream>

namespace lfuse {

// Exit codes of the command-line entry point.
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

// Parses argv and runs one subcommand: synth, finetune-seg, segment, train, eval, gradcam.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace lfuse
