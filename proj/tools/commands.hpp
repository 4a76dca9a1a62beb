#pragma once

namespace simvae::cli {

// Parses argv and runs one subcommand. Returns 0 on success, 1 on a runtime
// failure and 2 on a usage or config error.
int run(int argc, char** argv);

}  // namespace simvae::cli
