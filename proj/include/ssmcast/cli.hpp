#pragma once

namespace ssmcast::cli {

// Entry point of the ssmcast binary: dispatches the subcommands (simulate,
// prepare, train, forecast, evaluate, gradcheck) and maps failures onto the
// documented exit codes: 0 success, 2 config or usage, 3 data format,
// 4 training divergence, 5 evaluation constraint.
int run_cli(int argc, const char* const* argv);

}  // namespace ssmcast::cli
