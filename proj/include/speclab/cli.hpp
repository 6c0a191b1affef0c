#pragma once

/**
 * Experiment runner: one executable with subcommands gradcheck,
 * gaussian-demo, capacity-exp, specdec-sim, train and report.
 *
 * Every run resolves its configuration (defaults < config file < explicit
 * flags), writes the resolved key=value manifest next to its artifacts, and
 * is bitwise deterministic given that manifest; a manifest can be fed back
 * via --config to reproduce a run. Exit code 0 means every internal
 * assertion of the subcommand held.
 */

namespace speclab::cli {

int run(int argc, const char* const* argv);

}  // namespace speclab::cli
