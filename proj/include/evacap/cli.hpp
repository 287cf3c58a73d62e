// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>

namespace evacap::cli {

/// Entry point of the `evacap` tool. Subcommands: train, eval, bench,
/// gradcheck, gen-data. Returns 0 on success, 2 on a command-line error
/// (usage goes to `err`) and 1 on any other failure (one diagnostic line).
///
/// The report directory is taken from --report, else from the
/// EVACAP_REPORT_DIR environment variable, else the working directory.
int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace evacap::cli
