#pragma once

// Command-line surface. dispatch() parses argv, runs one subcommand, and
// maps errors to exit codes: 0 success, 1 runtime failure, 2 usage or
// configuration mistake. Every error is a single machine-parseable stderr
// line: "error: <kind>: <message>".

namespace salt {

int dispatch(int argc, const char* const* argv);

}  // namespace salt
