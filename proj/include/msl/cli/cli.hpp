#pragma once

#include <iosfwd>

namespace msl::cli {

// Entry point of the msl command. Returns 0 on success, 2 on usage errors and
// 1 on runtime failures; diagnostics go to `err` as a single line.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace msl::cli
