#pragma once

#include <iosfwd>

namespace dropedge {

/// Exit codes: 0 success, 1 runtime failure, 2 usage error.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dropedge
