#pragma once

// Command-line surface. Flags mirror config keys: plain flags are
// command arguments (--data, --checkpoint, ...); dotted flags override
// config entries (--model.d 512, --train.max_steps 2000).
//
// Exit codes: 0 success, 1 config error, 2 I/O error, 3 verification failure.

#include <iostream>
#include <map>
#include <string>
#include <vector>

namespace ef::cli {

struct Args {
    std::string command;
    std::map<std::string, std::string> flags;
    std::vector<std::pair<std::string, std::string>> overrides;
};

Args parse_args(int argc, const char* const* argv);

// Dispatches a parsed command; throws ef errors on failure.
void run(const Args& args, std::ostream& out);

int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout,
             std::ostream& err = std::cerr);

}  // namespace ef::cli
