#pragma once

#include <iostream>
#include <string>
#include <vector>

namespace cotvla::cli {

/// Runs one subcommand (gen-data, annotate, train, eval, rollout, viz-attn,
/// plot). `args` excludes the program name. Failures print a single line
/// "error: code=<code> msg=<message>" to `err` and return nonzero.
int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr);

}  // namespace cotvla::cli
