#pragma once

#include <iosfwd>
#include <string>
#include <vector>

// Command entry points. Each takes the arguments after the command name and
// returns the process exit code: 0 success, 2 usage error, 1 runtime error.
namespace dualsr::cli {

constexpr int kOk = 0;
constexpr int kRuntimeError = 1;
constexpr int kUsageError = 2;

int cmd_gen_hr(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int cmd_synth(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int cmd_train(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int cmd_infer(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int cmd_eval(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int cmd_report(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Dispatches on args[0].
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dualsr::cli
