#include <sys/types.h>
#include <sys/wait.h>

#include <csignal>
#include <chrono>
#include <filesystem>
#include <string>
#include <thread>
#include <unistd.h>

#include "neuropipe/errors.hpp"
#include "neuropipe/pipeline.hpp"

namespace neuropipe {

namespace {

std::string substitute(const std::string& tmpl,
                       const std::map<std::string, std::string>& bindings) {
  std::string out;
  out.reserve(tmpl.size());
  std::size_t pos = 0;
  while (pos < tmpl.size()) {
    const std::size_t open = tmpl.find('{', pos);
    if (open == std::string::npos) {
      out.append(tmpl, pos, std::string::npos);
      break;
    }
    out.append(tmpl, pos, open - pos);
    const std::size_t close = tmpl.find('}', open);
    if (close == std::string::npos)
      throw UsageError("unbalanced '{' in command template: " + tmpl);
    const std::string key = tmpl.substr(open + 1, close - open - 1);
    const auto it = bindings.find(key);
    if (it == bindings.end())
      throw UsageError("unbound placeholder {" + key + "} in command template");
    out += it->second;
    pos = close + 1;
  }
  return out;
}

} // namespace

void validate(const ExternalToolSpec& spec) {
  if (spec.command_template.find("{output}") == std::string::npos)
    throw UsageError("tool '" + spec.name +
                     "' template must contain {output}");
  if (spec.command_template.find("{input}") == std::string::npos &&
      spec.command_template.find("{inputs_4mod}") == std::string::npos)
    throw UsageError("tool '" + spec.name +
                     "' template must contain {input} or {inputs_4mod}");
  if (!(spec.timeout_s > 0.0))
    throw UsageError("tool '" + spec.name + "' timeout must be positive");
}

ToolOutcome time_external(const ExternalToolSpec& tool,
                          const std::map<std::string, std::string>& bindings) {
  validate(tool);
  const std::string command = substitute(tool.command_template, bindings);
  const auto output_it = bindings.find("output");
  if (output_it == bindings.end())
    throw UsageError("tool bindings must include 'output'");

  const auto start = std::chrono::steady_clock::now();
  const pid_t pid = fork();
  if (pid < 0)
    throw StageFailureError("cannot fork for tool '" + tool.name + "'");
  if (pid == 0) {
    // Own process group, so a timeout kill reaches the whole tree.
    setpgid(0, 0);
    execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
    _exit(127);
  }
  setpgid(pid, pid); // also from the parent: closes the setpgid/exec race

  const auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         start)
        .count();
  };
  int status = 0;
  for (;;) {
    const pid_t done = waitpid(pid, &status, WNOHANG);
    if (done == pid)
      break;
    if (done < 0)
      throw StageFailureError("waitpid failed for tool '" + tool.name + "'");
    if (elapsed() >= tool.timeout_s) {
      kill(-pid, SIGKILL);
      waitpid(pid, &status, 0);
      throw TimeoutError("tool '" + tool.name + "' exceeded " +
                         std::to_string(tool.timeout_s) + " s and was killed");
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(2));
  }
  ToolOutcome outcome;
  outcome.wall_time_s = elapsed();
  if (WIFEXITED(status))
    outcome.exit_code = WEXITSTATUS(status);
  else if (WIFSIGNALED(status))
    outcome.exit_code = 128 + WTERMSIG(status);
  else
    outcome.exit_code = -1;

  if (outcome.exit_code == 0 &&
      !std::filesystem::exists(output_it->second))
    throw ToolContractError("tool '" + tool.name +
                            "' exited 0 but did not create " +
                            output_it->second);
  return outcome;
}

} // namespace neuropipe
