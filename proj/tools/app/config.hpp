#pragma once

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace gridlearn::app {

using Json = nlohmann::ordered_json;

/// Exit codes, one per error family.
enum Exit : int {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,
  kInput = 3,
  kContract = 4,
  kNumerical = 5,
  kGradCheck = 6,
  kTheoryCheck = 7,
  kIo = 8,
};

/// Bad flag, bad config file contents, unknown key, wrong type.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
/// Missing or unreadable input file.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
/// Failure writing outputs.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct KeySpec {
  std::string key;
  Json default_value;
  std::vector<std::string> commands;  // empty = every command
  std::string help;
};

const std::vector<KeySpec>& key_specs();
const std::vector<std::string>& command_names();
/// Keys a command reads, in registry order.
std::vector<const KeySpec*> keys_for(std::string_view command);

/// GRIDLEARN_LEARNING_RATE for learning_rate.
std::string env_name(std::string_view key);

using Env = std::map<std::string, std::string>;
Env process_env();

/// Resolved configuration for one command.
/// defaults <- config file <- GRIDLEARN_* environment <- flags.
class RunConfig {
 public:
  static RunConfig resolve(std::string_view command, const std::optional<std::string>& config_path, const Env& env,
                           const std::map<std::string, std::string>& flags);

  const std::string& command() const noexcept { return command_; }
  const Json& values() const noexcept { return values_; }
  /// Where each value came from: default, file, env or flag.
  const std::map<std::string, std::string>& sources() const noexcept { return sources_; }

  std::string str(const std::string& key) const;
  double num(const std::string& key) const;
  std::size_t count(const std::string& key) const;
  std::uint64_t u64(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::vector<double> numbers(const std::string& key) const;  // comma-separated
  std::vector<std::string> strings(const std::string& key) const;
  /// Throws UsageError naming the key when it is empty.
  std::string required(const std::string& key) const;

  void set(const std::string& key, Json value);

 private:
  std::string command_;
  Json values_;
  std::map<std::string, std::string> sources_;
};

/// Parses `text` as the type of `like`; throws UsageError.
Json parse_value(const std::string& key, const std::string& text, const Json& like);

}  // namespace gridlearn::app
