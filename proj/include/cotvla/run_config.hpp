#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "cotvla/model.hpp"
#include "cotvla/trainer.hpp"

namespace cotvla {

enum class ValueKind { Int, Real, Text, Bool };

struct ConfigKey {
  std::string key;  // snake_case; the flag is --key with '_' -> '-'
  std::string default_value;
  std::string help;
  ValueKind kind = ValueKind::Text;
};

/// Every run setting with its documented default.
const std::vector<ConfigKey>& config_schema();
std::string flag_for(std::string_view key);

/// Resolved settings: defaults < config file < command-line flags.
class RunConfig {
 public:
  RunConfig();

  /// key = value lines, '#' comments, keys in snake_case or kebab-case.
  /// Unknown keys and malformed values are Error("config") naming the line.
  void load_file(const std::filesystem::path& path);
  /// Throws Error("config") for unknown keys or values of the wrong kind.
  void set(std::string_view key, const std::string& value, const std::string& source);

  const std::string& text(std::string_view key) const;
  long long integer(std::string_view key) const;
  std::uint64_t u64(std::string_view key) const;
  double real(std::string_view key) const;
  bool flag(std::string_view key) const;
  const std::string& source(std::string_view key) const;

  /// "key = value  # source" for every key, in schema order.
  std::string describe() const;

  TrainConfig train_config() const;
  ModelConfig model_config(int vocab_size) const;

 private:
  std::map<std::string, std::string, std::less<>> values_;
  std::map<std::string, std::string, std::less<>> sources_;
};

}  // namespace cotvla
