#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctxseg/synthwsi.hpp"
#include "ctxseg/training.hpp"

namespace ctxseg::cli {

// Bad command line or config file; the tool exits with status 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ValueType { UInt, Real, Bool, Text, Choice, UIntList, ChoiceList };

struct KeyInfo {
  std::string key;  // flag spelling without the leading dashes
  ValueType type;
  std::string default_value;
  std::string help;
  std::vector<std::string> choices = {};  // Choice and ChoiceList only
};

const std::vector<KeyInfo>& key_table();
const std::vector<std::string>& command_names();

// Flat `key = value` text with `#` comments. Keys may use '-' or '_'.
std::map<std::string, std::string> parse_config_text(const std::string& text);
std::map<std::string, std::string> read_config_file(const std::string& path);

struct RunConfig {
  std::string command;
  std::map<std::string, std::string> file_values;
  std::map<std::string, std::string> flag_values;
  std::map<std::string, std::string> resolved;  // every key of key_table()
  std::uint64_t seed = 0;

  std::size_t uint(const std::string& key) const;
  double real(const std::string& key) const;
  bool flag(const std::string& key) const;
  const std::string& text(const std::string& key) const;
  std::vector<std::size_t> uint_list(const std::string& key) const;
  std::vector<std::string> text_list(const std::string& key) const;
};

// defaults < file < flags. Unknown keys and malformed values raise UsageError.
RunConfig resolve_config(const std::string& command, const std::map<std::string, std::string>& file_values,
                         const std::map<std::string, std::string>& flag_values);

// One `key = value` line per key, in table order; parseable by parse_config_text.
std::string describe(const RunConfig& config);

SlideParams slide_params(const RunConfig& config);
TrainConfig train_config(const RunConfig& config);

// Runs an already resolved command; returns the process exit status.
int dispatch(const RunConfig& config, std::ostream& out);

// Full entry point: argument parsing, config resolution, dispatch, error mapping.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ctxseg::cli
