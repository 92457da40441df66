#pragma once

// Key-value run configuration shared by every command. Text form is one
// `key = value` per line; `#` starts a comment. Unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "apa/editops.hpp"
#include "apa/training.hpp"

namespace apa::cli {

// Bad command line or configuration (exit status 2).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kConfigEnv = "APA_CONFIG";
inline constexpr int kRunConfigVersion = 1;

class RunConfig {
 public:
  RunConfig();  // all defaults

  // Throws UsageError for an unknown key or malformed line; IoError if unreadable.
  void merge_file(const std::filesystem::path& path);
  void set(const std::string& key, const std::string& value);
  // "key=value"
  void set_assignment(const std::string& assignment);

  const std::string& get(const std::string& key) const;
  double real(const std::string& key) const;
  std::size_t count(const std::string& key) const;
  std::uint64_t seed(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::vector<double> reals(const std::string& key) const;  // comma-separated

  std::string text() const;  // sorted, loadable by merge_file
  void write(const std::filesystem::path& path) const;

  train::TrainConfig train_config(train::Stage stage) const;
  net::UNetConfig unet() const;
  // Applies edit.* keys on top of the per-task defaults in `r`.
  void apply_edit_options(edit::EditRequest& r) const;

  static const std::map<std::string, std::string>& defaults();

 private:
  std::map<std::string, std::string> values_;
};

// Defaults, then the file named by --config or APA_CONFIG, then overrides.
RunConfig resolve_config(const std::string& config_path, const std::vector<std::string>& overrides);

}  // namespace apa::cli
