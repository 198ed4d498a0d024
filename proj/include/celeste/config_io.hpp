#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "celeste/sky_model.hpp"

namespace celeste {

/// Plain-text `key = value` configuration, one pair per line, `#` comments.
/// Keys keep insertion order on serialization.
class ConfigMap {
 public:
  static ConfigMap parse(const std::string& text);
  static ConfigMap load(const std::string& path);

  std::string serialize() const;
  void save(const std::string& path) const;  // atomic (temp + rename)

  bool has(const std::string& key) const;
  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, double value);
  void set(const std::string& key, std::int64_t value);

  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& dflt) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double dflt) const;
  std::int64_t get_int(const std::string& key) const;
  std::int64_t get_int(const std::string& key, std::int64_t dflt) const;

  const std::vector<std::pair<std::string, std::string>>& entries() const {
    return entries_;
  }

 private:
  std::optional<std::string> find(const std::string& key) const;
  std::vector<std::pair<std::string, std::string>> entries_;
};

/// Writes `contents` to `path` via a temporary file in the same directory
/// followed by an atomic rename.
void write_file_atomic(const std::string& path, const std::string& contents);

std::string read_file(const std::string& path);

// key-value (de)serialization of the model configuration blocks
ConfigMap prior_to_config(const Prior& prior);
Prior prior_from_config(const ConfigMap& cfg);
ConfigMap cluster_config_to_config(const ClusterConfig& cc);
ClusterConfig cluster_config_from_config(const ConfigMap& cfg);

}  // namespace celeste
