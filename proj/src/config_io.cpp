#include "celeste/config_io.hpp"

#include <cerrno>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace celeste {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

ConfigMap ConfigMap::parse(const std::string& text) {
  ConfigMap cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("config line " + std::to_string(lineno) +
                               ": expected key = value");
    }
    cfg.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return cfg;
}

ConfigMap ConfigMap::load(const std::string& path) {
  return parse(read_file(path));
}

std::string ConfigMap::serialize() const {
  std::string out;
  for (const auto& [k, v] : entries_) {
    out += k;
    out += " = ";
    out += v;
    out += '\n';
  }
  return out;
}

void ConfigMap::save(const std::string& path) const {
  write_file_atomic(path, serialize());
}

bool ConfigMap::has(const std::string& key) const {
  return find(key).has_value();
}

void ConfigMap::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : entries_) {
    if (k == key) {
      v = value;
      return;
    }
  }
  entries_.emplace_back(key, value);
}

void ConfigMap::set(const std::string& key, double value) {
  set(key, format_double(value));
}

void ConfigMap::set(const std::string& key, std::int64_t value) {
  set(key, std::to_string(value));
}

std::optional<std::string> ConfigMap::find(const std::string& key) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return v;
  }
  return std::nullopt;
}

std::string ConfigMap::get_string(const std::string& key) const {
  auto v = find(key);
  if (!v) throw std::runtime_error("config: missing key '" + key + "'");
  return *v;
}

std::string ConfigMap::get_string(const std::string& key,
                                  const std::string& dflt) const {
  return find(key).value_or(dflt);
}

double ConfigMap::get_double(const std::string& key) const {
  const std::string v = get_string(key);
  try {
    std::size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw std::runtime_error("config: key '" + key + "' is not a number: " + v);
  }
}

double ConfigMap::get_double(const std::string& key, double dflt) const {
  return has(key) ? get_double(key) : dflt;
}

std::int64_t ConfigMap::get_int(const std::string& key) const {
  const std::string v = get_string(key);
  std::int64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw std::runtime_error("config: key '" + key +
                             "' is not an integer: " + v);
  }
  return out;
}

std::int64_t ConfigMap::get_int(const std::string& key,
                                std::int64_t dflt) const {
  return has(key) ? get_int(key) : dflt;
}

void write_file_atomic(const std::string& path, const std::string& contents) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + tmp);
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) throw std::runtime_error("write failed: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw std::runtime_error("rename failed: " + path + ": " +
                             std::strerror(errno));
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace {

void set_type_prior(ConfigMap& cfg, const std::string& prefix,
                    const TypePrior& tp) {
  cfg.set(prefix + ".log_flux_mean", tp.log_flux_mean);
  cfg.set(prefix + ".log_flux_var", tp.log_flux_var);
  for (int j = 0; j < kNumColors; ++j) {
    cfg.set(prefix + ".color_mean" + std::to_string(j + 1), tp.color_mean[j]);
    cfg.set(prefix + ".color_var" + std::to_string(j + 1), tp.color_var[j]);
  }
}

TypePrior get_type_prior(const ConfigMap& cfg, const std::string& prefix) {
  TypePrior tp;
  tp.log_flux_mean = cfg.get_double(prefix + ".log_flux_mean");
  tp.log_flux_var = cfg.get_double(prefix + ".log_flux_var");
  for (int j = 0; j < kNumColors; ++j) {
    tp.color_mean[j] = cfg.get_double(prefix + ".color_mean" +
                                      std::to_string(j + 1));
    tp.color_var[j] = cfg.get_double(prefix + ".color_var" +
                                     std::to_string(j + 1));
  }
  return tp;
}

}  // namespace

ConfigMap prior_to_config(const Prior& prior) {
  ConfigMap cfg;
  cfg.set("p_star", prior.p_star);
  set_type_prior(cfg, "star", prior.star);
  set_type_prior(cfg, "galaxy", prior.galaxy);
  return cfg;
}

Prior prior_from_config(const ConfigMap& cfg) {
  Prior p;
  p.p_star = cfg.get_double("p_star");
  p.star = get_type_prior(cfg, "star");
  p.galaxy = get_type_prior(cfg, "galaxy");
  p.validate();
  return p;
}

ConfigMap cluster_config_to_config(const ClusterConfig& cc) {
  ConfigMap cfg;
  cfg.set("cluster_weight", cc.cluster_weight);
  cfg.set("n_clusters", static_cast<std::int64_t>(cc.n_clusters));
  cfg.set("cluster_sigma_deg", cc.cluster_sigma_deg);
  return cfg;
}

ClusterConfig cluster_config_from_config(const ConfigMap& cfg) {
  ClusterConfig cc;
  cc.cluster_weight = cfg.get_double("cluster_weight", 0.0);
  cc.n_clusters = static_cast<int>(cfg.get_int("n_clusters", 0));
  cc.cluster_sigma_deg = cfg.get_double("cluster_sigma_deg", 0.01);
  return cc;
}

}  // namespace celeste
