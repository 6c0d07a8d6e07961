#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace seer {

// INI-style config: key=value lines grouped under [section] tables. Keys
// before any section header live in the "" section. '#' and ';' start
// comments; duplicate keys keep the last value.
class Config {
  public:
    bool has(const std::string& section, const std::string& key) const;

    std::string get_str(const std::string& section, const std::string& key,
                        const std::string& fallback) const;
    std::string require_str(const std::string& section, const std::string& key) const;

    std::uint64_t get_u64(const std::string& section, const std::string& key,
                          std::uint64_t fallback) const;
    double get_f64(const std::string& section, const std::string& key, double fallback) const;
    bool get_flag(const std::string& section, const std::string& key, bool fallback) const;

    // comma-separated lists
    std::vector<std::uint64_t> get_u64_list(const std::string& section, const std::string& key,
                                            std::vector<std::uint64_t> fallback) const;
    std::vector<double> get_f64_list(const std::string& section, const std::string& key,
                                     std::vector<double> fallback) const;
    std::vector<std::string> get_str_list(const std::string& section, const std::string& key,
                                          std::vector<std::string> fallback) const;

    void set(const std::string& section, const std::string& key, const std::string& value);

  private:
    std::map<std::string, std::map<std::string, std::string>> sections_;
};

Config parse_config_text(const std::string& text);
Config parse_config_file(const std::string& path);

}  // namespace seer
