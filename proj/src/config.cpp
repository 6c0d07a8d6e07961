#include "seer/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "seer/errors.hpp"

namespace seer {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& value) {
    std::vector<std::string> items;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) items.push_back(item);
    }
    return items;
}

std::uint64_t to_u64(const std::string& s, const std::string& what) {
    char* end = nullptr;
    const std::uint64_t v = std::strtoull(s.c_str(), &end, 10);
    if (end == s.c_str() || *end != '\0')
        throw DataError("config: expected integer for " + what + ", got '" + s + "'");
    return v;
}

double to_f64(const std::string& s, const std::string& what) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0')
        throw DataError("config: expected number for " + what + ", got '" + s + "'");
    return v;
}

}  // namespace

bool Config::has(const std::string& section, const std::string& key) const {
    const auto s = sections_.find(section);
    return s != sections_.end() && s->second.count(key) > 0;
}

std::string Config::get_str(const std::string& section, const std::string& key,
                            const std::string& fallback) const {
    const auto s = sections_.find(section);
    if (s == sections_.end()) return fallback;
    const auto k = s->second.find(key);
    return k == s->second.end() ? fallback : k->second;
}

std::string Config::require_str(const std::string& section, const std::string& key) const {
    if (!has(section, key))
        throw DataError("config: missing required key [" + section + "] " + key);
    return get_str(section, key, "");
}

std::uint64_t Config::get_u64(const std::string& section, const std::string& key,
                              std::uint64_t fallback) const {
    if (!has(section, key)) return fallback;
    return to_u64(get_str(section, key, ""), section + "." + key);
}

double Config::get_f64(const std::string& section, const std::string& key,
                       double fallback) const {
    if (!has(section, key)) return fallback;
    return to_f64(get_str(section, key, ""), section + "." + key);
}

bool Config::get_flag(const std::string& section, const std::string& key, bool fallback) const {
    if (!has(section, key)) return fallback;
    const std::string v = get_str(section, key, "");
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw DataError("config: expected flag for " + section + "." + key + ", got '" + v + "'");
}

std::vector<std::uint64_t> Config::get_u64_list(const std::string& section, const std::string& key,
                                                std::vector<std::uint64_t> fallback) const {
    if (!has(section, key)) return fallback;
    std::vector<std::uint64_t> out;
    for (const std::string& item : split_list(get_str(section, key, "")))
        out.push_back(to_u64(item, section + "." + key));
    return out;
}

std::vector<double> Config::get_f64_list(const std::string& section, const std::string& key,
                                         std::vector<double> fallback) const {
    if (!has(section, key)) return fallback;
    std::vector<double> out;
    for (const std::string& item : split_list(get_str(section, key, "")))
        out.push_back(to_f64(item, section + "." + key));
    return out;
}

std::vector<std::string> Config::get_str_list(const std::string& section, const std::string& key,
                                              std::vector<std::string> fallback) const {
    if (!has(section, key)) return fallback;
    return split_list(get_str(section, key, ""));
}

void Config::set(const std::string& section, const std::string& key, const std::string& value) {
    sections_[section][key] = value;
}

Config parse_config_text(const std::string& text) {
    Config cfg;
    std::stringstream ss(text);
    std::string line;
    std::string section;
    std::size_t lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const auto hash = line.find_first_of("#;");
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw DataError("config: unterminated section header at line " +
                                std::to_string(lineno));
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty())
                throw DataError("config: empty section name at line " + std::to_string(lineno));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw DataError("config: expected key=value at line " + std::to_string(lineno));
        const std::string key = trim(line.substr(0, eq));
        if (key.empty())
            throw DataError("config: empty key at line " + std::to_string(lineno));
        cfg.set(section, key, trim(line.substr(eq + 1)));
    }
    return cfg;
}

Config parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

}  // namespace seer
