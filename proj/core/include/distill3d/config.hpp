#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace distill3d {

// Flat key-value configuration. Files are plain text, one `key = value` per
// line, '#' starts a comment. Later sources (file, CLI overrides) win over
// profile defaults.
class Config {
public:
    static Config profile_defaults(const std::string& profile);  // "desk" | "paper"

    void load_file(const std::string& path);
    void set(const std::string& key, const std::string& value);
    bool has(const std::string& key) const;

    std::string get_str(const std::string& key) const;
    double get_double(const std::string& key) const;
    int get_int(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    // Parses "a,b" (or "a b") pairs, e.g. noise bands.
    std::pair<double, double> get_pair(const std::string& key) const;

    const std::map<std::string, std::string>& entries() const { return kv_; }

private:
    std::map<std::string, std::string> kv_;
};

}  // namespace distill3d
