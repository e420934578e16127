#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace ealm {

// "key = value" text files with '#' comments; insertion order is kept so a
// config serializes back deterministically.
class KeyValue {
public:
    static KeyValue parse(const std::string& text);
    static KeyValue load(const std::string& path);

    bool has(const std::string& key) const;
    const std::string& str(const std::string& key) const;
    std::string str_or(const std::string& key, const std::string& fallback) const;
    int64_t i64(const std::string& key) const;
    int64_t i64_or(const std::string& key, int64_t fallback) const;
    double f64(const std::string& key) const;
    double f64_or(const std::string& key, double fallback) const;
    bool flag_or(const std::string& key, bool fallback) const;

    void set(const std::string& key, const std::string& value);
    void set_i64(const std::string& key, int64_t v);
    void set_f64(const std::string& key, double v);

    // keys beginning with "<prefix>." in insertion order, suffix returned
    std::vector<std::pair<std::string, std::string>> with_prefix(const std::string& prefix) const;

    std::string serialize() const;
    void save(const std::string& path) const;

private:
    std::vector<std::string> order_;
    std::map<std::string, std::string> values_;
};

}  // namespace ealm
