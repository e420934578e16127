#include "ealm/config.hpp"

#include <fstream>
#include <sstream>

#include "ealm/errors.hpp"

namespace ealm {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace

KeyValue KeyValue::parse(const std::string& text) {
    KeyValue kv;
    std::istringstream is(text);
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        line_no++;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": expected key = value, got '" + t + "'");
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
        kv.set(key, value);
    }
    return kv;
}

KeyValue KeyValue::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("config: cannot read " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return parse(os.str());
}

bool KeyValue::has(const std::string& key) const { return values_.count(key) != 0; }

const std::string& KeyValue::str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("config: missing required key '" + key + "'");
    return it->second;
}

std::string KeyValue::str_or(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

int64_t KeyValue::i64(const std::string& key) const {
    const std::string& v = str(key);
    try {
        size_t pos = 0;
        int64_t x = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' is not an integer: '" + v + "'");
    }
}

int64_t KeyValue::i64_or(const std::string& key, int64_t fallback) const {
    return has(key) ? i64(key) : fallback;
}

double KeyValue::f64(const std::string& key) const {
    const std::string& v = str(key);
    try {
        size_t pos = 0;
        double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' is not a number: '" + v + "'");
    }
}

double KeyValue::f64_or(const std::string& key, double fallback) const {
    return has(key) ? f64(key) : fallback;
}

bool KeyValue::flag_or(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string& v = str(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config: key '" + key + "' is not a boolean: '" + v + "'");
}

void KeyValue::set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) order_.push_back(key);
    values_[key] = value;
}

void KeyValue::set_i64(const std::string& key, int64_t v) { set(key, std::to_string(v)); }

void KeyValue::set_f64(const std::string& key, double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    set(key, os.str());
}

std::vector<std::pair<std::string, std::string>> KeyValue::with_prefix(
    const std::string& prefix) const {
    std::vector<std::pair<std::string, std::string>> out;
    const std::string p = prefix + ".";
    for (const auto& key : order_)
        if (key.rfind(p, 0) == 0) out.push_back({key.substr(p.size()), values_.at(key)});
    return out;
}

std::string KeyValue::serialize() const {
    std::ostringstream os;
    for (const auto& key : order_) os << key << " = " << values_.at(key) << "\n";
    return os.str();
}

void KeyValue::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("config: cannot write " + path);
    f << serialize();
}

}  // namespace ealm
