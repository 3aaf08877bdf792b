#pragma once

#include "c2v/common.hpp"

#include <cstdint>
#include <map>
#include <set>
#include <string>

namespace c2v {

/// Flat `key = value` configuration. '#' starts a comment line. Every key
/// doubles as a command-line flag (`--key value`).
class Config {
public:
    static Config parse(const std::string& text);
    static Config load(const std::string& path);

    void set(const std::string& key, std::string value) { entries_[key] = std::move(value); }
    bool has(const std::string& key) const { return entries_.contains(key); }
    const std::map<std::string, std::string>& entries() const { return entries_; }

    std::string get(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;

    /// Throws ConfigError naming the first key not in `known`.
    void require_known(const std::set<std::string>& known) const;

    /// Overlays other's entries on top of this one.
    void merge(const Config& other);

    std::string to_text() const;

private:
    std::map<std::string, std::string> entries_;
};

/// Hash of a key-value map in canonical (sorted) order.
std::uint64_t config_hash(const std::map<std::string, std::string>& kv);

}  // namespace c2v
