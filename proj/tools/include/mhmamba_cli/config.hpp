#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mhmamba/network.hpp"
#include "mhmamba/training.hpp"

namespace mhm::cli {

/// Bad command line or configuration; maps to exit status 2.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Flat "dotted.key = value" settings. Every known key is present with its default,
/// so a resolved map doubles as the record of a run.
class ConfigMap {
public:
    /// All keys at their defaults.
    ConfigMap();

    /// Applies "key = value" lines; '#' starts a comment. Throws UsageError naming the
    /// line for malformed lines and unknown keys.
    void merge_text(const std::string& text, const std::string& origin);
    void merge_file(const std::filesystem::path& path);
    /// "key=value" from the command line.
    void set_override(const std::string& assignment);
    void set(const std::string& key, const std::string& value);

    const std::string& get(const std::string& key) const;
    std::int64_t get_int(const std::string& key) const;
    std::uint64_t get_u64(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    /// Comma-separated entries, surrounding blanks trimmed; empty value -> empty list.
    std::vector<std::string> get_list(const std::string& key) const;
    std::vector<std::int64_t> get_int_list(const std::string& key) const;
    std::array<std::int64_t, 3> get_dims(const std::string& key) const;

    const std::map<std::string, std::string>& entries() const { return values_; }

    NetworkConfig network() const;
    train::TrainConfig training() const;

private:
    std::map<std::string, std::string> values_;
};

}  // namespace mhm::cli
