#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>
#include <string>

#include "mhmamba/volume.hpp"

namespace testutil {

/// max |a - b| / max(|b|, 1), elementwise.
template <typename A, typename B>
double max_rel_diff(const A& a, const B& b) {
    double worst = 0.0;
    const auto da = a.data();
    const auto db = b.data();
    for (std::size_t i = 0; i < da.size(); ++i) {
        const double x = static_cast<double>(da[i]);
        const double y = static_cast<double>(db[i]);
        worst = std::max(worst, std::abs(x - y) / std::max(std::abs(y), 1.0));
    }
    return worst;
}

template <typename T>
bool bitwise_equal(const mhm::Volume5<T>& a, const mhm::Volume5<T>& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.ptr(), b.ptr(), static_cast<std::size_t>(a.numel()) * sizeof(T)) == 0;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("mhm-" + tag + "-" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

}  // namespace testutil
