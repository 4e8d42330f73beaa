// Shared helpers for the unit and acceptance tests.
#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>
#include <vector>

#include "crossan/diffcore.hpp"
#include "crossan/util.hpp"

namespace crossan::testing {

inline std::vector<double> randn(std::size_t n, Rng& rng, double sd = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal(0.0, sd);
    return v;
}

inline Var rand_var(Shape shape, Rng& rng, double sd = 1.0, bool grad = true) {
    return tensor(shape, randn(shape_numel(shape), rng, sd), grad);
}

// Removes itself on destruction.
class TempDir {
   public:
    explicit TempDir(const std::string& tag = "t") {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("crossan_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

   private:
    std::filesystem::path path_;
};

}  // namespace crossan::testing
