#pragma once

#include <vector>

#include "refonce/rng.hpp"
#include "refonce/tensor.hpp"

namespace testutil {

template <typename T = float>
refonce::TensorT<T> random(refonce::Shape shape, refonce::Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<T> v(refonce::shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return refonce::TensorT<T>::from(std::move(shape), std::move(v));
}

template <typename T = float>
std::vector<T> random_weights(std::size_t n, refonce::Rng& rng) {
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(rng.uniform(-1.0, 1.0));
    return v;
}

}  // namespace testutil

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

namespace testutil {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
   public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("refonce_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::string str() const { return path_.string(); }
    std::string operator/(const std::string& rel) const { return (path_ / rel).string(); }

   private:
    std::filesystem::path path_;
};

}  // namespace testutil
