#pragma once

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "carbq/image.hpp"
#include "carbq/nn/tensor.hpp"
#include "carbq/random.hpp"

namespace carbq::test {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "t") {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("carbq_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
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

template <typename T>
nn::Tensor<T> random_tensor(Rng& rng, int n, int c, int h, int w, double lo = -1.0, double hi = 1.0) {
    nn::Tensor<T> t(n, c, h, w);
    for (T& v : t.values) {
        v = static_cast<T>(rng.uniform(lo, hi));
    }
    return t;
}

inline GrayImage random_image(Rng& rng, int w, int h) {
    std::vector<std::uint8_t> px(static_cast<std::size_t>(w) * h);
    for (auto& v : px) {
        v = static_cast<std::uint8_t>(rng.below(256));
    }
    return GrayImage(w, h, std::move(px));
}

} // namespace carbq::test
