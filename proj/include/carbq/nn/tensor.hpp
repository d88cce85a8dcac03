#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "carbq/error.hpp"

namespace carbq::nn {

/// Dense NCHW tensor.
template <typename T>
struct Tensor {
    int n = 0;
    int c = 0;
    int h = 0;
    int w = 0;
    std::vector<T> values;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_, T fill = T(0))
        : n(n_), c(c_), h(h_), w(w_),
          values(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

    std::size_t size() const noexcept { return values.size(); }
    std::size_t plane_size() const noexcept { return static_cast<std::size_t>(h) * w; }

    T* plane(int ni, int ci) noexcept { return values.data() + (static_cast<std::size_t>(ni) * c + ci) * plane_size(); }
    const T* plane(int ni, int ci) const noexcept {
        return values.data() + (static_cast<std::size_t>(ni) * c + ci) * plane_size();
    }

    T& operator()(int ni, int ci, int y, int x) noexcept { return plane(ni, ci)[static_cast<std::size_t>(y) * w + x]; }
    T operator()(int ni, int ci, int y, int x) const noexcept {
        return plane(ni, ci)[static_cast<std::size_t>(y) * w + x];
    }

    bool same_shape(const Tensor& o) const noexcept { return n == o.n && c == o.c && h == o.h && w == o.w; }

    std::string shape_string() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + ")";
    }

    void fill(T v) { std::fill(values.begin(), values.end(), v); }

    bool all_finite() const {
        return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
    Tensor<To> out(t.n, t.c, t.h, t.w);
    std::transform(t.values.begin(), t.values.end(), out.values.begin(), [](From v) { return static_cast<To>(v); });
    return out;
}

} // namespace carbq::nn
