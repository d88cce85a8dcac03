#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "carbq/error.hpp"
#include "carbq/image.hpp"

namespace carbq {

/// Per-pixel label: 1 = carbide, 0 = iron matrix.
using BinaryMask = Raster<MaskKind>;

enum class Connectivity { four = 4, eight = 8 };

inline Connectivity connectivity_from_int(int n) {
    if (n == 4) {
        return Connectivity::four;
    }
    if (n == 8) {
        return Connectivity::eight;
    }
    throw InvalidArgument("connectivity must be 4 or 8, got " + std::to_string(n));
}

struct Point {
    int x = 0;
    int y = 0;
    friend bool operator==(const Point&, const Point&) = default;
    friend auto operator<=>(const Point& a, const Point& b) {
        if (auto c = a.y <=> b.y; c != 0) {
            return c;
        }
        return a.x <=> b.x;
    }
};

struct Component {
    int label = 0;             // 1-based, in first-encounter raster order
    std::vector<Point> pixels; // raster order
    std::size_t area_px() const noexcept { return pixels.size(); }
};

/// Label image: 0 for background, otherwise the component label.
struct LabelMap {
    int width = 0;
    int height = 0;
    std::vector<int> labels;
    int operator()(int x, int y) const noexcept { return labels[static_cast<std::size_t>(y) * width + x]; }
};

namespace detail {

inline constexpr int kDx8[8] = {1, 1, 0, -1, -1, -1, 0, 1};
inline constexpr int kDy8[8] = {0, -1, -1, -1, 0, 1, 1, 1};

} // namespace detail

/// Maximal connected carbide regions. Labels follow the raster position of
/// each component's first pixel.
inline std::vector<Component> connected_components(const BinaryMask& mask, Connectivity conn, LabelMap* label_map = nullptr) {
    const int w = mask.width();
    const int h = mask.height();
    std::vector<int> labels(mask.size(), 0);
    std::vector<Component> out;
    std::vector<Point> stack;
    const auto data = mask.data();
    const int step = conn == Connectivity::eight ? 1 : 2; // 4-conn uses the even (axial) directions only
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::size_t idx = static_cast<std::size_t>(y) * w + x;
            if (data[idx] == 0 || labels[idx] != 0) {
                continue;
            }
            Component comp;
            comp.label = static_cast<int>(out.size()) + 1;
            labels[idx] = comp.label;
            stack.push_back({x, y});
            while (!stack.empty()) {
                const Point p = stack.back();
                stack.pop_back();
                comp.pixels.push_back(p);
                for (int d = 0; d < 8; d += step) {
                    const int nx = p.x + detail::kDx8[d];
                    const int ny = p.y + detail::kDy8[d];
                    if (nx < 0 || ny < 0 || nx >= w || ny >= h) {
                        continue;
                    }
                    const std::size_t n = static_cast<std::size_t>(ny) * w + nx;
                    if (data[n] != 0 && labels[n] == 0) {
                        labels[n] = comp.label;
                        stack.push_back({nx, ny});
                    }
                }
            }
            std::sort(comp.pixels.begin(), comp.pixels.end());
            out.push_back(std::move(comp));
        }
    }
    if (label_map != nullptr) {
        *label_map = LabelMap{w, h, std::move(labels)};
    }
    return out;
}

} // namespace carbq
