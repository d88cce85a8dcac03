#pragma once

// Candidate threshold masks and the small-component noise rule.

#include <algorithm>
#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "carbq/components.hpp"
#include "carbq/error.hpp"
#include "carbq/image.hpp"

namespace carbq {

/// Components strictly smaller than this many pixels are treated as noise.
inline constexpr int kNoiseMinArea = 30;
inline constexpr Connectivity kDefaultConnectivity = Connectivity::eight;

/// Sixteen strictly ascending benchmark intensities.
class ThresholdSet {
public:
    static constexpr std::size_t kSize = 16;

    /// 70, 80, ..., 220.
    ThresholdSet() {
        for (std::size_t i = 0; i < kSize; ++i) {
            values_[i] = static_cast<int>(70 + 10 * i);
        }
    }

    explicit ThresholdSet(std::span<const int> values) {
        if (values.size() != kSize) {
            throw InvalidArgument("threshold set needs exactly 16 values, got " + std::to_string(values.size()));
        }
        for (std::size_t i = 0; i < kSize; ++i) {
            if (values[i] < 0 || values[i] > 255) {
                throw InvalidArgument("threshold " + std::to_string(values[i]) + " outside [0, 255]");
            }
            if (i > 0 && values[i] <= values[i - 1]) {
                throw InvalidArgument("thresholds must be strictly ascending");
            }
            values_[i] = values[i];
        }
    }

    explicit ThresholdSet(const std::vector<int>& values) : ThresholdSet(std::span<const int>(values)) {}

    int operator[](std::size_t i) const noexcept { return values_[i]; }
    std::size_t size() const noexcept { return kSize; }
    const int* begin() const noexcept { return values_.data(); }
    const int* end() const noexcept { return values_.data() + kSize; }

    bool contains(int t) const noexcept { return std::binary_search(values_.begin(), values_.end(), t); }

    std::vector<int> to_vector() const { return {values_.begin(), values_.end()}; }

    friend bool operator==(const ThresholdSet&, const ThresholdSet&) = default;

private:
    std::array<int, kSize> values_{};
};

/// Carbide iff intensity > t.
inline BinaryMask threshold_mask(const GrayImage& img, int t) {
    if (t < 0 || t > 255) {
        throw InvalidArgument("threshold " + std::to_string(t) + " outside [0, 255]");
    }
    std::vector<std::uint8_t> out(img.size());
    const auto src = img.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = src[i] > t ? 1 : 0;
    }
    return BinaryMask(img.width(), img.height(), std::move(out));
}

inline std::vector<BinaryMask> candidate_masks(const GrayImage& img, const ThresholdSet& ts) {
    std::vector<BinaryMask> out;
    out.reserve(ts.size());
    for (int t : ts) {
        out.push_back(threshold_mask(img, t));
    }
    return out;
}

/// Relabels every carbide component with fewer than min_area pixels as iron.
inline BinaryMask denoise(const BinaryMask& mask, int min_area = kNoiseMinArea, Connectivity conn = kDefaultConnectivity) {
    if (min_area < 0) {
        throw InvalidArgument("denoise: min_area must be >= 0");
    }
    std::vector<std::uint8_t> out(mask.data().begin(), mask.data().end());
    for (const auto& c : connected_components(mask, conn)) {
        if (c.area_px() < static_cast<std::size_t>(min_area)) {
            for (const Point& p : c.pixels) {
                out[static_cast<std::size_t>(p.y) * mask.width() + p.x] = 0;
            }
        }
    }
    return BinaryMask(mask.width(), mask.height(), std::move(out));
}

inline std::size_t carbide_count(const BinaryMask& mask) {
    return static_cast<std::size_t>(std::count(mask.data().begin(), mask.data().end(), std::uint8_t{1}));
}

// ---------------------------------------------------------------------------
// On disk a mask is a PGM with 0 (iron) and 255 (carbide).

inline GrayImage mask_to_image(const BinaryMask& mask) {
    std::vector<std::uint8_t> out(mask.size());
    const auto src = mask.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = src[i] ? 255 : 0;
    }
    return GrayImage(mask.width(), mask.height(), std::move(out));
}

inline BinaryMask image_to_mask(const GrayImage& img) {
    std::vector<std::uint8_t> out(img.size());
    const auto src = img.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (src[i] == 255) {
            out[i] = 1;
        } else if (src[i] == 0) {
            out[i] = 0;
        } else {
            throw InvalidArgument("mask raster holds value " + std::to_string(src[i]) + " at pixel " +
                                  std::to_string(i) + "; only 0 and 255 are allowed");
        }
    }
    return BinaryMask(img.width(), img.height(), std::move(out));
}

inline std::vector<std::uint8_t> encode_mask_pgm(const BinaryMask& mask) { return encode_pgm(mask_to_image(mask)); }

inline BinaryMask decode_mask_pgm(std::span<const std::uint8_t> bytes) { return image_to_mask(decode_pgm(bytes)); }

inline BinaryMask load_mask(const fs::path& path) {
    try {
        return image_to_mask(load_pgm(path));
    } catch (const InvalidArgument& e) {
        throw InvalidArgument(path.string() + ": " + e.what());
    }
}

inline void save_mask(const fs::path& path, const BinaryMask& mask) { save_pgm(path, mask_to_image(mask)); }

} // namespace carbq
