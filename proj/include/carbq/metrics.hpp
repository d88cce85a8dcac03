#pragma once

// Pixelwise evaluation: confusion counts, accuracy, IoU, error overlays.

#include <array>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <json.hpp>

#include "carbq/dataset.hpp"
#include "carbq/error.hpp"
#include "carbq/fileio.hpp"
#include "carbq/image.hpp"
#include "carbq/masking.hpp"

namespace carbq {

struct ConfusionCounts {
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;
    std::size_t tn = 0;

    std::size_t total() const noexcept { return tp + fp + fn + tn; }

    ConfusionCounts& operator+=(const ConfusionCounts& o) noexcept {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }

    friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

inline void require_same_size(const BinaryMask& a, const BinaryMask& b, const char* what) {
    if (a.width() != b.width() || a.height() != b.height()) {
        throw InvalidArgument(std::string(what) + ": prediction is " + std::to_string(a.width()) + "x" +
                              std::to_string(a.height()) + ", truth is " + std::to_string(b.width()) + "x" +
                              std::to_string(b.height()));
    }
}

inline ConfusionCounts confusion(const BinaryMask& pred, const BinaryMask& truth) {
    require_same_size(pred, truth, "confusion");
    ConfusionCounts c;
    const auto p = pred.data();
    const auto t = truth.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i]) {
            ++(t[i] ? c.tp : c.fp);
        } else {
            ++(t[i] ? c.fn : c.tn);
        }
    }
    return c;
}

inline double pixel_accuracy(const ConfusionCounts& c) {
    if (c.total() == 0) {
        throw InvalidArgument("pixel_accuracy: no pixels");
    }
    return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

/// tp / (tp + fp + fn); 1.0 when neither mask has carbide.
inline double iou(const ConfusionCounts& c) {
    const std::size_t uni = c.tp + c.fp + c.fn;
    return uni == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(uni);
}

// ---------------------------------------------------------------------------
// Overlay: per-pixel class index map

enum class OverlayClass : std::uint8_t { tn = 0, tp = 1, fn = 2, fp = 3 };

struct PaletteEntry {
    OverlayClass cls;
    const char* name;
    const char* color;
    std::array<std::uint8_t, 3> rgb;
};

inline constexpr std::array<PaletteEntry, 4> kOverlayPalette{{
    {OverlayClass::tn, "TN", "pink", {255, 182, 193}},
    {OverlayClass::tp, "TP", "yellow", {255, 230, 0}},
    {OverlayClass::fn, "FN", "green", {0, 170, 0}},
    {OverlayClass::fp, "FP", "red", {220, 0, 0}},
}};

/// Index map with one OverlayClass value per pixel. Stored as a GrayImage so
/// it round-trips through the canonical PGM codec.
inline GrayImage overlay(const BinaryMask& pred, const BinaryMask& truth) {
    require_same_size(pred, truth, "overlay");
    std::vector<std::uint8_t> out(pred.size());
    const auto p = pred.data();
    const auto t = truth.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        OverlayClass c = OverlayClass::tn;
        if (p[i] && t[i]) {
            c = OverlayClass::tp;
        } else if (!p[i] && t[i]) {
            c = OverlayClass::fn;
        } else if (p[i]) {
            c = OverlayClass::fp;
        }
        out[i] = static_cast<std::uint8_t>(c);
    }
    return GrayImage(pred.width(), pred.height(), std::move(out));
}

inline ConfusionCounts overlay_histogram(const GrayImage& ov) {
    ConfusionCounts c;
    for (auto v : ov.data()) {
        switch (static_cast<OverlayClass>(v)) {
        case OverlayClass::tn:
            ++c.tn;
            break;
        case OverlayClass::tp:
            ++c.tp;
            break;
        case OverlayClass::fn:
            ++c.fn;
            break;
        case OverlayClass::fp:
            ++c.fp;
            break;
        default:
            throw InvalidArgument("overlay: index " + std::to_string(v) + " is not a class");
        }
    }
    return c;
}

inline nlohmann::json overlay_legend() {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& e : kOverlayPalette) {
        j.push_back({{"index", static_cast<int>(e.cls)},
                     {"class", e.name},
                     {"color", e.color},
                     {"rgb", {e.rgb[0], e.rgb[1], e.rgb[2]}}});
    }
    return j;
}

/// Binary PPM (P6) rendering of an index map through the palette.
inline std::vector<std::uint8_t> render_overlay_ppm(const GrayImage& ov) {
    const std::string header = "P6\n" + std::to_string(ov.width()) + " " + std::to_string(ov.height()) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(out.size() + 3 * ov.size());
    for (auto v : ov.data()) {
        if (v >= kOverlayPalette.size()) {
            throw InvalidArgument("overlay: index " + std::to_string(v) + " is not a class");
        }
        const auto& rgb = kOverlayPalette[v].rgb;
        out.insert(out.end(), rgb.begin(), rgb.end());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Per-image metric table

struct ImageMetrics {
    std::string image_id;
    Split split = Split::unassigned;
    ConfusionCounts counts;
};

inline std::string format_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

inline std::string metrics_csv(const std::vector<ImageMetrics>& rows) {
    std::string out = "image_id,split,tp,fp,fn,tn,accuracy,iou\n";
    for (const auto& r : rows) {
        const auto& c = r.counts;
        out += r.image_id + "," + to_string(r.split) + "," + std::to_string(c.tp) + "," + std::to_string(c.fp) + "," +
               std::to_string(c.fn) + "," + std::to_string(c.tn) + "," + format_number(pixel_accuracy(c)) + "," +
               format_number(iou(c)) + "\n";
    }
    return out;
}

struct EvalSummary {
    ConfusionCounts pooled;
    double accuracy = 0.0; // pixel-weighted over all images
    double mean_iou = 0.0; // mean of per-image IoU
    std::size_t n_images = 0;
};

inline EvalSummary summarize(const std::vector<ImageMetrics>& rows) {
    EvalSummary s;
    if (rows.empty()) {
        return s;
    }
    double iou_sum = 0.0;
    for (const auto& r : rows) {
        s.pooled += r.counts;
        iou_sum += iou(r.counts);
    }
    s.n_images = rows.size();
    s.accuracy = pixel_accuracy(s.pooled);
    s.mean_iou = iou_sum / static_cast<double>(rows.size());
    return s;
}

} // namespace carbq
