#pragma once

// Image- and class-level statistics over extracted carbide features, and the
// report files built from them.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "carbq/dataset.hpp"
#include "carbq/error.hpp"
#include "carbq/fileio.hpp"
#include "carbq/metrics.hpp"
#include "carbq/morphology.hpp"

namespace carbq {

inline constexpr int kOrientationBins = 18;

struct OrientationHistogram {
    std::array<std::size_t, kOrientationBins> counts{};

    static double lower_edge(int i) { return -90.0 + 10.0 * i; }
    std::size_t total() const noexcept {
        std::size_t s = 0;
        for (auto c : counts) {
            s += c;
        }
        return s;
    }
    OrientationHistogram& operator+=(const OrientationHistogram& o) noexcept {
        for (int i = 0; i < kOrientationBins; ++i) {
            counts[i] += o.counts[i];
        }
        return *this;
    }
    friend bool operator==(const OrientationHistogram&, const OrientationHistogram&) = default;
};

/// Bin i covers [-90 + 10i, -80 + 10i).
inline int orientation_bin(double deg) {
    if (!(deg >= -90.0 && deg < 90.0)) {
        throw InvalidArgument("orientation " + format_number(deg) + " is outside [-90, 90)");
    }
    int i = static_cast<int>(std::floor((deg + 90.0) / 10.0));
    return std::clamp(i, 0, kOrientationBins - 1);
}

inline OrientationHistogram bin_orientations(const std::vector<double>& angles) {
    OrientationHistogram h;
    for (double a : angles) {
        ++h.counts[orientation_bin(a)];
    }
    return h;
}

/// Share of carbides in the fullest bin; absent when there are none.
inline std::optional<double> alignment_factor(const OrientationHistogram& h) {
    const std::size_t n = h.total();
    if (n == 0) {
        return std::nullopt;
    }
    return static_cast<double>(*std::max_element(h.counts.begin(), h.counts.end())) / static_cast<double>(n);
}

inline double carbide_fraction(const BinaryMask& mask) {
    if (mask.empty()) {
        throw InvalidArgument("carbide_fraction: empty mask");
    }
    return static_cast<double>(carbide_count(mask)) / static_cast<double>(mask.size());
}

// ---------------------------------------------------------------------------
// Per image

struct ImageStats {
    std::string image_id;
    ClassLabel class_label = ClassLabel::LB;
    double carbide_fraction = 0.0;
    std::size_t n_carbides = 0;
    std::optional<double> alignment_k;
    std::optional<double> mean_aspect;
    OrientationHistogram histogram;
};

struct FeatureRecord {
    std::string image_id;
    ClassLabel class_label = ClassLabel::LB;
    CarbideFeature feature;
};

/// mask is the denoised mask the features were extracted from.
inline ImageStats image_stats(const std::string& id, ClassLabel label, const BinaryMask& mask,
                              const std::vector<CarbideFeature>& features) {
    ImageStats s;
    s.image_id = id;
    s.class_label = label;
    s.carbide_fraction = carbide_fraction(mask);
    s.n_carbides = features.size();
    std::vector<double> angles;
    double aspect_sum = 0.0;
    for (const auto& f : features) {
        angles.push_back(f.angle_deg);
        aspect_sum += f.aspect_ratio;
    }
    s.histogram = bin_orientations(angles);
    s.alignment_k = alignment_factor(s.histogram);
    if (!features.empty()) {
        s.mean_aspect = aspect_sum / static_cast<double>(features.size());
    }
    return s;
}

// ---------------------------------------------------------------------------
// Aggregation

struct MeanStd {
    std::size_t n = 0;
    double mean = 0.0;
    double std = 0.0; // population
};

/// Values are summed in sorted order so the result does not depend on the
/// order images arrive in.
inline MeanStd mean_std(std::vector<double> v) {
    MeanStd m;
    m.n = v.size();
    if (v.empty()) {
        return m;
    }
    std::sort(v.begin(), v.end());
    double s = 0.0;
    for (double x : v) {
        s += x;
    }
    m.mean = s / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) {
        ss += (x - m.mean) * (x - m.mean);
    }
    m.std = std::sqrt(ss / static_cast<double>(v.size()));
    return m;
}

struct SizeHistogram {
    double bin_width = 1.0;
    std::string unit = "px";
    std::vector<std::size_t> counts; // bin i covers [i*w, (i+1)*w)

    std::size_t total() const noexcept {
        std::size_t s = 0;
        for (auto c : counts) {
            s += c;
        }
        return s;
    }
};

inline std::size_t size_bin(double area, double width) {
    // a quotient within 1e-9 of an integer is that integer, so 0.3 / 0.1
    // lands in bin 3 as written rather than 2.9999999999999996
    const double q = area / width;
    const double r = std::round(q);
    if (std::abs(q - r) <= 1e-9 * std::max(1.0, r)) {
        return static_cast<std::size_t>(r);
    }
    return static_cast<std::size_t>(std::floor(q));
}

inline SizeHistogram size_distribution(const std::vector<double>& areas, double bin_width, std::string unit = "px") {
    if (!(bin_width > 0.0)) {
        throw InvalidArgument("size_distribution: bin width must be positive");
    }
    SizeHistogram h;
    h.bin_width = bin_width;
    h.unit = std::move(unit);
    for (double a : areas) {
        if (!(a >= 0.0)) {
            throw InvalidArgument("size_distribution: negative area");
        }
        const std::size_t i = size_bin(a, bin_width);
        if (i >= h.counts.size()) {
            h.counts.resize(i + 1, 0);
        }
        ++h.counts[i];
    }
    return h;
}

/// Areas in nm^2 when every feature carries a scale, pixels otherwise.
inline SizeHistogram size_distribution(const std::vector<CarbideFeature>& features, double bin_width) {
    const bool nm = !features.empty() &&
                    std::all_of(features.begin(), features.end(), [](const auto& f) { return f.area_nm2.has_value(); });
    std::vector<double> areas;
    for (const auto& f : features) {
        areas.push_back(nm ? *f.area_nm2 : static_cast<double>(f.area_px));
    }
    return size_distribution(areas, bin_width, nm ? "nm2" : "px");
}

struct ClassSummary {
    ClassLabel class_label = ClassLabel::LB;
    std::size_t n_images = 0;
    std::size_t n_carbides = 0;
    MeanStd fraction; // per image
    MeanStd k;        // per image, over images with at least one carbide
    MeanStd aspect;   // per carbide, pooled across images
    OrientationHistogram orientations;
    SizeHistogram sizes;
};

/// size_features, when given, replaces features for the size histogram
/// (stitched grids count a carbide cut by a tile border once).
inline ClassSummary aggregate_class(const std::vector<ImageStats>& stats, const std::vector<FeatureRecord>& features,
                                    ClassLabel label, double size_bin_width,
                                    const std::vector<FeatureRecord>* size_features = nullptr) {
    ClassSummary c;
    c.class_label = label;
    std::vector<double> fr, ks, asp;
    for (const auto& s : stats) {
        if (s.class_label != label) {
            continue;
        }
        ++c.n_images;
        fr.push_back(s.carbide_fraction);
        if (s.alignment_k) {
            ks.push_back(*s.alignment_k);
        }
        c.orientations += s.histogram;
    }
    if (c.n_images == 0) {
        throw InvalidArgument("aggregate_class: no images labelled " + to_string(label));
    }
    for (const auto& f : features) {
        if (f.class_label == label) {
            ++c.n_carbides;
            asp.push_back(f.feature.aspect_ratio);
        }
    }
    std::vector<CarbideFeature> for_size;
    for (const auto& f : size_features ? *size_features : features) {
        if (f.class_label == label) {
            for_size.push_back(f.feature);
        }
    }
    c.fraction = mean_std(fr);
    c.k = mean_std(ks);
    c.aspect = mean_std(asp);
    c.sizes = size_distribution(for_size, size_bin_width);
    return c;
}

// ---------------------------------------------------------------------------
// Report files

struct AnalysisReport {
    std::vector<ImageStats> images;
    std::vector<FeatureRecord> features;
    std::optional<std::vector<FeatureRecord>> size_features;
    double size_bin_width = 50.0;
};

namespace detail {

inline std::string opt_number(const std::optional<double>& v) { return v ? format_number(*v) : std::string(); }

// JSON number carrying only 6 significant digits
inline nlohmann::json json6(double v) { return std::stod(format_number(v)); }

inline nlohmann::json mean_std_json(const MeanStd& m) {
    if (m.n == 0) {
        return {{"mean", nullptr}, {"std", nullptr}};
    }
    return {{"mean", json6(m.mean)}, {"std", json6(m.std)}};
}

} // namespace detail

inline std::string image_stats_csv(const std::vector<ImageStats>& rows) {
    std::string out = "image_id,class_label,carbide_fraction,n_carbides,alignment_k,mean_aspect\n";
    for (const auto& s : rows) {
        out += s.image_id + "," + to_string(s.class_label) + "," + format_number(s.carbide_fraction) + "," +
               std::to_string(s.n_carbides) + "," + detail::opt_number(s.alignment_k) + "," +
               detail::opt_number(s.mean_aspect) + "\n";
    }
    return out;
}

inline std::string features_csv(const std::vector<FeatureRecord>& rows) {
    std::string out = kFeatureCsvHeader;
    for (const auto& r : rows) {
        out += feature_csv_row(r.image_id, r.feature);
    }
    return out;
}

inline std::vector<ClassSummary> summarize_classes(const AnalysisReport& r) {
    std::vector<ClassSummary> out;
    for (ClassLabel label : {ClassLabel::LB, ClassLabel::TM}) {
        const bool present = std::any_of(r.images.begin(), r.images.end(),
                                         [&](const ImageStats& s) { return s.class_label == label; });
        if (present) {
            out.push_back(aggregate_class(r.images, r.features, label, r.size_bin_width,
                                          r.size_features ? &*r.size_features : nullptr));
        }
    }
    return out;
}

inline nlohmann::json summary_json(const std::vector<ClassSummary>& classes) {
    nlohmann::json j = nlohmann::json::object();
    for (ClassLabel label : {ClassLabel::LB, ClassLabel::TM}) {
        ClassSummary empty;
        empty.class_label = label;
        const ClassSummary* c = &empty;
        for (const auto& s : classes) {
            if (s.class_label == label) {
                c = &s;
            }
        }
        j[to_string(label)] = {{"fraction", detail::mean_std_json(c->fraction)},
                               {"k", detail::mean_std_json(c->k)},
                               {"aspect", detail::mean_std_json(c->aspect)},
                               {"n_images", c->n_images},
                               {"n_carbides", c->n_carbides}};
    }
    return j;
}

inline std::string orientation_csv(const std::vector<ClassSummary>& classes) {
    std::string out = "class_label,bin_lo,bin_hi,count\n";
    for (const auto& c : classes) {
        for (int i = 0; i < kOrientationBins; ++i) {
            out += to_string(c.class_label) + "," + format_number(OrientationHistogram::lower_edge(i)) + "," +
                   format_number(OrientationHistogram::lower_edge(i + 1)) + "," +
                   std::to_string(c.orientations.counts[i]) + "\n";
        }
    }
    return out;
}

inline std::string size_csv(const std::vector<ClassSummary>& classes) {
    std::string out = "class_label,unit,bin_lo,bin_hi,count\n";
    for (const auto& c : classes) {
        const double w = c.sizes.bin_width;
        for (std::size_t i = 0; i < c.sizes.counts.size(); ++i) {
            out += to_string(c.class_label) + "," + c.sizes.unit + "," + format_number(static_cast<double>(i) * w) +
                   "," + format_number(static_cast<double>(i + 1) * w) + "," + std::to_string(c.sizes.counts[i]) +
                   "\n";
        }
    }
    return out;
}

/// Writes image_stats.csv, features.csv, summary.json,
/// orientation_histogram.csv and size_histogram.csv into dir.
inline void emit_report(const fs::path& dir, const AnalysisReport& r) {
    const auto classes = summarize_classes(r);
    write_file_atomic(dir / "image_stats.csv", image_stats_csv(r.images));
    write_file_atomic(dir / "features.csv", features_csv(r.features));
    write_file_atomic(dir / "summary.json", summary_json(classes).dump(2) + "\n");
    write_file_atomic(dir / "orientation_histogram.csv", orientation_csv(classes));
    write_file_atomic(dir / "size_histogram.csv", size_csv(classes));
}

} // namespace carbq
