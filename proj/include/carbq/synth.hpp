#pragma once

// Synthetic micrographs with exactly known masks: oriented rectangles and
// ellipses on a flat matrix, placed without overlap.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "carbq/analytics.hpp"
#include "carbq/dataset.hpp"
#include "carbq/error.hpp"
#include "carbq/fileio.hpp"
#include "carbq/image.hpp"
#include "carbq/masking.hpp"
#include "carbq/metrics.hpp"
#include "carbq/morphology.hpp"
#include "carbq/random.hpp"

namespace carbq {

enum class BlobKind { rectangle, ellipse };

inline std::string to_string(BlobKind k) { return k == BlobKind::rectangle ? "rectangle" : "ellipse"; }

/// Uniform on [-90, 90), or a wrapped Gaussian: mean + sigma * z folded
/// into [-90, 90) with period 180.
struct OrientationLaw {
    bool concentrated = false;
    double mean_deg = 0.0;
    double sigma_deg = 0.0;
};

struct IntensityLaw {
    double mean = 0.0;
    double std = 0.0;
};

struct SynthSpec {
    int n_images = 200;
    int image_w = 128;
    int image_h = 96;
    int blobs_min = 6;
    int blobs_max = 12;
    double ellipse_fraction = 0.5;
    double long_min = 12.0;
    double long_max = 30.0;
    double aspect_min = 1.5;
    double aspect_max = 4.0;
    OrientationLaw orientation;
    IntensityLaw carbide{190.0, 12.0}; // per blob level
    IntensityLaw matrix{80.0, 12.0};   // per image level
    double noise_std = 10.0;
    int min_gap = 2;         // background pixels kept between blobs
    int max_attempts = 2000; // per blob
    std::uint64_t seed = 1;
    std::optional<double> nm_per_px;
    int magnification = 1;
};

inline void validate(const SynthSpec& s) {
    auto bad = [](const std::string& m) { throw ConfigError("synth spec: " + m); };
    if (s.n_images < 0) bad("n_images must be >= 0");
    if (s.image_w <= 0 || s.image_h <= 0) bad("image size must be positive");
    if (s.blobs_min < 0 || s.blobs_max < s.blobs_min) bad("need 0 <= blobs_min <= blobs_max");
    if (!(s.ellipse_fraction >= 0.0 && s.ellipse_fraction <= 1.0)) bad("ellipse_fraction must be in [0, 1]");
    if (!(s.long_min > 0.0 && s.long_max >= s.long_min)) bad("need 0 < long_min <= long_max");
    if (!(s.aspect_min >= 1.0 && s.aspect_max >= s.aspect_min)) bad("need 1 <= aspect_min <= aspect_max");
    if (s.orientation.concentrated && !(s.orientation.sigma_deg >= 0.0)) bad("orientation sigma must be >= 0");
    if (s.carbide.std < 0 || s.matrix.std < 0 || s.noise_std < 0) bad("standard deviations must be >= 0");
    if (s.min_gap < 1) bad("min_gap must be >= 1 so blobs never touch");
    if (s.max_attempts < 1) bad("max_attempts must be >= 1");
    if (s.nm_per_px && !(*s.nm_per_px > 0.0)) bad("nm_per_px must be positive");
}

struct SynthBlob {
    BlobKind kind = BlobKind::rectangle;
    double center_x = 0.0;
    double center_y = 0.0;
    double long_axis = 0.0;
    double short_axis = 0.0;
    double angle_deg = 0.0;
    std::size_t area_px = 0; // rendered pixel count

    double aspect() const noexcept { return long_axis / short_axis; }
};

struct SynthRecord {
    std::string id;
    ClassLabel class_label = ClassLabel::LB;
    GrayImage image;
    BinaryMask truth_mask;
    std::vector<SynthBlob> blobs;
};

// ---------------------------------------------------------------------------
// Orientation law

inline double sample_orientation(const OrientationLaw& law, Rng& rng) {
    if (!law.concentrated) {
        return normalize_angle(rng.uniform(-90.0, 90.0));
    }
    return normalize_angle(law.mean_deg + law.sigma_deg * rng.normal());
}

/// Density of the orientation law at deg (per degree).
inline double orientation_density(const OrientationLaw& law, double deg) {
    if (!law.concentrated) {
        return 1.0 / 180.0;
    }
    const double s = law.sigma_deg;
    double f = 0.0;
    const int wraps = 2 + static_cast<int>(std::ceil(6.0 * s / 180.0));
    for (int k = -wraps; k <= wraps; ++k) {
        const double z = (deg - law.mean_deg + 180.0 * k) / s;
        f += std::exp(-0.5 * z * z);
    }
    return f / (s * std::sqrt(2.0 * std::numbers::pi));
}

/// Probability mass of the fullest 10-degree bin, by Simpson integration of
/// the density over each bin.
inline double concentration_expectation(const OrientationLaw& law) {
    if (!law.concentrated) {
        return 1.0 / kOrientationBins;
    }
    if (law.sigma_deg == 0.0) {
        return 1.0;
    }
    constexpr int kSteps = 400; // even
    double best = 0.0;
    for (int b = 0; b < kOrientationBins; ++b) {
        const double lo = -90.0 + 10.0 * b;
        const double h = 10.0 / kSteps;
        double s = orientation_density(law, lo) + orientation_density(law, lo + 10.0);
        for (int i = 1; i < kSteps; ++i) {
            s += (i % 2 ? 4.0 : 2.0) * orientation_density(law, lo + i * h);
        }
        best = std::max(best, s * h / 3.0);
    }
    return best;
}

inline double concentration_expectation(const SynthSpec& s) { return concentration_expectation(s.orientation); }

// ---------------------------------------------------------------------------
// Rendering

inline bool inside_blob(BlobKind kind, double u, double v, double half_long, double half_short) {
    if (kind == BlobKind::rectangle) {
        return std::abs(u) <= half_long && std::abs(v) <= half_short;
    }
    return (u * u) / (half_long * half_long) + (v * v) / (half_short * half_short) <= 1.0;
}

/// Pixels whose centers fall inside the ideal shape.
inline std::vector<Point> rasterize_blob(const SynthBlob& b, int w, int h) {
    const double a = b.angle_deg * std::numbers::pi / 180.0;
    const double c = std::cos(a), s = std::sin(a);
    const double r = b.long_axis / 2.0 + 1.0;
    const int x0 = std::max(0, static_cast<int>(std::floor(b.center_x - r)));
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(b.center_x + r)));
    const int y0 = std::max(0, static_cast<int>(std::floor(b.center_y - r)));
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(b.center_y + r)));
    std::vector<Point> out;
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            const double dx = x - b.center_x;
            const double dy = y - b.center_y;
            // long axis points along (cos a, -sin a) on screen
            const double u = dx * c - dy * s;
            const double v = dx * s + dy * c;
            if (inside_blob(b.kind, u, v, b.long_axis / 2.0, b.short_axis / 2.0)) {
                out.push_back({x, y});
            }
        }
    }
    return out;
}

namespace detail {

inline bool single_component(const std::vector<Point>& px) {
    int x0 = px[0].x, x1 = x0, y0 = px[0].y, y1 = y0;
    for (auto p : px) {
        x0 = std::min(x0, p.x);
        x1 = std::max(x1, p.x);
        y0 = std::min(y0, p.y);
        y1 = std::max(y1, p.y);
    }
    const int w = x1 - x0 + 1, h = y1 - y0 + 1;
    std::vector<std::uint8_t> v(static_cast<std::size_t>(w) * h, 0);
    for (auto p : px) {
        v[static_cast<std::size_t>(p.y - y0) * w + (p.x - x0)] = 1;
    }
    return connected_components(BinaryMask(w, h, std::move(v)), Connectivity::eight).size() == 1;
}

} // namespace detail

inline std::string synth_id(int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "synth_%04d", i);
    return buf;
}

/// One image; depends only on the SynthSpec and the image index.
inline SynthRecord generate_one(const SynthSpec& spec, int index) {
    Rng rng(Rng::derive(spec.seed, static_cast<std::uint64_t>(index)));
    const int w = spec.image_w, h = spec.image_h;
    SynthRecord rec;
    rec.id = synth_id(index);
    rec.class_label = index % 2 == 0 ? ClassLabel::LB : ClassLabel::TM;

    std::vector<std::uint8_t> mask(static_cast<std::size_t>(w) * h, 0);
    std::vector<std::uint8_t> blocked(mask.size(), 0);
    std::vector<double> level(mask.size(), 0.0);
    const double matrix_level = rng.normal(spec.matrix.mean, spec.matrix.std);
    std::fill(level.begin(), level.end(), matrix_level);

    const int n_blobs = spec.blobs_min + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.blobs_max - spec.blobs_min + 1)));
    for (int k = 0; k < n_blobs; ++k) {
        bool placed = false;
        for (int attempt = 0; attempt < spec.max_attempts && !placed; ++attempt) {
            SynthBlob b;
            b.kind = rng.uniform() < spec.ellipse_fraction ? BlobKind::ellipse : BlobKind::rectangle;
            b.long_axis = rng.uniform(spec.long_min, spec.long_max);
            b.short_axis = b.long_axis / rng.uniform(spec.aspect_min, spec.aspect_max);
            b.angle_deg = sample_orientation(spec.orientation, rng);
            const double r = b.long_axis / 2.0 + 1.0;
            if (2.0 * r >= w - 1 || 2.0 * r >= h - 1) {
                continue;
            }
            b.center_x = rng.uniform(r, w - 1 - r);
            b.center_y = rng.uniform(r, h - 1 - r);
            const auto px = rasterize_blob(b, w, h);
            if (px.size() < static_cast<std::size_t>(kNoiseMinArea)) {
                continue;
            }
            const bool clash = std::any_of(px.begin(), px.end(), [&](Point p) {
                return blocked[static_cast<std::size_t>(p.y) * w + p.x] != 0;
            });
            if (clash || !detail::single_component(px)) {
                continue;
            }
            const double carbide_level = rng.normal(spec.carbide.mean, spec.carbide.std);
            for (auto p : px) {
                const std::size_t i = static_cast<std::size_t>(p.y) * w + p.x;
                mask[i] = 1;
                level[i] = carbide_level;
                for (int dy = -spec.min_gap; dy <= spec.min_gap; ++dy) {
                    for (int dx = -spec.min_gap; dx <= spec.min_gap; ++dx) {
                        const int x = p.x + dx, y = p.y + dy;
                        if (x >= 0 && y >= 0 && x < w && y < h) {
                            blocked[static_cast<std::size_t>(y) * w + x] = 1;
                        }
                    }
                }
            }
            b.area_px = px.size();
            rec.blobs.push_back(b);
            placed = true;
        }
        if (!placed) {
            throw InvalidArgument("synth: could not place blob " + std::to_string(k + 1) + " of " +
                                  std::to_string(n_blobs) + " in " + rec.id + " after " +
                                  std::to_string(spec.max_attempts) +
                                  " attempts; use fewer blobs per image or a smaller long axis");
        }
    }

    std::vector<std::uint8_t> px(mask.size());
    for (std::size_t i = 0; i < px.size(); ++i) {
        const double noise = spec.noise_std > 0.0 ? rng.normal(0.0, spec.noise_std) : 0.0;
        px[i] = detail::round_half_up(level[i] + noise);
    }
    rec.image = GrayImage(w, h, std::move(px));
    rec.truth_mask = BinaryMask(w, h, std::move(mask));
    return rec;
}

inline std::vector<SynthRecord> generate(const SynthSpec& spec) {
    validate(spec);
    std::vector<SynthRecord> out;
    out.reserve(static_cast<std::size_t>(spec.n_images));
    for (int i = 0; i < spec.n_images; ++i) {
        out.push_back(generate_one(spec, i));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Spec JSON

inline nlohmann::json to_json(const SynthSpec& s) {
    nlohmann::json j = {
        {"n_images", s.n_images},
        {"image_w", s.image_w},
        {"image_h", s.image_h},
        {"blobs_min", s.blobs_min},
        {"blobs_max", s.blobs_max},
        {"ellipse_fraction", s.ellipse_fraction},
        {"long_min", s.long_min},
        {"long_max", s.long_max},
        {"aspect_min", s.aspect_min},
        {"aspect_max", s.aspect_max},
        {"orientation",
         {{"law", s.orientation.concentrated ? "concentrated" : "uniform"},
          {"mean_deg", s.orientation.mean_deg},
          {"sigma_deg", s.orientation.sigma_deg}}},
        {"carbide", {{"mean", s.carbide.mean}, {"std", s.carbide.std}}},
        {"matrix", {{"mean", s.matrix.mean}, {"std", s.matrix.std}}},
        {"noise_std", s.noise_std},
        {"min_gap", s.min_gap},
        {"max_attempts", s.max_attempts},
        {"seed", s.seed},
        {"magnification", s.magnification},
    };
    if (s.nm_per_px) {
        j["nm_per_px"] = *s.nm_per_px;
    }
    return j;
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline SynthSpec synth_spec_from_json(const nlohmann::json& j) {
    if (!j.is_object()) {
        throw ConfigError("synth spec: expected a JSON object");
    }
    SynthSpec s;
    try {
        detail::reject_unknown_keys(j,
                            {"n_images", "image_w", "image_h", "blobs_min", "blobs_max", "ellipse_fraction", "long_min",
                             "long_max", "aspect_min", "aspect_max", "orientation", "carbide", "matrix", "noise_std",
                             "min_gap", "max_attempts", "seed", "nm_per_px", "magnification"},
                            "synth spec");
        auto get = [&](const char* k, auto& dst) {
            if (j.contains(k)) {
                dst = j.at(k).get<std::decay_t<decltype(dst)>>();
            }
        };
        get("n_images", s.n_images);
        get("image_w", s.image_w);
        get("image_h", s.image_h);
        get("blobs_min", s.blobs_min);
        get("blobs_max", s.blobs_max);
        get("ellipse_fraction", s.ellipse_fraction);
        get("long_min", s.long_min);
        get("long_max", s.long_max);
        get("aspect_min", s.aspect_min);
        get("aspect_max", s.aspect_max);
        get("noise_std", s.noise_std);
        get("min_gap", s.min_gap);
        get("max_attempts", s.max_attempts);
        get("seed", s.seed);
        get("magnification", s.magnification);
        if (j.contains("nm_per_px") && !j.at("nm_per_px").is_null()) {
            s.nm_per_px = j.at("nm_per_px").get<double>();
        }
        if (j.contains("orientation")) {
            const auto& o = j.at("orientation");
            detail::reject_unknown_keys(o, {"law", "mean_deg", "sigma_deg"}, "synth spec orientation");
            const std::string law = o.value("law", "uniform");
            if (law != "uniform" && law != "concentrated") {
                throw ConfigError("synth spec: orientation law must be uniform or concentrated, got \"" + law + "\"");
            }
            s.orientation.concentrated = law == "concentrated";
            s.orientation.mean_deg = o.value("mean_deg", 0.0);
            s.orientation.sigma_deg = o.value("sigma_deg", 0.0);
        }
        for (auto [key, law] : {std::pair{"carbide", &s.carbide}, std::pair{"matrix", &s.matrix}}) {
            if (j.contains(key)) {
                const auto& o = j.at(key);
                detail::reject_unknown_keys(o, {"mean", "std"}, std::string("synth spec ") + key);
                law->mean = o.value("mean", law->mean);
                law->std = o.value("std", law->std);
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("synth spec: ") + e.what());
    } catch (const InvalidArgument& e) {
        throw ConfigError(e.what());
    }
    validate(s);
    return s;
}

// ---------------------------------------------------------------------------
// Dataset on disk

inline constexpr const char* kTruthCsvHeader =
    "image_id,blob,kind,center_x,center_y,long_axis,short_axis,aspect,angle_deg,area_px\n";

inline std::string truth_features_csv(const std::vector<SynthRecord>& recs) {
    std::string out = kTruthCsvHeader;
    for (const auto& r : recs) {
        for (std::size_t k = 0; k < r.blobs.size(); ++k) {
            const auto& b = r.blobs[k];
            out += r.id + "," + std::to_string(k + 1) + "," + to_string(b.kind) + "," + format_number(b.center_x) +
                   "," + format_number(b.center_y) + "," + format_number(b.long_axis) + "," +
                   format_number(b.short_axis) + "," + format_number(b.aspect()) + "," + format_number(b.angle_deg) +
                   "," + std::to_string(b.area_px) + "\n";
        }
    }
    return out;
}

/// Threshold-set member nearest the midpoint of the two intensity means;
/// ties go to the lower value.
inline int synth_threshold(const SynthSpec& s, const ThresholdSet& ts) {
    const double mid = (s.carbide.mean + s.matrix.mean) / 2.0;
    int best = ts[0];
    for (int t : ts) {
        if (std::abs(t - mid) < std::abs(best - mid)) {
            best = t;
        }
    }
    return best;
}

/// Writes images/, masks/, truth_features.csv, synth_spec.json and
/// manifest.json under dir. Entries are recorded as curated with the truth
/// mask as their mask file, then split 80/10/10 with the SynthSpec seed.
inline Manifest write_synth_dataset(const SynthSpec& spec, const fs::path& dir) {
    const auto recs = generate(spec);
    Manifest m;
    m.base_dir = dir;
    const int t = synth_threshold(spec, m.default_threshold_set);
    for (const auto& r : recs) {
        ManifestEntry e;
        e.id = r.id;
        e.image_path = "images/" + r.id + ".pgm";
        e.class_label = r.class_label;
        e.magnification = spec.magnification;
        e.nm_per_px = spec.nm_per_px;
        e.chosen_threshold = t;
        e.mask_path = default_mask_path(r.id);
        save_pgm(dir / e.image_path, r.image);
        save_mask(dir / *e.mask_path, r.truth_mask);
        m.entries.push_back(std::move(e));
    }
    write_file_atomic(dir / "truth_features.csv", truth_features_csv(recs));
    write_file_atomic(dir / "synth_spec.json", to_json(spec).dump(2) + "\n");
    if (m.entries.size() >= 3) {
        m = split_manifest(m, SplitRatios{}, spec.seed);
    }
    save_manifest(dir / "manifest.json", m);
    return m;
}

} // namespace carbq
