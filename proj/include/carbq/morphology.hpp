#pragma once

// Per-carbide geometry: outer contours, convex hulls, minimum-area rectangles.
// Everything works on pixel centers; an n x m block spans (n-1) x (m-1).

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "carbq/components.hpp"
#include "carbq/error.hpp"
#include "carbq/masking.hpp"
#include "carbq/metrics.hpp"

namespace carbq {

struct Vec2 {
    double x = 0.0;
    double y = 0.0;
    friend bool operator==(const Vec2&, const Vec2&) = default;
};

inline double cross(const Vec2& o, const Vec2& a, const Vec2& b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

// ---------------------------------------------------------------------------
// Border following

/// Outer border of one component, traced Suzuki-Abe style with 8-adjacency.
/// Starts at the topmost-then-leftmost pixel and runs counter-clockwise as
/// seen on screen (down the left side first). Only the component's own
/// pixels are considered, so neighbouring components never leak in.
inline std::vector<Point> trace_outer_contour(const Component& c) {
    if (c.pixels.empty()) {
        throw InvalidArgument("trace_outer_contour: empty component");
    }
    int x0 = c.pixels[0].x, x1 = x0, y0 = c.pixels[0].y, y1 = y0;
    for (const auto& p : c.pixels) {
        x0 = std::min(x0, p.x);
        x1 = std::max(x1, p.x);
        y0 = std::min(y0, p.y);
        y1 = std::max(y1, p.y);
    }
    // local raster with a one pixel border of background
    const int w = x1 - x0 + 3;
    const int h = y1 - y0 + 3;
    std::vector<std::uint8_t> on(static_cast<std::size_t>(w) * h, 0);
    for (const auto& p : c.pixels) {
        on[static_cast<std::size_t>(p.y - y0 + 1) * w + (p.x - x0 + 1)] = 1;
    }
    auto set = [&](Point p) { return on[static_cast<std::size_t>(p.y) * w + p.x] != 0; };
    auto step = [](Point p, int d) { return Point{p.x + detail::kDx8[d], p.y + detail::kDy8[d]}; };
    auto dir_to = [](Point from, Point to) {
        for (int d = 0; d < 8; ++d) {
            if (from.x + detail::kDx8[d] == to.x && from.y + detail::kDy8[d] == to.y) {
                return d;
            }
        }
        return -1;
    };

    const Point start = *std::min_element(c.pixels.begin(), c.pixels.end());
    const Point p0{start.x - x0 + 1, start.y - y0 + 1};
    auto to_global = [&](Point p) { return Point{p.x + x0 - 1, p.y + y0 - 1}; };

    // clockwise scan from the west neighbour (always background) for i1
    int found = -1;
    for (int k = 0; k < 8; ++k) {
        const int d = (4 - k + 8) % 8;
        if (set(step(p0, d))) {
            found = d;
            break;
        }
    }
    std::vector<Point> out{start};
    if (found < 0) {
        return out;
    }
    const Point i1 = step(p0, found);
    Point i2 = i1;
    Point i3 = p0;
    while (true) {
        const int from = dir_to(i3, i2);
        Point i4 = i3;
        for (int k = 1; k <= 8; ++k) {
            const int d = (from + k) % 8;
            if (set(step(i3, d))) {
                i4 = step(i3, d);
                break;
            }
        }
        if (i4 == p0 && i3 == i1) {
            break;
        }
        out.push_back(to_global(i4));
        i2 = i3;
        i3 = i4;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convex hull (monotone chain)

/// Counter-clockwise in (x, y) (positive signed area), starting from the
/// smallest (x, y). Collinear points are dropped. One distinct point gives a
/// single vertex, a collinear set gives its two endpoints.
inline std::vector<Vec2> convex_hull(std::vector<Vec2> pts) {
    if (pts.empty()) {
        throw InvalidArgument("convex_hull: no points");
    }
    std::sort(pts.begin(), pts.end(), [](const Vec2& a, const Vec2& b) { return a.x < b.x || (a.x == b.x && a.y < b.y); });
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    if (pts.size() < 3) {
        return pts;
    }
    std::vector<Vec2> hull(2 * pts.size());
    std::size_t k = 0;
    for (const auto& p : pts) {
        while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) {
            --k;
        }
        hull[k++] = p;
    }
    const std::size_t lower = k + 1;
    for (std::size_t i = pts.size() - 1; i-- > 0;) {
        while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) {
            --k;
        }
        hull[k++] = pts[i];
    }
    hull.resize(k - 1);
    return hull;
}

inline std::vector<Vec2> to_vec2(const std::vector<Point>& pts) {
    std::vector<Vec2> out;
    out.reserve(pts.size());
    for (const auto& p : pts) {
        out.push_back({static_cast<double>(p.x), static_cast<double>(p.y)});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Minimum-area rectangle

struct RotatedRect {
    Vec2 center;
    double long_edge = 1.0;
    double short_edge = 1.0;
    double angle_deg = 0.0; // long edge vs rightward horizontal, CCW on screen, [-90, 90)

    double area() const noexcept { return long_edge * short_edge; }
    double aspect_ratio() const noexcept { return long_edge / short_edge; }
};

/// Maps any angle into [-90, 90) with 180 degree periodicity. Values are
/// rounded to 1e-9 degree so float noise cannot flip a bin edge.
inline double normalize_angle(double deg) {
    double a = std::fmod(deg, 180.0);
    if (a >= 90.0) {
        a -= 180.0;
    } else if (a < -90.0) {
        a += 180.0;
    }
    a = std::round(a * 1e9) / 1e9;
    if (a >= 90.0) {
        a -= 180.0;
    }
    return a == 0.0 ? 0.0 : a; // no -0
}

/// Screen angle of a direction in image coordinates (y grows downward).
inline double direction_angle(double dx, double dy) {
    return normalize_angle(std::atan2(-dy, dx) * 180.0 / std::numbers::pi);
}

namespace detail {

inline bool angle_preferred(double a, double b) {
    if (std::abs(a) != std::abs(b)) {
        return std::abs(a) < std::abs(b);
    }
    return a < b;
}

inline bool near_equal(double a, double b) { return std::abs(a - b) <= 1e-9 * std::max({1.0, std::abs(a), std::abs(b)}); }

/// Angle of the long edge given the two edge directions and their lengths.
inline double long_edge_angle(Vec2 u, double len_u, Vec2 v, double len_v) {
    const double au = direction_angle(u.x, u.y);
    const double av = direction_angle(v.x, v.y);
    if (near_equal(len_u, len_v)) {
        return angle_preferred(au, av) ? au : av;
    }
    return len_u > len_v ? au : av;
}

} // namespace detail

/// Rotating calipers over the hull edges. Equal areas resolve to the smaller
/// |angle|, then the smaller angle. A point is 1 x 1; a segment is
/// max(length, 1) x 1.
inline RotatedRect min_area_rect(const std::vector<Vec2>& hull) {
    if (hull.empty()) {
        throw InvalidArgument("min_area_rect: empty hull");
    }
    RotatedRect r;
    if (hull.size() == 1) {
        r.center = hull[0];
        return r;
    }
    if (hull.size() == 2) {
        const double dx = hull[1].x - hull[0].x;
        const double dy = hull[1].y - hull[0].y;
        const double len = std::hypot(dx, dy);
        r.center = {(hull[0].x + hull[1].x) / 2.0, (hull[0].y + hull[1].y) / 2.0};
        r.long_edge = std::max(len, 1.0);
        r.short_edge = 1.0;
        r.angle_deg = detail::long_edge_angle({dx, dy}, r.long_edge, {-dy, dx}, r.short_edge);
        return r;
    }

    bool have = false;
    double best_area = 0.0;
    const std::size_t n = hull.size();
    for (std::size_t i = 0; i < n; ++i) {
        const Vec2& a = hull[i];
        const Vec2& b = hull[(i + 1) % n];
        const double len = std::hypot(b.x - a.x, b.y - a.y);
        const Vec2 u{(b.x - a.x) / len, (b.y - a.y) / len};
        const Vec2 v{-u.y, u.x};
        double s0 = 0.0, s1 = 0.0, t0 = 0.0, t1 = 0.0;
        for (const auto& q : hull) {
            const double s = (q.x - a.x) * u.x + (q.y - a.y) * u.y;
            const double t = (q.x - a.x) * v.x + (q.y - a.y) * v.y;
            s0 = std::min(s0, s);
            s1 = std::max(s1, s);
            t0 = std::min(t0, t);
            t1 = std::max(t1, t);
        }
        const double ws = s1 - s0;
        const double wt = t1 - t0;
        const double area = ws * wt;
        const double angle = detail::long_edge_angle(u, ws, v, wt);
        bool take = !have;
        if (have) {
            if (detail::near_equal(area, best_area)) {
                take = detail::angle_preferred(angle, r.angle_deg);
            } else {
                take = area < best_area;
            }
        }
        if (take) {
            have = true;
            best_area = area;
            const double sm = (s0 + s1) / 2.0;
            const double tm = (t0 + t1) / 2.0;
            r.center = {a.x + u.x * sm + v.x * tm, a.y + u.y * sm + v.y * tm};
            r.long_edge = std::max(ws, wt);
            r.short_edge = std::min(ws, wt);
            r.angle_deg = angle;
        }
    }
    return r;
}

inline double orientation_angle(const RotatedRect& r) { return r.angle_deg; }

/// Corners in order around the rectangle.
inline std::vector<Vec2> rect_corners(const RotatedRect& r) {
    const double a = r.angle_deg * std::numbers::pi / 180.0;
    const Vec2 u{std::cos(a), -std::sin(a)};
    const Vec2 v{-u.y, u.x};
    const double hl = r.long_edge / 2.0;
    const double hs = r.short_edge / 2.0;
    std::vector<Vec2> out;
    for (auto [sl, ss] : {std::pair{-1, -1}, {1, -1}, {1, 1}, {-1, 1}}) {
        out.push_back({r.center.x + sl * hl * u.x + ss * hs * v.x, r.center.y + sl * hl * u.y + ss * hs * v.y});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Features

struct CarbideFeature {
    int label = 0;
    std::size_t area_px = 0;
    std::optional<double> area_nm2;
    RotatedRect rect;
    double angle_deg = 0.0;
    double aspect_ratio = 1.0;
};

inline CarbideFeature feature_of(const Component& c, std::optional<double> nm_per_px) {
    CarbideFeature f;
    f.label = c.label;
    f.area_px = c.area_px();
    if (nm_per_px) {
        f.area_nm2 = static_cast<double>(f.area_px) * *nm_per_px * *nm_per_px;
    }
    f.rect = min_area_rect(convex_hull(to_vec2(trace_outer_contour(c))));
    f.angle_deg = f.rect.angle_deg;
    f.aspect_ratio = f.rect.aspect_ratio();
    return f;
}

/// One feature per component of at least min_area pixels, in label order.
inline std::vector<CarbideFeature> extract_features(const BinaryMask& mask, std::optional<double> nm_per_px = std::nullopt,
                                                    int min_area = kNoiseMinArea,
                                                    Connectivity conn = kDefaultConnectivity) {
    std::vector<CarbideFeature> out;
    for (const auto& c : connected_components(mask, conn)) {
        if (c.area_px() >= static_cast<std::size_t>(std::max(min_area, 0))) {
            out.push_back(feature_of(c, nm_per_px));
        }
    }
    return out;
}

inline constexpr const char* kFeatureCsvHeader =
    "image_id,component_label,area_px,area_nm2,angle_deg,aspect_ratio,center_x,center_y,long_edge,short_edge\n";

inline std::string feature_csv_row(const std::string& image_id, const CarbideFeature& f) {
    return image_id + "," + std::to_string(f.label) + "," + std::to_string(f.area_px) + "," +
           (f.area_nm2 ? format_number(*f.area_nm2) : std::string()) + "," + format_number(f.angle_deg) + "," +
           format_number(f.aspect_ratio) + "," + format_number(f.rect.center.x) + "," +
           format_number(f.rect.center.y) + "," + format_number(f.rect.long_edge) + "," +
           format_number(f.rect.short_edge) + "\n";
}

} // namespace carbq
