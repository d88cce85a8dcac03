#pragma once

// Independent reference computations shared by the unit tests and the
// acceptance runner. Nothing here calls the code it is used to check,
// except to obtain the quantity under test.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "carbq/morphology.hpp"
#include "carbq/nn/unet.hpp"
#include "carbq/random.hpp"

namespace carbq::oracle {

// Relative error with a floor on the denominator, so parameters whose true
// gradient is ~0 are compared in absolute terms at that scale.
inline double rel_error(double a, double b, double floor = 1e-6) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_layer;
    std::size_t checked = 0;
};

// Zero biases put every pre-activation whose 3x3 input patch is all-zero
// exactly on the ReLU kink, where central differences average the two
// one-sided slopes. A gradient check needs a random net that is
// differentiable at the probe point, so biases are randomized too.
inline void randomize_biases(nn::UNetParams<double>& p, Rng& rng, double scale = 0.1) {
    for (auto& l : p.layers)
        for (double& b : l.bias) b = rng.uniform(-scale, scale);
}

// Central finite differences of the mean BCE over every kernel and bias entry.
inline GradCheckResult finite_difference_check(const nn::UNetParams<double>& p, const nn::Tensor<double>& x,
                                               const nn::Tensor<double>& y, double h = 1e-5) {
    nn::ForwardCache<double> cache;
    nn::forward(p, x, &cache);
    const auto grads = nn::backward(p, cache, y);
    auto probe = p;
    auto loss = [&] { return nn::bce_loss(nn::forward(probe, x), y, p.config.epsilon); };
    GradCheckResult r;
    auto visit = [&](double& theta, double analytic, const std::string& layer) {
        const double saved = theta;
        theta = saved + h;
        const double up = loss();
        theta = saved - h;
        const double down = loss();
        theta = saved;
        const double e = rel_error(analytic, (up - down) / (2 * h));
        ++r.checked;
        if (e > r.max_rel_error) {
            r.max_rel_error = e;
            r.worst_layer = layer;
        }
    };
    for (std::size_t li = 0; li < probe.layers.size(); ++li) {
        auto& l = probe.layers[li];
        for (std::size_t k = 0; k < l.weight.values.size(); ++k)
            visit(l.weight.values[k], grads.layers[li].weight.values[k], l.spec.name);
        for (std::size_t k = 0; k < l.bias.size(); ++k) visit(l.bias[k], grads.layers[li].bias[k], l.spec.name);
    }
    return r;
}

// Scalar reference: -(1/N) sum [y log p + (1-y) log(1-p)] with clamping, in long double.
inline double bce_reference(const std::vector<double>& p, const std::vector<double>& y, double eps) {
    long double s = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const long double q = std::min<long double>(std::max<long double>(p[i], eps), 1.0L - eps);
        s += y[i] == 1.0 ? std::log(q) : std::log(1.0L - q);
    }
    return static_cast<double>(-s / static_cast<long double>(p.size()));
}

// ---------------------------------------------------------------------------
// Geometry

// Hull vertices by brute force: (a, b) is a hull edge when no point lies
// strictly to its right and no collinear point lies beyond its ends. The
// vertex set is every endpoint of such an edge. O(n^3).
inline std::vector<Vec2> hull_vertices_bruteforce(std::vector<Vec2> pts) {
    std::sort(pts.begin(), pts.end(), [](const Vec2& a, const Vec2& b) { return a.x < b.x || (a.x == b.x && a.y < b.y); });
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    std::vector<Vec2> out;
    auto add = [&](const Vec2& p) {
        if (std::find(out.begin(), out.end(), p) == out.end()) out.push_back(p);
    };
    if (pts.size() <= 2) return pts;
    for (std::size_t i = 0; i < pts.size(); ++i)
        for (std::size_t j = 0; j < pts.size(); ++j) {
            if (i == j) continue;
            const Vec2 a = pts[i], b = pts[j];
            bool edge = true;
            for (std::size_t k = 0; k < pts.size() && edge; ++k) {
                if (k == i || k == j) continue;
                const Vec2 c = pts[k];
                const double cr = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
                if (cr < 0) edge = false;
                if (cr == 0) {
                    const double t = (c.x - a.x) * (b.x - a.x) + (c.y - a.y) * (b.y - a.y);
                    const double len2 = (b.x - a.x) * (b.x - a.x) + (b.y - a.y) * (b.y - a.y);
                    if (t < 0 || t > len2) edge = false;
                }
            }
            if (edge) {
                add(a);
                add(b);
            }
        }
    std::sort(out.begin(), out.end(), [](const Vec2& a, const Vec2& b) { return a.x < b.x || (a.x == b.x && a.y < b.y); });
    return out;
}

struct SweepResult {
    double area = 0.0;
    double long_angle_deg = 0.0; // screen convention, [-90, 90)
    double long_edge = 0.0;
    double short_edge = 0.0;
};

// Axis-aligned bounding box of the points rotated through [0, 180) in
// fixed steps; keeps the smallest box.
inline SweepResult rotation_sweep(const std::vector<Vec2>& pts, double step_deg = 0.1) {
    SweepResult best;
    bool have = false;
    const int steps = static_cast<int>(std::lround(180.0 / step_deg));
    for (int s = 0; s < steps; ++s) {
        const double th = s * step_deg * 3.14159265358979323846 / 180.0;
        const double ux = std::cos(th), uy = std::sin(th);
        double a0 = 1e300, a1 = -1e300, b0 = 1e300, b1 = -1e300;
        for (const auto& p : pts) {
            const double a = p.x * ux + p.y * uy;
            const double b = -p.x * uy + p.y * ux;
            a0 = std::min(a0, a);
            a1 = std::max(a1, a);
            b0 = std::min(b0, b);
            b1 = std::max(b1, b);
        }
        const double wa = a1 - a0, wb = b1 - b0;
        if (!have || wa * wb < best.area) {
            have = true;
            best.area = wa * wb;
            // long side direction in image coordinates, then flipped to screen angle
            const double dx = wa >= wb ? ux : -uy;
            const double dy = wa >= wb ? uy : ux;
            double ang = std::atan2(-dy, dx) * 180.0 / 3.14159265358979323846;
            while (ang >= 90.0) ang -= 180.0;
            while (ang < -90.0) ang += 180.0;
            best.long_angle_deg = ang;
            best.long_edge = std::max(wa, wb);
            best.short_edge = std::min(wa, wb);
        }
    }
    return best;
}

// Distance between two undirected axis angles in degrees, in [0, 90].
inline double axis_angle_diff(double a, double b) {
    double d = std::fmod(std::abs(a - b), 180.0);
    return std::min(d, 180.0 - d);
}

} // namespace carbq::oracle
