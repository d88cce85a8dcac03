#pragma once

// Encoder-decoder segmentation network with skip connections.
//
// Per encoder level: two 3x3 conv + ReLU, then 2x2 max pooling.
// Bottleneck: two 3x3 conv + ReLU.
// Per decoder level: 2x2 up-convolution, concatenation with the encoder
// features of that level, two 3x3 conv + ReLU.
// Head: 1x1 projection to one channel and a sigmoid.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "carbq/error.hpp"
#include "carbq/nn/layers.hpp"
#include "carbq/nn/tensor.hpp"
#include "carbq/random.hpp"

namespace carbq::nn {

struct UNetConfig {
    int input_h = 96;
    int input_w = 128;
    int depth = 3;
    int base_channels = 8;
    std::uint64_t seed = 0;
    double learning_rate = 0.05;
    int batch_size = 8;
    int epochs = 60;
    double epsilon = 1e-7;

    int channels(int level) const { return base_channels << level; }

    void validate() const {
        if (input_h <= 0 || input_w <= 0 || depth < 0 || base_channels <= 0 || batch_size <= 0 || epochs <= 0) {
            throw InvalidArgument("unet config: sizes, depth, channels, batch size and epochs must be positive");
        }
        const int div = 1 << depth;
        if (input_h % div != 0 || input_w % div != 0) {
            throw InvalidArgument("unet config: input " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                                  " not divisible by 2^depth = " + std::to_string(div));
        }
        if (!(learning_rate > 0.0) || !(epsilon > 0.0) || !(epsilon < 0.5)) {
            throw InvalidArgument("unet config: learning_rate must be > 0 and epsilon in (0, 0.5)");
        }
    }

    friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

inline nlohmann::json to_json(const UNetConfig& c) {
    return {{"input_h", c.input_h},       {"input_w", c.input_w},     {"depth", c.depth},
            {"base_channels", c.base_channels}, {"seed", c.seed},     {"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size}, {"epochs", c.epochs},       {"epsilon", c.epsilon}};
}

/// Applies the keys present in j on top of base. Unknown keys are rejected.
inline UNetConfig config_from_json(const nlohmann::json& j, UNetConfig base = {}) {
    if (!j.is_object()) {
        throw InvalidArgument("unet config must be a JSON object");
    }
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "input_h") {
                base.input_h = v.get<int>();
            } else if (key == "input_w") {
                base.input_w = v.get<int>();
            } else if (key == "depth") {
                base.depth = v.get<int>();
            } else if (key == "base_channels") {
                base.base_channels = v.get<int>();
            } else if (key == "seed") {
                base.seed = v.get<std::uint64_t>();
            } else if (key == "learning_rate") {
                base.learning_rate = v.get<double>();
            } else if (key == "batch_size") {
                base.batch_size = v.get<int>();
            } else if (key == "epochs") {
                base.epochs = v.get<int>();
            } else if (key == "epsilon") {
                base.epsilon = v.get<double>();
            } else {
                throw InvalidArgument("unet config: unknown key \"" + key + "\"");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw InvalidArgument(std::string("unet config: ") + e.what());
    }
    base.validate();
    return base;
}

enum class LayerKind { conv3x3, upconv2x2, conv1x1 };

struct LayerSpec {
    std::string name;
    LayerKind kind;
    int in_c;
    int out_c;

    /// Kernel tensor dimensions (n, c, h, w) in storage order.
    std::vector<int> kernel_shape() const {
        switch (kind) {
        case LayerKind::conv3x3:
            return {out_c, in_c, 3, 3};
        case LayerKind::upconv2x2:
            return {in_c, out_c, 2, 2};
        case LayerKind::conv1x1:
            break;
        }
        return {out_c, in_c, 1, 1};
    }

    /// Inputs feeding one output element, for initialization scale.
    int fan_in() const {
        switch (kind) {
        case LayerKind::conv3x3:
            return in_c * 9;
        case LayerKind::upconv2x2:
            return in_c; // stride 2, kernel 2: each output sees one tap per input channel
        case LayerKind::conv1x1:
            break;
        }
        return in_c;
    }
};

/// Fixed layer order for a configuration.
inline std::vector<LayerSpec> layer_layout(const UNetConfig& cfg) {
    std::vector<LayerSpec> out;
    for (int l = 0; l < cfg.depth; ++l) {
        const int in = l == 0 ? 1 : cfg.channels(l - 1);
        out.push_back({"enc" + std::to_string(l) + ".conv1", LayerKind::conv3x3, in, cfg.channels(l)});
        out.push_back({"enc" + std::to_string(l) + ".conv2", LayerKind::conv3x3, cfg.channels(l), cfg.channels(l)});
    }
    const int bott_in = cfg.depth == 0 ? 1 : cfg.channels(cfg.depth - 1);
    out.push_back({"bottleneck.conv1", LayerKind::conv3x3, bott_in, cfg.channels(cfg.depth)});
    out.push_back({"bottleneck.conv2", LayerKind::conv3x3, cfg.channels(cfg.depth), cfg.channels(cfg.depth)});
    for (int l = cfg.depth - 1; l >= 0; --l) {
        const std::string p = "dec" + std::to_string(l);
        out.push_back({p + ".up", LayerKind::upconv2x2, cfg.channels(l + 1), cfg.channels(l)});
        out.push_back({p + ".conv1", LayerKind::conv3x3, 2 * cfg.channels(l), cfg.channels(l)});
        out.push_back({p + ".conv2", LayerKind::conv3x3, cfg.channels(l), cfg.channels(l)});
    }
    out.push_back({"head", LayerKind::conv1x1, cfg.channels(0), 1});
    return out;
}

template <typename T>
struct Layer {
    LayerSpec spec;
    Tensor<T> weight;
    std::vector<T> bias;

    friend bool operator==(const Layer& a, const Layer& b) {
        return a.spec.name == b.spec.name && a.weight == b.weight && a.bias == b.bias;
    }
};

/// All learnable weights; also used to hold gradients.
template <typename T>
struct UNetParams {
    UNetConfig config;
    std::vector<Layer<T>> layers;

    std::size_t enc(int level, int which) const { return static_cast<std::size_t>(2 * level + which); }
    std::size_t bottleneck(int which) const { return static_cast<std::size_t>(2 * config.depth + which); }
    // which: 0 = up, 1 = conv1, 2 = conv2
    std::size_t dec(int level, int which) const {
        return static_cast<std::size_t>(2 * config.depth + 2 + 3 * (config.depth - 1 - level) + which);
    }
    std::size_t head() const { return layers.size() - 1; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) {
            n += l.weight.size() + l.bias.size();
        }
        return n;
    }

    friend bool operator==(const UNetParams& a, const UNetParams& b) {
        return a.config == b.config && a.layers == b.layers;
    }
};

template <typename T>
UNetParams<T> zeros_like(const UNetParams<T>& p) {
    UNetParams<T> g;
    g.config = p.config;
    for (const auto& l : p.layers) {
        g.layers.push_back({l.spec, Tensor<T>(l.weight.n, l.weight.c, l.weight.h, l.weight.w), std::vector<T>(l.bias.size(), T(0))});
    }
    return g;
}

template <typename T>
UNetParams<T> zero_params(const UNetConfig& cfg) {
    cfg.validate();
    UNetParams<T> p;
    p.config = cfg;
    for (const auto& spec : layer_layout(cfg)) {
        const auto s = spec.kernel_shape();
        p.layers.push_back({spec, Tensor<T>(s[0], s[1], s[2], s[3]), std::vector<T>(static_cast<std::size_t>(spec.out_c), T(0))});
    }
    return p;
}

/// Zero-mean Gaussian kernels with std sqrt(2 / fan_in), zero biases.
template <typename T>
UNetParams<T> init_params(const UNetConfig& cfg) {
    UNetParams<T> p = zero_params<T>(cfg);
    Rng rng(cfg.seed);
    for (auto& l : p.layers) {
        const double sd = std::sqrt(2.0 / l.spec.fan_in());
        for (T& v : l.weight.values) {
            v = static_cast<T>(rng.normal() * sd);
        }
    }
    return p;
}

template <typename To, typename From>
UNetParams<To> params_cast(const UNetParams<From>& p) {
    UNetParams<To> out;
    out.config = p.config;
    for (const auto& l : p.layers) {
        out.layers.push_back({l.spec, tensor_cast<To>(l.weight), std::vector<To>(l.bias.begin(), l.bias.end())});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Forward

template <typename T>
struct ForwardCache {
    Tensor<T> input;
    std::vector<Tensor<T>> enc_a1, enc_a2, pooled;
    std::vector<PoolIndices> pool_idx;
    Tensor<T> bott_a1, bott_a2;
    std::vector<Tensor<T>> dec_up, dec_cat, dec_a1, dec_a2; // indexed by level
    Tensor<T> logits;
    Tensor<T> prob;
};

/// Probabilities, shape (n, 1, input_h, input_w), strictly inside (0, 1).
template <typename T>
Tensor<T> forward(const UNetParams<T>& p, const Tensor<T>& x, ForwardCache<T>* cache = nullptr) {
    const UNetConfig& cfg = p.config;
    if (x.c != 1 || x.h != cfg.input_h || x.w != cfg.input_w) {
        throw InvalidArgument("forward: input " + x.shape_string() + " does not match configured (n,1," +
                              std::to_string(cfg.input_h) + "," + std::to_string(cfg.input_w) + ")");
    }
    ForwardCache<T> local;
    ForwardCache<T>& c = cache != nullptr ? *cache : local;
    const auto D = static_cast<std::size_t>(cfg.depth);
    c.input = x;
    c.enc_a1.assign(D, {});
    c.enc_a2.assign(D, {});
    c.pooled.assign(D, {});
    c.pool_idx.assign(D, {});
    c.dec_up.assign(D, {});
    c.dec_cat.assign(D, {});
    c.dec_a1.assign(D, {});
    c.dec_a2.assign(D, {});

    const Tensor<T>* cur = &c.input;
    for (int l = 0; l < cfg.depth; ++l) {
        const auto& l1 = p.layers[p.enc(l, 0)];
        const auto& l2 = p.layers[p.enc(l, 1)];
        c.enc_a1[l] = conv3x3_relu(*cur, l1.weight, l1.bias);
        c.enc_a2[l] = conv3x3_relu(c.enc_a1[l], l2.weight, l2.bias);
        c.pooled[l] = maxpool2x2(c.enc_a2[l], &c.pool_idx[l]);
        cur = &c.pooled[l];
    }
    {
        const auto& b1 = p.layers[p.bottleneck(0)];
        const auto& b2 = p.layers[p.bottleneck(1)];
        c.bott_a1 = conv3x3_relu(*cur, b1.weight, b1.bias);
        c.bott_a2 = conv3x3_relu(c.bott_a1, b2.weight, b2.bias);
        cur = &c.bott_a2;
    }
    for (int l = cfg.depth - 1; l >= 0; --l) {
        const auto& up = p.layers[p.dec(l, 0)];
        const auto& d1 = p.layers[p.dec(l, 1)];
        const auto& d2 = p.layers[p.dec(l, 2)];
        c.dec_up[l] = upconv2x2(*cur, up.weight, up.bias);
        c.dec_cat[l] = concat_skip(c.dec_up[l], c.enc_a2[l]);
        c.dec_a1[l] = conv3x3_relu(c.dec_cat[l], d1.weight, d1.bias);
        c.dec_a2[l] = conv3x3_relu(c.dec_a1[l], d2.weight, d2.bias);
        cur = &c.dec_a2[l];
    }
    const auto& head = p.layers[p.head()];
    c.logits = conv1x1(*cur, head.weight, head.bias);
    c.prob = Tensor<T>(c.logits.n, 1, c.logits.h, c.logits.w);
    for (std::size_t i = 0; i < c.prob.values.size(); ++i) {
        c.prob.values[i] = sigmoid(c.logits.values[i]);
    }
    return c.prob;
}

// ---------------------------------------------------------------------------
// Loss

/// Mean binary cross-entropy over every output pixel, with predictions
/// clamped to [epsilon, 1 - epsilon] before the logarithms.
template <typename T>
double bce_loss(const Tensor<T>& pred, const Tensor<T>& target, double epsilon) {
    if (!pred.same_shape(target)) {
        throw InvalidArgument("bce_loss: prediction " + pred.shape_string() + " vs target " + target.shape_string());
    }
    if (pred.size() == 0) {
        throw InvalidArgument("bce_loss: empty tensors");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.values.size(); ++i) {
        const double p = std::clamp(static_cast<double>(pred.values[i]), epsilon, 1.0 - epsilon);
        const double y = static_cast<double>(target.values[i]);
        acc += y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
    }
    return -acc / static_cast<double>(pred.values.size());
}

/// Pixels where (pred > 0.5) agrees with the binary target.
template <typename T>
std::size_t correct_pixels(const Tensor<T>& pred, const Tensor<T>& target) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < pred.values.size(); ++i) {
        n += ((pred.values[i] > T(0.5)) == (target.values[i] > T(0.5))) ? 1 : 0;
    }
    return n;
}

// ---------------------------------------------------------------------------
// Backward

/// Gradient of bce_loss(forward(p, x), target) w.r.t. every kernel and bias.
/// The cache must come from forward() on the same parameters and input.
template <typename T>
UNetParams<T> backward(const UNetParams<T>& p, const ForwardCache<T>& c, const Tensor<T>& target) {
    const UNetConfig& cfg = p.config;
    if (!c.prob.same_shape(target)) {
        throw InvalidArgument("backward: target " + target.shape_string() + " vs prediction " + c.prob.shape_string());
    }
    UNetParams<T> g = zeros_like(p);

    // d loss / d logit = (p - y) / N inside the clamp window, 0 where clamped.
    Tensor<T> grad(c.prob.n, 1, c.prob.h, c.prob.w);
    const T inv_n = T(1) / static_cast<T>(c.prob.size());
    const T lo = static_cast<T>(cfg.epsilon);
    const T hi = static_cast<T>(1.0 - cfg.epsilon);
    for (std::size_t i = 0; i < grad.values.size(); ++i) {
        const T pv = c.prob.values[i];
        grad.values[i] = (pv > lo && pv < hi) ? (pv - target.values[i]) * inv_n : T(0);
    }

    const Tensor<T>& top = cfg.depth > 0 ? c.dec_a2[0] : c.bott_a2;
    Tensor<T> g_cur;
    {
        auto& gh = g.layers[g.head()];
        conv1x1_backward(top, p.layers[p.head()].weight, grad, gh.weight, gh.bias, &g_cur);
    }

    std::vector<Tensor<T>> g_skip(static_cast<std::size_t>(cfg.depth));
    for (int l = 0; l < cfg.depth; ++l) {
        Tensor<T> g_a1, g_cat, g_up, g_below;
        relu_backward_inplace(c.dec_a2[l], g_cur);
        auto& g2 = g.layers[g.dec(l, 2)];
        conv3x3_backward(c.dec_a1[l], p.layers[p.dec(l, 2)].weight, g_cur, g2.weight, g2.bias, &g_a1);
        relu_backward_inplace(c.dec_a1[l], g_a1);
        auto& g1 = g.layers[g.dec(l, 1)];
        conv3x3_backward(c.dec_cat[l], p.layers[p.dec(l, 1)].weight, g_a1, g1.weight, g1.bias, &g_cat);
        split_skip_grad(g_cat, c.dec_up[l].c, g_up, g_skip[l]);
        const Tensor<T>& below = l + 1 < cfg.depth ? c.dec_a2[l + 1] : c.bott_a2;
        auto& gu = g.layers[g.dec(l, 0)];
        upconv2x2_backward(below, p.layers[p.dec(l, 0)].weight, g_up, gu.weight, gu.bias, &g_below);
        g_cur = std::move(g_below);
    }

    {
        Tensor<T> g_a1, g_in;
        relu_backward_inplace(c.bott_a2, g_cur);
        auto& g2 = g.layers[g.bottleneck(1)];
        conv3x3_backward(c.bott_a1, p.layers[p.bottleneck(1)].weight, g_cur, g2.weight, g2.bias, &g_a1);
        relu_backward_inplace(c.bott_a1, g_a1);
        auto& g1 = g.layers[g.bottleneck(0)];
        const Tensor<T>& in = cfg.depth > 0 ? c.pooled[cfg.depth - 1] : c.input;
        conv3x3_backward(in, p.layers[p.bottleneck(0)].weight, g_a1, g1.weight, g1.bias, cfg.depth > 0 ? &g_in : nullptr);
        g_cur = std::move(g_in);
    }

    for (int l = cfg.depth - 1; l >= 0; --l) {
        Tensor<T> g_a2 = maxpool2x2_backward(g_cur, c.pool_idx[l], c.enc_a2[l].h, c.enc_a2[l].w);
        for (std::size_t i = 0; i < g_a2.values.size(); ++i) {
            g_a2.values[i] += g_skip[l].values[i];
        }
        relu_backward_inplace(c.enc_a2[l], g_a2);
        Tensor<T> g_a1, g_in;
        auto& g2 = g.layers[g.enc(l, 1)];
        conv3x3_backward(c.enc_a1[l], p.layers[p.enc(l, 1)].weight, g_a2, g2.weight, g2.bias, &g_a1);
        relu_backward_inplace(c.enc_a1[l], g_a1);
        auto& g1 = g.layers[g.enc(l, 0)];
        const Tensor<T>& in = l > 0 ? c.pooled[l - 1] : c.input;
        conv3x3_backward(in, p.layers[p.enc(l, 0)].weight, g_a1, g1.weight, g1.bias, l > 0 ? &g_in : nullptr);
        g_cur = std::move(g_in);
    }
    return g;
}

// ---------------------------------------------------------------------------
// Plain gradient descent

template <typename T>
void check_finite(const UNetParams<T>& grads) {
    for (const auto& l : grads.layers) {
        const bool ok = l.weight.all_finite() &&
                        std::all_of(l.bias.begin(), l.bias.end(), [](T v) { return std::isfinite(v); });
        if (!ok) {
            throw DivergenceError("non-finite gradient in layer " + l.spec.name);
        }
    }
}

/// theta <- theta - lr * g, in place.
template <typename T>
void sgd_update(UNetParams<T>& p, const UNetParams<T>& grads, double lr) {
    if (!(lr > 0.0)) {
        throw InvalidArgument("sgd: learning rate must be positive");
    }
    check_finite(grads);
    const T step = static_cast<T>(lr);
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
        auto& w = p.layers[i].weight.values;
        const auto& gw = grads.layers[i].weight.values;
        for (std::size_t k = 0; k < w.size(); ++k) {
            w[k] -= step * gw[k];
        }
        auto& b = p.layers[i].bias;
        const auto& gb = grads.layers[i].bias;
        for (std::size_t k = 0; k < b.size(); ++k) {
            b[k] -= step * gb[k];
        }
    }
}

template <typename T>
UNetParams<T> sgd_step(UNetParams<T> p, const UNetParams<T>& grads, double lr) {
    sgd_update(p, grads, lr);
    return p;
}

} // namespace carbq::nn
