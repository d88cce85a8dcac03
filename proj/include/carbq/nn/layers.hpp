#pragma once

// Network operators and their exact reverse-mode derivatives.
//
// Kernel layouts:
//   conv3x3   (out_c, in_c, 3, 3), zero padding 1, stride 1
//   upconv2x2 (in_c, out_c, 2, 2), stride 2 (transposed convolution)
//   conv1x1   (out_c, in_c, 1, 1)

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <string>
#include <type_traits>
#include <vector>

#include "carbq/error.hpp"
#include "carbq/nn/tensor.hpp"

namespace carbq::nn {

namespace detail {

// Dot product with fixed 8-way partial sums; the summation order is fixed,
// so results are reproducible, and the loop vectorizes without -ffast-math.
template <typename T>
inline T dot(const T* a, const T* b, int n) {
    T acc[8] = {};
    int i = 0;
    for (; i + 8 <= n; i += 8) {
        for (int j = 0; j < 8; ++j) {
            acc[j] += a[i + j] * b[i + j];
        }
    }
    T tail = 0;
    for (; i < n; ++i) {
        tail += a[i] * b[i];
    }
    return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail;
}

template <typename T>
inline void axpy(T a, const T* x, T* y, int n) {
    for (int i = 0; i < n; ++i) {
        y[i] += a * x[i];
    }
}

template <typename T>
inline T sum(const T* a, std::size_t n) {
    T acc[8] = {};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        for (int j = 0; j < 8; ++j) {
            acc[j] += a[i + j];
        }
    }
    T tail = 0;
    for (; i < n; ++i) {
        tail += a[i];
    }
    return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail;
}

} // namespace detail

// ---------------------------------------------------------------------------
// 3x3 same-padding convolution
//
// Planes are copied into zero-bordered buffers of row pitch W + 2. In that
// layout every kernel tap is one contiguous shifted multiply-add over
// H * (W + 2) elements; the two extra columns per output row are discarded.
// Output channels are processed in blocks of four to share input loads.

namespace detail {

struct PadGeometry {
    int pitch;       // W + 2
    std::size_t len; // H * pitch: extent of one shifted pass
    std::size_t tiled;  // len rounded up to whole forward tiles
    std::size_t padded; // (H + 2) * pitch + 2 plus tile overrun

    static constexpr std::size_t kTile = 8;

    PadGeometry(int h, int w)
        : pitch(w + 2), len(static_cast<std::size_t>(h) * (w + 2)), tiled((len + kTile - 1) / kTile * kTile),
          padded(static_cast<std::size_t>(h + 2) * (w + 2) + 2 + kTile) {}

    std::ptrdiff_t tap_offset(int ky, int kx) const { return static_cast<std::ptrdiff_t>(ky) * pitch + kx; }
};

template <typename T>
std::vector<T> pad_planes(const Tensor<T>& x, int n, const PadGeometry& g) {
    std::vector<T> out(g.padded * static_cast<std::size_t>(x.c), T(0));
    for (int c = 0; c < x.c; ++c) {
        const T* src = x.plane(n, c);
        T* dst = out.data() + g.padded * c;
        for (int y = 0; y < x.h; ++y) {
            std::copy_n(src + static_cast<std::ptrdiff_t>(y) * x.w, x.w, dst + static_cast<std::ptrdiff_t>(y + 1) * g.pitch + 1);
        }
    }
    return out;
}

// Gradient planes in pitch layout (no top border) with zeroed extra columns.
template <typename T>
std::vector<T> pitch_planes(const Tensor<T>& x, int n, const PadGeometry& g) {
    std::vector<T> out(g.len * static_cast<std::size_t>(x.c), T(0));
    for (int c = 0; c < x.c; ++c) {
        const T* src = x.plane(n, c);
        T* dst = out.data() + g.len * c;
        for (int y = 0; y < x.h; ++y) {
            std::copy_n(src + static_cast<std::ptrdiff_t>(y) * x.w, x.w, dst + static_cast<std::ptrdiff_t>(y) * g.pitch);
        }
    }
    return out;
}

template <typename T>
struct Vec16Of {
    typedef T type __attribute__((vector_size(16)));
};

template <typename T>
using Vec16 = typename Vec16Of<T>::type;

template <typename T>
inline Vec16<T> load16(const T* p) {
    Vec16<T> v;
    std::memcpy(&v, p, sizeof v);
    return v;
}

// Four dot products against a shared x, two 16-byte accumulators each.
template <typename T>
inline void dot4(const T* g0, const T* g1, const T* g2, const T* g3, const T* x, std::size_t n, T* out) {
    constexpr std::size_t L = 16 / sizeof(T);
    Vec16<T> s[8] = {};
    std::size_t i = 0;
    for (; i + 2 * L <= n; i += 2 * L) {
        const Vec16<T> va = load16(x + i);
        const Vec16<T> vb = load16(x + i + L);
        s[0] += load16(g0 + i) * va;
        s[1] += load16(g0 + i + L) * vb;
        s[2] += load16(g1 + i) * va;
        s[3] += load16(g1 + i + L) * vb;
        s[4] += load16(g2 + i) * va;
        s[5] += load16(g2 + i + L) * vb;
        s[6] += load16(g3 + i) * va;
        s[7] += load16(g3 + i + L) * vb;
    }
    const T* g[4] = {g0, g1, g2, g3};
    for (int j = 0; j < 4; ++j) {
        const Vec16<T> v = s[2 * j] + s[2 * j + 1];
        T acc = 0;
        for (std::size_t k = 0; k < L; ++k) {
            acc += v[k];
        }
        for (std::size_t k = i; k < n; ++k) {
            acc += g[j][k] * x[k];
        }
        out[j] += acc;
    }
}

template <typename T>
inline void store16(T* p, typename Vec16Of<T>::type v) {
    std::memcpy(p, &v, sizeof v);
}

template <typename T>
inline void axpy4(const T* w, const T* x, T* y0, T* y1, T* y2, T* y3, std::size_t n) {
    constexpr std::size_t L = 16 / sizeof(T);
    const T w0 = w[0], w1 = w[1], w2 = w[2], w3 = w[3];
    std::size_t i = 0;
    for (; i + L <= n; i += L) {
        const Vec16<T> v = load16(x + i);
        store16(y0 + i, load16(y0 + i) + w0 * v);
        store16(y1 + i, load16(y1 + i) + w1 * v);
        store16(y2 + i, load16(y2 + i) + w2 * v);
        store16(y3 + i, load16(y3 + i) + w3 * v);
    }
    for (; i < n; ++i) {
        const T v = x[i];
        y0[i] += w0 * v;
        y1[i] += w1 * v;
        y2[i] += w2 * v;
        y3[i] += w3 * v;
    }
}

} // namespace detail

/// Pre-activation of a 3x3 convolution.
template <typename T>
Tensor<T> conv3x3(const Tensor<T>& x, const Tensor<T>& kernel, const std::vector<T>& bias) {
    if (kernel.h != 3 || kernel.w != 3 || kernel.c != x.c || static_cast<int>(bias.size()) != kernel.n) {
        throw InvalidArgument("conv3x3: kernel " + kernel.shape_string() + " does not match input " + x.shape_string());
    }
    const detail::PadGeometry g(x.h, x.w);
    const int O = kernel.n;
    const int C = x.c;
    constexpr std::size_t L = 16 / sizeof(T);
    constexpr std::size_t V = detail::PadGeometry::kTile / L; // vectors per tile row
    using Vec = detail::Vec16<T>;
    Tensor<T> out(x.n, O, x.h, x.w);
    std::ptrdiff_t offs[9];
    for (int tap = 0; tap < 9; ++tap) {
        offs[tap] = g.tap_offset(tap / 3, tap % 3);
    }
    // Weights per block of four output channels, broadcast, ordered (block, c, tap, j).
    const int blocks = (O + 3) / 4;
    const std::size_t block_stride = static_cast<std::size_t>(C) * 9 * 4;
    std::vector<Vec> wv(block_stride * blocks);
    for (int o = 0; o < blocks * 4; ++o) {
        for (int c = 0; c < C; ++c) {
            for (int tap = 0; tap < 9; ++tap) {
                const T w = o < O ? kernel.plane(o, c)[tap] : T(0);
                Vec v;
                for (std::size_t k = 0; k < L; ++k) {
                    v[k] = w;
                }
                wv[block_stride * (o / 4) + (static_cast<std::size_t>(c) * 9 + tap) * 4 + o % 4] = v;
            }
        }
    }
    std::vector<T> acc(4 * g.tiled);
    for (int n = 0; n < x.n; ++n) {
        const std::vector<T> pad = detail::pad_planes(x, n, g);
        for (int o0 = 0; o0 < O; o0 += 4) {
            const int nb = std::min(4, O - o0);
            for (std::size_t i = 0; i < g.tiled; i += detail::PadGeometry::kTile) {
                Vec a[4][V];
                for (int j = 0; j < 4; ++j) {
                    for (std::size_t v = 0; v < V; ++v) {
                        for (std::size_t k = 0; k < L; ++k) {
                            a[j][v][k] = j < nb ? bias[o0 + j] : T(0);
                        }
                    }
                }
                const Vec* w = wv.data() + block_stride * (o0 / 4);
                for (int c = 0; c < C; ++c) {
                    const T* base = pad.data() + g.padded * c + i;
                    for (int tap = 0; tap < 9; ++tap, w += 4) {
                        for (std::size_t v = 0; v < V; ++v) {
                            const Vec xv = detail::load16(base + offs[tap] + v * L);
                            a[0][v] += w[0] * xv;
                            a[1][v] += w[1] * xv;
                            a[2][v] += w[2] * xv;
                            a[3][v] += w[3] * xv;
                        }
                    }
                }
                for (int j = 0; j < 4; ++j) {
                    for (std::size_t v = 0; v < V; ++v) {
                        detail::store16(acc.data() + g.tiled * j + i + v * L, a[j][v]);
                    }
                }
            }
            for (int j = 0; j < nb; ++j) {
                T* dst = out.plane(n, o0 + j);
                const T* src = acc.data() + g.tiled * j;
                for (int y = 0; y < x.h; ++y) {
                    std::copy_n(src + static_cast<std::ptrdiff_t>(y) * g.pitch, x.w, dst + static_cast<std::ptrdiff_t>(y) * x.w);
                }
            }
        }
    }
    return out;
}

template <typename T>
void relu_inplace(Tensor<T>& t) {
    for (T& v : t.values) {
        v = v > T(0) ? v : T(0);
    }
}

template <typename T>
Tensor<T> conv3x3_relu(const Tensor<T>& x, const Tensor<T>& kernel, const std::vector<T>& bias) {
    Tensor<T> out = conv3x3(x, kernel, bias);
    relu_inplace(out);
    return out;
}

/// Backward of conv3x3 given the gradient w.r.t. its pre-activation.
/// Accumulates into grad_kernel / grad_bias; writes the input gradient when
/// grad_input is non-null.
template <typename T>
void conv3x3_backward(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& grad_pre, Tensor<T>& grad_kernel,
                      std::vector<T>& grad_bias, Tensor<T>* grad_input) {
    const detail::PadGeometry g(x.h, x.w);
    const int O = kernel.n;
    // Spatial chunks keep four gradient rows and the shifted input in L1.
    constexpr std::size_t kChunk = 1024;
    for (int n = 0; n < x.n; ++n) {
        const std::vector<T> pad = detail::pad_planes(x, n, g);
        const std::vector<T> gp = detail::pitch_planes(grad_pre, n, g);
        for (int o = 0; o < O; ++o) {
            grad_bias[o] += detail::sum(grad_pre.plane(n, o), grad_pre.plane_size());
        }
        for (std::size_t s0 = 0; s0 < g.len; s0 += kChunk) {
            const std::size_t m = std::min(kChunk, g.len - s0);
            for (int c = 0; c < x.c; ++c) {
                const T* base = pad.data() + g.padded * c + s0;
                for (int o0 = 0; o0 < O; o0 += 4) {
                    const int nb = std::min(4, O - o0);
                    const T* gq[4];
                    for (int j = 0; j < 4; ++j) {
                        gq[j] = gp.data() + g.len * (o0 + std::min(j, nb - 1)) + s0;
                    }
                    for (int tap = 0; tap < 9; ++tap) {
                        const T* src = base + g.tap_offset(tap / 3, tap % 3);
                        if (nb == 4) {
                            T gk[4] = {};
                            detail::dot4(gq[0], gq[1], gq[2], gq[3], src, m, gk);
                            for (int j = 0; j < 4; ++j) {
                                grad_kernel.plane(o0 + j, c)[tap] += gk[j];
                            }
                        } else {
                            for (int j = 0; j < nb; ++j) {
                                grad_kernel.plane(o0 + j, c)[tap] += detail::dot(gq[j], src, static_cast<int>(m));
                            }
                        }
                    }
                }
            }
        }
    }
    if (grad_input != nullptr) {
        // The input gradient is a same-padded 3x3 convolution of grad_pre with
        // the kernel transposed over channels and rotated by 180 degrees.
        Tensor<T> flipped(x.c, O, 3, 3);
        for (int o = 0; o < O; ++o) {
            for (int c = 0; c < x.c; ++c) {
                for (int tap = 0; tap < 9; ++tap) {
                    flipped.plane(c, o)[8 - tap] = kernel.plane(o, c)[tap];
                }
            }
        }
        *grad_input = conv3x3(grad_pre, flipped, std::vector<T>(static_cast<std::size_t>(x.c), T(0)));
    }
}

/// Zeroes gradient entries where the ReLU output was clamped.
template <typename T>
void relu_backward_inplace(const Tensor<T>& relu_out, Tensor<T>& grad) {
    for (std::size_t i = 0; i < grad.values.size(); ++i) {
        if (!(relu_out.values[i] > T(0))) {
            grad.values[i] = T(0);
        }
    }
}

// ---------------------------------------------------------------------------
// 2x2 max pooling

struct PoolIndices {
    std::vector<std::int32_t> argmax; // flat in-plane input index per output element
};

/// Max over each 2x2 window; ties resolve to the first element in row-major order.
template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& x, PoolIndices* indices = nullptr) {
    if (x.h % 2 != 0 || x.w % 2 != 0) {
        throw InvalidArgument("maxpool2x2: spatial dims must be even, got " + x.shape_string());
    }
    const int oh = x.h / 2;
    const int ow = x.w / 2;
    Tensor<T> out(x.n, x.c, oh, ow);
    if (indices != nullptr) {
        indices->argmax.assign(out.size(), 0);
    }
    std::size_t k = 0;
    for (int n = 0; n < x.n; ++n) {
        for (int c = 0; c < x.c; ++c) {
            const T* src = x.plane(n, c);
            T* dst = out.plane(n, c);
            for (int y = 0; y < oh; ++y) {
                for (int xx = 0; xx < ow; ++xx, ++k) {
                    const int base = (2 * y) * x.w + 2 * xx;
                    const int cand[4] = {base, base + 1, base + x.w, base + x.w + 1};
                    int best = cand[0];
                    for (int i = 1; i < 4; ++i) {
                        if (src[cand[i]] > src[best]) {
                            best = cand[i];
                        }
                    }
                    dst[y * ow + xx] = src[best];
                    if (indices != nullptr) {
                        indices->argmax[k] = best;
                    }
                }
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> maxpool2x2_backward(const Tensor<T>& grad_out, const PoolIndices& indices, int in_h, int in_w) {
    Tensor<T> gx(grad_out.n, grad_out.c, in_h, in_w);
    std::size_t k = 0;
    for (int n = 0; n < grad_out.n; ++n) {
        for (int c = 0; c < grad_out.c; ++c) {
            const T* g = grad_out.plane(n, c);
            T* dst = gx.plane(n, c);
            for (std::size_t i = 0; i < grad_out.plane_size(); ++i, ++k) {
                dst[indices.argmax[k]] += g[i];
            }
        }
    }
    return gx;
}

// ---------------------------------------------------------------------------
// 2x2 stride-2 up-convolution

template <typename T>
Tensor<T> upconv2x2(const Tensor<T>& x, const Tensor<T>& kernel, const std::vector<T>& bias) {
    if (kernel.h != 2 || kernel.w != 2 || kernel.n != x.c || static_cast<int>(bias.size()) != kernel.c) {
        throw InvalidArgument("upconv2x2: kernel " + kernel.shape_string() + " does not match input " + x.shape_string());
    }
    const int oh = x.h * 2;
    const int ow = x.w * 2;
    Tensor<T> out(x.n, kernel.c, oh, ow);
    for (int n = 0; n < x.n; ++n) {
        for (int o = 0; o < kernel.c; ++o) {
            T* dst = out.plane(n, o);
            std::fill(dst, dst + out.plane_size(), bias[o]);
            for (int i = 0; i < x.c; ++i) {
                const T* src = x.plane(n, i);
                const T* k = kernel.plane(i, o);
                for (int y = 0; y < x.h; ++y) {
                    T* r0 = dst + static_cast<std::ptrdiff_t>(2 * y) * ow;
                    T* r1 = r0 + ow;
                    const T* s = src + static_cast<std::ptrdiff_t>(y) * x.w;
                    for (int xx = 0; xx < x.w; ++xx) {
                        const T v = s[xx];
                        r0[2 * xx] += k[0] * v;
                        r0[2 * xx + 1] += k[1] * v;
                        r1[2 * xx] += k[2] * v;
                        r1[2 * xx + 1] += k[3] * v;
                    }
                }
            }
        }
    }
    return out;
}

template <typename T>
void upconv2x2_backward(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& grad_out, Tensor<T>& grad_kernel,
                        std::vector<T>& grad_bias, Tensor<T>* grad_input) {
    if (grad_input != nullptr) {
        *grad_input = Tensor<T>(x.n, x.c, x.h, x.w);
    }
    const int ow = grad_out.w;
    for (int n = 0; n < x.n; ++n) {
        for (int o = 0; o < kernel.c; ++o) {
            const T* g = grad_out.plane(n, o);
            grad_bias[o] += detail::sum(g, grad_out.plane_size());
            for (int i = 0; i < x.c; ++i) {
                const T* src = x.plane(n, i);
                const T* k = kernel.plane(i, o);
                T* gk = grad_kernel.plane(i, o);
                T* gx = grad_input != nullptr ? grad_input->plane(n, i) : nullptr;
                T a0 = 0, a1 = 0, a2 = 0, a3 = 0;
                for (int y = 0; y < x.h; ++y) {
                    const T* g0 = g + static_cast<std::ptrdiff_t>(2 * y) * ow;
                    const T* g1 = g0 + ow;
                    const T* s = src + static_cast<std::ptrdiff_t>(y) * x.w;
                    for (int xx = 0; xx < x.w; ++xx) {
                        const T v = s[xx];
                        a0 += g0[2 * xx] * v;
                        a1 += g0[2 * xx + 1] * v;
                        a2 += g1[2 * xx] * v;
                        a3 += g1[2 * xx + 1] * v;
                        if (gx != nullptr) {
                            gx[static_cast<std::ptrdiff_t>(y) * x.w + xx] +=
                                k[0] * g0[2 * xx] + k[1] * g0[2 * xx + 1] + k[2] * g1[2 * xx] + k[3] * g1[2 * xx + 1];
                        }
                    }
                }
                gk[0] += a0;
                gk[1] += a1;
                gk[2] += a2;
                gk[3] += a3;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Skip concatenation: decoder channels first, then encoder channels.

template <typename T>
Tensor<T> concat_skip(const Tensor<T>& decoder, const Tensor<T>& encoder) {
    if (decoder.n != encoder.n || decoder.h != encoder.h || decoder.w != encoder.w) {
        throw InvalidArgument("concat_skip: decoder " + decoder.shape_string() + " and encoder " +
                              encoder.shape_string() + " differ in batch or spatial size");
    }
    Tensor<T> out(decoder.n, decoder.c + encoder.c, decoder.h, decoder.w);
    const std::size_t ps = out.plane_size();
    for (int n = 0; n < out.n; ++n) {
        for (int c = 0; c < decoder.c; ++c) {
            std::copy_n(decoder.plane(n, c), ps, out.plane(n, c));
        }
        for (int c = 0; c < encoder.c; ++c) {
            std::copy_n(encoder.plane(n, c), ps, out.plane(n, decoder.c + c));
        }
    }
    return out;
}

/// Splits a concatenated gradient back into (decoder, encoder) parts.
template <typename T>
void split_skip_grad(const Tensor<T>& grad, int decoder_c, Tensor<T>& grad_decoder, Tensor<T>& grad_encoder) {
    const int enc_c = grad.c - decoder_c;
    grad_decoder = Tensor<T>(grad.n, decoder_c, grad.h, grad.w);
    grad_encoder = Tensor<T>(grad.n, enc_c, grad.h, grad.w);
    const std::size_t ps = grad.plane_size();
    for (int n = 0; n < grad.n; ++n) {
        for (int c = 0; c < decoder_c; ++c) {
            std::copy_n(grad.plane(n, c), ps, grad_decoder.plane(n, c));
        }
        for (int c = 0; c < enc_c; ++c) {
            std::copy_n(grad.plane(n, decoder_c + c), ps, grad_encoder.plane(n, c));
        }
    }
}

// ---------------------------------------------------------------------------
// 1x1 projection

template <typename T>
Tensor<T> conv1x1(const Tensor<T>& x, const Tensor<T>& kernel, const std::vector<T>& bias) {
    if (kernel.h != 1 || kernel.w != 1 || kernel.c != x.c || static_cast<int>(bias.size()) != kernel.n) {
        throw InvalidArgument("conv1x1: kernel " + kernel.shape_string() + " does not match input " + x.shape_string());
    }
    Tensor<T> out(x.n, kernel.n, x.h, x.w);
    const int ps = static_cast<int>(x.plane_size());
    for (int n = 0; n < x.n; ++n) {
        for (int o = 0; o < kernel.n; ++o) {
            T* dst = out.plane(n, o);
            std::fill(dst, dst + ps, bias[o]);
            for (int c = 0; c < x.c; ++c) {
                detail::axpy(kernel.plane(o, c)[0], x.plane(n, c), dst, ps);
            }
        }
    }
    return out;
}

template <typename T>
void conv1x1_backward(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& grad_out, Tensor<T>& grad_kernel,
                      std::vector<T>& grad_bias, Tensor<T>* grad_input) {
    if (grad_input != nullptr) {
        *grad_input = Tensor<T>(x.n, x.c, x.h, x.w);
    }
    const int ps = static_cast<int>(x.plane_size());
    for (int n = 0; n < x.n; ++n) {
        for (int o = 0; o < kernel.n; ++o) {
            const T* g = grad_out.plane(n, o);
            grad_bias[o] += detail::sum(g, static_cast<std::size_t>(ps));
            for (int c = 0; c < x.c; ++c) {
                grad_kernel.plane(o, c)[0] += detail::dot(g, x.plane(n, c), ps);
                if (grad_input != nullptr) {
                    detail::axpy(kernel.plane(o, c)[0], g, grad_input->plane(n, c), ps);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Sigmoid, kept strictly inside (0, 1) at the precision of T.

template <typename T>
T sigmoid(T z) {
    const T p = T(1) / (T(1) + std::exp(-z));
    return std::clamp(p, std::numeric_limits<T>::min(), std::nextafter(T(1), T(0)));
}

} // namespace carbq::nn
