#pragma once

// Deterministic mini-batch training, evaluation and mask prediction.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "carbq/dataset.hpp"
#include "carbq/error.hpp"
#include "carbq/image.hpp"
#include "carbq/masking.hpp"
#include "carbq/nn/unet.hpp"
#include "carbq/random.hpp"

namespace carbq::nn {

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    std::optional<double> val_loss;
    std::optional<double> val_acc;

    friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

using History = std::vector<EpochRecord>;

/// Input scaling: intensity / 255.
template <typename T>
Tensor<T> images_to_tensor(std::span<const GrayImage* const> images) {
    if (images.empty()) {
        throw InvalidArgument("images_to_tensor: empty batch");
    }
    const int h = images[0]->height();
    const int w = images[0]->width();
    Tensor<T> t(static_cast<int>(images.size()), 1, h, w);
    for (std::size_t n = 0; n < images.size(); ++n) {
        if (images[n]->width() != w || images[n]->height() != h) {
            throw InvalidArgument("images_to_tensor: mixed image sizes in one batch");
        }
        T* dst = t.plane(static_cast<int>(n), 0);
        const auto src = images[n]->data();
        for (std::size_t i = 0; i < src.size(); ++i) {
            dst[i] = static_cast<T>(src[i]) / T(255);
        }
    }
    return t;
}

template <typename T>
Tensor<T> masks_to_tensor(std::span<const BinaryMask* const> masks) {
    const int h = masks[0]->height();
    const int w = masks[0]->width();
    Tensor<T> t(static_cast<int>(masks.size()), 1, h, w);
    for (std::size_t n = 0; n < masks.size(); ++n) {
        T* dst = t.plane(static_cast<int>(n), 0);
        const auto src = masks[n]->data();
        for (std::size_t i = 0; i < src.size(); ++i) {
            dst[i] = static_cast<T>(src[i]);
        }
    }
    return t;
}

struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;
};

/// Pixel-weighted loss and accuracy over a set of pairs, in chunks of batch_size.
template <typename T>
EvalResult evaluate(const UNetParams<T>& p, const std::vector<SamplePair>& pairs) {
    if (pairs.empty()) {
        throw InvalidArgument("evaluate: no samples");
    }
    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::size_t total = 0;
    const auto bs = static_cast<std::size_t>(p.config.batch_size);
    for (std::size_t start = 0; start < pairs.size(); start += bs) {
        const std::size_t end = std::min(pairs.size(), start + bs);
        std::vector<const GrayImage*> imgs;
        std::vector<const BinaryMask*> masks;
        for (std::size_t i = start; i < end; ++i) {
            imgs.push_back(&pairs[i].image);
            masks.push_back(&pairs[i].mask);
        }
        const Tensor<T> x = images_to_tensor<T>(imgs);
        const Tensor<T> y = masks_to_tensor<T>(masks);
        const Tensor<T> pred = forward(p, x);
        loss_sum += bce_loss(pred, y, p.config.epsilon) * static_cast<double>(pred.size());
        correct += correct_pixels(pred, y);
        total += pred.size();
    }
    return {loss_sum / static_cast<double>(total), static_cast<double>(correct) / static_cast<double>(total)};
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// One gradient step on a batch; returns (batch loss, correct pixels).
template <typename T>
std::pair<double, std::size_t> train_batch(UNetParams<T>& p, const Tensor<T>& x, const Tensor<T>& y) {
    ForwardCache<T> cache;
    const Tensor<T> pred = forward(p, x, &cache);
    const double loss = bce_loss(pred, y, p.config.epsilon);
    if (!std::isfinite(loss)) {
        throw DivergenceError("non-finite training loss");
    }
    const std::size_t correct = correct_pixels(pred, y);
    const UNetParams<T> grads = backward(p, cache, y);
    sgd_update(p, grads, p.config.learning_rate);
    return {loss, correct};
}

/// Trains from a seeded initialization. Each epoch visits the training set in
/// an order shuffled by (seed, epoch). Training loss and accuracy are the
/// pixel-weighted averages over the epoch's batches; validation metrics are
/// measured after the epoch.
template <typename T>
std::pair<UNetParams<T>, History> train(const UNetConfig& cfg, const std::vector<SamplePair>& train_pairs,
                                        const std::vector<SamplePair>& val_pairs, const EpochCallback& on_epoch = {}) {
    cfg.validate();
    if (train_pairs.empty()) {
        throw InvalidArgument("train: empty training set");
    }
    for (const auto& s : train_pairs) {
        if (s.image.width() != cfg.input_w || s.image.height() != cfg.input_h) {
            throw InvalidArgument("train: sample \"" + s.id + "\" is not at the model input size");
        }
    }
    UNetParams<T> p = init_params<T>(cfg);
    History history;
    std::vector<std::size_t> order(train_pairs.size());
    const auto bs = static_cast<std::size_t>(cfg.batch_size);
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(Rng::derive(cfg.seed, static_cast<std::uint64_t>(epoch)));
        rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        std::size_t total = 0;
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t end = std::min(order.size(), start + bs);
            std::vector<const GrayImage*> imgs;
            std::vector<const BinaryMask*> masks;
            for (std::size_t i = start; i < end; ++i) {
                imgs.push_back(&train_pairs[order[i]].image);
                masks.push_back(&train_pairs[order[i]].mask);
            }
            const Tensor<T> x = images_to_tensor<T>(imgs);
            const Tensor<T> y = masks_to_tensor<T>(masks);
            const auto [loss, ok] = train_batch(p, x, y);
            loss_sum += loss * static_cast<double>(y.size());
            correct += ok;
            total += y.size();
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(total);
        rec.train_acc = static_cast<double>(correct) / static_cast<double>(total);
        if (!val_pairs.empty()) {
            const EvalResult v = evaluate(p, val_pairs);
            if (!std::isfinite(v.loss)) {
                throw DivergenceError("non-finite validation loss at epoch " + std::to_string(epoch));
            }
            rec.val_loss = v.loss;
            rec.val_acc = v.accuracy;
        }
        history.push_back(rec);
        if (on_epoch) {
            on_epoch(rec);
        }
    }
    return {std::move(p), std::move(history)};
}

inline std::string history_csv(const History& h) {
    std::string out = "epoch,train_loss,train_acc,val_loss,val_acc\n";
    char buf[64];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.6g", v);
        return std::string(buf);
    };
    for (const auto& r : h) {
        out += std::to_string(r.epoch) + "," + num(r.train_loss) + "," + num(r.train_acc) + "," +
               (r.val_loss ? num(*r.val_loss) : "") + "," + (r.val_acc ? num(*r.val_acc) : "") + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Prediction

/// Carbide iff probability > 0.5 (0.5 itself is iron).
template <typename T>
BinaryMask probabilities_to_mask(const Tensor<T>& prob, int n = 0) {
    std::vector<std::uint8_t> out(prob.plane_size());
    const T* src = prob.plane(n, 0);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = src[i] > T(0.5) ? 1 : 0;
    }
    return BinaryMask(prob.w, prob.h, std::move(out));
}

/// Segments one image at the model's input size: bilinear resize if needed,
/// threshold at 0.5, then the small-component noise rule.
template <typename T>
BinaryMask predict_mask(const UNetParams<T>& p, const GrayImage& img) {
    const GrayImage in = resize(img, p.config.input_w, p.config.input_h, ResizeMode::bilinear);
    const GrayImage* ptr = &in;
    const Tensor<T> prob = forward(p, images_to_tensor<T>(std::span<const GrayImage* const>(&ptr, 1)));
    return denoise(probabilities_to_mask(prob), kNoiseMinArea, kDefaultConnectivity);
}

/// predict_mask over many images. With threads > 1 the images are split into
/// contiguous chunks; every image is computed independently, so the output
/// does not depend on the thread count.
template <typename T>
std::vector<BinaryMask> predict_masks(const UNetParams<T>& p, const std::vector<GrayImage>& images, unsigned threads = 1) {
    std::vector<BinaryMask> out(images.size());
    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(1, images.size()))));
    if (threads == 1) {
        for (std::size_t i = 0; i < images.size(); ++i) {
            out[i] = predict_mask(p, images[i]);
        }
        return out;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    const std::size_t chunk = (images.size() + threads - 1) / threads;
    for (unsigned t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (std::size_t i = t * chunk; i < std::min(images.size(), (t + 1) * chunk); ++i) {
                    out[i] = predict_mask(p, images[i]);
                }
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) {
        th.join();
    }
    for (const auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
    return out;
}

} // namespace carbq::nn
