#pragma once

// Weight file:
//   "CSEG1\n"
//   one line of compact JSON: {"config": {...}, "layers": [{"name", "weight_shape", "bias"}...], "float_count": N}
//   "\n"
//   N little-endian IEEE-754 binary32 values: per layer, weights then biases, in header order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "carbq/error.hpp"
#include "carbq/fileio.hpp"
#include "carbq/nn/unet.hpp"

namespace carbq::nn {

inline constexpr std::string_view kWeightMagic = "CSEG1\n";

template <typename T>
std::vector<std::uint8_t> save_params(const UNetParams<T>& p) {
    nlohmann::json header;
    header["config"] = to_json(p.config);
    header["layers"] = nlohmann::json::array();
    std::size_t count = 0;
    for (const auto& l : p.layers) {
        header["layers"].push_back({{"name", l.spec.name},
                                    {"weight_shape", {l.weight.n, l.weight.c, l.weight.h, l.weight.w}},
                                    {"bias", l.bias.size()}});
        count += l.weight.size() + l.bias.size();
    }
    header["float_count"] = count;
    const std::string head = std::string(kWeightMagic) + header.dump() + "\n";
    std::vector<std::uint8_t> out(head.begin(), head.end());
    out.reserve(out.size() + 4 * count);
    auto put = [&](T v) {
        const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
        for (int b = 0; b < 4; ++b) {
            out.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
        }
    };
    for (const auto& l : p.layers) {
        for (T v : l.weight.values) {
            put(v);
        }
        for (T v : l.bias) {
            put(v);
        }
    }
    return out;
}

template <typename T = float>
UNetParams<T> load_params(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kWeightMagic.size() ||
        std::memcmp(bytes.data(), kWeightMagic.data(), kWeightMagic.size()) != 0) {
        throw FormatError("weights: bad magic, expected CSEG1", 0);
    }
    std::size_t pos = kWeightMagic.size();
    std::size_t eol = pos;
    while (eol < bytes.size() && bytes[eol] != '\n') {
        ++eol;
    }
    if (eol >= bytes.size()) {
        throw FormatError("weights: header line not terminated", bytes.size());
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                       bytes.begin() + static_cast<std::ptrdiff_t>(eol));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("weights: header is not JSON: ") + e.what(), pos);
    }
    UNetParams<T> p;
    std::size_t declared = 0;
    try {
        p = zero_params<T>(config_from_json(header.at("config")));
        const auto& layers = header.at("layers");
        if (layers.size() != p.layers.size()) {
            throw FormatError("weights: header lists " + std::to_string(layers.size()) + " layers, config implies " +
                                  std::to_string(p.layers.size()),
                              pos);
        }
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = p.layers[i];
            const auto shape = layers[i].at("weight_shape").get<std::vector<int>>();
            const std::vector<int> expect{l.weight.n, l.weight.c, l.weight.h, l.weight.w};
            if (layers[i].at("name").get<std::string>() != l.spec.name || shape != expect ||
                layers[i].at("bias").get<std::size_t>() != l.bias.size()) {
                throw FormatError("weights: layer " + std::to_string(i) + " header does not match " + l.spec.name, pos);
            }
        }
        declared = header.at("float_count").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("weights: bad header: ") + e.what(), pos);
    } catch (const InvalidArgument& e) {
        throw FormatError(std::string("weights: bad config: ") + e.what(), pos);
    }
    const std::size_t expected = p.parameter_count();
    if (declared != expected) {
        throw FormatError("weights: header claims " + std::to_string(declared) + " floats, layer shapes need " +
                              std::to_string(expected),
                          pos);
    }
    pos = eol + 1;
    const std::size_t remaining = bytes.size() - pos;
    if (remaining != 4 * expected) {
        throw FormatError("weights: expected " + std::to_string(expected) + " floats (" + std::to_string(4 * expected) +
                              " bytes), found " + std::to_string(remaining) + " bytes",
                          pos);
    }
    auto get = [&]() {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) {
            bits |= static_cast<std::uint32_t>(bytes[pos++]) << (8 * b);
        }
        return static_cast<T>(std::bit_cast<float>(bits));
    };
    for (auto& l : p.layers) {
        for (T& v : l.weight.values) {
            v = get();
        }
        for (T& v : l.bias) {
            v = get();
        }
    }
    return p;
}

template <typename T>
void save_params_file(const fs::path& path, const UNetParams<T>& p) {
    write_file_atomic(path, save_params(p));
}

template <typename T = float>
UNetParams<T> load_params_file(const fs::path& path) {
    if (!fs::exists(path)) {
        throw ConfigError("model file not found: " + path.string());
    }
    const auto bytes = read_file_bytes(path);
    try {
        return load_params<T>(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string(), e);
    }
}

} // namespace carbq::nn
