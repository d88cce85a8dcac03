#pragma once

// Grayscale rasters: canonical binary PGM codec, crop, resize, tile stitching.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "carbq/error.hpp"
#include "carbq/fileio.hpp"

namespace carbq {

struct GrayKind {
    static constexpr std::string_view name = "image";
    static constexpr bool valid(std::uint8_t) noexcept { return true; }
};

struct MaskKind {
    static constexpr std::string_view name = "mask";
    static constexpr bool valid(std::uint8_t v) noexcept { return v <= 1; }
};

/// Row-major 8-bit raster. Kind decides which values are admissible;
/// the contents are fixed at construction.
template <typename Kind>
class Raster {
public:
    using kind_type = Kind;

    Raster() = default;

    Raster(int width, int height, std::uint8_t fill = 0) : width_(width), height_(height) {
        check_dims(width, height);
        if (!Kind::valid(fill)) {
            throw InvalidArgument(std::string(Kind::name) + ": invalid fill value " + std::to_string(fill));
        }
        data_.assign(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), fill);
    }

    Raster(int width, int height, std::vector<std::uint8_t> data)
        : width_(width), height_(height), data_(std::move(data)) {
        check_dims(width, height);
        if (data_.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
            throw InvalidArgument(std::string(Kind::name) + ": data length " + std::to_string(data_.size()) +
                                  " != " + std::to_string(width) + "x" + std::to_string(height));
        }
        for (std::size_t i = 0; i < data_.size(); ++i) {
            if (!Kind::valid(data_[i])) {
                throw InvalidArgument(std::string(Kind::name) + ": invalid value " + std::to_string(data_[i]) +
                                      " at index " + std::to_string(i));
            }
        }
    }

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::uint8_t operator()(int x, int y) const noexcept {
        return data_[static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x)];
    }

    std::span<const std::uint8_t> data() const noexcept { return data_; }
    std::span<const std::uint8_t> row(int y) const noexcept {
        return std::span<const std::uint8_t>(data_).subspan(static_cast<std::size_t>(y) * width_, width_);
    }

    friend bool operator==(const Raster&, const Raster&) = default;

private:
    static void check_dims(int width, int height) {
        if (width <= 0 || height <= 0) {
            throw InvalidArgument(std::string(Kind::name) + ": dimensions must be positive, got " +
                                  std::to_string(width) + "x" + std::to_string(height));
        }
    }

    int width_ = 0;
    int height_ = 0;
    std::vector<std::uint8_t> data_;
};

using GrayImage = Raster<GrayKind>;

struct CropRect {
    int x0 = 0;
    int y0 = 0;
    int w = 0;
    int h = 0;
};

enum class ResizeMode { bilinear, nearest };

// ---------------------------------------------------------------------------
// PGM codec

namespace detail {

inline bool pgm_space(std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

// Skips whitespace and '#' comments. Returns the offset of the next token.
inline std::size_t pgm_skip(std::span<const std::uint8_t> b, std::size_t pos) {
    while (pos < b.size()) {
        if (pgm_space(b[pos])) {
            ++pos;
        } else if (b[pos] == '#') {
            while (pos < b.size() && b[pos] != '\n' && b[pos] != '\r') {
                ++pos;
            }
        } else {
            break;
        }
    }
    return pos;
}

inline long pgm_number(std::span<const std::uint8_t> b, std::size_t& pos, const char* field) {
    const std::size_t start = pgm_skip(b, pos);
    if (start >= b.size()) {
        throw FormatError(std::string("pgm: header truncated before ") + field, start);
    }
    if (start == pos) {
        throw FormatError(std::string("pgm: expected whitespace before ") + field, pos);
    }
    std::size_t p = start;
    long value = 0;
    while (p < b.size() && b[p] >= '0' && b[p] <= '9') {
        value = value * 10 + (b[p] - '0');
        if (value > 1'000'000'000L) {
            throw FormatError(std::string("pgm: ") + field + " too large", start);
        }
        ++p;
    }
    if (p == start) {
        throw FormatError(std::string("pgm: expected decimal ") + field, start);
    }
    pos = p;
    return value;
}

} // namespace detail

/// Decodes a binary PGM (P5, maxval 255). Errors report the byte offset.
inline GrayImage decode_pgm(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
        throw FormatError("pgm: bad magic, expected \"P5\"", 0);
    }
    std::size_t pos = 2;
    const long width = detail::pgm_number(bytes, pos, "width");
    const std::size_t height_at = detail::pgm_skip(bytes, pos);
    const long height = detail::pgm_number(bytes, pos, "height");
    const std::size_t maxval_at = detail::pgm_skip(bytes, pos);
    const long maxval = detail::pgm_number(bytes, pos, "maxval");
    if (width <= 0) {
        throw FormatError("pgm: width must be positive", 3);
    }
    if (height <= 0) {
        throw FormatError("pgm: height must be positive", height_at);
    }
    if (maxval != 255) {
        throw FormatError("pgm: maxval must be 255, got " + std::to_string(maxval), maxval_at);
    }
    if (pos >= bytes.size() || !detail::pgm_space(bytes[pos])) {
        throw FormatError("pgm: expected single whitespace after maxval", pos);
    }
    ++pos;
    const std::size_t need = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
    const std::size_t have = bytes.size() - pos;
    if (have < need) {
        throw FormatError("pgm: truncated raster, expected " + std::to_string(need) + " bytes, found " +
                              std::to_string(have),
                          bytes.size());
    }
    std::vector<std::uint8_t> data(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                   bytes.begin() + static_cast<std::ptrdiff_t>(pos + need));
    return GrayImage(static_cast<int>(width), static_cast<int>(height), std::move(data));
}

inline std::vector<std::uint8_t> encode_pgm(const GrayImage& img) {
    const std::string header = "P5\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), img.data().begin(), img.data().end());
    return out;
}

inline GrayImage load_pgm(const fs::path& path) {
    const auto bytes = read_file_bytes(path);
    try {
        return decode_pgm(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string(), e);
    }
}

inline void save_pgm(const fs::path& path, const GrayImage& img) { write_file_atomic(path, encode_pgm(img)); }

// ---------------------------------------------------------------------------
// Geometry

template <typename Kind>
Raster<Kind> crop(const Raster<Kind>& img, const CropRect& r) {
    if (r.w <= 0 || r.h <= 0 || r.x0 < 0 || r.y0 < 0 || r.x0 + r.w > img.width() || r.y0 + r.h > img.height()) {
        throw InvalidArgument("crop: rectangle (" + std::to_string(r.x0) + "," + std::to_string(r.y0) + "," +
                              std::to_string(r.w) + "," + std::to_string(r.h) + ") outside " +
                              std::to_string(img.width()) + "x" + std::to_string(img.height()));
    }
    std::vector<std::uint8_t> out;
    out.reserve(static_cast<std::size_t>(r.w) * r.h);
    for (int y = 0; y < r.h; ++y) {
        const auto src = img.row(r.y0 + y).subspan(static_cast<std::size_t>(r.x0), static_cast<std::size_t>(r.w));
        out.insert(out.end(), src.begin(), src.end());
    }
    return Raster<Kind>(r.w, r.h, std::move(out));
}

namespace detail {

// Nearest source index for pixel-center alignment:
//   s = (d + 0.5) * src / dst - 0.5, picking the closest integer, ties to the smaller.
// Evaluated in exact integer arithmetic: ceil(((2d + 1) * src - 2 dst) / (2 dst)).
inline int nearest_index(int d, int src, int dst) {
    const long long num = (2LL * d + 1) * src - 2LL * dst;
    const long long den = 2LL * dst;
    long long q = num / den;
    if (num % den != 0 && num > 0) {
        ++q;
    }
    if (q < 0) {
        q = 0;
    }
    if (q > src - 1) {
        q = src - 1;
    }
    return static_cast<int>(q);
}

// Edge-aligned source coordinate.
inline double edge_aligned(int d, int src, int dst) {
    if (dst <= 1) {
        return 0.0;
    }
    return static_cast<double>(d) * static_cast<double>(src - 1) / static_cast<double>(dst - 1);
}

inline std::uint8_t round_half_up(double v) {
    const double r = std::floor(v + 0.5);
    if (r <= 0.0) {
        return 0;
    }
    if (r >= 255.0) {
        return 255;
    }
    return static_cast<std::uint8_t>(r);
}

} // namespace detail

/// Resizes to w x h. Bilinear is edge-aligned with round-half-up; nearest
/// picks the closest source pixel center (ties toward the smaller index).
/// Masks only admit nearest mode.
template <typename Kind>
Raster<Kind> resize(const Raster<Kind>& img, int w, int h, ResizeMode mode) {
    if (w <= 0 || h <= 0) {
        throw InvalidArgument("resize: target dimensions must be positive");
    }
    if (w == img.width() && h == img.height()) {
        return img;
    }
    std::vector<std::uint8_t> out(static_cast<std::size_t>(w) * h);
    if (mode == ResizeMode::nearest) {
        std::vector<int> xs(static_cast<std::size_t>(w));
        for (int x = 0; x < w; ++x) {
            xs[x] = detail::nearest_index(x, img.width(), w);
        }
        for (int y = 0; y < h; ++y) {
            const auto src = img.row(detail::nearest_index(y, img.height(), h));
            for (int x = 0; x < w; ++x) {
                out[static_cast<std::size_t>(y) * w + x] = src[static_cast<std::size_t>(xs[x])];
            }
        }
        return Raster<Kind>(w, h, std::move(out));
    }
    if constexpr (!std::is_same_v<Kind, GrayKind>) {
        throw InvalidArgument("resize: bilinear mode is only defined for grayscale images");
    } else {
        for (int y = 0; y < h; ++y) {
            const double sy = detail::edge_aligned(y, img.height(), h);
            const int y0 = static_cast<int>(std::floor(sy));
            const int y1 = std::min(y0 + 1, img.height() - 1);
            const double fy = sy - y0;
            for (int x = 0; x < w; ++x) {
                const double sx = detail::edge_aligned(x, img.width(), w);
                const int x0 = static_cast<int>(std::floor(sx));
                const int x1 = std::min(x0 + 1, img.width() - 1);
                const double fx = sx - x0;
                const double top = img(x0, y0) * (1.0 - fx) + img(x1, y0) * fx;
                const double bot = img(x0, y1) * (1.0 - fx) + img(x1, y1) * fx;
                out[static_cast<std::size_t>(y) * w + x] = detail::round_half_up(top * (1.0 - fy) + bot * fy);
            }
        }
        return Raster<Kind>(w, h, std::move(out));
    }
}

/// Lays out a row-major grid of tiles into one raster.
template <typename Kind>
Raster<Kind> stitch_tiles(std::span<const Raster<Kind>> tiles, int cols, int rows) {
    if (cols <= 0 || rows <= 0) {
        throw InvalidArgument("stitch: grid must be at least 1x1");
    }
    if (tiles.size() != static_cast<std::size_t>(cols) * rows) {
        throw InvalidArgument("stitch: expected " + std::to_string(cols * rows) + " tiles, got " +
                              std::to_string(tiles.size()));
    }
    auto tile = [&](int c, int r) -> const Raster<Kind>& { return tiles[static_cast<std::size_t>(r) * cols + c]; };
    std::vector<int> col_w(static_cast<std::size_t>(cols));
    std::vector<int> row_h(static_cast<std::size_t>(rows));
    for (int c = 0; c < cols; ++c) {
        col_w[c] = tile(c, 0).width();
    }
    for (int r = 0; r < rows; ++r) {
        row_h[r] = tile(0, r).height();
    }
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            if (tile(c, r).height() != row_h[r]) {
                throw InvalidArgument("stitch: tile (" + std::to_string(c) + "," + std::to_string(r) + ") height " +
                                      std::to_string(tile(c, r).height()) + " != row height " +
                                      std::to_string(row_h[r]));
            }
            if (tile(c, r).width() != col_w[c]) {
                throw InvalidArgument("stitch: tile (" + std::to_string(c) + "," + std::to_string(r) + ") width " +
                                      std::to_string(tile(c, r).width()) + " != column width " +
                                      std::to_string(col_w[c]));
            }
        }
    }
    int total_w = 0;
    int total_h = 0;
    for (int v : col_w) {
        total_w += v;
    }
    for (int v : row_h) {
        total_h += v;
    }
    std::vector<std::uint8_t> out;
    out.reserve(static_cast<std::size_t>(total_w) * total_h);
    for (int r = 0; r < rows; ++r) {
        for (int y = 0; y < row_h[r]; ++y) {
            for (int c = 0; c < cols; ++c) {
                const auto src = tile(c, r).row(y);
                out.insert(out.end(), src.begin(), src.end());
            }
        }
    }
    return Raster<Kind>(total_w, total_h, std::move(out));
}

template <typename Kind>
Raster<Kind> stitch_tiles(const std::vector<Raster<Kind>>& tiles, int cols, int rows) {
    return stitch_tiles(std::span<const Raster<Kind>>(tiles), cols, rows);
}

/// Splits into cols x rows tiles (row-major); leftover pixels go to the last
/// column/row. Inverse of stitch_tiles.
template <typename Kind>
std::vector<Raster<Kind>> split_tiles(const Raster<Kind>& img, int cols, int rows) {
    if (cols <= 0 || rows <= 0 || cols > img.width() || rows > img.height()) {
        throw InvalidArgument("split_tiles: invalid grid " + std::to_string(cols) + "x" + std::to_string(rows));
    }
    const int tw = img.width() / cols;
    const int th = img.height() / rows;
    std::vector<Raster<Kind>> out;
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            const int w = (c == cols - 1) ? img.width() - tw * c : tw;
            const int h = (r == rows - 1) ? img.height() - th * r : th;
            out.push_back(crop(img, CropRect{c * tw, r * th, w, h}));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Tile grid manifest: {"cols": n, "rows": m, "tile_paths": [...]}, row-major.

struct TileGrid {
    int cols = 0;
    int rows = 0;
    std::vector<std::string> tile_paths;
};

inline TileGrid parse_tile_grid(const nlohmann::json& j) {
    if (!j.is_object()) {
        throw InvalidArgument("tile grid: expected a JSON object");
    }
    for (const auto& [key, _] : j.items()) {
        if (key != "cols" && key != "rows" && key != "tile_paths") {
            throw InvalidArgument("tile grid: unknown key \"" + key + "\"");
        }
    }
    TileGrid g;
    try {
        g.cols = j.at("cols").get<int>();
        g.rows = j.at("rows").get<int>();
        g.tile_paths = j.at("tile_paths").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw InvalidArgument(std::string("tile grid: ") + e.what());
    }
    if (g.cols <= 0 || g.rows <= 0 || g.tile_paths.size() != static_cast<std::size_t>(g.cols) * g.rows) {
        throw InvalidArgument("tile grid: need cols*rows tile paths");
    }
    return g;
}

inline TileGrid load_tile_grid(const fs::path& path) {
    try {
        return parse_tile_grid(nlohmann::json::parse(read_file_text(path)));
    } catch (const nlohmann::json::parse_error& e) {
        throw InvalidArgument(path.string() + ": " + e.what());
    }
}

/// Loads and stitches every tile of a grid. Tile paths resolve against the
/// grid file's directory.
inline GrayImage stitch_grid_file(const fs::path& grid_path) {
    const TileGrid g = load_tile_grid(grid_path);
    std::vector<GrayImage> tiles;
    for (const auto& p : g.tile_paths) {
        tiles.push_back(load_pgm(grid_path.parent_path() / p));
    }
    return stitch_tiles(tiles, g.cols, g.rows);
}

} // namespace carbq
