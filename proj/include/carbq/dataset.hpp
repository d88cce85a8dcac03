#pragma once

// Dataset ledger: images, class labels, curated thresholds and split membership.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "carbq/error.hpp"
#include "carbq/fileio.hpp"
#include "carbq/image.hpp"
#include "carbq/masking.hpp"
#include "carbq/random.hpp"

namespace carbq {

enum class ClassLabel { LB, TM };
enum class Split { train, val, test, unassigned };

inline std::string to_string(ClassLabel c) { return c == ClassLabel::LB ? "LB" : "TM"; }

inline ClassLabel parse_class_label(const std::string& s) {
    if (s == "LB") {
        return ClassLabel::LB;
    }
    if (s == "TM") {
        return ClassLabel::TM;
    }
    throw InvalidArgument("class_label must be LB or TM, got \"" + s + "\"");
}

inline std::string to_string(Split s) {
    switch (s) {
    case Split::train:
        return "train";
    case Split::val:
        return "val";
    case Split::test:
        return "test";
    case Split::unassigned:
        break;
    }
    return "unassigned";
}

inline Split parse_split(const std::string& s) {
    if (s == "train") {
        return Split::train;
    }
    if (s == "val") {
        return Split::val;
    }
    if (s == "test") {
        return Split::test;
    }
    if (s == "unassigned") {
        return Split::unassigned;
    }
    throw InvalidArgument("split must be train, val, test or unassigned, got \"" + s + "\"");
}

struct ManifestEntry {
    std::string id;
    std::string image_path;
    ClassLabel class_label = ClassLabel::LB;
    int magnification = 1;
    std::optional<double> nm_per_px;
    std::optional<int> chosen_threshold; // empty = uncurated
    std::optional<std::string> mask_path;
    Split split = Split::unassigned;
    std::optional<std::string> grid;

    bool curated() const noexcept { return chosen_threshold.has_value(); }

    friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct Manifest {
    int version = 1;
    ThresholdSet default_threshold_set;
    std::vector<ManifestEntry> entries;
    fs::path base_dir; // relative paths resolve here; not serialized

    const ManifestEntry* find(const std::string& id) const {
        for (const auto& e : entries) {
            if (e.id == id) {
                return &e;
            }
        }
        return nullptr;
    }

    ManifestEntry* find(const std::string& id) {
        return const_cast<ManifestEntry*>(static_cast<const Manifest&>(*this).find(id));
    }

    const ManifestEntry& at(const std::string& id) const {
        if (const auto* e = find(id)) {
            return *e;
        }
        throw NotFound("unknown manifest entry id \"" + id + "\"");
    }

    fs::path resolve(const std::string& p) const {
        const fs::path path(p);
        return path.is_absolute() ? path : base_dir / path;
    }
};

struct SamplePair {
    std::string id;
    GrayImage image;
    BinaryMask mask;
};

struct SplitRatios {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;
};

// ---------------------------------------------------------------------------
// Validation and JSON

inline void validate(const Manifest& m) {
    std::set<std::string> ids;
    for (const auto& e : m.entries) {
        if (e.id.empty()) {
            throw InvalidArgument("manifest: entry with empty id");
        }
        if (!ids.insert(e.id).second) {
            throw InvalidArgument("manifest: duplicate entry id \"" + e.id + "\"");
        }
        if (e.magnification <= 0) {
            throw InvalidArgument("manifest: entry \"" + e.id + "\" magnification must be positive");
        }
        if (e.nm_per_px && !(*e.nm_per_px > 0.0)) {
            throw InvalidArgument("manifest: entry \"" + e.id + "\" nm_per_px must be > 0");
        }
        if (e.curated()) {
            if (!m.default_threshold_set.contains(*e.chosen_threshold)) {
                throw InvalidArgument("manifest: entry \"" + e.id + "\" threshold " +
                                      std::to_string(*e.chosen_threshold) + " not in the threshold set");
            }
            if (!e.mask_path) {
                throw InvalidArgument("manifest: curated entry \"" + e.id + "\" has no mask_path");
            }
        } else if (e.mask_path) {
            throw InvalidArgument("manifest: uncurated entry \"" + e.id + "\" must not carry a mask_path");
        }
    }
}

inline nlohmann::json to_json(const ManifestEntry& e) {
    nlohmann::json j;
    j["id"] = e.id;
    j["image_path"] = e.image_path;
    j["class_label"] = to_string(e.class_label);
    j["magnification"] = e.magnification;
    if (e.nm_per_px) {
        j["nm_per_px"] = *e.nm_per_px;
    }
    if (e.chosen_threshold) {
        j["chosen_threshold"] = *e.chosen_threshold;
    } else {
        j["chosen_threshold"] = "uncurated";
    }
    if (e.mask_path) {
        j["mask_path"] = *e.mask_path;
    }
    j["split"] = to_string(e.split);
    if (e.grid) {
        j["grid"] = *e.grid;
    }
    return j;
}

inline nlohmann::json to_json(const Manifest& m) {
    nlohmann::json j;
    j["version"] = m.version;
    j["default_threshold_set"] = m.default_threshold_set.to_vector();
    j["entries"] = nlohmann::json::array();
    for (const auto& e : m.entries) {
        j["entries"].push_back(to_json(e));
    }
    return j;
}

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    for (const auto& [key, _] : j.items()) {
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
            throw InvalidArgument(where + ": unknown key \"" + key + "\"");
        }
    }
}

} // namespace detail

inline ManifestEntry entry_from_json(const nlohmann::json& j) {
    if (!j.is_object()) {
        throw InvalidArgument("manifest: entry must be an object");
    }
    detail::reject_unknown_keys(j,
                                {"id", "image_path", "class_label", "magnification", "nm_per_px", "chosen_threshold",
                                 "mask_path", "split", "grid"},
                                "manifest entry");
    ManifestEntry e;
    try {
        e.id = j.at("id").get<std::string>();
        e.image_path = j.at("image_path").get<std::string>();
        e.class_label = parse_class_label(j.at("class_label").get<std::string>());
        e.magnification = j.at("magnification").get<int>();
        if (j.contains("nm_per_px") && !j["nm_per_px"].is_null()) {
            e.nm_per_px = j["nm_per_px"].get<double>();
        }
        const auto& t = j.at("chosen_threshold");
        if (t.is_string()) {
            if (t.get<std::string>() != "uncurated") {
                throw InvalidArgument("manifest: chosen_threshold must be an integer or \"uncurated\"");
            }
        } else {
            e.chosen_threshold = t.get<int>();
        }
        if (j.contains("mask_path")) {
            e.mask_path = j["mask_path"].get<std::string>();
        }
        e.split = parse_split(j.at("split").get<std::string>());
        if (j.contains("grid")) {
            e.grid = j["grid"].get<std::string>();
        }
    } catch (const nlohmann::json::exception& ex) {
        throw InvalidArgument(std::string("manifest entry: ") + ex.what());
    }
    return e;
}

inline Manifest manifest_from_json(const nlohmann::json& j) {
    if (!j.is_object()) {
        throw InvalidArgument("manifest: top level must be an object");
    }
    detail::reject_unknown_keys(j, {"version", "default_threshold_set", "entries"}, "manifest");
    Manifest m;
    try {
        m.version = j.at("version").get<int>();
        m.default_threshold_set = ThresholdSet(j.at("default_threshold_set").get<std::vector<int>>());
        for (const auto& e : j.at("entries")) {
            m.entries.push_back(entry_from_json(e));
        }
    } catch (const nlohmann::json::exception& ex) {
        throw InvalidArgument(std::string("manifest: ") + ex.what());
    }
    validate(m);
    return m;
}

inline Manifest load_manifest(const fs::path& path) {
    if (!fs::exists(path)) {
        throw ConfigError("manifest not found: " + path.string());
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file_text(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw InvalidArgument(path.string() + ": " + e.what());
    }
    Manifest m = manifest_from_json(j);
    m.base_dir = path.parent_path();
    return m;
}

inline std::string dump_manifest(const Manifest& m) { return to_json(m).dump(2) + "\n"; }

inline void save_manifest(const fs::path& path, const Manifest& m) {
    validate(m);
    write_file_atomic(path, dump_manifest(m));
}

// ---------------------------------------------------------------------------
// Operations

/// Deterministically assigns the curated entries to train/val/test.
/// val and test get floor(n * ratio); train takes the remainder.
inline Manifest split_manifest(const Manifest& m, const SplitRatios& r, std::uint64_t seed) {
    if (r.train < 0 || r.val < 0 || r.test < 0) {
        throw InvalidArgument("split ratios must be non-negative");
    }
    if (std::abs(r.train + r.val + r.test - 1.0) > 1e-9) {
        throw InvalidArgument("split ratios must sum to 1");
    }
    std::vector<std::size_t> curated;
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
        if (m.entries[i].curated()) {
            curated.push_back(i);
        }
    }
    if (curated.size() < 3) {
        throw InvalidArgument("split needs at least 3 curated entries, found " + std::to_string(curated.size()));
    }
    Rng rng(seed);
    rng.shuffle(curated);
    const auto n = static_cast<double>(curated.size());
    const auto n_val = static_cast<std::size_t>(std::floor(n * r.val + 1e-9));
    const auto n_test = static_cast<std::size_t>(std::floor(n * r.test + 1e-9));
    const std::size_t n_train = curated.size() - n_val - n_test;

    Manifest out = m;
    for (auto& e : out.entries) {
        e.split = Split::unassigned;
    }
    for (std::size_t k = 0; k < curated.size(); ++k) {
        Split s = Split::test;
        if (k < n_train) {
            s = Split::train;
        } else if (k < n_train + n_val) {
            s = Split::val;
        }
        out.entries[curated[k]].split = s;
    }
    return out;
}

/// Image/mask pairs of one split at model input size, in manifest order.
inline std::vector<SamplePair> load_pairs(const Manifest& m, Split split, int input_w, int input_h) {
    std::vector<SamplePair> out;
    for (const auto& e : m.entries) {
        if (e.split != split) {
            continue;
        }
        if (!e.curated() || !e.mask_path) {
            throw InvalidArgument("entry \"" + e.id + "\" is in split " + to_string(split) + " but is not curated");
        }
        const fs::path img_path = m.resolve(e.image_path);
        const fs::path mask_path = m.resolve(*e.mask_path);
        if (!fs::exists(img_path)) {
            throw IoError("entry \"" + e.id + "\": missing image " + img_path.string());
        }
        if (!fs::exists(mask_path)) {
            throw IoError("entry \"" + e.id + "\": missing mask " + mask_path.string());
        }
        GrayImage img = load_pgm(img_path);
        BinaryMask mask = load_mask(mask_path);
        if (img.width() != mask.width() || img.height() != mask.height()) {
            throw InvalidArgument("entry \"" + e.id + "\": image is " + std::to_string(img.width()) + "x" +
                                  std::to_string(img.height()) + " but mask is " + std::to_string(mask.width()) +
                                  "x" + std::to_string(mask.height()));
        }
        out.push_back({e.id, resize(img, input_w, input_h, ResizeMode::bilinear),
                       resize(mask, input_w, input_h, ResizeMode::nearest)});
    }
    return out;
}

/// The mask a curation at threshold t produces for an image.
inline BinaryMask curated_mask(const GrayImage& img, int t) {
    return denoise(threshold_mask(img, t), kNoiseMinArea, kDefaultConnectivity);
}

inline std::string default_mask_path(const std::string& id) { return "masks/" + id + ".pgm"; }

/// Records the human threshold choice and regenerates the entry's mask file.
/// The returned manifest has its version incremented; persisting it is up
/// to the caller.
inline Manifest record_curation(const Manifest& m, const std::string& id, int threshold) {
    const ManifestEntry& src = m.at(id);
    if (!m.default_threshold_set.contains(threshold)) {
        throw InvalidArgument("threshold " + std::to_string(threshold) + " is not in the threshold set");
    }
    Manifest out = m;
    ManifestEntry& e = *out.find(id);
    const GrayImage img = load_pgm(m.resolve(src.image_path));
    e.chosen_threshold = threshold;
    if (!e.mask_path) {
        e.mask_path = default_mask_path(id);
    }
    save_mask(out.resolve(*e.mask_path), curated_mask(img, threshold));
    ++out.version;
    return out;
}

/// Physical scale for an entry: its own nm_per_px, else the magnification table.
inline std::optional<double> resolve_scale(const ManifestEntry& e, const std::map<int, double>& table) {
    if (e.nm_per_px) {
        return e.nm_per_px;
    }
    if (auto it = table.find(e.magnification); it != table.end()) {
        return it->second;
    }
    return std::nullopt;
}

namespace detail {

inline std::vector<std::string> split_csv_line(std::string line) {
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) {
        line.pop_back();
    }
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        std::string cell = line.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
        const auto first = cell.find_first_not_of(' ');
        const auto last = cell.find_last_not_of(' ');
        out.push_back(first == std::string::npos ? "" : cell.substr(first, last - first + 1));
        if (comma == std::string::npos) {
            break;
        }
        start = comma + 1;
    }
    return out;
}

} // namespace detail

/// Builds a manifest from a directory of PGM images and a labels CSV with
/// header "file,class_label,magnification[,nm_per_px]".
inline Manifest ingest_directory(const fs::path& image_dir, const fs::path& labels_csv, const fs::path& manifest_path) {
    std::istringstream in(read_file_text(labels_csv));
    std::string line;
    if (!std::getline(in, line)) {
        throw InvalidArgument(labels_csv.string() + ": empty labels file");
    }
    const auto header = detail::split_csv_line(line);
    if (header.size() < 3 || header[0] != "file" || header[1] != "class_label" || header[2] != "magnification" ||
        (header.size() == 4 && header[3] != "nm_per_px") || header.size() > 4) {
        throw InvalidArgument(labels_csv.string() + ": header must be file,class_label,magnification[,nm_per_px]");
    }
    Manifest m;
    m.base_dir = manifest_path.parent_path();
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") {
            continue;
        }
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size()) {
            throw InvalidArgument(labels_csv.string() + ":" + std::to_string(line_no) + ": expected " +
                                  std::to_string(header.size()) + " columns");
        }
        const fs::path img = image_dir / cells[0];
        if (!fs::exists(img)) {
            throw IoError(labels_csv.string() + ":" + std::to_string(line_no) + ": missing image " + img.string());
        }
        (void)load_pgm(img); // reject non-PGM inputs at ingest time
        ManifestEntry e;
        e.id = fs::path(cells[0]).stem().string();
        e.image_path = fs::relative(fs::absolute(img), fs::absolute(m.base_dir.empty() ? fs::path(".") : m.base_dir))
                           .generic_string();
        e.class_label = parse_class_label(cells[1]);
        try {
            e.magnification = std::stoi(cells[2]);
            if (cells.size() == 4 && !cells[3].empty()) {
                e.nm_per_px = std::stod(cells[3]);
            }
        } catch (const std::exception&) {
            throw InvalidArgument(labels_csv.string() + ":" + std::to_string(line_no) + ": bad number");
        }
        m.entries.push_back(std::move(e));
    }
    validate(m);
    return m;
}

} // namespace carbq
