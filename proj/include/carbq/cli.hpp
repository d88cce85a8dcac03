#pragma once

// The carbq command line. run_cli() is the whole program; main() only
// forwards argv so tests can drive it in-process too.

#include <cstdio>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "carbq/analytics.hpp"
#include "carbq/curation_service.hpp"
#include "carbq/dataset.hpp"
#include "carbq/error.hpp"
#include "carbq/fileio.hpp"
#include "carbq/image.hpp"
#include "carbq/masking.hpp"
#include "carbq/metrics.hpp"
#include "carbq/morphology.hpp"
#include "carbq/nn/serialize.hpp"
#include "carbq/nn/train.hpp"
#include "carbq/synth.hpp"

namespace carbq {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitConfig = 3;

/// Settings shared by the subcommands. Flags override the --config file.
struct RunConfig {
    std::optional<fs::path> manifest;
    std::optional<fs::path> out;
    std::optional<std::uint64_t> seed;
    std::optional<int> port;
    nn::UNetConfig model;
    std::optional<ThresholdSet> threshold_set;
    std::map<int, double> nm_per_px; // magnification -> nm per pixel
    SynthSpec synth;
    SplitRatios split;
    double size_bin_width = 50.0;
};

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) {
        throw ConfigError("config must be a JSON object");
    }
    RunConfig c;
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "manifest") {
                c.manifest = v.get<std::string>();
            } else if (key == "out") {
                c.out = v.get<std::string>();
            } else if (key == "seed") {
                c.seed = v.get<std::uint64_t>();
            } else if (key == "port") {
                c.port = v.get<int>();
            } else if (key == "model") {
                c.model = nn::config_from_json(v);
                c.model.validate();
            } else if (key == "threshold_set") {
                c.threshold_set = ThresholdSet(v.get<std::vector<int>>());
            } else if (key == "nm_per_px") {
                for (const auto& [mag, scale] : v.items()) {
                    const int m = std::stoi(mag);
                    const double s = scale.get<double>();
                    if (m <= 0 || !(s > 0.0)) {
                        throw ConfigError("nm_per_px: magnification and scale must be positive");
                    }
                    c.nm_per_px[m] = s;
                }
            } else if (key == "synth") {
                c.synth = synth_spec_from_json(v);
            } else if (key == "split") {
                detail::reject_unknown_keys(v, {"train", "val", "test"}, "split");
                c.split.train = v.value("train", c.split.train);
                c.split.val = v.value("val", c.split.val);
                c.split.test = v.value("test", c.split.test);
            } else if (key == "size_bin_width") {
                c.size_bin_width = v.get<double>();
                if (!(c.size_bin_width > 0.0)) {
                    throw ConfigError("size_bin_width must be positive");
                }
            } else {
                throw ConfigError("config: unknown key \"" + key + "\"");
            }
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    } catch (const std::logic_error& e) { // stoi
        throw ConfigError(std::string("config: ") + e.what());
    } catch (const Error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    if (c.port && (*c.port < 1024 || *c.port > 65535)) {
        throw ConfigError("port must be in [1024, 65535], got " + std::to_string(*c.port));
    }
    return c;
}

inline RunConfig load_run_config(const fs::path& path) {
    if (!fs::exists(path)) {
        throw ConfigError("config file not found: " + path.string());
    }
    try {
        return run_config_from_json(nlohmann::json::parse(read_file_text(path)));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

namespace detail {

inline std::string error_line(const char* kind, const std::string& msg) {
    return nlohmann::json{{"error", kind}, {"message", msg}}.dump();
}

inline fs::path require_path(const std::optional<fs::path>& p, const char* flag) {
    if (!p) {
        throw ConfigError(std::string(flag) + " is required");
    }
    return *p;
}

inline fs::path existing_manifest(const RunConfig& c) {
    const fs::path p = require_path(c.manifest, "--manifest");
    if (!fs::exists(p)) {
        throw ConfigError("manifest not found: " + p.string());
    }
    return p;
}

inline fs::path out_dir(const RunConfig& c) {
    const fs::path p = require_path(c.out, "--out");
    fs::create_directories(p);
    return p;
}

inline nn::UNetParams<float> existing_model(const fs::path& p) {
    if (!fs::exists(p)) {
        throw ConfigError("model file not found: " + p.string());
    }
    return nn::load_params_file<float>(p);
}

// The mask used for analysis: the curated mask file, else a model prediction
// scaled back to the image size.
inline std::optional<BinaryMask> analysis_mask(const Manifest& m, const ManifestEntry& e,
                                               const nn::UNetParams<float>* model) {
    if (model != nullptr) {
        const GrayImage img = load_pgm(m.resolve(e.image_path));
        const BinaryMask pred = nn::predict_mask(*model, img);
        return resize(pred, img.width(), img.height(), ResizeMode::nearest);
    }
    if (e.curated() && e.mask_path) {
        return load_mask(m.resolve(*e.mask_path));
    }
    return std::nullopt;
}

inline std::string three_digits(int t) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "%03d", t);
    return buf;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Subcommands

inline void cmd_ingest(const RunConfig& c, const fs::path& images, const fs::path& labels) {
    const fs::path mpath = detail::require_path(c.manifest, "--manifest");
    Manifest m = ingest_directory(images, labels, mpath);
    if (c.threshold_set) {
        m.default_threshold_set = *c.threshold_set;
    }
    save_manifest(mpath, m);
    std::cerr << "ingested " << m.entries.size() << " images into " << mpath.string() << "\n";
}

inline void cmd_make_masks(const RunConfig& c) {
    const Manifest m = load_manifest(detail::existing_manifest(c));
    const fs::path out = detail::out_dir(c) / "candidates";
    const ThresholdSet ts = c.threshold_set.value_or(m.default_threshold_set);
    for (const auto& e : m.entries) {
        const GrayImage img = load_pgm(m.resolve(e.image_path));
        for (int t : ts) {
            save_mask(out / e.id / ("t" + detail::three_digits(t) + ".pgm"), curated_mask(img, t));
        }
    }
    std::cerr << "wrote " << m.entries.size() * ts.size() << " candidate masks under " << out.string() << "\n";
}

// Port: --port, then CARBQ_PORT, then the config file, then 8765.
inline void cmd_curate(const RunConfig& c, std::optional<int> flag_port, const std::string& host,
                       const std::optional<fs::path>& static_dir) {
    const fs::path mpath = detail::existing_manifest(c);
    const int port = resolve_port(flag_port, c.port.value_or(kDefaultPort));
    CurationServer server(mpath, static_dir);
    server.bind(host, port);
    std::cerr << "serving " << mpath.string() << " on http://" << host << ":" << port << "\n";
    server.listen();
}

inline void cmd_split(const RunConfig& c) {
    const fs::path mpath = detail::existing_manifest(c);
    const Manifest m = split_manifest(load_manifest(mpath), c.split, c.seed.value_or(0));
    save_manifest(mpath, m);
    std::size_t n[4] = {0, 0, 0, 0};
    for (const auto& e : m.entries) {
        ++n[static_cast<int>(e.split)];
    }
    std::cerr << "split: train " << n[0] << ", val " << n[1] << ", test " << n[2] << "\n";
}

inline void cmd_train(const RunConfig& c) {
    const Manifest m = load_manifest(detail::existing_manifest(c));
    const fs::path out = detail::out_dir(c);
    nn::UNetConfig cfg = c.model;
    if (c.seed) {
        cfg.seed = *c.seed;
    }
    const auto train_pairs = load_pairs(m, Split::train, cfg.input_w, cfg.input_h);
    const auto val_pairs = load_pairs(m, Split::val, cfg.input_w, cfg.input_h);
    std::cerr << "training on " << train_pairs.size() << " images, validating on " << val_pairs.size() << "\n";
    auto [params, history] = nn::train<float>(cfg, train_pairs, val_pairs, [&](const nn::EpochRecord& r) {
        std::cerr << "epoch " << r.epoch << "/" << cfg.epochs << " loss " << format_number(r.train_loss) << " acc "
                  << format_number(r.train_acc);
        if (r.val_acc) {
            std::cerr << " val_acc " << format_number(*r.val_acc);
        }
        std::cerr << "\n";
    });
    nn::save_params_file(out / "model.cseg", params);
    write_file_atomic(out / "history.csv", std::string_view(nn::history_csv(history)));
}

inline void cmd_eval(const RunConfig& c, const std::optional<fs::path>& model_flag, const std::string& split_name) {
    const Manifest m = load_manifest(detail::existing_manifest(c));
    const fs::path out = detail::out_dir(c);
    const fs::path model_path = model_flag.value_or(out / "model.cseg");
    const auto model = detail::existing_model(model_path);
    Split split;
    try {
        split = parse_split(split_name);
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    const auto pairs = load_pairs(m, split, model.config.input_w, model.config.input_h);
    std::vector<ImageMetrics> rows;
    fs::create_directories(out / "overlays");
    for (const auto& s : pairs) {
        const BinaryMask pred = nn::predict_mask(model, s.image);
        rows.push_back({s.id, split, confusion(pred, s.mask)});
        write_file_atomic(out / "overlays" / (s.id + ".ppm"), render_overlay_ppm(overlay(pred, s.mask)));
    }
    write_file_atomic(out / "overlays" / "legend.json", std::string_view(overlay_legend().dump(2) + "\n"));
    write_file_atomic(out / "metrics.csv", std::string_view(metrics_csv(rows)));
    const EvalSummary sum = summarize(rows);
    const nlohmann::json j = {{"split", to_string(split)},
                              {"n_images", sum.n_images},
                              {"accuracy", sum.accuracy},
                              {"mean_iou", sum.mean_iou},
                              {"pooled", {{"tp", sum.pooled.tp}, {"fp", sum.pooled.fp}, {"fn", sum.pooled.fn}, {"tn", sum.pooled.tn}}}};
    write_file_atomic(out / "eval_summary.json", std::string_view(j.dump(2) + "\n"));
    std::cerr << "eval " << to_string(split) << ": " << sum.n_images << " images, accuracy "
              << format_number(sum.accuracy) << ", mean IoU " << format_number(sum.mean_iou) << "\n";
}

inline void cmd_analyze(const RunConfig& c, const std::optional<fs::path>& model_path) {
    const Manifest m = load_manifest(detail::existing_manifest(c));
    const fs::path out = detail::out_dir(c);
    std::optional<nn::UNetParams<float>> model;
    if (model_path) {
        model = detail::existing_model(*model_path);
    }
    const nn::UNetParams<float>* mp = model ? &*model : nullptr;

    AnalysisReport r;
    r.size_bin_width = c.size_bin_width;
    std::vector<FeatureRecord> sized;
    std::set<std::string> grids;
    std::size_t skipped = 0;
    for (const auto& e : m.entries) {
        const auto mask = detail::analysis_mask(m, e, mp);
        if (!mask) {
            ++skipped;
            continue;
        }
        const auto feats = extract_features(*mask, resolve_scale(e, c.nm_per_px));
        r.images.push_back(image_stats(e.id, e.class_label, *mask, feats));
        for (const auto& f : feats) {
            r.features.push_back({e.id, e.class_label, f});
        }
        if (e.grid) {
            grids.insert(*e.grid);
        } else {
            for (const auto& f : feats) {
                sized.push_back({e.id, e.class_label, f});
            }
        }
    }

    // Tiles of one grid are stitched before sizing so carbides cut by tile
    // borders count once.
    for (const auto& g : grids) {
        const fs::path gpath = m.resolve(g);
        const TileGrid grid = load_tile_grid(gpath);
        std::vector<BinaryMask> tiles;
        const ManifestEntry* first = nullptr;
        for (const auto& tp : grid.tile_paths) {
            const fs::path want = fs::weakly_canonical(gpath.parent_path() / tp);
            const ManifestEntry* hit = nullptr;
            for (const auto& e : m.entries) {
                if (fs::weakly_canonical(m.resolve(e.image_path)) == want) {
                    hit = &e;
                    break;
                }
            }
            if (hit == nullptr) {
                throw InvalidArgument("grid " + g + ": tile " + tp + " is not in the manifest");
            }
            auto mask = detail::analysis_mask(m, *hit, mp);
            if (!mask) {
                throw InvalidArgument("grid " + g + ": tile " + hit->id + " has no mask");
            }
            tiles.push_back(std::move(*mask));
            first = first != nullptr ? first : hit;
        }
        const BinaryMask whole = stitch_tiles(tiles, grid.cols, grid.rows);
        const std::string id = fs::path(g).stem().string();
        for (const auto& f : extract_features(whole, resolve_scale(*first, c.nm_per_px))) {
            sized.push_back({id, first->class_label, f});
        }
    }
    if (!grids.empty()) {
        r.size_features = std::move(sized);
    }
    emit_report(out, r);
    std::cerr << "analyzed " << r.images.size() << " images (" << r.features.size() << " carbides)";
    if (skipped > 0) {
        std::cerr << ", skipped " << skipped << " without a mask";
    }
    std::cerr << "\n";
}

inline void cmd_synth(const RunConfig& c, std::optional<int> n_images) {
    SynthSpec s = c.synth;
    if (c.seed) {
        s.seed = *c.seed;
    }
    if (n_images) {
        s.n_images = *n_images;
    }
    try {
        validate(s);
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    const fs::path out = detail::out_dir(c);
    const Manifest m = write_synth_dataset(s, out);
    std::cerr << "generated " << m.entries.size() << " images in " << out.string() << "\n";
}

inline void cmd_stitch(const RunConfig& c, const fs::path& grid, const std::optional<fs::path>& output) {
    if (!fs::exists(grid)) {
        throw ConfigError("grid file not found: " + grid.string());
    }
    const fs::path dst = output ? *output : detail::out_dir(c) / (grid.stem().string() + ".pgm");
    save_pgm(dst, stitch_grid_file(grid));
    std::cerr << "wrote " << dst.string() << "\n";
}

// ---------------------------------------------------------------------------

inline int run_cli(int argc, const char* const* argv) {
    CLI::App app{"carbq: carbide segmentation and morphology toolkit", "carbq"};
    app.require_subcommand(0, 1);
    app.fallthrough();
    app.set_help_all_flag("--help-all", "Help for every subcommand");

    std::optional<std::string> manifest, out, config;
    std::optional<std::uint64_t> seed;
    std::optional<int> port;
    app.add_option("--manifest", manifest, "Manifest JSON file");
    app.add_option("--out", out, "Output directory");
    app.add_option("--seed", seed, "Seed for splits, training and synthesis");
    app.add_option("--config", config, "JSON run config");
    app.add_option("--port", port, "Curation service port (default 8765, or CARBQ_PORT)");

    std::string images_dir, labels;
    auto* ingest = app.add_subcommand("ingest", "Build a manifest from an image directory and labels CSV");
    ingest->add_option("--images", images_dir, "Directory of PGM images")->required();
    ingest->add_option("--labels", labels, "CSV: file,class_label,magnification[,nm_per_px]")->required();

    auto* make_masks = app.add_subcommand("make-masks", "Write the 16 candidate masks per image to OUT/candidates");

    std::string host = "127.0.0.1";
    std::optional<std::string> static_dir;
    auto* curate = app.add_subcommand("curate", "Serve the curation API (and UI files) on localhost");
    curate->add_option("--host", host, "Bind address")->capture_default_str();
    curate->add_option("--static", static_dir, "Directory of UI files served at /");

    auto* split = app.add_subcommand("split", "Assign curated images to train/val/test in place");

    auto* train = app.add_subcommand("train", "Train the U-Net; writes OUT/model.cseg and OUT/history.csv");

    std::optional<std::string> model;
    std::string split_name = "test";
    auto* eval = app.add_subcommand("eval", "Metrics and overlays on one split");
    eval->add_option("--model", model, "Weights file (default OUT/model.cseg)");
    eval->add_option("--split", split_name, "train, val or test")->capture_default_str();

    auto* analyze = app.add_subcommand("analyze", "Morphology and class statistics into OUT");
    analyze->add_option("--model", model, "Segment with this model instead of the curated masks");

    std::optional<int> n_images;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset into OUT");
    synth->add_option("--n-images", n_images, "Number of images");

    std::string grid;
    std::optional<std::string> stitch_out;
    auto* stitch = app.add_subcommand("stitch", "Stitch a tile grid into one image");
    stitch->add_option("--grid", grid, "Grid JSON {cols, rows, tile_paths}")->required();
    stitch->add_option("--output", stitch_out, "Output PGM (default OUT/<grid>.pgm)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            return app.exit(e);
        }
        std::cerr << detail::error_line("usage", e.what()) << "\n" << app.help();
        return kExitUsage;
    }
    if (app.get_subcommands().empty()) {
        std::cerr << detail::error_line("usage", "a subcommand is required") << "\n" << app.help();
        return kExitUsage;
    }

    try {
        RunConfig c = config ? load_run_config(*config) : RunConfig{};
        if (manifest) c.manifest = *manifest;
        if (out) c.out = *out;
        if (seed) c.seed = *seed;
        if (port && (*port < 1024 || *port > 65535)) {
            throw ConfigError("port must be in [1024, 65535], got " + std::to_string(*port));
        }

        if (ingest->parsed()) {
            cmd_ingest(c, images_dir, labels);
        } else if (make_masks->parsed()) {
            cmd_make_masks(c);
        } else if (curate->parsed()) {
            cmd_curate(c, port, host, static_dir ? std::optional<fs::path>(*static_dir) : std::nullopt);
        } else if (split->parsed()) {
            cmd_split(c);
        } else if (train->parsed()) {
            cmd_train(c);
        } else if (eval->parsed()) {
            cmd_eval(c, model ? std::optional<fs::path>(*model) : std::nullopt, split_name);
        } else if (analyze->parsed()) {
            cmd_analyze(c, model ? std::optional<fs::path>(*model) : std::nullopt);
        } else if (synth->parsed()) {
            cmd_synth(c, n_images);
        } else if (stitch->parsed()) {
            cmd_stitch(c, grid, stitch_out ? std::optional<fs::path>(*stitch_out) : std::nullopt);
        }
    } catch (const ConfigError& e) {
        std::cerr << detail::error_line("config", e.what()) << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << detail::error_line("runtime", e.what()) << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}

} // namespace carbq
