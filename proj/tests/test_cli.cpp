#include <gtest/gtest.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>
#include <thread>

#include <httplib.h>

#include "carbq/dataset.hpp"
#include "carbq/masking.hpp"
#include "carbq/synth.hpp"
#include "support.hpp"

using namespace carbq;
using carbq::test::TempDir;
using nlohmann::json;

namespace {

struct Run {
    int code = -1;
    std::string err;
};

Run carbq_run(const TempDir& dir, const std::string& args) {
    const fs::path err = dir / "stderr.txt";
    const std::string cmd = std::string("cd '") + dir.path().string() + "' && '" CARBQ_EXE "' " + args + " 2> '" +
                            err.string() + "' > /dev/null";
    const int status = std::system(cmd.c_str());
    Run r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.err = read_file_text(err);
    return r;
}

json first_line_json(const std::string& s) { return json::parse(s.substr(0, s.find('\n'))); }

std::string slurp(const fs::path& p) { return read_file_text(p); }

std::size_t line_count(const fs::path& p) {
    std::ifstream in(p);
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);) ++n;
    return n;
}

void write_text(const fs::path& p, const std::string& s) { write_file_atomic(p, std::string_view(s)); }

const char* kTinyConfig = R"({
  "synth": {"n_images": 20, "image_w": 32, "image_h": 32, "blobs_min": 1, "blobs_max": 2, "long_max": 14},
  "model": {"input_w": 32, "input_h": 32, "depth": 1, "base_channels": 2, "epochs": 3, "batch_size": 4}
})";

} // namespace

TEST(Cli, UsageErrorsExit2) {
    TempDir dir("cli");
    auto r = carbq_run(dir, "");
    EXPECT_EQ(r.code, 2);
    EXPECT_EQ(first_line_json(r.err)["error"], "usage");
    EXPECT_NE(r.err.find("Subcommands"), std::string::npos);

    r = carbq_run(dir, "frobnicate");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(first_line_json(r.err)["message"].get<std::string>().find("frobnicate"), std::string::npos);

    r = carbq_run(dir, "stitch");
    EXPECT_EQ(r.code, 2); // --grid is required
    EXPECT_EQ(carbq_run(dir, "--help").code, 0);
}

TEST(Cli, InvalidConfigExit3) {
    TempDir dir("cli");
    write_text(dir / "bad.json", R"({"epochz": 3})");
    auto r = carbq_run(dir, "--config bad.json synth --out ds");
    EXPECT_EQ(r.code, 3);
    EXPECT_EQ(first_line_json(r.err)["error"], "config");

    write_text(dir / "bad.json", R"({"model": {"depth": 7}})");
    EXPECT_EQ(carbq_run(dir, "--config bad.json train").code, 3);
    write_text(dir / "bad.json", "{not json");
    EXPECT_EQ(carbq_run(dir, "--config bad.json train").code, 3);
    EXPECT_EQ(carbq_run(dir, "--config missing.json train").code, 3);
    EXPECT_EQ(carbq_run(dir, "--port 80 curate --manifest m.json").code, 3);
    EXPECT_EQ(carbq_run(dir, "train --out x").code, 3); // no manifest
    EXPECT_FALSE(fs::exists(dir / "ds"));
}

TEST(Cli, EvalWithoutModelNamesPath) {
    TempDir dir("cli");
    write_text(dir / "c.json", kTinyConfig);
    ASSERT_EQ(carbq_run(dir, "--config c.json synth --out ds").code, 0);
    const auto r = carbq_run(dir, "eval --manifest ds/manifest.json --out run --model nowhere/model.cseg");
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(first_line_json(r.err)["message"].get<std::string>().find("nowhere/model.cseg"), std::string::npos);
    EXPECT_NE(carbq_run(dir, "eval --manifest ds/manifest.json --out run").err.find("run/model.cseg"),
              std::string::npos);
}

TEST(Cli, RuntimeFailureExit1) {
    TempDir dir("cli");
    write_text(dir / "m.json", dump_manifest(Manifest{}));
    const auto r = carbq_run(dir, "split --manifest m.json");
    EXPECT_EQ(r.code, 1);
    EXPECT_EQ(first_line_json(r.err)["error"], "runtime");
}

TEST(Cli, AnalyzeEmptyManifestWritesHeaders) {
    TempDir dir("cli");
    write_text(dir / "m.json", dump_manifest(Manifest{}));
    ASSERT_EQ(carbq_run(dir, "analyze --manifest m.json --out rep").code, 0);
    for (const char* f : {"features.csv", "image_stats.csv", "orientation_histogram.csv", "size_histogram.csv"}) {
        EXPECT_EQ(line_count(dir / "rep" / f), 1u) << f;
    }
    const json s = json::parse(slurp(dir / "rep/summary.json"));
    EXPECT_EQ(s["LB"]["n_images"], 0);
    EXPECT_TRUE(s["TM"]["fraction"]["mean"].is_null());
}

TEST(Cli, SynthTrainEvalSmokeIsReproducible) {
    TempDir dir("cli");
    write_text(dir / "c.json", kTinyConfig);
    auto pipeline = [&](const std::string& tag) {
        EXPECT_EQ(carbq_run(dir, "--config c.json --seed 4 synth --out ds" + tag).code, 0);
        const std::string m = "--manifest ds" + tag + "/manifest.json --out run" + tag;
        EXPECT_EQ(carbq_run(dir, "--config c.json --seed 4 train " + m).code, 0);
        EXPECT_EQ(carbq_run(dir, "--config c.json eval " + m).code, 0);
        EXPECT_EQ(carbq_run(dir, "--config c.json analyze " + m + " --model run" + tag + "/model.cseg").code, 0);
    };
    pipeline("A");
    pipeline("B");

    const Manifest m = load_manifest(dir / "dsA/manifest.json");
    std::size_t n_test = 0;
    for (const auto& e : m.entries) n_test += e.split == Split::test ? 1 : 0;
    EXPECT_EQ(line_count(dir / "runA/history.csv"), 4u);
    EXPECT_EQ(line_count(dir / "runA/metrics.csv"), n_test + 1);
    EXPECT_GE(line_count(dir / "runA/features.csv"), 1u); // an undertrained model may find nothing
    for (const auto& e : m.entries) {
        if (e.split == Split::test) {
            EXPECT_TRUE(fs::exists(dir / "runA/overlays" / (e.id + ".ppm")));
        }
    }
    const json legend = json::parse(slurp(dir / "runA/overlays/legend.json"));
    EXPECT_EQ(legend.size(), 4u);
    const json sum = json::parse(slurp(dir / "runA/eval_summary.json"));
    EXPECT_EQ(sum["n_images"], n_test);

    for (const char* f : {"history.csv", "model.cseg", "metrics.csv", "eval_summary.json", "features.csv",
                          "image_stats.csv", "summary.json"}) {
        EXPECT_EQ(slurp(dir / "runA" / f), slurp(dir / "runB" / f)) << f;
    }
    EXPECT_EQ(slurp(dir / "dsA/manifest.json"), slurp(dir / "dsB/manifest.json"));
}

TEST(Cli, IngestMakeMasksSplit) {
    TempDir dir("cli");
    SynthSpec s;
    s.n_images = 4;
    s.image_w = 40;
    s.image_h = 30;
    s.blobs_min = 1;
    s.blobs_max = 2;
    s.long_max = 14;
    const auto recs = generate(s);
    std::string labels = "file,class_label,magnification,nm_per_px\n";
    for (const auto& r : recs) {
        save_pgm(dir / "raw" / (r.id + ".pgm"), r.image);
        labels += r.id + ".pgm," + to_string(r.class_label) + ",5000,\n";
    }
    write_text(dir / "raw/labels.csv", labels);
    ASSERT_EQ(carbq_run(dir, "ingest --images raw --labels raw/labels.csv --manifest m.json").code, 0);
    Manifest m = load_manifest(dir / "m.json");
    ASSERT_EQ(m.entries.size(), 4u);
    EXPECT_EQ(m.at("synth_0001").class_label, ClassLabel::TM);

    ASSERT_EQ(carbq_run(dir, "make-masks --manifest m.json --out cand").code, 0);
    for (const auto& r : recs) {
        std::size_t files = 0;
        for (const auto& f : fs::directory_iterator(dir / "cand/candidates" / r.id)) {
            (void)f;
            ++files;
        }
        EXPECT_EQ(files, 16u);
        // the candidate file is the exact raster the curation preview serves
        EXPECT_EQ(read_file_bytes(dir / "cand/candidates" / r.id / "t130.pgm"),
                  encode_mask_pgm(curated_mask(r.image, 130)));
        EXPECT_EQ(read_file_bytes(dir / "cand/candidates" / r.id / "t070.pgm"),
                  encode_mask_pgm(curated_mask(r.image, 70)));
    }

    for (const auto& r : recs) m = record_curation(m, r.id, 130);
    save_manifest(dir / "m.json", m);
    ASSERT_EQ(carbq_run(dir, "--seed 3 split --manifest m.json").code, 0);
    const Manifest split = load_manifest(dir / "m.json");
    EXPECT_EQ(dump_manifest(split), dump_manifest(split_manifest(m, SplitRatios{}, 3)));
}

TEST(Cli, StitchMatchesTileLayout) {
    TempDir dir("cli");
    Rng rng(8);
    const GrayImage a = test::random_image(rng, 5, 3), b = test::random_image(rng, 4, 3);
    save_pgm(dir / "t/a.pgm", a);
    save_pgm(dir / "t/b.pgm", b);
    write_text(dir / "t/grid.json", R"({"cols": 2, "rows": 1, "tile_paths": ["a.pgm", "b.pgm"]})");
    ASSERT_EQ(carbq_run(dir, "stitch --grid t/grid.json --out st").code, 0);
    const GrayImage s = load_pgm(dir / "st/grid.pgm");
    ASSERT_EQ(s.width(), 9);
    ASSERT_EQ(s.height(), 3);
    for (int y = 0; y < 3; ++y) {
        for (int x = 0; x < 9; ++x) EXPECT_EQ(s(x, y), x < 5 ? a(x, y) : b(x - 5, y));
    }
    EXPECT_EQ(carbq_run(dir, "stitch --grid t/none.json --out st").code, 3);
}

// A carbide cut by a tile border is two features per tile but one in the
// stitched size distribution.
TEST(Cli, AnalyzeSizesOnStitchedGrid) {
    TempDir dir("cli");
    auto tile = [](int x0, int x1) {
        std::vector<std::uint8_t> px(20 * 12, 60);
        for (int y = 4; y < 9; ++y)
            for (int x = x0; x < x1; ++x) px[static_cast<std::size_t>(y) * 20 + x] = 200;
        return GrayImage(20, 12, std::move(px));
    };
    save_pgm(dir / "img/l.pgm", tile(10, 20)); // 10x5 touching the right edge
    save_pgm(dir / "img/r.pgm", tile(0, 8));   // 8x5 touching the left edge
    write_text(dir / "img/grid.json", R"({"cols": 2, "rows": 1, "tile_paths": ["l.pgm", "r.pgm"]})");
    Manifest m;
    m.base_dir = dir.path();
    for (const char* id : {"l", "r"}) {
        ManifestEntry e;
        e.id = id;
        e.image_path = std::string("img/") + id + ".pgm";
        e.grid = "img/grid.json";
        e.nm_per_px = 2.0;
        m.entries.push_back(e);
    }
    m = record_curation(m, "l", 130);
    m = record_curation(m, "r", 130);
    save_manifest(dir / "m.json", m);
    write_text(dir / "c.json", R"({"size_bin_width": 100})");
    ASSERT_EQ(carbq_run(dir, "--config c.json analyze --manifest m.json --out rep").code, 0) << slurp(dir / "stderr.txt");
    EXPECT_EQ(line_count(dir / "rep/features.csv"), 3u);
    // one carbide of 18*5 px = 90 px = 360 nm^2 -> bin [300, 400)
    std::ifstream in(dir / "rep/size_histogram.csv");
    std::string line;
    std::getline(in, line);
    long total = 0;
    while (std::getline(in, line)) {
        std::stringstream ss(line);
        std::string cls, unit, lo, hi, count;
        std::getline(ss, cls, ',');
        std::getline(ss, unit, ',');
        std::getline(ss, lo, ',');
        std::getline(ss, hi, ',');
        std::getline(ss, count, ',');
        if (cls != "LB") continue;
        EXPECT_EQ(unit, "nm2");
        total += std::stol(count);
        if (std::stol(count) > 0) {
            EXPECT_EQ(lo, "300");
        }
    }
    EXPECT_EQ(total, 1);
}

TEST(Cli, CurateServesManifest) {
    TempDir dir("cli");
    write_text(dir / "c.json", kTinyConfig);
    ASSERT_EQ(carbq_run(dir, "--config c.json synth --out ds").code, 0);
    const int port = 20000 + static_cast<int>(::getpid() % 20000);
    const fs::path pidfile = dir / "pid";
    const std::string cmd = std::string("cd '") + dir.path().string() + "' && CARBQ_PORT=1 '" CARBQ_EXE
                            "' curate --manifest ds/manifest.json --port " + std::to_string(port) +
                            " 2>/dev/null & echo $! > '" + pidfile.string() + "'";
    ASSERT_EQ(std::system(cmd.c_str()), 0);
    httplib::Client c("127.0.0.1", port);
    httplib::Result r;
    for (int i = 0; i < 100 && !r; ++i) {
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
        r = c.Get("/api/progress");
    }
    EXPECT_EQ(std::system(("kill $(cat '" + pidfile.string() + "')").c_str()), 0);
    ASSERT_TRUE(r) << "service did not come up on port " << port;
    EXPECT_EQ(json::parse(r->body), (json{{"curated", 20}, {"total", 20}}));
}
