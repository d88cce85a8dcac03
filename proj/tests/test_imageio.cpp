#include <gtest/gtest.h>

#include <fstream>
#include <string>

#include "carbq/image.hpp"
#include "support.hpp"

using namespace carbq;
using carbq::test::random_image;
using carbq::test::TempDir;

namespace {

std::vector<std::uint8_t> bytes_of(const std::string& header, std::vector<std::uint8_t> raster) {
    std::vector<std::uint8_t> b(header.begin(), header.end());
    b.insert(b.end(), raster.begin(), raster.end());
    return b;
}

std::size_t error_offset(const std::vector<std::uint8_t>& b) {
    try {
        decode_pgm(b);
    } catch (const FormatError& e) {
        return e.offset();
    }
    ADD_FAILURE() << "no FormatError";
    return 0;
}

} // namespace

TEST(Pgm, DecodesRowMajorTopFirst) {
    const auto img = decode_pgm(bytes_of("P5 2 2 255\n", {0, 128, 255, 7}));
    ASSERT_EQ(img.width(), 2);
    ASSERT_EQ(img.height(), 2);
    EXPECT_EQ(img(0, 0), 0);
    EXPECT_EQ(img(1, 0), 128);
    EXPECT_EQ(img(0, 1), 255);
    EXPECT_EQ(img(1, 1), 7);
    EXPECT_EQ(decode_pgm(bytes_of("P5 1 1 255\n", {42}))(0, 0), 42);
}

TEST(Pgm, CommentsInHeaderAreSkipped) {
    const auto img = decode_pgm(bytes_of("P5\n# made by hand\n1 1\n255\n", {9}));
    EXPECT_EQ(img(0, 0), 9);
}

TEST(Pgm, ErrorsCarryByteOffsets) {
    EXPECT_EQ(error_offset(bytes_of("P2 1 1 255\n", {1})), 0u);
    // Truncated raster: reported at end of input.
    const auto trunc = bytes_of("P5 2 2 255\n", {1, 2, 3});
    EXPECT_EQ(error_offset(trunc), trunc.size());
    // maxval 65535 reported where the maxval field starts.
    EXPECT_EQ(error_offset(bytes_of("P5 1 1 65535\n", {1, 2})), 7u);
    EXPECT_THROW(decode_pgm(bytes_of("P5 1 1", {})), FormatError);
    EXPECT_THROW(decode_pgm(bytes_of("P5 0 1 255\n", {})), FormatError);
    EXPECT_THROW(decode_pgm(bytes_of("P5 x 1 255\n", {})), FormatError);
}

TEST(Pgm, EncodesCanonicalHeader) {
    const auto b = encode_pgm(GrayImage(1, 1, std::vector<std::uint8_t>{42}));
    EXPECT_EQ(b, bytes_of("P5\n1 1\n255\n", {42}));
    const auto z = encode_pgm(GrayImage(2, 3));
    EXPECT_EQ(z.size(), std::string("P5\n2 3\n255\n").size() + 6);
}

TEST(Pgm, RoundTripProperty) {
    Rng rng(100);
    for (int trial = 0; trial < 200; ++trial) {
        const int w = 1 + static_cast<int>(rng.below(40));
        const int h = 1 + static_cast<int>(rng.below(40));
        const auto img = random_image(rng, w, h);
        ASSERT_EQ(decode_pgm(encode_pgm(img)), img) << w << "x" << h;
    }
}

TEST(Pgm, FileRoundTripAndPathInErrors) {
    TempDir dir("pgm");
    Rng rng(3);
    const auto img = random_image(rng, 5, 4);
    save_pgm(dir / "sub/a.pgm", img);
    EXPECT_EQ(load_pgm(dir / "sub/a.pgm"), img);
    std::ofstream(dir / "bad.pgm") << "P6 1 1 255\nx";
    try {
        load_pgm(dir / "bad.pgm");
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("bad.pgm"), std::string::npos);
    }
    EXPECT_THROW(load_pgm(dir / "missing.pgm"), Error);
}

TEST(GrayImage, RejectsBadConstruction) {
    EXPECT_THROW(GrayImage(0, 1), InvalidArgument);
    EXPECT_THROW(GrayImage(2, 2, std::vector<std::uint8_t>(3)), InvalidArgument);
}

TEST(Crop, IndexArithmeticAndBounds) {
    std::vector<std::uint8_t> px(16);
    for (int i = 0; i < 16; ++i) px[i] = static_cast<std::uint8_t>(i);
    const GrayImage img(4, 4, px);
    EXPECT_EQ(crop(img, {0, 0, 4, 4}), img);
    const auto c = crop(img, {1, 1, 2, 2});
    EXPECT_EQ(c, GrayImage(2, 2, std::vector<std::uint8_t>{5, 6, 9, 10}));
    EXPECT_THROW(crop(img, {3, 3, 2, 2}), InvalidArgument);
    EXPECT_THROW(crop(img, {0, 0, 0, 2}), InvalidArgument);
}

TEST(Resize, NearestUsesPixelCenters) {
    const GrayImage img(2, 1, std::vector<std::uint8_t>{0, 255});
    EXPECT_EQ(resize(img, 4, 1, ResizeMode::nearest), GrayImage(4, 1, std::vector<std::uint8_t>{0, 0, 255, 255}));
    // Downsampling 4 -> 2 picks centers 0.5 and 2.5, tie to the smaller index: 0 and 2.
    const GrayImage four(4, 1, std::vector<std::uint8_t>{10, 20, 30, 40});
    EXPECT_EQ(resize(four, 2, 1, ResizeMode::nearest), GrayImage(2, 1, std::vector<std::uint8_t>{10, 30}));
}

TEST(Resize, BilinearEdgeAlignedRoundHalfUp) {
    const GrayImage img(2, 1, std::vector<std::uint8_t>{0, 255});
    // Middle sample at x = 0.5: 127.5 rounds up to 128.
    EXPECT_EQ(resize(img, 3, 1, ResizeMode::bilinear), GrayImage(3, 1, std::vector<std::uint8_t>{0, 128, 255}));
    const GrayImage one(1, 1, std::vector<std::uint8_t>{77});
    EXPECT_EQ(resize(one, 3, 2, ResizeMode::bilinear), GrayImage(3, 2, std::uint8_t{77}));
}

TEST(Resize, IdentityAndBinaryPreservationProperty) {
    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        const int w = 1 + static_cast<int>(rng.below(30));
        const int h = 1 + static_cast<int>(rng.below(30));
        const auto img = random_image(rng, w, h);
        ASSERT_EQ(resize(img, w, h, ResizeMode::bilinear), img);
        ASSERT_EQ(resize(img, w, h, ResizeMode::nearest), img);
        std::vector<std::uint8_t> bin(img.size());
        for (std::size_t i = 0; i < bin.size(); ++i) bin[i] = img.data()[i] > 127 ? 200 : 3;
        const auto r = resize(GrayImage(w, h, bin), 1 + static_cast<int>(rng.below(60)),
                              1 + static_cast<int>(rng.below(60)), ResizeMode::nearest);
        for (auto v : r.data()) ASSERT_TRUE(v == 200 || v == 3);
    }
}

TEST(Stitch, SplitThenStitchReconstructsProperty) {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const int w = 1 + static_cast<int>(rng.below(25));
        const int h = 1 + static_cast<int>(rng.below(25));
        const int cols = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(w)));
        const int rows = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(h)));
        const auto img = random_image(rng, w, h);
        ASSERT_EQ(stitch_tiles(split_tiles(img, cols, rows), cols, rows), img);
    }
}

TEST(Stitch, RejectsInconsistentTiles) {
    std::vector<GrayImage> row{GrayImage(2, 2), GrayImage(2, 3)};
    EXPECT_THROW(stitch_tiles(row, 2, 1), InvalidArgument);
    std::vector<GrayImage> col{GrayImage(2, 2), GrayImage(3, 2)};
    EXPECT_THROW(stitch_tiles(col, 1, 2), InvalidArgument);
    EXPECT_THROW(stitch_tiles(row, 3, 1), InvalidArgument);
    std::vector<GrayImage> single{GrayImage(3, 2, std::uint8_t{5})};
    EXPECT_EQ(stitch_tiles(single, 1, 1), single[0]);
}

TEST(Stitch, GridFileRelativePaths) {
    TempDir dir("grid");
    Rng rng(6);
    const auto img = random_image(rng, 6, 4);
    const auto tiles = split_tiles(img, 2, 2);
    for (int i = 0; i < 4; ++i) save_pgm(dir / ("tiles/t" + std::to_string(i) + ".pgm"), tiles[i]);
    std::ofstream(dir / "grid.json")
        << R"({"cols": 2, "rows": 2, "tile_paths": ["tiles/t0.pgm", "tiles/t1.pgm", "tiles/t2.pgm", "tiles/t3.pgm"]})";
    EXPECT_EQ(stitch_grid_file(dir / "grid.json"), img);
    std::ofstream(dir / "bad.json") << R"({"cols": 2, "rows": 2, "tile_paths": [], "extra": 1})";
    EXPECT_THROW(stitch_grid_file(dir / "bad.json"), Error);
}
