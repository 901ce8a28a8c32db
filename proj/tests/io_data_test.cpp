#include "nfaseg/data.hpp"
#include "nfaseg/image_io.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "test_util.hpp"

using namespace nfaseg;

namespace {

std::string temp_dir(const std::string& stem) {
    const auto dir = std::filesystem::path(::testing::TempDir()) / stem;
    std::filesystem::create_directories(dir);
    return dir.string();
}

std::string read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
}

GrayImage make_ramp(long h, long w, long maxval) {
    GrayImage img;
    img.h = h;
    img.w = w;
    img.maxval = maxval;
    img.pixels.resize(static_cast<size_t>(h) * w);
    for (size_t i = 0; i < img.pixels.size(); ++i)
        img.pixels[i] = static_cast<std::uint16_t>((i * 37) % (maxval + 1));
    return img;
}

}  // namespace

TEST(ImageIo, Pgm8BitRoundTrip) {
    const auto dir = temp_dir("io");
    const auto img = make_ramp(5, 7, 255);
    write_gray(dir + "/ramp.pgm", img);
    const auto back = read_gray(dir + "/ramp.pgm");
    EXPECT_EQ(back.h, 5);
    EXPECT_EQ(back.w, 7);
    EXPECT_EQ(back.maxval, 255L);
    EXPECT_EQ(back.pixels, img.pixels);
}

TEST(ImageIo, Pgm16BitIsBigEndian) {
    const auto dir = temp_dir("io");
    GrayImage img;
    img.h = 1;
    img.w = 2;
    img.maxval = 65535;
    img.pixels = {0x0102, 0xfffe};
    write_gray(dir + "/be.pgm", img);
    const auto bytes = read_bytes(dir + "/be.pgm");
    // header "P5\n2 1\n65535\n" then samples MSB-first
    const auto data = bytes.substr(bytes.size() - 4);
    EXPECT_EQ(static_cast<unsigned char>(data[0]), 0x01);
    EXPECT_EQ(static_cast<unsigned char>(data[1]), 0x02);
    EXPECT_EQ(static_cast<unsigned char>(data[2]), 0xff);
    EXPECT_EQ(static_cast<unsigned char>(data[3]), 0xfe);
    EXPECT_EQ(read_gray(dir + "/be.pgm").pixels, img.pixels);
}

TEST(ImageIo, Png8And16BitRoundTrip) {
    const auto dir = temp_dir("io");
    for (long maxval : {255L, 65535L}) {
        const auto img = make_ramp(9, 4, maxval);
        const auto path = dir + "/rt" + std::to_string(maxval) + ".png";
        write_gray(path, img);
        const auto back = read_gray(path);
        EXPECT_EQ(back.maxval, maxval);
        EXPECT_EQ(back.pixels, img.pixels);
    }
}

TEST(ImageIo, NormalizationAnchors) {
    const auto dir = temp_dir("io");
    GrayImage img;
    img.h = 1;
    img.w = 3;
    img.maxval = 255;
    img.pixels = {0, 128, 255};
    write_gray(dir + "/n8.pgm", img);
    auto t = load_image(dir + "/n8.pgm");
    EXPECT_DOUBLE_EQ(t->data[0], 0.0);
    EXPECT_DOUBLE_EQ(t->data[2], 1.0);  // 8-bit max maps to exactly 1

    img.maxval = 65535;
    img.pixels = {0, 32768, 65535};
    write_gray(dir + "/n16.png", img);
    t = load_image(dir + "/n16.png");
    EXPECT_NEAR(t->data[2], 1.0, 1e-4);
    EXPECT_DOUBLE_EQ(t->data[2], 1.0);
}

TEST(ImageIo, NonBinaryMaskNamesFileAndValue) {
    const auto dir = temp_dir("io");
    GrayImage img;
    img.h = 1;
    img.w = 3;
    img.maxval = 255;
    img.pixels = {0, 3, 255};
    write_gray(dir + "/bad_mask.pgm", img);
    try {
        (void)load_mask(dir + "/bad_mask.pgm");
        FAIL() << "expected format error";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::Format);
        const std::string what = e.what();
        EXPECT_NE(what.find("bad_mask.pgm"), std::string::npos) << what;
        EXPECT_NE(what.find("value 3"), std::string::npos) << what;
    }
}

TEST(ImageIo, MaskRoundTripIsExact) {
    const auto dir = temp_dir("io");
    auto mask = Tensor::create(Shape{1, 1, 6, 6}, 0.0, false);
    for (size_t i = 0; i < mask->data.size(); i += 3) mask->data[i] = 1.0;
    save_mask(dir + "/m.png", mask);
    auto back = load_mask(dir + "/m.png");
    EXPECT_EQ(back->data, mask->data);
}

TEST(ImageIo, ScoreQuantization) {
    const auto dir = temp_dir("io");
    auto scores = Tensor::create(Shape{1, 1, 1, 4}, 0.0, false);
    scores->data = {0.0, 0.5, 0.9999, 1.0};
    save_scores(dir + "/s.png", scores);
    const auto img = read_gray(dir + "/s.png");
    EXPECT_EQ(img.maxval, 65535L);
    EXPECT_EQ(img.pixels[0], 0);
    EXPECT_EQ(img.pixels[1], 32768);  // lround(0.5 * 65535)
    EXPECT_EQ(img.pixels[3], 65535);
}

TEST(ImageIo, UnrecognizedFormatRejected) {
    const auto dir = temp_dir("io");
    std::ofstream(dir + "/junk.pgm") << "hello world";
    test_util::expect_error([&] { (void)read_gray(dir + "/junk.pgm"); },
                            ErrorCode::Format);
    test_util::expect_error([&] { (void)read_gray(dir + "/absent.png"); },
                            ErrorCode::Io);
}

TEST(ImageIo, TruncatedPgmPixelDataRejected) {
    const auto dir = temp_dir("io");
    const auto img = make_ramp(4, 4, 255);
    write_gray(dir + "/t.pgm", img);
    auto bytes = read_bytes(dir + "/t.pgm");
    std::ofstream out(dir + "/t.pgm", std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 3));
    out.close();
    test_util::expect_error([&] { (void)read_gray(dir + "/t.pgm"); },
                            ErrorCode::Format);
}

TEST(Synthetic, SampleGenerationIsDeterministicInSeedAndIndex) {
    SyntheticConfig cfg;
    cfg.size = 32;
    cfg.divisor = 4;
    auto a = generate_sample(cfg, 3);
    auto b = generate_sample(cfg, 3);
    auto c = generate_sample(cfg, 4);
    EXPECT_EQ(a.image->data, b.image->data);
    EXPECT_EQ(a.mask->data, b.mask->data);
    EXPECT_NE(a.image->data, c.image->data);
}

TEST(Synthetic, ZeroAmplitudeTargetLeavesEmptyMask) {
    SyntheticConfig cfg;
    cfg.size = 32;
    cfg.amplitude_min = 0.0;
    cfg.amplitude_max = 0.0;
    cfg.targets_min = cfg.targets_max = 1;
    for (long i = 0; i < 5; ++i) {
        auto s = generate_sample(cfg, i);
        for (double v : s.mask->data) EXPECT_EQ(v, 0.0);
    }
}

TEST(Synthetic, TargetMaskAreasWithinOneToTwentyFivePixels) {
    SyntheticConfig cfg;
    cfg.size = 48;
    cfg.targets_min = cfg.targets_max = 1;  // isolate one blob per image
    cfg.sigma_min = 0.5;
    cfg.sigma_max = 1.5;
    for (long i = 0; i < 60; ++i) {
        auto s = generate_sample(cfg, i);
        long area = 0;
        for (double v : s.mask->data) area += v != 0.0 ? 1 : 0;
        EXPECT_GE(area, 1) << "sample " << i;
        EXPECT_LE(area, 25) << "sample " << i;
    }
}

TEST(Synthetic, DefaultTargetsKeepForegroundUnderHalfPercent) {
    SyntheticConfig cfg;  // defaults: 96x96, 1-2 targets
    long fg = 0, total = 0;
    for (long i = 0; i < 12; ++i) {
        auto s = generate_sample(cfg, i);
        for (double v : s.mask->data) fg += v != 0.0 ? 1 : 0;
        total += static_cast<long>(s.mask->data.size());
    }
    EXPECT_LT(static_cast<double>(fg) / static_cast<double>(total), 0.005);
    EXPECT_GT(fg, 0);
}

TEST(Synthetic, CracksProduceThinDarkStructures) {
    SyntheticConfig cfg;
    cfg.kind = SyntheticKind::Cracks;
    cfg.size = 48;
    for (long i = 0; i < 6; ++i) {
        auto s = generate_sample(cfg, i);
        long fg = 0;
        double masked_sum = 0.0, unmasked_sum = 0.0;
        long unmasked = 0;
        for (size_t p = 0; p < s.mask->data.size(); ++p) {
            if (s.mask->data[p] != 0.0) {
                ++fg;
                masked_sum += s.image->data[p];
            } else {
                ++unmasked;
                unmasked_sum += s.image->data[p];
            }
        }
        ASSERT_GT(fg, 0);
        EXPECT_LT(static_cast<double>(fg) / s.mask->data.size(), 0.2);
        // cracks are rendered darker than the surrounding texture
        EXPECT_LT(masked_sum / fg, unmasked_sum / unmasked - 0.05) << "sample " << i;
        for (double v : s.image->data) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
    }
}

TEST(Synthetic, ConfigValidation) {
    SyntheticConfig cfg;
    cfg.size = 30;  // not divisible by 4
    test_util::expect_error([&] { cfg.validate(); }, ErrorCode::Parameter);
    cfg = SyntheticConfig{};
    cfg.sigma_min = 2.0;
    cfg.sigma_max = 1.0;
    test_util::expect_error([&] { cfg.validate(); }, ErrorCode::Parameter);
}

TEST(Dataset, GenerateWritesSplitManifestAndRoundTripsMasks) {
    SyntheticConfig cfg;
    cfg.size = 32;
    cfg.count = 10;
    cfg.seed = 5;
    const auto dir = temp_dir("ds_roundtrip");
    const auto manifest = generate_dataset(cfg, dir);
    ASSERT_EQ(manifest.entries.size(), 10u);
    EXPECT_EQ(manifest.with_split(Split::Train).size(), 6u);
    EXPECT_EQ(manifest.with_split(Split::Val).size(), 2u);
    EXPECT_EQ(manifest.with_split(Split::Test).size(), 2u);

    const auto loaded = load_manifest(dir + "/manifest.json");
    ASSERT_EQ(loaded.entries.size(), 10u);
    for (long i = 0; i < 10; ++i) {
        EXPECT_EQ(loaded.entries[i].split, manifest.entries[i].split);
        const auto pair = load_pair(loaded.entries[i]);
        const auto expected = generate_sample(cfg, i);
        EXPECT_EQ(pair.mask->data, expected.mask->data) << "entry " << i;
        // images are 16-bit quantized on disk
        for (size_t p = 0; p < pair.image->data.size(); ++p)
            EXPECT_NEAR(pair.image->data[p], expected.image->data[p], 1.0 / 65535.0);
    }
}

TEST(Dataset, SameSeedYieldsByteIdenticalFiles) {
    SyntheticConfig cfg;
    cfg.size = 32;
    cfg.count = 4;
    cfg.seed = 11;
    const auto dir1 = temp_dir("ds_a");
    const auto dir2 = temp_dir("ds_b");
    generate_dataset(cfg, dir1);
    generate_dataset(cfg, dir2);
    for (const char* rel :
         {"manifest.json", "images/img_0000.png", "images/img_0003.png",
          "masks/mask_0001.png"})
        EXPECT_EQ(read_bytes(dir1 + "/" + rel), read_bytes(dir2 + "/" + rel)) << rel;
}

TEST(Dataset, ManifestErrors) {
    const auto dir = temp_dir("ds_err");
    std::ofstream(dir + "/broken.json") << "{ not json";
    test_util::expect_error([&] { (void)load_manifest(dir + "/broken.json"); },
                            ErrorCode::Format);

    std::ofstream(dir + "/missing.json")
        << R"({"entries":[{"image":"nope.png","mask":"nope.png","split":"train"}]})";
    test_util::expect_error([&] { (void)load_manifest(dir + "/missing.json"); },
                            ErrorCode::Io);

    std::ofstream(dir + "/badsplit.json") << R"({"entries":[]})";
    EXPECT_TRUE(load_manifest(dir + "/badsplit.json").entries.empty());
}

TEST(Dataset, DimMismatchNamesEntry) {
    const auto dir = temp_dir("ds_dim");
    auto small = Tensor::create(Shape{1, 1, 2, 2}, 0.0, false);
    save_mask(dir + "/m.png", small);
    const auto img = make_ramp(4, 4, 255);
    write_gray(dir + "/i.png", img);
    ManifestEntry entry{dir + "/i.png", dir + "/m.png", Split::Train};
    try {
        (void)load_pair(entry);
        FAIL() << "expected format error";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::Format);
        EXPECT_NE(std::string(e.what()).find("i.png"), std::string::npos);
    }
}
