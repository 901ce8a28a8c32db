#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nfaseg/error.hpp"
#include "nfaseg/image_io.hpp"
#include "nfaseg/rng.hpp"
#include "nfaseg/tensor.hpp"

namespace nfaseg {

enum class Split { Train, Val, Test };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        default: return "test";
    }
}

inline Split split_from_string(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw_format("manifest split must be train, val, or test; got '" + s + "'");
}

struct ManifestEntry {
    std::string image;  // resolved absolute or manifest-relative path
    std::string mask;
    Split split = Split::Train;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;

    std::vector<ManifestEntry> with_split(Split s) const {
        std::vector<ManifestEntry> out;
        for (const auto& e : entries)
            if (e.split == s) out.push_back(e);
        return out;
    }
};

enum class SyntheticKind { Targets, Cracks };

/// Generator settings. Defaults keep the foreground under 0.5% of pixels:
/// at sigma 1.5 a blob's mask core is at most 21 pixels, and two of them in
/// a 96x96 image are 42/9216 = 0.46%.
struct SyntheticConfig {
    SyntheticKind kind = SyntheticKind::Targets;
    long size = 96;   // square images, must be divisible by `divisor`
    long count = 30;  // images to generate
    long divisor = 4; // spatial divisibility the intended network needs

    long targets_min = 1, targets_max = 2;
    double amplitude_min = 0.25, amplitude_max = 0.9;
    double sigma_min = 0.5, sigma_max = 1.5;  // PSF sigma in pixels

    double background_scale = 3.0;     // correlation length of the noise, px
    double background_noise = 0.08;    // background noise std after filtering
    double gradient_amplitude = 0.08;  // smooth intensity ramp peak-to-peak
    double clutter_amplitude = 0.0;    // broad blobs added to the background

    long crack_count_min = 1, crack_count_max = 2;
    long crack_width_min = 1, crack_width_max = 3;  // px
    double crack_contrast_min = 0.15, crack_contrast_max = 0.4;

    unsigned long long seed = 0;

    void validate() const {
        if (size < 8) throw_parameter("synthetic config: size must be >= 8");
        if (divisor < 1) throw_parameter("synthetic config: divisor must be >= 1");
        if (size % divisor != 0)
            throw_parameter("synthetic config: size " + std::to_string(size) +
                            " must be divisible by " + std::to_string(divisor));
        if (count < 1) throw_parameter("synthetic config: count must be >= 1");
        auto range = [](auto lo, auto hi, const char* what) {
            if (lo > hi)
                throw_parameter(std::string("synthetic config: empty ") + what +
                                " range");
        };
        range(targets_min, targets_max, "target count");
        range(amplitude_min, amplitude_max, "amplitude");
        range(sigma_min, sigma_max, "sigma");
        range(crack_count_min, crack_count_max, "crack count");
        range(crack_width_min, crack_width_max, "crack width");
        range(crack_contrast_min, crack_contrast_max, "crack contrast");
        if (targets_min < 0 || crack_count_min < 0)
            throw_parameter("synthetic config: counts must be >= 0");
        if (sigma_min <= 0.0) throw_parameter("synthetic config: sigma must be > 0");
        if (crack_width_min < 1)
            throw_parameter("synthetic config: crack width must be >= 1");
        if (background_scale <= 0.0)
            throw_parameter("synthetic config: background scale must be > 0");
    }
};

/// One generated sample held in memory before/after disk round-trips.
struct Sample {
    TensorPtr image;  // (1,1,h,w) in [0,1]
    TensorPtr mask;   // (1,1,h,w) in {0,1}
};

namespace detail {

/// Gaussian-filtered white noise, rescaled to the requested std about zero.
inline std::vector<double> correlated_noise(long size, double scale, double std_out,
                                            Rng& rng) {
    const size_t n = static_cast<size_t>(size) * size;
    std::vector<double> white(n);
    for (auto& v : white) v = rng.normal();
    const long radius = std::max(1L, static_cast<long>(std::ceil(3.0 * scale)));
    std::vector<double> kernel(2 * radius + 1);
    for (long i = -radius; i <= radius; ++i)
        kernel[i + radius] = std::exp(-0.5 * (i * i) / (scale * scale));

    auto blur_axis = [&](const std::vector<double>& src, bool horizontal) {
        std::vector<double> dst(n, 0.0);
        for (long y = 0; y < size; ++y)
            for (long x = 0; x < size; ++x) {
                double acc = 0.0, wsum = 0.0;
                for (long k = -radius; k <= radius; ++k) {
                    const long yy = horizontal ? y : y + k;
                    const long xx = horizontal ? x + k : x;
                    if (yy < 0 || yy >= size || xx < 0 || xx >= size) continue;
                    acc += kernel[k + radius] * src[yy * size + xx];
                    wsum += kernel[k + radius];
                }
                dst[y * size + x] = acc / wsum;
            }
        return dst;
    };
    auto blurred = blur_axis(blur_axis(white, true), false);

    double mean = 0.0;
    for (double v : blurred) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : blurred) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double gain = var > 0.0 ? std_out / std::sqrt(var) : 0.0;
    for (auto& v : blurred) v = (v - mean) * gain;
    return blurred;
}

inline Sample generate_targets(const SyntheticConfig& cfg, Rng& rng) {
    const long size = cfg.size;
    auto image = Tensor::create(Shape{1, 1, size, size}, 0.0, false);
    auto mask = Tensor::create(Shape{1, 1, size, size}, 0.0, false);

    auto bg = correlated_noise(size, cfg.background_scale, cfg.background_noise, rng);
    const double gx = rng.uniform() * 2.0 - 1.0;
    const double gy = rng.uniform() * 2.0 - 1.0;
    for (long y = 0; y < size; ++y)
        for (long x = 0; x < size; ++x) {
            double v = 0.4 + bg[y * size + x];
            v += cfg.gradient_amplitude * 0.5 *
                 (gx * (2.0 * x / (size - 1) - 1.0) + gy * (2.0 * y / (size - 1) - 1.0));
            image->data[y * size + x] = v;
        }
    if (cfg.clutter_amplitude > 0.0) {
        const long blobs = 2 + static_cast<long>(rng.below(3));
        for (long b = 0; b < blobs; ++b) {
            const double cx = rng.uniform() * (size - 1);
            const double cy = rng.uniform() * (size - 1);
            const double cs = size * (0.08 + 0.1 * rng.uniform());
            const double ca = cfg.clutter_amplitude * (2.0 * rng.uniform() - 1.0);
            for (long y = 0; y < size; ++y)
                for (long x = 0; x < size; ++x) {
                    const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                    image->data[y * size + x] += ca * std::exp(-0.5 * r2 / (cs * cs));
                }
        }
    }

    const long count =
        cfg.targets_min + static_cast<long>(rng.below(static_cast<unsigned long long>(
                              cfg.targets_max - cfg.targets_min + 1)));
    const double margin = 4.0;
    for (long t = 0; t < count; ++t) {
        const double cx = margin + rng.uniform() * (size - 1 - 2 * margin);
        const double cy = margin + rng.uniform() * (size - 1 - 2 * margin);
        const double amp =
            cfg.amplitude_min + rng.uniform() * (cfg.amplitude_max - cfg.amplitude_min);
        const double sigma =
            cfg.sigma_min + rng.uniform() * (cfg.sigma_max - cfg.sigma_min);
        const long reach = static_cast<long>(std::ceil(4.0 * sigma));
        for (long y = std::max(0L, static_cast<long>(cy) - reach);
             y <= std::min(size - 1, static_cast<long>(cy) + reach); ++y)
            for (long x = std::max(0L, static_cast<long>(cx) - reach);
                 x <= std::min(size - 1, static_cast<long>(cx) + reach); ++x) {
                const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                const double blob = amp * std::exp(-0.5 * r2 / (sigma * sigma));
                image->data[y * size + x] += blob;
                // mask core: strictly above 30% of this blob's peak
                if (blob > 0.3 * amp) mask->data[y * size + x] = 1.0;
            }
    }
    for (auto& v : image->data) v = std::min(1.0, std::max(0.0, v));
    return {image, mask};
}

inline Sample generate_cracks(const SyntheticConfig& cfg, Rng& rng) {
    const long size = cfg.size;
    auto image = Tensor::create(Shape{1, 1, size, size}, 0.0, false);
    auto mask = Tensor::create(Shape{1, 1, size, size}, 0.0, false);

    auto bg = correlated_noise(size, cfg.background_scale, cfg.background_noise, rng);
    for (size_t i = 0; i < image->data.size(); ++i) image->data[i] = 0.55 + bg[i];

    const long cracks =
        cfg.crack_count_min + static_cast<long>(rng.below(static_cast<unsigned long long>(
                                  cfg.crack_count_max - cfg.crack_count_min + 1)));
    for (long c = 0; c < cracks; ++c) {
        double x = rng.uniform() * (size - 1);
        double y = rng.uniform() * (size - 1);
        double angle = rng.uniform() * 2.0 * 3.14159265358979323846;
        const long width =
            cfg.crack_width_min + static_cast<long>(rng.below(static_cast<unsigned long long>(
                                      cfg.crack_width_max - cfg.crack_width_min + 1)));
        const double contrast =
            cfg.crack_contrast_min +
            rng.uniform() * (cfg.crack_contrast_max - cfg.crack_contrast_min);
        const long steps = size / 2 + static_cast<long>(rng.below(size / 2 + 1));
        const double r = width / 2.0;
        const long reach = static_cast<long>(std::ceil(r));
        for (long s = 0; s < steps; ++s) {
            for (long dy = -reach; dy <= reach; ++dy)
                for (long dx = -reach; dx <= reach; ++dx) {
                    const long xx = static_cast<long>(std::lround(x)) + dx;
                    const long yy = static_cast<long>(std::lround(y)) + dy;
                    if (xx < 0 || xx >= size || yy < 0 || yy >= size) continue;
                    if (dx * dx + dy * dy > r * r + 1e-12) continue;
                    const size_t idx = yy * size + xx;
                    if (mask->data[idx] == 0.0) {
                        mask->data[idx] = 1.0;
                        image->data[idx] -= contrast;
                    }
                }
            angle += 0.35 * (rng.uniform() * 2.0 - 1.0);  // random-walk heading
            x += std::cos(angle);
            y += std::sin(angle);
            if (x < 0 || x >= size || y < 0 || y >= size) break;
        }
    }
    for (auto& v : image->data) v = std::min(1.0, std::max(0.0, v));
    return {image, mask};
}

}  // namespace detail

/// One sample, deterministic in (seed, index).
inline Sample generate_sample(const SyntheticConfig& cfg, long index) {
    cfg.validate();
    Rng rng(derive_seed(cfg.seed, static_cast<unsigned long long>(index)));
    return cfg.kind == SyntheticKind::Targets ? detail::generate_targets(cfg, rng)
                                              : detail::generate_cracks(cfg, rng);
}

inline Split split_for_index(long index, long count) {
    const long n_train = static_cast<long>(std::lround(0.6 * count));
    const long n_val = static_cast<long>(std::lround(0.2 * count));
    if (index < n_train) return Split::Train;
    if (index < n_train + n_val) return Split::Val;
    return Split::Test;
}

/// Generates the dataset under out_dir (images/, masks/, manifest.json) with a
/// deterministic 60:20:20 split. Returns the manifest with resolved paths.
inline DatasetManifest generate_dataset(const SyntheticConfig& cfg,
                                        const std::string& out_dir) {
    cfg.validate();
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "images", ec);
    fs::create_directories(fs::path(out_dir) / "masks", ec);
    if (ec) throw_io("cannot create output directory: " + out_dir + ": " + ec.message());

    DatasetManifest manifest;
    nlohmann::json doc;
    doc["entries"] = nlohmann::json::array();
    char name[64];
    for (long i = 0; i < cfg.count; ++i) {
        const Sample s = generate_sample(cfg, i);
        std::snprintf(name, sizeof name, "images/img_%04ld.png", i);
        const std::string image_rel = name;
        std::snprintf(name, sizeof name, "masks/mask_%04ld.png", i);
        const std::string mask_rel = name;

        GrayImage img;
        img.h = cfg.size;
        img.w = cfg.size;
        img.maxval = 65535;
        img.pixels.resize(s.image->data.size());
        for (size_t p = 0; p < img.pixels.size(); ++p)
            img.pixels[p] =
                static_cast<std::uint16_t>(std::lround(s.image->data[p] * 65535.0));
        write_gray((fs::path(out_dir) / image_rel).string(), img);
        save_mask((fs::path(out_dir) / mask_rel).string(), s.mask);

        const Split split = split_for_index(i, cfg.count);
        manifest.entries.push_back(
            {(fs::path(out_dir) / image_rel).string(),
             (fs::path(out_dir) / mask_rel).string(), split});
        doc["entries"].push_back(
            {{"image", image_rel}, {"mask", mask_rel}, {"split", split_name(split)}});
    }
    std::ofstream out(fs::path(out_dir) / "manifest.json");
    if (!out) throw_io("cannot write manifest under " + out_dir);
    out << doc.dump(2) << "\n";
    if (!out) throw_io("failed writing manifest under " + out_dir);
    return manifest;
}

/// Parses a manifest JSON file; relative entry paths are resolved against the
/// manifest's directory and must exist.
inline DatasetManifest load_manifest(const std::string& path) {
    namespace fs = std::filesystem;
    std::ifstream in(path);
    if (!in) throw_io("cannot open manifest: " + path);
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw_format("manifest is not valid JSON: " + path + ": " + e.what());
    }
    if (!doc.is_object() || !doc.contains("entries") || !doc["entries"].is_array())
        throw_format("manifest must be an object with an \"entries\" array: " + path);

    const fs::path base = fs::path(path).parent_path();
    auto resolve = [&](const std::string& p) {
        fs::path fp(p);
        return (fp.is_absolute() ? fp : base / fp).string();
    };

    DatasetManifest manifest;
    for (const auto& e : doc["entries"]) {
        if (!e.is_object() || !e.contains("image") || !e.contains("mask") ||
            !e.contains("split"))
            throw_format("manifest entry needs image, mask, and split fields: " + path);
        ManifestEntry entry;
        entry.image = resolve(e["image"].get<std::string>());
        entry.mask = resolve(e["mask"].get<std::string>());
        entry.split = split_from_string(e["split"].get<std::string>());
        if (!fs::exists(entry.image))
            throw_io("manifest names a missing image: " + entry.image);
        if (!fs::exists(entry.mask))
            throw_io("manifest names a missing mask: " + entry.mask);
        manifest.entries.push_back(std::move(entry));
    }
    return manifest;
}

/// Loads and validates one image/mask pair: equal dims, binary mask.
inline Sample load_pair(const ManifestEntry& entry) {
    Sample s;
    s.image = load_image(entry.image);
    s.mask = load_mask(entry.mask);
    if (!(s.image->shape == s.mask->shape))
        throw_format("image and mask dims differ for entry " + entry.image + " (" +
                     s.image->shape.str() + ") vs " + entry.mask + " (" +
                     s.mask->shape.str() + ")");
    return s;
}

}  // namespace nfaseg
