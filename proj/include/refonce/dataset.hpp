#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "refonce/pnm.hpp"
#include "refonce/rng.hpp"
#include "refonce/tensor.hpp"

namespace refonce {

enum class Split { kTrain, kTest };
enum class Role { kQuery, kReference };

inline const char* split_name(Split s) { return s == Split::kTrain ? "train" : "test"; }
inline const char* role_name(Role r) { return r == Role::kQuery ? "query" : "reference"; }

struct SampleRecord {
    std::string id;
    Split split = Split::kTrain;
    std::size_t category = 0;
    Role role = Role::kQuery;
    std::string image;  // relative to the dataset root
    std::string mask;
};

// ---------------------------------------------------------------------------
// Shape families

namespace shapes {

using Pt = std::array<double, 2>;

inline bool in_polygon(const std::vector<Pt>& poly, double x, double y) {
    bool in = false;
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        const auto& a = poly[i];
        const auto& b = poly[j];
        if ((a[1] > y) != (b[1] > y) && x < (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0]) in = !in;
    }
    return in;
}

inline std::vector<Pt> regular(std::size_t n, double radius, double phase) {
    std::vector<Pt> p;
    for (std::size_t i = 0; i < n; ++i) {
        const double t = phase + 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n);
        p.push_back({radius * std::cos(t), radius * std::sin(t)});
    }
    return p;
}

inline std::vector<Pt> star(std::size_t points, double outer, double inner) {
    std::vector<Pt> p;
    for (std::size_t i = 0; i < 2 * points; ++i) {
        const double t = std::numbers::pi / 2 + std::numbers::pi * static_cast<double>(i) / static_cast<double>(points);
        const double r = i % 2 ? inner : outer;
        p.push_back({r * std::cos(t), r * std::sin(t)});
    }
    return p;
}

/// Membership test in local coordinates; every family fits the unit disc.
inline bool inside(std::size_t family, double u, double v) {
    static const auto tri = regular(3, 1.0, std::numbers::pi / 2);
    static const auto hex = regular(6, 1.0, 0.0);
    static const auto st = star(5, 1.0, 0.5);
    switch (family) {
        case 0: return u * u + (v / 0.6) * (v / 0.6) <= 1.0;                      // ellipse
        case 1: return in_polygon(tri, u, v);                                      // triangle
        case 2: { const double r2 = u * u + v * v; return r2 <= 1.0 && r2 >= 0.3; }  // ring
        case 3: return in_polygon(st, u, v);                                       // star
        case 4: return (std::abs(u) <= 0.3 && std::abs(v) <= 0.95) ||
                       (std::abs(v) <= 0.3 && std::abs(u) <= 0.95);               // cross
        case 5: return std::abs(u) <= 0.85 && std::abs(v) <= 0.5;                  // rectangle
        case 6: return u * u + v * v <= 1.0 && (u - 0.45) * (u - 0.45) + v * v > 0.64;  // crescent
        case 7: return in_polygon(hex, u, v);                                      // hexagon
        case 8: return std::abs(u) <= 0.95 && std::abs(v) <= 0.95 &&
                       std::abs(v) >= 0.8 * std::abs(u);                          // bowtie
        case 9: return std::abs(u) <= 0.9 && v >= -0.9 && v <= 0.9 &&
                       (u <= -0.3 || v >= 0.5);                                   // L
    }
    throw ValueError("unknown shape family " + std::to_string(family));
}

inline constexpr std::array<const char*, 10> kNames = {"ellipse", "triangle", "ring",    "star",   "cross",
                                                       "rectangle", "crescent", "hexagon", "bowtie", "ell"};

}  // namespace shapes

inline std::size_t shape_family_count() { return shapes::kNames.size(); }

// ---------------------------------------------------------------------------
// Generator

struct GenConfig {
    std::size_t categories = 8;
    std::size_t train_queries = 400;
    std::size_t test_queries = 100;
    std::size_t refs_per_category = 10;
    std::size_t size = 64;
    double contrast_lo = 0.05;
    double contrast_hi = 0.2;
    std::size_t holdout = 2;       // families excluded from training
    double texture_amplitude = 0.08;

    void validate() const {
        if (categories < 2) throw ValueError("need at least 2 categories, got " + std::to_string(categories));
        if (categories > shape_family_count()) {
            throw ValueError("only " + std::to_string(shape_family_count()) + " shape families are available, " +
                             std::to_string(categories) + " categories requested");
        }
        if (holdout >= categories) throw ValueError("holdout must leave at least one training category");
        if (size < 32 || size % 32 != 0) throw ValueError("image size must be a positive multiple of 32");
        if (!(contrast_lo > 0 && contrast_lo <= contrast_hi && contrast_hi < 0.5)) {
            throw ValueError("contrast range must satisfy 0 < lo <= hi < 0.5");
        }
        if (refs_per_category == 0) throw ValueError("refs_per_category must be at least 1");
    }

    std::size_t seen_categories() const { return categories - holdout; }
};

namespace detail {

struct Pose {
    double cx, cy, radius, theta;
};

inline std::vector<std::uint8_t> rasterize(std::size_t family, const Pose& p, std::size_t s) {
    std::vector<std::uint8_t> m(s * s, 0);
    const double c = std::cos(p.theta), sn = std::sin(p.theta);
    for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
            const double dx = (static_cast<double>(x) + 0.5 - p.cx) / p.radius;
            const double dy = (static_cast<double>(y) + 0.5 - p.cy) / p.radius;
            m[y * s + x] = shapes::inside(family, c * dx + sn * dy, -sn * dx + c * dy) ? 1 : 0;
        }
    }
    return m;
}

/// Shape mask with foreground fraction in [0.05, 0.5], fully inside the frame.
inline std::vector<std::uint8_t> place_shape(std::size_t family, std::size_t s, Rng& rng) {
    const double sd = static_cast<double>(s);
    for (int attempt = 0; attempt < 200; ++attempt) {
        Pose p;
        p.radius = rng.uniform(0.2 * sd, 0.4 * sd);
        p.cx = rng.uniform(p.radius, sd - p.radius);
        p.cy = rng.uniform(p.radius, sd - p.radius);
        p.theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
        auto m = rasterize(family, p, s);
        std::size_t fg = 0;
        for (auto b : m) fg += b;
        const double frac = static_cast<double>(fg) / (sd * sd);
        if (frac >= 0.05 && frac <= 0.5) return m;
    }
    throw Error("could not place shape family " + std::to_string(family) + " within the foreground-fraction bounds");
}

/// Two-octave value noise plus white noise, roughly zero mean and unit scale.
inline std::vector<double> texture_field(std::size_t s, Rng& rng) {
    std::vector<double> out(s * s, 0.0);
    auto octave = [&](std::size_t cell, double amp) {
        const std::size_t n = s / cell + 2;
        std::vector<double> lattice(n * n);
        for (auto& v : lattice) v = rng.uniform(-1.0, 1.0);
        for (std::size_t y = 0; y < s; ++y) {
            for (std::size_t x = 0; x < s; ++x) {
                const double fx = (static_cast<double>(x) + 0.5) / static_cast<double>(cell);
                const double fy = (static_cast<double>(y) + 0.5) / static_cast<double>(cell);
                const auto ix = static_cast<std::size_t>(fx), iy = static_cast<std::size_t>(fy);
                double tx = fx - static_cast<double>(ix), ty = fy - static_cast<double>(iy);
                tx = tx * tx * (3 - 2 * tx);
                ty = ty * ty * (3 - 2 * ty);
                const double a = lattice[iy * n + ix], b = lattice[iy * n + ix + 1];
                const double c = lattice[(iy + 1) * n + ix], d = lattice[(iy + 1) * n + ix + 1];
                out[y * s + x] += amp * ((a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty);
            }
        }
    };
    octave(8, 1.0);
    octave(4, 0.5);
    for (auto& v : out) v += rng.uniform(-0.25, 0.25);
    return out;
}

inline Image8 to_rgb(const std::vector<double>& planes, std::size_t s) {
    Image8 img;
    img.channels = 3;
    img.height = img.width = s;
    img.bytes.resize(3 * s * s);
    for (std::size_t p = 0; p < s * s; ++p)
        for (std::size_t c = 0; c < 3; ++c)
            img.bytes[p * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(planes[c * s * s + p], 0.0, 1.0) * 255.0));
    return img;
}

inline Image8 to_mask(const std::vector<std::uint8_t>& m, std::size_t s) {
    Image8 img;
    img.channels = 1;
    img.height = img.width = s;
    img.bytes.resize(s * s);
    for (std::size_t p = 0; p < s * s; ++p) img.bytes[p] = m[p] ? 255 : 0;
    return img;
}

}  // namespace detail

struct GeneratedSample {
    Image8 image, mask;
};

/// Color signature of category k: a unit chroma direction (orthogonal to
/// grey) scaled so its largest channel component is 1. Held-out categories
/// take hue slots between training categories.
inline std::array<double, 3> category_signature(const GenConfig& cfg, std::size_t k) {
    const std::size_t kk = cfg.categories, seen = cfg.seen_categories();
    std::vector<std::size_t> slot_of(kk);
    std::vector<bool> taken(kk, false);
    for (std::size_t j = 0; j < cfg.holdout; ++j) {
        const std::size_t slot = (j * kk) / cfg.holdout + 1;
        slot_of[seen + j] = slot % kk;
        taken[slot % kk] = true;
    }
    for (std::size_t c = 0, slot = 0; c < seen; ++c) {
        while (taken[slot]) ++slot;
        slot_of[c] = slot++;
    }
    const double theta = 2.0 * std::numbers::pi * static_cast<double>(slot_of.at(k)) / static_cast<double>(kk);
    const double a = std::cos(theta) / std::sqrt(2.0), b = std::sin(theta) / std::sqrt(6.0);
    std::array<double, 3> d{a + b, -a + b, -2.0 * b};
    const double top = std::max({std::abs(d[0]), std::abs(d[1]), std::abs(d[2])});
    for (auto& v : d) v /= top;
    return d;
}

/// Camouflaged query: foreground and background drawn from the same textured
/// process (a luminance field plus one chroma field per channel) on a grey
/// base. The foreground is shifted by `delta` along the category signature.
inline GeneratedSample generate_query(const GenConfig& cfg, std::size_t category, Rng& rng) {
    const std::size_t s = cfg.size, hw = s * s;
    const auto mask = detail::place_shape(category, s, rng);
    const double delta = rng.uniform(cfg.contrast_lo, cfg.contrast_hi);
    const double level = rng.uniform(0.3, 0.7);
    std::array<double, 3> base{};
    for (auto& b : base) b = level + rng.uniform(-0.02, 0.02);
    const auto sig = category_signature(cfg, category);
    auto layer = [&] {
        std::array<std::vector<double>, 4> f;
        for (auto& x : f) x = detail::texture_field(s, rng);
        return f;
    };
    const auto bg = layer();
    const auto fg = layer();
    const double amp = cfg.texture_amplitude;
    std::vector<double> planes(3 * hw);
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t p = 0; p < hw; ++p) {
            const auto& t = mask[p] ? fg : bg;
            const double tex = amp * (0.7 * t[0][p] + t[c + 1][p]);
            planes[c * hw + p] = base[c] + tex + (mask[p] ? delta * sig[c] : 0.0);
        }
    }
    return {detail::to_rgb(planes, s), detail::to_mask(mask, s)};
}

/// Salient reference: plain dark/bright grey background, the object at the
/// opposite level and strongly tinted with the category signature.
inline GeneratedSample generate_reference(const GenConfig& cfg, std::size_t category, Rng& rng) {
    const std::size_t s = cfg.size, hw = s * s;
    const auto mask = detail::place_shape(category, s, rng);
    double lo = rng.uniform(0.12, 0.18), hi = rng.uniform(0.82, 0.88);
    if (rng.uniform() < 0.5) std::swap(lo, hi);
    const auto sig = category_signature(cfg, category);
    const double tint = rng.uniform(0.08, 0.12);
    std::vector<double> planes(3 * hw);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t p = 0; p < hw; ++p)
            planes[c * hw + p] = (mask[p] ? hi + tint * sig[c] : lo) + rng.uniform(-0.01, 0.01);
    return {detail::to_rgb(planes, s), detail::to_mask(mask, s)};
}

/// |mean foreground intensity - mean background intensity|, intensity being
/// the channel average in [0, 1].
inline double intensity_gap(const Image8& image, const Image8& mask) {
    double fg = 0, bg = 0;
    std::size_t nf = 0, nb = 0;
    const std::size_t hw = mask.height * mask.width;
    for (std::size_t p = 0; p < hw; ++p) {
        double v = 0;
        for (std::size_t c = 0; c < image.channels; ++c) v += image.bytes[p * image.channels + c];
        v /= 255.0 * static_cast<double>(image.channels);
        if (mask.bytes[p] >= 128) {
            fg += v;
            ++nf;
        } else {
            bg += v;
            ++nb;
        }
    }
    if (nf == 0 || nb == 0) return 0.0;
    return std::abs(fg / static_cast<double>(nf) - bg / static_cast<double>(nb));
}

/// Writes manifest.tsv, images/*.ppm and masks/*.pgm under `out`. Category k
/// uses shape family k; the last `holdout` categories get no training
/// queries and their references are filed under the test split.
inline std::vector<SampleRecord> generate_synthetic_dataset(const GenConfig& cfg, std::uint64_t seed,
                                                            const std::string& out) {
    cfg.validate();
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out) / "images");
    fs::create_directories(fs::path(out) / "masks");

    std::vector<SampleRecord> records;
    std::uint64_t stream = 0;
    auto emit = [&](const std::string& id, Split split, std::size_t cat, Role role) {
        auto rng = Rng::derive(seed, ++stream);
        const auto s = role == Role::kQuery ? generate_query(cfg, cat, rng) : generate_reference(cfg, cat, rng);
        SampleRecord r{id, split, cat, role, "images/" + id + ".ppm", "masks/" + id + ".pgm"};
        write_pnm((fs::path(out) / r.image).string(), s.image);
        write_pnm((fs::path(out) / r.mask).string(), s.mask);
        records.push_back(std::move(r));
    };
    auto id = [](const char* prefix, std::size_t i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%s%04zu", prefix, i);
        return std::string(buf);
    };
    const std::size_t seen = cfg.seen_categories();
    for (std::size_t i = 0; i < cfg.train_queries; ++i) emit(id("train_", i), Split::kTrain, i % seen, Role::kQuery);
    for (std::size_t i = 0; i < cfg.test_queries; ++i)
        emit(id("test_", i), Split::kTest, i % cfg.categories, Role::kQuery);
    for (std::size_t k = 0; k < cfg.categories; ++k)
        for (std::size_t j = 0; j < cfg.refs_per_category; ++j)
            emit("ref_c" + std::to_string(k) + "_" + id("", j), k < seen ? Split::kTrain : Split::kTest, k, Role::kReference);

    std::ofstream f(fs::path(out) / "manifest.tsv", std::ios::trunc);
    if (!f) throw Error("cannot write manifest in '" + out + "'");
    f << "id\tsplit\tcategory\trole\timage\tmask\n";
    for (const auto& r : records)
        f << r.id << '\t' << split_name(r.split) << '\t' << r.category << '\t' << role_name(r.role) << '\t' << r.image
          << '\t' << r.mask << '\n';
    return records;
}

// ---------------------------------------------------------------------------
// Loading

struct Dataset {
    std::string root;
    std::vector<SampleRecord> records;
    std::vector<TensorT<float>> images;  // 3 x S x S in [0, 1]
    std::vector<TensorT<float>> masks;   // 1 x S x S in {0, 1}
    std::size_t size = 0;

    std::size_t categories() const {
        std::size_t k = 0;
        for (const auto& r : records) k = std::max(k, r.category + 1);
        return k;
    }

    std::vector<std::size_t> select(Split split, Role role) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < records.size(); ++i)
            if (records[i].split == split && records[i].role == role) out.push_back(i);
        return out;
    }

    std::vector<std::size_t> references(std::size_t category, Split split) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < records.size(); ++i)
            if (records[i].role == Role::kReference && records[i].category == category && records[i].split == split)
                out.push_back(i);
        return out;
    }

    /// Categories with at least one training query.
    std::set<std::size_t> seen_categories() const {
        std::set<std::size_t> s;
        for (const auto& r : records)
            if (r.split == Split::kTrain && r.role == Role::kQuery) s.insert(r.category);
        return s;
    }
};

/// Fraction of mask pixels allowed strictly between 32 and 223.
inline constexpr double kMaskTolerance = 0.01;

inline Dataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    const auto manifest = fs::path(dir) / "manifest.tsv";
    std::ifstream f(manifest);
    if (!f) throw Error("missing manifest '" + manifest.string() + "'");
    Dataset ds;
    ds.root = dir;
    std::string line;
    std::getline(f, line);
    if (line != "id\tsplit\tcategory\trole\timage\tmask") throw Error("manifest header malformed: '" + line + "'");
    std::size_t lineno = 1;
    std::set<std::string> ids;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string col;
        while (std::getline(ss, col, '\t')) cols.push_back(col);
        const std::string where = "manifest line " + std::to_string(lineno);
        if (cols.size() != 6) throw Error(where + ": expected 6 columns, got " + std::to_string(cols.size()));
        SampleRecord r;
        r.id = cols[0];
        if (!ids.insert(r.id).second) throw Error(where + ": duplicate id '" + r.id + "'");
        if (cols[1] == "train") r.split = Split::kTrain;
        else if (cols[1] == "test") r.split = Split::kTest;
        else throw Error(where + " (" + r.id + "): unknown split '" + cols[1] + "'");
        if (cols[2].empty() || cols[2].find_first_not_of("0123456789") != std::string::npos)
            throw Error(where + " (" + r.id + "): bad category '" + cols[2] + "'");
        r.category = std::stoul(cols[2]);
        if (cols[3] == "query") r.role = Role::kQuery;
        else if (cols[3] == "reference") r.role = Role::kReference;
        else throw Error(where + " (" + r.id + "): unknown role '" + cols[3] + "'");
        r.image = cols[4];
        r.mask = cols[5];
        for (const auto* rel : {&r.image, &r.mask}) {
            if (!fs::exists(fs::path(dir) / *rel)) throw Error("record '" + r.id + "': missing file '" + *rel + "'");
        }
        const auto img = read_pnm((fs::path(dir) / r.image).string());
        const auto msk = read_pnm((fs::path(dir) / r.mask).string());
        if (img.channels != 3) throw Error("record '" + r.id + "': image must be P6");
        if (msk.channels != 1) throw Error("record '" + r.id + "': mask must be P5");
        if (img.height != msk.height || img.width != msk.width) throw Error("record '" + r.id + "': mask size differs from image");
        if (img.height != img.width) throw Error("record '" + r.id + "': image must be square");
        if (ds.size == 0) ds.size = img.height;
        if (img.height != ds.size) throw Error("record '" + r.id + "': image size differs from the rest of the dataset");
        std::size_t soft = 0;
        std::vector<float> m(msk.bytes.size());
        for (std::size_t p = 0; p < m.size(); ++p) {
            const auto b = msk.bytes[p];
            soft += b > 32 && b < 223;
            m[p] = b >= 128 ? 1.0f : 0.0f;
        }
        if (static_cast<double>(soft) > kMaskTolerance * static_cast<double>(m.size()))
            throw Error("record '" + r.id + "': mask is not binary (" + std::to_string(soft) + " intermediate pixels)");
        ds.images.push_back(image_to_tensor<float>(img));
        ds.masks.push_back(TensorT<float>::from({1, msk.height, msk.width}, std::move(m)));
        ds.records.push_back(std::move(r));
    }
    if (ds.records.empty()) throw Error("manifest '" + manifest.string() + "' lists no records");
    for (auto k : ds.seen_categories()) {
        if (ds.references(k, Split::kTrain).empty())
            throw Error("category " + std::to_string(k) + " has training queries but no training references");
    }
    return ds;
}

}  // namespace refonce
