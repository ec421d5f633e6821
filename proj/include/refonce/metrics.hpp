#pragma once

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "refonce/tensor.hpp"

namespace refonce::metrics {

/// Row-major H x W map of doubles. Predictions live in [0, 1]; ground truth
/// is binary (anything above 0.5 counts as foreground).
struct Map {
    std::size_t h = 0, w = 0;
    std::vector<double> v;

    Map() = default;
    Map(std::size_t rows, std::size_t cols, double fill = 0.0) : h(rows), w(cols), v(rows * cols, fill) {}
    Map(std::size_t rows, std::size_t cols, std::vector<double> values) : h(rows), w(cols), v(std::move(values)) {
        if (v.size() != h * w) throw ShapeError("metric map: value count does not match " + std::to_string(h) + "x" + std::to_string(w));
    }

    double& at(std::size_t y, std::size_t x) { return v[y * w + x]; }
    double at(std::size_t y, std::size_t x) const { return v[y * w + x]; }
    std::size_t size() const { return v.size(); }
};

template <typename T>
Map to_map(const TensorT<T>& t) {
    if (t.numel() == 0 || t.rank() < 2) throw ShapeError("to_map: expected an H x W or 1 x H x W tensor");
    const std::size_t h = t.dim(t.rank() - 2), w = t.dim(t.rank() - 1);
    if (h * w != t.numel()) throw ShapeError("to_map: tensor " + shape_str(t.shape()) + " has more than one channel");
    return Map(h, w, std::vector<double>(t.data().begin(), t.data().end()));
}

// Machine epsilon of double, added to denominators that can vanish.
inline constexpr double kEps = std::numeric_limits<double>::epsilon();

namespace detail {

inline void check_pair(const Map& pred, const Map& gt, const char* metric) {
    if (pred.h != gt.h || pred.w != gt.w || pred.size() == 0) {
        throw ShapeError(std::string(metric) + ": prediction " + std::to_string(pred.h) + "x" + std::to_string(pred.w) +
                         " vs ground truth " + std::to_string(gt.h) + "x" + std::to_string(gt.w));
    }
}

inline std::vector<unsigned char> binarize(const Map& gt) {
    std::vector<unsigned char> b(gt.size());
    for (std::size_t i = 0; i < gt.size(); ++i) b[i] = gt.v[i] > 0.5;
    return b;
}

// Object-level similarity of the values selected by `sel`: 2x / (x^2 + 1 + sigma),
// sigma the sample standard deviation.
inline double object_similarity(const Map& pred, const std::vector<unsigned char>& sel, bool invert) {
    double sum = 0, sumsq = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!sel[i]) continue;
        const double x = invert ? 1.0 - pred.v[i] : pred.v[i];
        sum += x;
        sumsq += x * x;
        ++n;
    }
    if (n == 0) return 0.0;
    const double mean = sum / static_cast<double>(n);
    double var = 0;
    if (n > 1) var = std::max(0.0, (sumsq - static_cast<double>(n) * mean * mean) / static_cast<double>(n - 1));
    return 2.0 * mean / (mean * mean + 1.0 + std::sqrt(var) + kEps);
}

// Structural similarity of one block [y0,y1) x [x0,x1).
inline double block_ssim(const Map& pred, const std::vector<unsigned char>& gt, std::size_t y0, std::size_t y1,
                         std::size_t x0, std::size_t x1) {
    const std::size_t n = (y1 - y0) * (x1 - x0);
    if (n == 0) return 0.0;
    double mp = 0, mg = 0;
    for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x) {
            mp += pred.at(y, x);
            mg += gt[y * pred.w + x];
        }
    mp /= static_cast<double>(n);
    mg /= static_cast<double>(n);
    double sp = 0, sg = 0, spg = 0;
    for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x) {
            const double dp = pred.at(y, x) - mp, dg = gt[y * pred.w + x] - mg;
            sp += dp * dp;
            sg += dg * dg;
            spg += dp * dg;
        }
    const double den = n > 1 ? static_cast<double>(n - 1) : 1.0;
    sp /= den;
    sg /= den;
    spg /= den;
    const double alpha = 4.0 * mp * mg * spg;
    const double beta = (mp * mp + mg * mg) * (sp + sg);
    if (alpha != 0.0) return alpha / (beta + kEps);
    return beta == 0.0 ? 1.0 : 0.0;
}

}  // namespace detail

inline double mae(const Map& pred, const Map& gt) {
    detail::check_pair(pred, gt, "mae");
    double acc = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) acc += std::abs(pred.v[i] - (gt.v[i] > 0.5 ? 1.0 : 0.0));
    return acc / static_cast<double>(pred.size());
}

/// Structure measure: 0.5 object-aware + 0.5 region-aware similarity, clamped
/// at zero. All-background ground truth gives 1 - mean(pred); all-foreground
/// gives mean(pred). The region split is at the foreground centroid rounded
/// half-to-even, plus one.
inline double s_measure(const Map& pred, const Map& gt) {
    detail::check_pair(pred, gt, "s_measure");
    const auto g = detail::binarize(gt);
    const std::size_t n = pred.size();
    std::size_t fg = 0;
    double pred_sum = 0, row_sum = 0, col_sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
        pred_sum += pred.v[i];
        if (g[i]) {
            ++fg;
            row_sum += static_cast<double>(i / pred.w);
            col_sum += static_cast<double>(i % pred.w);
        }
    }
    if (fg == 0) return 1.0 - pred_sum / static_cast<double>(n);
    if (fg == n) return pred_sum / static_cast<double>(n);

    const double u = static_cast<double>(fg) / static_cast<double>(n);
    std::vector<unsigned char> bg(n);
    for (std::size_t i = 0; i < n; ++i) bg[i] = !g[i];
    const double object = u * detail::object_similarity(pred, g, false) +
                          (1.0 - u) * detail::object_similarity(pred, bg, true);

    const int saved = std::fegetround();
    std::fesetround(FE_TONEAREST);
    const auto cy = static_cast<std::size_t>(std::nearbyint(row_sum / static_cast<double>(fg))) + 1;
    const auto cx = static_cast<std::size_t>(std::nearbyint(col_sum / static_cast<double>(fg))) + 1;
    std::fesetround(saved);

    const double area = static_cast<double>(n);
    const double w1 = static_cast<double>(cx * cy) / area;
    const double w2 = static_cast<double>(cy * (pred.w - cx)) / area;
    const double w3 = static_cast<double>((pred.h - cy) * cx) / area;
    const double w4 = 1.0 - w1 - w2 - w3;
    const double region = w1 * detail::block_ssim(pred, g, 0, cy, 0, cx) +
                          w2 * detail::block_ssim(pred, g, 0, cy, cx, pred.w) +
                          w3 * detail::block_ssim(pred, g, cy, pred.h, 0, cx) +
                          w4 * detail::block_ssim(pred, g, cy, pred.h, cx, pred.w);
    return std::max(0.0, 0.5 * object + 0.5 * region);
}

/// Enhanced-alignment measure of the prediction binarized at
/// min(2 mean(pred), 1) (pixels >= threshold are foreground). The alignment
/// sum is normalized by the pixel count so a perfect match scores exactly 1.
inline double adaptive_e_measure(const Map& pred, const Map& gt) {
    detail::check_pair(pred, gt, "adaptive_e_measure");
    const auto g = detail::binarize(gt);
    const std::size_t n = pred.size();
    double psum = 0;
    for (double p : pred.v) psum += p;
    const double threshold = std::min(2.0 * psum / static_cast<double>(n), 1.0);

    std::size_t tp = 0, fp = 0, gt_fg = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const bool p = pred.v[i] >= threshold;
        gt_fg += g[i];
        tp += p && g[i];
        fp += p && !g[i];
    }
    const std::size_t pred_fg = tp + fp;
    const std::size_t pred_bg = n - pred_fg;
    double enhanced_sum;
    if (gt_fg == 0) {
        enhanced_sum = static_cast<double>(pred_bg);
    } else if (gt_fg == n) {
        enhanced_sum = static_cast<double>(pred_fg);
    } else {
        const std::size_t fn = gt_fg - tp;
        const std::size_t tn = pred_bg - fn;
        const double mp = static_cast<double>(pred_fg) / static_cast<double>(n);
        const double mg = static_cast<double>(gt_fg) / static_cast<double>(n);
        const std::tuple<std::size_t, double, double> parts[4] = {
            {tp, 1.0 - mp, 1.0 - mg}, {fp, 1.0 - mp, -mg}, {fn, -mp, 1.0 - mg}, {tn, -mp, -mg}};
        enhanced_sum = 0;
        for (const auto& [count, a, b] : parts) {
            const double align = 2.0 * a * b / (a * a + b * b + kEps);
            enhanced_sum += (align + 1.0) * (align + 1.0) / 4.0 * static_cast<double>(count);
        }
    }
    return enhanced_sum / static_cast<double>(n);
}

/// Normalized 7x7 Gaussian (sigma 5) used for error dependency.
inline std::vector<double> gaussian_kernel_7x7() {
    std::vector<double> k(49);
    double total = 0;
    for (int y = -3; y <= 3; ++y)
        for (int x = -3; x <= 3; ++x) {
            const double v = std::exp(-(x * x + y * y) / (2.0 * 25.0));
            k[static_cast<std::size_t>((y + 3) * 7 + x + 3)] = v;
            total += v;
        }
    for (auto& v : k) v /= total;
    return k;
}

/// For every pixel: Euclidean distance to, and index of, the nearest
/// foreground pixel. Ties go to the lowest row-major index.
inline void nearest_foreground(const std::vector<unsigned char>& g, std::size_t h, std::size_t w,
                               std::vector<double>& dist, std::vector<std::size_t>& index) {
    struct Offset {
        long d2, dy, dx;
    };
    std::vector<Offset> offsets;
    const long hh = static_cast<long>(h), ww = static_cast<long>(w);
    offsets.reserve(static_cast<std::size_t>((2 * hh - 1) * (2 * ww - 1)));
    for (long dy = -(hh - 1); dy <= hh - 1; ++dy)
        for (long dx = -(ww - 1); dx <= ww - 1; ++dx) offsets.push_back({dy * dy + dx * dx, dy, dx});
    std::sort(offsets.begin(), offsets.end(), [](const Offset& a, const Offset& b) {
        return std::tie(a.d2, a.dy, a.dx) < std::tie(b.d2, b.dy, b.dx);
    });
    dist.assign(h * w, 0.0);
    index.assign(h * w, 0);
    for (long y = 0; y < hh; ++y)
        for (long x = 0; x < ww; ++x) {
            const auto p = static_cast<std::size_t>(y * ww + x);
            for (const auto& o : offsets) {
                const long ty = y + o.dy, tx = x + o.dx;
                if (ty < 0 || ty >= hh || tx < 0 || tx >= ww) continue;
                const auto t = static_cast<std::size_t>(ty * ww + tx);
                if (g[t]) {
                    dist[p] = std::sqrt(static_cast<double>(o.d2));
                    index[p] = t;
                    break;
                }
            }
        }
}

/// Weighted F-measure (beta^2 = 1). Errors at background pixels take the
/// error of their nearest foreground pixel before a zero-padded 7x7 Gaussian
/// (sigma 5); foreground errors are the smaller of raw and smoothed error;
/// background errors are weighted by 2 - exp(ln(0.5) / 5 * distance).
/// All-background ground truth scores 1 for an all-zero prediction, else 0.
inline double weighted_f_measure(const Map& pred, const Map& gt) {
    detail::check_pair(pred, gt, "weighted_f_measure");
    const auto g = detail::binarize(gt);
    const std::size_t h = pred.h, w = pred.w, n = pred.size();
    std::size_t fg = 0;
    for (auto b : g) fg += b;
    if (fg == 0) {
        for (double p : pred.v)
            if (p != 0.0) return 0.0;
        return 1.0;
    }

    std::vector<double> dist;
    std::vector<std::size_t> nearest;
    nearest_foreground(g, h, w, dist, nearest);

    std::vector<double> err(n), err_t(n);
    for (std::size_t i = 0; i < n; ++i) err[i] = std::abs(pred.v[i] - static_cast<double>(g[i]));
    for (std::size_t i = 0; i < n; ++i) err_t[i] = g[i] ? err[i] : err[nearest[i]];

    const auto kernel = gaussian_kernel_7x7();
    std::vector<double> smoothed(n, 0.0);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double acc = 0;
            for (int ky = -3; ky <= 3; ++ky) {
                const long sy = static_cast<long>(y) + ky;
                if (sy < 0 || sy >= static_cast<long>(h)) continue;
                for (int kx = -3; kx <= 3; ++kx) {
                    const long sx = static_cast<long>(x) + kx;
                    if (sx < 0 || sx >= static_cast<long>(w)) continue;
                    acc += kernel[static_cast<std::size_t>((ky + 3) * 7 + kx + 3)] *
                           err_t[static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)];
                }
            }
            smoothed[y * w + x] = acc;
        }

    double fg_err = 0, bg_err = 0;
    const double decay = std::log(0.5) / 5.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (g[i]) {
            fg_err += (smoothed[i] < err[i]) ? smoothed[i] : err[i];
        } else {
            bg_err += err[i] * (2.0 - std::exp(decay * dist[i]));
        }
    }
    const double tp = static_cast<double>(fg) - fg_err;
    const double recall = 1.0 - fg_err / static_cast<double>(fg);
    const double precision = tp / (tp + bg_err + kEps);
    return 2.0 * recall * precision / (recall + precision + kEps);
}

struct MetricValues {
    double s_measure = 0;
    double adaptive_e = 0;
    double weighted_f = 0;
    double mae = 0;
};

/// Reference points. pred == gt gives (1, 1, 1, 0). The exact complement of
/// an 8x8 ground truth whose left half is foreground gives S = 0.0404411765,
/// alpha-E = 0, wF = 0.2783058648, MAE = 1; wF is nonzero there only because
/// the zero-padded Gaussian softens errors along the border. A constant 0.5
/// prediction gives MAE = 0.5.
inline MetricValues evaluate(const Map& pred, const Map& gt) {
    return {s_measure(pred, gt), adaptive_e_measure(pred, gt), weighted_f_measure(pred, gt), mae(pred, gt)};
}

}  // namespace refonce::metrics
