#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "refonce/metrics.hpp"
#include "refonce/pnm.hpp"

namespace refonce {

struct SampleMetrics {
    std::string stem;
    metrics::MetricValues values;
};

struct MetricReport {
    double s_measure = 0, adaptive_e = 0, weighted_f = 0, mae = 0;
    std::size_t n = 0;
    std::vector<SampleMetrics> rows;
};

/// Arithmetic means of the rows, accumulated in row order.
inline MetricReport summarize(std::vector<SampleMetrics> rows) {
    MetricReport r;
    r.n = rows.size();
    for (const auto& s : rows) {
        r.s_measure += s.values.s_measure;
        r.adaptive_e += s.values.adaptive_e;
        r.weighted_f += s.values.weighted_f;
        r.mae += s.values.mae;
    }
    if (r.n) {
        const double n = static_cast<double>(r.n);
        r.s_measure /= n;
        r.adaptive_e /= n;
        r.weighted_f /= n;
        r.mae /= n;
    }
    r.rows = std::move(rows);
    return r;
}

inline std::string format_metric_row(const std::string& label, double s, double e, double f, double m) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "\t%.12f\t%.12f\t%.12f\t%.12f\n", s, e, f, m);
    return label + buf;
}

/// Header, one row per sample, then the MEAN row.
inline std::string report_tsv(const MetricReport& r) {
    std::string out = "stem\ts_m\talpha_e\tw_f\tmae\n";
    for (const auto& s : r.rows)
        out += format_metric_row(s.stem, s.values.s_measure, s.values.adaptive_e, s.values.weighted_f, s.values.mae);
    out += format_metric_row("MEAN", r.s_measure, r.adaptive_e, r.weighted_f, r.mae);
    return out;
}

inline metrics::Map read_map(const std::string& path) {
    const auto img = read_pnm(path);
    if (img.channels != 1) throw Error("'" + path + "' is not a single-channel P5 map");
    std::vector<double> v(img.bytes.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = img.bytes[i] / 255.0;
    return metrics::Map(img.height, img.width, std::move(v));
}

/// Pairs <pred_dir>/<stem>.pgm with <gt_dir>/<stem>.pgm. Without an explicit
/// stem list every prediction in pred_dir is scored. Rows are sorted by stem,
/// so directory listing order never matters.
inline MetricReport evaluate_dataset(const std::string& pred_dir, const std::string& gt_dir,
                                     std::optional<std::vector<std::string>> stems = std::nullopt) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(pred_dir)) throw Error("prediction directory '" + pred_dir + "' does not exist");
    std::vector<std::string> list;
    if (stems) {
        list = *stems;
    } else {
        for (const auto& e : fs::directory_iterator(pred_dir))
            if (e.path().extension() == ".pgm") list.push_back(e.path().stem().string());
    }
    std::sort(list.begin(), list.end());
    std::vector<std::string> missing;
    for (const auto& s : list) {
        if (!fs::exists(fs::path(pred_dir) / (s + ".pgm"))) missing.push_back(s + " (prediction)");
        if (!fs::exists(fs::path(gt_dir) / (s + ".pgm"))) missing.push_back(s + " (ground truth)");
    }
    if (!missing.empty()) {
        std::string msg = "unpaired samples:";
        for (const auto& m : missing) msg += " " + m;
        throw Error(msg);
    }
    if (list.empty()) throw Error("no predictions found in '" + pred_dir + "'");
    std::vector<SampleMetrics> rows;
    for (const auto& s : list) {
        const auto pred = read_map((fs::path(pred_dir) / (s + ".pgm")).string());
        const auto gt = read_map((fs::path(gt_dir) / (s + ".pgm")).string());
        rows.push_back({s, metrics::evaluate(pred, gt)});
    }
    return summarize(std::move(rows));
}

}  // namespace refonce
