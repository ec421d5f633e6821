#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "refonce/dataset.hpp"
#include "refonce/metrics.hpp"
#include "refonce/model.hpp"
#include "refonce/report.hpp"

namespace refonce {

/// Non-finite loss or gradient during training.
class NumericError : public Error {
   public:
    NumericError(const std::string& what, std::size_t step) : Error(what), step_(step) {}
    std::size_t step() const { return step_; }

   private:
    std::size_t step_;
};

struct TrainConfig {
    double lr0 = 0.05;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::size_t epochs = 20;
    std::size_t batch_size = 4;
    double lambda_c = 0.03;
    std::size_t refs_per_query = 5;
    std::size_t warmup_steps = 100;
    std::uint64_t seed = 0;
    bool augment = true;
    bool eval_each_epoch = true;
    double grad_clip = 5.0;  // max global gradient L2 norm; 0 disables

    void validate() const {
        if (grad_clip < 0) throw ValueError("grad_clip must be non-negative");
        if (lambda_c < 0) throw ValueError("lambda_c must be non-negative");
        if (refs_per_query < 1) throw ValueError("refs_per_query must be at least 1");
        if (batch_size < 1) throw ValueError("batch_size must be at least 1");
        if (!(lr0 > 0)) throw ValueError("lr0 must be positive");
        if (momentum < 0 || momentum >= 1) throw ValueError("SGD momentum must lie in [0, 1)");
        if (weight_decay < 0) throw ValueError("weight_decay must be non-negative");
    }
};

/// Mean pixel BCE on raw logits.
template <typename T>
TensorT<T> bce_seg_loss(const TensorT<T>& logits, const TensorT<T>& gt) {
    return bce_with_logits(logits, gt);
}

template <typename T>
TensorT<T> total_loss(const TensorT<T>& seg, const TensorT<T>& cls, double lambda_c) {
    return add(seg, scale(cls, static_cast<T>(lambda_c)));
}

template <typename T>
struct SgdState {
    std::map<std::string, std::vector<T>> buffers;
};

/// buf <- m buf + (g + wd p); p <- p - lr buf
template <typename T>
void sgd_step(const std::vector<typename ParamStore<T>::Entry>& params, SgdState<T>& state, double lr, double momentum,
              double weight_decay, std::size_t step = 0) {
    for (const auto& [name, p] : params) {
        const auto g = p.grad();
        for (T v : g)
            if (!std::isfinite(static_cast<double>(v)))
                throw NumericError("non-finite gradient in parameter '" + name + "' at step " + std::to_string(step), step);
    }
    const T m = static_cast<T>(momentum), wd = static_cast<T>(weight_decay), eta = static_cast<T>(lr);
    for (const auto& [name, p] : params) {
        auto& buf = state.buffers[name];
        auto data = p.node()->data.data();
        const std::size_t n = p.numel();
        if (buf.empty()) buf.assign(n, T(0));
        const auto g = p.grad();
        for (std::size_t i = 0; i < n; ++i) {
            buf[i] = m * buf[i] + (g[i] + wd * data[i]);
            data[i] -= eta * buf[i];
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping. A non-finite norm is left alone so
/// sgd_step can name the offending parameter.
template <typename T>
double clip_grad_norm(const std::vector<typename ParamStore<T>::Entry>& params, double max_norm) {
    double sq = 0;
    for (const auto& [_, p] : params)
        for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && std::isfinite(norm) && norm > max_norm) {
        const T f = static_cast<T>(max_norm / norm);
        for (const auto& [_, p] : params)
            for (T& g : p.node()->grad) g *= f;
    }
    return norm;
}

/// Linear warmup to lr0 over `warmup` steps, then linear decay to 0 at `total`.
inline double lr_schedule(std::size_t step, std::size_t total, std::size_t warmup, double lr0) {
    if (step > total) throw ValueError("lr_schedule: step beyond total");
    if (warmup > total) warmup = total;
    if (step < warmup) return lr0 * static_cast<double>(step) / static_cast<double>(warmup);
    if (total == warmup) return lr0;
    return lr0 * static_cast<double>(total - step) / static_cast<double>(total - warmup);
}

/// Mean of `n` encoded references of category y (split `split`). Draws
/// without replacement when enough exist, with replacement otherwise.
template <typename T>
TensorT<T> sample_and_average_references(const Model<T>& model, const Dataset& ds, std::size_t y, std::size_t n,
                                         Rng& rng, Split split = Split::kTrain) {
    auto pool = ds.references(y, split);
    if (pool.empty()) throw Error("category " + std::to_string(y) + " has no reference samples");
    if (n == 0) throw ValueError("need at least one reference");
    std::vector<std::size_t> pick;
    if (pool.size() >= n) {
        for (std::size_t i = 0; i < n; ++i) {
            std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
            pick.push_back(pool[i]);
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) pick.push_back(pool[rng.below(pool.size())]);
    }
    TensorT<T> acc;
    for (auto idx : pick) {
        auto r = model.encode_reference(cast<T>(ds.images[idx]), cast<T>(ds.masks[idx]));
        acc = acc.defined() ? add(acc, r) : r;
    }
    return scale(acc, T(1) / static_cast<T>(n));
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentDraw {
    double scale = 1.0;            // crop side / image side
    double off_x = 0, off_y = 0;   // crop origin in pixels
    int quarter_turns = 0;         // counter-clockwise 90 degree steps

    bool identity() const { return scale == 1.0 && off_x == 0 && off_y == 0 && quarter_turns == 0; }
};

inline AugmentDraw draw_augment(std::size_t size, Rng& rng) {
    AugmentDraw d;
    d.scale = rng.uniform(0.75, 1.0);
    const double slack = (1.0 - d.scale) * static_cast<double>(size);
    d.off_x = rng.uniform(0.0, slack);
    d.off_y = rng.uniform(0.0, slack);
    d.quarter_turns = static_cast<int>(rng.below(4));
    return d;
}

namespace detail {

/// Bilinear crop-and-resize of a C x S x S buffer followed by rotation.
template <typename T>
std::vector<T> warp(const std::vector<T>& src, std::size_t c, std::size_t s, const AugmentDraw& d) {
    const double sd = static_cast<double>(s);
    const double step = d.scale;
    std::vector<T> cropped(c * s * s);
    for (std::size_t y = 0; y < s; ++y) {
        const double sy = std::clamp(d.off_y + (static_cast<double>(y) + 0.5) * step - 0.5, 0.0, sd - 1);
        const auto y0 = static_cast<std::size_t>(sy);
        const std::size_t y1 = std::min(y0 + 1, s - 1);
        const double ty = sy - static_cast<double>(y0);
        for (std::size_t x = 0; x < s; ++x) {
            const double sx = std::clamp(d.off_x + (static_cast<double>(x) + 0.5) * step - 0.5, 0.0, sd - 1);
            const auto x0 = static_cast<std::size_t>(sx);
            const std::size_t x1 = std::min(x0 + 1, s - 1);
            const double tx = sx - static_cast<double>(x0);
            for (std::size_t ch = 0; ch < c; ++ch) {
                const T* p = src.data() + ch * s * s;
                const double v = (1 - ty) * ((1 - tx) * p[y0 * s + x0] + tx * p[y0 * s + x1]) +
                                 ty * ((1 - tx) * p[y1 * s + x0] + tx * p[y1 * s + x1]);
                cropped[ch * s * s + y * s + x] = static_cast<T>(v);
            }
        }
    }
    std::vector<T> out(c * s * s);
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < s; ++y) {
            for (std::size_t x = 0; x < s; ++x) {
                std::size_t sy = y, sx = x;
                switch (((d.quarter_turns % 4) + 4) % 4) {
                    case 1: sy = x; sx = s - 1 - y; break;
                    case 2: sy = s - 1 - y; sx = s - 1 - x; break;
                    case 3: sy = s - 1 - x; sx = y; break;
                    default: break;
                }
                out[ch * s * s + y * s + x] = cropped[ch * s * s + sy * s + sx];
            }
        }
    }
    return out;
}

}  // namespace detail

/// Same geometric transform on image and mask; mask re-binarized at 0.5.
template <typename T>
std::pair<TensorT<T>, TensorT<T>> apply_augment(const TensorT<T>& image, const TensorT<T>& mask, const AugmentDraw& d) {
    if (image.rank() != 3 || mask.rank() != 3 || image.dim(1) != mask.dim(1) || image.dim(2) != mask.dim(2) ||
        image.dim(1) != image.dim(2)) {
        throw ShapeError("augment: image " + shape_str(image.shape()) + " and mask " + shape_str(mask.shape()) +
                         " must be aligned squares");
    }
    if (d.identity()) return {image.clone(), mask.clone()};
    const std::size_t s = image.dim(1);
    auto img = detail::warp(image.vec(), image.dim(0), s, d);
    auto m = detail::warp(mask.vec(), mask.dim(0), s, d);
    for (auto& v : m) v = v >= T(0.5) ? T(1) : T(0);
    return {TensorT<T>::from(image.shape(), std::move(img)), TensorT<T>::from(mask.shape(), std::move(m))};
}

template <typename T>
std::pair<TensorT<T>, TensorT<T>> augment(const TensorT<T>& image, const TensorT<T>& mask, Rng& rng) {
    return apply_augment(image, mask, draw_augment(image.dim(1), rng));
}

// ---------------------------------------------------------------------------
// Evaluation

/// Probability map quantized to the 8-bit grid used for stored predictions.
template <typename T>
metrics::Map quantized_map(const TensorT<T>& prob) {
    auto m = metrics::to_map(prob);
    for (auto& v : m.v) v = static_cast<double>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0;
    return m;
}

/// Scores the model on the given query indices. Oracle mode passes each
/// sample's ground-truth category.
template <typename T>
MetricReport evaluate_model(const Model<T>& model, const Dataset& ds, const std::vector<std::size_t>& indices,
                            GuidanceMode mode) {
    std::vector<SampleMetrics> rows;
    for (auto i : indices) {
        const auto out = model.forward_eval(cast<T>(ds.images[i]), mode,
                                            mode == GuidanceMode::kOracle ? std::optional<std::size_t>(ds.records[i].category)
                                                                          : std::nullopt);
        rows.push_back({ds.records[i].id, metrics::evaluate(quantized_map(out.mask_prob), metrics::to_map(ds.masks[i]))});
    }
    return summarize(std::move(rows));
}

// ---------------------------------------------------------------------------
// Loop

struct TrainResult {
    SgdState<float> optimizer;
    std::vector<double> losses;  // L_total per step
    std::size_t steps = 0;
    std::vector<std::size_t> trained_categories;
};

struct TrainLogs {
    std::ostream* steps = nullptr;  // step, lr, L_seg, L_cls, L_total
    std::ostream* evals = nullptr;  // epoch, s_m, alpha_e, w_f, mae on the test split
};

/// Per step: batch -> augment -> references -> forward_train ->
/// L = L_seg + lambda_c L_cls -> backward -> sgd_step -> EMA update with the
/// detached reference vector of every sample in the batch.
inline TrainResult train_loop(Model<float>& model, const Dataset& ds, const TrainConfig& cfg, TrainLogs logs = {}) {
    cfg.validate();
    enum : std::uint64_t { kOrderStream = 101, kAugmentStream, kReferenceStream };
    auto order_rng = Rng::derive(cfg.seed, kOrderStream);
    auto aug_rng = Rng::derive(cfg.seed, kAugmentStream);
    auto ref_rng = Rng::derive(cfg.seed, kReferenceStream);

    auto queries = ds.select(Split::kTrain, Role::kQuery);
    if (queries.empty()) throw Error("dataset has no training queries");
    const std::size_t k = model.config().categories;
    for (auto i : queries)
        if (ds.records[i].category >= k)
            throw ValueError("training category " + std::to_string(ds.records[i].category) + " exceeds model K=" + std::to_string(k));
    const auto test = ds.select(Split::kTest, Role::kQuery);
    const std::size_t per_epoch = (queries.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total = per_epoch * cfg.epochs;

    TrainResult res;
    const auto seen = ds.seen_categories();
    res.trained_categories.assign(seen.begin(), seen.end());
    const auto trainable = model.trainable();
    if (logs.steps) *logs.steps << "step\tlr\tL_seg\tL_cls\tL_total\n";
    if (logs.evals) *logs.evals << "epoch\ts_m\talpha_e\tw_f\tmae\n";

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = queries.size(); i > 1; --i) std::swap(queries[i - 1], queries[order_rng.below(i)]);
        for (std::size_t b0 = 0; b0 < queries.size(); b0 += cfg.batch_size) {
            const std::size_t b1 = std::min(b0 + cfg.batch_size, queries.size());
            const double lr = lr_schedule(step, total, cfg.warmup_steps, cfg.lr0);
            model.params().zero_grad();
            double seg_sum = 0, cls_sum = 0, tot_sum = 0;
            std::vector<std::pair<TensorT<float>, std::size_t>> pending;
            const float inv_b = 1.0f / static_cast<float>(b1 - b0);
            for (std::size_t j = b0; j < b1; ++j) {
                const auto idx = queries[j];
                const std::size_t y = ds.records[idx].category;
                auto draw = cfg.augment ? draw_augment(ds.size, aug_rng) : AugmentDraw{};
                auto [img, msk] = apply_augment(ds.images[idx], ds.masks[idx], draw);
                TensorT<float> r;
                if (model.guided()) {
                    std::optional<NoGradGuard> frozen;
                    if (model.config().freeze_ref_encoder) frozen.emplace();
                    r = sample_and_average_references(model, ds, y, cfg.refs_per_query, ref_rng);
                }
                auto out = model.forward_train(img, r, y);
                auto seg = bce_seg_loss(out.logits, msk);
                TensorT<float> loss = seg;
                double cls_v = 0;
                if (model.guided()) {
                    auto cls = classification_loss(out.a, y);
                    cls_v = cls.item();
                    loss = total_loss(seg, cls, cfg.lambda_c);
                }
                const double lt = loss.item();
                if (!std::isfinite(lt)) {
                    throw NumericError("non-finite loss at step " + std::to_string(step), step);
                }
                seg_sum += seg.item();
                cls_sum += cls_v;
                tot_sum += lt;
                backward(scale(loss, inv_b));
                if (model.guided()) pending.emplace_back(stop_gradient(r), y);
            }
            clip_grad_norm<float>(trainable, cfg.grad_clip);
            sgd_step(trainable, res.optimizer, lr, cfg.momentum, cfg.weight_decay, step);
            for (auto& [r, y] : pending) model.memory().ema_update(r, y);
            const double nb = static_cast<double>(b1 - b0);
            res.losses.push_back(tot_sum / nb);
            if (logs.steps) {
                char buf[200];
                std::snprintf(buf, sizeof buf, "%zu\t%.8g\t%.8g\t%.8g\t%.8g\n", step, lr, seg_sum / nb, cls_sum / nb,
                              tot_sum / nb);
                *logs.steps << buf;
            }
            ++step;
        }
        if (logs.evals && cfg.eval_each_epoch && !test.empty()) {
            // Held-out categories have no prototype, so oracle scoring falls back to mixture here.
            const auto mode = model.config().guidance_mode == GuidanceMode::kNearest ? GuidanceMode::kNearest
                                                                                     : GuidanceMode::kMixture;
            const auto rep = evaluate_model(model, ds, test, mode);
            char buf[200];
            std::snprintf(buf, sizeof buf, "%zu\t%.6f\t%.6f\t%.6f\t%.6f\n", epoch + 1, rep.s_measure, rep.adaptive_e,
                          rep.weighted_f, rep.mae);
            *logs.evals << buf;
        }
    }
    res.steps = step;
    return res;
}

}  // namespace refonce
