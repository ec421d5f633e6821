#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "refonce/container.hpp"
#include "refonce/ops.hpp"
#include "refonce/params.hpp"
#include "refonce/rng.hpp"

namespace refonce {

/// Per-category prototype memory, written only by exponential moving average.
///
/// Prototypes are plain buffers, never graph leaves, so nothing downstream can
/// push gradient into them. An unwritten slot is all zeros with its flag
/// cleared; the first write copies the reference vector verbatim.
template <typename T>
class PrototypeMemory {
   public:
    PrototypeMemory(std::size_t categories, std::size_t channels, double momentum)
        : k_(categories), c_(channels), momentum_(momentum), prototypes_(categories * channels, T(0)),
          initialized_(categories, false) {
        if (categories == 0 || channels == 0) throw ValueError("prototype memory needs K > 0 and C > 0");
        if (!(momentum > 0.0 && momentum < 1.0)) {
            throw ValueError("momentum must lie strictly inside (0, 1), got " + std::to_string(momentum));
        }
        for (std::size_t i = 0; i < categories; ++i) names_.push_back("category_" + std::to_string(i));
    }

    std::size_t categories() const { return k_; }
    std::size_t channels() const { return c_; }
    double momentum() const { return momentum_; }

    bool initialized(std::size_t k) const { return initialized_.at(k); }
    std::size_t initialized_count() const {
        std::size_t n = 0;
        for (bool b : initialized_) n += b;
        return n;
    }
    bool any_initialized() const { return initialized_count() > 0; }

    const std::vector<std::string>& names() const { return names_; }
    void set_names(std::vector<std::string> names) {
        if (names.size() != k_) throw ValueError("expected " + std::to_string(k_) + " category names");
        names_ = std::move(names);
    }

    std::span<const T> row(std::size_t k) const { return std::span<const T>(prototypes_).subspan(k * c_, c_); }
    const std::vector<T>& matrix() const { return prototypes_; }

    /// Constant K x C tensor of the current prototypes.
    TensorT<T> as_tensor() const { return TensorT<T>::from({k_, c_}, prototypes_); }
    TensorT<T> row_tensor(std::size_t k) const {
        auto r = row(k);
        return TensorT<T>::from({c_}, std::vector<T>(r.begin(), r.end()));
    }

    /// m_y <- mu m_y + (1 - mu) r, or m_y <- r on the first write to slot y.
    void ema_update(std::span<const T> r, std::size_t y) {
        if (y >= k_) throw ValueError("category " + std::to_string(y) + " out of range for " + std::to_string(k_) + " slots");
        if (r.size() != c_) throw ShapeError("reference vector has " + std::to_string(r.size()) + " channels, expected " + std::to_string(c_));
        for (T v : r)
            if (!std::isfinite(static_cast<double>(v))) throw ValueError("non-finite reference vector for category " + std::to_string(y));
        T* m = prototypes_.data() + y * c_;
        if (!initialized_[y]) {
            std::copy(r.begin(), r.end(), m);
            initialized_[y] = true;
            return;
        }
        const T mu = static_cast<T>(momentum_);
        const T one_minus = static_cast<T>(1.0 - momentum_);
        for (std::size_t i = 0; i < c_; ++i) m[i] = mu * m[i] + one_minus * r[i];
    }

    void ema_update(const TensorT<T>& r, std::size_t y) { ema_update(r.data(), y); }

    /// Serialized record: prototypes, momentum, flags and names.
    std::vector<std::uint8_t> snapshot() const {
        Container c;
        write_to(c, "memory.");
        return c.encode();
    }

    static PrototypeMemory restore(std::span<const std::uint8_t> bytes) {
        return read_from(Container::decode(bytes), "memory.");
    }

    void write_to(Container& c, const std::string& prefix) const {
        std::vector<float> protos(prototypes_.begin(), prototypes_.end());
        c.add_f32(prefix + "prototypes", {k_, c_}, protos);
        c.add_f32(prefix + "momentum", static_cast<float>(momentum_));
        std::vector<float> flags(initialized_.begin(), initialized_.end());
        c.add_f32(prefix + "initialized", {k_}, flags);
        std::string joined;
        for (std::size_t i = 0; i < k_; ++i) joined += (i ? "\n" : "") + names_[i];
        c.add_text(prefix + "names", joined);
    }

    static PrototypeMemory read_from(const Container& c, const std::string& prefix) {
        const auto& e = c.get(prefix + "prototypes");
        if (e.dims.size() != 2) throw Error("memory prototypes must be a K x C matrix");
        const auto& flags = c.f32(prefix + "initialized");
        if (flags.size() != e.dims[0]) throw Error("memory flag count does not match prototype rows");
        PrototypeMemory m(e.dims[0], e.dims[1], c.scalar(prefix + "momentum"));
        m.prototypes_.assign(e.f32.begin(), e.f32.end());
        for (std::size_t i = 0; i < flags.size(); ++i) m.initialized_[i] = flags[i] != 0.0f;
        if (c.contains(prefix + "names")) {
            std::vector<std::string> names;
            std::string text = c.text(prefix + "names"), cur;
            for (char ch : text) {
                if (ch == '\n') {
                    names.push_back(cur);
                    cur.clear();
                } else {
                    cur += ch;
                }
            }
            names.push_back(cur);
            if (names.size() == m.k_) m.names_ = std::move(names);
        }
        return m;
    }

   private:
    std::size_t k_, c_;
    double momentum_;
    std::vector<T> prototypes_;
    std::vector<bool> initialized_;
    std::vector<std::string> names_;
};

/// Two-layer ReLU head mapping a query descriptor to K category logits.
template <typename T>
struct MixturePredictor {
    TensorT<T> w1, b1, w2, b2;

    static MixturePredictor create(ParamStore<T>& params, const std::string& prefix, std::size_t channels,
                                   std::size_t hidden, std::size_t categories, Rng& rng) {
        MixturePredictor p;
        p.w1 = params.normal(prefix + "w1", {hidden, channels}, channels, rng);
        p.b1 = params.zeros(prefix + "b1", {hidden});
        p.w2 = params.normal(prefix + "w2", {categories, hidden}, hidden, rng, 1.0);
        p.b2 = params.zeros(prefix + "b2", {categories});
        return p;
    }

    std::size_t categories() const { return w2.dim(0); }
};

/// a = W2 relu(W1 q + b1) + b2
template <typename T>
TensorT<T> predict_logits(const MixturePredictor<T>& pred, const TensorT<T>& q) {
    if (q.rank() != 1 || q.dim(0) != pred.w1.dim(1)) {
        throw ShapeError("predict_logits: descriptor " + shape_str(q.shape()) + " does not match predictor input " +
                         std::to_string(pred.w1.dim(1)));
    }
    return linear(relu(linear(q, pred.w1, &pred.b1)), pred.w2, &pred.b2);
}

enum class GuidanceMode { kMixture, kNearest, kOracle };

inline GuidanceMode parse_guidance_mode(std::string_view s) {
    if (s == "mixture") return GuidanceMode::kMixture;
    if (s == "nearest") return GuidanceMode::kNearest;
    if (s == "oracle") return GuidanceMode::kOracle;
    throw ValueError("unknown guidance mode '" + std::string(s) + "' (expected mixture, nearest or oracle)");
}

inline const char* guidance_mode_name(GuidanceMode m) {
    switch (m) {
        case GuidanceMode::kMixture: return "mixture";
        case GuidanceMode::kNearest: return "nearest";
        case GuidanceMode::kOracle: return "oracle";
    }
    return "?";
}

template <typename T>
struct Guidance {
    TensorT<T> v;         // C
    TensorT<T> weights;   // K mixture weights (softmax over initialized slots)
    std::size_t chosen;   // argmax slot (nearest/oracle) or argmax weight (mixture)
};

/// Synthesizes the guidance vector from the memory. Uninitialized slots are
/// excluded from the softmax and from nearest selection. In nearest mode a
/// tie goes to the lowest category index. Gradient reaches `logits` only in
/// mixture mode; prototypes are constants in every mode.
template <typename T>
Guidance<T> synthesize_guidance(const PrototypeMemory<T>& mem, const TensorT<T>& logits, GuidanceMode mode,
                                std::optional<std::size_t> oracle_category = std::nullopt) {
    const std::size_t k = mem.categories();
    if (logits.numel() != k) {
        throw ShapeError("synthesize_guidance: " + std::to_string(logits.numel()) + " logits for " + std::to_string(k) +
                         " prototypes");
    }
    if (!mem.any_initialized()) throw Error("synthesize_guidance: no prototype slot has been initialized");

    std::vector<T> mask(k, T(0));
    bool masked = false;
    for (std::size_t i = 0; i < k; ++i) {
        if (!mem.initialized(i)) {
            mask[i] = -std::numeric_limits<T>::infinity();
            masked = true;
        }
    }
    TensorT<T> a = reshape(logits, {k});
    TensorT<T> pi = masked ? softmax(add(a, TensorT<T>::from({k}, mask))) : softmax(a);

    std::size_t best = k;
    for (std::size_t i = 0; i < k; ++i) {
        if (!mem.initialized(i)) continue;
        if (best == k || logits[i] > logits[best]) best = i;
    }

    Guidance<T> g;
    g.weights = pi;
    switch (mode) {
        case GuidanceMode::kMixture:
            g.v = reshape(matmul(reshape(pi, {1, k}), mem.as_tensor()), {mem.channels()});
            g.chosen = best;
            break;
        case GuidanceMode::kNearest:
            g.v = mem.row_tensor(best);
            g.chosen = best;
            break;
        case GuidanceMode::kOracle:
            if (!oracle_category) throw Error("oracle guidance requires the ground-truth category");
            if (*oracle_category >= k) throw ValueError("oracle category out of range");
            if (!mem.initialized(*oracle_category)) {
                throw Error("oracle guidance: slot " + std::to_string(*oracle_category) + " was never written");
            }
            g.v = mem.row_tensor(*oracle_category);
            g.chosen = *oracle_category;
            break;
    }
    return g;
}

/// -log softmax(a)_y
template <typename T>
TensorT<T> classification_loss(const TensorT<T>& logits, std::size_t y) {
    return cross_entropy(logits, y);
}

/// Training with a reference present: v + r. Otherwise v. A reference at
/// inference violates the reference-free contract and is rejected.
template <typename T>
TensorT<T> combine_bootstrap(const TensorT<T>& v, const TensorT<T>* r, bool training) {
    if (!r) return v;
    if (!training) throw Error("reference vector supplied at inference; inference is reference-free");
    return add(v, *r);
}

}  // namespace refonce
