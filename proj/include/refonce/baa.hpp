#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "refonce/ops.hpp"
#include "refonce/params.hpp"

namespace refonce {

/// Two linear layers with a GELU in between.
template <typename T>
struct FeedForward {
    TensorT<T> w1, b1, w2, b2;

    static FeedForward create(ParamStore<T>& params, const std::string& prefix, std::size_t channels,
                              std::size_t hidden, Rng& rng) {
        FeedForward f;
        f.w1 = params.normal(prefix + "w1", {hidden, channels}, channels, rng);
        f.b1 = params.zeros(prefix + "b1", {hidden});
        f.w2 = params.normal(prefix + "w2", {channels, hidden}, hidden, rng, 0.1);
        f.b2 = params.zeros(prefix + "b2", {channels});
        return f;
    }

    TensorT<T> operator()(const TensorT<T>& x) const { return linear(gelu(linear(x, w1, &b1)), w2, &b2); }
};

template <typename T>
struct LayerNormParams {
    TensorT<T> gain, bias;

    static LayerNormParams create(ParamStore<T>& params, const std::string& prefix, std::size_t channels) {
        return {params.ones(prefix + "gain", {channels}), params.zeros(prefix + "bias", {channels})};
    }

    TensorT<T> operator()(const TensorT<T>& x) const { return layer_norm(x, gain, bias, T(1e-5)); }
};

/// Parameters of one alignment application. Projections act as x -> x W^T.
template <typename T>
struct BaaParams {
    TensorT<T> w_x, w_v, w_gamma, w_beta, w_c, w_o;
    LayerNormParams<T> ln_f, ln_v, ln_x2, ln_v2;
    FeedForward<T> ffn_x, ffn_v;

    static BaaParams create(ParamStore<T>& params, const std::string& prefix, std::size_t c, Rng& rng) {
        BaaParams p;
        p.w_x = params.normal(prefix + "w_x", {c, c}, c, rng, 1.0);
        p.w_v = params.normal(prefix + "w_v", {c, c}, c, rng, 1.0);
        p.w_gamma = params.normal(prefix + "w_gamma", {c, c}, c, rng, 0.1);
        p.w_beta = params.normal(prefix + "w_beta", {c, c}, c, rng, 0.1);
        p.w_c = params.normal(prefix + "w_c", {c, c}, c, rng, 1.0);
        p.w_o = params.normal(prefix + "w_o", {c, c}, c, rng, 0.1);
        p.ln_f = LayerNormParams<T>::create(params, prefix + "ln_f.", c);
        p.ln_v = LayerNormParams<T>::create(params, prefix + "ln_v.", c);
        p.ln_x2 = LayerNormParams<T>::create(params, prefix + "ln_x2.", c);
        p.ln_v2 = LayerNormParams<T>::create(params, prefix + "ln_v2.", c);
        p.ffn_x = FeedForward<T>::create(params, prefix + "ffn_x.", c, 2 * c, rng);
        p.ffn_v = FeedForward<T>::create(params, prefix + "ffn_v.", c, 2 * c, rng);
        return p;
    }

    std::size_t channels() const { return w_x.dim(0); }

    static constexpr std::size_t kTensors = 22;

    /// Inverse of tensors(), reading kTensors entries starting at `offset`.
    static BaaParams from_tensors(const std::vector<TensorT<T>>& t, std::size_t offset = 0) {
        if (t.size() < offset + kTensors) throw ValueError("BaaParams::from_tensors: not enough tensors");
        auto it = t.begin() + static_cast<std::ptrdiff_t>(offset);
        BaaParams p;
        for (TensorT<T>* dst : {&p.w_x, &p.w_v, &p.w_gamma, &p.w_beta, &p.w_c, &p.w_o, &p.ln_f.gain, &p.ln_f.bias,
                                &p.ln_v.gain, &p.ln_v.bias, &p.ln_x2.gain, &p.ln_x2.bias, &p.ln_v2.gain, &p.ln_v2.bias,
                                &p.ffn_x.w1, &p.ffn_x.b1, &p.ffn_x.w2, &p.ffn_x.b2, &p.ffn_v.w1, &p.ffn_v.b1,
                                &p.ffn_v.w2, &p.ffn_v.b2})
            *dst = *it++;
        return p;
    }

    std::vector<TensorT<T>> tensors() const {
        return {w_x,          w_v,          w_gamma,      w_beta,       w_c,       w_o,       ln_f.gain, ln_f.bias,
                ln_v.gain,    ln_v.bias,    ln_x2.gain,   ln_x2.bias,   ln_v2.gain, ln_v2.bias, ffn_x.w1, ffn_x.b1,
                ffn_x.w2,     ffn_x.b2,     ffn_v.w1,     ffn_v.b1,     ffn_v.w2,  ffn_v.b2};
    }
};

template <typename T>
struct AttentionState {
    TensorT<T> scores;  // HW
    TensorT<T> alpha;   // HW, sums to one
    TensorT<T> gate;    // 1 x H x W, same values as alpha
};

/// Switches for ablations and test hooks.
struct BaaOptions {
    bool one_way = false;   // skip the reverse refinement: v passes through unchanged
    bool gate_off = false;  // replace the spatial gate with zeros inside the modulation
};

namespace detail {

template <typename T>
TensorT<T> flatten_positions(const TensorT<T>& x) {
    if (x.rank() != 3) throw ShapeError("expected a C x H x W feature map, got " + shape_str(x.shape()));
    return transpose(reshape(x, {x.dim(0), x.dim(1) * x.dim(2)}));
}

template <typename T>
TensorT<T> unflatten_positions(const TensorT<T>& f, std::size_t h, std::size_t w) {
    return reshape(transpose(f), {f.dim(1), h, w});
}

template <typename T>
void check_guidance(const TensorT<T>& v, std::size_t c, const char* op) {
    if (v.rank() != 1 || v.dim(0) != c) {
        throw ShapeError(std::string(op) + ": guidance " + shape_str(v.shape()) + " does not match " + std::to_string(c) +
                         " channels");
    }
}

}  // namespace detail

/// s_p = <LN(F_p) W_x, LN(v) W_v> / sqrt(C), alpha = softmax over positions.
/// F is HW x C; the gate is alpha reshaped to 1 x h x w.
template <typename T>
AttentionState<T> coupled_attention(const TensorT<T>& f, const TensorT<T>& v, const BaaParams<T>& p, std::size_t h,
                                    std::size_t w) {
    const std::size_t c = p.channels();
    if (f.rank() != 2 || f.dim(1) != c || f.dim(0) != h * w) {
        throw ShapeError("coupled_attention: features " + shape_str(f.shape()) + " do not match " + std::to_string(h * w) +
                         " positions x " + std::to_string(c) + " channels");
    }
    detail::check_guidance(v, c, "coupled_attention");
    const auto keys = linear(p.ln_f(f), p.w_x);
    const auto query = linear(p.ln_v(v), p.w_v);
    const auto s = scale(reshape(linear(keys, reshape(query, {1, c})), {h * w}), T(1) / std::sqrt(static_cast<T>(c)));
    AttentionState<T> st;
    st.scores = s;
    st.alpha = softmax(s);
    st.gate = reshape(st.alpha, {1, h, w});
    return st;
}

/// gamma = tanh(W_gamma v), beta = tanh(W_beta v)
template <typename T>
std::pair<TensorT<T>, TensorT<T>> guidance_scaling(const TensorT<T>& v, const BaaParams<T>& p) {
    detail::check_guidance(v, p.channels(), "guidance_scaling");
    return {tanh(linear(v, p.w_gamma)), tanh(linear(v, p.w_beta))};
}

/// X' = X + G * ((1 + gamma) * X + beta)
template <typename T>
TensorT<T> modulate_features(const TensorT<T>& x, const TensorT<T>& gate, const TensorT<T>& gamma,
                             const TensorT<T>& beta) {
    return modulate(x, gate, gamma, beta);
}

/// c = sum_p alpha_p W_c F_p, v' = v + W_o c
template <typename T>
TensorT<T> refine_guidance(const TensorT<T>& f, const TensorT<T>& alpha, const TensorT<T>& v, const BaaParams<T>& p) {
    const std::size_t n = f.dim(0), c = p.channels();
    if (alpha.numel() != n) throw ShapeError("refine_guidance: attention length does not match positions");
    detail::check_guidance(v, c, "refine_guidance");
    const auto pooled = reshape(matmul(reshape(alpha, {1, n}), f), {c});
    const auto delta = linear(linear(pooled, p.w_c), p.w_o);
    return add(v, delta);
}

/// v'' = v' + FFN_v(LN(v')); X'' = X' + FFN_x(LN(X'_p)) per position with shared weights.
template <typename T>
std::pair<TensorT<T>, TensorT<T>> ffn_residual(const TensorT<T>& v, const TensorT<T>& x, const BaaParams<T>& p) {
    const auto v2 = add(v, p.ffn_v(p.ln_v2(v)));
    const auto fx = detail::flatten_positions(x);
    const auto upd = detail::unflatten_positions(p.ffn_x(p.ln_x2(fx)), x.dim(1), x.dim(2));
    return {v2, add(x, upd)};
}

template <typename T>
struct BaaOutput {
    TensorT<T> x;  // C x H x W
    TensorT<T> v;  // C
    AttentionState<T> attention;
};

/// One full alignment application: attention, scaling, modulation, reverse
/// refinement and the residual feed-forward updates.
template <typename T>
BaaOutput<T> baa_step(const TensorT<T>& x, const TensorT<T>& v, const BaaParams<T>& p, const BaaOptions& opts = {}) {
    if (x.rank() != 3 || x.dim(0) != p.channels()) {
        throw ShapeError("baa_step: features " + shape_str(x.shape()) + " do not have " + std::to_string(p.channels()) +
                         " channels");
    }
    const std::size_t h = x.dim(1), w = x.dim(2);
    const auto f = detail::flatten_positions(x);
    auto att = coupled_attention(f, v, p, h, w);
    auto [gamma, beta] = guidance_scaling(v, p);
    const auto gate = opts.gate_off ? TensorT<T>::zeros({1, h, w}) : att.gate;
    const auto xm = modulate_features(x, gate, gamma, beta);
    if (opts.one_way) {
        const auto fx = detail::flatten_positions(xm);
        const auto xo = add(xm, detail::unflatten_positions(p.ffn_x(p.ln_x2(fx)), h, w));
        return {xo, v, std::move(att)};
    }
    const auto vr = refine_guidance(f, att.alpha, v, p);
    auto [v2, x2] = ffn_residual(vr, xm, p);
    return {x2, v2, std::move(att)};
}

/// Alignment parameters for the six scheduled applications
/// (X4 three times, then X3, X2, X1), or one shared instance.
template <typename T>
class BaaStack {
   public:
    static constexpr std::size_t kApplications = 6;

    BaaStack() = default;

    BaaStack(ParamStore<T>& params, const std::string& prefix, std::size_t channels, std::size_t top_iterations,
             bool shared, Rng& rng)
        : top_iterations_(top_iterations), shared_(shared) {
        if (top_iterations == 0) throw ValueError("at least one alignment iteration on the top stage is required");
        if (shared) {
            layers_.push_back(BaaParams<T>::create(params, prefix + "shared.", channels, rng));
            return;
        }
        for (std::size_t i = 0; i < top_iterations; ++i)
            layers_.push_back(BaaParams<T>::create(params, prefix + "x4." + std::to_string(i) + ".", channels, rng));
        for (int stage = 3; stage >= 1; --stage)
            layers_.push_back(BaaParams<T>::create(params, prefix + "x" + std::to_string(stage) + ".", channels, rng));
    }

    /// One layer per application (top iterations first), or a single shared layer.
    static BaaStack from_layers(std::vector<BaaParams<T>> layers, std::size_t top_iterations, bool shared) {
        if (layers.size() != (shared ? 1 : top_iterations + 3)) throw ValueError("BaaStack: wrong number of layers");
        BaaStack s;
        s.layers_ = std::move(layers);
        s.top_iterations_ = top_iterations;
        s.shared_ = shared;
        return s;
    }

    std::size_t applications() const { return top_iterations_ + 3; }
    std::size_t top_iterations() const { return top_iterations_; }
    const BaaParams<T>& at(std::size_t application) const { return shared_ ? layers_.front() : layers_.at(application); }

   private:
    std::vector<BaaParams<T>> layers_;
    std::size_t top_iterations_ = 3;
    bool shared_ = false;
};

/// Records the stage index (4, 3, 2, 1) of every alignment application.
struct BaaTrace {
    std::vector<int> stages;
};

template <typename T>
struct MultiScaleOutput {
    std::array<TensorT<T>, 4> stages;  // refined X1..X4
    TensorT<T> v;
    std::vector<TensorT<T>> alphas;
};

/// Runs the alignment on the top stage `top_iterations` times, threading v,
/// then once on X3, X2 and X1 in that order with the latest refined v.
template <typename T>
MultiScaleOutput<T> multi_scale_guidance(const std::vector<TensorT<T>>& stages, const TensorT<T>& v,
                                         const BaaStack<T>& stack, const BaaOptions& opts = {},
                                         BaaTrace* trace = nullptr) {
    if (stages.size() != 4) throw ShapeError("multi_scale_guidance expects 4 stages, got " + std::to_string(stages.size()));
    MultiScaleOutput<T> out;
    for (std::size_t i = 0; i < 4; ++i) out.stages[i] = stages[i];
    TensorT<T> cur = v;
    std::size_t app = 0;
    auto run = [&](std::size_t stage_index) {
        auto res = baa_step(out.stages[stage_index], cur, stack.at(app++), opts);
        if (trace) trace->stages.push_back(static_cast<int>(stage_index) + 1);
        out.stages[stage_index] = res.x;
        cur = res.v;
        out.alphas.push_back(res.attention.alpha);
    };
    for (std::size_t i = 0; i < stack.top_iterations(); ++i) run(3);
    run(2);
    run(1);
    run(0);
    out.v = cur;
    return out;
}

}  // namespace refonce
