#pragma once

// Finite-difference cases over the differentiable model pieces at
// C=8, H=W=4, K=4. Shared by the unit tests and the acceptance runner.

#include <string>
#include <vector>

#include "refonce/baa.hpp"
#include "refonce/gradcheck.hpp"
#include "refonce/model.hpp"
#include "refonce/proto_memory.hpp"
#include "refonce/training.hpp"
#include "test_util.hpp"

namespace gradcases {

using namespace refonce;

struct CaseResult {
    std::string name;
    double err64 = 0;
    double err32 = 0;
};

template <typename U>
std::vector<U> as(const std::vector<double>& w) {
    return std::vector<U>(w.begin(), w.end());
}

template <typename F>
CaseResult check(const std::string& name, F f, const std::vector<Tensor>& leaves32) {
    std::vector<Tensor64> leaves64;
    for (const auto& l : leaves32) leaves64.push_back(cast<double>(l));
    CaseResult r{name};
    r.err64 = gradient_check<double>([&] { return f(leaves64); }, leaves64, 1e-5).max_rel_error;
    r.err32 = gradient_check_mixed(f, leaves32).max_rel_error;
    return r;
}

/// Random BAA parameters. LN gains are drawn near one so normalisation is
/// exercised with non-trivial scale.
inline std::vector<Tensor> random_baa(std::size_t c, Rng& rng) {
    ParamStore<float> ps;
    auto p = BaaParams<float>::create(ps, "b.", c, rng);
    std::vector<Tensor> out;
    for (const auto& t : p.tensors()) {
        auto r = testutil::random(t.shape(), rng, -0.5, 0.5);
        if (t.rank() == 1 && t.dim(0) == c) {
            // biases and LN parameters
            for (auto& v : r.data()) v = static_cast<float>(rng.uniform(0.5, 1.5));
        }
        out.push_back(r);
    }
    return out;
}

template <typename U>
TensorT<U> flat(const TensorT<U>& x) {
    return transpose(reshape(x, {x.dim(0), x.dim(1) * x.dim(2)}));
}

inline std::vector<CaseResult> run(std::uint64_t seed) {
    constexpr std::size_t C = 8, H = 4, W = 4, K = 4;
    Rng rng(seed);
    auto wts = [&](std::size_t n) { return testutil::random_weights<double>(n, rng); };
    std::vector<CaseResult> out;

    auto x = testutil::random({C, H, W}, rng);
    auto v = testutil::random({C}, rng);
    auto baa = random_baa(C, rng);
    const std::size_t nb = BaaParams<float>::kTensors;
    auto with = [](std::vector<Tensor> head, const std::vector<Tensor>& tail) {
        head.insert(head.end(), tail.begin(), tail.end());
        return head;
    };

    const auto w16 = wts(H * W), w128 = wts(C * H * W), w8 = wts(C), w8b = wts(C);
    out.push_back(check("coupled_attention",
                        [&]<typename U>(const std::vector<TensorT<U>>& L) {
                            auto p = BaaParams<U>::from_tensors(L, 2);
                            auto st = coupled_attention(flat(L[0]), L[1], p, H, W);
                            return dot_const(st.alpha, as<U>(w16));
                        },
                        with({x, v}, baa)));

    auto gate = testutil::random({1, H, W}, rng, 0, 1), gamma = testutil::random({C}, rng),
         beta = testutil::random({C}, rng);
    out.push_back(check("modulate_features",
                        [&]<typename U>(const std::vector<TensorT<U>>& L) {
                            return dot_const(modulate_features(L[0], L[1], L[2], L[3]), as<U>(w128));
                        },
                        {x, gate, gamma, beta}));

    auto alpha_logits = testutil::random({H * W}, rng);
    out.push_back(check("refine_guidance",
                        [&]<typename U>(const std::vector<TensorT<U>>& L) {
                            auto p = BaaParams<U>::from_tensors(L, 3);
                            return dot_const(refine_guidance(flat(L[0]), softmax(L[1]), L[2], p), as<U>(w8));
                        },
                        with({x, alpha_logits, v}, baa)));

    out.push_back(check("ffn_residual",
                        [&]<typename U>(const std::vector<TensorT<U>>& L) {
                            auto p = BaaParams<U>::from_tensors(L, 2);
                            auto [v2, x2] = ffn_residual(L[1], L[0], p);
                            return add(dot_const(v2, as<U>(w8)), dot_const(x2, as<U>(w128)));
                        },
                        with({x, v}, baa)));

    out.push_back(check("baa_step",
                        [&]<typename U>(const std::vector<TensorT<U>>& L) {
                            auto p = BaaParams<U>::from_tensors(L, 2);
                            auto r = baa_step(L[0], L[1], p);
                            return add(dot_const(r.v, as<U>(w8)), dot_const(r.x, as<U>(w128)));
                        },
                        with({x, v}, baa)));

    {
        std::vector<Tensor> leaves;
        for (std::size_t i = 0; i < 4; ++i) leaves.push_back(testutil::random({C, H, W}, rng));
        leaves.push_back(v);
        for (std::size_t a = 0; a < 6; ++a) leaves = with(leaves, random_baa(C, rng));
        const auto ws = wts(4 * C * H * W);
        out.push_back(check("multi_scale_guidance",
                            [&]<typename U>(const std::vector<TensorT<U>>& L) {
                                std::vector<BaaParams<U>> layers;
                                for (std::size_t a = 0; a < 6; ++a) layers.push_back(BaaParams<U>::from_tensors(L, 5 + a * nb));
                                auto stack = BaaStack<U>::from_layers(std::move(layers), 3, false);
                                auto r = multi_scale_guidance({L[0], L[1], L[2], L[3]}, L[4], stack);
                                auto total = dot_const(r.v, as<U>(w8b));
                                const std::vector<U> wu = as<U>(ws);
                                for (std::size_t s = 0; s < 4; ++s) {
                                    std::vector<U> part(wu.begin() + s * C * H * W, wu.begin() + (s + 1) * C * H * W);
                                    total = add(total, dot_const(r.stages[s], part));
                                }
                                return total;
                            },
                            leaves));
    }

    {
        auto q = testutil::random({C}, rng);
        auto w1 = testutil::random({C, C}, rng), b1 = testutil::random({C}, rng, -0.2, 0.2);
        auto w2 = testutil::random({K, C}, rng), b2 = testutil::random({K}, rng);
        const auto wk = wts(K);
        out.push_back(check("predict_logits",
                            [&]<typename U>(const std::vector<TensorT<U>>& L) {
                                MixturePredictor<U> p{L[1], L[2], L[3], L[4]};
                                return dot_const(predict_logits(p, L[0]), as<U>(wk));
                            },
                            {q, w1, b1, w2, b2}));
        out.push_back(check("classification_loss",
                            [&]<typename U>(const std::vector<TensorT<U>>& L) { return classification_loss(L[0], 1); },
                            {testutil::random({K}, rng, -3, 3)}));
    }

    {
        auto z = testutil::random({1, H, W}, rng, -3, 3);
        std::vector<double> g(H * W);
        for (auto& e : g) e = rng.uniform(0, 1) < 0.5 ? 0.0 : 1.0;
        out.push_back(check("bce_seg_loss",
                            [&]<typename U>(const std::vector<TensorT<U>>& L) {
                                return bce_seg_loss(L[0], TensorT<U>::from({1, H, W}, as<U>(g)));
                            },
                            {z}));
    }

    {
        // X4 at 1x1 up to X1 at 8x8; output 32x32.
        ParamStore<float> ps;
        Rng init(seed + 1000);
        auto dec = Decoder<float>::create(ps, "d.", C, init);
        std::vector<Tensor> leaves;
        for (std::size_t s = 0; s < 4; ++s) leaves.push_back(testutil::random({C, 8u >> s, 8u >> s}, rng));
        leaves.push_back(testutil::random({1, 1, 1}, rng));
        for (const auto& t : dec.tensors()) {
            auto r = testutil::random(t.shape(), rng, -0.5, 0.5);
            leaves.push_back(r);
        }
        const auto wo = wts(32 * 32);
        out.push_back(check("decode_mask",
                            [&]<typename U>(const std::vector<TensorT<U>>& L) {
                                auto d = Decoder<U>::from_tensors(L, 5);
                                return dot_const(d({L[0], L[1], L[2], L[3]}, L[4]), as<U>(wo));
                            },
                            leaves));
    }
    return out;
}

}  // namespace gradcases
