#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "refonce/gradcheck.hpp"
#include "refonce/proto_memory.hpp"
#include "test_util.hpp"

using namespace refonce;

namespace {

std::vector<float> row_of(const PrototypeMemory<float>& m, std::size_t k) {
    auto r = m.row(k);
    return {r.begin(), r.end()};
}

double checksum_except(const PrototypeMemory<float>& m, std::size_t skip) {
    double s = 0;
    for (std::size_t k = 0; k < m.categories(); ++k)
        if (k != skip)
            for (std::size_t c = 0; c < m.channels(); ++c) s += (k * 31 + c + 1) * static_cast<double>(m.row(k)[c]);
    return s;
}

}  // namespace

TEST(PrototypeMemory, RejectsBadMomentum) {
    EXPECT_THROW(PrototypeMemory<float>(2, 2, 0.0), ValueError);
    EXPECT_THROW(PrototypeMemory<float>(2, 2, 1.0), ValueError);
    EXPECT_NO_THROW(PrototypeMemory<float>(2, 2, 0.5));
}

TEST(EmaUpdate, FirstWriteAssigns) {
    PrototypeMemory<float> m(3, 2, 0.99);
    EXPECT_FALSE(m.initialized(1));
    EXPECT_EQ(row_of(m, 1), (std::vector<float>{0, 0}));
    std::vector<float> r{3, -2};
    m.ema_update(r, 1);
    EXPECT_TRUE(m.initialized(1));
    EXPECT_EQ(row_of(m, 1), r);
}

TEST(EmaUpdate, MomentumStep) {
    PrototypeMemory<float> m(2, 2, 0.99);
    std::vector<float> zero{0, 0}, one{1, 1};
    m.ema_update(zero, 0);
    m.ema_update(one, 0);
    EXPECT_NEAR(m.row(0)[0], 0.01, 1e-7);
    EXPECT_NEAR(m.row(0)[1], 0.01, 1e-7);
}

TEST(EmaUpdate, Errors) {
    PrototypeMemory<float> m(2, 2, 0.9);
    std::vector<float> r{1, 1};
    EXPECT_THROW(m.ema_update(r, 2), ValueError);
    std::vector<float> bad{1, std::nanf("")};
    EXPECT_THROW(m.ema_update(bad, 0), ValueError);
    std::vector<float> inf{std::numeric_limits<float>::infinity(), 0};
    EXPECT_THROW(m.ema_update(inf, 0), ValueError);
    std::vector<float> wrong{1, 2, 3};
    EXPECT_THROW(m.ema_update(wrong, 0), ShapeError);
}

TEST(EmaUpdate, ClosedForm) {
    for (double mu : {0.9, 0.99, 0.999}) {
        for (int t : {1, 10, 100}) {
            PrototypeMemory<float> m(1, 3, mu);
            std::vector<float> m0{0.5f, -1.0f, 2.0f}, r{1.5f, 0.25f, -0.75f};
            m.ema_update(m0, 0);
            for (int i = 0; i < t; ++i) m.ema_update(r, 0);
            for (std::size_t c = 0; c < 3; ++c) {
                const double closed = r[c] + std::pow(mu, t) * (m0[c] - r[c]);
                EXPECT_NEAR(m.row(0)[c], closed, 1e-5) << "mu " << mu << " t " << t;
            }
        }
    }
}

TEST(EmaUpdate, TouchesExactlyOneRow) {
    Rng rng(1);
    PrototypeMemory<float> m(5, 4, 0.9);
    for (std::size_t k = 0; k < 5; ++k) m.ema_update(testutil::random({4}, rng), k);
    for (int step = 0; step < 20; ++step) {
        const std::size_t y = rng.below(5);
        const double before = checksum_except(m, y);
        m.ema_update(testutil::random({4}, rng), y);
        EXPECT_EQ(before, checksum_except(m, y));
    }
}

TEST(EmaUpdate, StationaryConvergenceBound) {
    const std::size_t c = 8, steps = 1000;
    const double mu = 0.99;
    Rng rng(2024);
    std::vector<double> rho(c);
    for (auto& v : rho) v = rng.uniform(-1, 1);
    PrototypeMemory<double> m(1, c, mu);
    std::vector<std::vector<double>> draws;
    for (std::size_t t = 0; t < steps; ++t) {
        std::vector<double> r(c);
        for (std::size_t i = 0; i < c; ++i) r[i] = rho[i] + rng.uniform(-0.5, 0.5);
        draws.push_back(r);
    }
    // m0 is the first draw (first-write rule); the remaining draws are EMA steps.
    double init_dev = 0;
    for (std::size_t i = 0; i < c; ++i) init_dev = std::max(init_dev, std::abs(draws[0][i] - rho[i]));
    for (const auto& r : draws) m.ema_update(r, 0);
    double sd = 0;
    for (std::size_t i = 0; i < c; ++i) {
        double mean = 0, var = 0;
        for (const auto& r : draws) mean += r[i];
        mean /= steps;
        for (const auto& r : draws) var += (r[i] - mean) * (r[i] - mean);
        sd = std::max(sd, std::sqrt(var / (steps - 1)));
    }
    const double n_eff = (1 + mu) / (1 - mu);
    const double bound = 3 * sd / std::sqrt(n_eff) + std::pow(mu, steps - 1) * init_dev;
    double dev = 0;
    for (std::size_t i = 0; i < c; ++i) dev = std::max(dev, std::abs(m.row(0)[i] - rho[i]));
    EXPECT_LE(dev, bound);
}

TEST(MixturePredictor, Examples) {
    ParamStore<float> ps;
    Rng rng(1);
    auto p = MixturePredictor<float>::create(ps, "p.", 3, 3, 3, rng);
    EXPECT_EQ(p.categories(), 3u);
    for (auto [_, t] : ps.entries()) std::fill(t.data().begin(), t.data().end(), 0.f);
    EXPECT_EQ(predict_logits(p, Tensor::from({3}, {1, 2, 3})).vec(), (std::vector<float>{0, 0, 0}));
    for (std::size_t i = 0; i < 3; ++i) {
        p.w1.data()[i * 3 + i] = 1;
        p.w2.data()[i * 3 + i] = 1;
    }
    EXPECT_EQ(predict_logits(p, Tensor::from({3}, {0.5f, 0, 2})).vec(), (std::vector<float>{0.5f, 0, 2}));
    EXPECT_THROW(predict_logits(p, Tensor::zeros({4})), ShapeError);
}

TEST(MixturePredictor, MatchesTwoMatmulOracle) {
    ParamStore<double> ps;
    Rng rng(4);
    auto p = MixturePredictor<double>::create(ps, "p.", 4, 5, 3, rng);
    for (auto [_, t] : ps.entries())
        for (auto& v : t.data()) v = rng.uniform(-1, 1);
    auto q = testutil::random<double>({4}, rng);
    auto a = predict_logits(p, q);
    for (std::size_t k = 0; k < 3; ++k) {
        double s = p.b2[k];
        for (std::size_t j = 0; j < 5; ++j) {
            double h = p.b1[j];
            for (std::size_t i = 0; i < 4; ++i) h += p.w1[j * 4 + i] * q[i];
            s += p.w2[k * 5 + j] * std::max(0.0, h);
        }
        EXPECT_NEAR(a[k], s, 1e-12);
    }
}

namespace {

PrototypeMemory<float> identity_memory() {
    PrototypeMemory<float> m(2, 2, 0.99);
    std::vector<float> e1{1, 0}, e2{0, 1};
    m.ema_update(e1, 0);
    m.ema_update(e2, 1);
    return m;
}

}  // namespace

TEST(SynthesizeGuidance, Examples) {
    auto m = identity_memory();
    auto u = synthesize_guidance(m, Tensor::from({2}, {0, 0}), GuidanceMode::kMixture);
    EXPECT_NEAR(u.v[0], 0.5, 1e-7);
    EXPECT_NEAR(u.v[1], 0.5, 1e-7);
    auto s = synthesize_guidance(m, Tensor::from({2}, {100, 0}), GuidanceMode::kMixture);
    EXPECT_NEAR(s.v[0], 1.0, 1e-6);
    EXPECT_NEAR(s.v[1], 0.0, 1e-6);
    auto h = synthesize_guidance(m, Tensor::from({2}, {std::log(2.0f), 0}), GuidanceMode::kMixture);
    EXPECT_NEAR(h.v[0], 2.0 / 3.0, 1e-6);
    EXPECT_NEAR(h.v[1], 1.0 / 3.0, 1e-6);
}

TEST(SynthesizeGuidance, NearestAndOracle) {
    auto m = identity_memory();
    auto n = synthesize_guidance(m, Tensor::from({2}, {0.1f, 0.3f}), GuidanceMode::kNearest);
    EXPECT_EQ(n.v.vec(), (std::vector<float>{0, 1}));
    auto tie = synthesize_guidance(m, Tensor::from({2}, {0.5f, 0.5f}), GuidanceMode::kNearest);
    EXPECT_EQ(tie.chosen, 0u);
    auto o = synthesize_guidance(m, Tensor::from({2}, {5, 0}), GuidanceMode::kOracle, 1);
    EXPECT_EQ(o.v.vec(), (std::vector<float>{0, 1}));
    EXPECT_THROW(synthesize_guidance(m, Tensor::from({2}, {0, 0}), GuidanceMode::kOracle), Error);
}

TEST(SynthesizeGuidance, UninitializedSlots) {
    PrototypeMemory<float> empty(3, 2, 0.9);
    EXPECT_THROW(synthesize_guidance(empty, Tensor::zeros({3}), GuidanceMode::kMixture), Error);
    PrototypeMemory<float> partial(3, 2, 0.9);
    std::vector<float> r{2, 4};
    partial.ema_update(r, 1);
    auto g = synthesize_guidance(partial, Tensor::from({3}, {9, 0, 9}), GuidanceMode::kMixture);
    EXPECT_EQ(g.v.vec(), r);
    EXPECT_EQ(g.weights[1], 1.0f);
    EXPECT_EQ(synthesize_guidance(partial, Tensor::from({3}, {9, 0, 9}), GuidanceMode::kNearest).chosen, 1u);
    EXPECT_THROW(synthesize_guidance(partial, Tensor::zeros({3}), GuidanceMode::kOracle, 0), Error);
}

TEST(SynthesizeGuidance, WeightsAreProbabilities) {
    Rng rng(6);
    PrototypeMemory<float> m(6, 3, 0.9);
    for (std::size_t k = 0; k < 6; ++k) m.ema_update(testutil::random({3}, rng), k);
    for (int t = 0; t < 50; ++t) {
        auto g = synthesize_guidance(m, testutil::random({6}, rng, -50, 50), GuidanceMode::kMixture);
        double s = 0;
        for (float w : g.weights.data()) {
            EXPECT_GE(w, 0.0f);
            s += w;
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(SynthesizeGuidance, EqualLogitsGivePrototypeMean) {
    Rng rng(7);
    PrototypeMemory<float> m(5, 4, 0.9);
    for (std::size_t k = 0; k < 5; ++k) m.ema_update(testutil::random({4}, rng), k);
    auto g = synthesize_guidance(m, Tensor::full({5}, 2.5f), GuidanceMode::kMixture);
    for (std::size_t c = 0; c < 4; ++c) {
        double mean = 0;
        for (std::size_t k = 0; k < 5; ++k) mean += m.row(k)[c];
        EXPECT_NEAR(g.v[c], mean / 5, 1e-6);
    }
}

TEST(SynthesizeGuidance, GradientReachesPredictorNotPrototypes) {
    Rng rng(8);
    ParamStore<float> ps;
    auto pred = MixturePredictor<float>::create(ps, "p.", 4, 4, 3, rng);
    PrototypeMemory<float> m(3, 4, 0.9);
    for (std::size_t k = 0; k < 3; ++k) m.ema_update(testutil::random({4}, rng), k);
    auto protos = m.as_tensor();
    auto q = testutil::random({4}, rng);
    auto g = synthesize_guidance(m, predict_logits(pred, q), GuidanceMode::kMixture);
    backward(dot_const(g.v, testutil::random_weights<float>(4, rng)));
    double total = 0;
    for (const auto& [_, t] : ps.entries())
        for (float v : t.grad()) total += std::abs(v);
    EXPECT_GT(total, 0.0);
    for (float v : protos.grad()) EXPECT_EQ(v, 0.0f);
    EXPECT_FALSE(protos.requires_grad());
}

TEST(ClassificationLoss, Examples) {
    EXPECT_NEAR(classification_loss(Tensor::from({2}, {0, 0}), 1).item(), std::log(2.0), 1e-6);
    EXPECT_NEAR(classification_loss(Tensor::from({2}, {1, 0}), 0).item(), std::log(1 + std::exp(-1.0)), 1e-6);
    EXPECT_NEAR(classification_loss(Tensor::from({2}, {1, 0}), 0).item(), 0.3133, 1e-4);
    const float sat = classification_loss(Tensor::from({3}, {50, 0, 0}), 0).item();
    EXPECT_LT(sat, 1e-6);
    EXPECT_TRUE(std::isfinite(sat));
    EXPECT_THROW(classification_loss(Tensor::from({2}, {0, 0}), 2), ValueError);
}

TEST(CombineBootstrap, Examples) {
    auto v = Tensor::from({2}, {1, 2});
    auto r = Tensor::from({2}, {3, 4});
    EXPECT_EQ(combine_bootstrap(v, &r, true).vec(), (std::vector<float>{4, 6}));
    EXPECT_EQ(combine_bootstrap(v, static_cast<const Tensor*>(nullptr), false).vec(), v.vec());
    auto neg = Tensor::from({2}, {-1, -2});
    EXPECT_EQ(combine_bootstrap(v, &neg, true).vec(), (std::vector<float>{0, 0}));
    EXPECT_THROW(combine_bootstrap(v, &r, false), Error);
}

TEST(MemorySnapshot, RoundTripIsBitExact) {
    Rng rng(9);
    PrototypeMemory<float> m(4, 3, 0.97);
    for (int t = 0; t < 10; ++t) m.ema_update(testutil::random({3}, rng), rng.below(3));
    const auto bytes = m.snapshot();
    auto back = PrototypeMemory<float>::restore(bytes);
    EXPECT_EQ(back.matrix(), m.matrix());
    EXPECT_EQ(back.momentum(), static_cast<double>(static_cast<float>(0.97)));
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(back.initialized(k), m.initialized(k));
    EXPECT_EQ(back.snapshot(), bytes);
}

TEST(MemorySnapshot, TruncatedRecordReportsOffset) {
    PrototypeMemory<float> m(2, 2, 0.9);
    auto bytes = m.snapshot();
    bytes.resize(bytes.size() - 7);
    try {
        PrototypeMemory<float>::restore(bytes);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos);
    }
}

TEST(MemorySnapshot, ReplayDeterminism) {
    auto run = [] {
        Rng rng(77);
        PrototypeMemory<float> m(3, 5, 0.99);
        for (int t = 0; t < 40; ++t) m.ema_update(testutil::random({5}, rng), rng.below(3));
        return m.snapshot();
    };
    EXPECT_EQ(run(), run());
}
