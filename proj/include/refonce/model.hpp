#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "refonce/baa.hpp"
#include "refonce/ops.hpp"
#include "refonce/params.hpp"
#include "refonce/proto_memory.hpp"

namespace refonce {

struct ModelConfig {
    std::size_t channels = 64;         // common projected width C
    std::size_t categories = 8;        // K
    std::size_t input_size = 64;       // square side, divisible by 32
    std::size_t enc_width = 16;        // first-stage encoder width
    std::size_t predictor_hidden = 0;  // 0 -> C
    std::size_t baa_iters_top = 3;
    bool share_baa = false;
    bool one_way_baa = false;
    bool use_reference = true;         // false: no-reference baseline
    bool freeze_ref_encoder = false;
    bool bootstrap = true;             // train with v + r
    bool neutral_guidance = false;     // test hook: guidance never touches the segmentation path
    double momentum = 0.99;            // prototype EMA momentum
    GuidanceMode guidance_mode = GuidanceMode::kMixture;

    std::size_t hidden() const { return predictor_hidden ? predictor_hidden : channels; }

    void validate() const {
        if (input_size == 0 || input_size % 32 != 0) {
            throw ValueError("input_size must be a positive multiple of 32, got " + std::to_string(input_size));
        }
        if (channels == 0 || enc_width == 0) throw ValueError("channel widths must be positive");
        if (categories < 1) throw ValueError("at least one category is required");
        if (baa_iters_top == 0) throw ValueError("baa_iters_top must be at least 1");
        if (!(momentum > 0.0 && momentum < 1.0)) throw ValueError("momentum must lie strictly inside (0, 1)");
    }

    /// Architecture-defining fields, used as the checkpoint config echo.
    std::string echo() const {
        std::ostringstream os;
        os << "channels=" << channels << "\ncategories=" << categories << "\ninput_size=" << input_size
           << "\nenc_width=" << enc_width << "\npredictor_hidden=" << hidden() << "\nbaa_iters_top=" << baa_iters_top
           << "\nshare_baa=" << share_baa << "\none_way_baa=" << one_way_baa << "\nuse_reference=" << use_reference
           << "\nfreeze_ref_encoder=" << freeze_ref_encoder << "\nbootstrap=" << bootstrap
           << "\nmomentum=" << momentum << "\nguidance_mode=" << guidance_mode_name(guidance_mode) << "\n";
        return os.str();
    }

    static ModelConfig from_echo(const std::string& text) {
        std::map<std::string, std::string> kv;
        std::istringstream is(text);
        std::string line;
        while (std::getline(is, line)) {
            const auto eq = line.find('=');
            if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
        }
        auto get = [&](const char* key) -> const std::string& {
            auto it = kv.find(key);
            if (it == kv.end()) throw Error(std::string("config echo lacks '") + key + "'");
            return it->second;
        };
        ModelConfig c;
        c.channels = std::stoul(get("channels"));
        c.categories = std::stoul(get("categories"));
        c.input_size = std::stoul(get("input_size"));
        c.enc_width = std::stoul(get("enc_width"));
        c.predictor_hidden = std::stoul(get("predictor_hidden"));
        c.baa_iters_top = std::stoul(get("baa_iters_top"));
        c.share_baa = get("share_baa") == "1";
        c.one_way_baa = get("one_way_baa") == "1";
        c.use_reference = get("use_reference") == "1";
        c.freeze_ref_encoder = get("freeze_ref_encoder") == "1";
        c.bootstrap = get("bootstrap") == "1";
        c.momentum = std::stod(get("momentum"));
        c.guidance_mode = parse_guidance_mode(get("guidance_mode"));
        return c;
    }
};

/// Query features X1..X4 at strides 4, 8, 16, 32, each projected to C channels.
template <typename T>
using StageFeatures = std::vector<TensorT<T>>;

/// Five stride-2 3x3 conv stages (two for the first output) with ReLU,
/// followed by 1x1 projections to the common width.
template <typename T>
struct Encoder {
    std::vector<TensorT<T>> conv_w, conv_b, proj_w, proj_b;

    static Encoder create(ParamStore<T>& params, const std::string& prefix, std::size_t width, std::size_t channels,
                          bool project_all, Rng& rng) {
        Encoder e;
        const std::size_t widths[6] = {3, width, width, 2 * width, 4 * width, 4 * width};
        for (std::size_t i = 0; i < 5; ++i) {
            const std::string n = prefix + "conv" + std::to_string(i + 1) + ".";
            e.conv_w.push_back(params.normal(n + "w", {widths[i + 1], widths[i], 3, 3}, widths[i] * 9, rng));
            e.conv_b.push_back(params.zeros(n + "b", {widths[i + 1]}));
        }
        // conv1 bias starts at -0.5 * sum(w), i.e. centred pixels for [0, 1] input.
        {
            auto w = e.conv_w[0].data();
            auto b = e.conv_b[0].data();
            const std::size_t per = w.size() / b.size();
            for (std::size_t o = 0; o < b.size(); ++o) {
                double sum = 0;
                for (std::size_t j = 0; j < per; ++j) sum += static_cast<double>(w[o * per + j]);
                b[o] = static_cast<T>(-0.5 * sum);
            }
        }
        for (std::size_t s = project_all ? 0 : 3; s < 4; ++s) {
            const std::size_t in = widths[s + 2];
            const std::string n = prefix + "proj" + std::to_string(s + 1) + ".";
            e.proj_w.push_back(params.normal(n + "w", {channels, in, 1, 1}, in, rng, 1.0));
            e.proj_b.push_back(params.zeros(n + "b", {channels}));
        }
        return e;
    }

    /// Projected stage maps; only X4 when the encoder was built without the
    /// lower projections.
    StageFeatures<T> operator()(const TensorT<T>& image) const {
        auto h = relu(conv2d(image, conv_w[0], conv_b[0], 2));
        std::vector<TensorT<T>> raw;
        for (std::size_t i = 1; i < 5; ++i) {
            h = relu(conv2d(h, conv_w[i], conv_b[i], 2));
            raw.push_back(h);
        }
        StageFeatures<T> out;
        const std::size_t first = 4 - proj_w.size();
        for (std::size_t s = first; s < 4; ++s)
            out.push_back(conv2d(raw[s], proj_w[s - first], proj_b[s - first], 1));
        return out;
    }
};

/// Top-down decoder: conv on [X4, seed], then three rounds of
/// upsample + lateral 1x1 + conv, a 1-channel head at stride 4 and two final
/// 2x upsamplings to input resolution.
template <typename T>
struct Decoder {
    TensorT<T> top_w, top_b, head_w, head_b;
    std::vector<TensorT<T>> lat_w, lat_b, conv_w, conv_b;  // index 0 -> X3, 1 -> X2, 2 -> X1

    static Decoder create(ParamStore<T>& params, const std::string& prefix, std::size_t channels, Rng& rng) {
        Decoder d;
        const std::size_t dw = channels;
        d.top_w = params.normal(prefix + "top.w", {dw, channels + 1, 3, 3}, (channels + 1) * 9, rng);
        d.top_b = params.zeros(prefix + "top.b", {dw});
        for (int s = 3; s >= 1; --s) {
            const std::string n = prefix + "x" + std::to_string(s) + ".";
            d.lat_w.push_back(params.normal(n + "lat.w", {dw, channels, 1, 1}, channels, rng, 1.0));
            d.lat_b.push_back(params.zeros(n + "lat.b", {dw}));
            d.conv_w.push_back(params.normal(n + "conv.w", {dw, dw, 3, 3}, dw * 9, rng));
            d.conv_b.push_back(params.zeros(n + "conv.b", {dw}));
        }
        d.head_w = params.normal(prefix + "head.w", {1, dw, 3, 3}, dw * 9, rng, 1.0);
        d.head_b = params.zeros(prefix + "head.b", {1});
        return d;
    }

    std::vector<TensorT<T>> tensors() const {
        std::vector<TensorT<T>> t{top_w, top_b};
        for (std::size_t i = 0; i < 3; ++i) t.insert(t.end(), {lat_w[i], lat_b[i], conv_w[i], conv_b[i]});
        t.insert(t.end(), {head_w, head_b});
        return t;
    }

    static Decoder from_tensors(const std::vector<TensorT<T>>& t, std::size_t offset = 0) {
        if (t.size() < offset + 16) throw ValueError("Decoder::from_tensors: not enough tensors");
        Decoder d;
        auto at = [&](std::size_t i) { return t[offset + i]; };
        d.top_w = at(0);
        d.top_b = at(1);
        for (std::size_t i = 0; i < 3; ++i) {
            d.lat_w.push_back(at(2 + 4 * i));
            d.lat_b.push_back(at(3 + 4 * i));
            d.conv_w.push_back(at(4 + 4 * i));
            d.conv_b.push_back(at(5 + 4 * i));
        }
        d.head_w = at(14);
        d.head_b = at(15);
        return d;
    }

    TensorT<T> operator()(const StageFeatures<T>& stages, const TensorT<T>& seed) const {
        if (stages.size() != 4) throw ShapeError("decoder expects 4 stages");
        auto h = relu(conv2d(concat_channels(stages[3], seed), top_w, top_b, 1));
        for (std::size_t i = 0; i < 3; ++i) {
            const auto& lateral = stages[2 - i];
            h = add(upsample_bilinear_2x(h), conv2d(lateral, lat_w[i], lat_b[i], 1));
            h = relu(conv2d(h, conv_w[i], conv_b[i], 1));
        }
        return upsample_bilinear_2x(upsample_bilinear_2x(conv2d(h, head_w, head_b, 1)));
    }
};

template <typename T>
struct TrainForward {
    TensorT<T> logits;    // 1 x S x S raw
    TensorT<T> a;         // K logits (undefined for the baseline)
    TensorT<T> guidance;  // guidance entering the alignment (v + r, v, or r)
    bool fallback = false;
};

template <typename T>
struct InferForward {
    TensorT<T> mask_prob;  // 1 x S x S in [0, 1]
    TensorT<T> weights;    // K mixture weights (undefined for the baseline)
    std::size_t chosen = 0;
};

struct ModelCounters {
    std::size_t ref_encoder_calls = 0;
    std::size_t memory_reads = 0;
    double feature_checksum = 0;  // sum of the last encoded query features
};

template <typename T>
class Model {
   public:
    // Independent init streams so guided and baseline models share
    // encoder/decoder weights for a given seed.
    enum Stream : std::uint64_t { kEncoderStream = 1, kDecoderStream, kRefStream, kPredictorStream, kBaaStream };

    Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        auto enc_rng = Rng::derive(seed, kEncoderStream);
        encoder_ = Encoder<T>::create(params_, "encoder.", cfg_.enc_width, cfg_.channels, true, enc_rng);
        auto dec_rng = Rng::derive(seed, kDecoderStream);
        decoder_ = Decoder<T>::create(params_, "decoder.", cfg_.channels, dec_rng);
        if (cfg_.use_reference) {
            auto ref_rng = Rng::derive(seed, kRefStream);
            ref_encoder_ = Encoder<T>::create(params_, "ref_encoder.", cfg_.enc_width, cfg_.channels, false, ref_rng);
            auto pred_rng = Rng::derive(seed, kPredictorStream);
            predictor_ = MixturePredictor<T>::create(params_, "predictor.", cfg_.channels, cfg_.hidden(),
                                                     cfg_.categories, pred_rng);
            auto baa_rng = Rng::derive(seed, kBaaStream);
            baa_ = BaaStack<T>(params_, "baa.", cfg_.channels, cfg_.baa_iters_top, cfg_.share_baa, baa_rng);
            memory_.emplace(cfg_.categories, cfg_.channels, cfg_.momentum);
        }
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }
    bool guided() const { return cfg_.use_reference; }

    PrototypeMemory<T>& memory() {
        if (!memory_) throw Error("the no-reference baseline has no prototype memory");
        return *memory_;
    }
    const PrototypeMemory<T>& memory() const {
        if (!memory_) throw Error("the no-reference baseline has no prototype memory");
        return *memory_;
    }
    void set_memory(PrototypeMemory<T> mem) { memory_ = std::move(mem); }

    const MixturePredictor<T>& predictor() const { return predictor_; }
    const BaaStack<T>& baa() const { return baa_; }
    const ModelCounters& counters() const { return counters_; }
    void reset_counters() { counters_ = {}; }
    /// Records the stage of every alignment application until cleared with nullptr.
    void set_trace(BaaTrace* trace) { trace_ = trace; }

    /// Parameters the optimizer updates; a frozen reference encoder is excluded.
    std::vector<typename ParamStore<T>::Entry> trainable() const {
        std::vector<typename ParamStore<T>::Entry> out;
        for (const auto& e : params_.entries()) {
            if (cfg_.freeze_ref_encoder && e.first.rfind("ref_encoder.", 0) == 0) continue;
            out.push_back(e);
        }
        return out;
    }

    void check_image(const TensorT<T>& image) const {
        const std::size_t s = cfg_.input_size;
        if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != s || image.dim(2) != s) {
            throw ShapeError("expected a 3x" + std::to_string(s) + "x" + std::to_string(s) + " image, got " +
                             shape_str(image.shape()));
        }
    }

    StageFeatures<T> encode_query(const TensorT<T>& image) const {
        check_image(image);
        auto stages = encoder_(image);
        double sum = 0;
        for (const auto& s : stages)
            for (T v : s.data()) sum += static_cast<double>(v);
        counters_.feature_checksum = sum;
        return stages;
    }

    /// Masked, pooled top-stage features of a reference image.
    TensorT<T> encode_reference(const TensorT<T>& image, const TensorT<T>& fg_mask) const {
        if (!cfg_.use_reference) throw Error("the no-reference baseline has no reference encoder");
        check_image(image);
        if (fg_mask.rank() != 3 || fg_mask.dim(0) != 1 || fg_mask.dim(1) != image.dim(1) || fg_mask.dim(2) != image.dim(2)) {
            throw ShapeError("reference mask " + shape_str(fg_mask.shape()) + " does not match image " +
                             shape_str(image.shape()));
        }
        ++counters_.ref_encoder_calls;
        const auto x4 = ref_encoder_(image)[0];
        const auto mask = avg_pool(fg_mask, image.dim(1) / x4.dim(1));
        return global_average_pool(mul_spatial(x4, mask));
    }

    static TensorT<T> query_descriptor(const StageFeatures<T>& stages) { return global_average_pool(stages.at(3)); }

    static TensorT<T> relevance_seed(const TensorT<T>& x4, const TensorT<T>& v) { return cosine_map(x4, v, T(1e-6)); }

    TensorT<T> decode_mask(const StageFeatures<T>& stages, const TensorT<T>& seed) const { return decoder_(stages, seed); }

    TensorT<T> predict(const TensorT<T>& q) const { return predict_logits(predictor_, q); }

    /// Training path. `reference` is the averaged reference vector of the
    /// query's category (ignored by the baseline). With no initialized memory
    /// slot the guidance falls back to the reference alone.
    TrainForward<T> forward_train(const TensorT<T>& image, const TensorT<T>& reference, std::size_t category) {
        TrainForward<T> out;
        auto stages = encode_query(image);
        if (!cfg_.use_reference) {
            out.logits = decode_mask(stages, baseline_seed(stages));
            return out;
        }
        if (!reference.defined()) throw Error("guided training requires a reference vector");
        if (category >= cfg_.categories) throw ValueError("category out of range");
        out.a = predict(query_descriptor(stages));
        if (memory_->any_initialized()) {
            ++counters_.memory_reads;
            auto g = synthesize_guidance(*memory_, out.a, GuidanceMode::kMixture);
            out.guidance = cfg_.bootstrap ? combine_bootstrap(g.v, &reference, true) : g.v;
        } else {
            out.guidance = reference;
            out.fallback = true;
        }
        out.logits = guided_decode(stages, out.guidance);
        return out;
    }

    /// Reference-free inference. Supplying a reference is an error; oracle
    /// guidance needs labels and is only available through forward_eval.
    InferForward<T> forward_infer(const TensorT<T>& image, const TensorT<T>* reference = nullptr) const {
        if (reference) combine_bootstrap(TensorT<T>(), reference, false);
        if (cfg_.guidance_mode == GuidanceMode::kOracle) {
            throw Error("oracle guidance needs ground-truth labels and is not available at inference");
        }
        return forward_eval(image, cfg_.guidance_mode, std::nullopt);
    }

    /// Inference with an explicit guidance mode; oracle mode takes the
    /// ground-truth category.
    InferForward<T> forward_eval(const TensorT<T>& image, GuidanceMode mode, std::optional<std::size_t> category) const {
        NoGradGuard no_grad;
        InferForward<T> out;
        auto stages = encode_query(image);
        TensorT<T> logits;
        if (!cfg_.use_reference) {
            logits = decode_mask(stages, baseline_seed(stages));
        } else {
            const auto a = predict(query_descriptor(stages));
            ++counters_.memory_reads;
            auto g = synthesize_guidance(*memory_, a, mode, category);
            out.weights = g.weights;
            out.chosen = g.chosen;
            logits = guided_decode(stages, g.v);
        }
        out.mask_prob = sigmoid(logits);
        return out;
    }

   private:
    TensorT<T> baseline_seed(const StageFeatures<T>& stages) const {
        return TensorT<T>::zeros({1, stages[3].dim(1), stages[3].dim(2)});
    }

    TensorT<T> guided_decode(const StageFeatures<T>& stages, const TensorT<T>& v) const {
        if (cfg_.neutral_guidance) return decode_mask(stages, baseline_seed(stages));
        BaaOptions opts;
        opts.one_way = cfg_.one_way_baa;
        auto ms = multi_scale_guidance(stages, v, baa_, opts, trace_);
        StageFeatures<T> refined(ms.stages.begin(), ms.stages.end());
        return decode_mask(refined, relevance_seed(refined[3], ms.v));
    }

    ModelConfig cfg_;
    ParamStore<T> params_;
    Encoder<T> encoder_, ref_encoder_;
    Decoder<T> decoder_;
    MixturePredictor<T> predictor_;
    BaaStack<T> baa_;
    std::optional<PrototypeMemory<T>> memory_;
    mutable ModelCounters counters_;
    BaaTrace* trace_ = nullptr;
};

}  // namespace refonce
