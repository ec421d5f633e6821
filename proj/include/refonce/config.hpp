#pragma once

#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "refonce/dataset.hpp"
#include "refonce/model.hpp"
#include "refonce/training.hpp"

namespace refonce {

class ConfigError : public Error {
   public:
    using Error::Error;
};

/// Flat key=value run configuration. `categories` and `input_size` apply to
/// both the generator and the model.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    GenConfig gen;
    std::uint64_t seed = 0;

    void set(const std::string& key, const std::string& value) {
        auto it = setters().find(key);
        if (it == setters().end()) throw ConfigError("unknown config key '" + key + "'");
        try {
            it->second(*this, value);
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            throw ConfigError("bad value '" + value + "' for config key '" + key + "'");
        }
    }

    /// Parses `key = value` lines; '#' starts a comment.
    void apply_text(const std::string& text, const std::string& origin = "config") {
        std::istringstream is(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
            const auto trim = [](std::string s) {
                const auto a = s.find_first_not_of(" \t\r");
                if (a == std::string::npos) return std::string();
                return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
            };
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
            set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
    }

    void apply_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw ConfigError("cannot read config file '" + path + "'");
        std::stringstream ss;
        ss << f.rdbuf();
        apply_text(ss.str(), path);
    }

    void validate() const {
        try {
            model.validate();
            train.validate();
            gen.validate();
        } catch (const Error& e) {
            throw ConfigError(e.what());
        }
    }

    /// Every key with its resolved value, sorted by key.
    std::string resolved() const {
        std::ostringstream os;
        os.precision(10);
        const auto b = [](bool v) { return v ? "true" : "false"; };
        std::map<std::string, std::string> kv;
        auto put = [&](const std::string& k, auto v) {
            std::ostringstream s;
            s.precision(10);
            s << v;
            kv[k] = s.str();
        };
        put("augment", b(train.augment));
        put("baa_iters_top", model.baa_iters_top);
        put("batch_size", train.batch_size);
        put("bootstrap", b(model.bootstrap));
        put("categories", model.categories);
        put("channels", model.channels);
        put("contrast_hi", gen.contrast_hi);
        put("contrast_lo", gen.contrast_lo);
        put("enc_width", model.enc_width);
        put("epochs", train.epochs);
        put("eval_each_epoch", b(train.eval_each_epoch));
        put("freeze_ref_encoder", b(model.freeze_ref_encoder));
        put("guidance_mode", guidance_mode_name(model.guidance_mode));
        put("grad_clip", train.grad_clip);
        put("holdout", gen.holdout);
        put("input_size", model.input_size);
        put("lambda_c", train.lambda_c);
        put("lr0", train.lr0);
        put("memory_momentum", model.momentum);
        put("momentum", train.momentum);
        put("one_way_baa", b(model.one_way_baa));
        put("predictor_hidden", model.hidden());
        put("refs_per_category", gen.refs_per_category);
        put("refs_per_query", train.refs_per_query);
        put("seed", seed);
        put("share_baa", b(model.share_baa));
        put("test_queries", gen.test_queries);
        put("texture_amplitude", gen.texture_amplitude);
        put("train_queries", gen.train_queries);
        put("use_reference", b(model.use_reference));
        put("warmup_steps", train.warmup_steps);
        put("weight_decay", train.weight_decay);
        for (const auto& [k, v] : kv) os << k << "=" << v << "\n";
        return os.str();
    }

   private:
    using Setter = std::function<void(RunConfig&, const std::string&)>;

    static std::size_t to_size(const std::string& v) {
        if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) throw ConfigError("not a count: " + v);
        return std::stoul(v);
    }
    static double to_double(const std::string& v) {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw ConfigError("not a number: " + v);
        return d;
    }
    static bool to_bool(const std::string& v) {
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw ConfigError("not a boolean: " + v);
    }

    static const std::map<std::string, Setter>& setters() {
        static const std::map<std::string, Setter> m = {
            {"augment", [](RunConfig& c, const std::string& v) { c.train.augment = to_bool(v); }},
            {"baa_iters_top", [](RunConfig& c, const std::string& v) { c.model.baa_iters_top = to_size(v); }},
            {"batch_size", [](RunConfig& c, const std::string& v) { c.train.batch_size = to_size(v); }},
            {"bootstrap", [](RunConfig& c, const std::string& v) { c.model.bootstrap = to_bool(v); }},
            {"categories", [](RunConfig& c, const std::string& v) { c.model.categories = c.gen.categories = to_size(v); }},
            {"channels", [](RunConfig& c, const std::string& v) { c.model.channels = to_size(v); }},
            {"contrast_hi", [](RunConfig& c, const std::string& v) { c.gen.contrast_hi = to_double(v); }},
            {"contrast_lo", [](RunConfig& c, const std::string& v) { c.gen.contrast_lo = to_double(v); }},
            {"enc_width", [](RunConfig& c, const std::string& v) { c.model.enc_width = to_size(v); }},
            {"epochs", [](RunConfig& c, const std::string& v) { c.train.epochs = to_size(v); }},
            {"eval_each_epoch", [](RunConfig& c, const std::string& v) { c.train.eval_each_epoch = to_bool(v); }},
            {"freeze_ref_encoder", [](RunConfig& c, const std::string& v) { c.model.freeze_ref_encoder = to_bool(v); }},
            {"guidance_mode", [](RunConfig& c, const std::string& v) { c.model.guidance_mode = parse_guidance_mode(v); }},
            {"grad_clip", [](RunConfig& c, const std::string& v) { c.train.grad_clip = to_double(v); }},
            {"holdout", [](RunConfig& c, const std::string& v) { c.gen.holdout = to_size(v); }},
            {"input_size", [](RunConfig& c, const std::string& v) { c.model.input_size = c.gen.size = to_size(v); }},
            {"lambda_c", [](RunConfig& c, const std::string& v) { c.train.lambda_c = to_double(v); }},
            {"lr0", [](RunConfig& c, const std::string& v) { c.train.lr0 = to_double(v); }},
            {"memory_momentum", [](RunConfig& c, const std::string& v) { c.model.momentum = to_double(v); }},
            {"momentum", [](RunConfig& c, const std::string& v) { c.train.momentum = to_double(v); }},
            {"one_way_baa", [](RunConfig& c, const std::string& v) { c.model.one_way_baa = to_bool(v); }},
            {"predictor_hidden", [](RunConfig& c, const std::string& v) { c.model.predictor_hidden = to_size(v); }},
            {"refs_per_category", [](RunConfig& c, const std::string& v) { c.gen.refs_per_category = to_size(v); }},
            {"refs_per_query", [](RunConfig& c, const std::string& v) { c.train.refs_per_query = to_size(v); }},
            {"seed", [](RunConfig& c, const std::string& v) { c.seed = c.train.seed = to_size(v); }},
            {"share_baa", [](RunConfig& c, const std::string& v) { c.model.share_baa = to_bool(v); }},
            {"test_queries", [](RunConfig& c, const std::string& v) { c.gen.test_queries = to_size(v); }},
            {"texture_amplitude", [](RunConfig& c, const std::string& v) { c.gen.texture_amplitude = to_double(v); }},
            {"train_queries", [](RunConfig& c, const std::string& v) { c.gen.train_queries = to_size(v); }},
            {"use_reference", [](RunConfig& c, const std::string& v) { c.model.use_reference = to_bool(v); }},
            {"warmup_steps", [](RunConfig& c, const std::string& v) { c.train.warmup_steps = to_size(v); }},
            {"weight_decay", [](RunConfig& c, const std::string& v) { c.train.weight_decay = to_double(v); }},
        };
        return m;
    }
};

}  // namespace refonce
