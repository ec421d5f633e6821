#pragma once

#include <memory>
#include <string>
#include <vector>

#include "refonce/container.hpp"
#include "refonce/model.hpp"
#include "refonce/training.hpp"

namespace refonce {

struct Checkpoint {
    std::unique_ptr<Model<float>> model;
    SgdState<float> optimizer;
    std::vector<bool> trained_categories;  // K flags
    std::string train_config;              // informational echo
};

/// Entries: "config", "param.*", "optim.*", "memory.*" (guided models only),
/// "trained_categories" and "train_config".
inline Container checkpoint_container(const Model<float>& model, const SgdState<float>& optimizer,
                                      const std::vector<std::size_t>& trained, const std::string& train_config = "") {
    Container c;
    c.add_text("config", model.config().echo());
    for (const auto& [name, t] : model.params().entries()) c.add_f32("param." + name, t.shape(), t.data());
    for (const auto& [name, buf] : optimizer.buffers) {
        c.add_f32("optim." + name, model.params().get(name).shape(), buf);
    }
    if (model.guided()) model.memory().write_to(c, "memory.");
    std::vector<float> flags(model.config().categories, 0.0f);
    for (auto k : trained) {
        if (k >= flags.size()) throw ValueError("trained category out of range");
        flags[k] = 1.0f;
    }
    c.add_f32("trained_categories", {flags.size()}, flags);
    c.add_text("train_config", train_config);
    return c;
}

inline void save_checkpoint(const std::string& path, const Model<float>& model, const SgdState<float>& optimizer,
                            const std::vector<std::size_t>& trained, const std::string& train_config = "") {
    checkpoint_container(model, optimizer, trained, train_config).save(path);
}

inline Checkpoint checkpoint_from_container(const Container& c) {
    Checkpoint ck;
    const auto cfg = ModelConfig::from_echo(c.text("config"));
    ck.model = std::make_unique<Model<float>>(cfg, 0);
    auto& params = ck.model->params();
    std::size_t seen = 0;
    for (const auto& e : c.entries()) {
        if (e.name.rfind("param.", 0) != 0) continue;
        const std::string name = e.name.substr(6);
        if (!params.contains(name)) throw Error("checkpoint parameter '" + name + "' does not exist in the configured model");
        auto t = params.get(name);
        if (e.dims != t.shape()) {
            throw Error("checkpoint parameter '" + name + "' has shape " + shape_str(e.dims) + ", model expects " +
                        shape_str(t.shape()));
        }
        std::copy(e.f32.begin(), e.f32.end(), t.node()->data.begin());
        ++seen;
    }
    if (seen != params.size()) {
        throw Error("checkpoint holds " + std::to_string(seen) + " parameters, model has " + std::to_string(params.size()));
    }
    for (const auto& e : c.entries()) {
        if (e.name.rfind("optim.", 0) != 0) continue;
        const std::string name = e.name.substr(6);
        if (!params.contains(name) || params.get(name).numel() != e.f32.size())
            throw Error("optimizer buffer '" + name + "' does not match any parameter");
        ck.optimizer.buffers[name] = e.f32;
    }
    if (cfg.use_reference) {
        auto mem = PrototypeMemory<float>::read_from(c, "memory.");
        if (mem.categories() != cfg.categories || mem.channels() != cfg.channels)
            throw Error("checkpoint memory shape does not match its config echo");
        ck.model->set_memory(std::move(mem));
    }
    const auto& flags = c.f32("trained_categories");
    if (flags.size() != cfg.categories) throw Error("trained_categories length does not match K");
    for (float f : flags) ck.trained_categories.push_back(f != 0.0f);
    if (c.contains("train_config")) ck.train_config = c.text("train_config");
    return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) { return checkpoint_from_container(Container::load(path)); }

/// The dataset's category count must equal the checkpoint's K.
inline void check_categories(const ModelConfig& cfg, std::size_t dataset_categories) {
    if (cfg.categories != dataset_categories) {
        throw Error("config echo mismatch: checkpoint has K=" + std::to_string(cfg.categories) + ", dataset has K=" +
                    std::to_string(dataset_categories));
    }
}

}  // namespace refonce
