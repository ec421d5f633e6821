// refonce: dataset generation, training, evaluation, inference and memory
// inspection for the reference-free camouflaged object segmenter.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "refonce/checkpoint.hpp"
#include "refonce/config.hpp"
#include "refonce/dataset.hpp"
#include "refonce/report.hpp"
#include "refonce/training.hpp"
#include "tree_hash.hpp"

namespace fs = std::filesystem;
using namespace refonce;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 2;
constexpr int kNumeric = 3;

struct ConfigFlags {
    std::string config_file;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config_file, "key=value config file")->check(CLI::ExistingFile);
        cmd->add_option("--set", overrides, "override one config key (key=value), repeatable");
        cmd->add_option("--seed", seed, "random seed (overrides the config file)");
    }

    RunConfig resolve() const {
        RunConfig rc;
        if (!config_file.empty()) rc.apply_file(config_file);
        for (const auto& kv : overrides) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
            rc.set(kv.substr(0, eq), kv.substr(eq + 1));
        }
        if (seed) rc.set("seed", std::to_string(*seed));
        return rc;
    }
};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write '" + path.string() + "'");
    f << text;
}

std::vector<std::size_t> test_queries(const Dataset& ds) { return ds.select(Split::kTest, Role::kQuery); }

void check_dataset(const ModelConfig& cfg, const Dataset& ds) {
    check_categories(cfg, ds.categories());
    if (cfg.input_size != ds.size) {
        throw ConfigError("model input_size " + std::to_string(cfg.input_size) + " does not match dataset images of side " +
                          std::to_string(ds.size));
    }
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const ConfigFlags& flags, const std::string& out) {
    const auto rc = flags.resolve();
    rc.gen.validate();
    const auto records = generate_synthetic_dataset(rc.gen, rc.seed, out);
    std::cout << "wrote " << records.size() << " records to " << out << "\n";
    std::cout << "sha256 " << tools::tree_sha256(out) << "\n";
    return kOk;
}

struct TrainFlags {
    std::string data, out, guidance_mode;
    bool no_ref = false, one_way = false, share = false;
};

int cmd_train(const ConfigFlags& flags, const TrainFlags& tf) {
    auto rc = flags.resolve();
    if (tf.no_ref) rc.model.use_reference = false;
    if (tf.one_way) rc.model.one_way_baa = true;
    if (tf.share) rc.model.share_baa = true;
    if (!tf.guidance_mode.empty()) rc.set("guidance_mode", tf.guidance_mode);
    rc.validate();
    const auto ds = load_dataset(tf.data);
    check_dataset(rc.model, ds);

    fs::create_directories(tf.out);
    const std::string resolved = rc.resolved();
    std::cout << "resolved config:\n" << resolved;
    write_text(fs::path(tf.out) / "config.txt", resolved);

    Model<float> model(rc.model, rc.seed);
    std::ofstream step_log(fs::path(tf.out) / "train_log.tsv", std::ios::trunc);
    std::ofstream eval_log(fs::path(tf.out) / "eval_log.tsv", std::ios::trunc);
    const auto res = train_loop(model, ds, rc.train, {&step_log, &eval_log});
    const auto ckpt = (fs::path(tf.out) / "checkpoint.rfo").string();
    save_checkpoint(ckpt, model, res.optimizer, res.trained_categories, resolved);
    std::cout << "trained " << res.steps << " steps";
    if (!res.losses.empty()) std::printf(", final loss %.6f", res.losses.back());
    std::cout << "\ncheckpoint " << ckpt << "\n";
    return kOk;
}

struct EvalFlags {
    std::string data, ckpt, report, pred_dir, masks_out, guidance_mode;
};

std::string mode_rows(const Model<float>& model, const Dataset& ds) {
    const auto seen = ds.seen_categories();
    std::vector<std::size_t> seen_idx, unseen_idx;
    for (auto i : test_queries(ds)) (seen.count(ds.records[i].category) ? seen_idx : unseen_idx).push_back(i);
    std::string out = "mode\tsubset\tn\ts_m\talpha_e\tw_f\tmae\n";
    auto row = [&](GuidanceMode m, const char* subset, const std::vector<std::size_t>& idx) {
        if (idx.empty()) return;
        const auto r = evaluate_model(model, ds, idx, m);
        char buf[200];
        std::snprintf(buf, sizeof buf, "%s\t%s\t%zu\t%.12f\t%.12f\t%.12f\t%.12f\n", guidance_mode_name(m), subset, r.n,
                      r.s_measure, r.adaptive_e, r.weighted_f, r.mae);
        out += buf;
    };
    // Held-out categories never reach the memory, so oracle rows cover seen categories only.
    for (auto m : {GuidanceMode::kOracle, GuidanceMode::kMixture, GuidanceMode::kNearest}) row(m, "seen", seen_idx);
    for (auto m : {GuidanceMode::kMixture, GuidanceMode::kNearest}) row(m, "unseen", unseen_idx);
    return out;
}

int cmd_eval(const EvalFlags& ef) {
    const auto ds = load_dataset(ef.data);
    std::vector<std::string> stems;
    for (auto i : test_queries(ds)) stems.push_back(ds.records[i].id);
    const auto gt_dir = (fs::path(ef.data) / "masks").string();
    std::string pred_dir = ef.pred_dir;
    std::string modes;

    if (pred_dir.empty()) {
        if (ef.ckpt.empty()) throw ConfigError("eval needs --ckpt unless --pred-dir is given");
        auto ck = load_checkpoint(ef.ckpt);
        const auto& model = *ck.model;
        check_dataset(model.config(), ds);
        GuidanceMode mode = model.config().guidance_mode;
        if (!ef.guidance_mode.empty()) mode = parse_guidance_mode(ef.guidance_mode);
        pred_dir = ef.masks_out.empty() ? (fs::path(ef.report).parent_path() / "pred_masks").string() : ef.masks_out;
        if (pred_dir.empty()) pred_dir = "pred_masks";
        fs::create_directories(pred_dir);
        for (auto i : test_queries(ds)) {
            const auto& rec = ds.records[i];
            const auto out = model.forward_eval(ds.images[i], mode,
                                                mode == GuidanceMode::kOracle ? std::optional<std::size_t>(rec.category)
                                                                              : std::nullopt);
            write_pnm((fs::path(pred_dir) / (rec.id + ".pgm")).string(), tensor_to_image(out.mask_prob));
        }
        if (model.guided()) modes = mode_rows(model, ds);
    }

    const auto report = evaluate_dataset(pred_dir, gt_dir, stems);
    const auto report_path = fs::path(ef.report);
    if (report_path.has_parent_path()) fs::create_directories(report_path.parent_path());
    write_text(report_path, report_tsv(report));
    std::printf("MEAN over %zu samples: s_m %.6f alpha_e %.6f w_f %.6f mae %.6f\n", report.n, report.s_measure,
                report.adaptive_e, report.weighted_f, report.mae);
    if (!modes.empty()) {
        auto modes_path = report_path;
        modes_path.replace_filename(report_path.stem().string() + "_modes.tsv");
        write_text(modes_path, modes);
        std::cout << "guidance modes:\n" << modes;
    }
    return kOk;
}

struct InferFlags {
    std::string image, ckpt, out_mask, reference, guidance_mode;
};

int cmd_infer(const InferFlags& inf) {
    if (!inf.reference.empty()) {
        throw ConfigError("inference is reference-free: --reference is not accepted");
    }
    auto ck = load_checkpoint(inf.ckpt);
    auto& model = *ck.model;
    GuidanceMode mode = model.config().guidance_mode;
    if (!inf.guidance_mode.empty()) mode = parse_guidance_mode(inf.guidance_mode);
    if (mode == GuidanceMode::kOracle) throw ConfigError("oracle guidance needs ground-truth labels and is refused at inference");
    const auto img = read_pnm(inf.image);
    if (img.channels != 3) throw ConfigError("input image must be a P6 color image");
    if (img.height != model.config().input_size || img.width != model.config().input_size) {
        throw ConfigError("input image is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                          ", checkpoint expects " + std::to_string(model.config().input_size) + " square");
    }
    const auto out = model.forward_eval(image_to_tensor<float>(img), mode, std::nullopt);
    write_pnm(inf.out_mask, tensor_to_image(out.mask_prob));
    std::cout << "mask " << inf.out_mask << " (" << img.width << "x" << img.height << ")\n";
    if (!model.guided()) {
        std::cout << "no mixture weights: baseline checkpoint\n";
        return kOk;
    }
    const auto w = out.weights.vec();
    std::vector<std::size_t> order(w.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return w[a] > w[b]; });
    const auto& names = model.memory().names();
    for (std::size_t i = 0; i < std::min<std::size_t>(3, order.size()); ++i)
        std::printf("top%zu\t%s\t%.6f\n", i + 1, names[order[i]].c_str(), static_cast<double>(w[order[i]]));
    return kOk;
}

int cmd_inspect_memory(const std::string& ckpt_path) {
    const auto container = Container::load(ckpt_path);
    if (!container.contains("memory.prototypes")) {
        throw ConfigError("checkpoint '" + ckpt_path +
                          "' has no prototype memory; it was trained with --no-ref-baseline, which disables the memory");
    }
    const auto mem = PrototypeMemory<float>::read_from(container, "memory.");
    const std::size_t k = mem.categories(), c = mem.channels();
    std::vector<double> norms(k);
    std::printf("categories %zu  channels %zu  momentum %.6g\n", k, c, mem.momentum());
    std::printf("slot\tname\tinitialized\tnorm\n");
    for (std::size_t i = 0; i < k; ++i) {
        double s = 0;
        for (float v : mem.row(i)) s += static_cast<double>(v) * v;
        norms[i] = std::sqrt(s);
        std::printf("%zu\t%s\t%s\t%.6f\n", i, mem.names()[i].c_str(), mem.initialized(i) ? "true" : "false", norms[i]);
    }
    // Zero rows have no direction: their diagonal is reported as 1 and off-diagonals as 0.
    std::printf("cosine");
    for (std::size_t j = 0; j < k; ++j) std::printf("\t%zu", j);
    std::printf("\n");
    for (std::size_t i = 0; i < k; ++i) {
        std::printf("%zu", i);
        for (std::size_t j = 0; j < k; ++j) {
            double cos = i == j ? 1.0 : 0.0;
            if (i != j && norms[i] > 0 && norms[j] > 0) {
                double d = 0;
                for (std::size_t ch = 0; ch < c; ++ch) d += static_cast<double>(mem.row(i)[ch]) * mem.row(j)[ch];
                cos = d / (norms[i] * norms[j]);
            }
            std::printf("\t%.6f", cos);
        }
        std::printf("\n");
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Reference-free camouflaged object segmentation with a prototype memory"};
    app.require_subcommand(1);

    ConfigFlags gen_flags, train_flags;

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic camouflage dataset and print its SHA-256");
    std::string gen_out;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen_flags.attach(gen);

    auto* train = app.add_subcommand("train", "train a model; writes checkpoint.rfo, train_log.tsv, eval_log.tsv");
    TrainFlags tf;
    train->add_option("--data", tf.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
    train->add_option("--out", tf.out, "output directory")->required();
    train->add_flag("--no-ref-baseline", tf.no_ref, "train the no-reference baseline (no memory, no alignment)");
    train->add_option("--guidance-mode", tf.guidance_mode, "default guidance mode stored in the checkpoint")
        ->check(CLI::IsMember({"mixture", "nearest", "oracle"}));
    train->add_flag("--one-way-baa", tf.one_way, "skip guidance refinement inside the alignment module");
    train->add_flag("--share-baa", tf.share, "share alignment parameters across all applications");
    train_flags.attach(train);

    auto* eval = app.add_subcommand("eval", "score the test split; writes predicted masks and a TSV report");
    EvalFlags ef;
    eval->add_option("--data", ef.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
    eval->add_option("--ckpt", ef.ckpt, "checkpoint file")->check(CLI::ExistingFile);
    eval->add_option("--out-report", ef.report, "report TSV path")->required();
    eval->add_option("--pred-dir", ef.pred_dir, "score existing <stem>.pgm predictions instead of running the model")
        ->check(CLI::ExistingDirectory);
    eval->add_option("--masks-out", ef.masks_out, "where predicted masks are written (default: pred_masks next to the report)");
    eval->add_option("--guidance-mode", ef.guidance_mode, "guidance mode for the predicted masks")
        ->check(CLI::IsMember({"mixture", "nearest", "oracle"}));

    auto* infer = app.add_subcommand("infer", "segment one P6 image without references");
    InferFlags inf;
    infer->add_option("--image", inf.image, "input P6 image")->required()->check(CLI::ExistingFile);
    infer->add_option("--ckpt", inf.ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
    infer->add_option("--out-mask", inf.out_mask, "output P5 probability mask")->required();
    infer->add_option("--reference", inf.reference, "rejected: inference never takes references");
    infer->add_option("--guidance-mode", inf.guidance_mode, "mixture or nearest")
        ->check(CLI::IsMember({"mixture", "nearest", "oracle"}));

    auto* inspect = app.add_subcommand("inspect-memory", "print prototype norms, cosine similarities and flags");
    std::string inspect_ckpt;
    inspect->add_option("--ckpt", inspect_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (*gen) return cmd_gen_data(gen_flags, gen_out);
        if (*train) return cmd_train(train_flags, tf);
        if (*eval) return cmd_eval(ef);
        if (*infer) return cmd_infer(inf);
        if (*inspect) return cmd_inspect_memory(inspect_ckpt);
    } catch (const NumericError& e) {
        std::cerr << "numeric failure at step " << e.step() << ": " << e.what() << "\n";
        return kNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    }
    return kUsage;
}
