// vcl — batch front end: synth-data | balance | train | evaluate | explain
//
// Exit codes: 0 success, 1 usage/config error, 2 unsupported operation,
// 3 I/O error, 4 numeric failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "vcl/cam.hpp"
#include "vcl/config.hpp"
#include "vcl/pnm.hpp"
#include "vcl/train.hpp"

namespace fs = std::filesystem;
using namespace vcl;

namespace {

void print_counts(const LabeledDataset& before, const LabeledDataset& after) {
    auto cb = before.class_counts();
    auto ca = after.class_counts();
    std::printf("%-24s %8s %8s\n", "class", "before", "after");
    for (size_t i = 0; i < cb.size(); ++i)
        std::printf("%-24s %8d %8d\n", before.class_names[i].c_str(), cb[i], ca[i]);
}

void append_metrics_row(const std::string& path, const std::string& model,
                        const EvalMetrics& m) {
    bool fresh = !fs::exists(path);
    std::ofstream out(path, std::ios::app);
    if (!out) throw IoError("cannot write metrics file " + path);
    if (fresh) out << "model,accuracy,precision,recall,f1\n";
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s,%.4f,%.4f,%.4f,%.4f\n", model.c_str(), m.accuracy,
                  m.precision, m.recall, m.f1);
    out << buf;
    if (!out) throw IoError("write failed for " + path);
}

std::string metrics_row(const std::string& model, const EvalMetrics& m) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s,%.4f,%.4f,%.4f,%.4f", model.c_str(), m.accuracy,
                  m.precision, m.recall, m.f1);
    return buf;
}

int cmd_synth_data(int classes, int per_class, int hw, uint64_t seed, const std::string& out,
                   bool force) {
    if (fs::exists(out) && !fs::is_empty(out) && !force)
        throw ContractError("output directory " + out + " is not empty (use --force)");
    LabeledDataset ds = synth_dataset(classes, per_class, hw, hw, seed);
    write_dataset(ds, out);
    std::printf("wrote %d classes x %d images (%dx%d) to %s\n", classes, per_class, hw, hw,
                out.c_str());
    return 0;
}

int cmd_balance(const std::string& data, const std::string& out, int k, uint64_t seed, int hw) {
    LabeledDataset ds = load_dataset(data, std::make_pair(hw, hw));
    LabeledDataset balanced = smote_balance(ds, k, seed);
    write_dataset(balanced, out);
    print_counts(ds, balanced);
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& model_override) {
    RunConfig cfg = RunConfig::parse_file(config_path);
    if (!model_override.empty()) cfg.model = model_override;
    if (cfg.data_root.empty()) throw ContractError("config is missing data_root");
    if (cfg.out_dir.empty()) throw ContractError("config is missing out_dir");

    LabeledDataset ds = load_dataset(cfg.data_root, std::make_pair(cfg.image_h, cfg.image_w));
    cfg.finalize(ds.images.dim(3), ds.num_classes());

    DataBundle data;
    if (cfg.smote == SmoteMode::pre_split) {
        // the paper-faithful ordering: balance the whole set, then split
        // (documented leakage caveat; use train_only to avoid it)
        ds = smote_balance(ds, cfg.smote_k, substream(cfg.seed, "smote_root"));
    }
    auto split = stratified_split(ds, cfg.split);
    data.train = std::move(split.train);
    data.val = std::move(split.val);
    data.test = std::move(split.test);
    if (cfg.smote == SmoteMode::train_only)
        data.train = smote_balance(data.train, cfg.smote_k, substream(cfg.seed, "smote_root"));

    TrainOptions opts;
    opts.aug = cfg.aug;
    opts.augment_train = cfg.augment_train;
    opts.freeze_backbone = cfg.freeze_backbone;

    TrainResult result = train(cfg.model_spec(), data, cfg.train, opts);

    fs::create_directories(cfg.out_dir);
    {
        std::ofstream echo(fs::path(cfg.out_dir) / "config.txt", std::ios::binary);
        echo << cfg.raw_text;
        if (!echo) throw IoError("cannot echo config into " + cfg.out_dir);
    }
    for (const auto& run : result.runs)
        emit_curves(run, (fs::path(cfg.out_dir) / ("curves_run" + std::to_string(run.run_index) +
                                                   ".csv")).string());
    const auto& best = result.runs[static_cast<size_t>(result.selected)];
    append_metrics_row((fs::path(cfg.out_dir) / "metrics.csv").string(), cfg.model,
                       best.test_metrics);
    save_checkpoint(result.model, (fs::path(cfg.out_dir) / "model.vcl").string());

    std::printf("selected run %d (best epoch %d)\n", best.run_index, best.best_epoch);
    std::printf("final train acc %.4f, val acc %.4f\n", best.train_acc.back(),
                best.val_acc.back());
    std::printf("test %s\n", metrics_row(cfg.model, best.test_metrics).c_str());
    return 0;
}

int cmd_evaluate(const std::string& checkpoint, const std::string& data_root,
                 const std::string& out_csv, const std::string& average) {
    Model model = load_checkpoint(checkpoint);
    LabeledDataset ds =
        load_dataset(data_root, std::make_pair(model.input_h(), model.input_w()));
    if (ds.num_classes() != model.num_classes())
        throw DimensionError("dataset has " + std::to_string(ds.num_classes()) +
                             " classes but checkpoint expects " +
                             std::to_string(model.num_classes()));
    auto eval = evaluate_model(model, ds, 256);
    Average avg = average == "weighted" ? Average::weighted : Average::macro;
    EvalMetrics m = metrics(eval.predictions, ds.labels, ds.num_classes(), avg);
    std::string kind = model.kind == ModelKind::vit ? "vit" : "cnn";
    std::printf("%s\n", metrics_row(kind, m).c_str());
    if (!out_csv.empty()) append_metrics_row(out_csv, kind, m);
    return 0;
}

int cmd_explain(const std::string& checkpoint, const std::string& image_path,
                const std::string& method, const std::string& layer, int top_k, bool top_k_set,
                int target_class, double alpha, const std::string& out_dir) {
    Model model = load_checkpoint(checkpoint);
    if (model.kind != ModelKind::cnn)
        throw CamUnsupportedArchitecture(
            "checkpoint " + checkpoint +
            " is a vision transformer: it processes images as patch sequences and has no "
            "convolutional feature maps for CAM methods");

    Tensor img = read_pnm(image_path);
    Tensor batch({1, img.dim(0), img.dim(1), img.dim(2)}, img.data);
    batch = resize_bilinear(batch, model.input_h(), model.input_w());
    if (batch.dim(3) != model.input_c()) {
        if (batch.dim(3) == 3 && model.input_c() == 1) {
            // average to grayscale
            Tensor g = Tensor::zeros({1, batch.dim(1), batch.dim(2), 1});
            for (size_t i = 0; i < g.size(); ++i)
                g.data[i] = (batch.data[3 * i] + batch.data[3 * i + 1] + batch.data[3 * i + 2]) / 3.0f;
            batch = g;
        } else {
            throw DimensionError("image has " + std::to_string(batch.dim(3)) +
                                 " channels, model expects " + std::to_string(model.input_c()));
        }
    }

    std::vector<CamMethod> methods;
    if (method == "all") {
        methods = {CamMethod::gradcam, CamMethod::gradcampp, CamMethod::scorecam,
                   CamMethod::faster_scorecam, CamMethod::layercam};
    } else {
        auto m = parse_cam_method(method);
        if (!m) throw ContractError("unknown CAM method '" + method + "'");
        methods = {*m};
        if (*m == CamMethod::scorecam && top_k_set)
            std::fprintf(stderr, "warning: --top-k is ignored for scorecam\n");
    }

    CamRequest req;
    req.model = &model;
    req.image = batch;
    req.target_class = target_class;
    req.layer = layer;
    req.top_k = top_k;

    fs::create_directories(out_dir);
    std::string stem = fs::path(image_path).stem().string();
    Tensor base({batch.dim(1), batch.dim(2), batch.dim(3)}, batch.data);
    for (CamMethod m : methods) {
        Heatmap h;
        switch (m) {
            case CamMethod::gradcam: h = gradcam(req); break;
            case CamMethod::gradcampp: h = gradcam_pp(req); break;
            case CamMethod::scorecam: h = scorecam(req); break;
            case CamMethod::faster_scorecam: h = faster_scorecam(req); break;
            case CamMethod::layercam: {
                std::vector<std::string> layers;
                if (layer == "auto")
                    layers = model.tap_names(); // fuse across all conv taps
                else
                    layers = {layer};
                h = layercam(req, layers);
                break;
            }
        }
        std::string name = stem + "__" + cam_method_name(m) + "__c" +
                           std::to_string(h.target_class) + ".ppm";
        std::string path = (fs::path(out_dir) / name).string();
        render_heatmap(h, base, alpha, path);
        std::printf("%s\n", path.c_str());
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"brain-MRI classification lab: ViT / residual CNN with CAM explanations"};
    app.require_subcommand(1);

    auto* synth = app.add_subcommand("synth-data", "generate a synthetic PGM dataset");
    int classes = 4, per_class = 16, hw = 32;
    uint64_t synth_seed = 0;
    std::string synth_out;
    bool force = false;
    synth->add_option("--classes", classes, "number of classes")->check(CLI::PositiveNumber);
    synth->add_option("--per-class", per_class, "images per class")->check(CLI::PositiveNumber);
    synth->add_option("--hw", hw, "square image size")->check(CLI::PositiveNumber);
    synth->add_option("--seed", synth_seed, "random seed");
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_flag("--force", force, "write into a non-empty directory");

    auto* balance = app.add_subcommand("balance", "SMOTE-balance a dataset directory");
    std::string bal_data, bal_out;
    int bal_k = 5, bal_hw = 128;
    uint64_t bal_seed = 0;
    balance->add_option("--data", bal_data, "dataset root")->required();
    balance->add_option("--out", bal_out, "output directory")->required();
    balance->add_option("--k", bal_k, "nearest neighbors")->check(CLI::PositiveNumber);
    balance->add_option("--hw", bal_hw, "resize target before balancing")->check(CLI::PositiveNumber);
    balance->add_option("--seed", bal_seed, "random seed");

    auto* train_cmd = app.add_subcommand("train", "train a model from a config file");
    std::string config_path, model_override;
    train_cmd->add_option("--config", config_path, "key=value config file")->required();
    train_cmd->add_option("--model", model_override, "override model kind (cnn|vit)")
        ->check(CLI::IsMember({"cnn", "vit"}));

    auto* eval_cmd = app.add_subcommand("evaluate", "evaluate a checkpoint on a dataset");
    std::string ckpt, eval_data, eval_csv = "metrics.csv", average = "macro";
    eval_cmd->add_option("--checkpoint", ckpt, "model checkpoint (.vcl)")->required();
    eval_cmd->add_option("--data", eval_data, "dataset root")->required();
    eval_cmd->add_option("--out", eval_csv, "metrics CSV to append to (empty to skip)");
    eval_cmd->add_option("--average", average, "macro|weighted")
        ->check(CLI::IsMember({"macro", "weighted"}));

    auto* explain = app.add_subcommand("explain", "write CAM heatmap overlays for an image");
    std::string ex_ckpt, ex_image, ex_method = "all", ex_layer = "auto", ex_out = ".";
    int ex_topk = 16, ex_class = -1;
    double ex_alpha = 0.5;
    explain->add_option("--checkpoint", ex_ckpt, "model checkpoint (.vcl)")->required();
    explain->add_option("--image", ex_image, "input PGM/PPM image")->required();
    explain->add_option("--method", ex_method,
                        "all|gradcam|gradcampp|scorecam|faster_scorecam|layercam");
    explain->add_option("--layer", ex_layer, "feature tap name (auto = last conv)");
    auto* topk_opt = explain->add_option("--top-k", ex_topk, "channels for faster_scorecam");
    explain->add_option("--class", ex_class, "target class (default: predicted)");
    explain->add_option("--alpha", ex_alpha, "overlay opacity");
    explain->add_option("--out", ex_out, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return e.get_exit_code() == 0 ? 0 : 1;
    }

    try {
        if (synth->parsed())
            return cmd_synth_data(classes, per_class, hw, synth_seed, synth_out, force);
        if (balance->parsed()) return cmd_balance(bal_data, bal_out, bal_k, bal_seed, bal_hw);
        if (train_cmd->parsed()) return cmd_train(config_path, model_override);
        if (eval_cmd->parsed()) return cmd_evaluate(ckpt, eval_data, eval_csv, average);
        if (explain->parsed())
            return cmd_explain(ex_ckpt, ex_image, ex_method, ex_layer, ex_topk,
                               topk_opt->count() > 0, ex_class, ex_alpha, ex_out);
    } catch (const CamUnsupportedArchitecture& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
