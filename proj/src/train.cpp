#include "vcl/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "vcl/rng.hpp"

namespace vcl {

void adam_step(Model& model, const std::map<std::string, Tensor>& grads, AdamState& state,
               const TrainConfig& cfg) {
    if (state.t == 0) {
        for (const auto& [name, p] : model.params) {
            state.m[name] = Tensor::zeros(p.shape);
            state.v[name] = Tensor::zeros(p.shape);
        }
    }
    state.t++;
    double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(state.t));
    double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(state.t));
    for (auto& [name, p] : model.params) {
        if (model.frozen.count(name)) continue;
        auto it = grads.find(name);
        if (it == grads.end()) continue;
        const Tensor& g = it->second;
        if (!g.same_shape(p))
            throw DimensionError("adam_step: grad " + shape_str(g.shape) + " vs param " +
                                 shape_str(p.shape) + " for " + name);
        Tensor& m = state.m[name];
        Tensor& v = state.v[name];
        for (size_t i = 0; i < p.size(); ++i) {
            double gi = g.data[i];
            double mi = cfg.adam_beta1 * m.data[i] + (1.0 - cfg.adam_beta1) * gi;
            double vi = cfg.adam_beta2 * v.data[i] + (1.0 - cfg.adam_beta2) * gi * gi;
            m.data[i] = static_cast<float>(mi);
            v.data[i] = static_cast<float>(vi);
            double mhat = mi / bc1;
            double vhat = vi / bc2;
            p.data[i] -= static_cast<float>(cfg.learning_rate * mhat /
                                            (std::sqrt(vhat) + cfg.adam_eps));
        }
    }
}

EvalResult evaluate_model(Model& model, const LabeledDataset& ds, int batch_size) {
    EvalResult res;
    int n = ds.size();
    if (n == 0) throw ContractError("evaluate_model: empty dataset");
    int h = ds.images.dim(1), w = ds.images.dim(2), c = ds.images.dim(3);
    size_t stride = static_cast<size_t>(h) * w * c;
    std::mt19937_64 dummy_rng(0); // eval mode draws nothing
    double loss_sum = 0;
    int correct = 0;
    for (int start = 0; start < n; start += batch_size) {
        int bn = std::min(batch_size, n - start);
        Tensor batch({bn, h, w, c},
                     std::vector<float>(ds.images.data.begin() + static_cast<size_t>(start) * stride,
                                        ds.images.data.begin() + static_cast<size_t>(start + bn) * stride));
        std::vector<int> labels(ds.labels.begin() + start, ds.labels.begin() + start + bn);
        Tape tape;
        auto fw = model_forward(tape, model, batch, /*train_mode=*/false, dummy_rng,
                                /*with_grad=*/false);
        auto loss = tape.sparse_ce(fw.logits, labels);
        loss_sum += static_cast<double>(loss->value.data[0]) * bn;
        int K = fw.logits->value.dim(1);
        for (int i = 0; i < bn; ++i) {
            const float* row = fw.logits->value.data.data() + static_cast<size_t>(i) * K;
            int arg = 0;
            for (int j = 1; j < K; ++j)
                if (row[j] > row[arg]) arg = j;
            res.predictions.push_back(arg);
            if (arg == labels[static_cast<size_t>(i)]) correct++;
        }
    }
    res.loss = loss_sum / n;
    res.accuracy = static_cast<double>(correct) / n;
    return res;
}

EvalMetrics metrics(const std::vector<int>& pred, const std::vector<int>& truth, int num_classes,
                    Average avg) {
    if (pred.size() != truth.size())
        throw DimensionError("metrics: " + std::to_string(pred.size()) + " predictions vs " +
                             std::to_string(truth.size()) + " labels");
    for (size_t i = 0; i < pred.size(); ++i)
        if (pred[i] < 0 || pred[i] >= num_classes || truth[i] < 0 || truth[i] >= num_classes)
            throw ContractError("metrics: label outside [0," + std::to_string(num_classes) +
                                ") at index " + std::to_string(i));
    std::vector<long long> confusion(static_cast<size_t>(num_classes) * num_classes, 0);
    for (size_t i = 0; i < pred.size(); ++i)
        confusion[static_cast<size_t>(truth[i]) * num_classes + pred[i]]++;
    EvalMetrics out;
    long long diag = 0;
    for (int k = 0; k < num_classes; ++k)
        diag += confusion[static_cast<size_t>(k) * num_classes + k];
    out.accuracy = static_cast<double>(diag) / static_cast<double>(pred.size());
    double wp = 0, wr = 0, wf = 0;
    for (int k = 0; k < num_classes; ++k) {
        long long tp = confusion[static_cast<size_t>(k) * num_classes + k];
        long long fp = 0, fn = 0;
        for (int j = 0; j < num_classes; ++j) {
            if (j == k) continue;
            fp += confusion[static_cast<size_t>(j) * num_classes + k];
            fn += confusion[static_cast<size_t>(k) * num_classes + j];
        }
        double p = (tp + fp) > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
        double r = (tp + fn) > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
        double f = (p + r) > 0 ? 2 * p * r / (p + r) : 0.0;
        double weight = avg == Average::macro
                            ? 1.0 / num_classes
                            : static_cast<double>(tp + fn) / static_cast<double>(pred.size());
        wp += weight * p;
        wr += weight * r;
        wf += weight * f;
    }
    out.precision = wp;
    out.recall = wr;
    out.f1 = wf;
    return out;
}

namespace {

Model init_from_spec(const ModelSpec& spec, std::mt19937_64& rng) {
    if (std::holds_alternative<ViTConfig>(spec))
        return init_vit<float>(std::get<ViTConfig>(spec), rng);
    return init_cnn<float>(std::get<CnnConfig>(spec), rng);
}

} // namespace

TrainResult train(const ModelSpec& spec, const DataBundle& data, const TrainConfig& cfg,
                  const TrainOptions& opts) {
    cfg.validate();
    if (data.train.size() == 0 || data.val.size() == 0 || data.test.size() == 0)
        throw ContractError("train: all of train/val/test must be non-empty");

    TrainResult result;
    std::vector<std::map<std::string, Tensor>> best_params(static_cast<size_t>(cfg.repetitions));
    int h = data.train.images.dim(1), w = data.train.images.dim(2), c = data.train.images.dim(3);
    size_t stride = static_cast<size_t>(h) * w * c;

    for (int r = 0; r < cfg.repetitions; ++r) {
        uint64_t rseed = cfg.seed + static_cast<uint64_t>(r);
        auto init_rng = make_rng(rseed, "init");
        Model model = init_from_spec(spec, init_rng);
        if (opts.freeze_backbone) freeze_backbone(model);
        model.class_names = data.train.class_names;
        AdamState adam;
        auto shuffle_rng = make_rng(rseed, "shuffle");
        auto dropout_rng = make_rng(rseed, "dropout");
        AugmentConfig aug = opts.aug;
        aug.seed = substream(rseed, "augment");

        TrainReport report;
        report.run_index = r;
        double best_val = -1.0;
        std::map<std::string, Tensor> best_snapshot;

        std::vector<int> order(static_cast<size_t>(data.train.size()));
        std::iota(order.begin(), order.end(), 0);

        for (int epoch = 0; epoch < cfg.epochs && !report.failed; ++epoch) {
            std::shuffle(order.begin(), order.end(), shuffle_rng);
            int batch_index = 0;
            for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size), ++batch_index) {
                size_t bn = std::min<size_t>(cfg.batch_size, order.size() - start);
                Tensor batch = Tensor::zeros({static_cast<int>(bn), h, w, c});
                std::vector<int> labels(bn);
                for (size_t i = 0; i < bn; ++i) {
                    int src = order[start + i];
                    std::copy(data.train.images.data.begin() + static_cast<size_t>(src) * stride,
                              data.train.images.data.begin() + static_cast<size_t>(src + 1) * stride,
                              batch.data.begin() + i * stride);
                    labels[i] = data.train.labels[static_cast<size_t>(src)];
                }
                if (opts.augment_train)
                    batch = augment(batch, aug,
                                    static_cast<uint64_t>(epoch) * 1000003u +
                                        static_cast<uint64_t>(batch_index));
                Tape tape;
                auto fw = model_forward(tape, model, batch, /*train_mode=*/true, dropout_rng);
                auto loss = tape.sparse_ce(fw.logits, labels);
                if (!std::isfinite(loss->value.data[0])) {
                    report.failed = true;
                    break;
                }
                tape.backward(loss);
                std::map<std::string, Tensor> grads;
                for (auto& [name, var] : fw.param_vars) grads.emplace(name, var->grad);
                adam_step(model, grads, adam, cfg);
            }
            if (report.failed) break;
            // curves are measured on clean data in eval mode
            auto tr = evaluate_model(model, data.train, cfg.batch_size);
            auto va = evaluate_model(model, data.val, cfg.batch_size);
            report.train_loss.push_back(tr.loss);
            report.train_acc.push_back(tr.accuracy);
            report.val_loss.push_back(va.loss);
            report.val_acc.push_back(va.accuracy);
            if (va.accuracy > best_val) {
                best_val = va.accuracy;
                best_snapshot = model.params;
                report.best_epoch = epoch;
            }
        }
        best_params[static_cast<size_t>(r)] = std::move(best_snapshot);
        if (!report.failed && report.val_acc.empty()) report.failed = true;
        result.runs.push_back(std::move(report));
    }

    int selected = -1;
    double best_final = -1.0;
    for (int r = 0; r < cfg.repetitions; ++r) {
        const auto& rep = result.runs[static_cast<size_t>(r)];
        if (rep.failed) continue;
        if (rep.val_acc.back() > best_final) {
            best_final = rep.val_acc.back();
            selected = r;
        }
    }
    if (selected < 0) throw NumericError("train: all repetitions aborted on non-finite loss");
    result.selected = selected;

    // rebuild the selected run's model around its best checkpoint
    uint64_t sseed = cfg.seed + static_cast<uint64_t>(selected);
    auto init_rng = make_rng(sseed, "init");
    result.model = init_from_spec(spec, init_rng);
    if (opts.freeze_backbone) freeze_backbone(result.model);
    result.model.class_names = data.train.class_names;
    result.model.params = best_params[static_cast<size_t>(selected)];
    auto test = evaluate_model(result.model, data.test, cfg.batch_size);
    result.runs[static_cast<size_t>(selected)].test_metrics =
        metrics(test.predictions, data.test.labels, data.test.num_classes());
    return result;
}

void emit_curves(const TrainReport& report, const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw IoError("cannot write curves file " + path);
    std::fprintf(f, "epoch,train_loss,val_loss,train_acc,val_acc\n");
    for (size_t e = 0; e < report.train_loss.size(); ++e)
        std::fprintf(f, "%zu,%.6g,%.6g,%.6g,%.6g\n", e, report.train_loss[e], report.val_loss[e],
                     report.train_acc[e], report.val_acc[e]);
    if (std::fclose(f) != 0) throw IoError("write failed for " + path);
}

} // namespace vcl
