#pragma once

#include <map>
#include <string>
#include <variant>
#include <vector>

#include "vcl/dataset.hpp"
#include "vcl/model.hpp"

namespace vcl {

struct TrainConfig {
    double learning_rate = 1e-4;
    int epochs = 400;
    int batch_size = 256;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-7;
    int repetitions = 5;
    uint64_t seed = 0;

    void validate() const {
        if (learning_rate <= 0) throw ContractError("learning rate must be positive");
        if (epochs < 1) throw ContractError("epochs must be >= 1");
        if (batch_size < 1) throw ContractError("batch size must be >= 1");
        if (repetitions < 1) throw ContractError("repetitions must be >= 1");
    }
};

enum class Average { macro, weighted };

struct EvalMetrics {
    double accuracy = 0, precision = 0, recall = 0, f1 = 0;
};

struct TrainReport {
    std::vector<double> train_loss, val_loss, train_acc, val_acc;
    int best_epoch = 0; // epoch with the best validation accuracy
    int run_index = 0;
    bool failed = false; // aborted on non-finite loss
    EvalMetrics test_metrics{};
};

struct TrainResult {
    std::vector<TrainReport> runs;
    int selected = 0; // run whose metrics/model are reported
    Model model;      // selected run's best-validation checkpoint
};

using ModelSpec = std::variant<ViTConfig, CnnConfig>;

struct DataBundle {
    LabeledDataset train, val, test;
};

struct TrainOptions {
    AugmentConfig aug{};
    bool augment_train = true;
    bool freeze_backbone = false;
};

// Adam with bias correction; frozen parameters are skipped.
struct AdamState {
    std::map<std::string, Tensor> m, v;
    long long t = 0;
};

void adam_step(Model& model, const std::map<std::string, Tensor>& grads, AdamState& state,
               const TrainConfig& cfg);

// Mean loss / accuracy / argmax predictions over a dataset, eval mode.
struct EvalResult {
    double loss = 0, accuracy = 0;
    std::vector<int> predictions;
};
EvalResult evaluate_model(Model& model, const LabeledDataset& ds, int batch_size);

// Accuracy plus macro- (or weighted-) averaged precision/recall/F1 from
// the K x K confusion matrix. Per-class divisions by zero yield 0.
EvalMetrics metrics(const std::vector<int>& pred, const std::vector<int>& truth, int num_classes,
                    Average avg = Average::macro);

// Runs `repetitions` independent training runs (seed+r each), keeps each
// run's best-validation-accuracy weights, reports the run with the highest
// final validation accuracy (ties break to the lower run index) and
// evaluates its checkpoint on the test set.
TrainResult train(const ModelSpec& spec, const DataBundle& data, const TrainConfig& cfg,
                  const TrainOptions& opts = {});

// CSV: epoch,train_loss,val_loss,train_acc,val_acc — 6 significant digits.
void emit_curves(const TrainReport& report, const std::string& path);

} // namespace vcl
