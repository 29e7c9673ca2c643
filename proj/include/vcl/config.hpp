#pragma once

#include <string>

#include "vcl/dataset.hpp"
#include "vcl/train.hpp"

namespace vcl {

enum class SmoteMode { off, pre_split, train_only };

// Flat key=value run configuration ('#' comments, unknown keys rejected).
// The raw file bytes are kept so the CLI can echo them into out_dir.
struct RunConfig {
    std::string raw_text;

    std::string model = "cnn"; // cnn | vit
    std::string data_root;
    std::string out_dir;
    uint64_t seed = 0;
    int image_h = 128;
    int image_w = 128;

    SplitSpec split{};
    AugmentConfig aug{};
    bool augment_train = true;

    SmoteMode smote = SmoteMode::off;
    int smote_k = 5;

    ViTConfig vit{};
    CnnConfig cnn{};
    bool freeze_backbone = false;

    TrainConfig train{};
    bool learning_rate_set = false; // defaults differ per model kind
    Average metric_average = Average::macro;

    static RunConfig parse_file(const std::string& path);
    static RunConfig parse_text(const std::string& text);

    // Resolves interdependent defaults (input dims, per-kind learning rate).
    void finalize(int channels, int num_classes);
    ModelSpec model_spec() const;
};

} // namespace vcl
