#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vcl/tensor.hpp"

namespace vcl {

struct LabeledDataset {
    Tensor images; // [N,H,W,C], values in [0,1]
    std::vector<int> labels;
    std::vector<std::string> class_names;

    int size() const { return images.rank() == 4 ? images.dim(0) : 0; }
    int num_classes() const { return static_cast<int>(class_names.size()); }
    std::vector<int> class_counts() const;
    void validate() const;
};

struct SplitSpec {
    double train_frac = 0.8;
    double val_frac = 0.1;
    double test_frac = 0.1;
    uint64_t seed = 0;

    void validate() const;
};

struct AugmentConfig {
    double flip_prob = 0.5;
    double rotation_factor = 0.01; // fraction of a full turn
    double zoom_factor = 0.05;
    int target_h = 128;
    int target_w = 128;
    uint64_t seed = 0;
};

// Directory layout: root/<class_name>/*.pgm|*.ppm, class names sorted.
// When resize_to is given each image is resampled on load; otherwise all
// images must already share one (H,W,C).
LabeledDataset load_dataset(const std::string& root_dir,
                            std::optional<std::pair<int, int>> resize_to = std::nullopt);

// Corner-aligned bilinear resampling; identity (bitwise) when the size
// already matches.
Tensor resize_bilinear(const Tensor& images, int target_h, int target_w);

// Oversamples every class below T = round(mean class count) up to T by
// interpolating between a sample and one of its k nearest same-class
// neighbors in flattened pixel space. Originals are preserved verbatim;
// synthetics are appended after them.
LabeledDataset smote_balance(const LabeledDataset& ds, int k, uint64_t seed);

// Per-image random horizontal flip, small rotation and anisotropic zoom,
// bilinear resampling with zero fill, output clamped to [0,1]. Each image
// draws from its own counter-derived stream so results do not depend on
// processing order. base_seed distinguishes calls (e.g. epoch number).
Tensor augment(const Tensor& batch, const AugmentConfig& cfg, uint64_t base_seed);

struct SplitResult {
    LabeledDataset train, val, test;
};

// Per-class shuffle then floor-based allocation; remainder samples go to
// the training set.
SplitResult stratified_split(const LabeledDataset& ds, const SplitSpec& spec);

// Desk-scale stand-in dataset: class c gets an oriented bar at angle
// c*pi/num_classes over low background noise. Grayscale, [0,1].
LabeledDataset synth_dataset(int num_classes, int per_class, int h, int w, uint64_t seed);

// Writes ds back out as root/<class>/<index>.pgm (or .ppm for C=3).
void write_dataset(const LabeledDataset& ds, const std::string& root_dir);

} // namespace vcl
