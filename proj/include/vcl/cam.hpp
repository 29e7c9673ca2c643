#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vcl/model.hpp"

namespace vcl {

enum class CamMethod { gradcam, gradcampp, scorecam, faster_scorecam, layercam };

std::string cam_method_name(CamMethod m);
std::optional<CamMethod> parse_cam_method(const std::string& name);

struct Heatmap {
    Tensor values; // [H,W] in [0,1]; max is exactly 1 unless identically zero
    CamMethod method = CamMethod::gradcam;
    int target_class = 0;
    std::vector<std::string> source_layers;
};

struct CamRequest {
    const Model* model = nullptr; // must be a CNN
    Tensor image;                 // [1,H,W,C]
    int target_class = -1;        // < 0 means argmax of the model's prediction
    std::string layer = "auto";   // tap name; auto = last conv tap
    int top_k = 16;               // faster_scorecam only
};

Heatmap gradcam(const CamRequest& req);
Heatmap gradcam_pp(const CamRequest& req);
// forward_count, when given, receives the number of model evaluations the
// channel-weighting stage performed (masked passes plus the baseline).
Heatmap scorecam(const CamRequest& req, int* forward_count = nullptr);
Heatmap faster_scorecam(const CamRequest& req, int* forward_count = nullptr);
Heatmap layercam(const CamRequest& req, const std::vector<std::string>& layers);

// Colorized overlay (blue -> green -> red) on the grayscale base image,
// written as a binary PPM.
void render_heatmap(const Heatmap& h, const Tensor& base, double alpha, const std::string& path);

// Min-max rescale to [0,1]. An identically-zero (or all-negative) map stays
// zero; a constant positive map becomes all ones.
Tensor minmax01(const Tensor& t);

} // namespace vcl
