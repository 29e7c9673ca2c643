#include "vcl/cam.hpp"

#include <algorithm>
#include <cmath>

#include "vcl/dataset.hpp"
#include "vcl/pnm.hpp"

namespace vcl {

std::string cam_method_name(CamMethod m) {
    switch (m) {
        case CamMethod::gradcam: return "gradcam";
        case CamMethod::gradcampp: return "gradcampp";
        case CamMethod::scorecam: return "scorecam";
        case CamMethod::faster_scorecam: return "faster_scorecam";
        case CamMethod::layercam: return "layercam";
    }
    return "?";
}

std::optional<CamMethod> parse_cam_method(const std::string& name) {
    if (name == "gradcam") return CamMethod::gradcam;
    if (name == "gradcampp" || name == "gradcam++") return CamMethod::gradcampp;
    if (name == "scorecam") return CamMethod::scorecam;
    if (name == "faster_scorecam" || name == "faster-scorecam") return CamMethod::faster_scorecam;
    if (name == "layercam") return CamMethod::layercam;
    return std::nullopt;
}

Tensor minmax01(const Tensor& t) {
    Tensor out = t;
    float mn = out.data[0], mx = out.data[0];
    for (float v : out.data) {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    if (mx <= 0.0f) {
        std::fill(out.data.begin(), out.data.end(), 0.0f);
    } else if (mx == mn) {
        std::fill(out.data.begin(), out.data.end(), 1.0f);
    } else {
        for (float& v : out.data) v = (v - mn) / (mx - mn);
    }
    return out;
}

namespace {

void check_request(const CamRequest& req) {
    if (!req.model) throw ContractError("CAM request has no model");
    if (req.model->kind != ModelKind::cnn)
        throw CamUnsupportedArchitecture(
            "CAM methods need spatial convolutional feature maps; a vision transformer "
            "processes images as patch sequences and exposes none");
    if (req.image.rank() != 4 || req.image.dim(0) != 1)
        throw DimensionError("CAM expects a single image [1,H,W,C], got " +
                             shape_str(req.image.shape));
    if (req.target_class >= req.model->num_classes())
        throw ContractError("target class " + std::to_string(req.target_class) +
                            " outside [0," + std::to_string(req.model->num_classes()) + ")");
}

struct TapForward {
    Tape tape;
    ForwardT<float> fw;
    Tape::Var tap = nullptr;
    std::string tap_name;
    int target = 0;
};

std::string resolve_layer(const Model& m, const std::string& layer) {
    auto names = m.tap_names();
    if (layer == "auto") return names.back();
    if (std::find(names.begin(), names.end(), layer) == names.end())
        throw ContractError("unknown feature tap '" + layer + "'");
    return layer;
}

// Forward pass capturing the requested tap; fills in the target class
// (argmax when unspecified).
void run_forward(const CamRequest& req, TapForward& tf, bool with_grad) {
    Model model = *req.model; // params are shared copies; CAM never mutates them
    tf.tap_name = resolve_layer(model, req.layer);
    std::mt19937_64 rng(0);
    tf.fw = cnn_forward(tf.tape, model, req.image, /*train_mode=*/false, rng, with_grad);
    for (auto& [name, var] : tf.fw.taps)
        if (name == tf.tap_name) tf.tap = var;
    if (req.target_class >= 0) {
        tf.target = req.target_class;
    } else {
        const auto& l = tf.fw.logits->value;
        tf.target = 0;
        for (int j = 1; j < l.dim(1); ++j)
            if (l.data[static_cast<size_t>(j)] > l.data[static_cast<size_t>(tf.target)]) tf.target = j;
    }
}

Tensor channel_map(const Tensor& tap, int k) {
    int hf = tap.dim(1), wf = tap.dim(2), C = tap.dim(3);
    Tensor out = Tensor::zeros({hf, wf});
    for (int i = 0; i < hf; ++i)
        for (int j = 0; j < wf; ++j)
            out.data[static_cast<size_t>(i) * wf + j] =
                tap.data[(static_cast<size_t>(i) * wf + j) * C + k];
    return out;
}

Tensor upsample_to(const Tensor& map2d, int H, int W) {
    Tensor batched({1, map2d.dim(0), map2d.dim(1), 1}, map2d.data);
    Tensor up = resize_bilinear(batched, H, W);
    return Tensor({H, W}, up.data);
}

Tensor relu_map(Tensor t) {
    for (float& v : t.data) v = std::max(v, 0.0f);
    return t;
}

Heatmap finish(Tensor map2d, CamMethod method, int target, std::vector<std::string> layers) {
    Heatmap h;
    h.values = minmax01(map2d);
    h.method = method;
    h.target_class = target;
    h.source_layers = std::move(layers);
    return h;
}

// Channel weights -> ReLU(weighted sum over channels) at tap resolution.
Tensor weighted_sum(const Tensor& tap, const std::vector<float>& weights) {
    int hf = tap.dim(1), wf = tap.dim(2), C = tap.dim(3);
    Tensor map = Tensor::zeros({hf, wf});
    for (int i = 0; i < hf; ++i)
        for (int j = 0; j < wf; ++j) {
            float s = 0;
            for (int k = 0; k < C; ++k)
                s += weights[static_cast<size_t>(k)] *
                     tap.data[(static_cast<size_t>(i) * wf + j) * C + k];
            map.data[static_cast<size_t>(i) * wf + j] = s;
        }
    return relu_map(std::move(map));
}

float softmax_prob(const Tensor& logits, int target) {
    int K = logits.dim(1);
    float mx = logits.data[0];
    for (int j = 1; j < K; ++j) mx = std::max(mx, logits.data[static_cast<size_t>(j)]);
    double sum = 0;
    for (int j = 0; j < K; ++j) sum += std::exp(static_cast<double>(logits.data[static_cast<size_t>(j)]) - mx);
    return static_cast<float>(std::exp(static_cast<double>(logits.data[static_cast<size_t>(target)]) - mx) / sum);
}

// ScoreCAM restricted to `channels` (ascending index order). Baseline is
// the all-zero image; contributions live in softmax-probability space.
Heatmap scorecam_restricted(const CamRequest& req, std::vector<int> channels, CamMethod method,
                            int* forward_count) {
    TapForward tf;
    run_forward(req, tf, /*with_grad=*/false);
    const Tensor& tap = tf.tap->value;
    int H = req.image.dim(1), W = req.image.dim(2), C = req.image.dim(3);
    std::sort(channels.begin(), channels.end());

    Model model = *req.model;
    std::mt19937_64 rng(0);
    int forwards = 0;
    auto class_prob = [&](const Tensor& img) {
        Tape t;
        auto fw = cnn_forward(t, model, img, false, rng, /*with_grad=*/false);
        ++forwards;
        return softmax_prob(fw.logits->value, tf.target);
    };
    float p_base = class_prob(Tensor::zeros(req.image.shape));

    std::vector<Tensor> upsampled;
    std::vector<float> contrib;
    for (int k : channels) {
        Tensor up = upsample_to(channel_map(tap, k), H, W);
        Tensor mask = minmax01(up);
        Tensor masked = req.image;
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j)
                for (int ch = 0; ch < C; ++ch)
                    masked.data[(static_cast<size_t>(i) * W + j) * C + ch] *=
                        mask.data[static_cast<size_t>(i) * W + j];
        contrib.push_back(class_prob(masked) - p_base);
        upsampled.push_back(std::move(up));
    }
    if (forward_count) *forward_count = forwards;

    // softmax over the contributions of the participating channels
    float mx = contrib.empty() ? 0.0f : *std::max_element(contrib.begin(), contrib.end());
    double sum = 0;
    std::vector<float> weights(contrib.size());
    for (size_t i = 0; i < contrib.size(); ++i) sum += std::exp(static_cast<double>(contrib[i]) - mx);
    for (size_t i = 0; i < contrib.size(); ++i)
        weights[i] = static_cast<float>(std::exp(static_cast<double>(contrib[i]) - mx) / sum);

    Tensor map = Tensor::zeros({H, W});
    for (size_t i = 0; i < upsampled.size(); ++i)
        for (size_t j = 0; j < map.size(); ++j) map.data[j] += weights[i] * upsampled[i].data[j];
    return finish(relu_map(std::move(map)), method, tf.target, {tf.tap_name});
}

} // namespace

Heatmap gradcam(const CamRequest& req) {
    check_request(req);
    TapForward tf;
    run_forward(req, tf, /*with_grad=*/true);
    tf.tape.backward(tf.tape.select_scalar(tf.fw.logits, static_cast<size_t>(tf.target)));
    const Tensor& A = tf.tap->value;
    const Tensor& g = tf.tap->grad;
    int hf = A.dim(1), wf = A.dim(2), C = A.dim(3);
    std::vector<float> weights(static_cast<size_t>(C), 0.0f);
    for (int k = 0; k < C; ++k) {
        double s = 0;
        for (int i = 0; i < hf * wf; ++i) s += g.data[static_cast<size_t>(i) * C + k];
        weights[static_cast<size_t>(k)] = static_cast<float>(s / (hf * wf));
    }
    Tensor map = upsample_to(weighted_sum(A, weights), req.image.dim(1), req.image.dim(2));
    return finish(std::move(map), CamMethod::gradcam, tf.target, {tf.tap_name});
}

Heatmap gradcam_pp(const CamRequest& req) {
    check_request(req);
    TapForward tf;
    run_forward(req, tf, /*with_grad=*/true);
    tf.tape.backward(tf.tape.select_scalar(tf.fw.logits, static_cast<size_t>(tf.target)));
    const Tensor& A = tf.tap->value;
    const Tensor& gs = tf.tap->grad; // dS/dA for the raw class score S
    int hf = A.dim(1), wf = A.dim(2), C = A.dim(3);
    // gradient of exp(S): higher-order terms reduce to powers of g
    double expS = std::exp(static_cast<double>(
        tf.fw.logits->value.data[static_cast<size_t>(tf.target)]));
    const double eps = 1e-8;
    std::vector<float> weights(static_cast<size_t>(C), 0.0f);
    for (int k = 0; k < C; ++k) {
        double sum_ag3 = 0;
        for (int i = 0; i < hf * wf; ++i) {
            double g = expS * gs.data[static_cast<size_t>(i) * C + k];
            sum_ag3 += A.data[static_cast<size_t>(i) * C + k] * g * g * g;
        }
        double w = 0;
        for (int i = 0; i < hf * wf; ++i) {
            double g = expS * gs.data[static_cast<size_t>(i) * C + k];
            double denom = 2.0 * g * g + sum_ag3 + eps;
            double alpha = g * g / denom;
            w += alpha * std::max(g, 0.0);
        }
        weights[static_cast<size_t>(k)] = static_cast<float>(w);
    }
    Tensor map = upsample_to(weighted_sum(A, weights), req.image.dim(1), req.image.dim(2));
    return finish(std::move(map), CamMethod::gradcampp, tf.target, {tf.tap_name});
}

Heatmap scorecam(const CamRequest& req, int* forward_count) {
    check_request(req);
    TapForward probe;
    run_forward(req, probe, /*with_grad=*/false);
    int C = probe.tap->value.dim(3);
    std::vector<int> all(static_cast<size_t>(C));
    for (int k = 0; k < C; ++k) all[static_cast<size_t>(k)] = k;
    return scorecam_restricted(req, all, CamMethod::scorecam, forward_count);
}

Heatmap faster_scorecam(const CamRequest& req, int* forward_count) {
    check_request(req);
    if (req.top_k < 1) throw ContractError("faster_scorecam: top_k must be >= 1");
    TapForward probe;
    run_forward(req, probe, /*with_grad=*/false);
    const Tensor& tap = probe.tap->value;
    int hf = tap.dim(1), wf = tap.dim(2), C = tap.dim(3);
    // rank channels by spatial variance, descending; ties keep lower index
    std::vector<std::pair<double, int>> ranked;
    for (int k = 0; k < C; ++k) {
        double mean = 0;
        for (int i = 0; i < hf * wf; ++i) mean += tap.data[static_cast<size_t>(i) * C + k];
        mean /= hf * wf;
        double var = 0;
        for (int i = 0; i < hf * wf; ++i) {
            double d = tap.data[static_cast<size_t>(i) * C + k] - mean;
            var += d * d;
        }
        ranked.emplace_back(-var / (hf * wf), k);
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    int take = std::min(req.top_k, C);
    std::vector<int> channels;
    for (int i = 0; i < take; ++i) channels.push_back(ranked[static_cast<size_t>(i)].second);
    Heatmap h = scorecam_restricted(req, channels, CamMethod::faster_scorecam, forward_count);
    return h;
}

Heatmap layercam(const CamRequest& req, const std::vector<std::string>& layers) {
    check_request(req);
    if (layers.empty()) throw ContractError("layercam: need at least one layer");
    TapForward tf;
    run_forward(req, tf, /*with_grad=*/true);
    tf.tape.backward(tf.tape.select_scalar(tf.fw.logits, static_cast<size_t>(tf.target)));
    int H = req.image.dim(1), W = req.image.dim(2);
    Tensor fused = Tensor::zeros({H, W});
    std::vector<std::string> used;
    for (const auto& layer : layers) {
        Tape::Var tap = nullptr;
        for (auto& [name, var] : tf.fw.taps)
            if (name == layer) tap = var;
        if (!tap) throw ContractError("unknown feature tap '" + layer + "'");
        used.push_back(layer);
        const Tensor& A = tap->value;
        const Tensor& g = tap->grad;
        int hf = A.dim(1), wf = A.dim(2), C = A.dim(3);
        Tensor map = Tensor::zeros({hf, wf});
        for (int i = 0; i < hf * wf; ++i) {
            float s = 0;
            for (int k = 0; k < C; ++k) {
                float gv = g.data[static_cast<size_t>(i) * C + k];
                if (gv > 0) s += gv * A.data[static_cast<size_t>(i) * C + k];
            }
            map.data[static_cast<size_t>(i)] = std::max(s, 0.0f);
        }
        Tensor up = minmax01(upsample_to(map, H, W));
        for (size_t i = 0; i < fused.size(); ++i)
            fused.data[i] = std::max(fused.data[i], up.data[i]);
    }
    return finish(std::move(fused), CamMethod::layercam, tf.target, used);
}

void render_heatmap(const Heatmap& h, const Tensor& base, double alpha, const std::string& path) {
    Shape bs = base.shape;
    if (bs.size() == 2) bs.push_back(1);
    if (h.values.rank() != 2 || bs.size() != 3 || bs[0] != h.values.dim(0) ||
        bs[1] != h.values.dim(1))
        throw DimensionError("render_heatmap: map " + shape_str(h.values.shape) +
                             " vs base " + shape_str(base.shape));
    int H = bs[0], W = bs[1], C = bs[2];
    Tensor out = Tensor::zeros({H, W, 3});
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            float gray = 0;
            for (int ch = 0; ch < C; ++ch)
                gray += base.data[(static_cast<size_t>(i) * W + j) * C + ch];
            gray /= static_cast<float>(C);
            float v = h.values.data[static_cast<size_t>(i) * W + j];
            // piecewise-linear blue -> green -> red
            float r, g, b;
            if (v <= 0.5f) {
                float t = 2.0f * v;
                r = 0.0f;
                g = t;
                b = 1.0f - t;
            } else {
                float t = 2.0f * (v - 0.5f);
                r = t;
                g = 1.0f - t;
                b = 0.0f;
            }
            float a = static_cast<float>(alpha);
            out.data[(static_cast<size_t>(i) * W + j) * 3 + 0] = (1 - a) * gray + a * r;
            out.data[(static_cast<size_t>(i) * W + j) * 3 + 1] = (1 - a) * gray + a * g;
            out.data[(static_cast<size_t>(i) * W + j) * 3 + 2] = (1 - a) * gray + a * b;
        }
    write_ppm(path, out);
}

} // namespace vcl
