#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "vcl/rng.hpp"
#include "vcl/tape.hpp"

namespace vcl {

enum class ModelKind { vit, cnn };

struct ViTConfig {
    int image_h = 128;
    int image_w = 128;
    int channels = 1;
    int patch_size = 64;
    int embed_dim = 64;
    int num_layers = 8;
    int num_heads = 4;
    std::vector<int> mlp_head_units = {2048, 1024};
    double transformer_dropout = 0.1;
    double head_dropout = 0.5;
    int num_classes = 2;

    int num_patches() const { return (image_h / patch_size) * (image_w / patch_size); }

    void validate() const {
        if (patch_size <= 0 || image_h % patch_size != 0 || image_w % patch_size != 0)
            throw DimensionError("image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                                 " not divisible by patch size " + std::to_string(patch_size));
        if (num_heads <= 0 || embed_dim % num_heads != 0)
            throw DimensionError("embed_dim " + std::to_string(embed_dim) +
                                 " not divisible by num_heads " + std::to_string(num_heads));
        if (num_patches() < 1) throw DimensionError("config yields zero patches");
        if (num_classes < 2) throw ContractError("num_classes must be >= 2");
    }
};

struct ConvBlock {
    int filters = 16;
    int kernel = 3;
    int stride = 1;
};

struct CnnConfig {
    int image_h = 32;
    int image_w = 32;
    int channels = 1;
    std::vector<ConvBlock> blocks = {{16, 3, 1}, {16, 3, 2}, {32, 3, 2}};
    bool residual = true;
    std::vector<int> head_units = {1024, 512};
    double head_dropout = 0.5;
    int num_classes = 2;

    void validate() const {
        if (blocks.empty()) throw ContractError("CNN needs at least one conv block");
        int h = image_h, w = image_w;
        for (const auto& b : blocks) {
            if (b.filters < 1 || b.kernel < 1 || b.stride < 1)
                throw ContractError("conv block extents must be positive");
            h = (h + b.stride - 1) / b.stride;
            w = (w + b.stride - 1) / b.stride;
        }
        // CAM needs spatial extent at the last tap.
        if (h < 2 || w < 2)
            throw ContractError("final feature map " + std::to_string(h) + "x" +
                                std::to_string(w) + " is too small (need >= 2x2)");
        if (num_classes < 2) throw ContractError("num_classes must be >= 2");
    }
};

template <class T>
struct ModelT {
    ModelKind kind = ModelKind::cnn;
    ViTConfig vit;
    CnnConfig cnn;
    std::map<std::string, TensorT<T>> params;
    std::set<std::string> frozen;
    std::vector<std::string> class_names; // optional, carried through checkpoints

    int num_classes() const { return kind == ModelKind::vit ? vit.num_classes : cnn.num_classes; }
    int input_h() const { return kind == ModelKind::vit ? vit.image_h : cnn.image_h; }
    int input_w() const { return kind == ModelKind::vit ? vit.image_w : cnn.image_w; }
    int input_c() const { return kind == ModelKind::vit ? vit.channels : cnn.channels; }

    std::vector<std::string> tap_names() const {
        std::vector<std::string> names;
        if (kind == ModelKind::cnn)
            for (size_t i = 0; i < cnn.blocks.size(); ++i)
                names.push_back("conv" + std::to_string(i));
        return names;
    }

    template <class U>
    ModelT<U> cast() const {
        ModelT<U> m;
        m.kind = kind;
        m.vit = vit;
        m.cnn = cnn;
        m.frozen = frozen;
        m.class_names = class_names;
        for (const auto& [k, v] : params) m.params.emplace(k, v.template cast<U>());
        return m;
    }
};

using Model = ModelT<float>;

// Result of one forward pass: the logits plus handles to the lifted
// parameters (for reading gradients after backward) and, for CNNs, the
// post-activation feature maps by tap name.
template <class T>
struct ForwardT {
    typename TapeT<T>::Var logits = nullptr;
    std::map<std::string, typename TapeT<T>::Var> param_vars;
    std::vector<std::pair<std::string, typename TapeT<T>::Var>> taps;
};

namespace detail {

template <class T>
std::map<std::string, typename TapeT<T>::Var>
lift_params(TapeT<T>& tape, ModelT<T>& m, bool with_grad) {
    std::map<std::string, typename TapeT<T>::Var> vars;
    for (auto& [name, t] : m.params) vars[name] = tape.leaf(t, with_grad);
    return vars;
}

} // namespace detail

// ---- initialization ----

template <class T>
ModelT<T> init_vit(const ViTConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    ModelT<T> m;
    m.kind = ModelKind::vit;
    m.vit = cfg;
    const T std02 = T(0.02);
    int D = cfg.embed_dim;
    int plen = cfg.patch_size * cfg.patch_size * cfg.channels;
    int N = cfg.num_patches();
    auto& p = m.params;
    p["cls_token"] = TensorT<T>::zeros({1, D});
    p["patch_proj.w"] = trunc_normal<T>({plen, D}, std02, rng);
    p["patch_proj.b"] = TensorT<T>::zeros({D});
    p["pos_embed"] = trunc_normal<T>({N + 1, D}, std02, rng);
    char buf[64];
    for (int l = 0; l < cfg.num_layers; ++l) {
        std::snprintf(buf, sizeof buf, "enc%02d.", l);
        std::string pre = buf;
        p[pre + "ln1.gamma"] = TensorT<T>::full({D}, T(1));
        p[pre + "ln1.beta"] = TensorT<T>::zeros({D});
        for (const char* nm : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"})
            p[pre + nm] = trunc_normal<T>({D, D}, std02, rng);
        for (const char* nm : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"})
            p[pre + nm] = TensorT<T>::zeros({D});
        p[pre + "ln2.gamma"] = TensorT<T>::full({D}, T(1));
        p[pre + "ln2.beta"] = TensorT<T>::zeros({D});
        p[pre + "mlp.w1"] = trunc_normal<T>({D, 2 * D}, std02, rng);
        p[pre + "mlp.b1"] = TensorT<T>::zeros({2 * D});
        p[pre + "mlp.w2"] = trunc_normal<T>({2 * D, D}, std02, rng);
        p[pre + "mlp.b2"] = TensorT<T>::zeros({D});
    }
    p["head.ln.gamma"] = TensorT<T>::full({D}, T(1));
    p["head.ln.beta"] = TensorT<T>::zeros({D});
    int in = D;
    for (size_t i = 0; i < cfg.mlp_head_units.size(); ++i) {
        int out = cfg.mlp_head_units[i];
        std::string pre = "head.fc" + std::to_string(i) + ".";
        p[pre + "w"] = trunc_normal<T>({in, out}, std02, rng);
        p[pre + "b"] = TensorT<T>::zeros({out});
        in = out;
    }
    p["head.out.w"] = trunc_normal<T>({in, cfg.num_classes}, std02, rng);
    p["head.out.b"] = TensorT<T>::zeros({cfg.num_classes});
    return m;
}

template <class T>
ModelT<T> init_cnn(const CnnConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    ModelT<T> m;
    m.kind = ModelKind::cnn;
    m.cnn = cfg;
    auto& p = m.params;
    auto he = [&](Shape s, int fan_in) {
        return trunc_normal<T>(std::move(s), static_cast<T>(std::sqrt(2.0 / fan_in)), rng);
    };
    int cin = cfg.channels;
    int h = cfg.image_h, w = cfg.image_w;
    for (size_t i = 0; i < cfg.blocks.size(); ++i) {
        const auto& b = cfg.blocks[i];
        std::string pre = "conv" + std::to_string(i) + ".";
        p[pre + "w"] = he({b.kernel, b.kernel, cin, b.filters}, b.kernel * b.kernel * cin);
        p[pre + "b"] = TensorT<T>::zeros({b.filters});
        cin = b.filters;
        h = (h + b.stride - 1) / b.stride;
        w = (w + b.stride - 1) / b.stride;
    }
    int in = h * w * cin;
    for (size_t i = 0; i < cfg.head_units.size(); ++i) {
        int out = cfg.head_units[i];
        std::string pre = "head.fc" + std::to_string(i) + ".";
        p[pre + "w"] = he({in, out}, in);
        p[pre + "b"] = TensorT<T>::zeros({out});
        in = out;
    }
    p["head.out.w"] = he({in, cfg.num_classes}, in);
    p["head.out.b"] = TensorT<T>::zeros({cfg.num_classes});
    return m;
}

// ---- forward passes ----

// Optional side channel for the per-layer attention weights
// (one [B*heads, T, T] tensor per encoder layer).
template <class T>
ForwardT<T> vit_forward(TapeT<T>& tape, ModelT<T>& m, const TensorT<T>& images, bool train_mode,
                        std::mt19937_64& dropout_rng,
                        std::vector<TensorT<T>>* attn_out = nullptr, bool with_grad = true) {
    const ViTConfig& cfg = m.vit;
    if (images.rank() != 4 || images.dim(1) != cfg.image_h || images.dim(2) != cfg.image_w ||
        images.dim(3) != cfg.channels)
        throw DimensionError("vit_forward: input " + shape_str(images.shape) + " does not match " +
                             std::to_string(cfg.image_h) + "x" + std::to_string(cfg.image_w) + "x" +
                             std::to_string(cfg.channels));
    ForwardT<T> fw;
    auto P = detail::lift_params(tape, m, with_grad);
    fw.param_vars = P;
    using Var = typename TapeT<T>::Var;
    int D = cfg.embed_dim;
    int heads = cfg.num_heads;
    T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(D / heads)));
    double pdrop = train_mode ? cfg.transformer_dropout : 0.0;

    Var x = tape.leaf(images, false);
    Var tokens = tape.dense(tape.patchify(x, cfg.patch_size), P["patch_proj.w"], P["patch_proj.b"]);
    tokens = tape.prepend_token(tokens, P["cls_token"]);
    tokens = tape.add_pos(tokens, P["pos_embed"]);
    tokens = tape.dropout(tokens, pdrop, dropout_rng);

    char buf[64];
    for (int l = 0; l < cfg.num_layers; ++l) {
        std::snprintf(buf, sizeof buf, "enc%02d.", l);
        std::string pre = buf;
        // pre-norm MSA block
        Var y = tape.layernorm(tokens, P[pre + "ln1.gamma"], P[pre + "ln1.beta"], T(1e-5));
        Var q = tape.split_heads(tape.dense(y, P[pre + "attn.wq"], P[pre + "attn.bq"]), heads);
        Var k = tape.split_heads(tape.dense(y, P[pre + "attn.wk"], P[pre + "attn.bk"]), heads);
        Var v = tape.split_heads(tape.dense(y, P[pre + "attn.wv"], P[pre + "attn.bv"]), heads);
        Var scores = tape.scale(tape.batch_matmul(q, k, /*trans_b=*/true), inv_sqrt_dh);
        Var attn = tape.softmax_last(scores);
        if (attn_out) attn_out->push_back(attn->value);
        Var ctx = tape.merge_heads(tape.batch_matmul(attn, v), heads);
        ctx = tape.dense(ctx, P[pre + "attn.wo"], P[pre + "attn.bo"]);
        ctx = tape.dropout(ctx, pdrop, dropout_rng);
        tokens = tape.add(tokens, ctx);
        // pre-norm MLP block, hidden width 2D, GELU
        Var z = tape.layernorm(tokens, P[pre + "ln2.gamma"], P[pre + "ln2.beta"], T(1e-5));
        z = tape.gelu(tape.dense(z, P[pre + "mlp.w1"], P[pre + "mlp.b1"]));
        z = tape.dense(z, P[pre + "mlp.w2"], P[pre + "mlp.b2"]);
        z = tape.dropout(z, pdrop, dropout_rng);
        tokens = tape.add(tokens, z);
    }
    Var cls = tape.select_token(
        tape.layernorm(tokens, P["head.ln.gamma"], P["head.ln.beta"], T(1e-5)), 0);
    double hdrop = train_mode ? cfg.head_dropout : 0.0;
    Var h = cls;
    for (size_t i = 0; i < cfg.mlp_head_units.size(); ++i) {
        std::string pre = "head.fc" + std::to_string(i) + ".";
        h = tape.gelu(tape.dense(h, P[pre + "w"], P[pre + "b"]));
    }
    h = tape.dropout(h, hdrop, dropout_rng);
    fw.logits = tape.dense(h, P["head.out.w"], P["head.out.b"]);
    return fw;
}

template <class T>
ForwardT<T> cnn_forward(TapeT<T>& tape, ModelT<T>& m, const TensorT<T>& images, bool train_mode,
                        std::mt19937_64& dropout_rng, bool with_grad = true) {
    const CnnConfig& cfg = m.cnn;
    if (images.rank() != 4 || images.dim(1) != cfg.image_h || images.dim(2) != cfg.image_w ||
        images.dim(3) != cfg.channels)
        throw DimensionError("cnn_forward: input " + shape_str(images.shape) + " does not match " +
                             std::to_string(cfg.image_h) + "x" + std::to_string(cfg.image_w) + "x" +
                             std::to_string(cfg.channels));
    ForwardT<T> fw;
    auto P = detail::lift_params(tape, m, with_grad);
    fw.param_vars = P;
    using Var = typename TapeT<T>::Var;

    Var x = tape.leaf(images, false);
    Var skip = nullptr; // input of the current block pair
    for (size_t i = 0; i < cfg.blocks.size(); ++i) {
        if (cfg.residual && i % 2 == 0) skip = x;
        std::string pre = "conv" + std::to_string(i) + ".";
        Var y = tape.conv2d(x, P[pre + "w"], cfg.blocks[i].stride, Pad::same);
        y = tape.relu(tape.add_bias(y, P[pre + "b"]));
        // identity skip over each pair of blocks when shapes allow
        if (cfg.residual && i % 2 == 1 && skip && skip->value.same_shape(y->value))
            y = tape.add(y, skip);
        fw.taps.emplace_back("conv" + std::to_string(i), y);
        x = y;
    }
    long long flat = numel(x->value.shape) / x->value.dim(0);
    Var h = tape.reshape(x, {x->value.dim(0), static_cast<int>(flat)});
    double pdrop = train_mode ? cfg.head_dropout : 0.0;
    for (size_t i = 0; i < cfg.head_units.size(); ++i) {
        std::string pre = "head.fc" + std::to_string(i) + ".";
        h = tape.relu(tape.dense(h, P[pre + "w"], P[pre + "b"]));
        h = tape.dropout(h, pdrop, dropout_rng);
    }
    fw.logits = tape.dense(h, P["head.out.w"], P["head.out.b"]);
    return fw;
}

template <class T>
ForwardT<T> vit_forward(TapeT<T>& tape, ModelT<T>& m, const TensorT<T>& images, bool train_mode,
                        std::mt19937_64& dropout_rng, std::nullptr_t, bool with_grad = true) {
    return vit_forward(tape, m, images, train_mode, dropout_rng,
                       static_cast<std::vector<TensorT<T>>*>(nullptr), with_grad);
}

template <class T>
ForwardT<T> model_forward(TapeT<T>& tape, ModelT<T>& m, const TensorT<T>& images, bool train_mode,
                          std::mt19937_64& dropout_rng, bool with_grad = true) {
    return m.kind == ModelKind::vit
               ? vit_forward(tape, m, images, train_mode, dropout_rng,
                             static_cast<std::vector<TensorT<T>>*>(nullptr), with_grad)
               : cnn_forward(tape, m, images, train_mode, dropout_rng, with_grad);
}

// Marks all conv parameters frozen. Gradients still flow through the
// backbone (CAM and head training need them); the optimizer skips
// frozen entries.
template <class T>
void freeze_backbone(ModelT<T>& m) {
    if (m.kind != ModelKind::cnn)
        throw ContractError("freeze_backbone: only CNN models have a separable backbone");
    for (const auto& [name, t] : m.params)
        if (name.rfind("conv", 0) == 0) m.frozen.insert(name);
}

// ---- checkpoint file (magic "VCL1") ----

void save_checkpoint(const Model& m, const std::string& path);
Model load_checkpoint(const std::string& path);

} // namespace vcl
