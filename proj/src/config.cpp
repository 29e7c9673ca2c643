#include "vcl/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace vcl {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::vector<int> parse_int_list(const std::string& s, int line_no) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        tok = trim(tok);
        if (tok.empty()) continue;
        try {
            out.push_back(std::stoi(tok));
        } catch (...) {
            throw ContractError("config line " + std::to_string(line_no) + ": bad integer '" +
                                tok + "'");
        }
    }
    return out;
}

std::vector<ConvBlock> parse_blocks(const std::string& s, int line_no) {
    std::vector<ConvBlock> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        tok = trim(tok);
        if (tok.empty()) continue;
        ConvBlock b;
        if (std::sscanf(tok.c_str(), "%dx%dx%d", &b.filters, &b.kernel, &b.stride) != 3)
            throw ContractError("config line " + std::to_string(line_no) +
                                ": conv block must look like 16x3x1, got '" + tok + "'");
        out.push_back(b);
    }
    return out;
}

bool parse_bool(const std::string& v, int line_no) {
    if (v == "true" || v == "on" || v == "1") return true;
    if (v == "false" || v == "off" || v == "0") return false;
    throw ContractError("config line " + std::to_string(line_no) + ": expected boolean, got '" +
                        v + "'");
}

} // namespace

RunConfig RunConfig::parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_text(buf.str());
}

RunConfig RunConfig::parse_text(const std::string& text) {
    RunConfig cfg;
    cfg.raw_text = text;
    std::stringstream ss(text);
    std::string line;
    int line_no = 0;
    while (std::getline(ss, line)) {
        ++line_no;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ContractError("config line " + std::to_string(line_no) +
                                ": expected key=value, got '" + line + "'");
        std::string key = trim(line.substr(0, eq));
        std::string val = trim(line.substr(eq + 1));
        auto as_int = [&] {
            try {
                return std::stoi(val);
            } catch (...) {
                throw ContractError("config line " + std::to_string(line_no) + ": bad integer '" +
                                    val + "'");
            }
        };
        auto as_double = [&] {
            try {
                return std::stod(val);
            } catch (...) {
                throw ContractError("config line " + std::to_string(line_no) + ": bad number '" +
                                    val + "'");
            }
        };
        if (key == "model") {
            if (val != "cnn" && val != "vit")
                throw ContractError("config line " + std::to_string(line_no) +
                                    ": model must be cnn or vit");
            cfg.model = val;
        } else if (key == "data_root") {
            cfg.data_root = val;
        } else if (key == "out_dir") {
            cfg.out_dir = val;
        } else if (key == "seed") {
            cfg.seed = static_cast<uint64_t>(std::stoull(val));
        } else if (key == "image_h") {
            cfg.image_h = as_int();
        } else if (key == "image_w") {
            cfg.image_w = as_int();
        } else if (key == "train_frac") {
            cfg.split.train_frac = as_double();
        } else if (key == "val_frac") {
            cfg.split.val_frac = as_double();
        } else if (key == "test_frac") {
            cfg.split.test_frac = as_double();
        } else if (key == "augment") {
            cfg.augment_train = parse_bool(val, line_no);
        } else if (key == "flip_prob") {
            cfg.aug.flip_prob = as_double();
        } else if (key == "rotation_factor") {
            cfg.aug.rotation_factor = as_double();
        } else if (key == "zoom_factor") {
            cfg.aug.zoom_factor = as_double();
        } else if (key == "smote") {
            if (val == "off")
                cfg.smote = SmoteMode::off;
            else if (val == "pre_split")
                cfg.smote = SmoteMode::pre_split;
            else if (val == "train_only")
                cfg.smote = SmoteMode::train_only;
            else
                throw ContractError("config line " + std::to_string(line_no) +
                                    ": smote must be off, pre_split or train_only");
        } else if (key == "smote_k") {
            cfg.smote_k = as_int();
        } else if (key == "patch_size") {
            cfg.vit.patch_size = as_int();
        } else if (key == "embed_dim") {
            cfg.vit.embed_dim = as_int();
        } else if (key == "num_layers") {
            cfg.vit.num_layers = as_int();
        } else if (key == "num_heads") {
            cfg.vit.num_heads = as_int();
        } else if (key == "mlp_head_units") {
            cfg.vit.mlp_head_units = parse_int_list(val, line_no);
        } else if (key == "transformer_dropout") {
            cfg.vit.transformer_dropout = as_double();
        } else if (key == "head_dropout") {
            cfg.vit.head_dropout = as_double();
            cfg.cnn.head_dropout = cfg.vit.head_dropout;
        } else if (key == "cnn_blocks") {
            cfg.cnn.blocks = parse_blocks(val, line_no);
        } else if (key == "residual") {
            cfg.cnn.residual = parse_bool(val, line_no);
        } else if (key == "cnn_head_units") {
            cfg.cnn.head_units = parse_int_list(val, line_no);
        } else if (key == "freeze_backbone") {
            cfg.freeze_backbone = parse_bool(val, line_no);
        } else if (key == "learning_rate") {
            cfg.train.learning_rate = as_double();
            cfg.learning_rate_set = true;
        } else if (key == "epochs") {
            cfg.train.epochs = as_int();
        } else if (key == "batch_size") {
            cfg.train.batch_size = as_int();
        } else if (key == "repetitions") {
            cfg.train.repetitions = as_int();
        } else if (key == "adam_beta1") {
            cfg.train.adam_beta1 = as_double();
        } else if (key == "adam_beta2") {
            cfg.train.adam_beta2 = as_double();
        } else if (key == "adam_eps") {
            cfg.train.adam_eps = as_double();
        } else if (key == "metric_average") {
            if (val == "macro")
                cfg.metric_average = Average::macro;
            else if (val == "weighted")
                cfg.metric_average = Average::weighted;
            else
                throw ContractError("config line " + std::to_string(line_no) +
                                    ": metric_average must be macro or weighted");
        } else {
            throw ContractError("config line " + std::to_string(line_no) + ": unknown key '" +
                                key + "'");
        }
    }
    return cfg;
}

void RunConfig::finalize(int channels, int num_classes) {
    vit.image_h = cnn.image_h = image_h;
    vit.image_w = cnn.image_w = image_w;
    vit.channels = cnn.channels = channels;
    vit.num_classes = cnn.num_classes = num_classes;
    aug.target_h = image_h;
    aug.target_w = image_w;
    aug.seed = seed;
    split.seed = seed;
    train.seed = seed;
    if (!learning_rate_set) train.learning_rate = model == "vit" ? 1e-4 : 1e-5;
}

ModelSpec RunConfig::model_spec() const {
    if (model == "vit") return vit;
    return cnn;
}

} // namespace vcl
