#include "vcl/model.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace vcl {

namespace {

std::string join_ints(const std::vector<int>& v) {
    std::ostringstream os;
    for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
}

std::vector<int> split_ints(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) out.push_back(std::stoi(tok));
    return out;
}

std::string join_strings(const std::vector<std::string>& v) {
    std::ostringstream os;
    for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
}

std::vector<std::string> split_strings(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) out.push_back(tok);
    return out;
}

std::string config_text(const Model& m) {
    std::ostringstream os;
    if (m.kind == ModelKind::vit) {
        const auto& c = m.vit;
        os << "kind=vit\n"
           << "image_h=" << c.image_h << "\nimage_w=" << c.image_w
           << "\nchannels=" << c.channels << "\npatch_size=" << c.patch_size
           << "\nembed_dim=" << c.embed_dim << "\nnum_layers=" << c.num_layers
           << "\nnum_heads=" << c.num_heads
           << "\nmlp_head_units=" << join_ints(c.mlp_head_units)
           << "\ntransformer_dropout=" << c.transformer_dropout
           << "\nhead_dropout=" << c.head_dropout << "\nnum_classes=" << c.num_classes << "\n";
    } else {
        const auto& c = m.cnn;
        os << "kind=cnn\n"
           << "image_h=" << c.image_h << "\nimage_w=" << c.image_w
           << "\nchannels=" << c.channels << "\nblocks=";
        for (size_t i = 0; i < c.blocks.size(); ++i)
            os << (i ? "," : "") << c.blocks[i].filters << "x" << c.blocks[i].kernel << "x"
               << c.blocks[i].stride;
        os << "\nresidual=" << (c.residual ? 1 : 0)
           << "\nhead_units=" << join_ints(c.head_units) << "\nhead_dropout=" << c.head_dropout
           << "\nnum_classes=" << c.num_classes << "\n";
    }
    if (!m.class_names.empty()) os << "class_names=" << join_strings(m.class_names) << "\n";
    if (!m.frozen.empty()) {
        os << "frozen=";
        size_t i = 0;
        for (const auto& name : m.frozen) os << (i++ ? "," : "") << name;
        os << "\n";
    }
    return os.str();
}

void apply_config_text(Model& m, const std::string& text) {
    std::stringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        std::string key = line.substr(0, eq);
        std::string val = line.substr(eq + 1);
        if (key == "kind") {
            if (val != "vit" && val != "cnn")
                throw IoError("checkpoint: unknown model kind '" + val + "'");
            m.kind = val == "vit" ? ModelKind::vit : ModelKind::cnn;
        } else if (key == "class_names") {
            m.class_names = split_strings(val);
        } else if (key == "frozen") {
            m.frozen.clear();
            for (auto& name : split_strings(val)) m.frozen.insert(name);
        } else if (key == "blocks") {
            m.cnn.blocks.clear();
            for (const auto& part : split_strings(val)) {
                ConvBlock b;
                if (std::sscanf(part.c_str(), "%dx%dx%d", &b.filters, &b.kernel, &b.stride) != 3)
                    throw IoError("checkpoint: bad conv block spec '" + part + "'");
                m.cnn.blocks.push_back(b);
            }
        } else if (key == "mlp_head_units") {
            m.vit.mlp_head_units = split_ints(val);
        } else if (key == "head_units") {
            m.cnn.head_units = split_ints(val);
        } else if (key == "image_h") {
            m.vit.image_h = m.cnn.image_h = std::stoi(val);
        } else if (key == "image_w") {
            m.vit.image_w = m.cnn.image_w = std::stoi(val);
        } else if (key == "channels") {
            m.vit.channels = m.cnn.channels = std::stoi(val);
        } else if (key == "num_classes") {
            m.vit.num_classes = m.cnn.num_classes = std::stoi(val);
        } else if (key == "patch_size") {
            m.vit.patch_size = std::stoi(val);
        } else if (key == "embed_dim") {
            m.vit.embed_dim = std::stoi(val);
        } else if (key == "num_layers") {
            m.vit.num_layers = std::stoi(val);
        } else if (key == "num_heads") {
            m.vit.num_heads = std::stoi(val);
        } else if (key == "transformer_dropout") {
            m.vit.transformer_dropout = std::stod(val);
        } else if (key == "head_dropout") {
            m.vit.head_dropout = std::stod(val);
            m.cnn.head_dropout = m.vit.head_dropout;
        } else if (key == "residual") {
            m.cnn.residual = val != "0";
        } else {
            throw IoError("checkpoint: unknown config key '" + key + "'");
        }
    }
}

template <class T>
void write_raw(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T read_raw(std::istream& in, const std::string& path) {
    T v;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw IoError("truncated checkpoint " + path);
    return v;
}

} // namespace

void save_checkpoint(const Model& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path);
    out.write("VCL1", 4);
    out.put(m.kind == ModelKind::vit ? 'V' : 'C');
    std::string cfg = config_text(m);
    write_raw(out, static_cast<uint32_t>(cfg.size()));
    out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    write_raw(out, static_cast<uint32_t>(m.params.size()));
    // std::map iterates in sorted name order, which is the file order
    for (const auto& [name, t] : m.params) {
        write_raw(out, static_cast<uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        out.put(static_cast<char>(t.rank()));
        for (int d : t.shape) write_raw(out, static_cast<uint32_t>(d));
        out.write(reinterpret_cast<const char*>(t.data.data()),
                  static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    }
    if (!out) throw IoError("write failed for checkpoint " + path);
}

Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "VCL1", 4) != 0)
        throw IoError("bad checkpoint header in " + path);
    char kind = static_cast<char>(in.get());
    if (kind != 'V' && kind != 'C') throw IoError("bad checkpoint header in " + path);
    auto cfg_len = read_raw<uint32_t>(in, path);
    std::string cfg(cfg_len, '\0');
    in.read(cfg.data(), cfg_len);
    if (!in) throw IoError("truncated checkpoint " + path);
    Model m;
    apply_config_text(m, cfg);
    if ((kind == 'V') != (m.kind == ModelKind::vit))
        throw IoError("checkpoint kind byte disagrees with config in " + path);
    auto n_params = read_raw<uint32_t>(in, path);
    for (uint32_t i = 0; i < n_params; ++i) {
        auto name_len = read_raw<uint32_t>(in, path);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        int rank = in.get();
        if (!in || rank < 0 || rank > 4) throw IoError("corrupt parameter record in " + path);
        Shape shape;
        for (int d = 0; d < rank; ++d) shape.push_back(static_cast<int>(read_raw<uint32_t>(in, path)));
        Tensor t = Tensor::zeros(shape);
        in.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(float)));
        if (!in) throw IoError("truncated checkpoint " + path);
        m.params.emplace(std::move(name), std::move(t));
    }
    return m;
}

} // namespace vcl
