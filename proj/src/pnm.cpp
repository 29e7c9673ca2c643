#include "vcl/pnm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "vcl/error.hpp"

namespace vcl {

namespace {

// Skips whitespace and '#' comments, then reads one unsigned integer.
int next_int(std::istream& in, const std::string& path) {
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {
            while ((c = in.get()) != EOF && c != '\n') {}
        } else if (!std::isspace(c)) {
            in.unget();
            break;
        }
    }
    int v;
    if (!(in >> v)) throw IoError("malformed PNM header/body in " + path);
    return v;
}

} // namespace

Tensor read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    char p, kind;
    in.get(p);
    in.get(kind);
    if (p != 'P' || (kind != '2' && kind != '3' && kind != '5' && kind != '6'))
        throw IoError("unsupported PNM magic in " + path);
    bool ascii = kind == '2' || kind == '3';
    int channels = (kind == '3' || kind == '6') ? 3 : 1;
    int w = next_int(in, path);
    int h = next_int(in, path);
    int maxval = next_int(in, path);
    if (w < 1 || h < 1 || maxval < 1 || maxval > 65535)
        throw IoError("bad PNM dimensions/maxval in " + path);
    size_t count = static_cast<size_t>(w) * h * channels;
    Tensor img = Tensor::zeros({h, w, channels});
    float scale = 1.0f / static_cast<float>(maxval);
    if (ascii) {
        for (size_t i = 0; i < count; ++i) {
            int v = next_int(in, path);
            if (v < 0 || v > maxval) throw IoError("sample out of range in " + path);
            img.data[i] = static_cast<float>(v) * scale;
        }
    } else {
        in.get(); // single whitespace byte after maxval
        int bytes = maxval > 255 ? 2 : 1;
        std::vector<unsigned char> raw(count * bytes);
        in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
        if (static_cast<size_t>(in.gcount()) != raw.size())
            throw IoError("truncated PNM data in " + path);
        for (size_t i = 0; i < count; ++i) {
            int v = bytes == 1 ? raw[i] : (raw[2 * i] << 8) | raw[2 * i + 1]; // big-endian
            img.data[i] = static_cast<float>(v) * scale;
        }
    }
    return img;
}

namespace {

void write_binary(const std::string& path, const Tensor& image, int channels, const char* magic) {
    Shape s = image.shape;
    if (s.size() == 2) s.push_back(1);
    if (s.size() != 3 || s[2] != channels)
        throw DimensionError("PNM writer: image shape " + shape_str(image.shape) +
                             " has wrong channel count (want " + std::to_string(channels) + ")");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << magic << "\n" << s[1] << " " << s[0] << "\n255\n";
    std::vector<unsigned char> raw(image.size());
    for (size_t i = 0; i < image.size(); ++i) {
        float v = std::clamp(image.data[i], 0.0f, 1.0f);
        raw[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw IoError("write failed for " + path);
}

} // namespace

void write_pgm(const std::string& path, const Tensor& image) {
    write_binary(path, image, 1, "P5");
}

void write_ppm(const std::string& path, const Tensor& image) {
    write_binary(path, image, 3, "P6");
}

} // namespace vcl
