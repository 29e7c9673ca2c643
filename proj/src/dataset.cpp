#include "vcl/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "vcl/error.hpp"
#include "vcl/pnm.hpp"
#include "vcl/rng.hpp"

namespace fs = std::filesystem;

namespace vcl {

std::vector<int> LabeledDataset::class_counts() const {
    std::vector<int> counts(class_names.size(), 0);
    for (int l : labels) counts[static_cast<size_t>(l)]++;
    return counts;
}

void LabeledDataset::validate() const {
    if (images.rank() != 4)
        throw DimensionError("dataset images must be [N,H,W,C], got " + shape_str(images.shape));
    if (static_cast<size_t>(images.dim(0)) != labels.size())
        throw DimensionError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                             std::to_string(labels.size()) + " labels");
    for (int l : labels)
        if (l < 0 || l >= num_classes())
            throw ContractError("label " + std::to_string(l) + " has no class name");
}

void SplitSpec::validate() const {
    if (train_frac <= 0 || val_frac <= 0 || test_frac <= 0)
        throw ContractError("split fractions must be positive");
    if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9)
        throw ContractError("split fractions must sum to 1");
}

// ---- loading ----

LabeledDataset load_dataset(const std::string& root_dir,
                            std::optional<std::pair<int, int>> resize_to) {
    if (!fs::is_directory(root_dir)) throw IoError("dataset root " + root_dir + " is not a directory");
    std::vector<std::string> class_dirs;
    for (const auto& e : fs::directory_iterator(root_dir))
        if (e.is_directory()) class_dirs.push_back(e.path().filename().string());
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.empty()) throw IoError("dataset root " + root_dir + " has no class directories");

    LabeledDataset ds;
    ds.class_names = class_dirs;
    std::vector<Tensor> loaded;
    int H = -1, W = -1, C = -1;
    for (size_t ci = 0; ci < class_dirs.size(); ++ci) {
        std::vector<std::string> files;
        for (const auto& e : fs::directory_iterator(fs::path(root_dir) / class_dirs[ci])) {
            std::string ext = e.path().extension().string();
            if (e.is_regular_file() && (ext == ".pgm" || ext == ".ppm" || ext == ".pnm"))
                files.push_back(e.path().string());
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            Tensor img;
            try {
                img = read_pnm(f);
            } catch (const Error& e) {
                throw IoError("failed to load " + f + ": " + e.what());
            }
            if (resize_to) {
                Tensor batch1({1, img.dim(0), img.dim(1), img.dim(2)}, img.data);
                batch1 = resize_bilinear(batch1, resize_to->first, resize_to->second);
                img = Tensor({batch1.dim(1), batch1.dim(2), batch1.dim(3)}, batch1.data);
            }
            if (C == -1) {
                H = img.dim(0); W = img.dim(1); C = img.dim(2);
            } else if (img.dim(2) != C) {
                throw IoError("mixed channel counts: " + f + " has " + std::to_string(img.dim(2)) +
                              " channels, expected " + std::to_string(C));
            } else if (img.dim(0) != H || img.dim(1) != W) {
                throw IoError("image size mismatch at " + f + " (" + shape_str(img.shape) +
                              "); pass a target size to resize on load");
            }
            loaded.push_back(std::move(img));
            ds.labels.push_back(static_cast<int>(ci));
        }
    }
    if (loaded.empty()) throw IoError("no PGM/PPM images found under " + root_dir);
    ds.images = Tensor::zeros({static_cast<int>(loaded.size()), H, W, C});
    size_t stride = static_cast<size_t>(H) * W * C;
    for (size_t i = 0; i < loaded.size(); ++i)
        std::copy(loaded[i].data.begin(), loaded[i].data.end(), ds.images.data.begin() + i * stride);
    return ds;
}

// ---- resize ----

Tensor resize_bilinear(const Tensor& images, int target_h, int target_w) {
    if (target_h < 1 || target_w < 1) throw ContractError("resize target must be positive");
    if (images.rank() != 4)
        throw DimensionError("resize expects [N,h,w,C], got " + shape_str(images.shape));
    int n = images.dim(0), h = images.dim(1), w = images.dim(2), c = images.dim(3);
    if (h == target_h && w == target_w) return images;
    Tensor out = Tensor::zeros({n, target_h, target_w, c});
    // corner-aligned sampling
    double sy = target_h > 1 ? static_cast<double>(h - 1) / (target_h - 1) : 0.0;
    double sx = target_w > 1 ? static_cast<double>(w - 1) / (target_w - 1) : 0.0;
    for (int b = 0; b < n; ++b)
        for (int y = 0; y < target_h; ++y) {
            double fy = y * sy;
            int y0 = static_cast<int>(fy);
            int y1 = std::min(y0 + 1, h - 1);
            float wy = static_cast<float>(fy - y0);
            for (int x = 0; x < target_w; ++x) {
                double fx = x * sx;
                int x0 = static_cast<int>(fx);
                int x1 = std::min(x0 + 1, w - 1);
                float wx = static_cast<float>(fx - x0);
                for (int ch = 0; ch < c; ++ch) {
                    auto at = [&](int yy, int xx) {
                        return images.data[((static_cast<size_t>(b) * h + yy) * w + xx) * c + ch];
                    };
                    float top = at(y0, x0) * (1 - wx) + at(y0, x1) * wx;
                    float bot = at(y1, x0) * (1 - wx) + at(y1, x1) * wx;
                    out.data[((static_cast<size_t>(b) * target_h + y) * target_w + x) * c + ch] =
                        top * (1 - wy) + bot * wy;
                }
            }
        }
    return out;
}

// ---- SMOTE ----

LabeledDataset smote_balance(const LabeledDataset& ds, int k, uint64_t seed) {
    ds.validate();
    if (ds.size() == 0) throw ContractError("smote_balance: empty dataset");
    if (k < 1) throw ContractError("smote_balance: k must be >= 1");
    std::vector<int> counts = ds.class_counts();
    double mean = 0;
    for (int c : counts) mean += c;
    mean /= static_cast<double>(counts.size());
    int target = static_cast<int>(std::llround(mean));

    size_t dim = ds.images.size() / static_cast<size_t>(ds.size());
    auto pixel_row = [&](int i) { return ds.images.data.data() + static_cast<size_t>(i) * dim; };

    std::vector<Tensor> synth_images;
    std::vector<int> synth_labels;
    for (int c = 0; c < ds.num_classes(); ++c) {
        if (counts[c] >= target) continue;
        if (counts[c] == 1)
            throw ContractError("smote_balance: class '" + ds.class_names[c] +
                                "' has a single sample and no neighbor to interpolate with");
        std::vector<int> members;
        for (int i = 0; i < ds.size(); ++i)
            if (ds.labels[i] == c) members.push_back(i);
        int m = static_cast<int>(members.size());
        int kk = std::min(k, m - 1);
        // k nearest same-class neighbors per member, Euclidean in pixel space
        std::vector<std::vector<int>> nns(members.size());
        for (int a = 0; a < m; ++a) {
            std::vector<std::pair<double, int>> d;
            d.reserve(members.size() - 1);
            for (int b = 0; b < m; ++b) {
                if (b == a) continue;
                const float* pa = pixel_row(members[a]);
                const float* pb = pixel_row(members[b]);
                double s = 0;
                for (size_t j = 0; j < dim; ++j) {
                    double diff = static_cast<double>(pa[j]) - pb[j];
                    s += diff * diff;
                }
                d.emplace_back(s, b);
            }
            std::sort(d.begin(), d.end());
            for (int j = 0; j < kk; ++j) nns[a].push_back(d[static_cast<size_t>(j)].second);
        }
        auto rng = make_rng(seed, "smote", static_cast<uint64_t>(c));
        std::uniform_int_distribution<int> pick(0, kk - 1);
        std::uniform_real_distribution<double> lambda(0.0, 1.0);
        for (int s = 0; s < target - counts[c]; ++s) {
            int base = s % m;
            int nn = nns[static_cast<size_t>(base)][static_cast<size_t>(pick(rng))];
            float lam = static_cast<float>(lambda(rng));
            Tensor img = Tensor::zeros({static_cast<int>(dim)});
            const float* pa = pixel_row(members[static_cast<size_t>(base)]);
            const float* pb = pixel_row(members[static_cast<size_t>(nn)]);
            for (size_t j = 0; j < dim; ++j) img.data[j] = pa[j] + lam * (pb[j] - pa[j]);
            synth_images.push_back(std::move(img));
            synth_labels.push_back(c);
        }
    }

    LabeledDataset out;
    out.class_names = ds.class_names;
    int total = ds.size() + static_cast<int>(synth_images.size());
    out.images = Tensor::zeros({total, ds.images.dim(1), ds.images.dim(2), ds.images.dim(3)});
    std::copy(ds.images.data.begin(), ds.images.data.end(), out.images.data.begin());
    out.labels = ds.labels;
    for (size_t i = 0; i < synth_images.size(); ++i) {
        std::copy(synth_images[i].data.begin(), synth_images[i].data.end(),
                  out.images.data.begin() + (static_cast<size_t>(ds.size()) + i) * dim);
        out.labels.push_back(synth_labels[i]);
    }
    return out;
}

// ---- augmentation ----

namespace {

// Bilinear lookup with zero fill outside the image.
float sample_zero(const float* img, int h, int w, int c, double fy, double fx, int ch) {
    if (fy <= -1.0 || fy >= h || fx <= -1.0 || fx >= w) return 0.0f;
    int y0 = static_cast<int>(std::floor(fy));
    int x0 = static_cast<int>(std::floor(fx));
    float wy = static_cast<float>(fy - y0);
    float wx = static_cast<float>(fx - x0);
    auto at = [&](int yy, int xx) -> float {
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0f;
        return img[(static_cast<size_t>(yy) * w + xx) * c + ch];
    };
    float top = at(y0, x0) * (1 - wx) + at(y0, x0 + 1) * wx;
    float bot = at(y0 + 1, x0) * (1 - wx) + at(y0 + 1, x0 + 1) * wx;
    return top * (1 - wy) + bot * wy;
}

} // namespace

Tensor augment(const Tensor& batch, const AugmentConfig& cfg, uint64_t base_seed) {
    if (batch.rank() != 4)
        throw DimensionError("augment expects [N,H,W,C], got " + shape_str(batch.shape));
    int n = batch.dim(0), h = batch.dim(1), w = batch.dim(2), c = batch.dim(3);
    Tensor out = batch;
    size_t stride = static_cast<size_t>(h) * w * c;
    const double two_pi = 2.0 * 3.14159265358979323846;
    for (int i = 0; i < n; ++i) {
        auto rng = make_rng(cfg.seed, "augment", mix64(base_seed) ^ static_cast<uint64_t>(i));
        std::uniform_real_distribution<double> u(0.0, 1.0);
        // draw everything up front so the stream is independent of which
        // transforms end up active
        bool flip = u(rng) < cfg.flip_prob;
        double angle = (2.0 * u(rng) - 1.0) * cfg.rotation_factor * two_pi;
        double zh = 1.0 + (2.0 * u(rng) - 1.0) * cfg.zoom_factor;
        double zw = 1.0 + (2.0 * u(rng) - 1.0) * cfg.zoom_factor;

        float* dst = out.data.data() + static_cast<size_t>(i) * stride;
        if (flip) {
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w / 2; ++x)
                    for (int ch = 0; ch < c; ++ch)
                        std::swap(dst[(static_cast<size_t>(y) * w + x) * c + ch],
                                  dst[(static_cast<size_t>(y) * w + (w - 1 - x)) * c + ch]);
        }
        double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
        if (angle != 0.0) {
            std::vector<float> src(dst, dst + stride);
            double cs = std::cos(angle), sn = std::sin(angle);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    double dy = y - cy, dx = x - cx;
                    double fy = cy + cs * dy - sn * dx;
                    double fx = cx + sn * dy + cs * dx;
                    for (int ch = 0; ch < c; ++ch)
                        dst[(static_cast<size_t>(y) * w + x) * c + ch] =
                            sample_zero(src.data(), h, w, c, fy, fx, ch);
                }
        }
        if (zh != 1.0 || zw != 1.0) {
            std::vector<float> src(dst, dst + stride);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    double fy = cy + (y - cy) * zh;
                    double fx = cx + (x - cx) * zw;
                    for (int ch = 0; ch < c; ++ch)
                        dst[(static_cast<size_t>(y) * w + x) * c + ch] =
                            sample_zero(src.data(), h, w, c, fy, fx, ch);
                }
        }
        for (size_t j = 0; j < stride; ++j) dst[j] = std::clamp(dst[j], 0.0f, 1.0f);
    }
    return out;
}

// ---- splitting ----

namespace {

LabeledDataset take(const LabeledDataset& ds, const std::vector<int>& idx) {
    LabeledDataset out;
    out.class_names = ds.class_names;
    int h = ds.images.dim(1), w = ds.images.dim(2), c = ds.images.dim(3);
    out.images = Tensor::zeros({static_cast<int>(idx.size()), h, w, c});
    size_t stride = static_cast<size_t>(h) * w * c;
    for (size_t i = 0; i < idx.size(); ++i) {
        std::copy(ds.images.data.begin() + static_cast<size_t>(idx[i]) * stride,
                  ds.images.data.begin() + (static_cast<size_t>(idx[i]) + 1) * stride,
                  out.images.data.begin() + i * stride);
        out.labels.push_back(ds.labels[static_cast<size_t>(idx[i])]);
    }
    return out;
}

} // namespace

SplitResult stratified_split(const LabeledDataset& ds, const SplitSpec& spec) {
    spec.validate();
    ds.validate();
    std::vector<int> train_idx, val_idx, test_idx;
    for (int c = 0; c < ds.num_classes(); ++c) {
        std::vector<int> members;
        for (int i = 0; i < ds.size(); ++i)
            if (ds.labels[i] == c) members.push_back(i);
        if (members.size() < 3)
            throw ContractError("stratified_split: class '" + ds.class_names[c] + "' has only " +
                                std::to_string(members.size()) + " samples (need >= 3)");
        auto rng = make_rng(spec.seed, "split", static_cast<uint64_t>(c));
        std::shuffle(members.begin(), members.end(), rng);
        int n = static_cast<int>(members.size());
        int n_val = static_cast<int>(std::floor(n * spec.val_frac));
        int n_test = static_cast<int>(std::floor(n * spec.test_frac));
        int n_train = n - n_val - n_test; // remainders go to train
        for (int i = 0; i < n; ++i) {
            if (i < n_train)
                train_idx.push_back(members[static_cast<size_t>(i)]);
            else if (i < n_train + n_val)
                val_idx.push_back(members[static_cast<size_t>(i)]);
            else
                test_idx.push_back(members[static_cast<size_t>(i)]);
        }
    }
    return {take(ds, train_idx), take(ds, val_idx), take(ds, test_idx)};
}

// ---- synthetic data ----

LabeledDataset synth_dataset(int num_classes, int per_class, int h, int w, uint64_t seed) {
    if (num_classes < 1 || per_class < 1 || h < 1 || w < 1)
        throw ContractError("synth_dataset arguments must be positive");
    LabeledDataset ds;
    for (int c = 0; c < num_classes; ++c) ds.class_names.push_back("class" + std::to_string(c));
    ds.images = Tensor::zeros({num_classes * per_class, h, w, 1});
    const double pi = 3.14159265358979323846;
    double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
    double thickness = std::max(1.5, h / 10.0);
    int idx = 0;
    for (int c = 0; c < num_classes; ++c) {
        double angle = c * pi / num_classes;
        double nx = -std::sin(angle), ny = std::cos(angle);
        for (int s = 0; s < per_class; ++s, ++idx) {
            auto rng = make_rng(seed, "synth", static_cast<uint64_t>(idx));
            std::uniform_real_distribution<double> noise(0.0, 0.2);
            std::uniform_real_distribution<double> bar(0.75, 1.0);
            float* img = ds.images.data.data() + static_cast<size_t>(idx) * h * w;
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    double d = std::abs(ny * (y - cy) + nx * (x - cx));
                    img[static_cast<size_t>(y) * w + x] = static_cast<float>(
                        d < thickness ? bar(rng) : noise(rng));
                }
            ds.labels.push_back(c);
        }
    }
    return ds;
}

// ---- writing ----

void write_dataset(const LabeledDataset& ds, const std::string& root_dir) {
    ds.validate();
    int c = ds.images.dim(3);
    if (c != 1 && c != 3)
        throw ContractError("write_dataset: only 1- or 3-channel images can be written");
    fs::create_directories(root_dir);
    std::vector<int> counters(ds.class_names.size(), 0);
    int h = ds.images.dim(1), w = ds.images.dim(2);
    size_t stride = static_cast<size_t>(h) * w * c;
    for (size_t i = 0; i < ds.class_names.size(); ++i)
        fs::create_directories(fs::path(root_dir) / ds.class_names[i]);
    for (int i = 0; i < ds.size(); ++i) {
        int cls = ds.labels[static_cast<size_t>(i)];
        char name[32];
        std::snprintf(name, sizeof name, "%05d.%s", counters[static_cast<size_t>(cls)]++,
                      c == 1 ? "pgm" : "ppm");
        Tensor img({h, w, c},
                   std::vector<float>(ds.images.data.begin() + static_cast<size_t>(i) * stride,
                                      ds.images.data.begin() + (static_cast<size_t>(i) + 1) * stride));
        std::string path = (fs::path(root_dir) / ds.class_names[static_cast<size_t>(cls)] / name).string();
        if (c == 1)
            write_pgm(path, img);
        else
            write_ppm(path, img);
    }
}

} // namespace vcl
