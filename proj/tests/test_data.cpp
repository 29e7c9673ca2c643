#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "vcl/dataset.hpp"
#include "vcl/pnm.hpp"

using namespace vcl;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("vcl_test_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

Tensor const_image(int h, int w, float v) {
    Tensor t = Tensor::zeros({h, w, 1});
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
}

// distance from point p to segment a..b in flattened pixel space
double segment_distance(const std::vector<float>& p, const float* a, const float* b, size_t n) {
    double dot = 0, len2 = 0;
    for (size_t i = 0; i < n; ++i) {
        double d = double(b[i]) - a[i];
        dot += (double(p[i]) - a[i]) * d;
        len2 += d * d;
    }
    double t = len2 > 0 ? std::clamp(dot / len2, 0.0, 1.0) : 0.0;
    double dist2 = 0;
    for (size_t i = 0; i < n; ++i) {
        double proj = a[i] + t * (double(b[i]) - a[i]);
        double d = p[i] - proj;
        dist2 += d * d;
    }
    return std::sqrt(dist2);
}

LabeledDataset make_counted(const std::vector<int>& counts, int h, int w, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0, 1);
    int n = 0;
    for (int c : counts) n += c;
    LabeledDataset ds;
    ds.images = Tensor::zeros({n, h, w, 1});
    for (auto& v : ds.images.data) v = u(rng);
    for (size_t c = 0; c < counts.size(); ++c) {
        ds.class_names.push_back("class" + std::to_string(c));
        for (int i = 0; i < counts[c]; ++i) ds.labels.push_back(int(c));
    }
    return ds;
}

} // namespace

TEST_CASE("pnm round-trips and normalization endpoints") {
    TempDir td;
    SUBCASE("pgm endpoints: 255 -> 1.0, 0 -> 0.0") {
        std::ofstream f(td.path / "a.pgm", std::ios::binary);
        f << "P5\n2 1\n255\n";
        unsigned char px[2] = {255, 0};
        f.write(reinterpret_cast<char*>(px), 2);
        f.close();
        Tensor t = read_pnm((td.path / "a.pgm").string());
        CHECK(t.shape == std::vector<int>{1, 2, 1});
        CHECK(t.data[0] == 1.0f);
        CHECK(t.data[1] == 0.0f);
    }
    SUBCASE("ascii P2 with comments") {
        std::ofstream f(td.path / "b.pgm");
        f << "P2\n# a comment\n2 2\n100\n0 50 100 25\n";
        f.close();
        Tensor t = read_pnm((td.path / "b.pgm").string());
        CHECK(t.data[1] == doctest::Approx(0.5f));
        CHECK(t.data[2] == 1.0f);
    }
    SUBCASE("ppm gives three channels") {
        std::ofstream f(td.path / "c.ppm", std::ios::binary);
        f << "P6\n1 1\n255\n";
        unsigned char px[3] = {255, 0, 128};
        f.write(reinterpret_cast<char*>(px), 3);
        f.close();
        Tensor t = read_pnm((td.path / "c.ppm").string());
        CHECK(t.shape == std::vector<int>{1, 1, 3});
        CHECK(t.data[0] == 1.0f);
    }
    SUBCASE("write/read round trip at 8 bits") {
        Tensor img = Tensor::zeros({3, 4, 1});
        for (size_t i = 0; i < img.size(); ++i) img.data[i] = float(i) / 11.0f;
        auto p = (td.path / "rt.pgm").string();
        write_pgm(p, img);
        Tensor back = read_pnm(p);
        for (size_t i = 0; i < img.size(); ++i)
            CHECK(back.data[i] == doctest::Approx(img.data[i]).epsilon(1.0 / 255));
    }
    SUBCASE("missing file is an io error naming it") {
        CHECK_THROWS_AS(read_pnm((td.path / "nope.pgm").string()), IoError);
    }
    SUBCASE("malformed header is rejected") {
        std::ofstream f(td.path / "bad.pgm");
        f << "Q5 not a pixmap";
        f.close();
        CHECK_THROWS(read_pnm((td.path / "bad.pgm").string()));
    }
}

TEST_CASE("load_dataset walks sorted class directories") {
    TempDir td;
    for (const char* cls : {"meningioma", "glioma"}) {
        fs::create_directories(td.path / cls);
        for (int i = 0; i < 2; ++i)
            write_pgm((td.path / cls / (std::to_string(i) + ".pgm")).string(),
                      const_image(4, 4, 0.25f * (i + 1)));
    }
    LabeledDataset ds = load_dataset(td.path.string());
    CHECK(ds.size() == 4);
    CHECK(ds.class_names == std::vector<std::string>{"glioma", "meningioma"});
    CHECK(ds.labels == std::vector<int>{0, 0, 1, 1});
    CHECK(ds.class_counts() == std::vector<int>{2, 2});

    SUBCASE("empty root is an error") {
        TempDir empty;
        CHECK_THROWS(load_dataset(empty.path.string()));
    }
    SUBCASE("mixed channel counts are rejected") {
        Tensor rgb = Tensor::zeros({4, 4, 3});
        write_ppm((td.path / "glioma" / "x.ppm").string(), rgb);
        CHECK_THROWS(load_dataset(td.path.string()));
    }
    SUBCASE("size mismatch names the file unless resizing") {
        write_pgm((td.path / "glioma" / "big.pgm").string(), const_image(8, 8, 0.5f));
        CHECK_THROWS_WITH_AS(load_dataset(td.path.string()), doctest::Contains("big.pgm"),
                             IoError);
        LabeledDataset r = load_dataset(td.path.string(), std::make_pair(4, 4));
        CHECK(r.size() == 5);
        CHECK(r.images.dim(1) == 4);
    }
}

TEST_CASE("bilinear resize") {
    SUBCASE("identity is bitwise") {
        Tensor x = Tensor::zeros({1, 2, 2, 1});
        x.data = {0.1f, 0.9f, 0.3f, 0.7f};
        Tensor y = resize_bilinear(x, 2, 2);
        CHECK(y.data == x.data);
    }
    SUBCASE("1x2 [0,1] -> 1x3 gives [0, 0.5, 1]") {
        Tensor x = Tensor::zeros({1, 1, 2, 1});
        x.data = {0.0f, 1.0f};
        Tensor y = resize_bilinear(x, 1, 3);
        CHECK(y.data[0] == doctest::Approx(0.0f));
        CHECK(y.data[1] == doctest::Approx(0.5f));
        CHECK(y.data[2] == doctest::Approx(1.0f));
    }
    SUBCASE("constant image stays constant when downsampled") {
        Tensor x = Tensor::zeros({1, 256, 256, 1});
        std::fill(x.data.begin(), x.data.end(), 0.7f);
        Tensor y = resize_bilinear(x, 128, 128);
        for (float v : y.data) CHECK(v == doctest::Approx(0.7f).epsilon(1e-6));
    }
    SUBCASE("zero target is rejected") {
        Tensor x = Tensor::zeros({1, 2, 2, 1});
        CHECK_THROWS(resize_bilinear(x, 0, 4));
    }
}

TEST_CASE("smote balancing") {
    SUBCASE("counts [10,20,60] -> [30,30,60]") {
        LabeledDataset ds = make_counted({10, 20, 60}, 6, 6, 3);
        LabeledDataset out = smote_balance(ds, 5, 17);
        CHECK(out.class_counts() == std::vector<int>{30, 30, 60});

        // originals preserved verbatim, in order, before the synthetics
        std::map<int, std::vector<size_t>> orig_by_class, out_by_class;
        for (size_t i = 0; i < ds.labels.size(); ++i) orig_by_class[ds.labels[i]].push_back(i);
        for (size_t i = 0; i < out.labels.size(); ++i) out_by_class[out.labels[i]].push_back(i);
        size_t px = size_t(ds.images.dim(1)) * ds.images.dim(2) * ds.images.dim(3);
        for (auto& [c, idxs] : orig_by_class) {
            for (size_t j = 0; j < idxs.size(); ++j) {
                const float* a = &ds.images.data[idxs[j] * px];
                const float* b = &out.images.data[out_by_class[c][j] * px];
                CHECK(std::equal(a, a + px, b));
            }
        }

        // every synthetic lies on a segment between same-class originals
        for (auto& [c, idxs] : out_by_class) {
            auto& orig = orig_by_class[c];
            for (size_t j = orig.size(); j < idxs.size(); ++j) {
                std::vector<float> s(out.images.data.begin() + idxs[j] * px,
                                     out.images.data.begin() + (idxs[j] + 1) * px);
                double best = 1e30;
                for (size_t a = 0; a < orig.size(); ++a)
                    for (size_t b = 0; b < orig.size(); ++b) {
                        if (a == b) continue;
                        best = std::min(best, segment_distance(s, &ds.images.data[orig[a] * px],
                                                               &ds.images.data[orig[b] * px], px));
                    }
                CHECK(best <= 1e-5);
            }
        }
    }
    SUBCASE("already balanced input is returned bitwise") {
        LabeledDataset ds = make_counted({12, 12, 12}, 4, 4, 9);
        LabeledDataset out = smote_balance(ds, 5, 1);
        CHECK(out.images.data == ds.images.data);
        CHECK(out.labels == ds.labels);
    }
    SUBCASE("singleton minority class is an error naming it") {
        LabeledDataset ds = make_counted({1, 20}, 4, 4, 2);
        CHECK_THROWS_WITH_AS(smote_balance(ds, 5, 0), doctest::Contains("class0"), ContractError);
    }
    SUBCASE("deterministic under seed") {
        LabeledDataset ds = make_counted({5, 15}, 4, 4, 4);
        LabeledDataset a = smote_balance(ds, 5, 99);
        LabeledDataset b = smote_balance(ds, 5, 99);
        CHECK(a.images.data == b.images.data);
    }
}

TEST_CASE("augmentation") {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<float> u(0, 1);
    Tensor batch = Tensor::zeros({4, 8, 8, 1});
    for (auto& v : batch.data) v = u(rng);

    SUBCASE("all factors zero is bitwise identity") {
        AugmentConfig cfg;
        cfg.flip_prob = 0;
        cfg.rotation_factor = 0;
        cfg.zoom_factor = 0;
        Tensor out = augment(batch, cfg, 0);
        CHECK(out.data == batch.data);
    }
    SUBCASE("flip_prob 1 reverses columns exactly") {
        AugmentConfig cfg;
        cfg.flip_prob = 1;
        cfg.rotation_factor = 0;
        cfg.zoom_factor = 0;
        Tensor out = augment(batch, cfg, 0);
        for (int n = 0; n < 4; ++n)
            for (int i = 0; i < 8; ++i)
                for (int j = 0; j < 8; ++j) {
                    size_t src = size_t(((n * 8) + i) * 8 + (7 - j));
                    size_t dst = size_t(((n * 8) + i) * 8 + j);
                    CHECK(out.data[dst] == batch.data[src]);
                }
    }
    SUBCASE("default config approximately preserves mean mass") {
        AugmentConfig cfg;
        Tensor big = Tensor::zeros({2, 32, 32, 1});
        std::mt19937_64 r2(77);
        for (auto& v : big.data) v = u(r2);
        double base = 0;
        for (float v : big.data) base += v;
        base /= double(big.size());
        int ok = 0;
        for (uint64_t s = 0; s < 100; ++s) {
            cfg.seed = s;
            Tensor out = augment(big, cfg, s);
            double m = 0;
            for (float v : out.data) m += v;
            m /= double(out.size());
            if (std::abs(m - base) < 0.05) ++ok;
        }
        CHECK(ok == 100);
    }
    SUBCASE("outputs stay in [0,1]") {
        AugmentConfig cfg;
        cfg.seed = 5;
        Tensor out = augment(batch, cfg, 1);
        for (float v : out.data) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
    }
    SUBCASE("same seed and base give bitwise-equal output") {
        AugmentConfig cfg;
        cfg.seed = 8;
        CHECK(augment(batch, cfg, 3).data == augment(batch, cfg, 3).data);
    }
}

TEST_CASE("stratified split") {
    SUBCASE("37 classes x 100 at 80:10:10 -> 2960/370/370") {
        LabeledDataset ds = make_counted(std::vector<int>(37, 100), 2, 2, 5);
        SplitSpec spec;
        spec.seed = 123;
        SplitResult r = stratified_split(ds, spec);
        CHECK(r.train.size() == 2960);
        CHECK(r.val.size() == 370);
        CHECK(r.test.size() == 370);
    }
    SUBCASE("class of 10 -> 8/1/1 per class") {
        LabeledDataset ds = make_counted({10, 10}, 2, 2, 6);
        SplitSpec spec;
        SplitResult r = stratified_split(ds, spec);
        CHECK(r.train.class_counts() == std::vector<int>{8, 8});
        CHECK(r.val.class_counts() == std::vector<int>{1, 1});
        CHECK(r.test.class_counts() == std::vector<int>{1, 1});
    }
    SUBCASE("disjoint and exhaustive across seeds") {
        LabeledDataset ds = make_counted({7, 11, 5}, 2, 2, 8);
        size_t px = 4;
        for (uint64_t seed : {1ull, 2ull, 42ull, 1000ull}) {
            SplitSpec spec;
            spec.seed = seed;
            SplitResult r = stratified_split(ds, spec);
            CHECK(r.train.size() + r.val.size() + r.test.size() == ds.size());
            // fingerprint each sample by its pixels; multiset union must match
            auto key = [&](const LabeledDataset& d, int i) {
                return std::vector<float>(d.images.data.begin() + i * px,
                                          d.images.data.begin() + (i + 1) * px);
            };
            std::multiset<std::vector<float>> all, parts;
            for (int i = 0; i < ds.size(); ++i) all.insert(key(ds, i));
            for (const auto* p : {&r.train, &r.val, &r.test})
                for (int i = 0; i < p->size(); ++i) parts.insert(key(*p, i));
            CHECK(all == parts);
        }
    }
    SUBCASE("same seed twice gives identical assignment") {
        LabeledDataset ds = make_counted({9, 9}, 2, 2, 3);
        SplitSpec spec;
        spec.seed = 77;
        SplitResult a = stratified_split(ds, spec);
        SplitResult b = stratified_split(ds, spec);
        CHECK(a.train.images.data == b.train.images.data);
        CHECK(a.test.images.data == b.test.images.data);
    }
    SUBCASE("class smaller than 3 is rejected with its name") {
        LabeledDataset ds = make_counted({2, 10}, 2, 2, 4);
        SplitSpec spec;
        CHECK_THROWS_WITH_AS(stratified_split(ds, spec), doctest::Contains("class0"),
                             ContractError);
    }
    SUBCASE("bad fractions rejected") {
        SplitSpec spec;
        spec.train_frac = 0.5;
        CHECK_THROWS_AS(spec.validate(), ContractError);
    }
}

TEST_CASE("synthetic dataset") {
    LabeledDataset ds = synth_dataset(4, 16, 32, 32, 7);
    CHECK(ds.size() == 64);
    CHECK(ds.class_counts() == std::vector<int>{16, 16, 16, 16});
    CHECK(ds.images.dim(1) == 32);
    CHECK(ds.images.dim(3) == 1);
    for (float v : ds.images.data) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
    SUBCASE("deterministic under seed") {
        LabeledDataset b = synth_dataset(4, 16, 32, 32, 7);
        CHECK(b.images.data == ds.images.data);
    }
    SUBCASE("classes are visually distinct (mean images differ)") {
        size_t px = 32 * 32;
        std::vector<std::vector<double>> means(4, std::vector<double>(px, 0.0));
        for (int i = 0; i < ds.size(); ++i)
            for (size_t j = 0; j < px; ++j)
                means[size_t(ds.labels[size_t(i)])][j] += ds.images.data[i * px + j] / 16.0;
        double d01 = 0;
        for (size_t j = 0; j < px; ++j) d01 += std::abs(means[0][j] - means[1][j]);
        CHECK(d01 / double(px) > 0.01);
    }
}

TEST_CASE("dataset write/load round trip") {
    TempDir td;
    LabeledDataset ds = synth_dataset(3, 4, 8, 8, 11);
    write_dataset(ds, td.path.string());
    LabeledDataset back = load_dataset(td.path.string());
    CHECK(back.size() == ds.size());
    CHECK(back.class_counts() == ds.class_counts());
    // pgm quantizes to 8 bits; tolerate half a step
    for (size_t i = 0; i < ds.images.size(); ++i)
        CHECK(back.images.data[i] == doctest::Approx(ds.images.data[i]).epsilon(1.0 / 255));
}
