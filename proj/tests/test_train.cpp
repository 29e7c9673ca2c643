#include <doctest.h>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "vcl/dataset.hpp"
#include "vcl/train.hpp"

using namespace vcl;
namespace fs = std::filesystem;

namespace {

// independent brute-force metric computation: no confusion matrix, just
// direct counting per class
EvalMetrics naive_metrics(const std::vector<int>& pred, const std::vector<int>& truth, int K) {
    EvalMetrics out;
    int correct = 0;
    for (size_t i = 0; i < pred.size(); ++i)
        if (pred[i] == truth[i]) ++correct;
    out.accuracy = double(correct) / double(pred.size());
    double psum = 0, rsum = 0, fsum = 0;
    for (int c = 0; c < K; ++c) {
        int tp = 0, fp = 0, fn = 0;
        for (size_t i = 0; i < pred.size(); ++i) {
            if (pred[i] == c && truth[i] == c) ++tp;
            if (pred[i] == c && truth[i] != c) ++fp;
            if (pred[i] != c && truth[i] == c) ++fn;
        }
        double p = (tp + fp) ? double(tp) / (tp + fp) : 0.0;
        double r = (tp + fn) ? double(tp) / (tp + fn) : 0.0;
        double f = (p + r) > 0 ? 2 * p * r / (p + r) : 0.0;
        psum += p;
        rsum += r;
        fsum += f;
    }
    out.precision = psum / K;
    out.recall = rsum / K;
    out.f1 = fsum / K;
    return out;
}

Model tiny_cnn_model(uint64_t seed) {
    CnnConfig cfg;
    cfg.image_h = cfg.image_w = 8;
    cfg.blocks = {{4, 3, 2}, {4, 3, 2}};
    cfg.head_units = {8};
    cfg.head_dropout = 0;
    std::mt19937_64 rng(seed);
    return init_cnn<float>(cfg, rng);
}

} // namespace

TEST_CASE("adam first step moves each weight by about lr in the gradient direction") {
    Model m = tiny_cnn_model(1);
    Model before = m;
    std::map<std::string, Tensor> grads;
    std::mt19937_64 rng(2);
    std::normal_distribution<float> g(0, 1);
    for (auto& [name, t] : m.params) {
        grads[name] = Tensor::zeros(t.shape);
        for (auto& v : grads[name].data) v = g(rng);
    }
    TrainConfig tc;
    tc.learning_rate = 1e-3;
    AdamState state;
    adam_step(m, grads, state, tc);
    CHECK(state.t == 1);
    // bias-corrected first step: update = lr * g / (|g| + eps') ~= lr * sign(g)
    for (auto& [name, t] : m.params)
        for (size_t i = 0; i < t.size(); ++i) {
            double gi = grads[name].data[i];
            if (std::abs(gi) < 1e-3) continue; // eps matters for tiny grads
            double delta = double(t.data[i]) - before.params[name].data[i];
            CHECK(delta == doctest::Approx(-tc.learning_rate * (gi > 0 ? 1 : -1)).epsilon(1e-2));
        }
}

TEST_CASE("adam zero gradient leaves parameters fixed but advances time") {
    Model m = tiny_cnn_model(3);
    Model before = m;
    std::map<std::string, Tensor> grads;
    for (auto& [name, t] : m.params) grads[name] = Tensor::zeros(t.shape);
    TrainConfig tc;
    AdamState state;
    adam_step(m, grads, state, tc);
    CHECK(state.t == 1);
    for (auto& [name, t] : m.params) CHECK(t.data == before.params[name].data);
}

TEST_CASE("adam trajectories are bitwise deterministic") {
    auto run = [] {
        Model m = tiny_cnn_model(4);
        TrainConfig tc;
        tc.learning_rate = 1e-2;
        AdamState state;
        std::mt19937_64 rng(5);
        std::normal_distribution<float> g(0, 1);
        for (int step = 0; step < 5; ++step) {
            std::map<std::string, Tensor> grads;
            for (auto& [name, t] : m.params) {
                grads[name] = Tensor::zeros(t.shape);
                for (auto& v : grads[name].data) v = g(rng);
            }
            adam_step(m, grads, state, tc);
        }
        return m;
    };
    Model a = run(), b = run();
    for (auto& [name, t] : a.params) CHECK(t.data == b.params[name].data);
}

TEST_CASE("adam rejects shape mismatches") {
    Model m = tiny_cnn_model(6);
    std::map<std::string, Tensor> grads;
    for (auto& [name, t] : m.params) grads[name] = Tensor::zeros(t.shape);
    grads["head.out.b"] = Tensor::zeros({7});
    TrainConfig tc;
    AdamState state;
    CHECK_THROWS_AS(adam_step(m, grads, state, tc), DimensionError);
}

TEST_CASE("metrics") {
    SUBCASE("perfect prediction") {
        EvalMetrics r = metrics({0, 1, 2, 1}, {0, 1, 2, 1}, 3);
        CHECK(r.accuracy == 1.0);
        CHECK(r.precision == 1.0);
        CHECK(r.recall == 1.0);
        CHECK(r.f1 == 1.0);
    }
    SUBCASE("binary hand-computed confusion matrix") {
        EvalMetrics r = metrics({1, 1, 0, 0}, {1, 0, 1, 0}, 2);
        CHECK(r.accuracy == doctest::Approx(0.5));
        CHECK(r.precision == doctest::Approx(0.5));
        CHECK(r.recall == doctest::Approx(0.5));
        CHECK(r.f1 == doctest::Approx(0.5));
    }
    SUBCASE("degenerate single-class predictor on balanced 3-class truth") {
        std::vector<int> pred(9, 0), truth = {0, 0, 0, 1, 1, 1, 2, 2, 2};
        EvalMetrics r = metrics(pred, truth, 3);
        CHECK(r.accuracy == doctest::Approx(1.0 / 3));
        CHECK(r.precision == doctest::Approx(1.0 / 9));
        CHECK(r.recall == doctest::Approx(1.0 / 3));
    }
    SUBCASE("agrees exactly with a brute-force counter on random vectors") {
        std::mt19937_64 rng(7);
        for (int K : {2, 5, 37}) {
            std::uniform_int_distribution<int> lab(0, K - 1);
            for (int trial = 0; trial < 333; ++trial) {
                size_t n = 1 + rng() % 40;
                std::vector<int> pred(n), truth(n);
                for (size_t i = 0; i < n; ++i) {
                    pred[i] = lab(rng);
                    truth[i] = lab(rng);
                }
                EvalMetrics a = metrics(pred, truth, K);
                EvalMetrics b = naive_metrics(pred, truth, K);
                CHECK(a.accuracy == b.accuracy);
                CHECK(a.precision == doctest::Approx(b.precision).epsilon(1e-12));
                CHECK(a.recall == doctest::Approx(b.recall).epsilon(1e-12));
                CHECK(a.f1 == doctest::Approx(b.f1).epsilon(1e-12));
            }
        }
    }
    SUBCASE("macro F1 is bounded by per-class extremes") {
        std::mt19937_64 rng(8);
        std::uniform_int_distribution<int> lab(0, 2);
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<int> pred(30), truth(30);
            for (size_t i = 0; i < 30; ++i) {
                pred[i] = lab(rng);
                truth[i] = lab(rng);
            }
            double lo = 1e30, hi = -1e30;
            for (int c = 0; c < 3; ++c) {
                int tp = 0, fp = 0, fn = 0;
                for (size_t i = 0; i < 30; ++i) {
                    if (pred[i] == c && truth[i] == c) ++tp;
                    if (pred[i] == c && truth[i] != c) ++fp;
                    if (pred[i] != c && truth[i] == c) ++fn;
                }
                double p = (tp + fp) ? double(tp) / (tp + fp) : 0.0;
                double r = (tp + fn) ? double(tp) / (tp + fn) : 0.0;
                double f = (p + r) > 0 ? 2 * p * r / (p + r) : 0.0;
                lo = std::min(lo, f);
                hi = std::max(hi, f);
            }
            EvalMetrics m = metrics(pred, truth, 3);
            CHECK(m.f1 >= lo - 1e-12);
            CHECK(m.f1 <= hi + 1e-12);
        }
    }
    SUBCASE("length mismatch and label range are rejected") {
        CHECK_THROWS_AS(metrics({0, 1}, {0}, 2), DimensionError);
        CHECK_THROWS_AS(metrics({0, 5}, {0, 1}, 2), ContractError);
    }
}

TEST_CASE("loss strictly decreases over the first 10 steps of a 2-sample overfit") {
    LabeledDataset ds = synth_dataset(2, 1, 8, 8, 3);
    Model m = tiny_cnn_model(9);
    TrainConfig tc;
    tc.learning_rate = 1e-2;
    AdamState state;
    std::mt19937_64 drop(1);
    double prev = 1e30;
    for (int step = 0; step < 10; ++step) {
        Tape tape;
        auto fw = cnn_forward(tape, m, ds.images, true, drop, true);
        auto loss = tape.sparse_ce(fw.logits, ds.labels);
        double l = loss->value.data[0];
        CHECK(l < prev);
        prev = l;
        tape.backward(loss);
        std::map<std::string, Tensor> grads;
        for (auto& [name, var] : fw.param_vars) grads[name] = var->grad;
        adam_step(m, grads, state, tc);
    }
}

TEST_CASE("train protocol") {
    LabeledDataset full = synth_dataset(2, 10, 8, 8, 5);
    SplitSpec split;
    split.seed = 1;
    SplitResult parts = stratified_split(full, split);
    DataBundle data{parts.train, parts.val, parts.test};
    CnnConfig cfg;
    cfg.image_h = cfg.image_w = 8;
    cfg.blocks = {{4, 3, 2}, {4, 3, 2}};
    cfg.head_units = {8};
    cfg.head_dropout = 0;
    TrainConfig tc;
    tc.learning_rate = 1e-2;
    tc.epochs = 6;
    tc.batch_size = 8;
    tc.repetitions = 1;
    tc.seed = 11;
    TrainOptions opts;
    opts.augment_train = false;

    SUBCASE("repetitions=1 reports run 0 with full curves") {
        TrainResult r = train(cfg, data, tc, opts);
        CHECK(r.selected == 0);
        CHECK(r.runs.size() == 1);
        CHECK(r.runs[0].run_index == 0);
        CHECK(r.runs[0].train_loss.size() == 6);
        CHECK(r.runs[0].val_acc.size() == 6);
        CHECK_FALSE(r.runs[0].failed);
        CHECK(r.runs[0].test_metrics.accuracy >= 0.0);
        CHECK(r.runs[0].test_metrics.accuracy <= 1.0);
    }
    SUBCASE("epochs=0 violates the contract") {
        TrainConfig bad = tc;
        bad.epochs = 0;
        CHECK_THROWS_AS(train(cfg, data, bad, opts), ContractError);
    }
    SUBCASE("training is bitwise reproducible") {
        TrainResult a = train(cfg, data, tc, opts);
        TrainResult b = train(cfg, data, tc, opts);
        CHECK(a.runs[0].train_loss == b.runs[0].train_loss);
        CHECK(a.runs[0].val_acc == b.runs[0].val_acc);
        for (auto& [name, t] : a.model.params) CHECK(t.data == b.model.params[name].data);
    }
    SUBCASE("selection picks the best final validation accuracy") {
        TrainConfig multi = tc;
        multi.repetitions = 2;
        TrainResult r = train(cfg, data, multi, opts);
        REQUIRE(r.runs.size() == 2);
        double sel = r.runs[size_t(r.selected)].val_acc.back();
        for (const auto& run : r.runs) CHECK(sel >= run.val_acc.back());
    }
}

TEST_CASE("curve emission") {
    TrainReport rep;
    rep.train_loss = {1.25, 0.5, 0.125};
    rep.val_loss = {1.5, 0.75, 0.25};
    rep.train_acc = {0.5, 0.75, 1.0};
    rep.val_acc = {0.5, 0.5, 0.875};
    auto path = fs::temp_directory_path() / "vcl_curves_test.csv";
    emit_curves(rep, path.string());

    std::ifstream in(path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    REQUIRE(lines.size() == 4);
    CHECK(lines[0] == "epoch,train_loss,val_loss,train_acc,val_acc");

    // round-trip the values
    for (int e = 0; e < 3; ++e) {
        std::stringstream ss(lines[size_t(e + 1)]);
        std::string tok;
        std::array<double, 5> vals{};
        for (int i = 0; i < 5 && std::getline(ss, tok, ','); ++i) vals[size_t(i)] = std::stod(tok);
        CHECK(vals[0] == e);
        CHECK(vals[1] == doctest::Approx(rep.train_loss[size_t(e)]).epsilon(1e-6));
        CHECK(vals[2] == doctest::Approx(rep.val_loss[size_t(e)]).epsilon(1e-6));
        CHECK(vals[3] == doctest::Approx(rep.train_acc[size_t(e)]).epsilon(1e-6));
        CHECK(vals[4] == doctest::Approx(rep.val_acc[size_t(e)]).epsilon(1e-6));
    }

    SUBCASE("re-emission is byte identical") {
        auto path2 = fs::temp_directory_path() / "vcl_curves_test2.csv";
        emit_curves(rep, path2.string());
        std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
        std::string s1((std::istreambuf_iterator<char>(f1)), {});
        std::string s2((std::istreambuf_iterator<char>(f2)), {});
        CHECK(s1 == s2);
        fs::remove(path2);
    }
    SUBCASE("unwritable path raises an io error") {
        CHECK_THROWS_AS(emit_curves(rep, "/nonexistent_dir_zz/x.csv"), IoError);
    }
    fs::remove(path);
}
