#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "drivepred/io_util.hpp"
#include "drivepred/predictor.hpp"
#include "drivepred/rng.hpp"
#include "json.hpp"

using namespace drivepred;
using namespace drivepred::predictor;

namespace {

Matrix random_input(int rows, int cols, Rng& rng) {
    Matrix m(rows, cols);
    for (auto& v : m.d) v = rng.normal();
    return m;
}

// Toy corpus: three well-separated classes encoded in a couple of sensing
// rows, one sample per vehicle.
std::vector<dataset::LabeledSample> toy_corpus(int per_class, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<dataset::LabeledSample> corpus;
    for (int k = 0; k < 3; ++k) {
        for (int i = 0; i < per_class; ++i) {
            dataset::LabeledSample s;
            s.window = 30;
            s.label = static_cast<dataset::Behavior>(k);
            s.vehicle_id = k * 1000 + i;
            s.anchor_frame = 60;
            s.z.assign(21 * 30, 0.0);
            s.zhat.assign(4 * 30, 0.0);
            for (int c = 0; c < 30; ++c) {
                s.z[1 * 30 + c] = 10.0 + 3.0 * k + rng.normal() * 0.2;  // target vel
                s.z[4 * 30 + c] = 2.0 - k + rng.normal() * 0.2;
                s.zhat[0 * 30 + c] = 1.0 + 0.6 * k + rng.normal() * 0.05;
                s.zhat[2 * 30 + c] = (k == 0 ? 1.0 : -0.5) + rng.normal() * 0.05;
                s.zhat[3 * 30 + c] = (k == 1 ? 1.0 : -0.5) + rng.normal() * 0.05;
            }
            corpus.push_back(std::move(s));
        }
    }
    return corpus;
}

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("forward basics") {
    SUBCASE("zero weights produce the uniform distribution and the tie rule") {
        NetworkParams p = init_params(5, 4, 3, 1);
        for (auto& v : p.wx.d) v = 0.0;
        for (auto& v : p.wh.d) v = 0.0;
        for (auto& v : p.b) v = 0.0;
        for (auto& v : p.wy.d) v = 0.0;
        for (auto& v : p.by) v = 0.0;
        Matrix input(5, 7);
        for (auto& v : input.d) v = 1.5;
        const auto out = forward(p, input);
        for (double pr : out.probs) CHECK(pr == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
        CHECK(out.label == 0);  // exact tie breaks toward LCL
    }

    SUBCASE("argmax picks the most probable class") {
        // Zero weights and zero input leave the logits at the output bias;
        // softmax(ln p) recovers p, so the label is the argmax of p.
        NetworkParams p = init_params(3, 2, 3, 1);
        for (auto& v : p.wx.d) v = 0.0;
        for (auto& v : p.wh.d) v = 0.0;
        for (auto& v : p.b) v = 0.0;
        for (auto& v : p.wy.d) v = 0.0;
        p.by = {std::log(0.2), std::log(0.3), std::log(0.5)};
        const auto out = forward(p, Matrix(3, 4));
        CHECK(out.probs[0] == doctest::Approx(0.2).epsilon(1e-12));
        CHECK(out.probs[1] == doctest::Approx(0.3).epsilon(1e-12));
        CHECK(out.probs[2] == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(out.label == 2);  // LK
    }

    SUBCASE("softmax output is a distribution for random networks") {
        Rng rng(4);
        for (int trial = 0; trial < 50; ++trial) {
            const auto p = init_params(6, 5, 3, rng.next_u64());
            const auto input = random_input(6, 10, rng);
            const auto out = forward(p, input);
            double sum = 0.0;
            for (double pr : out.probs) {
                CHECK(pr >= 0.0);
                sum += pr;
            }
            CHECK(std::abs(sum - 1.0) < 1e-9);
        }
    }

    SUBCASE("shape mismatch and non-finite input are rejected") {
        const auto p = init_params(5, 4, 3, 1);
        CHECK_THROWS_AS(forward(p, Matrix(4, 7)), std::invalid_argument);
        Matrix bad(5, 7);
        bad.d[3] = std::numeric_limits<double>::quiet_NaN();
        CHECK_THROWS_AS(forward(p, bad), std::invalid_argument);
    }

    SUBCASE("matches a hand-unrolled two-step trace") {
        // Tiny network, every weight set explicitly; the expected value is
        // recomputed below with scalar code written independently.
        NetworkParams p;
        p.input_dim = 2;
        p.hidden_dim = 1;
        p.output_dim = 3;
        p.wx = Matrix(4, 2);
        p.wh = Matrix(4, 1);
        p.b.assign(4, 0.0);
        p.wy = Matrix(3, 1);
        p.by.assign(3, 0.0);
        // Gate order: input, forget, cell, output.
        p.wx.at(0, 0) = 0.5;  p.wx.at(0, 1) = -0.3;
        p.wx.at(1, 0) = 0.2;  p.wx.at(1, 1) = 0.1;
        p.wx.at(2, 0) = -0.4; p.wx.at(2, 1) = 0.6;
        p.wx.at(3, 0) = 0.3;  p.wx.at(3, 1) = 0.2;
        p.wh.at(0, 0) = 0.15;
        p.wh.at(1, 0) = -0.25;
        p.wh.at(2, 0) = 0.35;
        p.wh.at(3, 0) = 0.45;
        p.b = {0.01, 0.02, 0.03, 0.04};
        p.wy.at(0, 0) = 1.0;
        p.wy.at(1, 0) = -1.0;
        p.wy.at(2, 0) = 0.5;
        p.by = {0.1, 0.2, 0.3};

        Matrix input(2, 2);
        input.at(0, 0) = 1.0;
        input.at(1, 0) = -0.5;
        input.at(0, 1) = 0.25;
        input.at(1, 1) = 0.75;

        const auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
        double h = 0.0, c = 0.0;
        for (int t = 0; t < 2; ++t) {
            const double x0 = input.at(0, t), x1 = input.at(1, t);
            const double gi = sig(0.5 * x0 - 0.3 * x1 + 0.15 * h + 0.01);
            const double gf = sig(0.2 * x0 + 0.1 * x1 - 0.25 * h + 0.02);
            const double gg = std::tanh(-0.4 * x0 + 0.6 * x1 + 0.35 * h + 0.03);
            const double go = sig(0.3 * x0 + 0.2 * x1 + 0.45 * h + 0.04);
            c = gf * c + gi * gg;
            h = go * std::tanh(c);
        }
        const double l0 = 1.0 * h + 0.1, l1 = -1.0 * h + 0.2, l2 = 0.5 * h + 0.3;
        const double m = std::max({l0, l1, l2});
        const double e0 = std::exp(l0 - m), e1 = std::exp(l1 - m), e2 = std::exp(l2 - m);
        const double es = e0 + e1 + e2;

        const auto out = forward(p, input);
        CHECK(out.probs[0] == doctest::Approx(e0 / es).epsilon(1e-6));
        CHECK(out.probs[1] == doctest::Approx(e1 / es).epsilon(1e-6));
        CHECK(out.probs[2] == doctest::Approx(e2 / es).epsilon(1e-6));
    }
}

TEST_CASE("loss") {
    CHECK(loss({1.0, 0.0, 0.0}, 0) == doctest::Approx(0.0));
    CHECK(loss({1.0 / 3, 1.0 / 3, 1.0 / 3}, 2) ==
          doctest::Approx(std::log(3.0)).epsilon(1e-12));
    CHECK(loss({0.7, 0.2, 0.1}, 0) ==
          doctest::Approx(0.35667494393873245).epsilon(1e-12));
    // Probability floor keeps the loss finite.
    CHECK(loss({0.0, 1.0, 0.0}, 0) == doctest::Approx(-std::log(1e-12)));
    CHECK(loss({0.5, 0.5, 0.0}, 1) >= 0.0);
}

TEST_CASE("backward") {
    SUBCASE("gradients match central finite differences") {
        Rng rng(99);
        NetworkParams p = init_params(4, 3, 3, 7);
        const auto input = random_input(4, 3, rng);
        const int label = 1;

        ForwardCache cache;
        forward(p, input, &cache);
        const auto g = backward(p, cache, label);

        const double h = 1e-5;
        const auto numeric = [&](double* slot) {
            const double keep = *slot;
            *slot = keep + h;
            const double up = loss(forward(p, input).probs, label);
            *slot = keep - h;
            const double dn = loss(forward(p, input).probs, label);
            *slot = keep;
            return (up - dn) / (2.0 * h);
        };
        double worst = 0.0;
        for (std::size_t i = 0; i < p.wx.d.size(); ++i) {
            worst = std::max(worst, rel_err(numeric(&p.wx.d[i]), g.wx.d[i]));
        }
        for (std::size_t i = 0; i < p.wh.d.size(); ++i) {
            worst = std::max(worst, rel_err(numeric(&p.wh.d[i]), g.wh.d[i]));
        }
        for (std::size_t i = 0; i < p.b.size(); ++i) {
            worst = std::max(worst, rel_err(numeric(&p.b[i]), g.b[i]));
        }
        for (std::size_t i = 0; i < p.wy.d.size(); ++i) {
            worst = std::max(worst, rel_err(numeric(&p.wy.d[i]), g.wy.d[i]));
        }
        for (std::size_t i = 0; i < p.by.size(); ++i) {
            worst = std::max(worst, rel_err(numeric(&p.by[i]), g.by[i]));
        }
        CHECK(worst <= 1e-4);
    }

    SUBCASE("softmax cross-entropy identity at zero weights") {
        NetworkParams p = init_params(3, 2, 3, 1);
        for (auto& v : p.wx.d) v = 0.0;
        for (auto& v : p.wh.d) v = 0.0;
        for (auto& v : p.b) v = 0.0;
        for (auto& v : p.wy.d) v = 0.0;
        for (auto& v : p.by) v = 0.0;
        Matrix input(3, 4);  // all zeros
        ForwardCache cache;
        const auto out = forward(p, input, &cache);
        const auto g = backward(p, cache, 2);
        CHECK(g.by[0] == doctest::Approx(out.probs[0]).epsilon(1e-12));
        CHECK(g.by[1] == doctest::Approx(out.probs[1]).epsilon(1e-12));
        CHECK(g.by[2] == doctest::Approx(out.probs[2] - 1.0).epsilon(1e-12));
    }

    SUBCASE("duplicated sample doubles its summed contribution") {
        Rng rng(12);
        const auto p = init_params(4, 3, 3, 5);
        const auto input = random_input(4, 5, rng);
        std::vector<Matrix> one{input}, two{input, input};
        std::vector<int> l1{2}, l2{2, 2};
        std::vector<Gradients> g1(1), g2(2);
        std::vector<double> loss1(1), loss2(2);
        batch_gradients(p, one, l1, g1, loss1, ExecMode::serial);
        batch_gradients(p, two, l2, g2, loss2, ExecMode::serial);
        for (std::size_t i = 0; i < g1[0].wx.d.size(); ++i) {
            CHECK(g2[0].wx.d[i] + g2[1].wx.d[i] == doctest::Approx(2.0 * g1[0].wx.d[i]));
        }
        CHECK(loss2[0] == loss1[0]);
        CHECK(loss2[1] == loss1[0]);
    }
}

TEST_CASE("build_input") {
    auto corpus = toy_corpus(1, 3);
    auto& s = corpus.front();
    // Give positions a visible slope: target at 100 + c, leader 20 m ahead.
    for (int c = 0; c < 30; ++c) {
        s.z[0 * 30 + c] = 100.0 + c;
        s.z[12 * 30 + c] = 120.0 + c;  // p_old position row (slot 4, field 0)
        s.z[2 * 30 + c] = 3.0;         // target lane row
    }

    SUBCASE("sensing_only keeps 21 rows with relative positions") {
        const auto m = build_input(s, InputMode::sensing_only);
        CHECK(m.rows == 21);
        CHECK(m.cols == 30);
        for (int c = 0; c < 30; ++c) {
            CHECK(m.at(0, c) == 0.0);             // target relative to itself
            CHECK(m.at(12, c) == doctest::Approx(20.0));  // leader 20 m ahead
            CHECK(m.at(2, c) == 3.0);             // lane row retained
        }
    }

    SUBCASE("with_characteristics stacks 24 rows without the target lane") {
        const auto m = build_input(s, InputMode::with_characteristics);
        CHECK(m.rows == 24);
        CHECK(m.cols == 30);
        // Row 2 is now f_old's position row (slot 1 shifted up by one).
        for (int c = 0; c < 30; ++c) {
            CHECK(m.at(11, c) == doctest::Approx(20.0));  // p_old pos row shifted
            CHECK(m.at(20, c) == doctest::Approx(s.zhat[static_cast<std::size_t>(c)]));
        }
    }

    SUBCASE("characteristics required in stacked mode") {
        auto broken = s;
        broken.zhat.clear();
        CHECK_THROWS_AS(build_input(broken, InputMode::with_characteristics),
                        std::invalid_argument);
        CHECK_NOTHROW(build_input(broken, InputMode::sensing_only));
    }
}

TEST_CASE("stratified split") {
    SUBCASE("single class is rejected") {
        std::vector<dataset::LabeledSample> corpus;
        for (int i = 0; i < 10; ++i) {
            dataset::LabeledSample s;
            s.label = dataset::Behavior::LK;
            s.vehicle_id = i;
            corpus.push_back(s);
        }
        CHECK_THROWS_AS(stratified_split(corpus, 0.75, 1), std::invalid_argument);
    }

    SUBCASE("vehicles stay on one side") {
        std::vector<dataset::LabeledSample> corpus;
        for (int v = 0; v < 12; ++v) {
            for (int k = 0; k < 2; ++k) {
                dataset::LabeledSample s;
                s.label = v % 2 == 0 ? dataset::Behavior::LCL : dataset::Behavior::LK;
                s.vehicle_id = v;
                s.anchor_frame = k;
                corpus.push_back(s);
            }
        }
        const auto split = stratified_split(corpus, 0.75, 3);
        CHECK(split.train.size() + split.test.size() == corpus.size());
        for (auto i : split.train) {
            for (auto j : split.test) {
                CHECK(corpus[i].vehicle_id != corpus[j].vehicle_id);
            }
        }
        CHECK(split.test.size() >= 4);   // roughly a quarter
        CHECK(split.train.size() >= 14);
    }
}

TEST_CASE("training") {
    const auto corpus = toy_corpus(10, 77);
    TrainConfig cfg;
    cfg.epochs = 6;
    cfg.batch_size = 8;
    cfg.hidden_dim = 12;
    cfg.rng_seed = 5;
    cfg.exec = ExecMode::serial;

    SUBCASE("loss decreases on a separable toy corpus") {
        const auto result = train(corpus, cfg);
        REQUIRE(result.log.size() == 6);
        for (std::size_t e = 1; e < 5; ++e) {
            CHECK(result.log[e].train_loss < result.log[e - 1].train_loss);
        }
    }

    SUBCASE("deterministic per seed, sensitive to the shuffle seed") {
        const auto a = train(corpus, cfg);
        const auto b = train(corpus, cfg);
        CHECK(a.model.params.wx.d == b.model.params.wx.d);
        CHECK(a.model.params.wy.d == b.model.params.wy.d);

        TrainConfig other = cfg;
        other.rng_seed = 6;
        const auto c = train(corpus, other);
        CHECK(a.model.params.wx.d != c.model.params.wx.d);
    }

    SUBCASE("corpus row order does not affect the trained model") {
        auto shuffled = corpus;
        Rng perm(999);
        perm.shuffle(shuffled);
        REQUIRE(shuffled.size() == corpus.size());
        const auto a = train(corpus, cfg);
        const auto b = train(shuffled, cfg);
        CHECK(a.model.params.wx.d == b.model.params.wx.d);
        CHECK(a.model.params.b == b.model.params.b);
        CHECK(a.model.norm.mean == b.model.norm.mean);
    }

    SUBCASE("overfits its own training split") {
        TrainConfig longer = cfg;
        longer.epochs = 30;
        const auto result = train(corpus, longer);
        std::size_t agree = 0;
        for (auto i : result.split.train) {
            if (predict(result.model, corpus[i]).label ==
                static_cast<int>(corpus[i].label)) {
                ++agree;
            }
        }
        CHECK(static_cast<double>(agree) >=
              0.95 * static_cast<double>(result.split.train.size()));
    }

    SUBCASE("sensing-only mode trains on 21 rows") {
        TrainConfig pb = cfg;
        pb.mode = InputMode::sensing_only;
        const auto result = train(corpus, pb);
        CHECK(result.model.params.input_dim == 21);
    }

    SUBCASE("single-class corpus is rejected") {
        std::vector<dataset::LabeledSample> lk_only(corpus.begin() + 20, corpus.end());
        CHECK_THROWS_AS(train(lk_only, cfg), std::invalid_argument);
    }
}

TEST_CASE("model serialization") {
    const auto corpus = toy_corpus(4, 9);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.hidden_dim = 8;
    cfg.exec = ExecMode::serial;
    const auto result = train(corpus, cfg);
    const auto path = temp_path("dp_model.json");
    save_model(result.model, path);

    SUBCASE("round-trip preserves every forward output bit for bit") {
        const auto loaded = load_model(path);
        Rng rng(2);
        for (int i = 0; i < 10; ++i) {
            auto s = corpus[rng.uniform_int(corpus.size())];
            const auto a = predict(result.model, s);
            const auto b = predict(loaded, s);
            CHECK(a.probs == b.probs);
            CHECK(a.label == b.label);
        }
    }

    SUBCASE("truncated file fails to load") {
        const auto content = io::read_file(path);
        const auto broken = temp_path("dp_model_trunc.json");
        std::ofstream f(broken, std::ios::trunc);
        f << content.substr(0, content.size() / 2);
        f.close();
        CHECK_THROWS_AS(load_model(broken), std::runtime_error);
    }

    SUBCASE("bumped format version is rejected") {
        auto j = nlohmann::json::parse(io::read_file(path));
        j["format_version"] = 2;
        const auto bumped = temp_path("dp_model_v2.json");
        io::atomic_write(bumped, j.dump());
        CHECK_THROWS_WITH_AS(load_model(bumped), doctest::Contains("version"),
                             std::runtime_error);
    }

    SUBCASE("weight corruption trips the checksum") {
        auto j = nlohmann::json::parse(io::read_file(path));
        j["wy"][0] = j["wy"][0].get<double>() + 1.0;
        const auto corrupted = temp_path("dp_model_bad.json");
        io::atomic_write(corrupted, j.dump());
        CHECK_THROWS_WITH_AS(load_model(corrupted), doctest::Contains("checksum"),
                             std::runtime_error);
    }
}
