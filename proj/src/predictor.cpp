#include "drivepred/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "drivepred/io_util.hpp"
#include "drivepred/rng.hpp"
#include "json.hpp"

namespace drivepred::predictor {

namespace {
constexpr int kModelFormatVersion = 1;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::array<double, 3> softmax3(const std::array<double, 3>& logits) {
    const double m = std::max({logits[0], logits[1], logits[2]});
    std::array<double, 3> e{std::exp(logits[0] - m), std::exp(logits[1] - m),
                            std::exp(logits[2] - m)};
    const double s = e[0] + e[1] + e[2];
    return {e[0] / s, e[1] / s, e[2] / s};
}

int argmax3(const std::array<double, 3>& v) {
    int best = 0;
    for (int k = 1; k < 3; ++k) {
        if (v[static_cast<std::size_t>(k)] > v[static_cast<std::size_t>(best)]) best = k;
    }
    return best;
}

}  // namespace

const char* to_string(InputMode m) {
    return m == InputMode::with_characteristics ? "with_characteristics"
                                                : "sensing_only";
}

InputMode input_mode_from_string(const std::string& s) {
    if (s == "with_characteristics") return InputMode::with_characteristics;
    if (s == "sensing_only") return InputMode::sensing_only;
    throw std::invalid_argument("unknown input mode: " + s);
}

NetworkParams init_params(int input_dim, int hidden_dim, int output_dim,
                          std::uint64_t seed) {
    NetworkParams p;
    p.input_dim = input_dim;
    p.hidden_dim = hidden_dim;
    p.output_dim = output_dim;
    p.wx = Matrix(4 * hidden_dim, input_dim);
    p.wh = Matrix(4 * hidden_dim, hidden_dim);
    p.b.assign(static_cast<std::size_t>(4 * hidden_dim), 0.0);
    p.wy = Matrix(output_dim, hidden_dim);
    p.by.assign(static_cast<std::size_t>(output_dim), 0.0);

    Rng rng(seed);
    const double rx = 1.0 / std::sqrt(static_cast<double>(input_dim));
    for (auto& v : p.wx.d) v = rng.uniform(-rx, rx);
    const double rh = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
    for (auto& v : p.wh.d) v = rng.uniform(-rh, rh);
    for (auto& v : p.wy.d) v = rng.uniform(-rh, rh);
    // Forget-gate bias starts positive so early training does not wash the
    // cell state out.
    for (int i = 0; i < hidden_dim; ++i) {
        p.b[static_cast<std::size_t>(hidden_dim + i)] = 1.0;
    }
    return p;
}

PredictionOutput forward(const NetworkParams& p, const Matrix& input,
                         ForwardCache* cache) {
    if (input.rows != p.input_dim) {
        throw std::invalid_argument(
            "forward: input has " + std::to_string(input.rows) +
            " rows, network expects " + std::to_string(p.input_dim));
    }
    if (input.cols < 1) {
        throw std::invalid_argument("forward: empty sequence");
    }
    for (double v : input.d) {
        if (!std::isfinite(v)) {
            throw std::invalid_argument("forward: non-finite input value");
        }
    }
    const int H = p.hidden_dim;
    const int D = p.input_dim;
    const int T = input.cols;

    std::vector<double> h(static_cast<std::size_t>(H), 0.0);
    std::vector<double> c(static_cast<std::size_t>(H), 0.0);
    std::vector<double> pre(static_cast<std::size_t>(4 * H), 0.0);

    if (cache != nullptr) {
        cache->input = input;
        cache->gi.assign(static_cast<std::size_t>(T), {});
        cache->gf.assign(static_cast<std::size_t>(T), {});
        cache->gg.assign(static_cast<std::size_t>(T), {});
        cache->go.assign(static_cast<std::size_t>(T), {});
        cache->c.assign(static_cast<std::size_t>(T), {});
        cache->tanh_c.assign(static_cast<std::size_t>(T), {});
        cache->h.assign(static_cast<std::size_t>(T), {});
    }

    for (int t = 0; t < T; ++t) {
        for (int r = 0; r < 4 * H; ++r) {
            double acc = p.b[static_cast<std::size_t>(r)];
            const double* wxr = &p.wx.d[static_cast<std::size_t>(r) *
                                        static_cast<std::size_t>(D)];
            for (int k = 0; k < D; ++k) acc += wxr[k] * input.at(k, t);
            const double* whr = &p.wh.d[static_cast<std::size_t>(r) *
                                        static_cast<std::size_t>(H)];
            for (int k = 0; k < H; ++k) acc += whr[k] * h[static_cast<std::size_t>(k)];
            pre[static_cast<std::size_t>(r)] = acc;
        }
        std::vector<double> gi(static_cast<std::size_t>(H)),
            gf(static_cast<std::size_t>(H)), gg(static_cast<std::size_t>(H)),
            go(static_cast<std::size_t>(H)), tc(static_cast<std::size_t>(H));
        for (int i = 0; i < H; ++i) {
            gi[static_cast<std::size_t>(i)] = sigmoid(pre[static_cast<std::size_t>(i)]);
            gf[static_cast<std::size_t>(i)] =
                sigmoid(pre[static_cast<std::size_t>(H + i)]);
            gg[static_cast<std::size_t>(i)] =
                std::tanh(pre[static_cast<std::size_t>(2 * H + i)]);
            go[static_cast<std::size_t>(i)] =
                sigmoid(pre[static_cast<std::size_t>(3 * H + i)]);
            c[static_cast<std::size_t>(i)] =
                gf[static_cast<std::size_t>(i)] * c[static_cast<std::size_t>(i)] +
                gi[static_cast<std::size_t>(i)] * gg[static_cast<std::size_t>(i)];
            tc[static_cast<std::size_t>(i)] = std::tanh(c[static_cast<std::size_t>(i)]);
            h[static_cast<std::size_t>(i)] =
                go[static_cast<std::size_t>(i)] * tc[static_cast<std::size_t>(i)];
        }
        if (cache != nullptr) {
            const std::size_t ts = static_cast<std::size_t>(t);
            cache->gi[ts] = gi;
            cache->gf[ts] = gf;
            cache->gg[ts] = gg;
            cache->go[ts] = go;
            cache->c[ts] = c;
            cache->tanh_c[ts] = tc;
            cache->h[ts] = h;
        }
    }

    std::array<double, 3> logits{};
    for (int r = 0; r < p.output_dim; ++r) {
        double acc = p.by[static_cast<std::size_t>(r)];
        for (int k = 0; k < H; ++k) {
            acc += p.wy.at(r, k) * h[static_cast<std::size_t>(k)];
        }
        logits[static_cast<std::size_t>(r)] = acc;
    }
    const auto probs = softmax3(logits);
    if (cache != nullptr) {
        cache->logits = logits;
        cache->probs = probs;
    }
    return PredictionOutput{probs, argmax3(probs)};
}

double loss(const std::array<double, 3>& probs, int label) {
    if (label < 0 || label > 2) {
        throw std::invalid_argument("loss: label out of range");
    }
    return -std::log(std::max(probs[static_cast<std::size_t>(label)], 1e-12));
}

Gradients zero_gradients(const NetworkParams& p) {
    Gradients g;
    g.wx = Matrix(p.wx.rows, p.wx.cols);
    g.wh = Matrix(p.wh.rows, p.wh.cols);
    g.wy = Matrix(p.wy.rows, p.wy.cols);
    g.b.assign(p.b.size(), 0.0);
    g.by.assign(p.by.size(), 0.0);
    return g;
}

Gradients backward(const NetworkParams& p, const ForwardCache& cache, int label) {
    const int H = p.hidden_dim;
    const int D = p.input_dim;
    const int T = cache.input.cols;
    Gradients g = zero_gradients(p);

    // Softmax + cross-entropy head.
    std::array<double, 3> dlogits = cache.probs;
    dlogits[static_cast<std::size_t>(label)] -= 1.0;

    std::vector<double> dh(static_cast<std::size_t>(H), 0.0);
    for (int r = 0; r < p.output_dim; ++r) {
        const double dl = dlogits[static_cast<std::size_t>(r)];
        g.by[static_cast<std::size_t>(r)] += dl;
        const auto& h_last = cache.h[static_cast<std::size_t>(T - 1)];
        for (int k = 0; k < H; ++k) {
            g.wy.at(r, k) += dl * h_last[static_cast<std::size_t>(k)];
            dh[static_cast<std::size_t>(k)] += dl * p.wy.at(r, k);
        }
    }

    std::vector<double> dc(static_cast<std::size_t>(H), 0.0);
    std::vector<double> dpre(static_cast<std::size_t>(4 * H), 0.0);
    for (int t = T - 1; t >= 0; --t) {
        const std::size_t ts = static_cast<std::size_t>(t);
        const auto& gi = cache.gi[ts];
        const auto& gf = cache.gf[ts];
        const auto& gg = cache.gg[ts];
        const auto& go = cache.go[ts];
        const auto& tc = cache.tanh_c[ts];
        for (int i = 0; i < H; ++i) {
            const std::size_t is = static_cast<std::size_t>(i);
            const double dout = dh[is] * tc[is];
            dc[is] += dh[is] * go[is] * (1.0 - tc[is] * tc[is]);
            const double c_prev =
                t > 0 ? cache.c[ts - 1][is] : 0.0;
            const double din = dc[is] * gg[is];
            const double dfor = dc[is] * c_prev;
            const double dcell = dc[is] * gi[is];
            dpre[is] = din * gi[is] * (1.0 - gi[is]);
            dpre[static_cast<std::size_t>(H) + is] = dfor * gf[is] * (1.0 - gf[is]);
            dpre[static_cast<std::size_t>(2 * H) + is] = dcell * (1.0 - gg[is] * gg[is]);
            dpre[static_cast<std::size_t>(3 * H) + is] = dout * go[is] * (1.0 - go[is]);
            dc[is] *= gf[is];  // flows to c_{t-1}
        }

        const auto* h_prev = t > 0 ? &cache.h[ts - 1] : nullptr;
        std::fill(dh.begin(), dh.end(), 0.0);
        for (int r = 0; r < 4 * H; ++r) {
            const double dp = dpre[static_cast<std::size_t>(r)];
            if (dp == 0.0) continue;
            g.b[static_cast<std::size_t>(r)] += dp;
            double* gwx = &g.wx.d[static_cast<std::size_t>(r) *
                                  static_cast<std::size_t>(D)];
            for (int k = 0; k < D; ++k) gwx[k] += dp * cache.input.at(k, t);
            double* gwh = &g.wh.d[static_cast<std::size_t>(r) *
                                  static_cast<std::size_t>(H)];
            const double* whr = &p.wh.d[static_cast<std::size_t>(r) *
                                        static_cast<std::size_t>(H)];
            if (h_prev != nullptr) {
                for (int k = 0; k < H; ++k) {
                    gwh[k] += dp * (*h_prev)[static_cast<std::size_t>(k)];
                }
            }
            for (int k = 0; k < H; ++k) {
                dh[static_cast<std::size_t>(k)] += dp * whr[k];
            }
        }
    }
    return g;
}

void batch_gradients(const NetworkParams& p, std::span<const Matrix> inputs,
                     std::span<const int> labels, std::span<Gradients> out,
                     std::span<double> losses, ExecMode mode) {
    if (inputs.size() != labels.size() || inputs.size() != out.size() ||
        inputs.size() != losses.size()) {
        throw std::invalid_argument("batch_gradients: size mismatch");
    }
    const std::int64_t n = static_cast<std::int64_t>(inputs.size());
    const auto work = [&](std::int64_t i) {
        ForwardCache cache;
        const auto pred = forward(p, inputs[static_cast<std::size_t>(i)], &cache);
        losses[static_cast<std::size_t>(i)] =
            loss(pred.probs, labels[static_cast<std::size_t>(i)]);
        out[static_cast<std::size_t>(i)] =
            backward(p, cache, labels[static_cast<std::size_t>(i)]);
    };
    if (mode == ExecMode::parallel) {
#pragma omp parallel for schedule(static)
        for (std::int64_t i = 0; i < n; ++i) work(i);
    } else {
        for (std::int64_t i = 0; i < n; ++i) work(i);
    }
}

Normalizer fit_normalizer(std::span<const Matrix> inputs) {
    if (inputs.empty()) {
        throw std::invalid_argument("fit_normalizer: no inputs");
    }
    const int rows = inputs.front().rows;
    Normalizer n;
    n.mean.assign(static_cast<std::size_t>(rows), 0.0);
    n.scale.assign(static_cast<std::size_t>(rows), 1.0);
    std::vector<double> sq(static_cast<std::size_t>(rows), 0.0);
    std::size_t count = 0;
    for (const auto& m : inputs) {
        for (int r = 0; r < rows; ++r) {
            for (int c = 0; c < m.cols; ++c) {
                n.mean[static_cast<std::size_t>(r)] += m.at(r, c);
                sq[static_cast<std::size_t>(r)] += m.at(r, c) * m.at(r, c);
            }
        }
        count += static_cast<std::size_t>(m.cols);
    }
    for (int r = 0; r < rows; ++r) {
        const std::size_t rs = static_cast<std::size_t>(r);
        n.mean[rs] /= static_cast<double>(count);
        const double var = sq[rs] / static_cast<double>(count) - n.mean[rs] * n.mean[rs];
        n.scale[rs] = var > 1e-12 ? std::sqrt(var) : 1.0;
    }
    return n;
}

Matrix apply_normalizer(const Normalizer& n, Matrix m) {
    if (static_cast<std::size_t>(m.rows) != n.mean.size()) {
        throw std::invalid_argument("apply_normalizer: row mismatch");
    }
    for (int r = 0; r < m.rows; ++r) {
        const std::size_t rs = static_cast<std::size_t>(r);
        for (int c = 0; c < m.cols; ++c) {
            m.at(r, c) = (m.at(r, c) - n.mean[rs]) / n.scale[rs];
        }
    }
    return m;
}

Matrix build_input(const dataset::LabeledSample& s, InputMode mode) {
    const int w = s.window;
    const std::size_t ws = static_cast<std::size_t>(w);
    if (s.z.size() != static_cast<std::size_t>(dataset::kSensingRows) * ws) {
        throw std::invalid_argument("build_input: sensing window size mismatch");
    }
    const int rows = mode == InputMode::with_characteristics
                         ? dataset::kSensingRows - 1 + dataset::kCharacteristicRows
                         : dataset::kSensingRows;
    if (mode == InputMode::with_characteristics &&
        s.zhat.size() != static_cast<std::size_t>(dataset::kCharacteristicRows) * ws) {
        throw std::invalid_argument("build_input: characteristic window missing");
    }

    Matrix m(rows, w);
    int out_row = 0;
    for (int r = 0; r < dataset::kSensingRows; ++r) {
        const bool is_pos_row = r % 3 == 0;
        const bool is_target_lane_row = r == 2;
        if (mode == InputMode::with_characteristics && is_target_lane_row) {
            continue;  // constant within the window; dropped in stacked mode
        }
        for (int c = 0; c < w; ++c) {
            double v = s.z[static_cast<std::size_t>(r) * ws +
                           static_cast<std::size_t>(c)];
            if (is_pos_row) {
                v -= s.z[static_cast<std::size_t>(c)];  // relative to target pos
            }
            m.at(out_row, c) = v;
        }
        ++out_row;
    }
    if (mode == InputMode::with_characteristics) {
        for (int r = 0; r < dataset::kCharacteristicRows; ++r) {
            for (int c = 0; c < w; ++c) {
                m.at(out_row, c) = s.zhat[static_cast<std::size_t>(r) * ws +
                                          static_cast<std::size_t>(c)];
            }
            ++out_row;
        }
    }
    return m;
}

void validate(const TrainConfig& c) {
    if (!(c.train_fraction > 0.0 && c.train_fraction < 1.0)) {
        throw std::invalid_argument("TrainConfig: train_fraction must be in (0,1)");
    }
    if (c.epochs < 1 || c.batch_size < 1 || c.hidden_dim < 1) {
        throw std::invalid_argument("TrainConfig: counts must be positive");
    }
    if (!(c.learning_rate > 0.0)) {
        throw std::invalid_argument("TrainConfig: learning_rate must be positive");
    }
}

Split stratified_split(std::span<const dataset::LabeledSample> corpus,
                       double train_fraction, std::uint64_t seed) {
    // class -> vehicle -> sample indices
    std::map<int, std::map<std::int64_t, std::vector<std::size_t>>> groups;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        groups[static_cast<int>(corpus[i].label)][corpus[i].vehicle_id].push_back(i);
    }
    if (groups.size() < 2) {
        throw std::invalid_argument(
            "stratified_split: need at least two classes in the corpus");
    }
    Split split;
    Rng rng(derive_seed(seed, 0x5e17));
    for (auto& [label, vehicles] : groups) {
        std::size_t class_count = 0;
        std::vector<const std::vector<std::size_t>*> vgroups;
        for (auto& [vid, idx] : vehicles) {
            vgroups.push_back(&idx);
            class_count += idx.size();
        }
        rng.shuffle(vgroups);
        const auto target = static_cast<std::size_t>(
            std::llround(train_fraction * static_cast<double>(class_count)));
        std::size_t taken = 0;
        bool class_in_test = false;
        for (std::size_t gi = 0; gi < vgroups.size(); ++gi) {
            // Keep at least one vehicle group per class on the test side.
            const bool must_test = gi + 1 == vgroups.size() && !class_in_test &&
                                   vgroups.size() > 1;
            if (taken < target && !must_test) {
                split.train.insert(split.train.end(), vgroups[gi]->begin(),
                                   vgroups[gi]->end());
                taken += vgroups[gi]->size();
            } else {
                split.test.insert(split.test.end(), vgroups[gi]->begin(),
                                  vgroups[gi]->end());
                class_in_test = true;
            }
        }
    }
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.test.begin(), split.test.end());
    return split;
}

namespace {

double global_norm(const Gradients& g) {
    double s = 0.0;
    for (double v : g.wx.d) s += v * v;
    for (double v : g.wh.d) s += v * v;
    for (double v : g.wy.d) s += v * v;
    for (double v : g.b) s += v * v;
    for (double v : g.by) s += v * v;
    return std::sqrt(s);
}

void scale_gradients(Gradients& g, double f) {
    for (auto& v : g.wx.d) v *= f;
    for (auto& v : g.wh.d) v *= f;
    for (auto& v : g.wy.d) v *= f;
    for (auto& v : g.b) v *= f;
    for (auto& v : g.by) v *= f;
}

void accumulate(Gradients& acc, const Gradients& g, double w) {
    for (std::size_t i = 0; i < acc.wx.d.size(); ++i) acc.wx.d[i] += w * g.wx.d[i];
    for (std::size_t i = 0; i < acc.wh.d.size(); ++i) acc.wh.d[i] += w * g.wh.d[i];
    for (std::size_t i = 0; i < acc.wy.d.size(); ++i) acc.wy.d[i] += w * g.wy.d[i];
    for (std::size_t i = 0; i < acc.b.size(); ++i) acc.b[i] += w * g.b[i];
    for (std::size_t i = 0; i < acc.by.size(); ++i) acc.by[i] += w * g.by[i];
}

void apply_update(NetworkParams& p, const Gradients& g, double lr) {
    for (std::size_t i = 0; i < p.wx.d.size(); ++i) p.wx.d[i] -= lr * g.wx.d[i];
    for (std::size_t i = 0; i < p.wh.d.size(); ++i) p.wh.d[i] -= lr * g.wh.d[i];
    for (std::size_t i = 0; i < p.wy.d.size(); ++i) p.wy.d[i] -= lr * g.wy.d[i];
    for (std::size_t i = 0; i < p.b.size(); ++i) p.b[i] -= lr * g.b[i];
    for (std::size_t i = 0; i < p.by.size(); ++i) p.by[i] -= lr * g.by[i];
}

}  // namespace

TrainResult train(const std::vector<dataset::LabeledSample>& corpus,
                  const TrainConfig& cfg) {
    validate(cfg);
    if (corpus.empty()) {
        throw std::invalid_argument("train: empty corpus");
    }

    TrainResult result;
    result.split = stratified_split(corpus, cfg.train_fraction, cfg.rng_seed);

    // Canonical sample order: training must not depend on the corpus row
    // order, only on the samples themselves and the seed.
    const auto canonical = [&](std::vector<std::size_t> idx) {
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            return std::tie(corpus[a].vehicle_id, corpus[a].anchor_frame) <
                   std::tie(corpus[b].vehicle_id, corpus[b].anchor_frame);
        });
        return idx;
    };
    const auto train_idx = canonical(result.split.train);
    const auto test_idx = canonical(result.split.test);

    std::vector<Matrix> raw_train, raw_test;
    std::vector<int> y_train, y_test;
    for (auto i : train_idx) {
        raw_train.push_back(build_input(corpus[i], cfg.mode));
        y_train.push_back(static_cast<int>(corpus[i].label));
    }
    for (auto i : test_idx) {
        raw_test.push_back(build_input(corpus[i], cfg.mode));
        y_test.push_back(static_cast<int>(corpus[i].label));
    }

    Model model;
    model.mode = cfg.mode;
    model.norm = fit_normalizer(raw_train);
    std::vector<Matrix> x_train, x_test;
    for (auto& m : raw_train) x_train.push_back(apply_normalizer(model.norm, std::move(m)));
    for (auto& m : raw_test) x_test.push_back(apply_normalizer(model.norm, std::move(m)));

    model.params = init_params(x_train.front().rows, cfg.hidden_dim, 3,
                               derive_seed(cfg.rng_seed, 0x1217));

    // Inverse-frequency weights, normalized to mean 1 over the train split.
    std::array<double, 3> class_weight{1.0, 1.0, 1.0};
    if (cfg.class_weighting) {
        std::array<double, 3> counts{0.0, 0.0, 0.0};
        for (int y : y_train) counts[static_cast<std::size_t>(y)] += 1.0;
        for (std::size_t k = 0; k < 3; ++k) {
            class_weight[k] = counts[k] > 0.0
                                  ? static_cast<double>(y_train.size()) /
                                        (3.0 * counts[k])
                                  : 0.0;
        }
    }

    std::vector<std::size_t> order(x_train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<Gradients> slot_grads;
    std::vector<double> slot_losses;
    std::vector<Matrix> batch_inputs;
    std::vector<int> batch_labels;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.rng_seed, 0xe0000 + static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(
                order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const std::size_t bn = end - start;
            batch_inputs.assign(bn, Matrix{});
            batch_labels.assign(bn, 0);
            for (std::size_t k = 0; k < bn; ++k) {
                batch_inputs[k] = x_train[order[start + k]];
                batch_labels[k] = y_train[order[start + k]];
            }
            slot_grads.assign(bn, Gradients{});
            slot_losses.assign(bn, 0.0);
            batch_gradients(model.params, batch_inputs, batch_labels, slot_grads,
                            slot_losses, cfg.exec);

            Gradients acc = zero_gradients(model.params);
            double wsum = 0.0;
            for (std::size_t k = 0; k < bn; ++k) {
                const double w =
                    class_weight[static_cast<std::size_t>(batch_labels[k])];
                accumulate(acc, slot_grads[k], w);
                wsum += w;
            }
            if (wsum > 0.0) scale_gradients(acc, 1.0 / wsum);
            const double norm = global_norm(acc);
            if (norm > cfg.gradient_clip_norm && norm > 0.0) {
                scale_gradients(acc, cfg.gradient_clip_norm / norm);
            }
            apply_update(model.params, acc, cfg.learning_rate);
        }

        // Epoch metrics: training accuracy on the updated parameters and
        // validation on the held-out split, both in fixed index order.
        std::size_t correct = 0;
        double train_loss_eval = 0.0;
        for (std::size_t i = 0; i < x_train.size(); ++i) {
            const auto out = forward(model.params, x_train[i]);
            if (out.label == y_train[i]) ++correct;
            train_loss_eval += loss(out.probs, y_train[i]);
        }
        double val_loss = 0.0;
        std::size_t val_correct = 0;
        for (std::size_t i = 0; i < x_test.size(); ++i) {
            const auto out = forward(model.params, x_test[i]);
            if (out.label == y_test[i]) ++val_correct;
            val_loss += loss(out.probs, y_test[i]);
        }
        result.log.push_back(EpochLog{
            epoch + 1,
            train_loss_eval / static_cast<double>(x_train.size()),
            static_cast<double>(correct) / static_cast<double>(x_train.size()),
            x_test.empty() ? 0.0 : val_loss / static_cast<double>(x_test.size()),
            x_test.empty()
                ? 0.0
                : static_cast<double>(val_correct) / static_cast<double>(x_test.size())});
    }
    result.model = std::move(model);
    return result;
}

PredictionOutput predict(const Model& m, const dataset::LabeledSample& s) {
    const Matrix input = apply_normalizer(m.norm, build_input(s, m.mode));
    return forward(m.params, input);
}

namespace {

std::uint64_t model_checksum(const Model& m) {
    std::uint64_t h = io::fnv1a(&m.params.input_dim, sizeof(int));
    h = io::fnv1a(&m.params.hidden_dim, sizeof(int), h);
    h = io::fnv1a(&m.params.output_dim, sizeof(int), h);
    const auto hash_vec = [&h](const std::vector<double>& v) {
        h = io::fnv1a(v.data(), v.size() * sizeof(double), h);
    };
    hash_vec(m.params.wx.d);
    hash_vec(m.params.wh.d);
    hash_vec(m.params.b);
    hash_vec(m.params.wy.d);
    hash_vec(m.params.by);
    hash_vec(m.norm.mean);
    hash_vec(m.norm.scale);
    return h;
}

}  // namespace

void save_model(const Model& m, const std::string& path) {
    nlohmann::json j;
    j["format_version"] = kModelFormatVersion;
    j["mode"] = to_string(m.mode);
    j["input_dim"] = m.params.input_dim;
    j["hidden_dim"] = m.params.hidden_dim;
    j["output_dim"] = m.params.output_dim;
    j["wx"] = m.params.wx.d;
    j["wh"] = m.params.wh.d;
    j["b"] = m.params.b;
    j["wy"] = m.params.wy.d;
    j["by"] = m.params.by;
    j["norm_mean"] = m.norm.mean;
    j["norm_scale"] = m.norm.scale;
    j["checksum"] = model_checksum(m);
    io::atomic_write(path, j.dump());
}

Model load_model(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error("model file unreadable: " + std::string(e.what()));
    }
    const int version = j.at("format_version").get<int>();
    if (version != kModelFormatVersion) {
        throw std::runtime_error("model format version " +
                                 std::to_string(version) + " not supported");
    }
    Model m;
    m.mode = input_mode_from_string(j.at("mode").get<std::string>());
    m.params.input_dim = j.at("input_dim").get<int>();
    m.params.hidden_dim = j.at("hidden_dim").get<int>();
    m.params.output_dim = j.at("output_dim").get<int>();
    m.params.wx = Matrix(4 * m.params.hidden_dim, m.params.input_dim);
    m.params.wx.d = j.at("wx").get<std::vector<double>>();
    m.params.wh = Matrix(4 * m.params.hidden_dim, m.params.hidden_dim);
    m.params.wh.d = j.at("wh").get<std::vector<double>>();
    m.params.b = j.at("b").get<std::vector<double>>();
    m.params.wy = Matrix(m.params.output_dim, m.params.hidden_dim);
    m.params.wy.d = j.at("wy").get<std::vector<double>>();
    m.params.by = j.at("by").get<std::vector<double>>();
    m.norm.mean = j.at("norm_mean").get<std::vector<double>>();
    m.norm.scale = j.at("norm_scale").get<std::vector<double>>();

    const auto expect = [](std::size_t got, std::size_t want, const char* what) {
        if (got != want) {
            throw std::runtime_error(std::string("model shape mismatch in ") + what);
        }
    };
    const auto H = static_cast<std::size_t>(m.params.hidden_dim);
    const auto D = static_cast<std::size_t>(m.params.input_dim);
    const auto O = static_cast<std::size_t>(m.params.output_dim);
    expect(m.params.wx.d.size(), 4 * H * D, "wx");
    expect(m.params.wh.d.size(), 4 * H * H, "wh");
    expect(m.params.b.size(), 4 * H, "b");
    expect(m.params.wy.d.size(), O * H, "wy");
    expect(m.params.by.size(), O, "by");
    expect(m.norm.mean.size(), D, "norm_mean");
    expect(m.norm.scale.size(), D, "norm_scale");

    if (j.at("checksum").get<std::uint64_t>() != model_checksum(m)) {
        throw std::runtime_error("model checksum mismatch: " + path);
    }
    return m;
}

std::string training_log_csv(std::span<const EpochLog> log) {
    std::string out = "epoch,train_loss,train_acc,val_loss,val_acc\n";
    for (const auto& e : log) {
        out += std::to_string(e.epoch);
        out.push_back(',');
        out += io::format_double(e.train_loss);
        out.push_back(',');
        out += io::format_double(e.train_acc);
        out.push_back(',');
        out += io::format_double(e.val_loss);
        out.push_back(',');
        out += io::format_double(e.val_acc);
        out.push_back('\n');
    }
    return out;
}

}  // namespace drivepred::predictor
