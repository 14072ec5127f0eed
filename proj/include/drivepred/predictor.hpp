#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "drivepred/dataset.hpp"
#include "drivepred/parallel.hpp"

namespace drivepred::predictor {

// P_A consumes the sensing window stacked with the characteristic window
// (24 x T); P_B the sensing window alone (21 x T).
enum class InputMode { with_characteristics, sensing_only };
const char* to_string(InputMode m);
InputMode input_mode_from_string(const std::string& s);

struct Matrix {
    int rows = 0, cols = 0;
    std::vector<double> d;
    Matrix() = default;
    Matrix(int r, int c)
        : rows(r), cols(c),
          d(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), 0.0) {}
    double& at(int r, int c) {
        return d[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) +
                 static_cast<std::size_t>(c)];
    }
    double at(int r, int c) const {
        return d[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) +
                 static_cast<std::size_t>(c)];
    }
};

// LSTM cell weights packed by gate blocks [input, forget, cell, output] plus
// the classification head. Hidden size 150 by default, 3 output classes.
struct NetworkParams {
    int input_dim = 24;
    int hidden_dim = 150;
    int output_dim = 3;
    Matrix wx;               // (4*hidden, input)
    Matrix wh;               // (4*hidden, hidden)
    std::vector<double> b;   // 4*hidden
    Matrix wy;               // (output, hidden)
    std::vector<double> by;  // output
};

NetworkParams init_params(int input_dim, int hidden_dim, int output_dim,
                          std::uint64_t seed);

struct PredictionOutput {
    std::array<double, 3> probs{0.0, 0.0, 0.0};
    int label = 0;  // argmax; ties break toward the lower class index
};

struct ForwardCache {
    Matrix input;
    std::vector<std::vector<double>> gi, gf, gg, go, c, tanh_c, h;  // per step
    std::array<double, 3> logits{}, probs{};
};

// Runs the sequence through the LSTM, reads the final hidden state through
// the fully-connected layer and a softmax. Throws on an input whose row count
// differs from the parameter input_dim.
PredictionOutput forward(const NetworkParams& p, const Matrix& input,
                         ForwardCache* cache = nullptr);

// Cross-entropy with a one-hot target: -ln(probs[label]), probability floored
// at 1e-12 before the log.
double loss(const std::array<double, 3>& probs, int label);

struct Gradients {
    Matrix wx, wh, wy;
    std::vector<double> b, by;
};

Gradients zero_gradients(const NetworkParams& p);

// Exact analytic gradients by backpropagation through time over the cached
// forward pass.
Gradients backward(const NetworkParams& p, const ForwardCache& cache, int label);

// Per-sample gradients into independent slots; the parallel flavor matches
// the serial one exactly because reduction order is fixed by the caller.
void batch_gradients(const NetworkParams& p, std::span<const Matrix> inputs,
                     std::span<const int> labels, std::span<Gradients> out,
                     std::span<double> losses, ExecMode mode);

// Per-row affine standardization fitted on the training split.
struct Normalizer {
    std::vector<double> mean, scale;
};

Normalizer fit_normalizer(std::span<const Matrix> inputs);
Matrix apply_normalizer(const Normalizer& n, Matrix m);

// Assembles the network input from a sample: positions re-expressed relative
// to the target at the same timestep; with_characteristics drops the target's
// lane row and appends the 4 characteristic rows (21 -> 24 rows total).
Matrix build_input(const dataset::LabeledSample& s, InputMode mode);

struct Model {
    InputMode mode = InputMode::with_characteristics;
    NetworkParams params;
    Normalizer norm;
};

struct TrainConfig {
    int epochs = 40;
    int batch_size = 16;
    double learning_rate = 0.01;
    double gradient_clip_norm = 5.0;
    std::uint64_t rng_seed = 1;
    double train_fraction = 0.75;
    bool class_weighting = false;
    InputMode mode = InputMode::with_characteristics;
    int hidden_dim = 150;
    ExecMode exec = ExecMode::parallel;
};

void validate(const TrainConfig& c);

struct EpochLog {
    int epoch;
    double train_loss, train_acc, val_loss, val_acc;
};

struct Split {
    std::vector<std::size_t> train, test;
};

// 75/25 split stratified by class, grouping samples of the same vehicle on
// one side. Throws when fewer than two classes are present.
Split stratified_split(std::span<const dataset::LabeledSample> corpus,
                       double train_fraction, std::uint64_t seed);

struct TrainResult {
    Model model;
    std::vector<EpochLog> log;
    Split split;
};

TrainResult train(const std::vector<dataset::LabeledSample>& corpus,
                  const TrainConfig& cfg);

PredictionOutput predict(const Model& m, const dataset::LabeledSample& s);

void save_model(const Model& m, const std::string& path);
Model load_model(const std::string& path);

std::string training_log_csv(std::span<const EpochLog> log);

}  // namespace drivepred::predictor
