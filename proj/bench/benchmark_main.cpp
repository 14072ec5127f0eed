// Timing comparison of the serial reference kernels against their
// OpenMP-parallel twins: GA population evaluation and LSTM batch gradients.
#include <chrono>
#include <cstdio>
#include <vector>

#include "drivepred/dataset.hpp"
#include "drivepred/estimation.hpp"
#include "drivepred/predictor.hpp"
#include "drivepred/rng.hpp"

using namespace drivepred;

namespace {

double time_s(const auto& fn, int reps) {
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double>(t1 - t0).count() / reps;
}

void report(const char* name, double serial, double parallel) {
    std::printf("%-28s serial %8.4f s   parallel %8.4f s   speedup %.2fx\n",
                name, serial, parallel, serial / parallel);
}

}  // namespace

int main() {
    // GA cost evaluation over one estimation window.
    traffic::IdmParams base;
    dataset::SquareWaveSpec spec;
    spec.base = base;
    const auto traj = dataset::generate_synthetic_trajectory(spec, 7);

    estimation::EstimationWindow w;
    w.dt = 0.1;
    for (std::size_t i = 0; i < 30; ++i) {
        const auto& lead = traj.records[i];
        const auto& foll = traj.records[traj.records.size() / 2 + i];
        w.leader_vel.push_back(lead.vel);
        w.follower_vel.push_back(foll.vel);
        w.gap.push_back(lead.pos - foll.pos + 40.0);
    }
    const auto cost = [&](const estimation::Vec3& th) {
        return estimation::fitting_cost(th, w, base);
    };
    Rng rng(11);
    const auto bounds = estimation::ParamBounds::hard();
    std::vector<estimation::Vec3> pop(4096);
    for (auto& v : pop) {
        for (int d = 0; d < 3; ++d) v[d] = rng.uniform(bounds.lo[d], bounds.hi[d]);
    }
    std::vector<double> out_s(pop.size()), out_p(pop.size());
    const double ga_serial = time_s(
        [&] { estimation::evaluate_population(cost, pop, out_s, ExecMode::serial); }, 5);
    const double ga_parallel = time_s(
        [&] { estimation::evaluate_population(cost, pop, out_p, ExecMode::parallel); }, 5);
    report("GA population evaluation", ga_serial, ga_parallel);
    if (out_s != out_p) {
        std::printf("MISMATCH between serial and parallel GA evaluation\n");
        return 1;
    }

    // LSTM batch gradients at the production size (24 x 30, hidden 150).
    const auto params = predictor::init_params(24, 150, 3, 21);
    std::vector<predictor::Matrix> inputs;
    std::vector<int> labels;
    Rng in_rng(31);
    for (int i = 0; i < 32; ++i) {
        predictor::Matrix m(24, 30);
        for (auto& v : m.d) v = in_rng.normal();
        inputs.push_back(std::move(m));
        labels.push_back(static_cast<int>(in_rng.uniform_int(3)));
    }
    std::vector<predictor::Gradients> gs(inputs.size()), gp(inputs.size());
    std::vector<double> ls(inputs.size()), lp(inputs.size());
    const double nn_serial = time_s(
        [&] { predictor::batch_gradients(params, inputs, labels, gs, ls, ExecMode::serial); },
        3);
    const double nn_parallel = time_s(
        [&] { predictor::batch_gradients(params, inputs, labels, gp, lp, ExecMode::parallel); },
        3);
    report("LSTM batch gradients", nn_serial, nn_parallel);
    for (std::size_t i = 0; i < gs.size(); ++i) {
        if (gs[i].wx.d != gp[i].wx.d || ls[i] != lp[i]) {
            std::printf("MISMATCH between serial and parallel gradients\n");
            return 1;
        }
    }
    return 0;
}
