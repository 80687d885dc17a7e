#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "flowreg/data.hpp"
#include "flowreg/model.hpp"
#include "flowreg/objective.hpp"
#include "flowreg/odeint.hpp"

namespace flowreg {

struct FitConfig {
    ModelMode mode = ModelMode::direct;
    SolverConfig solver;
    LossWeights weights;
    double learning_rate = 0.005;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    int epochs = 300;
    int smoothing_window = 15;  // auto-reduced to fit small grids
    int latent_factor = 4;
    std::uint64_t seed = 0;
    // architecture knobs
    std::vector<int> conv_channels = {8, 16};
    int hidden_width = 128;
    int time_embed_width = 0;  // 0 = flattened feature width
};

struct FitReport {
    std::vector<LossBreakdown> loss_history;  // one entry per epoch, pre-update
    VelocityModel final_model;
    double wall_time_sec = 0.0;
    // fold_percentage of the displacement at the last observed time,
    // sampled at epochs 1, 11, 21, ... and the final epoch.
    std::vector<std::pair<int, double>> fold_history;
};

struct AdamMoments {
    std::vector<double> m, v;
};

/// Standard bias-corrected Adam update; pure. step_index starts at 1.
/// Throws naming the offending flat coordinate on a non-finite gradient.
std::pair<std::vector<double>, AdamMoments> adam_step(std::span<const double> params,
                                                      std::span<const double> grads,
                                                      const AdamMoments& moments, int step_index,
                                                      const FitConfig& cfg);

/// Largest odd window <= the smallest spatial extent (at least 1).
int clamp_smoothing_window(int window, const Dims& dims);

/// Throws std::invalid_argument on any invariant violation (fit also
/// runs this before training starts).
void validate_fit_config(const FitConfig& cfg);

/// Full-batch Adam optimization of the velocity model against the
/// regression loss; deterministic in (seed, config, dataset).
FitReport fit(const SequenceDataset& dataset, const FitConfig& cfg);

/// Warped image and full-resolution displacement at each requested time
/// (ascending, within [0, 1]), integrated as one continuous trajectory.
std::vector<std::pair<ScalarGrid, VectorGrid>> predict(const VelocityModel& model,
                                                       const ScalarGrid& baseline,
                                                       std::span<const double> times,
                                                       const SolverConfig& solver);

struct GradCheckResult {
    double adjoint_vs_fd = 0.0;      // norm-relative error on sampled coordinates
    double adjoint_vs_direct = 0.0;  // norm-relative error on full gradient vectors
    bool pass = false;
};

/// Adjoint-vs-finite-difference and adjoint-vs-direct checks on a small
/// randomized model (size x size grid, one conv stage). corrupt_vjp is a
/// negative-control hook that perturbs the network vjp.
GradCheckResult run_gradcheck(std::uint64_t seed, int size, bool corrupt_vjp = false);

}  // namespace flowreg
