#pragma once

#include <span>
#include <vector>

#include "flowreg/data.hpp"
#include "flowreg/grid.hpp"
#include "flowreg/model.hpp"
#include "flowreg/odeint.hpp"

namespace flowreg {

struct LossWeights {
    double lambda1 = 0.05;   // smoothness
    double lambda2 = 1e-4;   // boundary
};

/// smoothness/boundary hold the raw (unweighted) regularizer sums;
/// total = similarity + lambda1 * smoothness + lambda2 * boundary.
struct LossBreakdown {
    double total = 0.0;
    double similarity = 0.0;
    double smoothness = 0.0;
    double boundary = 0.0;
    std::vector<double> per_time;  // similarity per observation, k >= 1
};

/// Global Pearson correlation of intensities, in [-1, 1]. Throws if
/// either input has zero variance.
double ncc(const ScalarGrid& a, const ScalarGrid& b);

/// 1 - ncc; zero iff perfectly (positively) correlated.
double similarity_loss(const ScalarGrid& warped, const ScalarGrid& target);

/// Mean over voxels of the squared Frobenius norm of the displacement
/// gradient (all channel x axis partials).
double smoothness_loss(const VectorGrid& displacement);

/// Mean squared displacement over the 2*d boundary planes; voxels on
/// several planes are counted once per plane membership.
double boundary_loss(const VectorGrid& displacement);

// Evaluation metrics.
double nrmse(const ScalarGrid& pred, const ScalarGrid& ref);
double psnr(const ScalarGrid& pred, const ScalarGrid& ref, double peak = 1.0);
/// Mean local SSIM with a uniform window of 7 per axis over the valid
/// (fully covered) region; population moments; C1=(0.01)^2, C2=(0.03)^2.
double ssim(const ScalarGrid& pred, const ScalarGrid& ref);

/// Full-resolution displacement carried by an ODE state: the state itself
/// in direct mode, decoded and smoothed (arch.smoothing_window) in latent
/// mode.
VectorGrid displacement_from_state(const VelocityModel& model, const State& state);

/// Loss terms given ODE states at the dataset's normalized times
/// (states[0] is the initial state and carries no loss). In latent mode
/// each state is decoded and smoothed (arch.smoothing_window) first.
struct StateLosses {
    LossBreakdown breakdown;
    std::vector<VectorGrid> displacements;  // full resolution, k >= 1
    std::vector<ScalarGrid> warped;         // k >= 1
};
StateLosses loss_from_states(const VelocityModel& model, const SequenceDataset& dataset,
                             const LossWeights& weights, std::span<const State> states);

/// Exact gradient of the total loss w.r.t. each ODE state (through
/// decoding, warping, NCC and the regularizers) plus the decoder-kernel
/// gradient (full parameter-vector layout, zero elsewhere).
struct CotangentSet {
    std::vector<State> state_cotangents;  // one per time, index 0 all-zero
    std::vector<double> decoder_grads;
};
CotangentSet cotangents_from_states(const VelocityModel& model, const SequenceDataset& dataset,
                                    const LossWeights& weights, std::span<const State> states);

/// Integrates the trajectory to every observed time and accumulates
/// similarity + weighted regularizers over k >= 1.
LossBreakdown regression_loss(const VelocityModel& model, const SequenceDataset& dataset,
                              const SolverConfig& solver, const LossWeights& weights);

CotangentSet loss_cotangents(const VelocityModel& model, const SequenceDataset& dataset,
                             const SolverConfig& solver, const LossWeights& weights);

}  // namespace flowreg
