#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flowreg/grid.hpp"
#include "flowreg/odeint.hpp"

namespace flowreg {

enum class ModelMode { direct, latent };

/// Architecture descriptor. Parameter shapes are a pure function of this
/// struct once time_embed_width has been resolved.
struct Arch {
    ModelMode mode = ModelMode::direct;
    Dims dims;                               // full-resolution grid extents
    std::vector<int> conv_channels = {8, 16};  // one entry per stride-2 conv stage
    int time_embed_width = 0;                // 0 resolves to the flattened feature width
    int hidden_width = 128;
    int latent_factor = 4;                   // latent mode: per-axis downsampling
    int smoothing_window = 15;               // latent mode: decode smoothing window

    int spatial_axes() const { return static_cast<int>(dims.size()); }
    Dims state_dims() const;                 // dims (direct) or dims/latent_factor (latent)
};

struct ParamSpec {
    std::string name;
    std::vector<int> shape;
    std::size_t offset = 0;
    std::size_t count = 0;
};

struct ParamLayout {
    std::vector<ParamSpec> entries;
    std::size_t total = 0;
    const ParamSpec* find(std::string_view name) const;
    // Name of the array containing flat coordinate i.
    const ParamSpec& owner(std::size_t i) const;
};

/// Precomputed shapes and parameter offsets for fast evaluation.
struct NetPlan {
    int d = 0;
    Dims state_dims;
    int state_channels = 0;
    std::size_t state_size = 0;
    std::vector<Dims> stage_dims;   // stage_dims[0] = state_dims, then per-stage outputs
    std::vector<int> stage_ch;      // stage_ch[0] = state_channels, then conv_channels
    std::vector<std::size_t> conv_w, conv_b;
    int flat_width = 0;             // conv output, flattened
    int embed_width = 0;
    int hidden = 0;
    std::size_t temb_w1 = 0, temb_b1 = 0, temb_w2 = 0, temb_b2 = 0;
    std::size_t fc1_w = 0, fc1_b = 0, fc2_w = 0, fc2_b = 0;
    std::size_t dec_w = 0;          // latent mode only (kernel, no bias)
    std::size_t total = 0;
};

/// Dynamics network parameters plus everything needed to evaluate them.
/// Immutable after construction; updates produce a new parameter vector.
struct VelocityModel {
    Arch arch;  // time_embed_width resolved
    ParamLayout layout;
    NetPlan plan;
    std::vector<double> params;
};

// Validates the arch (latent divisibility, positive widths) and resolves
// time_embed_width = 0 to the flattened feature width.
Arch resolve_arch(const Arch& arch);
ParamLayout build_layout(const Arch& resolved);
NetPlan build_plan(const Arch& resolved);

/// Fan-in-scaled uniform init for hidden layers; the final fully connected
/// layer and the decoder residual kernel start at zero, so a fresh model
/// produces the zero velocity field and the identity trajectory.
VelocityModel init_params(const Arch& arch, std::uint64_t seed);

/// Draws every parameter (including the normally zero-initialized final
/// layer and decoder kernel). Used by gradient self-checks, where a zero
/// output layer would hide everything upstream.
void randomize_all_params(VelocityModel& model, std::uint64_t seed);

// state/out are VectorGrid data over arch.state_dims(), channel-fastest.
// Pipeline: stride-2 conv stages with tanh, flatten, add the 2-layer time
// embedding of t, two fully connected layers with tanh between, reshape.
void velocity_forward(const NetPlan& plan, std::span<const double> params,
                      std::span<const double> state, double t, std::span<double> out);

// Exact reverse-mode derivative of velocity_forward. grad_state is
// overwritten, grad_params accumulated into.
void velocity_vjp(const NetPlan& plan, std::span<const double> params,
                  std::span<const double> state, double t, std::span<const double> cotangent,
                  std::span<double> grad_state, std::span<double> grad_params);

VectorGrid velocity_forward(const VelocityModel& m, const VectorGrid& state, double t);

/// Non-learned restriction: per-channel average pooling, window = stride
/// = factor.
VectorGrid encode(const VectorGrid& displacement, int factor);

/// Latent-to-full-resolution pathway: multilinear upsampling, plus a
/// learned residual convolution (kernel 3, no bias, zero-initialized)
/// of the upsampled field, then box smoothing.
VectorGrid decode(const VelocityModel& m, const VectorGrid& latent, int window);

/// Adjoint of decode: returns the cotangent w.r.t. the latent field and
/// accumulates the decoder-kernel gradient into grad_params (full
/// parameter-vector layout).
VectorGrid decode_vjp(const VelocityModel& m, const VectorGrid& latent, int window,
                      const VectorGrid& cotangent, std::span<double> grad_params);

// Exact-on-affine multilinear upsampling (endpoints map to endpoints).
VectorGrid upsample_linear(const VectorGrid& latent, const Dims& out_dims);
VectorGrid upsample_linear_adjoint(const VectorGrid& cotangent, const Dims& latent_dims);

void save_checkpoint(const VelocityModel& m, const std::filesystem::path& path);
VelocityModel load_checkpoint(const std::filesystem::path& path);

/// File-format violations (magic, version, shape mismatch, truncation).
struct format_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Adapter presenting the velocity network as ODE dynamics.
struct VelocityDynamics final : DynamicsFn {
    const NetPlan* plan;
    explicit VelocityDynamics(const NetPlan& p) : plan(&p) {}

    void eval(std::span<const double> y, double t, std::span<const double> params,
              std::span<double> dy) const override {
        velocity_forward(*plan, params, y, t, dy);
    }
    void vjp(std::span<const double> y, double t, std::span<const double> params,
             std::span<const double> cotangent, std::span<double> grad_y,
             std::span<double> grad_params) const override {
        velocity_vjp(*plan, params, y, t, cotangent, grad_y, grad_params);
    }
};

}  // namespace flowreg
