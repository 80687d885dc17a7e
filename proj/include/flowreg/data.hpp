#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "flowreg/grid.hpp"
#include "flowreg/model.hpp"  // format_error

namespace flowreg {

/// Ordered observations {(I_k, t_k)} sharing one lattice. Times are kept
/// both raw and normalized to [0,1] by (t - t0) / (tmax - t0).
struct SequenceDataset {
    std::vector<ScalarGrid> frames;
    std::vector<double> raw_times;  // strictly ascending
    std::vector<double> times;      // normalized, times[0] == 0
    Dims dims;
};

/// Sorts by time, validates (>= 2 observations, distinct times, shared
/// dims, intensities finite) and normalizes times.
SequenceDataset make_dataset(std::vector<ScalarGrid> frames, std::vector<double> raw_times);

enum class SynthKind { translate_disk, scale_disk, contract_ring };

struct SynthSpec {
    SynthKind kind = SynthKind::translate_disk;
    Dims size;
    int frames = 5;
    double magnitude = 0.0;  // translation in voxels, or final scale ratio
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;
};

struct SynthResult {
    SequenceDataset dataset;
    std::vector<VectorGrid> ground_truth;  // backward-warp displacement, frames 1..K-1
};

/// Analytic shapes with a smooth sigmoid edge, deformed by an exact
/// coordinate map per frame; ground-truth fields follow the same
/// backward-warp convention as warp_image, so
/// warp_image(frame0, ground_truth[k-1]) reproduces frame k up to
/// interpolation error. Frame times are k/(frames-1).
SynthResult synth_sequence(const SynthSpec& spec);

// NDGR grid file:
// "NDGR" | u16 LE version=1 | u8 ndim in {2,3} | u32 LE dims x ndim |
// u32 LE channels | u8 dtype (0 = float32 LE) | payload, row-major,
// channel-fastest.
void write_grid(const ScalarGrid& grid, const std::filesystem::path& path);
void write_grid(const VectorGrid& grid, const std::filesystem::path& path);

using GridValue = std::variant<ScalarGrid, VectorGrid>;
GridValue read_grid(const std::filesystem::path& path);
ScalarGrid read_scalar_grid(const std::filesystem::path& path);
VectorGrid read_vector_grid(const std::filesystem::path& path);

// Manifest: UTF-8 JSON {"frames": [{"path": string, "time": number}, ...]},
// paths relative to the manifest's directory.
SequenceDataset read_manifest(const std::filesystem::path& path);
void write_manifest(const std::vector<std::pair<std::string, double>>& entries,
                    const std::filesystem::path& path);

}  // namespace flowreg
