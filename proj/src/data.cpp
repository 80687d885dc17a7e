#include "flowreg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "flowreg/rng.hpp"

namespace flowreg {

using nlohmann::json;

SequenceDataset make_dataset(std::vector<ScalarGrid> frames, std::vector<double> raw_times) {
    if (frames.size() != raw_times.size())
        throw std::invalid_argument("make_dataset: frame/time count mismatch");
    if (frames.size() < 2)
        throw std::invalid_argument("make_dataset: need >= 2 observations, got " +
                                    std::to_string(frames.size()));
    std::vector<std::size_t> order(frames.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return raw_times[a] < raw_times[b]; });

    SequenceDataset ds;
    ds.dims = frames[order[0]].dims;
    for (std::size_t i = 0; i < order.size(); ++i) {
        const std::size_t k = order[i];
        if (!std::isfinite(raw_times[k]))
            throw std::invalid_argument("make_dataset: non-finite time at entry " + std::to_string(k));
        if (i > 0 && !(raw_times[order[i]] > raw_times[order[i - 1]]))
            throw std::invalid_argument("make_dataset: duplicate time " +
                                        std::to_string(raw_times[order[i]]));
        if (frames[k].dims != ds.dims)
            throw std::invalid_argument("make_dataset: mixed dims at entry " + std::to_string(k));
        for (double v : frames[k].data)
            if (!std::isfinite(v))
                throw std::invalid_argument("make_dataset: non-finite intensity in frame " +
                                            std::to_string(k));
        ds.frames.push_back(std::move(frames[k]));
        ds.raw_times.push_back(raw_times[k]);
    }
    const double t0 = ds.raw_times.front(), span = ds.raw_times.back() - t0;
    ds.times.resize(ds.raw_times.size());
    ds.times[0] = 0.0;
    for (std::size_t k = 1; k < ds.raw_times.size(); ++k)
        ds.times[k] = (ds.raw_times[k] - t0) / span;
    return ds;
}

// ---- synthetic sequences -----------------------------------------------------

namespace {

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

constexpr double kBackground = 0.08;
constexpr double kForeground = 0.92;
constexpr double kEdgeSoftness = 1.5;  // voxels

struct ShapeParams {
    std::vector<double> center;
    double radius = 0.0;      // disk radius or ring mid-radius
    double thickness = 0.0;   // ring only
};

ShapeParams shape_params(const SynthSpec& spec) {
    ShapeParams sp;
    const int d = static_cast<int>(spec.size.size());
    const double min_dim = static_cast<double>(*std::min_element(spec.size.begin(), spec.size.end()));
    for (int a = 0; a < d; ++a) sp.center.push_back(0.5 * (spec.size[a] - 1));
    if (spec.kind == SynthKind::translate_disk) {
        sp.radius = 0.22 * min_dim;
        sp.center[0] -= 0.5 * spec.magnitude;  // motion along axis 0, symmetric about center
    } else if (spec.kind == SynthKind::scale_disk) {
        sp.radius = 0.22 * min_dim;
    } else {
        sp.radius = 0.30 * min_dim;
        sp.thickness = 0.12 * min_dim;
    }
    return sp;
}

// Intensity profile at mapped radius/offset.
double render_voxel(const SynthSpec& spec, const ShapeParams& sp, const double* x, double alpha) {
    const int d = static_cast<int>(spec.size.size());
    double prof;
    if (spec.kind == SynthKind::translate_disk) {
        double r2 = 0.0;
        for (int a = 0; a < d; ++a) {
            const double dx = x[a] - sp.center[a] - (a == 0 ? alpha : 0.0);
            r2 += dx * dx;
        }
        prof = (sp.radius - std::sqrt(r2)) / kEdgeSoftness;
    } else {
        const double s = alpha;  // current scale factor
        double r2 = 0.0;
        for (int a = 0; a < d; ++a) {
            const double dx = (x[a] - sp.center[a]) / s;
            r2 += dx * dx;
        }
        const double r = std::sqrt(r2);
        if (spec.kind == SynthKind::scale_disk)
            prof = (sp.radius - r) / kEdgeSoftness;
        else
            prof = (0.5 * sp.thickness - std::abs(r - sp.radius)) / kEdgeSoftness;
    }
    return kBackground + (kForeground - kBackground) * logistic(prof);
}

void check_inside(const SynthSpec& spec, const ShapeParams& sp) {
    const int d = static_cast<int>(spec.size.size());
    const double margin = kEdgeSoftness;
    if (spec.kind == SynthKind::translate_disk) {
        for (int a = 0; a < d; ++a) {
            const double drift_lo = a == 0 ? std::min(0.0, spec.magnitude) : 0.0;
            const double drift_hi = a == 0 ? std::max(0.0, spec.magnitude) : 0.0;
            const double lo = sp.center[a] + drift_lo - sp.radius - margin;
            const double hi = sp.center[a] + drift_hi + sp.radius + margin;
            if (lo < 0.0 || hi > spec.size[a] - 1)
                throw std::invalid_argument("synth_sequence: shape escapes the grid (translation " +
                                            std::to_string(spec.magnitude) + " on axis 0)");
        }
    } else {
        const double s_max = std::max(1.0, spec.magnitude);
        const double extent = spec.kind == SynthKind::scale_disk
                                  ? sp.radius * s_max
                                  : (sp.radius + 0.5 * sp.thickness) * s_max;
        const double s_min = std::min(1.0, spec.magnitude);
        if (s_min <= 0.0)
            throw std::invalid_argument("synth_sequence: scale ratio must be positive");
        for (int a = 0; a < d; ++a)
            if (sp.center[a] - extent - margin < 0.0 ||
                sp.center[a] + extent + margin > spec.size[a] - 1)
                throw std::invalid_argument("synth_sequence: shape escapes the grid (scale ratio " +
                                            std::to_string(spec.magnitude) + ")");
    }
}

}  // namespace

SynthResult synth_sequence(const SynthSpec& spec) {
    if (spec.frames < 2) throw std::invalid_argument("synth_sequence: frames must be >= 2");
    if (spec.size.size() != 2 && spec.size.size() != 3)
        throw std::invalid_argument("synth_sequence: size must have 2 or 3 axes");
    for (int n : spec.size)
        if (n < 4) throw std::invalid_argument("synth_sequence: axis too short");
    if (spec.noise_sigma < 0.0)
        throw std::invalid_argument("synth_sequence: noise_sigma must be >= 0");

    const ShapeParams sp = shape_params(spec);
    check_inside(spec, sp);

    const int d = static_cast<int>(spec.size.size());
    const int K = spec.frames;
    std::mt19937_64 gen(spec.seed);

    std::vector<ScalarGrid> frames;
    std::vector<double> times;
    std::vector<VectorGrid> gt;
    const VoxelCloud id = identity_cloud(spec.size);

    for (int k = 0; k < K; ++k) {
        const double frac = static_cast<double>(k) / static_cast<double>(K - 1);
        // translate: offset in voxels; scale kinds: scale factor blending 1 -> magnitude
        const double alpha = spec.kind == SynthKind::translate_disk
                                 ? frac * spec.magnitude
                                 : 1.0 + (spec.magnitude - 1.0) * frac;
        ScalarGrid frame(spec.size);
        for (std::size_t v = 0; v < frame.size(); ++v)
            frame.data[v] = render_voxel(spec, sp, &id.positions[v * d], alpha);
        if (spec.noise_sigma > 0.0) {
            for (double& val : frame.data) {
                val += spec.noise_sigma * gaussian(gen);
                val = std::clamp(val, 0.0, 1.0);
            }
        }
        frames.push_back(std::move(frame));
        times.push_back(frac);

        if (k > 0) {
            VectorGrid u(spec.size);
            if (spec.kind == SynthKind::translate_disk) {
                for (std::size_t v = 0; v < u.vox(); ++v) u.data[v * d + 0] = -alpha;
            } else {
                const double coeff = 1.0 / alpha - 1.0;
                for (std::size_t v = 0; v < u.vox(); ++v)
                    for (int a = 0; a < d; ++a)
                        u.data[v * d + a] = coeff * (id.positions[v * d + a] - sp.center[a]);
            }
            gt.push_back(std::move(u));
        }
    }

    SynthResult out;
    out.dataset = make_dataset(std::move(frames), std::move(times));
    out.ground_truth = std::move(gt);
    return out;
}

// ---- NDGR file format --------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'N', 'D', 'G', 'R'};
constexpr std::uint16_t kVersion = 1;
constexpr std::size_t kMaxVoxels = std::size_t(1) << 31;

void append_u16(std::string& s, std::uint16_t v) {
    s.push_back(static_cast<char>(v & 0xff));
    s.push_back(static_cast<char>((v >> 8) & 0xff));
}

void append_u32(std::string& s, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void write_ndgr(const Dims& dims, int channels, const std::vector<double>& data,
                const std::filesystem::path& path) {
    std::string head;
    head.append(kMagic, 4);
    append_u16(head, kVersion);
    head.push_back(static_cast<char>(dims.size()));
    for (int n : dims) append_u32(head, static_cast<std::uint32_t>(n));
    append_u32(head, static_cast<std::uint32_t>(channels));
    head.push_back(0);  // dtype 0 = float32 LE

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("write_grid: cannot open " + path.string());
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    std::vector<float> payload(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) payload[i] = static_cast<float>(data[i]);
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size() * 4));
    if (!out) throw std::runtime_error("write_grid: write failed for " + path.string());
}

}  // namespace

void write_grid(const ScalarGrid& grid, const std::filesystem::path& path) {
    write_ndgr(grid.dims, 1, grid.data, path);
}

void write_grid(const VectorGrid& grid, const std::filesystem::path& path) {
    write_ndgr(grid.dims, grid.channels, grid.data, path);
}

GridValue read_grid(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_grid: cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (bytes.size() < 7 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw format_error("NDGR: bad magic in " + path.string());
    const std::uint16_t version =
        static_cast<std::uint8_t>(bytes[4]) | (static_cast<std::uint8_t>(bytes[5]) << 8);
    if (version != kVersion)
        throw format_error("NDGR: unsupported version " + std::to_string(version));
    const int ndim = static_cast<std::uint8_t>(bytes[6]);
    if (ndim != 2 && ndim != 3)
        throw format_error("NDGR: unsupported ndim " + std::to_string(ndim));
    const std::size_t header_size = 7 + 4 * static_cast<std::size_t>(ndim) + 4 + 1;
    if (bytes.size() < header_size) throw format_error("NDGR: truncated header");

    std::size_t pos = 7;
    const auto read_u32 = [&]() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[pos + i])) << (8 * i);
        pos += 4;
        return v;
    };
    Dims dims;
    std::size_t count = 1;
    for (int a = 0; a < ndim; ++a) {
        const std::uint32_t n = read_u32();
        if (n == 0 || n > kMaxVoxels || count * n > kMaxVoxels)
            throw format_error("NDGR: dim overflow");
        count *= n;
        dims.push_back(static_cast<int>(n));
    }
    const std::uint32_t channels = read_u32();
    if (channels != 1 && channels != static_cast<std::uint32_t>(ndim))
        throw format_error("NDGR: unsupported channel count " + std::to_string(channels));
    const int dtype = static_cast<std::uint8_t>(bytes[pos]);
    pos += 1;
    if (dtype != 0) throw format_error("NDGR: unsupported dtype code " + std::to_string(dtype));

    const std::size_t expected = count * channels * 4;
    const std::size_t got = bytes.size() - pos;
    if (got != expected)
        throw format_error("NDGR: truncated payload: expected " + std::to_string(expected) +
                           " bytes, got " + std::to_string(got));

    std::vector<double> data(count * channels);
    const float* payload = reinterpret_cast<const float*>(bytes.data() + pos);
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<double>(payload[i]);

    if (channels == 1) {
        ScalarGrid g;
        g.dims = std::move(dims);
        g.data = std::move(data);
        return g;
    }
    VectorGrid g;
    g.dims = std::move(dims);
    g.channels = static_cast<int>(channels);
    g.data = std::move(data);
    return g;
}

ScalarGrid read_scalar_grid(const std::filesystem::path& path) {
    GridValue v = read_grid(path);
    if (!std::holds_alternative<ScalarGrid>(v))
        throw format_error("NDGR: expected a scalar grid in " + path.string());
    return std::get<ScalarGrid>(std::move(v));
}

VectorGrid read_vector_grid(const std::filesystem::path& path) {
    GridValue v = read_grid(path);
    if (!std::holds_alternative<VectorGrid>(v))
        throw format_error("NDGR: expected a vector grid in " + path.string());
    return std::get<VectorGrid>(std::move(v));
}

// ---- manifest ------------------------------------------------------------------

SequenceDataset read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("read_manifest: cannot open " + path.string());
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw format_error(std::string("manifest: malformed JSON: ") + e.what());
    }
    if (!doc.is_object() || !doc.contains("frames") || !doc["frames"].is_array())
        throw format_error("manifest: expected {\"frames\": [...]}");
    for (const auto& item : doc.items())
        if (item.key() != "frames") throw format_error("manifest: unknown key '" + item.key() + "'");

    const auto base = path.parent_path();
    std::vector<ScalarGrid> frames;
    std::vector<double> times;
    for (std::size_t i = 0; i < doc["frames"].size(); ++i) {
        const json& e = doc["frames"][i];
        if (!e.is_object() || !e.contains("path") || !e.contains("time"))
            throw format_error("manifest: entry " + std::to_string(i) +
                               " must have 'path' and 'time'");
        for (const auto& item : e.items())
            if (item.key() != "path" && item.key() != "time")
                throw format_error("manifest: entry " + std::to_string(i) + ": unknown key '" +
                                   item.key() + "'");
        const std::string rel = e["path"].get<std::string>();
        const auto full = base / rel;
        if (!std::filesystem::exists(full))
            throw std::runtime_error("manifest: entry '" + rel + "': missing file " + full.string());
        frames.push_back(read_scalar_grid(full));
        times.push_back(e["time"].get<double>());
    }
    return make_dataset(std::move(frames), std::move(times));
}

void write_manifest(const std::vector<std::pair<std::string, double>>& entries,
                    const std::filesystem::path& path) {
    json doc;
    doc["frames"] = json::array();
    for (const auto& [rel, t] : entries) doc["frames"].push_back({{"path", rel}, {"time", t}});
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("write_manifest: cannot open " + path.string());
    out << doc.dump(2) << "\n";
}

}  // namespace flowreg
