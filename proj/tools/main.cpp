// Command-line surface: synthetic data generation, model fitting,
// prediction, evaluation and gradient self-checks. All numerics live in
// the library; this file only parses flags and moves files around.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "flowreg/data.hpp"
#include "flowreg/model.hpp"
#include "flowreg/objective.hpp"
#include "flowreg/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace flowreg;

namespace {

// Config-file problems exit with code 2, runtime problems with 1.
struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string format_time(double t) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", t);
    return buf;
}

// ---- RunConfig ------------------------------------------------------------

struct RunConfig {
    FitConfig fit;
    std::string manifest, out_model, log;
};

void reject_unknown(const json& obj, std::initializer_list<const char*> allowed,
                    const std::string& where) {
    for (const auto& item : obj.items()) {
        bool ok = false;
        for (const char* k : allowed)
            if (item.key() == k) ok = true;
        if (!ok) throw config_error("config: unknown key '" + item.key() + "' in " + where);
    }
}

template <class T>
void maybe(const json& obj, const char* key, T& target) {
    if (obj.contains(key)) {
        try {
            target = obj.at(key).get<T>();
        } catch (const json::exception&) {
            throw config_error(std::string("config: bad value for '") + key + "'");
        }
    }
}

RunConfig load_run_config(const std::string& path) {
    RunConfig rc;
    if (path.empty()) return rc;
    std::ifstream in(path);
    if (!in) throw config_error("config: cannot open " + path);
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw config_error(std::string("config: malformed JSON: ") + e.what());
    }
    if (!doc.is_object()) throw config_error("config: expected a JSON object");
    reject_unknown(doc,
                   {"mode", "solver", "weights", "learning_rate", "beta1", "beta2", "epsilon",
                    "epochs", "smoothing_window", "latent_factor", "seed", "conv_channels",
                    "hidden_width", "time_embed_width", "manifest", "out_model", "log"},
                   "top level");

    if (doc.contains("mode")) {
        const std::string m = doc.at("mode").get<std::string>();
        if (m == "direct")
            rc.fit.mode = ModelMode::direct;
        else if (m == "latent")
            rc.fit.mode = ModelMode::latent;
        else
            throw config_error("config: mode must be 'direct' or 'latent'");
    }
    if (doc.contains("solver")) {
        const json& s = doc.at("solver");
        reject_unknown(s, {"method", "steps_per_unit_time", "rtol", "atol"}, "solver");
        if (s.contains("method")) {
            const std::string m = s.at("method").get<std::string>();
            if (m == "euler")
                rc.fit.solver.method = SolverMethod::euler;
            else if (m == "rk4")
                rc.fit.solver.method = SolverMethod::rk4;
            else
                throw config_error("config: solver.method must be 'euler' or 'rk4'");
        }
        maybe(s, "steps_per_unit_time", rc.fit.solver.steps_per_unit_time);
        maybe(s, "rtol", rc.fit.solver.rtol);
        maybe(s, "atol", rc.fit.solver.atol);
    }
    if (doc.contains("weights")) {
        const json& w = doc.at("weights");
        reject_unknown(w, {"lambda1", "lambda2"}, "weights");
        maybe(w, "lambda1", rc.fit.weights.lambda1);
        maybe(w, "lambda2", rc.fit.weights.lambda2);
    }
    maybe(doc, "learning_rate", rc.fit.learning_rate);
    maybe(doc, "beta1", rc.fit.beta1);
    maybe(doc, "beta2", rc.fit.beta2);
    maybe(doc, "epsilon", rc.fit.epsilon);
    maybe(doc, "epochs", rc.fit.epochs);
    maybe(doc, "smoothing_window", rc.fit.smoothing_window);
    maybe(doc, "latent_factor", rc.fit.latent_factor);
    maybe(doc, "seed", rc.fit.seed);
    maybe(doc, "conv_channels", rc.fit.conv_channels);
    maybe(doc, "hidden_width", rc.fit.hidden_width);
    maybe(doc, "time_embed_width", rc.fit.time_embed_width);
    maybe(doc, "manifest", rc.manifest);
    maybe(doc, "out_model", rc.out_model);
    maybe(doc, "log", rc.log);
    return rc;
}

// ---- synth ------------------------------------------------------------------

struct SynthArgs {
    std::string kind = "translate-disk";
    std::vector<int> size;
    int frames = 5;
    double magnitude = 0.0;
    double noise = 0.0;
    std::uint64_t seed = 0;
    std::string out;
};

int cmd_synth(const SynthArgs& a) {
    try {
        SynthSpec spec;
        if (a.kind == "translate-disk")
            spec.kind = SynthKind::translate_disk;
        else if (a.kind == "scale-disk")
            spec.kind = SynthKind::scale_disk;
        else if (a.kind == "contract-ring")
            spec.kind = SynthKind::contract_ring;
        else
            throw std::invalid_argument("synth: unknown kind '" + a.kind + "'");
        spec.size = a.size;
        spec.frames = a.frames;
        spec.magnitude = a.magnitude;
        spec.noise_sigma = a.noise;
        spec.seed = a.seed;

        const SynthResult res = synth_sequence(spec);
        fs::create_directories(a.out);
        std::vector<std::pair<std::string, double>> entries;
        for (std::size_t k = 0; k < res.dataset.frames.size(); ++k) {
            char name[32];
            std::snprintf(name, sizeof(name), "frame_%03zu.ndgr", k);
            write_grid(res.dataset.frames[k], fs::path(a.out) / name);
            entries.emplace_back(name, res.dataset.raw_times[k]);
        }
        write_manifest(entries, fs::path(a.out) / "manifest.json");
        for (std::size_t k = 0; k < res.ground_truth.size(); ++k) {
            char name[32];
            std::snprintf(name, sizeof(name), "gt_disp_%03zu.ndgr", k + 1);
            write_grid(res.ground_truth[k], fs::path(a.out) / name);
        }
        std::cout << "wrote " << res.dataset.frames.size() << " frames, "
                  << res.ground_truth.size() << " ground-truth fields to " << a.out << "\n";
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

// ---- fit ----------------------------------------------------------------------

struct FitArgs {
    std::string manifest, config, out_model, log;
};

json breakdown_to_json(int epoch, const LossBreakdown& b) {
    return json{{"epoch", epoch},
                {"total", b.total},
                {"similarity", b.similarity},
                {"smoothness", b.smoothness},
                {"boundary", b.boundary},
                {"per_time", b.per_time}};
}

int cmd_fit(const FitArgs& a) {
    RunConfig rc;
    try {
        rc = load_run_config(a.config);
        if (!a.manifest.empty()) rc.manifest = a.manifest;
        if (!a.out_model.empty()) rc.out_model = a.out_model;
        if (!a.log.empty()) rc.log = a.log;
        if (rc.manifest.empty()) throw config_error("fit: no manifest given (flag or config)");
        if (rc.out_model.empty()) throw config_error("fit: no out-model given (flag or config)");
        validate_fit_config(rc.fit);
    } catch (const config_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    try {
        const SequenceDataset dataset = read_manifest(rc.manifest);
        FitReport report;
        try {
            report = fit(dataset, rc.fit);
        } catch (const std::invalid_argument& e) {
            std::cerr << "error: " << e.what() << "\n";
            return 2;
        }
        save_checkpoint(report.final_model, rc.out_model);
        if (!rc.log.empty()) {
            std::ofstream log(rc.log, std::ios::trunc);
            if (!log) throw std::runtime_error("fit: cannot open log file " + rc.log);
            for (std::size_t e = 0; e < report.loss_history.size(); ++e)
                log << breakdown_to_json(static_cast<int>(e + 1), report.loss_history[e]).dump()
                    << "\n";
        }
        std::cout << "fit: " << report.loss_history.size() << " epochs, total loss "
                  << report.loss_history.front().total << " -> " << report.loss_history.back().total
                  << ", wall time " << report.wall_time_sec << " s\n"
                  << "fit: wrote checkpoint " << rc.out_model << "\n";
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

// ---- predict ---------------------------------------------------------------------

struct PredictArgs {
    std::string model, baseline, out;
    std::vector<double> times;
};

int cmd_predict(const PredictArgs& a) {
    try {
        const VelocityModel model = load_checkpoint(a.model);
        const ScalarGrid baseline = read_scalar_grid(a.baseline);
        SolverConfig solver;  // fixed-step RK4 defaults; prediction reuses them
        const auto results = predict(model, baseline, a.times, solver);
        fs::create_directories(a.out);
        for (std::size_t k = 0; k < results.size(); ++k) {
            const std::string stamp = format_time(a.times[k]);
            write_grid(results[k].first, fs::path(a.out) / ("pred_t" + stamp + ".ndgr"));
            write_grid(results[k].second, fs::path(a.out) / ("disp_t" + stamp + ".ndgr"));
        }
        std::cout << "predict: wrote " << results.size() << " images and " << results.size()
                  << " displacement fields to " << a.out << "\n";
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

// ---- evaluate ---------------------------------------------------------------------

struct EvaluateArgs {
    std::string pred_dir, ref_manifest, report;
};

json table1_reference() {
    // Published 3D regression results on clinical MRI datasets, embedded
    // for context only; nothing asserts against them.
    return json{{"note", "published reference results on clinical datasets (context only)"},
                {"adni", {{"nrmse", 0.159}, {"ssim", 0.842}, {"psnr", 28.673}, {"fold_pct", 1.8e-3}}},
                {"acdc", {{"nrmse", 0.283}, {"ssim", 0.712}, {"psnr", 25.547}, {"fold_pct", 2.3e-3}}}};
}

json num_or_inf(double v) {
    if (std::isinf(v)) return json("inf");
    return json(v);
}

int cmd_evaluate(const EvaluateArgs& a) {
    try {
        const SequenceDataset ref = read_manifest(a.ref_manifest);

        // Index predictions by their 4-decimal time stamp.
        std::map<long, fs::path> preds, disps;
        for (const auto& entry : fs::directory_iterator(a.pred_dir)) {
            const std::string name = entry.path().filename().string();
            const auto parse_stamp = [&](const std::string& prefix) -> long {
                if (name.rfind(prefix, 0) != 0 || name.size() < prefix.size() + 6) return -1;
                const std::string stamp = name.substr(prefix.size(), name.size() - prefix.size() - 5);
                try {
                    return std::lround(std::stod(stamp) * 10000.0);
                } catch (...) {
                    return -1;
                }
            };
            if (long key = parse_stamp("pred_t"); key >= 0) preds[key] = entry.path();
            if (long key = parse_stamp("disp_t"); key >= 0) disps[key] = entry.path();
        }

        std::vector<std::string> unmatched;
        for (double t : ref.times) {
            const long key = std::lround(t * 10000.0);
            if (!preds.count(key) || !disps.count(key)) unmatched.push_back(format_time(t));
        }
        std::set<long> ref_keys;
        for (double t : ref.times) ref_keys.insert(std::lround(t * 10000.0));
        for (const auto& [key, path] : preds)
            if (!ref_keys.count(key)) unmatched.push_back(format_time(key / 10000.0));
        if (!unmatched.empty()) {
            std::cerr << "error: unmatched times:";
            for (const auto& t : unmatched) std::cerr << " " << t;
            std::cerr << "\n";
            return 1;
        }

        json frames = json::array();
        double sum_nrmse = 0, sum_ssim = 0, sum_psnr = 0, sum_fold = 0;
        bool psnr_inf = false;
        std::printf("%8s %10s %10s %10s %12s\n", "time", "nrmse", "ssim", "psnr", "fold_pct");
        for (std::size_t k = 0; k < ref.times.size(); ++k) {
            const long key = std::lround(ref.times[k] * 10000.0);
            const ScalarGrid pred = read_scalar_grid(preds[key]);
            const VectorGrid disp = read_vector_grid(disps[key]);
            const double e_nrmse = nrmse(pred, ref.frames[k]);
            const double e_ssim = ssim(pred, ref.frames[k]);
            const double e_psnr = psnr(pred, ref.frames[k]);
            const double e_fold = 100.0 * fold_percentage(disp);  // percent, Table-style
            sum_nrmse += e_nrmse;
            sum_ssim += e_ssim;
            sum_psnr += e_psnr;
            sum_fold += e_fold;
            if (std::isinf(e_psnr)) psnr_inf = true;
            std::printf("%8s %10.5f %10.5f %10s %12.5g\n", format_time(ref.times[k]).c_str(),
                        e_nrmse, e_ssim,
                        std::isinf(e_psnr) ? "inf" : format_time(e_psnr).c_str(), e_fold);
            frames.push_back(json{{"time", ref.times[k]},
                                  {"nrmse", e_nrmse},
                                  {"ssim", e_ssim},
                                  {"psnr", num_or_inf(e_psnr)},
                                  {"fold_pct", e_fold}});
        }
        const double n = static_cast<double>(ref.times.size());
        std::printf("%8s %10.5f %10.5f %10s %12.5g\n", "mean", sum_nrmse / n, sum_ssim / n,
                    psnr_inf ? "inf" : format_time(sum_psnr / n).c_str(), sum_fold / n);

        if (!a.report.empty()) {
            json report{{"frames", frames},
                        {"mean",
                         {{"nrmse", sum_nrmse / n},
                          {"ssim", sum_ssim / n},
                          {"psnr", psnr_inf ? json("inf") : json(sum_psnr / n)},
                          {"fold_pct", sum_fold / n}}},
                        {"reference", table1_reference()}};
            std::ofstream out(a.report, std::ios::trunc);
            if (!out) throw std::runtime_error("evaluate: cannot open report " + a.report);
            out << report.dump(2) << "\n";
        }
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

// ---- gradcheck ----------------------------------------------------------------------

int cmd_gradcheck(std::uint64_t seed, int size, bool corrupt) {
    try {
        const GradCheckResult res = run_gradcheck(seed, size, corrupt);
        std::printf("adjoint vs finite differences: max relative error %.3e\n", res.adjoint_vs_fd);
        std::printf("adjoint vs direct backprop:    max relative error %.3e\n",
                    res.adjoint_vs_direct);
        if (!res.pass) {
            std::cerr << "gradcheck FAILED: worst offender "
                      << (res.adjoint_vs_fd > res.adjoint_vs_direct ? "adjoint-vs-finite-difference"
                                                                    : "adjoint-vs-direct")
                      << " at "
                      << std::max(res.adjoint_vs_fd, res.adjoint_vs_direct) << " (tolerance 1e-4)\n";
            return 1;
        }
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"image-sequence regression through ODE-driven deformation flows"};
    app.require_subcommand(1);

    SynthArgs synth;
    CLI::App* s = app.add_subcommand("synth", "generate a synthetic image sequence");
    s->add_option("--kind", synth.kind, "translate-disk | scale-disk | contract-ring");
    s->add_option("--size", synth.size, "per-axis grid extents, e.g. 64,64")
        ->required()
        ->delimiter(',');
    s->add_option("--frames", synth.frames, "number of frames (>= 2)")->required();
    s->add_option("--magnitude", synth.magnitude, "translation in voxels or final scale ratio")
        ->required();
    s->add_option("--out", synth.out, "output directory")->required();
    s->add_option("--noise", synth.noise, "additive Gaussian noise sigma");
    s->add_option("--seed", synth.seed, "noise seed");

    FitArgs fit_args;
    CLI::App* f = app.add_subcommand("fit", "fit a velocity model to a sequence");
    f->add_option("--manifest", fit_args.manifest, "sequence manifest JSON");
    f->add_option("--config", fit_args.config, "run config JSON");
    f->add_option("--out-model", fit_args.out_model, "checkpoint output path");
    f->add_option("--log", fit_args.log, "per-epoch loss log (JSON lines)");

    PredictArgs pred;
    CLI::App* p = app.add_subcommand("predict", "warp the baseline to requested times");
    p->add_option("--model", pred.model, "checkpoint path")->required();
    p->add_option("--baseline", pred.baseline, "baseline NDGR image")->required();
    p->add_option("--times", pred.times, "comma-separated times in [0,1]")
        ->required()
        ->delimiter(',');
    p->add_option("--out", pred.out, "output directory")->required();

    EvaluateArgs eval;
    CLI::App* e = app.add_subcommand("evaluate", "score predictions against a reference manifest");
    e->add_option("--pred-dir", eval.pred_dir, "directory with pred_t*/disp_t* files")->required();
    e->add_option("--ref-manifest", eval.ref_manifest, "reference manifest JSON")->required();
    e->add_option("--report", eval.report, "optional JSON report path");

    std::uint64_t gc_seed = 0;
    int gc_size = 8;
    bool gc_corrupt = false;
    CLI::App* g = app.add_subcommand("gradcheck", "adjoint gradient self-check");
    g->add_option("--seed", gc_seed, "seed")->required();
    g->add_option("--size", gc_size, "grid size (default 8)");
    g->add_flag("--corrupt-vjp", gc_corrupt, "negative control: perturb the vjp");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& err) {
        return app.exit(err);
    } catch (const CLI::ParseError& err) {
        app.exit(err);
        return 2;
    }

    if (s->parsed()) return cmd_synth(synth);
    if (f->parsed()) return cmd_fit(fit_args);
    if (p->parsed()) return cmd_predict(pred);
    if (e->parsed()) return cmd_evaluate(eval);
    if (g->parsed()) return cmd_gradcheck(gc_seed, gc_size, gc_corrupt);
    return 2;
}
