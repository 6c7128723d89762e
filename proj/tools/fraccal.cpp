#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "fraccal/fraccal.hpp"

namespace fs = std::filesystem;
using namespace fraccal;

namespace {

enum Exit { ok = 0, failure = 1, config_error = 2, numerical_error = 3 };

struct Overrides {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<double> delta;
    std::optional<std::string> method;
};

void add_common(CLI::App* sub, Overrides& o, bool with_delta, bool with_method) {
    sub->add_option("--config", o.config, "experiment TOML file")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "noise seed (overrides the config)");
    sub->add_option("--out", o.out, "output directory (overrides the config)");
    if (with_delta) {
        sub->add_option("--delta", o.delta, "single noise level (replaces the config ladder)");
    }
    if (with_method) {
        sub->add_option("--method", o.method, "coefficient method")->check(CLI::IsMember({"quadratic", "tv"}));
    }
}

ExperimentConfig resolve(const Overrides& o) {
    auto cfg = load_config(o.config);
    if (o.seed) {
        cfg.seed = *o.seed;
    }
    if (o.out) {
        cfg.out_dir = *o.out;
    }
    if (o.delta) {
        cfg.deltas = {*o.delta};
    }
    if (o.method) {
        cfg.method = parse_coeff_method(*o.method);
    }
    validate(cfg);
    return cfg;
}

void print_records(const ExperimentResult& res) {
    std::printf("%-10s %-11s %-11s %-12s %-12s %-10s\n", "delta", "alpha", "alpha_q", "state_err_S", "q_err_linf",
                "q_max");
    for (const auto& r : res.records) {
        std::printf("%-10.3g %-11.4g %-11.4g %-12.4g %-12.4g %-10.4g\n", r.delta, r.alpha, r.alpha_q,
                    r.state_err_S_rel, r.q_err_linf_rel, r.q_max);
    }
    if (res.fit) {
        std::printf("fit: gamma=%.4g C=%.4g R2=%.4f\n", res.fit->gamma, res.fit->C, res.fit->r2);
    }
    std::printf("outputs in %s\n", res.config.out_dir.string().c_str());
}

template <int Dim>
int assemble_cmd(const ExperimentConfig& cfg) {
    const auto ops = build_experiment_operators<Dim>(cfg);
    std::printf("reconstruction mesh: h=%g dofs=%d observations=%d\n", cfg.h, ops.coarse->mesh->num_dofs(),
                ops.coarse->mesh->num_obs());
    std::printf("forward mesh: h=%g dofs=%d\n", ops.fine->mesh->spec.h, ops.fine->mesh->num_dofs());
    std::printf("operators cached in %s\n", cfg.cache_dir->string().c_str());
    return ok;
}

template <int Dim>
int forward_cmd(const ExperimentConfig& cfg) {
    const auto ops = build_experiment_operators<Dim>(cfg);
    const auto data = synthesize<Dim>(cfg, ops);
    const double delta = cfg.deltas.front();
    const auto meas =
        make_measurement<Dim>(*ops.coarse->mesh, ops.coarse->W_obs, data.mu_clean, delta, delta_seed(cfg.seed, 0));
    fs::create_directories(cfg.out_dir);
    write_measurement_csv<Dim>(cfg.out_dir / "measurement.csv", meas);
    std::printf("wrote %d observations (delta=%g, |mu|_Y=%.6g) to %s\n", ops.coarse->mesh->num_obs(), delta,
                meas.norm_Y_mu, (cfg.out_dir / "measurement.csv").string().c_str());
    return ok;
}

int run(int argc, char** argv) {
    CLI::App app{"Potential reconstruction for the fractional Schroedinger equation from exterior data"};
    app.require_subcommand(1);
    Overrides o;
    std::string fit_input, fit_column = "q_err_linf";
    std::string cache;
    std::vector<double> R_list;

    auto* assemble = app.add_subcommand("assemble", "build and cache the operators");
    add_common(assemble, o, false, false);
    assemble->add_option("--cache", cache, "cache directory (default <out>/cache)");
    auto* forward = app.add_subcommand("forward", "synthesize one noisy measurement");
    add_common(forward, o, true, false);
    auto* reconstruct = app.add_subcommand("reconstruct", "state and coefficient recovery for one noise level");
    add_common(reconstruct, o, true, true);
    auto* experiment = app.add_subcommand("experiment", "run the full noise ladder");
    add_common(experiment, o, true, true);
    auto* fit = app.add_subcommand("fit", "fit C |log delta|^-gamma to a records CSV");
    fit->add_option("input", fit_input, "records CSV")->required()->check(CLI::ExistingFile);
    fit->add_option("--column", fit_column, "error column");
    fit->add_option("--out", o.out, "directory for fit.csv");
    auto* diagnostics = app.add_subcommand("diagnostics", "consistency terms eta_t and eta_I");
    add_common(diagnostics, o, false, false);
    diagnostics->add_option("--R", R_list, "truncation radii (overrides the config)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ok : config_error;
    }

    if (fit->parsed()) {
        const auto [d, e] = read_records_column(fit_input, fit_column);
        const auto f = fit_stability(d, e);
        std::printf("gamma=%.6g C=%.6g R2=%.6f n=%zu\n", f.gamma, f.C, f.r2, f.n);
        if (o.out) {
            fs::create_directories(*o.out);
            write_fit_csv(fs::path(*o.out) / "fit.csv", f);
        }
        return ok;
    }

    auto cfg = resolve(o);
    if (assemble->parsed()) {
        cfg.cache_dir = cache.empty() ? cfg.out_dir / "cache" : fs::path(cache);
        return cfg.dim == 1 ? assemble_cmd<1>(cfg) : assemble_cmd<2>(cfg);
    }
    if (forward->parsed()) {
        return cfg.dim == 1 ? forward_cmd<1>(cfg) : forward_cmd<2>(cfg);
    }
    if (reconstruct->parsed()) {
        if (!o.delta) {
            cfg.deltas = {cfg.deltas.front()};
        }
        print_records(run_experiment(cfg));
        return ok;
    }
    if (experiment->parsed()) {
        print_records(run_experiment(cfg));
        return ok;
    }
    if (diagnostics->parsed()) {
        if (!R_list.empty()) {
            cfg.diagnostics_R = R_list;
            validate(cfg);
        }
        const auto rows = consistency_diagnostics(cfg);
        fs::create_directories(cfg.out_dir);
        write_diagnostics_csv(cfg.out_dir / "diagnostics.csv", rows);
        std::printf("%-8s %-10s %-14s %-14s\n", "R", "h", "eta_t", "eta_I");
        for (const auto& r : rows) {
            std::printf("%-8g %-10g %-14.6g %-14.6g\n", r.R, r.h, r.eta_t, r.eta_I);
        }
        return ok;
    }
    return failure;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const StageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.numerical() ? numerical_error : config_error;
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return config_error;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << '\n';
        return numerical_error;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return failure;
    }
}
