#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "ilab/pipeline.hpp"

namespace {

template <typename T>
void add_override(CLI::App& app, const std::string& flag, std::optional<T>& slot,
                  const std::string& help) {
    app.add_option_function<T>(
           flag, [&slot](const T& value) { slot = value; }, help)
        ->expected(1);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"influence-lab: influence-function experiments with a leave-one-out oracle"};
    app.require_subcommand(1);

    std::string config_path;
    ilab::ConfigOverrides overrides;
    std::vector<std::string> selected;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON config file");
        add_override<std::string>(*sub, "--dataset-path", overrides.dataset_path,
                                  "training CSV path");
        add_override<std::string>(*sub, "--test-set-path", overrides.test_set_path,
                                  "held-out CSV path");
        add_override<std::string>(*sub, "--output-dir", overrides.output_dir,
                                  "report output directory");
        add_override<std::uint64_t>(*sub, "--seed", overrides.seed, "master seed");
        add_override<int>(*sub, "--jobs", overrides.jobs,
                          "parallel jobs for independent sweeps");
        add_override<int>(*sub, "--max-test-points", overrides.max_test_points,
                          "cap on test points in pair sweeps");
        add_override<int>(*sub, "--max-iters", overrides.max_iters, "optimizer iteration cap");
        add_override<double>(*sub, "--step-size", overrides.step_size,
                             "optimizer initial step size");
        add_override<double>(*sub, "--grad-tol", overrides.grad_tol,
                             "optimizer gradient-norm tolerance");
        add_override<bool>(*sub, "--freeze-featurizer", overrides.freeze_featurizer,
                           "train the classifier block only");
        add_override<double>(*sub, "--damping-floor", overrides.damping_floor,
                             "minimum-eigenvalue floor before ridge damping");
        add_override<double>(*sub, "--ratio-tol", overrides.ratio_tol,
                             "required agreement of the two ratio routes");
        add_override<int>(*sub, "--m", overrides.m, "subset cardinality");
        add_override<int>(*sub, "--trials", overrides.trials, "subset sampling trials");
        add_override<int>(*sub, "--feature-dim", overrides.feature_dim,
                          "featurizer output width");
        add_override<double>(*sub, "--tau", overrides.tau, "ratio-uniformity tolerance");
        add_override<double>(*sub, "--delta", overrides.delta,
                             "diagonal shift for the uniformity diagnostics");
        add_override<double>(*sub, "--d-override", overrides.d_override,
                             "memorization threshold (default: plus-side computed value)");
        add_override<double>(*sub, "--keep-fraction", overrides.keep_fraction,
                             "fraction of generalizable points to keep");
        add_override<double>(*sub, "--tol", overrides.tol,
                             "almost-positive entry tolerance");
    };

    for (const auto& name : ilab::all_commands()) {
        auto* sub = app.add_subcommand(name, "run the '" + name + "' stage");
        add_common(sub);
        sub->callback([&selected, name]() { selected.push_back(name); });
    }
    auto* sub_all = app.add_subcommand("all", "run every stage in order");
    add_common(sub_all);
    sub_all->callback([&selected]() { selected = ilab::all_commands(); });

    CLI11_PARSE(app, argc, argv);

    try {
        ilab::RunConfig cfg =
            config_path.empty() ? ilab::RunConfig{} : ilab::load_config(config_path);
        if (!overrides.jobs) {
            if (const char* env = std::getenv("INFLUENCE_LAB_JOBS")) {
                overrides.jobs = std::stoi(env);
            }
        }
        ilab::apply_overrides(cfg, overrides);

        const auto bundle = ilab::run_pipeline(cfg, selected);
        for (const auto& line : bundle.summary_lines) {
            std::cout << line << '\n';
        }
        std::cout << "reports written to " << cfg.output_dir << '\n';
        return 0;
    } catch (const ilab::config_error& e) {
        std::cerr << "{\"error\":\"config\",\"message\":\"" << e.what() << "\"}\n";
        return 2;
    } catch (const ilab::data_error& e) {
        std::cerr << "{\"error\":\"data\",\"message\":\"" << e.what() << "\"}\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "{\"error\":\"numerical\",\"message\":\"" << e.what() << "\"}\n";
        return 4;
    }
}
