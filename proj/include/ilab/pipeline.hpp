#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ilab/influence.hpp"
#include "ilab/io.hpp"
#include "ilab/memgen.hpp"
#include "ilab/relative.hpp"

namespace ilab {

/// Synthetic two-cluster generator settings. Outlier points are placed far
/// off-cluster (appended after the cluster points) so memorization verdicts
/// have planted ground truth to correlate against.
struct GenConfig {
    int n_train = 200;
    int n_test = 50;
    int d_in = 10;
    int outliers = 4;
    double cluster_sep = 3.0;
    double noise_sigma = 1.0;
    double positive_fraction = 0.5;
};

struct ModelConfig {
    int feature_dim = 8;
};

struct InfluenceConfig {
    double damping_floor = 1e-6;
    double ratio_tol = 1e-8;  // required agreement of the two ratio routes
};

struct RelativeConfig {
    int m = 40;
    int trials = 20;
    double tau = 0.05;
    double delta = 1e-3;
    bool stratified_by_label = false;
};

struct MemgenConfig {
    std::optional<double> d_override;  // default: the plus-side threshold
    double keep_fraction = 0.5;
    double tol = 0.0;  // almost-positive entry tolerance
};

struct RunConfig {
    std::string dataset_path;
    std::string test_set_path;
    std::string output_dir = "reports";
    std::uint64_t seed = 11;
    int jobs = 1;
    int max_test_points = 10;  // cap on test points used in pair sweeps

    TrainConfig train;
    ModelConfig model;
    GenConfig gen;
    InfluenceConfig influence;
    RelativeConfig relative;
    MemgenConfig memgen;
};

// Strict parse: unknown keys are config errors. Fields not present keep their
// defaults; train.seed defaults to a sub-stream of the master seed.
RunConfig load_config(const std::filesystem::path& path);
RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const RunConfig& cfg);

/// Optional command-line overrides applied on top of the config file.
struct ConfigOverrides {
    std::optional<std::string> dataset_path, test_set_path, output_dir;
    std::optional<std::uint64_t> seed;
    std::optional<int> jobs, max_test_points;
    std::optional<int> max_iters;
    std::optional<double> step_size, grad_tol;
    std::optional<bool> freeze_featurizer;
    std::optional<double> damping_floor, ratio_tol;
    std::optional<int> m, trials, feature_dim;
    std::optional<double> tau, delta;
    std::optional<double> d_override, keep_fraction, tol;
};

void apply_overrides(RunConfig& cfg, const ConfigOverrides& overrides);

// Independent deterministic stream per named stochastic step, all derived
// from the master seed.
std::uint64_t substream_seed(std::uint64_t master, std::string_view name);

// FNV-1a over the canonical config dump.
std::uint64_t config_hash(const RunConfig& cfg);

struct SyntheticData {
    Dataset train;
    Dataset test;
    std::vector<int> outlier_indices;  // positions in the train set
};

SyntheticData generate_synthetic(const GenConfig& gen, std::uint64_t seed);

/// JSON report sections keyed by command name plus the human-readable summary.
struct ReportBundle {
    nlohmann::json metadata;
    std::map<std::string, nlohmann::json> sections;
    std::vector<std::string> summary_lines;
};

// One file per section plus summary.txt; returns the written paths.
// Re-emitting the same bundle produces byte-identical files.
std::vector<std::filesystem::path> emit_report(const ReportBundle& bundle,
                                               const std::filesystem::path& output_dir);

const std::vector<std::string>& all_commands();

// Executes the commands in order (sharing trained artifacts), writes the
// report files under cfg.output_dir, and returns the bundle.
ReportBundle run_pipeline(const RunConfig& cfg, const std::vector<std::string>& commands);

// Index-parallel loop used for leave-one-out sweeps; results must be written
// by index so merges stay order-deterministic.
void parallel_for(int count, int jobs, const std::function<void(int)>& body);

}  // namespace ilab
