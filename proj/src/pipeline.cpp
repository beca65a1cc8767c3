#include "ilab/pipeline.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <thread>

namespace ilab {

namespace {

nlohmann::json to_json(const Vector& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
}

void check_keys(const nlohmann::json& j, const std::string& scope,
                std::initializer_list<const char*> allowed) {
    for (const auto& [key, value] : j.items()) {
        if (std::find_if(allowed.begin(), allowed.end(),
                         [&](const char* k) { return key == k; }) == allowed.end()) {
            throw config_error("unknown config key '" + scope + key + "'");
        }
    }
}

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) {
        try {
            out = j.at(key).get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw config_error(std::string("config field '") + key + "': " + e.what());
        }
    }
}

}  // namespace

std::uint64_t substream_seed(std::uint64_t master, std::string_view name) {
    std::uint64_t h = 1469598103934665603ull;
    for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    std::uint64_t z = master + 0x9e3779b97f4a7c15ull * (h | 1ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

RunConfig config_from_json(const nlohmann::json& j) {
    RunConfig cfg;
    check_keys(j, "", {"dataset_path", "test_set_path", "output_dir", "seed", "jobs",
                       "max_test_points", "train", "model", "gen", "influence", "relative",
                       "memgen"});
    read_field(j, "dataset_path", cfg.dataset_path);
    read_field(j, "test_set_path", cfg.test_set_path);
    read_field(j, "output_dir", cfg.output_dir);
    read_field(j, "seed", cfg.seed);
    read_field(j, "jobs", cfg.jobs);
    read_field(j, "max_test_points", cfg.max_test_points);

    bool train_seed_given = false;
    if (j.contains("train")) {
        const auto& t = j.at("train");
        check_keys(t, "train.", {"seed", "max_iters", "step_size", "grad_tol", "damping_floor",
                                 "freeze_featurizer"});
        train_seed_given = t.contains("seed");
        read_field(t, "seed", cfg.train.seed);
        read_field(t, "max_iters", cfg.train.max_iters);
        read_field(t, "step_size", cfg.train.step_size);
        read_field(t, "grad_tol", cfg.train.grad_tol);
        read_field(t, "damping_floor", cfg.train.damping_floor);
        read_field(t, "freeze_featurizer", cfg.train.freeze_featurizer);
    }
    if (!train_seed_given) {
        cfg.train.seed = substream_seed(cfg.seed, "train");
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        check_keys(m, "model.", {"feature_dim"});
        read_field(m, "feature_dim", cfg.model.feature_dim);
    }
    if (j.contains("gen")) {
        const auto& g = j.at("gen");
        check_keys(g, "gen.", {"n_train", "n_test", "d_in", "outliers", "cluster_sep",
                               "noise_sigma", "positive_fraction"});
        read_field(g, "n_train", cfg.gen.n_train);
        read_field(g, "n_test", cfg.gen.n_test);
        read_field(g, "d_in", cfg.gen.d_in);
        read_field(g, "outliers", cfg.gen.outliers);
        read_field(g, "cluster_sep", cfg.gen.cluster_sep);
        read_field(g, "noise_sigma", cfg.gen.noise_sigma);
        read_field(g, "positive_fraction", cfg.gen.positive_fraction);
    }
    if (j.contains("influence")) {
        const auto& i = j.at("influence");
        check_keys(i, "influence.", {"damping_floor", "ratio_tol"});
        read_field(i, "damping_floor", cfg.influence.damping_floor);
        read_field(i, "ratio_tol", cfg.influence.ratio_tol);
    }
    if (j.contains("relative")) {
        const auto& r = j.at("relative");
        check_keys(r, "relative.", {"m", "trials", "tau", "delta", "stratified_by_label"});
        read_field(r, "m", cfg.relative.m);
        read_field(r, "trials", cfg.relative.trials);
        read_field(r, "tau", cfg.relative.tau);
        read_field(r, "delta", cfg.relative.delta);
        read_field(r, "stratified_by_label", cfg.relative.stratified_by_label);
    }
    if (j.contains("memgen")) {
        const auto& m = j.at("memgen");
        check_keys(m, "memgen.", {"d_override", "keep_fraction", "tol"});
        if (m.contains("d_override") && !m.at("d_override").is_null()) {
            cfg.memgen.d_override = m.at("d_override").get<double>();
        }
        read_field(m, "keep_fraction", cfg.memgen.keep_fraction);
        read_field(m, "tol", cfg.memgen.tol);
    }

    if (cfg.dataset_path.empty()) cfg.dataset_path = cfg.output_dir + "/train.csv";
    if (cfg.test_set_path.empty()) cfg.test_set_path = cfg.output_dir + "/test.csv";
    if (cfg.jobs < 1) throw config_error("jobs must be at least 1");
    if (cfg.max_test_points < 1) throw config_error("max_test_points must be at least 1");
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot open config file " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw config_error("invalid JSON in " + path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

nlohmann::json config_to_json(const RunConfig& cfg) {
    nlohmann::json j;
    j["dataset_path"] = cfg.dataset_path;
    j["test_set_path"] = cfg.test_set_path;
    j["output_dir"] = cfg.output_dir;
    j["seed"] = cfg.seed;
    j["jobs"] = cfg.jobs;
    j["max_test_points"] = cfg.max_test_points;
    j["train"] = {{"seed", cfg.train.seed},
                  {"max_iters", cfg.train.max_iters},
                  {"step_size", cfg.train.step_size},
                  {"grad_tol", cfg.train.grad_tol},
                  {"damping_floor", cfg.train.damping_floor},
                  {"freeze_featurizer", cfg.train.freeze_featurizer}};
    j["model"] = {{"feature_dim", cfg.model.feature_dim}};
    j["gen"] = {{"n_train", cfg.gen.n_train},
                {"n_test", cfg.gen.n_test},
                {"d_in", cfg.gen.d_in},
                {"outliers", cfg.gen.outliers},
                {"cluster_sep", cfg.gen.cluster_sep},
                {"noise_sigma", cfg.gen.noise_sigma},
                {"positive_fraction", cfg.gen.positive_fraction}};
    j["influence"] = {{"damping_floor", cfg.influence.damping_floor},
                      {"ratio_tol", cfg.influence.ratio_tol}};
    j["relative"] = {{"m", cfg.relative.m},
                     {"trials", cfg.relative.trials},
                     {"tau", cfg.relative.tau},
                     {"delta", cfg.relative.delta},
                     {"stratified_by_label", cfg.relative.stratified_by_label}};
    j["memgen"] = {{"d_override", cfg.memgen.d_override ? nlohmann::json(*cfg.memgen.d_override)
                                                        : nlohmann::json(nullptr)},
                   {"keep_fraction", cfg.memgen.keep_fraction},
                   {"tol", cfg.memgen.tol}};
    return j;
}

void apply_overrides(RunConfig& cfg, const ConfigOverrides& o) {
    if (o.dataset_path) cfg.dataset_path = *o.dataset_path;
    if (o.test_set_path) cfg.test_set_path = *o.test_set_path;
    if (o.output_dir) cfg.output_dir = *o.output_dir;
    if (o.seed) {
        cfg.seed = *o.seed;
        cfg.train.seed = substream_seed(cfg.seed, "train");
    }
    if (o.jobs) cfg.jobs = *o.jobs;
    if (o.max_test_points) cfg.max_test_points = *o.max_test_points;
    if (o.max_iters) cfg.train.max_iters = *o.max_iters;
    if (o.step_size) cfg.train.step_size = *o.step_size;
    if (o.grad_tol) cfg.train.grad_tol = *o.grad_tol;
    if (o.freeze_featurizer) cfg.train.freeze_featurizer = *o.freeze_featurizer;
    if (o.damping_floor) {
        cfg.influence.damping_floor = *o.damping_floor;
        cfg.train.damping_floor = *o.damping_floor;
    }
    if (o.ratio_tol) cfg.influence.ratio_tol = *o.ratio_tol;
    if (o.m) cfg.relative.m = *o.m;
    if (o.trials) cfg.relative.trials = *o.trials;
    if (o.feature_dim) cfg.model.feature_dim = *o.feature_dim;
    if (o.tau) cfg.relative.tau = *o.tau;
    if (o.delta) cfg.relative.delta = *o.delta;
    if (o.d_override) cfg.memgen.d_override = *o.d_override;
    if (o.keep_fraction) cfg.memgen.keep_fraction = *o.keep_fraction;
    if (o.tol) cfg.memgen.tol = *o.tol;
}

std::uint64_t config_hash(const RunConfig& cfg) {
    const std::string dump = config_to_json(cfg).dump();
    std::uint64_t h = 1469598103934665603ull;
    for (char c : dump) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    return h;
}

SyntheticData generate_synthetic(const GenConfig& g, std::uint64_t seed) {
    if (g.n_train < 2) throw config_error("gen.n_train must be at least 2");
    if (g.n_test < 1) throw config_error("gen.n_test must be at least 1");
    if (g.d_in < 1) throw config_error("gen.d_in must be at least 1");
    if (g.outliers < 0 || g.outliers >= g.n_train) {
        throw config_error("gen.outliers must be in [0, n_train)");
    }
    if (g.positive_fraction <= 0.0 || g.positive_fraction >= 1.0) {
        throw config_error("gen.positive_fraction must be in (0, 1)");
    }
    if (g.cluster_sep <= 0.0 || g.noise_sigma < 0.0) {
        throw config_error("gen.cluster_sep must be positive, gen.noise_sigma nonnegative");
    }

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const Vector axis = Vector::Ones(g.d_in) / std::sqrt(static_cast<double>(g.d_in));

    auto cluster_point = [&](int label) {
        const double side = label == 1 ? 0.5 * g.cluster_sep : -0.5 * g.cluster_sep;
        Vector x(g.d_in);
        for (int i = 0; i < g.d_in; ++i) x(i) = g.noise_sigma * normal(rng);
        x += side * axis;
        return RawPoint{std::move(x), label};
    };

    SyntheticData out;
    out.train.d_in = g.d_in;
    out.test.d_in = g.d_in;

    const int n_cluster = g.n_train - g.outliers;
    const int n_pos = std::max(1, static_cast<int>(std::lround(g.positive_fraction * n_cluster)));
    std::vector<int> labels(n_cluster, 0);
    std::fill(labels.begin(), labels.begin() + std::min(n_pos, n_cluster), 1);
    std::shuffle(labels.begin(), labels.end(), rng);
    for (int label : labels) out.train.points.push_back(cluster_point(label));

    // isolated points far from both clusters, alternating labels
    for (int o = 0; o < g.outliers; ++o) {
        Vector direction(g.d_in);
        for (int i = 0; i < g.d_in; ++i) direction(i) = normal(rng);
        direction.normalize();
        const double radius = 2.5 * g.cluster_sep + g.noise_sigma;
        out.outlier_indices.push_back(static_cast<int>(out.train.points.size()));
        out.train.points.push_back({Vector(radius * direction), o % 2});
    }

    const int test_pos = std::max(1, static_cast<int>(std::lround(g.positive_fraction * g.n_test)));
    for (int i = 0; i < g.n_test; ++i) {
        out.test.points.push_back(cluster_point(i < test_pos ? 1 : 0));
    }
    return out;
}

std::vector<std::filesystem::path> emit_report(const ReportBundle& bundle,
                                               const std::filesystem::path& output_dir) {
    std::error_code ec;
    std::filesystem::create_directories(output_dir, ec);
    if (ec) throw data_error("emit_report: cannot create " + output_dir.string());

    std::vector<std::filesystem::path> written;
    auto write_file = [&](const std::filesystem::path& p, const std::string& content) {
        std::ofstream out(p, std::ios::binary);
        if (!out) throw data_error("emit_report: cannot write " + p.string());
        out << content;
        if (!out) throw data_error("emit_report: write failed for " + p.string());
        written.push_back(p);
    };

    write_file(output_dir / "run.json", bundle.metadata.dump(2) + "\n");
    for (const auto& [name, section] : bundle.sections) {
        write_file(output_dir / (name + ".json"), section.dump(2) + "\n");
    }
    std::string summary;
    for (const auto& line : bundle.summary_lines) {
        summary += line;
        summary += '\n';
    }
    write_file(output_dir / "summary.txt", summary);
    return written;
}

void parallel_for(int count, int jobs, const std::function<void(int)>& body) {
    jobs = std::min(jobs, count);
    if (jobs <= 1) {
        for (int i = 0; i < count; ++i) body(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> workers;
    workers.reserve(jobs);
    for (int w = 0; w < jobs; ++w) {
        workers.emplace_back([&]() {
            for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1)) {
                try {
                    body(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : workers) t.join();
    if (error) std::rethrow_exception(error);
}

const std::vector<std::string>& all_commands() {
    static const std::vector<std::string> commands = {
        "gen-data", "train",    "influence", "validate-loo", "theorem1", "relative",
        "lep-search", "memorize", "sign-check", "prune",      "evaluate"};
    return commands;
}

namespace {

// Lazily computed artifacts shared across the commands of one run.
class PipelineContext {
public:
    explicit PipelineContext(const RunConfig& cfg) : cfg_(cfg) {}

    const RunConfig& cfg() const { return cfg_; }
    bool frozen() const { return cfg_.train.freeze_featurizer; }

    const Dataset& train_data() {
        if (!train_data_) train_data_ = load_dataset(cfg_.dataset_path);
        return *train_data_;
    }
    const Dataset& test_data() {
        if (!test_data_) test_data_ = load_dataset(cfg_.test_set_path);
        return *test_data_;
    }
    void set_generated(SyntheticData&& synth) {
        train_data_ = std::move(synth.train);
        test_data_ = std::move(synth.test);
        outlier_indices_ = std::move(synth.outlier_indices);
    }
    const std::vector<int>& outlier_indices() const { return outlier_indices_; }

    ParamLayout layout() {
        return ParamLayout{train_data().d_in, cfg_.model.feature_dim};
    }

    const TrainedModel& model() {
        if (!model_) {
            model_ = minimize_weighted(train_data(), layout(), cfg_.train);
        }
        return *model_;
    }

    int test_count() {
        return std::min(cfg_.max_test_points, test_data().size());
    }

    const FeaturizedDataset& featurized_train() {
        if (!featurized_train_) {
            featurized_train_ = featurize_dataset(train_data(), model().params);
        }
        return *featurized_train_;
    }
    const FeaturizedDataset& featurized_test() {
        if (!featurized_test_) {
            Dataset capped;
            capped.d_in = test_data().d_in;
            capped.points.assign(test_data().points.begin(),
                                 test_data().points.begin() + test_count());
            featurized_test_ = featurize_dataset(capped, model().params);
        }
        return *featurized_test_;
    }

    // gradient of one point in the trainable (active) parameter space
    Vector active_gradient(const RawPoint& z) {
        if (!frozen()) return full_gradient(z, model().params);
        FeaturizedPoint pt{featurize(z.x, model().params), z.label};
        return classifier_gradient(pt, Vector(model().params.classifier_block()));
    }

    const std::vector<Vector>& active_train_grads() {
        if (active_train_grads_.empty()) {
            for (const auto& z : train_data().points) {
                active_train_grads_.push_back(active_gradient(z));
            }
        }
        return active_train_grads_;
    }
    const std::vector<Vector>& active_test_grads() {
        if (active_test_grads_.empty()) {
            for (int t = 0; t < test_count(); ++t) {
                active_test_grads_.push_back(active_gradient(test_data().points[t]));
            }
        }
        return active_test_grads_;
    }

    const FdHessian& active_hessian() {
        if (!active_hessian_) {
            active_hessian_ = full_hessian(train_data(), model().params, frozen());
        }
        return *active_hessian_;
    }
    const SpdInverse& active_h_inv() {
        if (!active_h_inv_) {
            active_h_inv_ = spd_invert(active_hessian().matrix, cfg_.influence.damping_floor);
        }
        return *active_h_inv_;
    }

    const SymMatrix& classifier_h() {
        if (!classifier_h_) {
            classifier_h_ = classifier_hessian(featurized_train(),
                                               Vector(model().params.classifier_block()));
        }
        return *classifier_h_;
    }
    const SpdInverse& classifier_h_inv() {
        if (!classifier_h_inv_) {
            classifier_h_inv_ = spd_invert(classifier_h(), cfg_.influence.damping_floor);
        }
        return *classifier_h_inv_;
    }

    std::vector<Vector> classifier_grads(const FeaturizedDataset& fdata) {
        std::vector<Vector> grads;
        const Vector cls = model().params.classifier_block();
        grads.reserve(fdata.points.size());
        for (const auto& pt : fdata.points) {
            grads.push_back(classifier_gradient(pt, cls));
        }
        return grads;
    }

    // the inverse used for first-order removal predictions: the classifier
    // block in frozen mode, the full active Hessian otherwise
    const SpdInverse& prediction_h_inv() {
        return frozen() ? classifier_h_inv() : active_h_inv();
    }

    const std::vector<MemorizationVerdict>& verdicts();
    double verdict_threshold();
    const ThresholdReport& first_threshold_report();

private:
    const RunConfig& cfg_;
    std::optional<Dataset> train_data_, test_data_;
    std::vector<int> outlier_indices_;
    std::optional<TrainedModel> model_;
    std::optional<FeaturizedDataset> featurized_train_, featurized_test_;
    std::optional<FdHessian> active_hessian_;
    std::optional<SpdInverse> active_h_inv_;
    std::optional<SymMatrix> classifier_h_;
    std::optional<SpdInverse> classifier_h_inv_;
    std::vector<Vector> active_train_grads_, active_test_grads_;
    std::optional<std::vector<MemorizationVerdict>> verdicts_;
    std::optional<ThresholdReport> first_threshold_report_;
};

const ThresholdReport& PipelineContext::first_threshold_report() {
    if (!first_threshold_report_) {
        if (active_test_grads().empty()) throw data_error("no test points available");
        first_threshold_report_ =
            thresholds(active_test_grads()[0], active_train_grads(),
                       active_h_inv().source_eigen, active_h_inv().inverse_eigenvalues);
    }
    return *first_threshold_report_;
}

double PipelineContext::verdict_threshold() {
    if (cfg_.memgen.d_override) return *cfg_.memgen.d_override;
    return first_threshold_report().d_plus;
}

const std::vector<MemorizationVerdict>& PipelineContext::verdicts() {
    if (!verdicts_) {
        const double d = verdict_threshold();
        std::vector<MemorizationVerdict> out;
        out.reserve(train_data().size());
        for (int p = 0; p < train_data().size(); ++p) {
            const EigenCoords chi =
                eigen_coords(active_train_grads()[p], active_h_inv().source_eigen);
            const double norm = memorization_norm(chi, active_h_inv().inverse_eigenvalues);
            out.push_back(classify_point(p, norm, d));
        }
        verdicts_ = std::move(out);
    }
    return *verdicts_;
}

nlohmann::json cmd_gen_data(PipelineContext& ctx) {
    const auto& cfg = ctx.cfg();
    SyntheticData synth = generate_synthetic(cfg.gen, substream_seed(cfg.seed, "gen-data"));

    std::filesystem::create_directories(
        std::filesystem::path(cfg.dataset_path).parent_path().empty()
            ? "."
            : std::filesystem::path(cfg.dataset_path).parent_path());
    std::filesystem::create_directories(
        std::filesystem::path(cfg.test_set_path).parent_path().empty()
            ? "."
            : std::filesystem::path(cfg.test_set_path).parent_path());
    save_dataset(synth.train, cfg.dataset_path);
    save_dataset(synth.test, cfg.test_set_path);

    nlohmann::json j;
    j["train_path"] = cfg.dataset_path;
    j["test_path"] = cfg.test_set_path;
    j["n_train"] = synth.train.size();
    j["n_test"] = synth.test.size();
    j["outlier_indices"] = synth.outlier_indices;
    int pos = 0;
    for (const auto& z : synth.train.points) pos += z.label;
    j["train_positives"] = pos;
    j["train_negatives"] = synth.train.size() - pos;
    ctx.set_generated(std::move(synth));
    return j;
}

nlohmann::json cmd_train(PipelineContext& ctx) {
    const TrainedModel& model = ctx.model();
    std::filesystem::create_directories(ctx.cfg().output_dir);
    save_params(model.params, std::filesystem::path(ctx.cfg().output_dir) / "model.json");

    nlohmann::json j;
    j["risk"] = model.risk;
    j["final_grad_norm"] = model.final_grad_norm;
    j["converged"] = model.converged;
    j["iterations"] = model.iterations;
    j["mu"] = model.params.layout().total();
    j["mu_c"] = model.params.layout().classifier_count();
    j["freeze_featurizer"] = ctx.frozen();
    j["train_seed"] = ctx.cfg().train.seed;
    return j;
}

nlohmann::json cmd_influence(PipelineContext& ctx) {
    const int n = ctx.train_data().size();
    const auto& test_grads = ctx.active_test_grads();
    const auto& train_grads = ctx.active_train_grads();
    const auto cls_train_grads = ctx.classifier_grads(ctx.featurized_train());
    const auto cls_test_grads = ctx.classifier_grads(ctx.featurized_test());

    nlohmann::json records = nlohmann::json::array();
    for (size_t t = 0; t < test_grads.size(); ++t) {
        const Vector transformed_full =
            ctx.active_h_inv().matrix.entries() * test_grads[t];
        const Vector transformed_cls =
            ctx.classifier_h_inv().matrix.entries() * cls_test_grads[t];
        for (int p = 0; p < n; ++p) {
            const double i_loss = -transformed_full.dot(train_grads[p]);
            const double i_loss_c = -transformed_cls.dot(cls_train_grads[p]);
            const InfluenceRecord rec =
                make_influence_record(static_cast<int>(t), p, i_loss, i_loss_c, n);
            records.push_back({{"test_index", rec.test_index},
                               {"train_index", rec.train_index},
                               {"i_loss", rec.i_loss},
                               {"i_loss_c", rec.i_loss_c},
                               {"predicted_loss_change", rec.predicted_loss_change},
                               {"sign", rec.sign}});
        }
    }

    nlohmann::json j;
    j["records"] = std::move(records);
    j["active_hessian"] = {{"dim", ctx.active_hessian().matrix.dim()},
                           {"rel_asymmetry", ctx.active_hessian().rel_asymmetry},
                           {"damping_applied", ctx.active_h_inv().damping_applied}};
    j["classifier_hessian"] = {{"dim", ctx.classifier_h().dim()},
                               {"damping_applied", ctx.classifier_h_inv().damping_applied}};
    return j;
}

nlohmann::json cmd_validate_loo(PipelineContext& ctx) {
    const auto& cfg = ctx.cfg();
    const Dataset& data = ctx.train_data();
    const int n = data.size();
    const TrainedModel& model = ctx.model();
    const ParamLayout layout = ctx.layout();

    std::vector<TrainedModel> retrained;
    retrained.reserve(n);
    for (int p = 0; p < n; ++p) retrained.push_back(model);  // placeholder storage
    std::atomic<int> converged_count{0};
    parallel_for(n, cfg.jobs, [&](int p) {
        retrained[p] = loo_retrain(data, layout, cfg.train, p, model.params);
        if (retrained[p].converged) converged_count.fetch_add(1);
    });

    // in frozen mode the active gradients are the classifier gradients and
    // prediction_h_inv() is the analytic classifier Hessian, so dimensions match
    const auto& h_inv = ctx.prediction_h_inv();
    const auto& pred_train_grads = ctx.active_train_grads();
    const auto& pred_test_grads = ctx.active_test_grads();

    auto active_block = [&](const ParamVector& params) {
        return ctx.frozen() ? Vector(params.classifier_block()) : params.values();
    };
    const Vector base_active = active_block(model.params);

    // parameter-change fidelity, per training point
    nlohmann::json param_rows = nlohmann::json::array();
    int within_tolerance = 0;
    for (int p = 0; p < n; ++p) {
        const auto pred =
            predicted_changes(h_inv, pred_train_grads[p], 0.0 /* loss delta unused here */, n);
        const Vector actual = active_block(retrained[p].params) - base_active;
        const double actual_norm = actual.norm();
        const double disc = actual_norm > 0.0
                                ? (pred.param_delta - actual).norm() / actual_norm
                                : pred.param_delta.norm();
        if (disc <= 0.25) ++within_tolerance;
        param_rows.push_back({{"train_index", p},
                              {"rel_l2_discrepancy", disc},
                              {"converged", retrained[p].converged}});
    }

    // loss-change fidelity, per (test, train) pair
    auto loss_at = [&](const RawPoint& z, const ParamVector& params) {
        return point_loss(z, params);
    };
    const int n_test = ctx.test_count();
    nlohmann::json pair_rows = nlohmann::json::array();
    std::vector<double> spearman_per_test;
    for (int t = 0; t < n_test; ++t) {
        const RawPoint& z_t = ctx.test_data().points[t];
        const double base_loss = loss_at(z_t, model.params);
        std::vector<double> predicted(n), actual(n);
        for (int p = 0; p < n; ++p) {
            const double i_loss =
                -pred_test_grads[t].dot(h_inv.matrix.entries() * pred_train_grads[p]);
            predicted[p] = -i_loss / static_cast<double>(n);
            actual[p] = loss_at(z_t, retrained[p].params) - base_loss;
            pair_rows.push_back({{"test_index", t},
                                 {"train_index", p},
                                 {"predicted_loss_change", predicted[p]},
                                 {"actual_loss_change", actual[p]},
                                 {"discrepancy", predicted[p] - actual[p]}});
        }
        spearman_per_test.push_back(spearman(predicted, actual));
    }

    nlohmann::json j;
    j["loo_converged"] = converged_count.load();
    j["n"] = n;
    j["spearman_per_test"] = spearman_per_test;
    j["spearman_min"] =
        *std::min_element(spearman_per_test.begin(), spearman_per_test.end());
    j["param_delta"] = {{"fraction_within_quarter",
                         static_cast<double>(within_tolerance) / static_cast<double>(n)},
                        {"rows", std::move(param_rows)}};
    j["pairs"] = std::move(pair_rows);
    return j;
}

nlohmann::json theorem1_partition_report(const Theorem1Context& t1,
                                         const std::vector<GradientSplit>& test_splits,
                                         const std::vector<GradientSplit>& train_splits,
                                         double ratio_tol) {
    double max_gap = 0.0;
    int undefined = 0;
    int checked = 0;
    int tol_violations = 0;
    nlohmann::json sample = nlohmann::json::array();
    for (size_t t = 0; t < test_splits.size(); ++t) {
        for (size_t p = 0; p < train_splits.size(); ++p) {
            const Theorem1Diagnostics diag = theorem1_pair(t1, test_splits[t], train_splits[p]);
            if (!diag.ratio_defined) {
                ++undefined;
                continue;
            }
            ++checked;
            const double gap = std::abs(diag.ratio_direct - diag.ratio_reconstructed) /
                               std::max(std::abs(diag.ratio_direct), 1e-300);
            max_gap = std::max(max_gap, gap);
            if (gap > ratio_tol) ++tol_violations;
            if (sample.size() < 50) {
                sample.push_back({{"test_index", t},
                                  {"train_index", p},
                                  {"ratio_direct", diag.ratio_direct},
                                  {"ratio_reconstructed", diag.ratio_reconstructed},
                                  {"cross_term", diag.cross_term}});
            }
        }
    }
    nlohmann::json j;
    j["pairs_checked"] = checked;
    j["pairs_undefined"] = undefined;
    j["max_rel_ratio_gap"] = max_gap;
    j["ratio_tol_violations"] = tol_violations;
    j["inverse_block_error"] = t1.inverse_block_error;
    j["classifier_inverse_error"] = t1.classifier_inverse_error;
    j["coupling_norms"] = {{"cf", t1.coupling_norm_cf},
                           {"fc", t1.coupling_norm_fc},
                           {"ff", t1.coupling_norm_ff}};
    j["lambda_c"] = to_json(t1.lambda_c);
    j["lambda_f_max"] = t1.lambda_f.size() > 0 ? t1.lambda_f.maxCoeff() : 0.0;
    j["lambda_f_min"] = t1.lambda_f.size() > 0 ? t1.lambda_f.minCoeff() : 0.0;
    j["sample_pairs"] = std::move(sample);
    return j;
}

nlohmann::json cmd_theorem1(PipelineContext& ctx) {
    if (ctx.frozen()) {
        throw config_error(
            "theorem1 needs the full featurizer-classifier model; set freeze_featurizer=false");
    }
    const ParamLayout layout = ctx.layout();
    const int mu_c = layout.classifier_count();

    // damped full Hessian so the positive-definiteness precondition holds
    Matrix damped = ctx.active_hessian().matrix.entries();
    damped.diagonal().array() += ctx.active_h_inv().damping_applied;
    const BlockHessian bh = split_blocks(SymMatrix(std::move(damped)), mu_c);

    std::vector<GradientSplit> test_splits, train_splits;
    for (const auto& g : ctx.active_test_grads()) {
        test_splits.push_back(GradientSplit::split(g, mu_c));
    }
    for (const auto& g : ctx.active_train_grads()) {
        train_splits.push_back(GradientSplit::split(g, mu_c));
    }

    const double ratio_tol = ctx.cfg().influence.ratio_tol;
    nlohmann::json j;
    j["damping_applied"] = ctx.active_h_inv().damping_applied;
    j["mu"] = layout.total();
    j["mu_c"] = mu_c;
    const Theorem1Context by_mass = make_theorem1_context(bh, EigenPartition::kClassifierMass);
    j["partition_classifier_mass"] =
        theorem1_partition_report(by_mass, test_splits, train_splits, ratio_tol);
    const Theorem1Context by_eigenvalue =
        make_theorem1_context(bh, EigenPartition::kDescendingEigenvalue);
    j["partition_descending_eigenvalue"] =
        theorem1_partition_report(by_eigenvalue, test_splits, train_splits, ratio_tol);
    return j;
}

nlohmann::json lep_report_to_json(const LEPReport& rep) {
    return {{"rho", rep.rho},
            {"spread", rep.spread},
            {"is_lep", rep.is_lep},
            {"tau", rep.tau},
            {"defined_count", rep.defined_count},
            {"subset", rep.subset.indices}};
}

nlohmann::json cmd_relative(PipelineContext& ctx) {
    const auto& cfg = ctx.cfg();
    const Dataset& data = ctx.train_data();
    if (ctx.active_test_grads().empty()) throw data_error("relative: no test points");
    const Vector& grad_t = ctx.active_test_grads()[0];
    const auto& train_grads = ctx.active_train_grads();
    const SpdInverse& h_inv = ctx.active_h_inv();

    const SubsetSpec subset = sample_subset(data, std::min(cfg.relative.m, data.size()),
                                            substream_seed(cfg.seed, "subset-sampling"),
                                            cfg.relative.stratified_by_label);
    const SymMatrix h_m = relative_hessian(data, subset, ctx.model().params, ctx.frozen());
    const SpdInverse h_m_inv = spd_invert(h_m, cfg.influence.damping_floor);

    const RatioSet rs = ratio_set(grad_t, train_grads, h_inv, h_m_inv);
    const LEPReport rep = lep_check(rs, cfg.relative.tau, subset);

    // identity subset: every defined ratio is exactly 1
    const RatioSet rs_identity = ratio_set(grad_t, train_grads, h_inv, h_inv);
    const LEPReport rep_identity = lep_check(rs_identity, cfg.relative.tau, SubsetSpec::full(data.size()));

    const Theorem2Diagnostics t2 =
        theorem2_diagnostics(grad_t, train_grads[0], cfg.relative.delta, h_m,
                             h_inv.matrix.entries(), h_m_inv.matrix.entries(), rep.rho);
    const Theorem2Diagnostics t2_identity = theorem2_diagnostics(
        grad_t, train_grads[0], cfg.relative.delta,
        SymMatrix(Matrix(ctx.active_hessian().matrix.entries() +
                         h_inv.damping_applied * Matrix::Identity(h_inv.matrix.dim(),
                                                                  h_inv.matrix.dim()))),
        h_inv.matrix.entries(), h_inv.matrix.entries(), 1.0);

    nlohmann::json j;
    j["subset_report"] = lep_report_to_json(rep);
    j["identity_subset_spread"] = rep_identity.spread;
    j["h_m_damping"] = h_m_inv.damping_applied;
    j["theorem2"] = {{"delta", t2.delta},
                     {"mismatch_norm", t2.mismatch_norm},
                     {"max_row_sum_deviation", t2.max_row_sum_deviation},
                     {"row_sums_first", t2.row_sums.size() > 0 ? t2.row_sums(0) : 0.0},
                     {"dot_product", t2.dot_product}};
    j["theorem2_identity_mismatch_norm"] = t2_identity.mismatch_norm;
    return j;
}

nlohmann::json cmd_lep_search(PipelineContext& ctx) {
    const auto& cfg = ctx.cfg();
    if (ctx.active_test_grads().empty()) throw data_error("lep-search: no test points");
    LepSearchConfig search;
    search.m = std::min(cfg.relative.m, ctx.train_data().size());
    search.trials = cfg.relative.trials;
    search.tau = cfg.relative.tau;
    search.seed = substream_seed(cfg.seed, "subset-sampling");
    search.damping_floor = cfg.influence.damping_floor;
    search.classifier_only = ctx.frozen();
    search.stratified_by_label = cfg.relative.stratified_by_label;

    const LepSearchResult result =
        lep_sample_search(ctx.train_data(), ctx.model().params, ctx.active_test_grads()[0],
                          ctx.active_train_grads(), ctx.active_h_inv(), search);

    nlohmann::json reports = nlohmann::json::array();
    for (const auto& rep : result.reports) reports.push_back(lep_report_to_json(rep));
    nlohmann::json j;
    j["reports"] = std::move(reports);
    j["best_pair_rho_gap"] = result.best_pair_rho_gap;
    j["best_spread"] = result.reports.front().spread;
    return j;
}

nlohmann::json threshold_report_to_json(const ThresholdReport& rep) {
    return {{"cal_t_plus", rep.cal_t_plus},
            {"cal_t_minus", rep.cal_t_minus},
            {"lambda_min_inv", rep.lambda_min_inv},
            {"max_abs_psi", rep.max_abs_psi},
            {"d_plus", rep.d_plus},
            {"d_minus", rep.d_minus},
            {"plus_vacuous", rep.plus_vacuous},
            {"minus_vacuous", rep.minus_vacuous}};
}

nlohmann::json cmd_memorize(PipelineContext& ctx) {
    const auto& train_grads = ctx.active_train_grads();
    const auto& test_grads = ctx.active_test_grads();
    const SpdInverse& h_inv = ctx.active_h_inv();
    const int n = ctx.train_data().size();

    nlohmann::json threshold_reports = nlohmann::json::array();
    int violations_plus = 0, violations_minus = 0, checked = 0, vacuous_sides = 0;
    for (size_t t = 0; t < test_grads.size(); ++t) {
        const ThresholdReport rep =
            thresholds(test_grads[t], train_grads, h_inv.source_eigen, h_inv.inverse_eigenvalues);
        threshold_reports.push_back(threshold_report_to_json(rep));
        if (rep.plus_vacuous) ++vacuous_sides;
        if (rep.minus_vacuous) ++vacuous_sides;
        for (int p = 0; p < n; ++p) {
            const double i_loss =
                -test_grads[t].dot(h_inv.matrix.entries() * train_grads[p]);
            const EigenCoords chi = eigen_coords(train_grads[p], h_inv.source_eigen);
            const double norm = memorization_norm(chi, h_inv.inverse_eigenvalues);
            if (i_loss > 0.0 && !rep.plus_vacuous) {
                ++checked;
                if (!(norm > rep.d_plus)) ++violations_plus;
            } else if (i_loss < 0.0 && !rep.minus_vacuous) {
                ++checked;
                if (!(norm > rep.d_minus)) ++violations_minus;
            }
        }
    }

    const double d_used = ctx.verdict_threshold();
    nlohmann::json verdict_rows = nlohmann::json::array();
    int memorizable_count = 0;
    for (const auto& v : ctx.verdicts()) {
        memorizable_count += v.is_memorizable ? 1 : 0;
        verdict_rows.push_back({{"point_index", v.point_index},
                                {"norm_value", v.norm_value},
                                {"threshold_used", v.threshold_used},
                                {"is_memorizable", v.is_memorizable}});
    }

    nlohmann::json j;
    j["threshold_reports"] = std::move(threshold_reports);
    j["d_used"] = d_used;
    j["d_override_active"] = ctx.cfg().memgen.d_override.has_value();
    j["damping_applied"] = h_inv.damping_applied;
    j["verdicts"] = std::move(verdict_rows);
    j["memorizable_count"] = memorizable_count;
    j["outlier_indices"] = ctx.outlier_indices();
    j["theorem3"] = {{"checked", checked},
                     {"violations_plus", violations_plus},
                     {"violations_minus", violations_minus},
                     {"vacuous_sides", vacuous_sides}};
    return j;
}

nlohmann::json cmd_sign_check(PipelineContext& ctx) {
    const Vector cls = ctx.model().params.classifier_block();
    const auto& ftrain = ctx.featurized_train();
    const auto& ftest = ctx.featurized_test();
    const SpdInverse& h_c_inv = ctx.classifier_h_inv();

    std::vector<Vector> gradient_set = ctx.classifier_grads(ftrain);
    for (auto& g : ctx.classifier_grads(ftest)) gradient_set.push_back(std::move(g));
    const AlmostPositiveReport ap =
        almost_positive_check(h_c_inv, gradient_set, ctx.cfg().memgen.tol);

    const auto records = sign_label_predict_and_verify(ftrain, ftest, cls, h_c_inv, ap);
    int defined = 0, agree = 0;
    for (const auto& rec : records) {
        if (rec.observed_sign != 0) {
            ++defined;
            if (rec.agree) ++agree;
        }
    }

    // fallback diagnostic: on strictly positive inverse entries, the sign of
    // each term is pinned by the labels alone
    long terms_checked = 0, term_violations = 0;
    if (!ap.ok) {
        const Matrix& h = h_c_inv.matrix.entries();
        const auto train_grads = ctx.classifier_grads(ftrain);
        const auto test_grads = ctx.classifier_grads(ftest);
        for (int t = 0; t < ftest.size(); ++t) {
            for (int p = 0; p < ftrain.size(); ++p) {
                const bool labels_same = ftest.points[t].label == ftrain.points[p].label;
                for (int i = 0; i < h.rows(); ++i) {
                    for (int k = 0; k < h.cols(); ++k) {
                        if (h(i, k) <= 0.0) continue;
                        const double term = test_grads[t](i) * h(i, k) * train_grads[p](k);
                        if (term == 0.0) continue;
                        ++terms_checked;
                        if ((term > 0.0) != labels_same) ++term_violations;
                    }
                }
            }
        }
    }

    nlohmann::json record_rows = nlohmann::json::array();
    for (size_t i = 0; i < records.size() && i < 200; ++i) {
        const auto& rec = records[i];
        record_rows.push_back({{"test_index", rec.test_index},
                               {"train_index", rec.train_index},
                               {"y_t", rec.y_t},
                               {"y_p", rec.y_p},
                               {"predicted_sign", rec.predicted_sign},
                               {"observed_sign", rec.observed_sign},
                               {"agree", rec.agree}});
    }

    nlohmann::json j;
    j["almost_positive"] = {{"ok", ap.ok},
                            {"min_entry", ap.min_entry},
                            {"negative_entries", ap.negative_entries},
                            {"tol", ap.tol},
                            {"max_abs_gradient", ap.max_abs_gradient},
                            {"min_pair_positive_mass", ap.min_pair_positive_mass},
                            {"calibration_ok", ap.calibration_ok}};
    j["pairs"] = static_cast<int>(records.size());
    j["defined_pairs"] = defined;
    j["agree_count"] = agree;
    j["agree_fraction"] = defined > 0 ? static_cast<double>(agree) / defined : 0.0;
    j["hypothesis_met"] = ap.ok;
    j["per_term_identity"] = {{"terms_checked", terms_checked},
                              {"violations", term_violations}};
    j["records_sample"] = std::move(record_rows);
    return j;
}

nlohmann::json prune_summary_to_json(const PruneSummary& summary) {
    return {{"kept_indices", summary.kept_indices},
            {"memorizable_kept", summary.memorizable_kept},
            {"generalizable_kept", summary.generalizable_kept},
            {"dropped", summary.dropped},
            {"positives_before", summary.positives_before},
            {"negatives_before", summary.negatives_before},
            {"positives_after", summary.positives_after},
            {"negatives_after", summary.negatives_after}};
}

nlohmann::json cmd_prune(PipelineContext& ctx) {
    const auto& cfg = ctx.cfg();
    auto [pruned, summary] = prune(ctx.train_data(), ctx.verdicts(), cfg.memgen.keep_fraction,
                                   substream_seed(cfg.seed, "prune"));
    std::filesystem::create_directories(cfg.output_dir);
    const auto path = std::filesystem::path(cfg.output_dir) / "pruned.csv";
    save_dataset(pruned, path);

    nlohmann::json j = prune_summary_to_json(summary);
    j["keep_fraction"] = cfg.memgen.keep_fraction;
    j["pruned_path"] = path.string();
    j["pruned_size"] = pruned.size();
    return j;
}

nlohmann::json cmd_evaluate(PipelineContext& ctx) {
    const auto& cfg = ctx.cfg();
    const TrainedModel& baseline = ctx.model();
    const EvalMetrics base = eval_metrics(ctx.test_data(), baseline.params);

    auto [pruned, summary] = prune(ctx.train_data(), ctx.verdicts(), cfg.memgen.keep_fraction,
                                   substream_seed(cfg.seed, "prune"));
    const TrainedModel retrained = minimize_weighted(pruned, ctx.layout(), cfg.train);
    const EvalMetrics after = eval_metrics(ctx.test_data(), retrained.params);

    auto metrics_json = [](const EvalMetrics& m) {
        nlohmann::json j;
        j["mean_bce"] = m.mean_bce;
        if (m.auc) {
            j["auc"] = *m.auc;
        } else {
            j["auc"] = nullptr;
            j["auc_undefined"] = "single-class eval set";
        }
        return j;
    };

    nlohmann::json j;
    j["baseline"] = metrics_json(base);
    j["baseline"]["n_train"] = ctx.train_data().size();
    j["pruned"] = metrics_json(after);
    j["pruned"]["n_train"] = pruned.size();
    j["pruned"]["converged"] = retrained.converged;
    j["delta"] = {{"mean_bce", after.mean_bce - base.mean_bce}};
    if (base.auc && after.auc) {
        j["delta"]["auc"] = *after.auc - *base.auc;
    }
    j["class_ratio"] = prune_summary_to_json(summary);
    return j;
}

}  // namespace

ReportBundle run_pipeline(const RunConfig& cfg, const std::vector<std::string>& commands) {
    for (const auto& cmd : commands) {
        if (std::find(all_commands().begin(), all_commands().end(), cmd) ==
            all_commands().end()) {
            throw config_error("unknown command '" + cmd + "'");
        }
    }

    PipelineContext ctx(cfg);
    ReportBundle bundle;
    bundle.metadata["config"] = config_to_json(cfg);
    {
        std::ostringstream hex;
        hex << std::hex << config_hash(cfg);
        bundle.metadata["config_hash"] = hex.str();
    }
    bundle.metadata["commands"] = commands;

    for (const auto& cmd : commands) {
        nlohmann::json section;
        if (cmd == "gen-data") {
            section = cmd_gen_data(ctx);
            bundle.summary_lines.push_back(
                "gen-data: wrote " + std::to_string(section["n_train"].get<int>()) +
                " train / " + std::to_string(section["n_test"].get<int>()) + " test points");
        } else if (cmd == "train") {
            section = cmd_train(ctx);
            std::ostringstream line;
            line << "train: risk " << section["risk"].get<double>() << ", grad norm "
                 << section["final_grad_norm"].get<double>() << ", converged "
                 << (section["converged"].get<bool>() ? "yes" : "no") << " ("
                 << section["iterations"].get<int>() << " iterations)";
            bundle.summary_lines.push_back(line.str());
        } else if (cmd == "influence") {
            section = cmd_influence(ctx);
            bundle.summary_lines.push_back(
                "influence: " + std::to_string(section["records"].size()) +
                " (test, train) records, damping " +
                std::to_string(section["active_hessian"]["damping_applied"].get<double>()));
        } else if (cmd == "validate-loo") {
            section = cmd_validate_loo(ctx);
            std::ostringstream line;
            line << "validate-loo: Spearman(predicted vs actual loss change) min "
                 << section["spearman_min"].get<double>() << ", param-delta within 0.25 for "
                 << section["param_delta"]["fraction_within_quarter"].get<double>() * 100.0
                 << "% of points";
            bundle.summary_lines.push_back(line.str());
        } else if (cmd == "theorem1") {
            section = cmd_theorem1(ctx);
            std::ostringstream line;
            line << "theorem1: max relative ratio gap "
                 << section["partition_classifier_mass"]["max_rel_ratio_gap"].get<double>()
                 << " over "
                 << section["partition_classifier_mass"]["pairs_checked"].get<int>()
                 << " pairs";
            bundle.summary_lines.push_back(line.str());
        } else if (cmd == "relative") {
            section = cmd_relative(ctx);
            std::ostringstream line;
            line << "relative: subset spread "
                 << section["subset_report"]["spread"].get<double>() << " (identity spread "
                 << section["identity_subset_spread"].get<double>() << ")";
            bundle.summary_lines.push_back(line.str());
        } else if (cmd == "lep-search") {
            section = cmd_lep_search(ctx);
            std::ostringstream line;
            line << "lep-search: best spread " << section["best_spread"].get<double>()
                 << ", best-pair rho gap " << section["best_pair_rho_gap"].get<double>();
            bundle.summary_lines.push_back(line.str());
        } else if (cmd == "memorize") {
            section = cmd_memorize(ctx);
            std::ostringstream line;
            line << "memorize: " << section["memorizable_count"].get<int>() << "/"
                 << section["verdicts"].size() << " memorizable at D "
                 << section["d_used"].get<double>() << ", bound violations "
                 << section["theorem3"]["violations_plus"].get<int>() << "+/"
                 << section["theorem3"]["violations_minus"].get<int>() << "-";
            bundle.summary_lines.push_back(line.str());
        } else if (cmd == "sign-check") {
            section = cmd_sign_check(ctx);
            std::ostringstream line;
            line << "sign-check: agreement "
                 << section["agree_fraction"].get<double>() * 100.0 << "% over "
                 << section["defined_pairs"].get<int>() << " defined pairs (hypothesis "
                 << (section["hypothesis_met"].get<bool>() ? "met" : "unmet") << ")";
            bundle.summary_lines.push_back(line.str());
        } else if (cmd == "prune") {
            section = cmd_prune(ctx);
            bundle.summary_lines.push_back(
                "prune: kept " + std::to_string(section["pruned_size"].get<int>()) + " points (" +
                std::to_string(section["memorizable_kept"].get<int>()) + " memorizable)");
        } else if (cmd == "evaluate") {
            section = cmd_evaluate(ctx);
            std::ostringstream line;
            line << "evaluate: mean BCE delta " << section["delta"]["mean_bce"].get<double>();
            if (section["delta"].contains("auc")) {
                line << ", AUC delta " << section["delta"]["auc"].get<double>();
            }
            bundle.summary_lines.push_back(line.str());
        }
        bundle.sections[cmd] = std::move(section);
    }

    emit_report(bundle, cfg.output_dir);
    return bundle;
}

}  // namespace ilab
