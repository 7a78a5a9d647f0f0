// switchbench: synthesise track datasets, train the two sequence classifiers
// and run the truncated-sequence benchmark.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <switchbench/switchbench.hpp>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace switchbench;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Values for a flag resolve as: command line > --config file > default.
class ConfigOverlay {
public:
    ConfigOverlay(CLI::App* cmd, const std::string& config_path) : cmd_(cmd) {
        if (!config_path.empty()) {
            std::ifstream in(config_path);
            if (!in)
                throw UsageError("cannot open --config file " + config_path);
            try {
                in >> cfg_;
            } catch (const json::exception& e) {
                throw UsageError("bad --config file " + config_path + ": " + e.what());
            }
        }
    }

    template <class T>
    void apply(const std::string& flag, T& var) const {
        const std::string key = flag.substr(2);
        if (cmd_->count(flag) == 0 && cfg_.contains(key))
            var = cfg_.at(key).get<T>();
    }

    bool provided(const std::string& flag) const {
        return cmd_->count(flag) > 0 || cfg_.contains(flag.substr(2));
    }

private:
    CLI::App* cmd_;
    json cfg_;
};

void write_run_config(const fs::path& out_dir, const json& cfg) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec)
        throw IoError("cannot create output directory " + out_dir.string());
    std::ofstream out(out_dir / "run_config.json", std::ios::binary);
    if (!out)
        throw IoError("cannot write run_config.json in " + out_dir.string());
    out << cfg.dump(2) << "\n";
}

ClassificationRule parse_rule(const std::string& name, ClassificationRule dflt) {
    if (name == "default")
        return dflt;
    if (name == "final")
        return ClassificationRule::FinalStep;
    if (name == "mean")
        return ClassificationRule::MeanPosterior;
    if (name == "sumlog")
        return ClassificationRule::SumLog;
    throw UsageError("unknown --rule '" + name + "' (final|mean|sumlog|default)");
}

// ---- synth ----------------------------------------------------------------

struct SynthArgs {
    std::uint64_t seed = 0;
    std::string out;
    int per_class = 10;
    int test_per_class = 8;
    int len_min = 0;  // 0 keeps the per-class defaults
    int len_max = 0;
};

int run_synth(const SynthArgs& a) {
    SynthSpec spec = SynthSpec::default_spec(a.seed);
    spec.train_per_class = a.per_class;
    spec.test_per_class = a.test_per_class;
    if (a.len_min > 0 || a.len_max > 0)
        for (auto& c : spec.classes) {
            if (a.len_min > 0)
                c.len_min = a.len_min;
            if (a.len_max > 0)
                c.len_max = std::max(a.len_max, c.len_min);
        }

    const fs::path out_dir(a.out);
    json cfg = {{"command", "synth"},     {"seed", a.seed},
                {"out", a.out},           {"per-class", a.per_class},
                {"test-per-class", a.test_per_class}, {"len-min", a.len_min},
                {"len-max", a.len_max}};
    write_run_config(out_dir, cfg);

    const SynthResult ds = synthesize(spec);
    write_dataset(ds, out_dir);
    save_slds(out_dir / "ground_truth_params.txt", ds.ground_truth.front());
    std::cout << "wrote " << ds.train.size() << " train + " << ds.test.size()
              << " test sequences to " << out_dir.string() << "\n";
    return 0;
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
    std::string model;
    std::string data;
    std::string out;
    std::uint64_t seed = 0;
    // slds
    double stay_prob = 0.97;
    double accel_noise = 1e-4;
    double obs_noise = 0.01;
    int em_iters = 100;
    double em_tol = 1e-4;
    bool full_em = false;
    // rnn
    int hidden = 32;
    double lr = 1e-4;
    int epochs = 110;
    int batch = 1;
    double grad_clip = 5.0;
    int layers = 3;
};

int run_train(const TrainArgs& a) {
    const fs::path out_dir(a.out);
    json cfg = {{"command", "train"},   {"model", a.model},       {"data", a.data},
                {"out", a.out},         {"seed", a.seed},         {"stay-prob", a.stay_prob},
                {"accel-noise", a.accel_noise}, {"obs-noise", a.obs_noise},
                {"em-iters", a.em_iters}, {"em-tol", a.em_tol},   {"full-em", a.full_em},
                {"hidden", a.hidden},   {"lr", a.lr},             {"epochs", a.epochs},
                {"batch", a.batch},     {"grad-clip", a.grad_clip}, {"layers", a.layers}};
    write_run_config(out_dir, cfg);

    const Dataset ds = load_dataset(a.data);
    std::ofstream log(out_dir / "training_log.csv", std::ios::binary);
    if (!log)
        throw IoError("cannot write training_log.csv in " + out_dir.string());

    if (a.model == "slds") {
        const LdsParams tmpl = constant_acceleration_model(1.0, a.accel_noise, a.obs_noise);
        EmConfig em = a.full_em ? EmConfig() : EmConfig::noise_only();
        em.max_iters = a.em_iters;
        em.tol = a.em_tol;
        const auto labelled = to_labelled_observations(ds.train);

        // train_per_class with a per-class log: rerun em_fit per class here so
        // the log-likelihood traces can be recorded.
        std::vector<LdsParams> fitted;
        log << "class,iteration,loglik\n";
        for (std::size_t c = 0; c < ds.class_names.size(); ++c) {
            std::vector<std::vector<Vector>> seqs;
            for (const auto& ls : labelled)
                if (ls.label == static_cast<int>(c))
                    seqs.push_back(ls.observations);
            if (seqs.empty())
                throw MissingClass("no training sequences for class " + ds.class_names[c]);
            auto [params, trace] = em_fit(seqs, tmpl, em);
            for (std::size_t i = 0; i < trace.size(); ++i)
                log << ds.class_names[c] << ',' << i << ',' << detail::format_double(trace[i])
                    << "\n";
            fitted.push_back(std::move(params));
        }
        const auto S = static_cast<Eigen::Index>(ds.class_names.size());
        Matrix trans(S, S);
        const double off = S > 1 ? (1.0 - a.stay_prob) / static_cast<double>(S - 1) : 0.0;
        for (Eigen::Index i = 0; i < S; ++i)
            for (Eigen::Index j = 0; j < S; ++j)
                trans(i, j) = i == j ? (S > 1 ? a.stay_prob : 1.0) : off;
        SldsParams model(std::move(fitted), std::move(trans),
                         Vector::Constant(S, 1.0 / static_cast<double>(S)), ds.class_names);
        save_slds(out_dir / "model.txt", model);
    } else if (a.model == "rnn") {
        const FeatureTransform tf = standardize(ds.train);
        const auto features = to_labelled_features(ds.train, tf);
        TrainConfig tc;
        tc.epochs = a.epochs;
        tc.batch_size = a.batch;
        tc.seed = a.seed;
        tc.grad_clip = a.grad_clip;
        tc.learning_rate = a.lr;
        tc.hidden_size = a.hidden;
        tc.num_layers = a.layers;
        const TrainResult tr = train(features, static_cast<Eigen::Index>(ds.class_names.size()), tc);
        log << "epoch,loss\n";
        for (std::size_t e = 0; e < tr.epoch_losses.size(); ++e)
            log << e + 1 << ',' << detail::format_double(tr.epoch_losses[e]) << "\n";
        save_rnn(out_dir / "model.txt", RnnModel{tr.model, tf, ds.class_names});
    } else {
        throw UsageError("--model must be slds or rnn, got '" + a.model + "'");
    }
    std::cout << "wrote " << (out_dir / "model.txt").string() << "\n";
    return 0;
}

// ---- eval -----------------------------------------------------------------

struct EvalArgs {
    std::vector<std::string> model_files;
    std::string data;
    std::string out;
    std::string grid = "10:10:complete";
    std::string rule = "default";
    bool traces = false;
    bool skip_short = false;
};

NamedClassifier classifier_from_file(const fs::path& path, const std::string& rule,
                                     const std::vector<std::string>& class_names,
                                     std::vector<std::string>& used_names) {
    const ParamFile f = read_param_file(path);
    std::string name = f.kind;
    int suffix = 2;
    while (std::find(used_names.begin(), used_names.end(), name) != used_names.end())
        name = f.kind + std::to_string(suffix++);
    used_names.push_back(name);

    if (f.kind == "slds") {
        SldsParams p = load_slds_from(f);
        if (p.state_names != class_names)
            throw InvalidParameter("model classes do not match dataset classes for " + path.string());
        return slds_classifier(name, std::move(p), parse_rule(rule, ClassificationRule::FinalStep));
    }
    if (f.kind == "rnn") {
        RnnModel m = load_rnn_from(f);
        if (m.class_names != class_names)
            throw InvalidParameter("model classes do not match dataset classes for " + path.string());
        return rnn_classifier(name, std::move(m), parse_rule(rule, ClassificationRule::MeanPosterior));
    }
    throw ParseError("unknown model kind '" + f.kind + "' in " + path.string());
}

int run_eval(const EvalArgs& a) {
    const GridSpec gs = GridSpec::parse(a.grid);  // grid errors are usage errors
    const fs::path out_dir(a.out);
    json cfg = {{"command", "eval"}, {"model-file", a.model_files}, {"data", a.data},
                {"out", a.out},      {"grid", a.grid},              {"rule", a.rule},
                {"traces", a.traces}, {"skip-short", a.skip_short}};
    write_run_config(out_dir, cfg);

    const Dataset ds = load_dataset(a.data);
    int max_len = 0;
    for (const auto& seq : ds.test)
        max_len = std::max(max_len, static_cast<int>(seq.length()));
    const auto grid = gs.expand(max_len);

    EvalOptions opts;
    opts.collect_traces = a.traces;
    opts.skip_short = a.skip_short;

    EvalReport report;
    report.class_names = ds.class_names;
    report.grid = grid;
    std::vector<std::string> used_names;
    for (const auto& mf : a.model_files) {
        const NamedClassifier c = classifier_from_file(mf, a.rule, ds.class_names, used_names);
        report.models.push_back(evaluate_model(c, ds.test, grid,
                                               static_cast<Eigen::Index>(ds.class_names.size()),
                                               opts));
    }
    emit_report(report, out_dir);

    std::cout << "length";
    for (const auto& m : report.models)
        std::cout << '\t' << m.model;
    std::cout << "\n";
    for (std::size_t gi = 0; gi < grid.size(); ++gi) {
        std::cout << grid[gi].str();
        for (const auto& m : report.models)
            std::cout << '\t' << std::fixed << std::setprecision(4) << m.per_length[gi].accuracy;
        std::cout << "\n";
    }
    return 0;
}

// ---- trace ----------------------------------------------------------------

struct TraceArgs {
    std::string model_file;
    std::string sequence;
    std::string out;
    std::string rule = "default";
};

int run_trace(const TraceArgs& a) {
    const fs::path out_dir(a.out);
    json cfg = {{"command", "trace"},
                {"model-file", a.model_file},
                {"sequence", a.sequence},
                {"out", a.out},
                {"rule", a.rule}};
    write_run_config(out_dir, cfg);

    const ParamFile f = read_param_file(a.model_file);
    std::vector<std::string> class_names;
    Matrix trace;
    int label = 0;
    if (f.kind == "slds") {
        const SldsParams p = load_slds_from(f);
        class_names = p.state_names;
        const TrackSequence seq = load_sequence(a.sequence, class_names);
        std::tie(label, trace) = classify(p, to_observations(seq));
    } else if (f.kind == "rnn") {
        const RnnModel m = load_rnn_from(f);
        class_names = m.class_names;
        const TrackSequence seq = load_sequence(a.sequence, class_names);
        std::tie(label, trace) = classify(m.stack, to_features(seq, m.transform));
    } else {
        throw ParseError("unknown model kind '" + f.kind + "' in " + a.model_file);
    }

    std::ofstream out(out_dir / "trace.csv", std::ios::binary);
    if (!out)
        throw IoError("cannot write trace.csv in " + out_dir.string());
    out << "t";
    for (const auto& cn : class_names)
        out << ',' << cn;
    out << "\n";
    for (Eigen::Index t = 0; t < trace.rows(); ++t) {
        out << t;
        for (Eigen::Index c = 0; c < trace.cols(); ++c)
            out << ',' << detail::format_double(trace(t, c));
        out << "\n";
    }
    std::cout << "predicted class: " << class_names[static_cast<std::size_t>(label)] << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"truncated-sequence classification benchmark"};
    app.require_subcommand(1);

    SynthArgs synth;
    std::string synth_config;
    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic labelled track dataset");
    synth_cmd->add_option("--seed", synth.seed, "generator seed (required)");
    synth_cmd->add_option("--out", synth.out, "output directory");
    synth_cmd->add_option("--per-class", synth.per_class, "training sequences per class");
    synth_cmd->add_option("--test-per-class", synth.test_per_class, "test sequences per class");
    synth_cmd->add_option("--len-min", synth.len_min, "minimum sequence length (all classes)");
    synth_cmd->add_option("--len-max", synth.len_max, "maximum sequence length (all classes)");
    synth_cmd->add_option("--config", synth_config, "JSON config with defaults for any flag");

    TrainArgs train_args;
    std::string train_config;
    auto* train_cmd = app.add_subcommand("train", "fit a model on a dataset manifest");
    train_cmd->add_option("--model", train_args.model, "slds or rnn");
    train_cmd->add_option("--data", train_args.data, "dataset manifest path");
    train_cmd->add_option("--out", train_args.out, "output directory");
    train_cmd->add_option("--seed", train_args.seed, "training seed (required)");
    train_cmd->add_option("--stay-prob", train_args.stay_prob, "switching stay probability");
    train_cmd->add_option("--accel-noise", train_args.accel_noise, "initial process noise scale");
    train_cmd->add_option("--obs-noise", train_args.obs_noise, "initial observation noise variance");
    train_cmd->add_option("--em-iters", train_args.em_iters, "EM iteration cap");
    train_cmd->add_option("--em-tol", train_args.em_tol, "EM relative log-likelihood stop");
    train_cmd->add_flag("--full-em", train_args.full_em, "also re-estimate A and B");
    train_cmd->add_option("--hidden", train_args.hidden, "LSTM hidden units per cell");
    train_cmd->add_option("--lr", train_args.lr, "learning rate");
    train_cmd->add_option("--epochs", train_args.epochs, "training epochs");
    train_cmd->add_option("--batch", train_args.batch, "batch size (must be 1)");
    train_cmd->add_option("--grad-clip", train_args.grad_clip, "global gradient norm clip");
    train_cmd->add_option("--layers", train_args.layers, "bidirectional LSTM layers");
    train_cmd->add_option("--config", train_config, "JSON config with defaults for any flag");

    EvalArgs eval_args;
    std::string eval_config;
    auto* eval_cmd = app.add_subcommand("eval", "run the truncation-grid evaluation");
    eval_cmd->add_option("--model-file", eval_args.model_files, "trained model file (repeatable)");
    eval_cmd->add_option("--data", eval_args.data, "dataset manifest path");
    eval_cmd->add_option("--out", eval_args.out, "report output directory");
    eval_cmd->add_option("--grid", eval_args.grid, "truncation grid start:step:end|complete");
    eval_cmd->add_option("--rule", eval_args.rule, "label rule: final|mean|sumlog|default");
    eval_cmd->add_flag("--traces", eval_args.traces, "also store complete-length probability traces");
    eval_cmd->add_flag("--skip-short", eval_args.skip_short,
                       "skip sequences shorter than the grid length instead of clamping");
    eval_cmd->add_option("--config", eval_config, "JSON config with defaults for any flag");

    TraceArgs trace_args;
    std::string trace_config;
    auto* trace_cmd = app.add_subcommand("trace", "per-timestep class probabilities for one track");
    trace_cmd->add_option("--model-file", trace_args.model_file, "trained model file");
    trace_cmd->add_option("--sequence", trace_args.sequence, "track CSV path");
    trace_cmd->add_option("--out", trace_args.out, "output directory");
    trace_cmd->add_option("--rule", trace_args.rule, "label rule: final|mean|sumlog|default");
    trace_cmd->add_option("--config", trace_config, "JSON config with defaults for any flag");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (synth_cmd->parsed()) {
            const ConfigOverlay ov(synth_cmd, synth_config);
            ov.apply("--seed", synth.seed);
            ov.apply("--out", synth.out);
            ov.apply("--per-class", synth.per_class);
            ov.apply("--test-per-class", synth.test_per_class);
            ov.apply("--len-min", synth.len_min);
            ov.apply("--len-max", synth.len_max);
            if (!ov.provided("--seed"))
                throw UsageError("--seed is required (no wall-clock default)");
            if (!ov.provided("--out"))
                throw UsageError("--out is required");
            return run_synth(synth);
        }
        if (train_cmd->parsed()) {
            const ConfigOverlay ov(train_cmd, train_config);
            ov.apply("--model", train_args.model);
            ov.apply("--data", train_args.data);
            ov.apply("--out", train_args.out);
            ov.apply("--seed", train_args.seed);
            ov.apply("--stay-prob", train_args.stay_prob);
            ov.apply("--accel-noise", train_args.accel_noise);
            ov.apply("--obs-noise", train_args.obs_noise);
            ov.apply("--em-iters", train_args.em_iters);
            ov.apply("--em-tol", train_args.em_tol);
            ov.apply("--full-em", train_args.full_em);
            ov.apply("--hidden", train_args.hidden);
            ov.apply("--lr", train_args.lr);
            ov.apply("--epochs", train_args.epochs);
            ov.apply("--batch", train_args.batch);
            ov.apply("--grad-clip", train_args.grad_clip);
            ov.apply("--layers", train_args.layers);
            if (!ov.provided("--model"))
                throw UsageError("--model is required (slds or rnn)");
            if (!ov.provided("--data"))
                throw UsageError("--data is required");
            if (!ov.provided("--out"))
                throw UsageError("--out is required");
            if (!ov.provided("--seed"))
                throw UsageError("--seed is required (no wall-clock default)");
            return run_train(train_args);
        }
        if (eval_cmd->parsed()) {
            const ConfigOverlay ov(eval_cmd, eval_config);
            ov.apply("--model-file", eval_args.model_files);
            ov.apply("--data", eval_args.data);
            ov.apply("--out", eval_args.out);
            ov.apply("--grid", eval_args.grid);
            ov.apply("--rule", eval_args.rule);
            ov.apply("--traces", eval_args.traces);
            ov.apply("--skip-short", eval_args.skip_short);
            if (!ov.provided("--model-file"))
                throw UsageError("--model-file is required");
            if (!ov.provided("--data"))
                throw UsageError("--data is required");
            if (!ov.provided("--out"))
                throw UsageError("--out is required");
            return run_eval(eval_args);
        }
        if (trace_cmd->parsed()) {
            const ConfigOverlay ov(trace_cmd, trace_config);
            ov.apply("--model-file", trace_args.model_file);
            ov.apply("--sequence", trace_args.sequence);
            ov.apply("--out", trace_args.out);
            ov.apply("--rule", trace_args.rule);
            if (!ov.provided("--model-file"))
                throw UsageError("--model-file is required");
            if (!ov.provided("--sequence"))
                throw UsageError("--sequence is required");
            if (!ov.provided("--out"))
                throw UsageError("--out is required");
            return run_trace(trace_args);
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const InvalidGrid& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
