#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "switchbench/dataset.hpp"
#include "switchbench/parallel.hpp"

namespace switchbench {

using CountMatrix = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;

/// counts(true_class, predicted_class) over one evaluated population.
struct ConfusionMatrix {
    CountMatrix counts;

    explicit ConfusionMatrix(Eigen::Index classes = 0) { counts = CountMatrix::Zero(classes, classes); }

    void add(int true_class, int predicted) { counts(true_class, predicted) += 1; }
    std::int64_t total() const { return counts.sum(); }
    Eigen::Index classes() const { return counts.rows(); }
};

struct Metrics {
    double accuracy = 0.0;
    std::vector<std::optional<double>> precision;  // nullopt when the class was never predicted
    std::vector<std::optional<double>> recall;     // nullopt when the class never occurred
};

inline Metrics metrics(const ConfusionMatrix& cm) {
    if (cm.total() == 0)
        throw EmptyMatrix("metrics need at least one count");
    Metrics m;
    m.accuracy = static_cast<double>(cm.counts.diagonal().sum()) / static_cast<double>(cm.total());
    const Eigen::Index C = cm.classes();
    m.precision.resize(static_cast<std::size_t>(C));
    m.recall.resize(static_cast<std::size_t>(C));
    for (Eigen::Index c = 0; c < C; ++c) {
        const std::int64_t col = cm.counts.col(c).sum();
        const std::int64_t row = cm.counts.row(c).sum();
        if (col > 0)
            m.precision[static_cast<std::size_t>(c)] =
                static_cast<double>(cm.counts(c, c)) / static_cast<double>(col);
        if (row > 0)
            m.recall[static_cast<std::size_t>(c)] =
                static_cast<double>(cm.counts(c, c)) / static_cast<double>(row);
    }
    return m;
}

enum class Axis { Rows, Columns };

/// Row- or column-normalised confusion matrix; rows (or columns) with a zero
/// sum come back all-unset rather than zero or NaN.
inline std::vector<std::vector<std::optional<double>>> normalized(const ConfusionMatrix& cm,
                                                                  Axis axis) {
    const Eigen::Index C = cm.classes();
    std::vector<std::vector<std::optional<double>>> out(
        static_cast<std::size_t>(C), std::vector<std::optional<double>>(static_cast<std::size_t>(C)));
    for (Eigen::Index k = 0; k < C; ++k) {
        const std::int64_t sum = axis == Axis::Rows ? cm.counts.row(k).sum() : cm.counts.col(k).sum();
        if (sum == 0)
            continue;
        for (Eigen::Index other = 0; other < C; ++other) {
            const Eigen::Index r = axis == Axis::Rows ? k : other;
            const Eigen::Index c = axis == Axis::Rows ? other : k;
            out[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] =
                static_cast<double>(cm.counts(r, c)) / static_cast<double>(sum);
        }
    }
    return out;
}

/// A point on the truncation grid: a prefix length or the complete sequence.
struct GridLength {
    std::optional<int> length;  // nullopt means complete

    bool complete() const { return !length.has_value(); }
    std::string str() const { return complete() ? "complete" : std::to_string(*length); }
    friend bool operator==(const GridLength& a, const GridLength& b) { return a.length == b.length; }
};

/// Parses "start:step:end" where end is a sample count or "complete".
struct GridSpec {
    int start = 10;
    int step = 10;
    std::optional<int> end;  // nullopt: run to the longest sequence, then add complete

    static GridSpec parse(const std::string& text) {
        const auto parts = detail::split(text, ':');
        if (parts.size() != 3)
            throw InvalidGrid("expected start:step:end, got '" + text + "'");
        GridSpec g;
        try {
            g.start = static_cast<int>(detail::parse_long(parts[0], "grid", 1));
            g.step = static_cast<int>(detail::parse_long(parts[1], "grid", 1));
            if (parts[2] != "complete")
                g.end = static_cast<int>(detail::parse_long(parts[2], "grid", 1));
        } catch (const ParseError& e) {
            throw InvalidGrid(e.what());
        }
        if (g.start < 1 || g.step < 1 || (g.end && *g.end < g.start))
            throw InvalidGrid("grid bounds must satisfy 1 <= start <= end, step >= 1");
        return g;
    }

    std::vector<GridLength> expand(int max_sequence_length) const {
        std::vector<GridLength> out;
        const int stop = end ? *end : max_sequence_length;
        for (int l = start; l <= stop; l += step)
            out.push_back(GridLength{l});
        if (!end)
            out.push_back(GridLength{});
        if (out.empty())
            throw InvalidGrid("grid expands to no lengths");
        return out;
    }
};

/// First min(L, T) samples; metadata preserved.
inline TrackSequence truncate(const TrackSequence& seq, std::size_t L) {
    if (L < 1)
        throw InvalidParameter("truncation length must be at least 1");
    TrackSequence out = seq;
    if (L < out.samples.size())
        out.samples.resize(L);
    return out;
}

struct LengthResult {
    GridLength length;
    ConfusionMatrix confusion;
    double accuracy = 0.0;
    std::vector<std::optional<double>> precision, recall;
    std::optional<double> macro_precision, macro_recall;
};

/// Curve summaries for comparing against reference accuracy-vs-length plots:
/// the grid point with the best accuracy, and the first grid point whose
/// accuracy is within 0.02 of the complete-length accuracy.
struct CurveFlags {
    std::optional<GridLength> best_length;
    std::optional<GridLength> saturation_length;
};

struct ModelReport {
    std::string model;
    std::vector<LengthResult> per_length;
    std::map<std::string, Matrix> traces;  // complete-length probability traces per sequence id
    CurveFlags flags;
};

struct EvalReport {
    int schema_version = 1;
    std::vector<std::string> class_names;
    std::vector<GridLength> grid;
    std::vector<ModelReport> models;
};

/// A sequence classifier under evaluation: name plus a callable producing the
/// label and the per-step probability trace for a track.
struct NamedClassifier {
    std::string name;
    std::function<std::pair<int, Matrix>(const TrackSequence&)> fn;
};

struct EvalOptions {
    bool collect_traces = false;
    bool skip_short = false;  // skip sequences shorter than the grid length instead of clamping
};

namespace detail {

inline std::optional<double> macro_mean(const std::vector<std::optional<double>>& v) {
    double sum = 0.0;
    int n = 0;
    for (const auto& x : v)
        if (x) {
            sum += *x;
            ++n;
        }
    if (n == 0)
        return std::nullopt;
    return sum / n;
}

inline CurveFlags curve_flags(const std::vector<LengthResult>& per_length) {
    CurveFlags f;
    if (per_length.empty())
        return f;
    std::size_t best = 0;
    for (std::size_t i = 1; i < per_length.size(); ++i)
        if (per_length[i].accuracy > per_length[best].accuracy)
            best = i;
    f.best_length = per_length[best].length;
    for (const auto& lr : per_length)
        if (lr.length.complete()) {
            const double target = lr.accuracy - 0.02;
            for (const auto& cand : per_length)
                if (cand.accuracy >= target) {
                    f.saturation_length = cand.length;
                    break;
                }
            break;
        }
    return f;
}

}  // namespace detail

/// Runs the truncation protocol for one classifier: every grid length sees
/// every test sequence (clamped to its full length unless skip_short is set),
/// and per-length confusion matrices become accuracy/precision/recall. The
/// per-sequence classifications run in parallel with a fixed reduction order.
inline ModelReport evaluate_model(const NamedClassifier& classifier,
                                  const std::vector<TrackSequence>& test_set,
                                  const std::vector<GridLength>& grid,
                                  Eigen::Index num_classes,
                                  const EvalOptions& opts = {}) {
    if (grid.empty())
        throw InvalidGrid("empty grid");
    if (test_set.empty())
        throw EmptySequence("empty test set");
    ModelReport report;
    report.model = classifier.name;
    for (const auto& gl : grid) {
        std::vector<std::optional<int>> preds(test_set.size());
        std::vector<Matrix> traces(test_set.size());
        const bool want_traces = opts.collect_traces && gl.complete();
        parallel_for(test_set.size(), [&](std::size_t i) {
            const TrackSequence& seq = test_set[i];
            if (!gl.complete()) {
                if (opts.skip_short && seq.length() < static_cast<std::size_t>(*gl.length))
                    return;
                const TrackSequence cut = truncate(seq, static_cast<std::size_t>(*gl.length));
                preds[i] = classifier.fn(cut).first;
            } else {
                auto [label, trace] = classifier.fn(seq);
                preds[i] = label;
                if (want_traces)
                    traces[i] = std::move(trace);
            }
        });
        LengthResult lr;
        lr.length = gl;
        lr.confusion = ConfusionMatrix(num_classes);
        for (std::size_t i = 0; i < test_set.size(); ++i)
            if (preds[i])
                lr.confusion.add(test_set[i].label, *preds[i]);
        if (lr.confusion.total() > 0) {
            const Metrics m = metrics(lr.confusion);
            lr.accuracy = m.accuracy;
            lr.precision = m.precision;
            lr.recall = m.recall;
            lr.macro_precision = detail::macro_mean(m.precision);
            lr.macro_recall = detail::macro_mean(m.recall);
        } else {
            // Everything skipped at this length: metrics stay undefined.
            lr.precision.assign(static_cast<std::size_t>(num_classes), std::nullopt);
            lr.recall.assign(static_cast<std::size_t>(num_classes), std::nullopt);
        }
        if (want_traces)
            for (std::size_t i = 0; i < test_set.size(); ++i)
                report.traces[test_set[i].id] = traces[i];
        report.per_length.push_back(std::move(lr));
    }
    report.flags = detail::curve_flags(report.per_length);
    return report;
}

inline EvalReport evaluate(const NamedClassifier& classifier,
                           const std::vector<TrackSequence>& test_set,
                           const std::vector<GridLength>& grid,
                           const std::vector<std::string>& class_names,
                           const EvalOptions& opts = {}) {
    EvalReport r;
    r.class_names = class_names;
    r.grid = grid;
    r.models.push_back(evaluate_model(classifier, test_set, grid,
                                      static_cast<Eigen::Index>(class_names.size()), opts));
    return r;
}

inline void merge_reports(EvalReport& into, const EvalReport& other) {
    if (into.class_names != other.class_names)
        throw InvalidParameter("reports cover different class sets");
    for (const auto& m : other.models)
        into.models.push_back(m);
}

// ---- JSON serialisation -------------------------------------------------

inline nlohmann::json to_json(const GridLength& g) {
    if (g.complete())
        return "complete";
    return *g.length;
}

inline GridLength grid_length_from_json(const nlohmann::json& j) {
    if (j.is_string()) {
        if (j.get<std::string>() != "complete")
            throw ParseError("bad grid length '" + j.get<std::string>() + "'");
        return GridLength{};
    }
    return GridLength{j.get<int>()};
}

inline nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json j;
    j["schema_version"] = r.schema_version;
    j["class_names"] = r.class_names;
    nlohmann::json grid = nlohmann::json::array();
    for (const auto& g : r.grid)
        grid.push_back(to_json(g));
    j["grid"] = grid;
    nlohmann::json models = nlohmann::json::array();
    for (const auto& m : r.models) {
        nlohmann::json jm;
        jm["name"] = m.model;
        nlohmann::json pls = nlohmann::json::array();
        for (const auto& lr : m.per_length) {
            nlohmann::json jl;
            jl["length"] = to_json(lr.length);
            jl["accuracy"] = lr.accuracy;
            auto opt_array = [](const std::vector<std::optional<double>>& v) {
                nlohmann::json a = nlohmann::json::array();
                for (const auto& x : v)
                    a.push_back(x ? nlohmann::json(*x) : nlohmann::json(nullptr));
                return a;
            };
            jl["precision"] = opt_array(lr.precision);
            jl["recall"] = opt_array(lr.recall);
            jl["macro_precision"] =
                lr.macro_precision ? nlohmann::json(*lr.macro_precision) : nlohmann::json(nullptr);
            jl["macro_recall"] =
                lr.macro_recall ? nlohmann::json(*lr.macro_recall) : nlohmann::json(nullptr);
            nlohmann::json conf = nlohmann::json::array();
            for (Eigen::Index r2 = 0; r2 < lr.confusion.counts.rows(); ++r2) {
                nlohmann::json row = nlohmann::json::array();
                for (Eigen::Index c = 0; c < lr.confusion.counts.cols(); ++c)
                    row.push_back(lr.confusion.counts(r2, c));
                conf.push_back(row);
            }
            jl["confusion"] = conf;
            pls.push_back(jl);
        }
        jm["per_length"] = pls;
        jm["curve_flags"] = {
            {"best_length", m.flags.best_length ? to_json(*m.flags.best_length) : nlohmann::json(nullptr)},
            {"saturation_length",
             m.flags.saturation_length ? to_json(*m.flags.saturation_length) : nlohmann::json(nullptr)},
        };
        nlohmann::json traces = nlohmann::json::object();
        for (const auto& [id, trace] : m.traces) {
            nlohmann::json rows = nlohmann::json::array();
            for (Eigen::Index t = 0; t < trace.rows(); ++t) {
                nlohmann::json row = nlohmann::json::array();
                for (Eigen::Index c = 0; c < trace.cols(); ++c)
                    row.push_back(trace(t, c));
                rows.push_back(row);
            }
            traces[id] = rows;
        }
        jm["traces"] = traces;
        models.push_back(jm);
    }
    j["models"] = models;
    return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
    EvalReport r;
    r.schema_version = j.at("schema_version").get<int>();
    if (r.schema_version != 1)
        throw ParseError("unsupported report schema version");
    r.class_names = j.at("class_names").get<std::vector<std::string>>();
    for (const auto& g : j.at("grid"))
        r.grid.push_back(grid_length_from_json(g));
    for (const auto& jm : j.at("models")) {
        ModelReport m;
        m.model = jm.at("name").get<std::string>();
        for (const auto& jl : jm.at("per_length")) {
            LengthResult lr;
            lr.length = grid_length_from_json(jl.at("length"));
            lr.accuracy = jl.at("accuracy").get<double>();
            auto opt_vec = [](const nlohmann::json& a) {
                std::vector<std::optional<double>> v;
                for (const auto& x : a)
                    v.push_back(x.is_null() ? std::optional<double>() : x.get<double>());
                return v;
            };
            lr.precision = opt_vec(jl.at("precision"));
            lr.recall = opt_vec(jl.at("recall"));
            if (!jl.at("macro_precision").is_null())
                lr.macro_precision = jl.at("macro_precision").get<double>();
            if (!jl.at("macro_recall").is_null())
                lr.macro_recall = jl.at("macro_recall").get<double>();
            const auto& conf = jl.at("confusion");
            const auto C = static_cast<Eigen::Index>(conf.size());
            lr.confusion = ConfusionMatrix(C);
            for (Eigen::Index r2 = 0; r2 < C; ++r2)
                for (Eigen::Index c = 0; c < C; ++c)
                    lr.confusion.counts(r2, c) = conf.at(static_cast<std::size_t>(r2))
                                                     .at(static_cast<std::size_t>(c))
                                                     .get<std::int64_t>();
            m.per_length.push_back(std::move(lr));
        }
        const auto& jf = jm.at("curve_flags");
        if (!jf.at("best_length").is_null())
            m.flags.best_length = grid_length_from_json(jf.at("best_length"));
        if (!jf.at("saturation_length").is_null())
            m.flags.saturation_length = grid_length_from_json(jf.at("saturation_length"));
        for (const auto& [id, rows] : jm.at("traces").items()) {
            const auto T = static_cast<Eigen::Index>(rows.size());
            const auto C = T > 0 ? static_cast<Eigen::Index>(rows.at(0).size()) : 0;
            Matrix trace(T, C);
            for (Eigen::Index t = 0; t < T; ++t)
                for (Eigen::Index c = 0; c < C; ++c)
                    trace(t, c) = rows.at(static_cast<std::size_t>(t))
                                      .at(static_cast<std::size_t>(c))
                                      .get<double>();
            m.traces[id] = std::move(trace);
        }
        r.models.push_back(std::move(m));
    }
    return r;
}

inline bool operator==(const EvalReport& a, const EvalReport& b) {
    return to_json(a) == to_json(b);
}

// ---- CSV emission -------------------------------------------------------

namespace detail {

inline std::string opt_cell(const std::optional<double>& v) {
    return v ? format_double(*v) : std::string();
}

}  // namespace detail

/// Writes the plot-ready CSV set plus report.json. Fails on an empty grid
/// before touching the directory.
inline void emit_report(const EvalReport& r, const std::filesystem::path& dir) {
    if (r.grid.empty())
        throw InvalidGrid("cannot emit a report with an empty grid");
    for (std::size_t i = 1; i < r.grid.size(); ++i) {
        if (r.grid[i].complete())
            continue;
        if (r.grid[i - 1].complete() || *r.grid[i - 1].length >= *r.grid[i].length)
            throw InvalidGrid("grid must be ascending with complete last");
    }
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec)
        throw IoError("cannot create report directory " + dir.string());

    auto open = [&](const fs::path& p) {
        std::ofstream out(p, std::ios::binary);
        if (!out)
            throw IoError("cannot write " + p.string());
        return out;
    };

    {
        auto out = open(dir / "accuracy.csv");
        out << "length,model,accuracy\n";
        for (const auto& m : r.models)
            for (const auto& lr : m.per_length)
                out << lr.length.str() << ',' << m.model << ',' << detail::format_double(lr.accuracy)
                    << "\n";
    }
    for (const char* which : {"precision", "recall"}) {
        auto out = open(dir / (std::string(which) + ".csv"));
        out << "length,model,class,value\n";
        for (const auto& m : r.models)
            for (const auto& lr : m.per_length) {
                const auto& vals = std::string(which) == "precision" ? lr.precision : lr.recall;
                for (std::size_t c = 0; c < vals.size(); ++c)
                    out << lr.length.str() << ',' << m.model << ',' << r.class_names[c] << ','
                        << detail::opt_cell(vals[c]) << "\n";
            }
    }
    for (const auto& m : r.models)
        for (const auto& lr : m.per_length) {
            auto out = open(dir / ("confusion_" + m.model + "_" + lr.length.str() + ".csv"));
            for (Eigen::Index r2 = 0; r2 < lr.confusion.counts.rows(); ++r2) {
                for (Eigen::Index c = 0; c < lr.confusion.counts.cols(); ++c)
                    out << (c ? "," : "") << lr.confusion.counts(r2, c);
                out << "\n";
            }
        }
    bool any_traces = false;
    for (const auto& m : r.models)
        any_traces = any_traces || !m.traces.empty();
    if (any_traces) {
        fs::create_directories(dir / "traces", ec);
        for (const auto& m : r.models)
            for (const auto& [id, trace] : m.traces) {
                auto out = open(dir / "traces" / (m.model + "__" + id + ".csv"));
                out << "t";
                for (const auto& cn : r.class_names)
                    out << ',' << cn;
                out << "\n";
                for (Eigen::Index t = 0; t < trace.rows(); ++t) {
                    out << t;
                    for (Eigen::Index c = 0; c < trace.cols(); ++c)
                        out << ',' << detail::format_double(trace(t, c));
                    out << "\n";
                }
            }
    }
    {
        auto out = open(dir / "report.json");
        out << to_json(r).dump(2) << "\n";
    }
}

inline EvalReport load_report(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw MissingFile("cannot open report " + path.string());
    nlohmann::json j;
    in >> j;
    return report_from_json(j);
}

}  // namespace switchbench
