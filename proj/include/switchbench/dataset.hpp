#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "switchbench/slds.hpp"

namespace switchbench {

inline const std::vector<std::string>& default_class_names() {
    static const std::vector<std::string> names = {"BendingIn", "Crossing", "Starting", "Stopping"};
    return names;
}

struct TrackSample {
    long frame = 0;
    double x = 0.0;
    double z = 0.0;
};

/// A labelled planar track: strictly increasing frame indices with (x, z)
/// coordinates in metres.
struct TrackSequence {
    std::string id;
    int label = 0;
    std::vector<TrackSample> samples;

    std::size_t length() const { return samples.size(); }
};

struct DatasetManifest {
    std::vector<std::string> train;  // paths relative to base_dir
    std::vector<std::string> test;
    std::vector<std::string> class_names;
    std::filesystem::path base_dir;
};

namespace detail {

/// Shortest round-trip decimal formatting; the reason canonical files reload
/// and rewrite byte-identically.
inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s, const std::string& where, std::size_t line) {
    double v = 0.0;
    const char* begin = s.data();
    const char* end = s.data() + s.size();
    const auto res = std::from_chars(begin, end, v);
    if (res.ec != std::errc() || res.ptr != end)
        throw ParseError(where + " line " + std::to_string(line) + ": bad number '" + s + "'");
    return v;
}

inline long parse_long(const std::string& s, const std::string& where, std::size_t line) {
    long v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw ParseError(where + " line " + std::to_string(line) + ": bad integer '" + s + "'");
    return v;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        if (ch == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

inline std::string strip_cr(std::string s) {
    if (!s.empty() && s.back() == '\r')
        s.pop_back();
    return s;
}

inline int class_index(const std::string& name, const std::vector<std::string>& class_names) {
    for (std::size_t i = 0; i < class_names.size(); ++i)
        if (class_names[i] == name)
            return static_cast<int>(i);
    throw UnknownLabel("'" + name + "' is not a known class");
}

}  // namespace detail

/// Reads one track CSV: a `# label=<ClassName>` comment, a `frame,x,z`
/// header, then one row per sample.
inline TrackSequence load_sequence(const std::filesystem::path& path,
                                   const std::vector<std::string>& class_names = default_class_names()) {
    std::ifstream in(path);
    if (!in)
        throw MissingFile("cannot open sequence file " + path.string());
    const std::string where = path.filename().string();
    TrackSequence seq;
    seq.id = path.stem().string();

    std::string line;
    std::size_t lineno = 0;
    std::optional<int> label;
    bool header_seen = false;
    while (std::getline(in, line)) {
        ++lineno;
        line = detail::strip_cr(line);
        if (line.empty())
            continue;
        if (line[0] == '#') {
            const auto eq = line.find("label=");
            if (eq != std::string::npos)
                label = detail::class_index(line.substr(eq + 6), class_names);
            continue;
        }
        if (!header_seen) {
            if (line != "frame,x,z")
                throw ParseError(where + " line " + std::to_string(lineno) +
                                 ": expected header 'frame,x,z', got '" + line + "'");
            header_seen = true;
            continue;
        }
        const auto cells = detail::split(line, ',');
        if (cells.size() != 3)
            throw ParseError(where + " line " + std::to_string(lineno) + ": expected 3 columns");
        TrackSample s;
        s.frame = detail::parse_long(cells[0], where, lineno);
        s.x = detail::parse_double(cells[1], where, lineno);
        s.z = detail::parse_double(cells[2], where, lineno);
        if (!std::isfinite(s.x) || !std::isfinite(s.z))
            throw ParseError(where + " line " + std::to_string(lineno) + ": non-finite coordinate");
        if (!seq.samples.empty() && s.frame <= seq.samples.back().frame)
            throw NonMonotoneFrames(where + " line " + std::to_string(lineno) +
                                    ": frames must be strictly increasing");
        seq.samples.push_back(s);
    }
    if (!label)
        throw ParseError(where + ": missing '# label=' line");
    if (seq.samples.size() < 2)
        throw ParseError(where + ": a track needs at least 2 samples");
    seq.label = *label;
    return seq;
}

inline void write_sequence(const std::filesystem::path& path, const TrackSequence& seq,
                           const std::vector<std::string>& class_names = default_class_names()) {
    if (seq.label < 0 || seq.label >= static_cast<int>(class_names.size()))
        throw InvalidLabel("label index out of range");
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw IoError("cannot write " + path.string());
    out << "# label=" << class_names[static_cast<std::size_t>(seq.label)] << "\n";
    out << "frame,x,z\n";
    for (const auto& s : seq.samples)
        out << s.frame << ',' << detail::format_double(s.x) << ',' << detail::format_double(s.z)
            << "\n";
    if (!out)
        throw IoError("write failed for " + path.string());
}

/// Line-oriented manifest: a `classes=` key, then `[train]` / `[test]`
/// sections with one relative path per line.
inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw MissingFile("cannot open manifest " + path.string());
    const std::string where = path.filename().string();
    DatasetManifest m;
    m.base_dir = path.parent_path();

    std::string line;
    std::size_t lineno = 0;
    int section = -1;  // 0 train, 1 test
    while (std::getline(in, line)) {
        ++lineno;
        line = detail::strip_cr(line);
        if (line.empty() || line[0] == '#')
            continue;
        if (line.rfind("classes=", 0) == 0) {
            m.class_names = detail::split(line.substr(8), ',');
            continue;
        }
        if (line == "[train]") {
            section = 0;
            continue;
        }
        if (line == "[test]") {
            section = 1;
            continue;
        }
        if (line[0] == '[')
            throw ParseError(where + " line " + std::to_string(lineno) + ": unknown section " + line);
        if (section < 0)
            throw ParseError(where + " line " + std::to_string(lineno) + ": path before any section");
        (section == 0 ? m.train : m.test).push_back(line);
    }
    if (m.class_names.empty())
        throw ParseError(where + ": missing classes= line");
    if (m.train.empty())
        throw ParseError(where + ": train split empty");

    std::vector<std::string> all = m.train;
    all.insert(all.end(), m.test.begin(), m.test.end());
    std::sort(all.begin(), all.end());
    const auto dup = std::adjacent_find(all.begin(), all.end());
    if (dup != all.end())
        throw DuplicatePath("path listed twice: " + *dup);
    for (const auto& rel : all)
        if (!std::filesystem::exists(m.base_dir / rel))
            throw MissingFile("manifest entry not found: " + (m.base_dir / rel).string());
    return m;
}

struct Dataset {
    std::vector<TrackSequence> train;
    std::vector<TrackSequence> test;
    std::vector<std::string> class_names;
};

inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
    const DatasetManifest m = load_manifest(manifest_path);
    Dataset d;
    d.class_names = m.class_names;
    for (const auto& rel : m.train)
        d.train.push_back(load_sequence(m.base_dir / rel, m.class_names));
    for (const auto& rel : m.test)
        d.test.push_back(load_sequence(m.base_dir / rel, m.class_names));
    return d;
}

inline std::vector<Vector> to_observations(const TrackSequence& seq) {
    std::vector<Vector> obs;
    obs.reserve(seq.samples.size());
    for (const auto& s : seq.samples) {
        Vector v(2);
        v << s.x, s.z;
        obs.push_back(std::move(v));
    }
    return obs;
}

/// Per-class generator dynamics: a constant-acceleration state prior plus
/// per-axis process noise intensities and the observation noise variance.
struct ClassDynamics {
    std::string name;
    Vector init_mean;           // [x, z, vx, vz, ax, az]
    Vector init_std;            // per-component prior standard deviation
    double accel_noise_x = 1e-6;
    double accel_noise_z = 1e-6;
    double obs_noise = 0.01;    // variance per coordinate
    int len_min = 60;
    int len_max = 220;
};

struct SynthSpec {
    std::vector<ClassDynamics> classes;
    int train_per_class = 10;
    int test_per_class = 8;
    double dt = 1.0;
    std::uint64_t seed = 0;

    /// The default four-behaviour spec. Classes differ in their initial
    /// velocity regime (the short-window signal) and in an axis-patterned
    /// velocity meander (none / lateral / both axes / longitudinal) that a
    /// mismatched smooth model cannot track, which keeps long sequences
    /// discriminable. Starting sequences run shorter.
    static SynthSpec default_spec(std::uint64_t seed) {
        SynthSpec s;
        s.seed = seed;
        auto mk = [](const std::string& name, double vx, double vz, double ax, double az,
                     double qx, double qz, int lo, int hi) {
            ClassDynamics c;
            c.name = name;
            c.init_mean = Vector::Zero(6);
            c.init_mean << 0.0, 14.0, vx, vz, ax, az;
            c.init_std = Vector::Zero(6);
            c.init_std << 1.0, 1.0, 0.01, 0.01, 0.0001, 0.0001;
            c.accel_noise_x = qx;
            c.accel_noise_z = qz;
            c.obs_noise = 1e-6;
            c.len_min = lo;
            c.len_max = hi;
            return c;
        };
        s.classes = {
            mk("BendingIn", 0.02, 0.10, 0.0, 0.0, 6e-5, 1e-12, 60, 220),
            mk("Crossing", 0.12, 0.01, 0.0, 0.0, 1e-12, 1e-12, 60, 220),
            mk("Starting", 0.01, 0.005, 0.001, 0.0025, 6e-5, 6e-5, 30, 80),
            mk("Stopping", 0.01, -0.11, 0.0, 0.0005, 1e-12, 6e-5, 60, 220),
        };
        return s;
    }
};

struct SynthResult {
    std::vector<TrackSequence> train;
    std::vector<TrackSequence> test;
    std::vector<std::string> class_names;
    std::vector<SldsParams> ground_truth;  // single element: the generating model
};

namespace detail {

/// Per-class generator model. Process noise enters as white acceleration
/// pulses (coupling into position and velocity only), so the jitter changes
/// fast enough that a mismatched smooth model cannot track it, while the
/// accumulated wander stays bounded over the sequence lengths used here.
inline LdsParams class_lds(const ClassDynamics& c, double dt) {
    LdsParams base = constant_acceleration_model(dt, 1.0, c.obs_noise);
    Matrix Q = Matrix::Zero(6, 6);
    for (int axis = 0; axis < 2; ++axis) {
        Vector g = Vector::Zero(6);
        g[axis] = 0.5 * dt * dt;
        g[2 + axis] = dt;
        Q += (axis == 0 ? c.accel_noise_x : c.accel_noise_z) * g * g.transpose();
    }
    Gaussian prior(c.init_mean, c.init_std.array().square().matrix().asDiagonal());
    return LdsParams(base.A, base.B, std::move(Q), base.sigma_v, std::move(prior));
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b,
                              std::uint64_t c) {
    std::uint64_t x = seed ^ (a * 0x9e3779b97f4a7c15ull) ^ (b * 0xbf58476d1ce4e5b9ull) ^
                      (c * 0x94d049bb133111ebull);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return x;
}

inline std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char ch) { return std::tolower(ch); });
    return s;
}

}  // namespace detail

/// Generates the labelled synthetic dataset. Every sequence is drawn from its
/// class's dynamics with the switch path pinned to that class, via the
/// single-state SLDS sampler. Deterministic per seed regardless of order.
inline SynthResult synthesize(const SynthSpec& spec) {
    if (spec.classes.empty())
        throw InvalidSpec("at least one class is required");
    if (spec.train_per_class < 1 || spec.test_per_class < 1)
        throw InvalidSpec("per-class counts must be at least 1");
    for (const auto& c : spec.classes)
        if (c.len_min < 2 || c.len_min > c.len_max)
            throw InvalidSpec("length bounds invalid for class " + c.name);

    SynthResult out;
    std::vector<LdsParams> class_models;
    for (const auto& c : spec.classes) {
        out.class_names.push_back(c.name);
        class_models.push_back(detail::class_lds(c, spec.dt));
    }

    for (int split = 0; split < 2; ++split) {
        const int count = split == 0 ? spec.train_per_class : spec.test_per_class;
        auto& sink = split == 0 ? out.train : out.test;
        for (std::size_t cls = 0; cls < spec.classes.size(); ++cls) {
            const auto& cd = spec.classes[cls];
            SldsParams single({class_models[cls]}, Matrix::Ones(1, 1), Vector::Ones(1), {cd.name});
            for (int k = 0; k < count; ++k) {
                const std::uint64_t seq_seed =
                    detail::mix_seed(spec.seed, static_cast<std::uint64_t>(split),
                                     static_cast<std::uint64_t>(cls), static_cast<std::uint64_t>(k));
                std::mt19937_64 len_rng(seq_seed);
                std::uniform_int_distribution<int> len_dist(cd.len_min, cd.len_max);
                const int T = len_dist(len_rng);
                const SldsSample draw = sample(single, static_cast<std::size_t>(T), seq_seed + 1);

                TrackSequence seq;
                char idx[16];
                std::snprintf(idx, sizeof(idx), "%02d", k);
                seq.id = std::string(split == 0 ? "train_" : "test_") + detail::lower(cd.name) + "_" + idx;
                seq.label = static_cast<int>(cls);
                seq.samples.reserve(static_cast<std::size_t>(T));
                for (int t = 0; t < T; ++t)
                    seq.samples.push_back({t, draw.observations[static_cast<std::size_t>(t)][0],
                                           draw.observations[static_cast<std::size_t>(t)][1]});
                sink.push_back(std::move(seq));
            }
        }
    }

    // The generating model doubles as the classification ground truth: the
    // same stay-heavy transition structure the evaluation protocol uses.
    const auto S = static_cast<Eigen::Index>(spec.classes.size());
    Matrix trans(S, S);
    const double stay = 0.97;
    const double off = S > 1 ? (1.0 - stay) / static_cast<double>(S - 1) : 0.0;
    for (Eigen::Index i = 0; i < S; ++i)
        for (Eigen::Index j = 0; j < S; ++j)
            trans(i, j) = i == j ? (S > 1 ? stay : 1.0) : off;
    out.ground_truth.push_back(SldsParams(class_models, trans,
                                          Vector::Constant(S, 1.0 / static_cast<double>(S)),
                                          out.class_names));
    return out;
}

/// Writes a synthetic dataset as a manifest plus one CSV per sequence under
/// train/ and test/. Returns the manifest path.
inline std::filesystem::path write_dataset(const SynthResult& ds, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir / "train", ec);
    fs::create_directories(dir / "test", ec);
    if (ec)
        throw IoError("cannot create dataset directories under " + dir.string());

    std::ofstream manifest(dir / "manifest.txt", std::ios::binary);
    if (!manifest)
        throw IoError("cannot write manifest in " + dir.string());
    manifest << "classes=";
    for (std::size_t i = 0; i < ds.class_names.size(); ++i)
        manifest << (i ? "," : "") << ds.class_names[i];
    manifest << "\n[train]\n";
    for (const auto& seq : ds.train) {
        const std::string rel = "train/" + seq.id + ".csv";
        write_sequence(dir / rel, seq, ds.class_names);
        manifest << rel << "\n";
    }
    manifest << "[test]\n";
    for (const auto& seq : ds.test) {
        const std::string rel = "test/" + seq.id + ".csv";
        write_sequence(dir / rel, seq, ds.class_names);
        manifest << rel << "\n";
    }
    manifest.close();
    return dir / "manifest.txt";
}

/// Per-coordinate affine standardisation fitted on the training split only.
struct FeatureTransform {
    Vector mean;  // size 2
    Vector std;   // size 2, floored at 1e-6

    Vector apply(const Vector& v) const { return ((v - mean).array() / std.array()).matrix(); }
    Vector invert(const Vector& v) const { return (v.array() * std.array() + mean.array()).matrix(); }
};

inline FeatureTransform standardize(const std::vector<TrackSequence>& train) {
    if (train.empty())
        throw EmptySequence("cannot standardise an empty training set");
    Vector sum = Vector::Zero(2), sumsq = Vector::Zero(2);
    double n = 0.0;
    for (const auto& seq : train)
        for (const auto& s : seq.samples) {
            Vector v(2);
            v << s.x, s.z;
            sum += v;
            sumsq += v.array().square().matrix();
            n += 1.0;
        }
    FeatureTransform t;
    t.mean = sum / n;
    const Vector var = (sumsq / n - t.mean.array().square().matrix()).array().max(0.0).matrix();
    t.std = var.array().sqrt().max(1e-6).matrix();
    return t;
}

inline std::vector<Vector> to_features(const TrackSequence& seq, const FeatureTransform& t) {
    std::vector<Vector> out;
    out.reserve(seq.samples.size());
    for (const auto& s : seq.samples) {
        Vector v(2);
        v << s.x, s.z;
        out.push_back(t.apply(v));
    }
    return out;
}

}  // namespace switchbench
