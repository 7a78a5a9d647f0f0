#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "switchbench/dataset.hpp"
#include "switchbench/lstm.hpp"

namespace switchbench {

/// A versioned line-oriented parameter file: `str`/`int` scalars and named
/// `vec`/`mat` tensors with explicit shapes, values row-major, doubles in
/// shortest round-trip form. Entry order is preserved, so identical inputs
/// serialise byte-identically.
struct ParamFile {
    int version = 1;
    std::string kind;
    std::vector<std::pair<std::string, std::string>> strings;
    std::vector<std::pair<std::string, long>> ints;
    std::vector<std::pair<std::string, Matrix>> tensors;  // vectors stored as n x 1

    void add_string(const std::string& name, const std::string& v) { strings.emplace_back(name, v); }
    void add_int(const std::string& name, long v) { ints.emplace_back(name, v); }
    void add_matrix(const std::string& name, const Matrix& m) { tensors.emplace_back(name, m); }
    void add_vector(const std::string& name, const Vector& v) { tensors.emplace_back(name, v); }

    const std::string& get_string(const std::string& name) const {
        for (const auto& [k, v] : strings)
            if (k == name)
                return v;
        throw ParseError("missing string field '" + name + "'");
    }
    long get_int(const std::string& name) const {
        for (const auto& [k, v] : ints)
            if (k == name)
                return v;
        throw ParseError("missing int field '" + name + "'");
    }
    const Matrix& get_tensor(const std::string& name) const {
        for (const auto& [k, v] : tensors)
            if (k == name)
                return v;
        throw ParseError("missing tensor '" + name + "'");
    }
    Matrix get_matrix(const std::string& name, Eigen::Index rows, Eigen::Index cols) const {
        const Matrix& m = get_tensor(name);
        if (m.rows() != rows || m.cols() != cols)
            throw ParseError("tensor '" + name + "' has unexpected shape");
        return m;
    }
    Vector get_vector(const std::string& name, Eigen::Index size) const {
        return get_matrix(name, size, 1).col(0);
    }
};

inline constexpr const char* kParamMagic = "switchbench-params";
inline constexpr int kParamVersion = 1;

inline void write_param_file(const std::filesystem::path& path, const ParamFile& f) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw IoError("cannot write " + path.string());
    out << kParamMagic << ' ' << kParamVersion << "\n";
    out << "kind " << f.kind << "\n";
    for (const auto& [k, v] : f.strings)
        out << "str " << k << ' ' << v << "\n";
    for (const auto& [k, v] : f.ints)
        out << "int " << k << ' ' << v << "\n";
    for (const auto& [k, m] : f.tensors) {
        const bool is_vec = m.cols() == 1;
        if (is_vec)
            out << "vec " << k << ' ' << m.rows() << "\n";
        else
            out << "mat " << k << ' ' << m.rows() << ' ' << m.cols() << "\n";
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            for (Eigen::Index c = 0; c < m.cols(); ++c)
                out << (c ? " " : "") << detail::format_double(m(r, c));
            out << "\n";
        }
    }
    if (!out)
        throw IoError("write failed for " + path.string());
}

inline ParamFile read_param_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw MissingFile("cannot open model file " + path.string());
    const std::string where = path.filename().string();
    std::string line;
    std::size_t lineno = 0;
    auto next_line = [&]() {
        if (!std::getline(in, line))
            throw ParseError(where + ": unexpected end of file at line " + std::to_string(lineno));
        ++lineno;
        line = detail::strip_cr(line);
    };

    next_line();
    {
        std::istringstream head(line);
        std::string magic;
        int version = 0;
        head >> magic >> version;
        if (magic != kParamMagic)
            throw ParseError(where + ": not a parameter file (bad magic)");
        if (version != kParamVersion)
            throw ParseError(where + ": unsupported version " + std::to_string(version));
    }
    ParamFile f;
    f.version = kParamVersion;
    while (std::getline(in, line)) {
        ++lineno;
        line = detail::strip_cr(line);
        if (line.empty())
            continue;
        std::istringstream ls(line);
        std::string tag, name;
        ls >> tag >> name;
        if (tag == "kind") {
            f.kind = name;
        } else if (tag == "str") {
            std::string rest;
            std::getline(ls, rest);
            if (!rest.empty() && rest.front() == ' ')
                rest.erase(rest.begin());
            f.add_string(name, rest);
        } else if (tag == "int") {
            long v = 0;
            if (!(ls >> v))
                throw ParseError(where + " line " + std::to_string(lineno) + ": bad int entry");
            f.add_int(name, v);
        } else if (tag == "vec" || tag == "mat") {
            Eigen::Index rows = 0, cols = 1;
            if (!(ls >> rows))
                throw ParseError(where + " line " + std::to_string(lineno) + ": bad tensor header");
            if (tag == "mat" && !(ls >> cols))
                throw ParseError(where + " line " + std::to_string(lineno) + ": bad tensor header");
            if (rows < 0 || cols < 1)
                throw ParseError(where + " line " + std::to_string(lineno) + ": bad tensor shape");
            Matrix m(rows, cols);
            for (Eigen::Index r = 0; r < rows; ++r) {
                next_line();
                const auto cells = detail::split(line, ' ');
                if (static_cast<Eigen::Index>(cells.size()) != cols)
                    throw ParseError(where + " line " + std::to_string(lineno) +
                                     ": expected " + std::to_string(cols) + " values");
                for (Eigen::Index c = 0; c < cols; ++c)
                    m(r, c) = detail::parse_double(cells[static_cast<std::size_t>(c)], where, lineno);
            }
            f.tensors.emplace_back(name, std::move(m));
        } else {
            throw ParseError(where + " line " + std::to_string(lineno) + ": unknown tag '" + tag + "'");
        }
    }
    if (f.kind.empty())
        throw ParseError(where + ": missing kind line");
    return f;
}

inline std::string join_names(const std::vector<std::string>& names) {
    std::string out;
    for (std::size_t i = 0; i < names.size(); ++i)
        out += (i ? "," : "") + names[i];
    return out;
}

inline void save_slds(const std::filesystem::path& path, const SldsParams& p) {
    ParamFile f;
    f.kind = "slds";
    f.add_string("class_names", join_names(p.state_names));
    f.add_int("num_states", static_cast<long>(p.num_states()));
    f.add_int("state_dim", static_cast<long>(p.state_dim()));
    f.add_int("obs_dim", static_cast<long>(p.obs_dim()));
    f.add_matrix("switch_trans", p.switch_trans);
    f.add_vector("switch_prior", p.switch_prior);
    for (Eigen::Index i = 0; i < p.num_states(); ++i) {
        const std::string pre = "state." + std::to_string(i) + ".";
        const LdsParams& s = p.states[static_cast<std::size_t>(i)];
        f.add_matrix(pre + "A", s.A);
        f.add_matrix(pre + "B", s.B);
        f.add_matrix(pre + "sigma_h", s.sigma_h);
        f.add_matrix(pre + "sigma_v", s.sigma_v);
        f.add_vector(pre + "prior_mean", s.prior.mean());
        f.add_matrix(pre + "prior_cov", s.prior.cov());
    }
    write_param_file(path, f);
}

inline SldsParams load_slds_from(const ParamFile& f) {
    if (f.kind != "slds")
        throw ParseError("expected an slds parameter file, found kind '" + f.kind + "'");
    const auto S = static_cast<Eigen::Index>(f.get_int("num_states"));
    const auto n = static_cast<Eigen::Index>(f.get_int("state_dim"));
    const auto m = static_cast<Eigen::Index>(f.get_int("obs_dim"));
    std::vector<LdsParams> states;
    states.reserve(static_cast<std::size_t>(S));
    for (Eigen::Index i = 0; i < S; ++i) {
        const std::string pre = "state." + std::to_string(i) + ".";
        states.emplace_back(f.get_matrix(pre + "A", n, n), f.get_matrix(pre + "B", m, n),
                            f.get_matrix(pre + "sigma_h", n, n), f.get_matrix(pre + "sigma_v", m, m),
                            Gaussian(f.get_vector(pre + "prior_mean", n),
                                     f.get_matrix(pre + "prior_cov", n, n)));
    }
    return SldsParams(std::move(states), f.get_matrix("switch_trans", S, S),
                      f.get_vector("switch_prior", S),
                      detail::split(f.get_string("class_names"), ','));
}

inline SldsParams load_slds(const std::filesystem::path& path) {
    return load_slds_from(read_param_file(path));
}

/// A trained RNN classifier with the feature standardisation it was trained
/// under.
struct RnnModel {
    LstmStack stack;
    FeatureTransform transform;
    std::vector<std::string> class_names;
};

inline void save_rnn(const std::filesystem::path& path, const RnnModel& model) {
    ParamFile f;
    f.kind = "rnn";
    f.add_string("class_names", join_names(model.class_names));
    f.add_int("input_dim", static_cast<long>(model.stack.input_dim()));
    f.add_int("hidden_size", static_cast<long>(model.stack.hidden_size()));
    f.add_int("num_classes", static_cast<long>(model.stack.num_classes()));
    f.add_int("num_layers", static_cast<long>(model.stack.num_layers()));
    f.add_vector("feature_mean", model.transform.mean);
    f.add_vector("feature_std", model.transform.std);
    for (Eigen::Index l = 0; l < model.stack.num_layers(); ++l) {
        const auto& layer = model.stack.layers[static_cast<std::size_t>(l)];
        for (int d = 0; d < 2; ++d) {
            const LstmCellParams& cell = d == 0 ? layer.forward : layer.backward;
            const std::string pre =
                "layer." + std::to_string(l) + (d == 0 ? ".fwd." : ".bwd.");
            f.add_matrix(pre + "W_i", cell.W_i);
            f.add_matrix(pre + "W_f", cell.W_f);
            f.add_matrix(pre + "W_o", cell.W_o);
            f.add_matrix(pre + "W_g", cell.W_g);
            f.add_matrix(pre + "U_i", cell.U_i);
            f.add_matrix(pre + "U_f", cell.U_f);
            f.add_matrix(pre + "U_o", cell.U_o);
            f.add_matrix(pre + "U_g", cell.U_g);
            f.add_vector(pre + "b_i", cell.b_i);
            f.add_vector(pre + "b_f", cell.b_f);
            f.add_vector(pre + "b_o", cell.b_o);
            f.add_vector(pre + "b_g", cell.b_g);
        }
    }
    f.add_matrix("head_W", model.stack.head_W);
    f.add_vector("head_b", model.stack.head_b);
    write_param_file(path, f);
}

inline RnnModel load_rnn_from(const ParamFile& f) {
    if (f.kind != "rnn")
        throw ParseError("expected an rnn parameter file, found kind '" + f.kind + "'");
    const auto input_dim = static_cast<Eigen::Index>(f.get_int("input_dim"));
    const auto hidden = static_cast<Eigen::Index>(f.get_int("hidden_size"));
    const auto classes = static_cast<Eigen::Index>(f.get_int("num_classes"));
    const auto layers = static_cast<Eigen::Index>(f.get_int("num_layers"));
    RnnModel model;
    model.stack = LstmStack::zeros(input_dim, hidden, classes, layers);
    model.class_names = detail::split(f.get_string("class_names"), ',');
    model.transform.mean = f.get_vector("feature_mean", input_dim);
    model.transform.std = f.get_vector("feature_std", input_dim);
    for (Eigen::Index l = 0; l < layers; ++l) {
        const Eigen::Index in = l == 0 ? input_dim : 2 * hidden;
        auto& layer = model.stack.layers[static_cast<std::size_t>(l)];
        for (int d = 0; d < 2; ++d) {
            LstmCellParams& cell = d == 0 ? layer.forward : layer.backward;
            const std::string pre =
                "layer." + std::to_string(l) + (d == 0 ? ".fwd." : ".bwd.");
            cell.W_i = f.get_matrix(pre + "W_i", hidden, in);
            cell.W_f = f.get_matrix(pre + "W_f", hidden, in);
            cell.W_o = f.get_matrix(pre + "W_o", hidden, in);
            cell.W_g = f.get_matrix(pre + "W_g", hidden, in);
            cell.U_i = f.get_matrix(pre + "U_i", hidden, hidden);
            cell.U_f = f.get_matrix(pre + "U_f", hidden, hidden);
            cell.U_o = f.get_matrix(pre + "U_o", hidden, hidden);
            cell.U_g = f.get_matrix(pre + "U_g", hidden, hidden);
            cell.b_i = f.get_vector(pre + "b_i", hidden);
            cell.b_f = f.get_vector(pre + "b_f", hidden);
            cell.b_o = f.get_vector(pre + "b_o", hidden);
            cell.b_g = f.get_vector(pre + "b_g", hidden);
        }
    }
    model.stack.head_W = f.get_matrix("head_W", classes, 2 * hidden);
    model.stack.head_b = f.get_vector("head_b", classes);
    return model;
}

inline RnnModel load_rnn(const std::filesystem::path& path) {
    return load_rnn_from(read_param_file(path));
}

}  // namespace switchbench
