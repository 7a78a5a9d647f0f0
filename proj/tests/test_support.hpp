// Shared test-only helpers: random model generators, the brute-force
// joint-Gaussian oracle for Kalman filtering/smoothing, a central finite
// difference gradient checker, and a subprocess harness for the CLI binary.
#pragma once

#include <array>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <sys/wait.h>
#include <unistd.h>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <switchbench/switchbench.hpp>

namespace testsupport {

using namespace switchbench;

inline std::mt19937_64 make_rng(std::uint64_t seed) { return std::mt19937_64(seed); }

inline Matrix random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c,
                            double scale = 1.0) {
    std::normal_distribution<double> n01(0.0, 1.0);
    Matrix m(r, c);
    for (Eigen::Index j = 0; j < c; ++j)
        for (Eigen::Index i = 0; i < r; ++i)
            m(i, j) = scale * n01(rng);
    return m;
}

inline Vector random_vector(std::mt19937_64& rng, Eigen::Index n, double scale = 1.0) {
    return random_matrix(rng, n, 1, scale).col(0);
}

inline Matrix random_psd(std::mt19937_64& rng, Eigen::Index d, double scale = 1.0,
                         double ridge = 0.1) {
    const Matrix r = random_matrix(rng, d, d, scale);
    return r * r.transpose() + ridge * Matrix::Identity(d, d);
}

inline Gaussian random_gaussian(std::mt19937_64& rng, Eigen::Index d, double scale = 1.0) {
    return Gaussian(random_vector(rng, d, scale), random_psd(rng, d, scale));
}

/// A stable random LDS: the state matrix is scaled to spectral radius ~0.9.
inline LdsParams random_lds(std::mt19937_64& rng, Eigen::Index n, Eigen::Index m) {
    Matrix A = random_matrix(rng, n, n, 1.0);
    const double radius = A.eigenvalues().cwiseAbs().maxCoeff();
    if (radius > 1e-8)
        A *= 0.9 / radius;
    Matrix B = random_matrix(rng, m, n, 1.0);
    Matrix Q = random_psd(rng, n, 0.5, 0.05);
    Matrix R = random_psd(rng, m, 0.5, 0.05);
    return LdsParams(std::move(A), std::move(B), std::move(Q), std::move(R),
                     random_gaussian(rng, n, 1.0));
}

inline SldsParams random_slds(std::mt19937_64& rng, Eigen::Index S, Eigen::Index n,
                              Eigen::Index m) {
    std::vector<LdsParams> states;
    for (Eigen::Index s = 0; s < S; ++s)
        states.push_back(random_lds(rng, n, m));
    Matrix trans(S, S);
    std::uniform_real_distribution<double> u(0.1, 1.0);
    for (Eigen::Index i = 0; i < S; ++i) {
        for (Eigen::Index j = 0; j < S; ++j)
            trans(i, j) = u(rng);
        trans.row(i) /= trans.row(i).sum();
    }
    Vector prior(S);
    for (Eigen::Index i = 0; i < S; ++i)
        prior[i] = u(rng);
    prior /= prior.sum();
    return SldsParams(std::move(states), std::move(trans), std::move(prior));
}

/// The joint Gaussian over (h_1..h_T, v_1..v_T) implied by an LDS; the
/// brute-force oracle everything Kalman-shaped is checked against.
struct LdsJoint {
    Gaussian joint;
    Eigen::Index n, m, T;

    Eigen::Index h_index(Eigen::Index t, Eigen::Index i) const { return t * n + i; }
    Eigen::Index v_index(Eigen::Index t, Eigen::Index i) const { return T * n + t * m + i; }
};

inline LdsJoint build_lds_joint(const LdsParams& p, Eigen::Index T) {
    const Eigen::Index n = p.state_dim(), m = p.obs_dim();
    const Eigen::Index dim = T * (n + m);

    std::vector<Vector> h_mean(static_cast<std::size_t>(T));
    h_mean[0] = p.prior.mean();
    for (Eigen::Index t = 1; t < T; ++t)
        h_mean[static_cast<std::size_t>(t)] = p.A * h_mean[static_cast<std::size_t>(t - 1)];

    // Cov(h_t, h_tau) for t >= tau by propagating columns forward.
    std::vector<std::vector<Matrix>> hh(static_cast<std::size_t>(T),
                                        std::vector<Matrix>(static_cast<std::size_t>(T)));
    hh[0][0] = p.prior.cov();
    for (Eigen::Index t = 1; t < T; ++t) {
        hh[static_cast<std::size_t>(t)][static_cast<std::size_t>(t)] =
            p.A * hh[static_cast<std::size_t>(t - 1)][static_cast<std::size_t>(t - 1)] *
                p.A.transpose() +
            p.sigma_h;
        for (Eigen::Index tau = 0; tau < t; ++tau)
            hh[static_cast<std::size_t>(t)][static_cast<std::size_t>(tau)] =
                p.A * hh[static_cast<std::size_t>(t - 1)][static_cast<std::size_t>(tau)];
    }

    Vector mean(dim);
    Matrix cov = Matrix::Zero(dim, dim);
    auto hcov = [&](Eigen::Index t, Eigen::Index tau) -> Matrix {
        return t >= tau ? hh[static_cast<std::size_t>(t)][static_cast<std::size_t>(tau)]
                        : hh[static_cast<std::size_t>(tau)][static_cast<std::size_t>(t)].transpose();
    };
    for (Eigen::Index t = 0; t < T; ++t) {
        mean.segment(t * n, n) = h_mean[static_cast<std::size_t>(t)];
        mean.segment(T * n + t * m, m) = p.B * h_mean[static_cast<std::size_t>(t)];
    }
    for (Eigen::Index t = 0; t < T; ++t)
        for (Eigen::Index tau = 0; tau < T; ++tau) {
            cov.block(t * n, tau * n, n, n) = hcov(t, tau);
            cov.block(T * n + t * m, tau * n, m, n) = p.B * hcov(t, tau);
            cov.block(tau * n, T * n + t * m, n, m) = (p.B * hcov(t, tau)).transpose();
            Matrix vv = p.B * hcov(t, tau) * p.B.transpose();
            if (t == tau)
                vv += p.sigma_v;
            cov.block(T * n + t * m, T * n + tau * m, m, m) = vv;
        }
    return {Gaussian(std::move(mean), std::move(cov)), n, m, T};
}

/// Marginal over the h_t block of the joint conditioned on v_1..v_k.
inline Gaussian oracle_posterior(const LdsJoint& lj, const std::vector<Vector>& obs,
                                 Eigen::Index t, Eigen::Index upto) {
    std::vector<Eigen::Index> observed;
    Vector y(upto * lj.m);
    for (Eigen::Index s = 0; s < upto; ++s)
        for (Eigen::Index i = 0; i < lj.m; ++i) {
            observed.push_back(lj.v_index(s, i));
            y[s * lj.m + i] = obs[static_cast<std::size_t>(s)][i];
        }
    const Gaussian cond = condition(lj.joint, observed, y);
    // Unobserved coordinates keep their relative order; all h blocks precede
    // the remaining v blocks, so h_t sits at offset t*n.
    Vector mean = cond.mean().segment(t * lj.n, lj.n);
    Matrix cov = cond.cov().block(t * lj.n, t * lj.n, lj.n, lj.n);
    return Gaussian(std::move(mean), std::move(cov));
}

/// Smoothed cross covariance Cov(h_{t+1}, h_t | v_{1:T}) from the same oracle.
inline Matrix oracle_smoothed_cross(const LdsJoint& lj, const std::vector<Vector>& obs,
                                    Eigen::Index t) {
    std::vector<Eigen::Index> observed;
    Vector y(lj.T * lj.m);
    for (Eigen::Index s = 0; s < lj.T; ++s)
        for (Eigen::Index i = 0; i < lj.m; ++i) {
            observed.push_back(lj.v_index(s, i));
            y[s * lj.m + i] = obs[static_cast<std::size_t>(s)][i];
        }
    const Gaussian cond = condition(lj.joint, observed, y);
    return cond.cov().block((t + 1) * lj.n, t * lj.n, lj.n, lj.n);
}

inline double oracle_log_likelihood(const LdsJoint& lj, const std::vector<Vector>& obs) {
    std::vector<Eigen::Index> keep;
    Vector y(lj.T * lj.m);
    Vector mean(lj.T * lj.m);
    Matrix cov(lj.T * lj.m, lj.T * lj.m);
    for (Eigen::Index s = 0; s < lj.T; ++s)
        for (Eigen::Index i = 0; i < lj.m; ++i)
            y[s * lj.m + i] = obs[static_cast<std::size_t>(s)][i];
    for (Eigen::Index a = 0; a < lj.T * lj.m; ++a) {
        mean[a] = lj.joint.mean()[lj.T * lj.n + a];
        for (Eigen::Index b = 0; b < lj.T * lj.m; ++b)
            cov(a, b) = lj.joint.cov()(lj.T * lj.n + a, lj.T * lj.n + b);
    }
    return log_density(Gaussian(std::move(mean), std::move(cov)), y);
}

inline double total_variation(const Vector& p, const Vector& q) {
    return 0.5 * (p - q).cwiseAbs().sum();
}

/// Central finite differences over every parameter of a stack; returns the
/// largest relative error against the analytic gradients. The denominator is
/// floored so that near-zero entries are compared absolutely.
inline double gradcheck_max_rel_error(LstmStack stack, const std::vector<Vector>& xs,
                                      const std::vector<int>& labels, double h = 1e-5) {
    LstmStackCache cache;
    stack_forward(stack, xs, &cache);
    const LstmStack grads_s = backward(stack, cache, labels);
    auto grads = tensor_views(const_cast<LstmStack&>(grads_s));
    auto params = tensor_views(stack);

    const auto eval_loss = [&]() {
        return loss(stack_forward(stack, xs), labels);
    };
    double worst = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        for (std::ptrdiff_t i = 0; i < params[k].second; ++i) {
            double& theta = params[k].first[i];
            const double orig = theta;
            theta = orig + h;
            const double up = eval_loss();
            theta = orig - h;
            const double down = eval_loss();
            theta = orig;
            const double fd = (up - down) / (2.0 * h);
            const double g = grads[k].first[i];
            const double rel = std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-3});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

// ---- filesystem + subprocess helpers ---------------------------------------

inline std::filesystem::path fresh_dir(const std::string& tag) {
    static std::atomic<int> counter{0};
    const auto dir = std::filesystem::temp_directory_path() /
                     ("switchbench_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
                      std::to_string(counter.fetch_add(1)));
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline std::map<std::string, std::string> tree_bytes(const std::filesystem::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& entry : std::filesystem::recursive_directory_iterator(root)) {
        if (!entry.is_regular_file())
            continue;
        std::ifstream in(entry.path(), std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        out[std::filesystem::relative(entry.path(), root).string()] = ss.str();
    }
    return out;
}

struct CliResult {
    int exit_code = -1;
    std::string output;  // stdout + stderr interleaved
};

inline std::string cli_binary() {
    if (const char* env = std::getenv("SWITCHBENCH_CLI"))
        return env;
#ifdef SWITCHBENCH_CLI_DEFAULT
    return SWITCHBENCH_CLI_DEFAULT;
#else
    return "";
#endif
}

inline CliResult run_cli(const std::string& args, const std::string& env_prefix = "") {
    const std::string cmd =
        (env_prefix.empty() ? "" : env_prefix + " ") + cli_binary() + " " + args + " 2>&1";
    FILE* pipe = ::popen(cmd.c_str(), "r");
    CliResult r;
    if (!pipe)
        return r;
    std::array<char, 4096> buf{};
    std::size_t got = 0;
    while ((got = ::fread(buf.data(), 1, buf.size(), pipe)) > 0)
        r.output.append(buf.data(), got);
    const int status = ::pclose(pipe);
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

}  // namespace testsupport
