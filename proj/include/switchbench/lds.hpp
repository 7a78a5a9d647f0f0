#pragma once

#include <cmath>
#include <random>
#include <utility>
#include <vector>

#include "switchbench/gaussian.hpp"
#include "switchbench/parallel.hpp"

namespace switchbench {

/// Linear dynamic system h_t = A h_{t-1} + w, v_t = B h_t + r with
/// w ~ N(0, sigma_h), r ~ N(0, sigma_v) and h_1 ~ prior. Parameters are
/// time invariant.
struct LdsParams {
    Matrix A;        // n x n state matrix
    Matrix B;        // m x n measurement matrix
    Matrix sigma_h;  // n x n transition noise covariance
    Matrix sigma_v;  // m x m emission noise covariance
    Gaussian prior;  // over h_1

    LdsParams(Matrix a, Matrix b, Matrix sh, Matrix sv, Gaussian p)
        : A(std::move(a)), B(std::move(b)), sigma_h(std::move(sh)), sigma_v(std::move(sv)),
          prior(std::move(p)) {
        const Eigen::Index n = A.rows();
        const Eigen::Index m = B.rows();
        if (A.cols() != n)
            throw DimensionMismatch("A must be square");
        if (B.cols() != n)
            throw DimensionMismatch("B column count must match the state dimension");
        if (sigma_h.rows() != n || sigma_h.cols() != n)
            throw DimensionMismatch("sigma_h must be n x n");
        if (sigma_v.rows() != m || sigma_v.cols() != m)
            throw DimensionMismatch("sigma_v must be m x m");
        if (prior.dim() != n)
            throw DimensionMismatch("prior dimension must match the state dimension");
        sigma_h = 0.5 * (sigma_h + sigma_h.transpose().eval());
        sigma_v = 0.5 * (sigma_v + sigma_v.transpose().eval());
    }

    Eigen::Index state_dim() const { return A.rows(); }
    Eigen::Index obs_dim() const { return B.rows(); }
};

struct FilterResult {
    std::vector<Gaussian> filtered;   // p(h_t | v_{1:t})
    std::vector<Gaussian> predicted;  // p(h_t | v_{1:t-1}); entry 0 is the prior
    std::vector<double> per_step_loglik;
    double log_likelihood = 0.0;
};

struct SmoothResult {
    std::vector<Gaussian> smoothed;  // p(h_t | v_{1:T})
    // cross_cov[t] = Cov(h_{t+2}, h_{t+1} | v_{1:T}) for t = 0..T-2, i.e. the
    // lag-one smoothed covariance the EM transition statistics need.
    std::vector<Matrix> cross_cov;
};

inline Gaussian predict_step(const LdsParams& p, const Gaussian& belief) {
    if (belief.dim() != p.state_dim())
        throw DimensionMismatch("belief dimension differs from state dimension");
    Vector mean = p.A * belief.mean();
    Matrix cov = p.A * belief.cov() * p.A.transpose() + p.sigma_h;
    return Gaussian(std::move(mean), std::move(cov));
}

/// Measurement update with Joseph-form covariance. Returns the posterior and
/// the log marginal ln p(v_t | v_{1:t-1}).
inline std::pair<Gaussian, double> update_step(const LdsParams& p, const Gaussian& predicted,
                                               const Vector& v) {
    if (v.size() != p.obs_dim())
        throw DimensionMismatch("observation dimension differs from B row count");
    if (predicted.dim() != p.state_dim())
        throw DimensionMismatch("predicted belief dimension differs from state dimension");

    const Vector innovation_mean = p.B * predicted.mean();
    Matrix S = p.B * predicted.cov() * p.B.transpose() + p.sigma_v;
    S = 0.5 * (S + S.transpose().eval());
    const Gaussian innovation(innovation_mean, S);
    const double log_marginal = log_density(innovation, v);

    const auto llt = safe_llt(innovation.cov());
    const Matrix K = llt.solve(p.B * predicted.cov()).transpose();  // n x m gain
    Vector mean = predicted.mean() + K * (v - innovation_mean);
    const Matrix I = Matrix::Identity(p.state_dim(), p.state_dim());
    const Matrix IKB = I - K * p.B;
    Matrix cov = IKB * predicted.cov() * IKB.transpose() + K * p.sigma_v * K.transpose();
    return {Gaussian(std::move(mean), std::move(cov)), log_marginal};
}

inline FilterResult filter(const LdsParams& p, const std::vector<Vector>& obs) {
    if (obs.empty())
        throw EmptySequence("filter requires at least one observation");
    FilterResult r;
    const auto T = obs.size();
    r.filtered.reserve(T);
    r.predicted.reserve(T);
    r.per_step_loglik.reserve(T);
    Gaussian pred = p.prior;  // the prior already is p(h_1)
    for (std::size_t t = 0; t < T; ++t) {
        if (t > 0)
            pred = predict_step(p, r.filtered.back());
        auto [post, ll] = update_step(p, pred, obs[t]);
        r.predicted.push_back(pred);
        r.filtered.push_back(std::move(post));
        r.per_step_loglik.push_back(ll);
        r.log_likelihood += ll;
    }
    return r;
}

/// Rauch-Tung-Striebel backward pass over a FilterResult produced with the
/// same parameters. Also yields the lag-one smoothed cross covariances.
inline SmoothResult rts_smooth(const LdsParams& p, const FilterResult& fr) {
    const auto T = fr.filtered.size();
    if (T == 0)
        throw EmptySequence("cannot smooth an empty filter result");
    SmoothResult out;
    out.smoothed.assign(fr.filtered.begin(), fr.filtered.end());
    if (T == 1)
        return out;
    out.cross_cov.resize(T - 1, Matrix());
    for (std::size_t t = T - 1; t-- > 0;) {
        const Gaussian& f = fr.filtered[t];
        // Predicted moments for t+1, identical to what the filter used.
        const Vector mu_pred = p.A * f.mean();
        Matrix cov_pred = p.A * f.cov() * p.A.transpose() + p.sigma_h;
        cov_pred = 0.5 * (cov_pred + cov_pred.transpose().eval());
        const auto llt = safe_llt(cov_pred);
        const Matrix J = llt.solve(p.A * f.cov()).transpose();  // n x n smoother gain
        const Gaussian& next = out.smoothed[t + 1];
        Vector mean = f.mean() + J * (next.mean() - mu_pred);
        Matrix cov = f.cov() + J * (next.cov() - cov_pred) * J.transpose();
        out.smoothed[t] = Gaussian(std::move(mean), std::move(cov));
        out.cross_cov[t] = next.cov() * J.transpose();  // Cov(h_{t+1}, h_t | v_{1:T})
    }
    return out;
}

struct EmConfig {
    int max_iters = 100;
    double tol = 1e-4;  // relative log-likelihood gain triggering the stop
    bool learn_state_matrix = true;
    bool learn_measurement_matrix = true;
    bool learn_transition_noise = true;
    bool learn_emission_noise = true;
    bool learn_prior = true;

    /// Keeps A and B frozen to their configured structure and re-estimates
    /// only the noise covariances and the prior.
    static EmConfig noise_only() {
        EmConfig c;
        c.learn_state_matrix = false;
        c.learn_measurement_matrix = false;
        return c;
    }
};

namespace detail {

/// Closed-form sufficient statistics for the LDS M-step. The switching EM
/// accumulates the same quantities weighted by posterior switch probabilities,
/// which is what makes the single-state reduction exact.
struct LdsSuffStats {
    Eigen::Index n = 0, m = 0;
    // Transition block: sums over steps with a predecessor.
    Matrix S1, S0, S2;  // E[h_t h_{t-1}^T], E[h_{t-1} h_{t-1}^T], E[h_t h_t^T]
    double n_trans = 0.0;
    // Emission block: sums over all steps.
    Matrix O1, O0, O2;  // v E[h]^T, E[h h^T], v v^T
    double n_obs = 0.0;
    // Prior block: weighted first-step moments per sequence.
    Vector P_mean;
    Matrix P_sq;  // E[h_1 h_1^T] accumulated
    double n_init = 0.0;

    LdsSuffStats(Eigen::Index n_, Eigen::Index m_) : n(n_), m(m_) {
        S1 = Matrix::Zero(n, n);
        S0 = Matrix::Zero(n, n);
        S2 = Matrix::Zero(n, n);
        O1 = Matrix::Zero(m, n);
        O0 = Matrix::Zero(n, n);
        O2 = Matrix::Zero(m, m);
        P_mean = Vector::Zero(n);
        P_sq = Matrix::Zero(n, n);
    }

    void add_emission(double w, const Gaussian& post, const Vector& v) {
        if (w == 0.0)
            return;
        O1 += w * v * post.mean().transpose();
        O0 += w * (post.cov() + post.mean() * post.mean().transpose());
        O2 += w * v * v.transpose();
        n_obs += w;
    }

    void add_transition(double w, const Matrix& second_prev, const Matrix& second_next,
                        const Matrix& cross_next_prev) {
        if (w == 0.0)
            return;
        S1 += w * cross_next_prev;
        S0 += w * second_prev;
        S2 += w * second_next;
        n_trans += w;
    }

    void add_initial(double w, const Gaussian& first) {
        if (w == 0.0)
            return;
        P_mean += w * first.mean();
        P_sq += w * (first.cov() + first.mean() * first.mean().transpose());
        n_init += w;
    }

    void merge(const LdsSuffStats& o) {
        S1 += o.S1;
        S0 += o.S0;
        S2 += o.S2;
        n_trans += o.n_trans;
        O1 += o.O1;
        O0 += o.O0;
        O2 += o.O2;
        n_obs += o.n_obs;
        P_mean += o.P_mean;
        P_sq += o.P_sq;
        n_init += o.n_init;
    }
};

inline Matrix solve_normal_equations(const Matrix& lhs, const Matrix& gram) {
    // Solves X * gram = lhs for X; gram is symmetric PSD.
    try {
        const auto llt = safe_llt(gram);
        return llt.solve(lhs.transpose()).transpose();
    } catch (const NotPositiveDefinite&) {
        throw SingularSufficientStatistics("normal equations singular after jitter");
    }
}

/// Applies the closed-form M-step to a parameter set given accumulated
/// statistics. Quadratic-form noise updates stay valid when A or B is frozen.
inline LdsParams lds_m_step(const LdsParams& current, const LdsSuffStats& st,
                            const EmConfig& cfg) {
    Matrix A = current.A;
    Matrix B = current.B;
    Matrix Q = current.sigma_h;
    Matrix R = current.sigma_v;
    Vector prior_mean = current.prior.mean();
    Matrix prior_cov = current.prior.cov();

    if (cfg.learn_state_matrix) {
        if (st.n_trans <= 0.0)
            throw SingularSufficientStatistics("no transition statistics for the state matrix");
        A = solve_normal_equations(st.S1, st.S0);
    }
    if (cfg.learn_transition_noise && st.n_trans > 0.0) {
        Matrix q = st.S2 - st.S1 * A.transpose() - A * st.S1.transpose() + A * st.S0 * A.transpose();
        q /= st.n_trans;
        Q = 0.5 * (q + q.transpose().eval());
    }
    if (cfg.learn_measurement_matrix) {
        if (st.n_obs <= 0.0)
            throw SingularSufficientStatistics("no emission statistics for the measurement matrix");
        B = solve_normal_equations(st.O1, st.O0);
    }
    if (cfg.learn_emission_noise && st.n_obs > 0.0) {
        Matrix r = st.O2 - st.O1 * B.transpose() - B * st.O1.transpose() + B * st.O0 * B.transpose();
        r /= st.n_obs;
        R = 0.5 * (r + r.transpose().eval());
    }
    if (cfg.learn_prior && st.n_init > 0.0) {
        prior_mean = st.P_mean / st.n_init;
        Matrix pc = st.P_sq / st.n_init - prior_mean * prior_mean.transpose();
        prior_cov = 0.5 * (pc + pc.transpose().eval());
    }
    return LdsParams(std::move(A), std::move(B), std::move(Q), std::move(R),
                     Gaussian(std::move(prior_mean), std::move(prior_cov)));
}

inline void accumulate_sequence_stats(const LdsParams& p, const std::vector<Vector>& seq,
                                      LdsSuffStats& st) {
    const FilterResult fr = filter(p, seq);
    const SmoothResult sr = rts_smooth(p, fr);
    st.add_initial(1.0, sr.smoothed.front());
    for (std::size_t t = 0; t < seq.size(); ++t)
        st.add_emission(1.0, sr.smoothed[t], seq[t]);
    for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
        const Gaussian& a = sr.smoothed[t];
        const Gaussian& b = sr.smoothed[t + 1];
        const Matrix second_prev = a.cov() + a.mean() * a.mean().transpose();
        const Matrix second_next = b.cov() + b.mean() * b.mean().transpose();
        const Matrix cross = sr.cross_cov[t] + b.mean() * a.mean().transpose();
        st.add_transition(1.0, second_prev, second_next, cross);
    }
}

inline bool em_should_stop(double prev_ll, double ll, double tol) {
    const double gain = (ll - prev_ll) / std::max(1.0, std::abs(prev_ll));
    return gain < tol;
}

}  // namespace detail

/// Exact EM for the linear dynamic system. Returns the fitted parameters and
/// the per-iteration total log-likelihood trace (entry 0 evaluates the
/// initial parameters). E-steps across sequences run in parallel and are
/// reduced in sequence order, so the result does not depend on thread count.
inline std::pair<LdsParams, std::vector<double>> em_fit(const std::vector<std::vector<Vector>>& seqs,
                                                        const LdsParams& init,
                                                        const EmConfig& config = EmConfig()) {
    if (seqs.empty())
        throw EmptySequence("em_fit requires at least one sequence");
    if (config.max_iters < 1)
        throw InvalidParameter("max_iters must be at least 1");
    for (const auto& s : seqs)
        if (s.empty())
            throw EmptySequence("em_fit sequences must be non-empty");

    LdsParams params = init;
    const auto total_loglik = [&](const LdsParams& p) {
        std::vector<double> lls(seqs.size(), 0.0);
        parallel_for(seqs.size(), [&](std::size_t i) { lls[i] = filter(p, seqs[i]).log_likelihood; });
        double total = 0.0;
        for (double v : lls)
            total += v;
        return total;
    };

    std::vector<double> trace;
    trace.push_back(total_loglik(params));
    for (int iter = 0; iter < config.max_iters; ++iter) {
        std::vector<detail::LdsSuffStats> per_seq(
            seqs.size(), detail::LdsSuffStats(params.state_dim(), params.obs_dim()));
        parallel_for(seqs.size(),
                     [&](std::size_t i) { detail::accumulate_sequence_stats(params, seqs[i], per_seq[i]); });
        detail::LdsSuffStats st(params.state_dim(), params.obs_dim());
        for (const auto& s : per_seq)
            st.merge(s);
        params = detail::lds_m_step(params, st, config);
        trace.push_back(total_loglik(params));
        if (detail::em_should_stop(trace[trace.size() - 2], trace.back(), config.tol))
            break;
    }
    return {params, trace};
}

/// Ancestral sampling. Deterministic given the seed.
inline std::pair<std::vector<Vector>, std::vector<Vector>> sample(const LdsParams& p, std::size_t T,
                                                                  std::uint64_t rng_seed) {
    if (T < 1)
        throw InvalidParameter("T must be at least 1");
    std::mt19937_64 rng(rng_seed);
    std::vector<Vector> latents, observations;
    latents.reserve(T);
    observations.reserve(T);
    Vector h = sample(p.prior, rng);
    for (std::size_t t = 0; t < T; ++t) {
        if (t > 0)
            h = sample(Gaussian(p.A * h, p.sigma_h), rng);
        latents.push_back(h);
        observations.push_back(sample(Gaussian(p.B * h, p.sigma_v), rng));
    }
    return {latents, observations};
}

/// Planar constant-acceleration model with state [x, z, vx, vz, ax, az] and
/// position observations (x, z). accel_noise scales a discrete
/// white-noise-acceleration process covariance per axis; obs_noise is the
/// per-coordinate measurement variance. The prior is diffuse (zero mean,
/// 1e4 on the diagonal).
inline LdsParams constant_acceleration_model(double dt, double accel_noise, double obs_noise) {
    if (!(dt > 0.0))
        throw InvalidParameter("dt must be positive");
    if (!(accel_noise > 0.0) || !(obs_noise > 0.0))
        throw InvalidParameter("noise scales must be positive");
    const Eigen::Index n = 6, m = 2;
    Matrix A = Matrix::Identity(n, n);
    for (int axis = 0; axis < 2; ++axis) {
        const Eigen::Index pos = axis, vel = 2 + axis, acc = 4 + axis;
        A(pos, vel) = dt;
        A(pos, acc) = 0.5 * dt * dt;
        A(vel, acc) = dt;
    }
    Matrix B = Matrix::Zero(m, n);
    B(0, 0) = 1.0;
    B(1, 1) = 1.0;
    Matrix Q = Matrix::Zero(n, n);
    for (int axis = 0; axis < 2; ++axis) {
        Vector g = Vector::Zero(n);
        g[axis] = 0.5 * dt * dt;
        g[2 + axis] = dt;
        g[4 + axis] = 1.0;
        Q += accel_noise * g * g.transpose();
    }
    Matrix R = obs_noise * Matrix::Identity(m, m);
    Gaussian prior(Vector::Zero(n), 1e4 * Matrix::Identity(n, n));
    return LdsParams(std::move(A), std::move(B), std::move(Q), std::move(R), std::move(prior));
}

}  // namespace switchbench
