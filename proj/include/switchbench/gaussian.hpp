#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <random>
#include <utility>
#include <vector>

#include "switchbench/errors.hpp"

namespace switchbench {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline constexpr double kLogTwoPi = 1.8378770664093454836;

/// Moment-parameterised multivariate normal. The covariance is symmetrised
/// on construction; positive definiteness is established lazily wherever a
/// Cholesky factor is actually needed (see safe_llt).
class Gaussian {
public:
    Gaussian(Vector mean, Matrix cov) : mean_(std::move(mean)), cov_(std::move(cov)) {
        if (cov_.rows() != cov_.cols())
            throw DimensionMismatch("covariance must be square");
        if (cov_.rows() != mean_.size())
            throw DimensionMismatch("mean/covariance dimensions differ");
        cov_ = 0.5 * (cov_ + cov_.transpose().eval());
    }

    Eigen::Index dim() const { return mean_.size(); }
    const Vector& mean() const { return mean_; }
    const Matrix& cov() const { return cov_; }

private:
    Vector mean_;
    Matrix cov_;
};

struct WeightedGaussian {
    double log_weight;  // natural log; -inf marks a dead component, never NaN
    Gaussian component;

    WeightedGaussian(double lw, Gaussian g) : log_weight(lw), component(std::move(g)) {
        if (std::isnan(log_weight) || log_weight == std::numeric_limits<double>::infinity())
            throw InvalidParameter("log_weight must be finite or -inf");
    }
};

class GaussianMixture {
public:
    explicit GaussianMixture(std::vector<WeightedGaussian> components)
        : components_(std::move(components)) {
        if (components_.empty())
            throw EmptyMixture("mixture requires at least one component");
        const Eigen::Index d = components_.front().component.dim();
        for (const auto& wc : components_)
            if (wc.component.dim() != d)
                throw DimensionMismatch("mixture components must share a dimension");
    }

    const std::vector<WeightedGaussian>& components() const { return components_; }
    Eigen::Index dim() const { return components_.front().component.dim(); }
    std::size_t size() const { return components_.size(); }

private:
    std::vector<WeightedGaussian> components_;
};

/// Cholesky with bounded jitter escalation: plain LLT first, then jitter
/// starting at 1e-12*trace/d and growing tenfold until 1e-6*trace/d.
/// Throws NotPositiveDefinite once the budget is exhausted.
inline Eigen::LLT<Matrix> safe_llt(const Matrix& cov) {
    Eigen::LLT<Matrix> llt(cov);
    if (llt.info() == Eigen::Success)
        return llt;
    const double d = static_cast<double>(cov.rows());
    const double base = 1e-12 * cov.trace() / d;
    if (base > 0.0) {
        const double cap = 1e-6 * cov.trace() / d;
        for (double jitter = base; jitter <= cap * (1.0 + 1e-12); jitter *= 10.0) {
            llt.compute(cov + jitter * Matrix::Identity(cov.rows(), cov.cols()));
            if (llt.info() == Eigen::Success)
                return llt;
        }
    }
    throw NotPositiveDefinite("Cholesky failed after maximum jitter");
}

/// Default jitter scale used when a degenerate (zero) covariance has to be
/// represented as a proper Gaussian.
inline double degenerate_jitter(const Matrix& cov) {
    const double tr = cov.trace();
    const double d = static_cast<double>(std::max<Eigen::Index>(cov.rows(), 1));
    return tr > 0.0 ? 1e-12 * tr / d : 1e-12;
}

/// ln N(x; mean, cov) via Cholesky.
inline double log_density(const Gaussian& g, const Vector& x) {
    if (x.size() != g.dim())
        throw DimensionMismatch("point dimension differs from Gaussian dimension");
    const auto llt = safe_llt(g.cov());
    const Vector z = llt.matrixL().solve(x - g.mean());
    const double log_det = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    return -0.5 * (static_cast<double>(g.dim()) * kLogTwoPi + log_det + z.squaredNorm());
}

/// Exact conditional of a joint Gaussian given observed coordinates, via the
/// Schur complement. Conditioning on every coordinate returns the point mass
/// at y, with a jitter-scaled diagonal standing in for the zero covariance.
inline Gaussian condition(const Gaussian& joint, const std::vector<Eigen::Index>& observed_idx,
                          const Vector& y) {
    const Eigen::Index d = joint.dim();
    if (static_cast<Eigen::Index>(observed_idx.size()) != y.size())
        throw DimensionMismatch("observed index count differs from observation size");
    std::vector<bool> seen(static_cast<std::size_t>(d), false);
    for (Eigen::Index idx : observed_idx) {
        if (idx < 0 || idx >= d)
            throw InvalidParameter("observed index out of range");
        if (seen[static_cast<std::size_t>(idx)])
            throw InvalidParameter("observed index repeated");
        seen[static_cast<std::size_t>(idx)] = true;
    }
    std::vector<Eigen::Index> rest;
    rest.reserve(static_cast<std::size_t>(d) - observed_idx.size());
    for (Eigen::Index i = 0; i < d; ++i)
        if (!seen[static_cast<std::size_t>(i)])
            rest.push_back(i);

    if (rest.empty()) {
        Vector mean(d);
        for (std::size_t k = 0; k < observed_idx.size(); ++k)
            mean[observed_idx[k]] = y[static_cast<Eigen::Index>(k)];
        return Gaussian(mean, degenerate_jitter(joint.cov()) * Matrix::Identity(d, d));
    }

    const auto nu = static_cast<Eigen::Index>(rest.size());
    const auto no = static_cast<Eigen::Index>(observed_idx.size());
    Vector mu_u(nu), mu_o(no);
    Matrix S_uu(nu, nu), S_uo(nu, no), S_oo(no, no);
    for (Eigen::Index i = 0; i < nu; ++i) {
        mu_u[i] = joint.mean()[rest[static_cast<std::size_t>(i)]];
        for (Eigen::Index j = 0; j < nu; ++j)
            S_uu(i, j) = joint.cov()(rest[static_cast<std::size_t>(i)], rest[static_cast<std::size_t>(j)]);
        for (Eigen::Index j = 0; j < no; ++j)
            S_uo(i, j) = joint.cov()(rest[static_cast<std::size_t>(i)], observed_idx[static_cast<std::size_t>(j)]);
    }
    for (Eigen::Index i = 0; i < no; ++i) {
        mu_o[i] = joint.mean()[observed_idx[static_cast<std::size_t>(i)]];
        for (Eigen::Index j = 0; j < no; ++j)
            S_oo(i, j) = joint.cov()(observed_idx[static_cast<std::size_t>(i)], observed_idx[static_cast<std::size_t>(j)]);
    }

    const auto llt = safe_llt(S_oo);
    const Matrix gain = llt.solve(S_uo.transpose()).transpose();  // S_uo * S_oo^-1
    Vector mean = mu_u + gain * (y - mu_o);
    Matrix cov = S_uu - gain * S_uo.transpose();
    return Gaussian(std::move(mean), std::move(cov));
}

/// (w - logsumexp(w), logsumexp(w)). Throws AllWeightsDead when no entry is
/// finite or any entry is NaN.
inline std::pair<Vector, double> normalize_log_weights(const Vector& log_w) {
    if (log_w.size() == 0)
        throw AllWeightsDead("empty weight vector");
    double max_w = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < log_w.size(); ++i) {
        if (std::isnan(log_w[i]))
            throw AllWeightsDead("NaN log weight");
        max_w = std::max(max_w, log_w[i]);
    }
    if (!std::isfinite(max_w))
        throw AllWeightsDead("all log weights are -inf");
    double sum = 0.0;
    for (Eigen::Index i = 0; i < log_w.size(); ++i)
        sum += std::exp(log_w[i] - max_w);
    const double total = max_w + std::log(sum);
    return {log_w.array() - total, total};
}

/// Moment-matching collapse of a mixture to the single Gaussian with the same
/// first two moments. Weights are renormalised internally, so passing an
/// already-normalised mixture is a no-op on the weights.
inline Gaussian collapse(const GaussianMixture& m) {
    Vector log_w(static_cast<Eigen::Index>(m.size()));
    for (std::size_t i = 0; i < m.size(); ++i)
        log_w[static_cast<Eigen::Index>(i)] = m.components()[i].log_weight;
    const Vector norm = normalize_log_weights(log_w).first;

    const Eigen::Index d = m.dim();
    Vector mean = Vector::Zero(d);
    for (std::size_t i = 0; i < m.size(); ++i) {
        const double w = std::exp(norm[static_cast<Eigen::Index>(i)]);
        if (w == 0.0)
            continue;
        mean += w * m.components()[i].component.mean();
    }
    Matrix cov = Matrix::Zero(d, d);
    for (std::size_t i = 0; i < m.size(); ++i) {
        const double w = std::exp(norm[static_cast<Eigen::Index>(i)]);
        if (w == 0.0)
            continue;
        const Gaussian& g = m.components()[i].component;
        cov += w * (g.cov() + g.mean() * g.mean().transpose());
    }
    cov -= mean * mean.transpose();
    return Gaussian(std::move(mean), std::move(cov));
}

/// Draw from a Gaussian whose covariance may be rank deficient (process noise
/// of kinematic models usually is), so the factor comes from an eigendecomposition
/// with negative eigenvalues clamped to zero. An exactly zero covariance yields
/// the mean.
inline Vector sample(const Gaussian& g, std::mt19937_64& rng) {
    if (g.cov().isZero(0.0))
        return g.mean();
    Eigen::SelfAdjointEigenSolver<Matrix> es(g.cov());
    if (es.info() != Eigen::Success)
        throw NotPositiveDefinite("eigendecomposition failed during sampling");
    Vector xi(g.dim());
    std::normal_distribution<double> n01(0.0, 1.0);
    for (Eigen::Index i = 0; i < g.dim(); ++i)
        xi[i] = n01(rng);
    const Vector scale = es.eigenvalues().array().max(0.0).sqrt();
    return g.mean() + es.eigenvectors() * scale.asDiagonal() * xi;
}

}  // namespace switchbench
