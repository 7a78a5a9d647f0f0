#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "switchbench/classify.hpp"
#include "switchbench/lds.hpp"

namespace switchbench {

/// Switching linear dynamical system: one LdsParams per switching state, a
/// row-stochastic switching transition matrix and a switching prior.
struct SldsParams {
    std::vector<LdsParams> states;
    std::vector<std::string> state_names;
    Matrix switch_trans;  // S x S, rows sum to 1
    Vector switch_prior;  // S, sums to 1

    SldsParams(std::vector<LdsParams> sts, Matrix trans, Vector prior,
               std::vector<std::string> names = {})
        : states(std::move(sts)), state_names(std::move(names)), switch_trans(std::move(trans)),
          switch_prior(std::move(prior)) {
        const auto S = static_cast<Eigen::Index>(states.size());
        if (S == 0)
            throw InvalidParameter("at least one switching state is required");
        for (const auto& s : states)
            if (s.state_dim() != states.front().state_dim() || s.obs_dim() != states.front().obs_dim())
                throw DimensionMismatch("per-state models must share state and observation dimensions");
        if (switch_trans.rows() != S || switch_trans.cols() != S)
            throw DimensionMismatch("switching transition matrix must be S x S");
        if (switch_prior.size() != S)
            throw DimensionMismatch("switching prior must have S entries");
        for (Eigen::Index i = 0; i < S; ++i) {
            if (std::abs(switch_trans.row(i).sum() - 1.0) > 1e-12 || switch_trans.row(i).minCoeff() < 0.0)
                throw InvalidParameter("switching transition rows must be distributions");
        }
        if (std::abs(switch_prior.sum() - 1.0) > 1e-12 || switch_prior.minCoeff() < 0.0)
            throw InvalidParameter("switching prior must be a distribution");
        if (state_names.empty()) {
            state_names.reserve(static_cast<std::size_t>(S));
            for (Eigen::Index i = 0; i < S; ++i)
                state_names.push_back("state" + std::to_string(i));
        }
        if (static_cast<Eigen::Index>(state_names.size()) != S)
            throw InvalidParameter("state name count must match state count");
    }

    Eigen::Index num_states() const { return static_cast<Eigen::Index>(states.size()); }
    Eigen::Index state_dim() const { return states.front().state_dim(); }
    Eigen::Index obs_dim() const { return states.front().obs_dim(); }
};

/// Per-timestep joint belief: log p(s_t = j | v_{1:t}) plus the moment-matched
/// conditional p(h_t | s_t = j, v_{1:t}) for each state j.
struct SwitchBelief {
    Vector log_weights;
    std::vector<Gaussian> conditionals;
};

struct SldsFilterResult {
    std::vector<SwitchBelief> beliefs;
    Matrix switch_posteriors;  // T x S, rows = exp(beliefs[t].log_weights)
    double log_likelihood = 0.0;
    std::vector<double> per_step_loglik;
};

namespace detail {

constexpr double kDeadBranchGap = 700.0;  // exp underflows well past this

inline double logsumexp(const std::vector<double>& v) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double x : v)
        mx = std::max(mx, x);
    if (!std::isfinite(mx))
        return mx;
    double s = 0.0;
    for (double x : v)
        s += std::exp(x - mx);
    return mx + std::log(s);
}

/// Collapses one destination-state group of GPB2 branches. Branches more than
/// kDeadBranchGap below the group's best are dropped; if every branch in the
/// group is dead (reachable only with zero probability) the components are
/// averaged uniformly as a harmless placeholder.
inline Gaussian collapse_group(const std::vector<double>& branch_log_w,
                               const std::vector<Gaussian>& branch_comp) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double w : branch_log_w)
        mx = std::max(mx, w);
    std::vector<WeightedGaussian> kept;
    kept.reserve(branch_comp.size());
    if (std::isfinite(mx)) {
        for (std::size_t i = 0; i < branch_comp.size(); ++i)
            if (branch_log_w[i] > mx - kDeadBranchGap)
                kept.emplace_back(branch_log_w[i] - mx, branch_comp[i]);
    } else {
        for (const auto& c : branch_comp)
            kept.emplace_back(0.0, c);
    }
    return collapse(GaussianMixture(std::move(kept)));
}

}  // namespace detail

/// GPB2 filtering: expand the S retained components through all S dynamics,
/// update every branch against v_t, then moment-match each destination-state
/// group back to a single Gaussian. The log-likelihood accumulates the exact
/// per-step branch evidence of this approximation.
inline SldsFilterResult gpb_filter(const SldsParams& p, const std::vector<Vector>& obs) {
    if (obs.empty())
        throw EmptySequence("gpb_filter requires at least one observation");
    const Eigen::Index S = p.num_states();
    const auto T = obs.size();

    SldsFilterResult out;
    out.beliefs.reserve(T);
    out.per_step_loglik.reserve(T);
    out.switch_posteriors.resize(static_cast<Eigen::Index>(T), S);

    // t = 1: one branch per state from its own prior.
    {
        std::vector<double> branch(static_cast<std::size_t>(S));
        std::vector<Gaussian> comps;
        comps.reserve(static_cast<std::size_t>(S));
        for (Eigen::Index j = 0; j < S; ++j) {
            auto [post, ll] = update_step(p.states[j], p.states[j].prior, obs[0]);
            branch[static_cast<std::size_t>(j)] =
                (p.switch_prior[j] > 0.0 ? std::log(p.switch_prior[j])
                                         : -std::numeric_limits<double>::infinity()) +
                ll;
            comps.push_back(std::move(post));
        }
        const double step_ll = detail::logsumexp(branch);
        if (!std::isfinite(step_ll))
            throw AllWeightsDead("all first-step branches have zero evidence");
        SwitchBelief b;
        b.log_weights.resize(S);
        for (Eigen::Index j = 0; j < S; ++j)
            b.log_weights[j] = branch[static_cast<std::size_t>(j)] - step_ll;
        b.conditionals = std::move(comps);
        out.per_step_loglik.push_back(step_ll);
        out.log_likelihood += step_ll;
        out.beliefs.push_back(std::move(b));
    }

    Matrix log_trans(S, S);
    for (Eigen::Index i = 0; i < S; ++i)
        for (Eigen::Index j = 0; j < S; ++j)
            log_trans(i, j) = p.switch_trans(i, j) > 0.0
                                  ? std::log(p.switch_trans(i, j))
                                  : -std::numeric_limits<double>::infinity();

    for (std::size_t t = 1; t < T; ++t) {
        const SwitchBelief& prev = out.beliefs.back();
        std::vector<double> all_branches;
        all_branches.reserve(static_cast<std::size_t>(S * S));
        // branch_w[j][i], branch_g[j][i]: source i routed through dynamics j.
        std::vector<std::vector<double>> branch_w(static_cast<std::size_t>(S));
        std::vector<std::vector<Gaussian>> branch_g(static_cast<std::size_t>(S));
        for (Eigen::Index j = 0; j < S; ++j) {
            auto& wj = branch_w[static_cast<std::size_t>(j)];
            auto& gj = branch_g[static_cast<std::size_t>(j)];
            wj.reserve(static_cast<std::size_t>(S));
            gj.reserve(static_cast<std::size_t>(S));
            for (Eigen::Index i = 0; i < S; ++i) {
                const Gaussian pred = predict_step(p.states[j], prev.conditionals[static_cast<std::size_t>(i)]);
                auto [post, ll] = update_step(p.states[j], pred, obs[t]);
                const double w = prev.log_weights[i] + log_trans(i, j) + ll;
                wj.push_back(w);
                gj.push_back(std::move(post));
                all_branches.push_back(w);
            }
        }
        const double step_ll = detail::logsumexp(all_branches);
        if (!std::isfinite(step_ll))
            throw AllWeightsDead("all branches have zero evidence at step " + std::to_string(t));

        SwitchBelief b;
        b.log_weights.resize(S);
        b.conditionals.reserve(static_cast<std::size_t>(S));
        for (Eigen::Index j = 0; j < S; ++j) {
            b.log_weights[j] =
                detail::logsumexp(branch_w[static_cast<std::size_t>(j)]) - step_ll;
            b.conditionals.push_back(detail::collapse_group(branch_w[static_cast<std::size_t>(j)],
                                                            branch_g[static_cast<std::size_t>(j)]));
        }
        out.per_step_loglik.push_back(step_ll);
        out.log_likelihood += step_ll;
        out.beliefs.push_back(std::move(b));
    }

    for (std::size_t t = 0; t < T; ++t)
        for (Eigen::Index j = 0; j < S; ++j)
            out.switch_posteriors(static_cast<Eigen::Index>(t), j) =
                std::exp(out.beliefs[t].log_weights[j]);
    return out;
}

namespace detail {

/// Full output of the GPB-style backward pass; gpb_smooth exposes only the
/// switch posterior matrix, the EM keeps the rest.
struct GpbSmoothFull {
    Matrix switch_posteriors;                  // T x S smoothed
    std::vector<std::vector<Gaussian>> state_marginals;  // [t][j] p(h_t | s_t=j, v_{1:T})
    // xi[t](i, j) ~ p(s_t=i, s_{t+1}=j | v_{1:T}) for t = 0..T-2
    std::vector<Matrix> xi;
    // Branch moments for the transition t -> t+1 under destination dynamics j:
    // E[h_t h_t^T], E[h_{t+1} h_t^T] and E[h_{t+1} h_{t+1}^T] per (i, j).
    struct BranchMoments {
        Matrix second_prev;
        Matrix cross;  // E[h_{t+1} h_t^T]
        Matrix second_next;
    };
    std::vector<std::vector<std::vector<BranchMoments>>> branches;  // [t][i][j]
};

inline GpbSmoothFull gpb_smooth_full(const SldsParams& p, const SldsFilterResult& fr) {
    const Eigen::Index S = p.num_states();
    const auto T = fr.beliefs.size();
    if (T == 0)
        throw EmptySequence("cannot smooth an empty filter result");

    GpbSmoothFull out;
    out.switch_posteriors.resize(static_cast<Eigen::Index>(T), S);
    out.state_marginals.resize(T);
    out.state_marginals[T - 1] = fr.beliefs[T - 1].conditionals;
    for (Eigen::Index j = 0; j < S; ++j)
        out.switch_posteriors(static_cast<Eigen::Index>(T - 1), j) =
            std::exp(fr.beliefs[T - 1].log_weights[j]);
    if (T == 1)
        return out;
    out.xi.resize(T - 1);
    out.branches.resize(T - 1);

    for (std::size_t t = T - 1; t-- > 0;) {
        const SwitchBelief& f = fr.beliefs[t];

        // Per-branch RTS smoothing toward the smoothed (t+1, j) component,
        // keeping the predicted moments for the discrete backward weights.
        std::vector<std::vector<Gaussian>> smoothed_br;
        Matrix log_overlap(S, S);  // ln <N(h; pred_ij)> under the smoothed h_{t+1} | s_{t+1}=j
        auto& branches_t = out.branches[t];
        branches_t.assign(static_cast<std::size_t>(S),
                          std::vector<GpbSmoothFull::BranchMoments>(static_cast<std::size_t>(S)));
        smoothed_br.resize(static_cast<std::size_t>(S));
        for (Eigen::Index i = 0; i < S; ++i) {
            const Gaussian& fi = f.conditionals[static_cast<std::size_t>(i)];
            auto& row = smoothed_br[static_cast<std::size_t>(i)];
            row.reserve(static_cast<std::size_t>(S));
            for (Eigen::Index j = 0; j < S; ++j) {
                const LdsParams& dyn = p.states[j];
                const Vector mu_pred = dyn.A * fi.mean();
                Matrix cov_pred = dyn.A * fi.cov() * dyn.A.transpose() + dyn.sigma_h;
                cov_pred = 0.5 * (cov_pred + cov_pred.transpose().eval());
                const auto llt = safe_llt(cov_pred);
                const Matrix J = llt.solve(dyn.A * fi.cov()).transpose();
                const Gaussian& next = out.state_marginals[t + 1][static_cast<std::size_t>(j)];
                Vector mean = fi.mean() + J * (next.mean() - mu_pred);
                Matrix cov = fi.cov() + J * (next.cov() - cov_pred) * J.transpose();
                Gaussian smoothed(mean, cov);
                const Matrix cross_cov = next.cov() * J.transpose();

                auto& bm = branches_t[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
                bm.second_prev = smoothed.cov() + smoothed.mean() * smoothed.mean().transpose();
                bm.cross = cross_cov + next.mean() * smoothed.mean().transpose();
                bm.second_next = next.cov() + next.mean() * next.mean().transpose();

                log_overlap(i, j) = log_density(Gaussian(mu_pred, cov_pred + next.cov()), next.mean());
                row.push_back(std::move(smoothed));
            }
        }

        // Discrete backward step: p(s_t=i | s_{t+1}=j, v_{1:T}) approximated by
        // the filtered weight times the transition probability, corrected by
        // how well the branch prediction overlaps the smoothed h_{t+1}.
        Matrix xi = Matrix::Zero(S, S);
        for (Eigen::Index j = 0; j < S; ++j) {
            const double g_next = out.switch_posteriors(static_cast<Eigen::Index>(t + 1), j);
            if (g_next <= 0.0)
                continue;
            Vector log_u(S);
            for (Eigen::Index i = 0; i < S; ++i) {
                const double lt = p.switch_trans(i, j) > 0.0
                                      ? std::log(p.switch_trans(i, j))
                                      : -std::numeric_limits<double>::infinity();
                log_u[i] = f.log_weights[i] + lt + log_overlap(i, j);
            }
            const auto norm = normalize_log_weights(log_u).first;
            for (Eigen::Index i = 0; i < S; ++i)
                xi(i, j) = std::exp(norm[i]) * g_next;
        }
        out.xi[t] = xi;
        for (Eigen::Index i = 0; i < S; ++i)
            out.switch_posteriors(static_cast<Eigen::Index>(t), i) = xi.row(i).sum();

        // Collapse the branches of each source state under the xi weights.
        std::vector<Gaussian> marginals;
        marginals.reserve(static_cast<std::size_t>(S));
        for (Eigen::Index i = 0; i < S; ++i) {
            std::vector<double> comp_w;
            comp_w.reserve(static_cast<std::size_t>(S));
            for (Eigen::Index j = 0; j < S; ++j) {
                const double w = xi(i, j);
                comp_w.push_back(w > 0.0 ? std::log(w) : -std::numeric_limits<double>::infinity());
            }
            marginals.push_back(collapse_group(comp_w, smoothed_br[static_cast<std::size_t>(i)]));
        }
        out.state_marginals[t] = std::move(marginals);
    }
    return out;
}

}  // namespace detail

/// GPB-style smoothing. Returns the smoothed switch posteriors p(s_t | v_{1:T})
/// as a T x S row-stochastic matrix.
inline Matrix gpb_smooth(const SldsParams& p, const SldsFilterResult& fr) {
    return detail::gpb_smooth_full(p, fr).switch_posteriors;
}

/// Exact SLDS filtering by enumerating every switching path; feasible only for
/// tiny S^T, which is what makes it the test oracle. Returns the exact
/// filtered switch posteriors and ln p(v_{1:T}).
inline std::pair<Matrix, double> exact_enumeration_filter(const SldsParams& p,
                                                          const std::vector<Vector>& obs) {
    if (obs.empty())
        throw EmptySequence("enumeration requires at least one observation");
    const Eigen::Index S = p.num_states();
    const auto T = obs.size();
    const double path_count = std::pow(static_cast<double>(S), static_cast<double>(T));
    if (path_count > 1e6)
        throw TooLarge("S^T exceeds the enumeration guard");

    struct Path {
        Eigen::Index last;
        double log_ev;  // ln p(s_{1:t}, v_{1:t})
        Gaussian belief;
    };
    std::vector<Path> paths;
    paths.reserve(static_cast<std::size_t>(S));
    Matrix posteriors(static_cast<Eigen::Index>(T), S);

    for (Eigen::Index j = 0; j < S; ++j) {
        auto [post, ll] = update_step(p.states[j], p.states[j].prior, obs[0]);
        const double lp = p.switch_prior[j] > 0.0 ? std::log(p.switch_prior[j])
                                                  : -std::numeric_limits<double>::infinity();
        paths.push_back({j, lp + ll, std::move(post)});
    }
    auto record_posterior = [&](std::size_t t) {
        std::vector<std::vector<double>> by_state(static_cast<std::size_t>(S));
        for (const auto& path : paths)
            by_state[static_cast<std::size_t>(path.last)].push_back(path.log_ev);
        std::vector<double> totals(static_cast<std::size_t>(S));
        std::vector<double> all;
        all.reserve(paths.size());
        for (Eigen::Index j = 0; j < S; ++j) {
            totals[static_cast<std::size_t>(j)] = detail::logsumexp(by_state[static_cast<std::size_t>(j)]);
            for (double v : by_state[static_cast<std::size_t>(j)])
                all.push_back(v);
        }
        const double z = detail::logsumexp(all);
        for (Eigen::Index j = 0; j < S; ++j)
            posteriors(static_cast<Eigen::Index>(t), j) = std::exp(totals[static_cast<std::size_t>(j)] - z);
        return z;
    };

    double z = record_posterior(0);
    for (std::size_t t = 1; t < T; ++t) {
        std::vector<Path> next;
        next.reserve(paths.size() * static_cast<std::size_t>(S));
        for (const auto& path : paths) {
            for (Eigen::Index j = 0; j < S; ++j) {
                const double lt = p.switch_trans(path.last, j) > 0.0
                                      ? std::log(p.switch_trans(path.last, j))
                                      : -std::numeric_limits<double>::infinity();
                if (!std::isfinite(lt) && !std::isfinite(path.log_ev))
                    continue;
                const Gaussian pred = predict_step(p.states[j], path.belief);
                auto [post, ll] = update_step(p.states[j], pred, obs[t]);
                next.push_back({j, path.log_ev + lt + ll, std::move(post)});
            }
        }
        paths = std::move(next);
        z = record_posterior(t);
    }
    return {posteriors, z};
}

/// Exact smoothed switch posteriors by full-path enumeration; oracle only.
inline Matrix exact_enumeration_smooth(const SldsParams& p, const std::vector<Vector>& obs) {
    if (obs.empty())
        throw EmptySequence("enumeration requires at least one observation");
    const Eigen::Index S = p.num_states();
    const auto T = obs.size();
    const double path_count = std::pow(static_cast<double>(S), static_cast<double>(T));
    if (path_count > 1e6)
        throw TooLarge("S^T exceeds the enumeration guard");

    std::vector<Eigen::Index> states(T, 0);
    std::vector<double> leaf_ev;
    leaf_ev.reserve(static_cast<std::size_t>(path_count));
    std::vector<std::vector<Eigen::Index>> leaf_paths;
    leaf_paths.reserve(static_cast<std::size_t>(path_count));

    // Depth-first over switching paths, sharing prefix filters.
    struct Frame {
        double log_ev;
        Gaussian belief;
    };
    std::function<void(std::size_t, double, const Gaussian&)> walk =
        [&](std::size_t t, double log_ev, const Gaussian& belief) {
            if (t == T) {
                leaf_ev.push_back(log_ev);
                leaf_paths.push_back(states);
                return;
            }
            for (Eigen::Index j = 0; j < S; ++j) {
                double lp;
                Gaussian pred = belief;
                if (t == 0) {
                    lp = p.switch_prior[j] > 0.0 ? std::log(p.switch_prior[j])
                                                 : -std::numeric_limits<double>::infinity();
                    pred = p.states[j].prior;
                } else {
                    const Eigen::Index i = states[t - 1];
                    lp = p.switch_trans(i, j) > 0.0 ? std::log(p.switch_trans(i, j))
                                                    : -std::numeric_limits<double>::infinity();
                    pred = predict_step(p.states[j], belief);
                }
                if (!std::isfinite(lp))
                    continue;
                auto [post, ll] = update_step(p.states[j], pred, obs[t]);
                states[t] = j;
                walk(t + 1, log_ev + lp + ll, post);
            }
        };
    walk(0, 0.0, p.states.front().prior);

    const double z = detail::logsumexp(leaf_ev);
    Matrix posteriors = Matrix::Zero(static_cast<Eigen::Index>(T), S);
    for (std::size_t k = 0; k < leaf_ev.size(); ++k) {
        const double w = std::exp(leaf_ev[k] - z);
        for (std::size_t t = 0; t < T; ++t)
            posteriors(static_cast<Eigen::Index>(t), leaf_paths[k][t]) += w;
    }
    for (Eigen::Index t = 0; t < posteriors.rows(); ++t)
        posteriors.row(t) /= posteriors.row(t).sum();
    return posteriors;
}

/// Approximate EM for the SLDS. The E-step uses the GPB smoother, so the
/// log-likelihood trace is approximate and not guaranteed monotone; the
/// best-scoring iterate is returned. With a single switching state this
/// reduces exactly to the LDS EM.
inline std::pair<SldsParams, std::vector<double>> em_fit(const std::vector<std::vector<Vector>>& seqs,
                                                         const SldsParams& init,
                                                         const EmConfig& config = EmConfig()) {
    if (seqs.empty())
        throw EmptySequence("em_fit requires at least one sequence");
    if (config.max_iters < 1)
        throw InvalidParameter("max_iters must be at least 1");
    const Eigen::Index S = init.num_states();
    const Eigen::Index n = init.state_dim();
    const Eigen::Index m = init.obs_dim();

    SldsParams params = init;
    const auto total_loglik = [&](const SldsParams& p) {
        std::vector<double> lls(seqs.size(), 0.0);
        parallel_for(seqs.size(), [&](std::size_t i) { lls[i] = gpb_filter(p, seqs[i]).log_likelihood; });
        double total = 0.0;
        for (double v : lls)
            total += v;
        return total;
    };

    std::vector<double> trace;
    trace.push_back(total_loglik(params));
    SldsParams best = params;
    double best_ll = trace.front();

    for (int iter = 0; iter < config.max_iters; ++iter) {
        std::vector<detail::LdsSuffStats> stats(static_cast<std::size_t>(S),
                                                detail::LdsSuffStats(n, m));
        Matrix trans_counts = Matrix::Zero(S, S);
        Vector prior_counts = Vector::Zero(S);

        struct SeqStats {
            std::vector<detail::LdsSuffStats> per_state;
            Matrix trans = Matrix();
            Vector prior = Vector();
        };
        std::vector<SeqStats> per_seq(seqs.size());
        parallel_for(seqs.size(), [&](std::size_t sidx) {
            const auto& seq = seqs[sidx];
            const SldsFilterResult fr = gpb_filter(params, seq);
            const detail::GpbSmoothFull sm = detail::gpb_smooth_full(params, fr);
            SeqStats st;
            st.per_state.assign(static_cast<std::size_t>(S), detail::LdsSuffStats(n, m));
            st.trans = Matrix::Zero(S, S);
            st.prior = sm.switch_posteriors.row(0).transpose();
            for (Eigen::Index j = 0; j < S; ++j) {
                auto& acc = st.per_state[static_cast<std::size_t>(j)];
                acc.add_initial(sm.switch_posteriors(0, j),
                                sm.state_marginals[0][static_cast<std::size_t>(j)]);
                for (std::size_t t = 0; t < seq.size(); ++t)
                    acc.add_emission(sm.switch_posteriors(static_cast<Eigen::Index>(t), j),
                                     sm.state_marginals[t][static_cast<std::size_t>(j)], seq[t]);
                for (std::size_t t = 0; t + 1 < seq.size(); ++t)
                    for (Eigen::Index i = 0; i < S; ++i) {
                        const double w = sm.xi[t](i, j);
                        const auto& bm =
                            sm.branches[t][static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
                        acc.add_transition(w, bm.second_prev, bm.second_next, bm.cross);
                    }
            }
            for (std::size_t t = 0; t + 1 < seq.size(); ++t)
                st.trans += sm.xi[t];
            per_seq[sidx] = std::move(st);
        });
        for (const auto& st : per_seq) {
            for (Eigen::Index j = 0; j < S; ++j)
                stats[static_cast<std::size_t>(j)].merge(st.per_state[static_cast<std::size_t>(j)]);
            trans_counts += st.trans;
            prior_counts += st.prior;
        }

        std::vector<LdsParams> new_states;
        new_states.reserve(static_cast<std::size_t>(S));
        for (Eigen::Index j = 0; j < S; ++j)
            new_states.push_back(
                detail::lds_m_step(params.states[j], stats[static_cast<std::size_t>(j)], config));
        Matrix new_trans = params.switch_trans;
        for (Eigen::Index i = 0; i < S; ++i) {
            const double rowsum = trans_counts.row(i).sum();
            if (rowsum > 0.0)
                new_trans.row(i) = trans_counts.row(i) / rowsum;
        }
        Vector new_prior = prior_counts / static_cast<double>(seqs.size());
        new_prior /= new_prior.sum();
        params = SldsParams(std::move(new_states), std::move(new_trans), std::move(new_prior),
                            params.state_names);

        trace.push_back(total_loglik(params));
        if (trace.back() > best_ll) {
            best_ll = trace.back();
            best = params;
        }
        if (detail::em_should_stop(trace[trace.size() - 2], trace.back(), config.tol))
            break;
    }
    return {best, trace};
}

/// Builds the classification SLDS: one LDS per class fitted with exact EM on
/// that class's sequences only (training sequences never switch class), a
/// stay-probability transition matrix and a uniform switching prior. A and B
/// stay frozen to the template's structure by default.
inline SldsParams train_per_class(const std::vector<LabelledSequence>& train_set,
                                  const std::vector<std::string>& class_names,
                                  const LdsParams& template_params, double switch_stay_prob,
                                  const EmConfig& em_config = EmConfig::noise_only()) {
    const auto S = static_cast<Eigen::Index>(class_names.size());
    if (S < 1)
        throw InvalidParameter("at least one class is required");
    if (!(switch_stay_prob > 0.0) || !(switch_stay_prob < 1.0))
        throw InvalidParameter("switch_stay_prob must lie in (0, 1)");

    std::vector<LdsParams> fitted;
    fitted.reserve(static_cast<std::size_t>(S));
    for (Eigen::Index c = 0; c < S; ++c) {
        std::vector<std::vector<Vector>> seqs;
        for (const auto& ls : train_set)
            if (ls.label == static_cast<int>(c))
                seqs.push_back(ls.observations);
        if (seqs.empty())
            throw MissingClass("no training sequences for class " +
                               class_names[static_cast<std::size_t>(c)]);
        fitted.push_back(em_fit(seqs, template_params, em_config).first);
    }

    Matrix trans(S, S);
    const double off = S > 1 ? (1.0 - switch_stay_prob) / static_cast<double>(S - 1) : 0.0;
    for (Eigen::Index i = 0; i < S; ++i)
        for (Eigen::Index j = 0; j < S; ++j)
            trans(i, j) = i == j ? (S > 1 ? switch_stay_prob : 1.0) : off;
    Vector prior = Vector::Constant(S, 1.0 / static_cast<double>(S));
    return SldsParams(std::move(fitted), std::move(trans), std::move(prior), class_names);
}

/// Filters the sequence and aggregates the per-step switch posteriors into a
/// class label. Ties break toward the lowest class index.
inline std::pair<int, Matrix> classify(const SldsParams& p, const std::vector<Vector>& obs,
                                       ClassificationRule rule = ClassificationRule::FinalStep) {
    const SldsFilterResult fr = gpb_filter(p, obs);
    return {aggregate_trace(fr.switch_posteriors, rule), fr.switch_posteriors};
}

struct SldsSample {
    std::vector<Eigen::Index> switch_path;
    std::vector<Vector> latents;
    std::vector<Vector> observations;
};

/// Ancestral sampling of the full joint. Deterministic per seed.
inline SldsSample sample(const SldsParams& p, std::size_t T, std::uint64_t seed) {
    if (T < 1)
        throw InvalidParameter("T must be at least 1");
    std::mt19937_64 rng(seed);
    SldsSample out;
    out.switch_path.reserve(T);
    out.latents.reserve(T);
    out.observations.reserve(T);

    auto draw_discrete = [&](const Vector& probs) {
        std::uniform_real_distribution<double> u01(0.0, 1.0);
        double u = u01(rng), acc = 0.0;
        for (Eigen::Index j = 0; j < probs.size(); ++j) {
            acc += probs[j];
            if (u <= acc)
                return j;
        }
        return probs.size() - 1;
    };

    Eigen::Index s = draw_discrete(p.switch_prior);
    Vector h = sample(p.states[s].prior, rng);
    for (std::size_t t = 0; t < T; ++t) {
        if (t > 0) {
            s = draw_discrete(p.switch_trans.row(s).transpose());
            h = sample(Gaussian(p.states[s].A * h, p.states[s].sigma_h), rng);
        }
        out.switch_path.push_back(s);
        out.latents.push_back(h);
        out.observations.push_back(sample(Gaussian(p.states[s].B * h, p.states[s].sigma_v), rng));
    }
    return out;
}

}  // namespace switchbench
