#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <utility>
#include <vector>

#include "switchbench/classify.hpp"

namespace switchbench {

/// One LSTM cell: sigmoid input/forget/output gates, tanh candidate,
/// c_t = f*c_{t-1} + i*g, h_t = o*tanh(c_t).
struct LstmCellParams {
    Matrix W_i, W_f, W_o, W_g;  // hidden x input
    Matrix U_i, U_f, U_o, U_g;  // hidden x hidden
    Vector b_i, b_f, b_o, b_g;  // hidden

    static LstmCellParams zeros(Eigen::Index input, Eigen::Index hidden) {
        LstmCellParams p;
        for (Matrix* w : {&p.W_i, &p.W_f, &p.W_o, &p.W_g})
            *w = Matrix::Zero(hidden, input);
        for (Matrix* u : {&p.U_i, &p.U_f, &p.U_o, &p.U_g})
            *u = Matrix::Zero(hidden, hidden);
        for (Vector* b : {&p.b_i, &p.b_f, &p.b_o, &p.b_g})
            *b = Vector::Zero(hidden);
        return p;
    }

    Eigen::Index hidden_size() const { return W_i.rows(); }
    Eigen::Index input_size() const { return W_i.cols(); }
};

struct LstmLayerParams {
    LstmCellParams forward;
    LstmCellParams backward;
};

/// Stacked bi-directional LSTM with a per-step softmax head. Layer 1 consumes
/// the feature vectors; every later layer consumes the concatenated
/// forward/backward outputs of the layer below.
struct LstmStack {
    std::vector<LstmLayerParams> layers;
    Matrix head_W;  // classes x 2*hidden
    Vector head_b;  // classes

    Eigen::Index num_layers() const { return static_cast<Eigen::Index>(layers.size()); }
    Eigen::Index hidden_size() const { return layers.front().forward.hidden_size(); }
    Eigen::Index input_dim() const { return layers.front().forward.input_size(); }
    Eigen::Index num_classes() const { return head_W.rows(); }

    static LstmStack zeros(Eigen::Index input_dim, Eigen::Index hidden, Eigen::Index classes,
                           Eigen::Index num_layers) {
        if (input_dim < 1 || hidden < 1 || classes < 1 || num_layers < 1)
            throw InvalidParameter("stack dimensions must be positive");
        LstmStack s;
        for (Eigen::Index l = 0; l < num_layers; ++l) {
            const Eigen::Index in = l == 0 ? input_dim : 2 * hidden;
            s.layers.push_back({LstmCellParams::zeros(in, hidden), LstmCellParams::zeros(in, hidden)});
        }
        s.head_W = Matrix::Zero(classes, 2 * hidden);
        s.head_b = Vector::Zero(classes);
        return s;
    }
};

/// Deterministic list of (pointer, size) views over every parameter tensor of
/// a stack, in a fixed order. The optimiser, the clipper and the finite
/// difference checks all walk parameters through this.
inline std::vector<std::pair<double*, std::ptrdiff_t>> tensor_views(LstmStack& s) {
    std::vector<std::pair<double*, std::ptrdiff_t>> views;
    for (auto& layer : s.layers)
        for (LstmCellParams* cell : {&layer.forward, &layer.backward}) {
            for (Matrix* t : {&cell->W_i, &cell->W_f, &cell->W_o, &cell->W_g, &cell->U_i,
                              &cell->U_f, &cell->U_o, &cell->U_g})
                views.emplace_back(t->data(), t->size());
            for (Vector* t : {&cell->b_i, &cell->b_f, &cell->b_o, &cell->b_g})
                views.emplace_back(t->data(), t->size());
        }
    views.emplace_back(s.head_W.data(), s.head_W.size());
    views.emplace_back(s.head_b.data(), s.head_b.size());
    return views;
}

/// Seeded initialisation: weights uniform in +-1/sqrt(fan_in), biases zero
/// except the forget gate bias at 1.0.
inline LstmStack init_lstm_stack(Eigen::Index input_dim, Eigen::Index hidden, Eigen::Index classes,
                                 Eigen::Index num_layers, std::uint64_t seed) {
    LstmStack s = LstmStack::zeros(input_dim, hidden, classes, num_layers);
    std::mt19937_64 rng(seed);
    auto fill_uniform = [&](Matrix& m, double bound) {
        std::uniform_real_distribution<double> u(-bound, bound);
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            for (Eigen::Index r = 0; r < m.rows(); ++r)
                m(r, c) = u(rng);
    };
    for (auto& layer : s.layers)
        for (LstmCellParams* cell : {&layer.forward, &layer.backward}) {
            const double wb = 1.0 / std::sqrt(static_cast<double>(cell->input_size()));
            const double ub = 1.0 / std::sqrt(static_cast<double>(cell->hidden_size()));
            for (Matrix* w : {&cell->W_i, &cell->W_f, &cell->W_o, &cell->W_g})
                fill_uniform(*w, wb);
            for (Matrix* u : {&cell->U_i, &cell->U_f, &cell->U_o, &cell->U_g})
                fill_uniform(*u, ub);
            cell->b_f.setOnes();
        }
    fill_uniform(s.head_W, 1.0 / std::sqrt(static_cast<double>(s.head_W.cols())));
    return s;
}

struct LstmCellCache {
    Vector x, h_prev, c_prev;
    Vector i, f, o, g, c, tanh_c;
};

inline Vector sigmoid(const Vector& a) {
    return (1.0 / (1.0 + (-a.array()).exp())).matrix();
}

/// Single cell step; the cache keeps everything the backward pass needs.
inline std::pair<Vector, Vector> cell_forward(const LstmCellParams& p, const Vector& x,
                                              const Vector& h_prev, const Vector& c_prev,
                                              LstmCellCache* cache = nullptr) {
    if (x.size() != p.input_size())
        throw DimensionMismatch("cell input size mismatch");
    if (h_prev.size() != p.hidden_size() || c_prev.size() != p.hidden_size())
        throw DimensionMismatch("cell state size mismatch");
    const Vector i = sigmoid(p.W_i * x + p.U_i * h_prev + p.b_i);
    const Vector f = sigmoid(p.W_f * x + p.U_f * h_prev + p.b_f);
    const Vector o = sigmoid(p.W_o * x + p.U_o * h_prev + p.b_o);
    const Vector g = (p.W_g * x + p.U_g * h_prev + p.b_g).array().tanh().matrix();
    const Vector c = (f.array() * c_prev.array() + i.array() * g.array()).matrix();
    const Vector tanh_c = c.array().tanh().matrix();
    Vector h = (o.array() * tanh_c.array()).matrix();
    if (cache)
        *cache = {x, h_prev, c_prev, i, f, o, g, c, tanh_c};
    return {std::move(h), c};
}

struct LstmStackCache {
    // layer_inputs[l][t] is the input to layer l; the last entry holds the
    // concatenated output of the final layer (the head input).
    std::vector<std::vector<Vector>> layer_inputs;
    // cells[l][d][t], d = 0 forward direction, 1 backward direction.
    std::vector<std::array<std::vector<LstmCellCache>, 2>> cells;
    Matrix probs;  // T x C
};

/// Full stack forward pass: per layer one pass in each time direction from
/// zero initial state, concatenation per step, then the softmax head.
inline Matrix stack_forward(const LstmStack& m, const std::vector<Vector>& xs,
                            LstmStackCache* cache = nullptr) {
    if (xs.empty())
        throw EmptySequence("stack_forward requires a non-empty sequence");
    const auto T = xs.size();
    const Eigen::Index H = m.hidden_size();
    if (xs.front().size() != m.input_dim())
        throw DimensionMismatch("feature dimension does not match layer 1 input size");

    std::vector<Vector> current = xs;
    if (cache) {
        cache->layer_inputs.clear();
        cache->cells.assign(static_cast<std::size_t>(m.num_layers()), {});
    }
    for (Eigen::Index l = 0; l < m.num_layers(); ++l) {
        if (cache)
            cache->layer_inputs.push_back(current);
        const LstmLayerParams& layer = m.layers[static_cast<std::size_t>(l)];
        std::vector<Vector> h_fwd(T), h_bwd(T);
        std::vector<LstmCellCache>* cc_f = nullptr;
        std::vector<LstmCellCache>* cc_b = nullptr;
        if (cache) {
            cache->cells[static_cast<std::size_t>(l)][0].resize(T);
            cache->cells[static_cast<std::size_t>(l)][1].resize(T);
            cc_f = &cache->cells[static_cast<std::size_t>(l)][0];
            cc_b = &cache->cells[static_cast<std::size_t>(l)][1];
        }
        Vector h = Vector::Zero(H), c = Vector::Zero(H);
        for (std::size_t t = 0; t < T; ++t) {
            auto hc = cell_forward(layer.forward, current[t], h, c,
                                   cc_f ? &(*cc_f)[t] : nullptr);
            h = std::move(hc.first);
            c = std::move(hc.second);
            h_fwd[t] = h;
        }
        h.setZero();
        c.setZero();
        for (std::size_t t = T; t-- > 0;) {
            auto hc = cell_forward(layer.backward, current[t], h, c,
                                   cc_b ? &(*cc_b)[t] : nullptr);
            h = std::move(hc.first);
            c = std::move(hc.second);
            h_bwd[t] = h;
        }
        for (std::size_t t = 0; t < T; ++t) {
            Vector cat(2 * H);
            cat << h_fwd[t], h_bwd[t];
            current[t] = std::move(cat);
        }
    }
    if (cache)
        cache->layer_inputs.push_back(current);

    Matrix probs(static_cast<Eigen::Index>(T), m.num_classes());
    for (std::size_t t = 0; t < T; ++t) {
        Vector logits = m.head_W * current[t] + m.head_b;
        const double mx = logits.maxCoeff();
        Vector e = (logits.array() - mx).exp();
        probs.row(static_cast<Eigen::Index>(t)) = (e / e.sum()).transpose();
    }
    if (cache)
        cache->probs = probs;
    return probs;
}

/// Mean per-timestep cross entropy with a 1e-12 probability floor.
inline double loss(const Matrix& probs, const std::vector<int>& labels) {
    if (static_cast<std::size_t>(probs.rows()) != labels.size())
        throw DimensionMismatch("label count does not match timestep count");
    double total = 0.0;
    for (std::size_t t = 0; t < labels.size(); ++t) {
        if (labels[t] < 0 || labels[t] >= probs.cols())
            throw InvalidLabel("label out of range at step " + std::to_string(t));
        const double p = std::min(std::max(probs(static_cast<Eigen::Index>(t), labels[t]), 1e-12), 1.0);
        total -= std::log(p);
    }
    return total / static_cast<double>(labels.size());
}

namespace detail {

/// Reverse-mode step through one cell. Accumulates parameter gradients and
/// returns the gradients w.r.t. the cell inputs.
inline void cell_backward(const LstmCellParams& p, const LstmCellCache& cc, const Vector& dh,
                          const Vector& dc_in, LstmCellParams& grad, Vector& dx, Vector& dh_prev,
                          Vector& dc_prev) {
    const Vector d_o = (dh.array() * cc.tanh_c.array()).matrix();
    const Vector dc =
        (dc_in.array() + dh.array() * cc.o.array() * (1.0 - cc.tanh_c.array().square())).matrix();
    const Vector d_i = (dc.array() * cc.g.array()).matrix();
    const Vector d_f = (dc.array() * cc.c_prev.array()).matrix();
    const Vector d_g = (dc.array() * cc.i.array()).matrix();
    dc_prev = (dc.array() * cc.f.array()).matrix();

    const Vector da_i = (d_i.array() * cc.i.array() * (1.0 - cc.i.array())).matrix();
    const Vector da_f = (d_f.array() * cc.f.array() * (1.0 - cc.f.array())).matrix();
    const Vector da_o = (d_o.array() * cc.o.array() * (1.0 - cc.o.array())).matrix();
    const Vector da_g = (d_g.array() * (1.0 - cc.g.array().square())).matrix();

    grad.W_i.noalias() += da_i * cc.x.transpose();
    grad.W_f.noalias() += da_f * cc.x.transpose();
    grad.W_o.noalias() += da_o * cc.x.transpose();
    grad.W_g.noalias() += da_g * cc.x.transpose();
    grad.U_i.noalias() += da_i * cc.h_prev.transpose();
    grad.U_f.noalias() += da_f * cc.h_prev.transpose();
    grad.U_o.noalias() += da_o * cc.h_prev.transpose();
    grad.U_g.noalias() += da_g * cc.h_prev.transpose();
    grad.b_i += da_i;
    grad.b_f += da_f;
    grad.b_o += da_o;
    grad.b_g += da_g;

    dx.noalias() = p.W_i.transpose() * da_i;
    dx.noalias() += p.W_f.transpose() * da_f;
    dx.noalias() += p.W_o.transpose() * da_o;
    dx.noalias() += p.W_g.transpose() * da_g;
    dh_prev.noalias() = p.U_i.transpose() * da_i;
    dh_prev.noalias() += p.U_f.transpose() * da_f;
    dh_prev.noalias() += p.U_o.transpose() * da_o;
    dh_prev.noalias() += p.U_g.transpose() * da_g;
}

}  // namespace detail

/// Exact gradients of loss() w.r.t. every stack parameter via backpropagation
/// through time over all layers and both directions.
inline LstmStack backward(const LstmStack& m, const LstmStackCache& cache,
                          const std::vector<int>& labels) {
    const auto T = static_cast<std::size_t>(cache.probs.rows());
    if (labels.size() != T)
        throw DimensionMismatch("label count does not match cached timestep count");
    const Eigen::Index H = m.hidden_size();
    LstmStack grad = LstmStack::zeros(m.input_dim(), H, m.num_classes(), m.num_layers());

    // Softmax + cross entropy head.
    const std::vector<Vector>& head_in = cache.layer_inputs.back();
    std::vector<Vector> dcat(T, Vector::Zero(2 * H));
    for (std::size_t t = 0; t < T; ++t) {
        Vector dlogit = cache.probs.row(static_cast<Eigen::Index>(t)).transpose();
        dlogit[labels[t]] -= 1.0;
        dlogit /= static_cast<double>(T);
        grad.head_W.noalias() += dlogit * head_in[t].transpose();
        grad.head_b += dlogit;
        dcat[t].noalias() = m.head_W.transpose() * dlogit;
    }

    for (Eigen::Index l = m.num_layers(); l-- > 0;) {
        const LstmLayerParams& layer = m.layers[static_cast<std::size_t>(l)];
        LstmLayerParams& lgrad = grad.layers[static_cast<std::size_t>(l)];
        const auto& cc_f = cache.cells[static_cast<std::size_t>(l)][0];
        const auto& cc_b = cache.cells[static_cast<std::size_t>(l)][1];
        const Eigen::Index in_size = layer.forward.input_size();
        std::vector<Vector> dx(T, Vector::Zero(in_size));

        Vector dh_carry = Vector::Zero(H), dc_carry = Vector::Zero(H);
        Vector dxt(in_size), dhp(H), dcp(H);
        for (std::size_t t = T; t-- > 0;) {
            const Vector dh = dcat[t].head(H) + dh_carry;
            detail::cell_backward(layer.forward, cc_f[t], dh, dc_carry, lgrad.forward, dxt, dhp, dcp);
            dx[t] += dxt;
            dh_carry = dhp;
            dc_carry = dcp;
        }
        dh_carry.setZero();
        dc_carry.setZero();
        // The backward direction processes t = T-1..0, so its reverse-mode
        // sweep runs t = 0..T-1 and carries gradients toward larger t.
        for (std::size_t t = 0; t < T; ++t) {
            const Vector dh = dcat[t].tail(H) + dh_carry;
            detail::cell_backward(layer.backward, cc_b[t], dh, dc_carry, lgrad.backward, dxt, dhp, dcp);
            dx[t] += dxt;
            dh_carry = dhp;
            dc_carry = dcp;
        }
        dcat = std::move(dx);  // becomes d(concat) of the layer below
    }
    return grad;
}

/// Bias-corrected ADAM with the cited defaults.
struct AdamState {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step = 0;
    LstmStack m, v;

    static AdamState create(const LstmStack& params, double lr = 1e-4) {
        AdamState st;
        st.learning_rate = lr;
        st.m = LstmStack::zeros(params.input_dim(), params.hidden_size(), params.num_classes(),
                                params.num_layers());
        st.v = st.m;
        return st;
    }
};

inline void adam_step(AdamState& state, LstmStack& params, const LstmStack& grads) {
    state.step += 1;
    auto pv = tensor_views(params);
    auto gv = tensor_views(const_cast<LstmStack&>(grads));
    auto mv = tensor_views(state.m);
    auto vv = tensor_views(state.v);
    if (pv.size() != gv.size())
        throw DimensionMismatch("gradient structure does not match parameters");
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t k = 0; k < pv.size(); ++k) {
        if (pv[k].second != gv[k].second)
            throw DimensionMismatch("gradient tensor shape mismatch");
        double* p = pv[k].first;
        const double* g = gv[k].first;
        double* mm = mv[k].first;
        double* vvv = vv[k].first;
        for (std::ptrdiff_t i = 0; i < pv[k].second; ++i) {
            mm[i] = state.beta1 * mm[i] + (1.0 - state.beta1) * g[i];
            vvv[i] = state.beta2 * vvv[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double mhat = mm[i] / bc1;
            const double vhat = vvv[i] / bc2;
            p[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

inline double gradient_global_norm(LstmStack& grads) {
    double sq = 0.0;
    for (auto [ptr, n] : tensor_views(grads))
        for (std::ptrdiff_t i = 0; i < n; ++i)
            sq += ptr[i] * ptr[i];
    return std::sqrt(sq);
}

inline void clip_gradients(LstmStack& grads, double max_norm) {
    if (!(max_norm > 0.0))
        return;
    const double norm = gradient_global_norm(grads);
    if (norm <= max_norm)
        return;
    const double scale = max_norm / norm;
    for (auto [ptr, n] : tensor_views(grads))
        for (std::ptrdiff_t i = 0; i < n; ++i)
            ptr[i] *= scale;
}

struct TrainConfig {
    int epochs = 110;
    int batch_size = 1;
    std::uint64_t seed = 0;
    double grad_clip = 5.0;
    double learning_rate = 1e-4;
    Eigen::Index hidden_size = 32;
    Eigen::Index num_layers = 3;
};

struct TrainResult {
    LstmStack model;
    std::vector<double> epoch_losses;  // mean sequence loss per epoch
};

/// Trains from scratch: seeded init, one ADAM step per sequence in a
/// seed-shuffled order each epoch. Every step labels all timesteps of a
/// sequence with its class. Deterministic per (data, config).
inline TrainResult train(const std::vector<LabelledSequence>& train_set, Eigen::Index num_classes,
                         const TrainConfig& cfg) {
    if (train_set.empty())
        throw EmptySequence("training set is empty");
    if (cfg.epochs < 1)
        throw InvalidParameter("epochs must be at least 1");
    if (cfg.batch_size != 1)
        throw InvalidParameter("only batch size 1 is supported");
    const Eigen::Index input_dim = train_set.front().observations.front().size();

    TrainResult out;
    out.model = init_lstm_stack(input_dim, cfg.hidden_size, num_classes, cfg.num_layers, cfg.seed);
    AdamState opt = AdamState::create(out.model, cfg.learning_rate);
    std::mt19937_64 shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);

    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double epoch_loss = 0.0;
        for (std::size_t idx : order) {
            const auto& seq = train_set[idx];
            const std::vector<int> labels(seq.observations.size(), seq.label);
            LstmStackCache cache;
            const Matrix probs = stack_forward(out.model, seq.observations, &cache);
            epoch_loss += loss(probs, labels);
            LstmStack grads = backward(out.model, cache, labels);
            clip_gradients(grads, cfg.grad_clip);
            adam_step(opt, out.model, grads);
        }
        out.epoch_losses.push_back(epoch_loss / static_cast<double>(train_set.size()));
    }
    return out;
}

/// Runs the stack and aggregates the per-step class probabilities into one
/// label (time-averaged posterior by default). Ties break toward the lowest
/// class index.
inline std::pair<int, Matrix> classify(const LstmStack& m, const std::vector<Vector>& xs,
                                       ClassificationRule rule = ClassificationRule::MeanPosterior) {
    const Matrix probs = stack_forward(m, xs);
    return {aggregate_trace(probs, rule), probs};
}

}  // namespace switchbench
