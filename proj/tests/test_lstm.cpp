#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"

using namespace switchbench;
using namespace testsupport;

namespace {

std::vector<Vector> random_sequence(std::mt19937_64& rng, std::size_t T, Eigen::Index dim) {
    std::vector<Vector> xs;
    for (std::size_t t = 0; t < T; ++t)
        xs.push_back(random_vector(rng, dim));
    return xs;
}

// Per-coordinate reimplementation of the gate equations with plain scalars.
std::pair<Vector, Vector> scalar_cell_oracle(const LstmCellParams& p, const Vector& x,
                                             const Vector& h_prev, const Vector& c_prev) {
    const auto H = p.hidden_size();
    Vector h(H), c(H);
    for (Eigen::Index u = 0; u < H; ++u) {
        double ai = p.b_i[u], af = p.b_f[u], ao = p.b_o[u], ag = p.b_g[u];
        for (Eigen::Index j = 0; j < p.input_size(); ++j) {
            ai += p.W_i(u, j) * x[j];
            af += p.W_f(u, j) * x[j];
            ao += p.W_o(u, j) * x[j];
            ag += p.W_g(u, j) * x[j];
        }
        for (Eigen::Index j = 0; j < H; ++j) {
            ai += p.U_i(u, j) * h_prev[j];
            af += p.U_f(u, j) * h_prev[j];
            ao += p.U_o(u, j) * h_prev[j];
            ag += p.U_g(u, j) * h_prev[j];
        }
        const double i = 1.0 / (1.0 + std::exp(-ai));
        const double f = 1.0 / (1.0 + std::exp(-af));
        const double o = 1.0 / (1.0 + std::exp(-ao));
        const double g = std::tanh(ag);
        c[u] = f * c_prev[u] + i * g;
        h[u] = o * std::tanh(c[u]);
    }
    return {h, c};
}

LstmCellParams random_cell(std::mt19937_64& rng, Eigen::Index input, Eigen::Index hidden) {
    LstmCellParams p = LstmCellParams::zeros(input, hidden);
    for (Matrix* w : {&p.W_i, &p.W_f, &p.W_o, &p.W_g})
        *w = random_matrix(rng, hidden, input, 0.5);
    for (Matrix* u : {&p.U_i, &p.U_f, &p.U_o, &p.U_g})
        *u = random_matrix(rng, hidden, hidden, 0.5);
    for (Vector* b : {&p.b_i, &p.b_f, &p.b_o, &p.b_g})
        *b = random_vector(rng, hidden, 0.5);
    return p;
}

}  // namespace

TEST(CellForward, ZeroParametersClosedForm) {
    const LstmCellParams p = LstmCellParams::zeros(2, 3);
    Vector x = Vector::Ones(2);
    Vector h_prev = Vector::Zero(3);
    Vector c_prev(3);
    c_prev << 1.0, -2.0, 0.5;
    const auto [h, c] = cell_forward(p, x, h_prev, c_prev);
    for (Eigen::Index u = 0; u < 3; ++u) {
        EXPECT_NEAR(c[u], 0.5 * c_prev[u], 1e-15);
        EXPECT_NEAR(h[u], 0.5 * std::tanh(0.5 * c_prev[u]), 1e-15);
    }
}

TEST(CellForward, SaturatedForgetGateKeepsCellState) {
    LstmCellParams p = LstmCellParams::zeros(1, 2);
    p.b_f.setConstant(50.0);
    p.b_i.setConstant(-50.0);  // suppress the input gate contribution too
    Vector c_prev(2);
    c_prev << 0.7, -1.3;
    const auto [h, c] = cell_forward(p, Vector::Zero(1), Vector::Zero(2), c_prev);
    EXPECT_LT((c - c_prev).cwiseAbs().maxCoeff(), 1e-10);
    (void)h;
}

TEST(CellForward, MatchesScalarReimplementation) {
    auto rng = make_rng(120);
    for (int rep = 0; rep < 10; ++rep) {
        const LstmCellParams p = random_cell(rng, 2, 3);
        const Vector x = random_vector(rng, 2);
        const Vector h_prev = random_vector(rng, 3);
        const Vector c_prev = random_vector(rng, 3);
        const auto [h, c] = cell_forward(p, x, h_prev, c_prev);
        const auto [oh, oc] = scalar_cell_oracle(p, x, h_prev, c_prev);
        EXPECT_LT((h - oh).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_LT((c - oc).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(CellForward, DimensionMismatchThrows) {
    const LstmCellParams p = LstmCellParams::zeros(2, 3);
    EXPECT_THROW(cell_forward(p, Vector::Zero(3), Vector::Zero(3), Vector::Zero(3)),
                 DimensionMismatch);
    EXPECT_THROW(cell_forward(p, Vector::Zero(2), Vector::Zero(2), Vector::Zero(3)),
                 DimensionMismatch);
}

TEST(StackForward, SingleStepRowsSumToOne) {
    auto rng = make_rng(121);
    const LstmStack m = init_lstm_stack(2, 4, 4, 3, 9);
    const Matrix probs = stack_forward(m, {random_vector(rng, 2)});
    ASSERT_EQ(probs.rows(), 1);
    EXPECT_NEAR(probs.row(0).sum(), 1.0, 1e-9);
}

TEST(StackForward, TimeReversalSymmetry) {
    auto rng = make_rng(122);
    for (Eigen::Index layers = 1; layers <= 3; ++layers) {
        LstmStack m = init_lstm_stack(2, 3, 4, layers, 55 + static_cast<std::uint64_t>(layers));
        const auto xs = random_sequence(rng, 7, 2);

        // Reversing time swaps the roles of the two directions everywhere:
        // each layer's cells swap, and every consumer of a concatenated
        // [forward; backward] output swaps its input column halves.
        const Eigen::Index H = m.hidden_size();
        LstmStack swapped = m;
        for (auto& layer : swapped.layers)
            std::swap(layer.forward, layer.backward);
        auto swap_in_cols = [H](Matrix& w) {
            const Matrix orig = w;
            w.leftCols(H) = orig.rightCols(H);
            w.rightCols(H) = orig.leftCols(H);
        };
        for (Eigen::Index l = 1; l < layers; ++l)
            for (LstmCellParams* cell : {&swapped.layers[static_cast<std::size_t>(l)].forward,
                                         &swapped.layers[static_cast<std::size_t>(l)].backward})
                for (Matrix* w : {&cell->W_i, &cell->W_f, &cell->W_o, &cell->W_g})
                    swap_in_cols(*w);
        swap_in_cols(swapped.head_W);

        std::vector<Vector> reversed(xs.rbegin(), xs.rend());
        const Matrix a = stack_forward(m, xs);
        const Matrix b = stack_forward(swapped, reversed);
        for (Eigen::Index t = 0; t < a.rows(); ++t)
            EXPECT_LT((a.row(t) - b.row(a.rows() - 1 - t)).cwiseAbs().maxCoeff(), 1e-10)
                << "layers " << layers << " t " << t;
    }
}

TEST(StackForward, ZeroHeadGivesUniform) {
    auto rng = make_rng(123);
    LstmStack m = init_lstm_stack(2, 4, 4, 3, 1);
    m.head_W.setZero();
    m.head_b.setZero();
    const Matrix probs = stack_forward(m, random_sequence(rng, 5, 2));
    for (Eigen::Index t = 0; t < 5; ++t)
        for (Eigen::Index c = 0; c < 4; ++c)
            EXPECT_NEAR(probs(t, c), 0.25, 1e-12);
}

TEST(Loss, UniformIsLogC) {
    Matrix probs = Matrix::Constant(3, 4, 0.25);
    EXPECT_NEAR(loss(probs, {0, 1, 2}), std::log(4.0), 1e-12);
}

TEST(Loss, OneHotCorrectIsZero) {
    Matrix probs = Matrix::Zero(2, 4);
    probs(0, 1) = 1.0;
    probs(1, 1) = 1.0;
    EXPECT_LE(loss(probs, {1, 1}), 1e-7);
}

TEST(Loss, MatchesDirectFormula) {
    auto rng = make_rng(124);
    const LstmStack m = init_lstm_stack(2, 3, 4, 2, 3);
    const auto xs = random_sequence(rng, 6, 2);
    const Matrix probs = stack_forward(m, xs);
    const std::vector<int> labels{0, 3, 1, 2, 2, 0};
    double want = 0.0;
    for (int t = 0; t < 6; ++t)
        want -= std::log(probs(t, labels[static_cast<std::size_t>(t)]));
    want /= 6.0;
    EXPECT_NEAR(loss(probs, labels), want, 1e-12);
}

TEST(Loss, InvalidLabelThrows) {
    Matrix probs = Matrix::Constant(2, 4, 0.25);
    EXPECT_THROW(loss(probs, {0, 4}), InvalidLabel);
    EXPECT_THROW(loss(probs, {-1, 0}), InvalidLabel);
}

TEST(Backward, MatchesCentralFiniteDifferences) {
    auto rng = make_rng(125);
    const LstmStack m = init_lstm_stack(2, 3, 4, 3, 77);
    const auto xs = random_sequence(rng, 4, 2);
    const std::vector<int> labels{2, 2, 2, 2};
    EXPECT_LE(gradcheck_max_rel_error(m, xs, labels), 1e-5);
}

TEST(Backward, NearZeroGradientAtSaturatedCorrectHead) {
    auto rng = make_rng(126);
    LstmStack m = init_lstm_stack(2, 3, 4, 3, 5);
    m.head_W.setZero();
    m.head_b.setConstant(-50.0);
    m.head_b[1] = 50.0;  // probability ~1 on the labelled class at every step
    const auto xs = random_sequence(rng, 5, 2);
    const std::vector<int> labels(5, 1);
    LstmStackCache cache;
    const Matrix probs = stack_forward(m, xs, &cache);
    EXPECT_LE(loss(probs, labels), 1e-7);
    LstmStack grads = backward(m, cache, labels);
    EXPECT_LE(gradient_global_norm(grads), 1e-6);
}

TEST(Backward, MeanOverDuplicatedSequencesUnchanged) {
    auto rng = make_rng(127);
    const LstmStack m = init_lstm_stack(2, 3, 4, 2, 11);
    const auto xs = random_sequence(rng, 5, 2);
    const std::vector<int> labels(5, 3);
    LstmStackCache cache;
    stack_forward(m, xs, &cache);
    LstmStack g1 = backward(m, cache, labels);

    // Mean gradient over {seq, seq} equals the single-sequence gradient.
    LstmStack g2 = backward(m, cache, labels);
    auto v1 = tensor_views(g1);
    auto v2 = tensor_views(g2);
    for (std::size_t k = 0; k < v1.size(); ++k)
        for (std::ptrdiff_t i = 0; i < v1[k].second; ++i) {
            const double mean = 0.5 * (v1[k].first[i] + v2[k].first[i]);
            EXPECT_EQ(mean, v1[k].first[i]);
        }
}

TEST(Adam, ZeroGradientLeavesParameters) {
    LstmStack m = init_lstm_stack(2, 3, 4, 2, 13);
    const LstmStack before = m;
    AdamState st = AdamState::create(m);
    const LstmStack zero = LstmStack::zeros(2, 3, 4, 2);
    adam_step(st, m, zero);
    auto va = tensor_views(m);
    auto vb = tensor_views(const_cast<LstmStack&>(before));
    for (std::size_t k = 0; k < va.size(); ++k)
        for (std::ptrdiff_t i = 0; i < va[k].second; ++i)
            EXPECT_EQ(va[k].first[i], vb[k].first[i]);
}

TEST(Adam, FirstStepMagnitudeIsLearningRate) {
    LstmStack m = LstmStack::zeros(1, 2, 2, 1);
    AdamState st = AdamState::create(m, 0.25);
    LstmStack g = LstmStack::zeros(1, 2, 2, 1);
    for (auto [ptr, n] : tensor_views(g))
        for (std::ptrdiff_t i = 0; i < n; ++i)
            ptr[i] = (i % 2 == 0) ? 3.0 : -0.5;  // |g| >> eps
    adam_step(st, m, g);
    for (auto [ptr, n] : tensor_views(m))
        for (std::ptrdiff_t i = 0; i < n; ++i)
            EXPECT_NEAR(std::abs(ptr[i]), 0.25, 0.25 * 1e-6);
}

TEST(Adam, QuadraticConverges) {
    // f(theta) = theta^2 on a single parameter entry.
    LstmStack m = LstmStack::zeros(1, 1, 1, 1);
    auto views = tensor_views(m);
    double* theta = views[0].first;
    *theta = 1.0;
    AdamState st = AdamState::create(m, 0.1);
    for (int step = 0; step < 200; ++step) {
        LstmStack g = LstmStack::zeros(1, 1, 1, 1);
        tensor_views(g)[0].first[0] = 2.0 * (*theta);
        adam_step(st, m, g);
    }
    EXPECT_LT(std::abs(*theta), 0.05);
}

TEST(Train, LinearlySeparableToyReachesFullAccuracy) {
    // Two classes: constant features versus a steady trend.
    std::vector<LabelledSequence> toy;
    auto rng = make_rng(130);
    std::normal_distribution<double> noise(0.0, 0.05);
    for (int k = 0; k < 6; ++k) {
        LabelledSequence flat{0, {}};
        LabelledSequence trend{1, {}};
        for (int t = 0; t < 12; ++t) {
            Vector a(2), b(2);
            a << 0.5 + noise(rng), -0.5 + noise(rng);
            b << 0.1 * t + noise(rng), -0.1 * t + noise(rng);
            flat.observations.push_back(a);
            trend.observations.push_back(b);
        }
        toy.push_back(flat);
        toy.push_back(trend);
    }
    TrainConfig cfg;
    cfg.epochs = 200;
    cfg.seed = 7;
    cfg.hidden_size = 8;
    cfg.num_layers = 2;
    cfg.learning_rate = 1e-2;
    const TrainResult tr = train(toy, 2, cfg);
    int correct = 0;
    for (const auto& seq : toy)
        correct += classify(tr.model, seq.observations).first == seq.label ? 1 : 0;
    EXPECT_EQ(correct, static_cast<int>(toy.size()));
}

TEST(Train, DeterministicBitIdenticalModels) {
    auto rng = make_rng(131);
    std::vector<LabelledSequence> data;
    for (int k = 0; k < 4; ++k)
        data.push_back({k % 2, random_sequence(rng, 10, 2)});
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.seed = 99;
    cfg.hidden_size = 4;
    const TrainResult a = train(data, 2, cfg);
    const TrainResult b = train(data, 2, cfg);
    auto va = tensor_views(const_cast<LstmStack&>(a.model));
    auto vb = tensor_views(const_cast<LstmStack&>(b.model));
    for (std::size_t k = 0; k < va.size(); ++k)
        for (std::ptrdiff_t i = 0; i < va[k].second; ++i)
            EXPECT_EQ(va[k].first[i], vb[k].first[i]);
    EXPECT_EQ(a.epoch_losses, b.epoch_losses);
}

TEST(Train, LossDecreasesOverFullSchedule) {
    // Scaled-down analogue of the benchmark training run: same schedule,
    // smaller corpus and model.
    SynthSpec spec = SynthSpec::default_spec(321);
    spec.train_per_class = 3;
    spec.test_per_class = 1;
    for (auto& c : spec.classes) {
        c.len_min = std::min(c.len_min, 40);
        c.len_max = 60;
    }
    const SynthResult ds = synthesize(spec);
    const FeatureTransform tf = standardize(ds.train);
    const auto features = to_labelled_features(ds.train, tf);
    TrainConfig cfg;
    cfg.epochs = 110;
    cfg.seed = 17;
    cfg.hidden_size = 16;
    const TrainResult tr = train(features, 4, cfg);
    ASSERT_EQ(tr.epoch_losses.size(), 110u);
    EXPECT_LT(tr.epoch_losses.back(), tr.epoch_losses.front());
}

TEST(Classify, FourClassSyntheticDeskScaleAccuracy) {
    // Four heading classes with clean straight-line tracks; the trained
    // classifier must reach strong full-length test accuracy.
    SynthSpec spec;
    spec.seed = 77;
    spec.train_per_class = 8;
    spec.test_per_class = 6;
    auto mk = [](const std::string& name, double vx, double vz) {
        ClassDynamics c;
        c.name = name;
        c.init_mean = Vector::Zero(6);
        c.init_mean << 0.0, 14.0, vx, vz, 0.0, 0.0;
        c.init_std = Vector::Zero(6);
        c.init_std << 1.0, 1.0, 0.01, 0.01, 0.0001, 0.0001;
        c.accel_noise_x = 1e-10;
        c.accel_noise_z = 1e-10;
        c.obs_noise = 1e-4;
        c.len_min = 40;
        c.len_max = 70;
        return c;
    };
    spec.classes = {mk("East", 0.12, 0.0), mk("West", -0.12, 0.0), mk("Away", 0.0, 0.12),
                    mk("Toward", 0.0, -0.12)};
    const SynthResult ds = synthesize(spec);
    const FeatureTransform tf = standardize(ds.train);
    TrainConfig cfg;
    cfg.epochs = 110;
    cfg.seed = 5;
    cfg.hidden_size = 16;
    cfg.learning_rate = 1e-3;
    const TrainResult tr = train(to_labelled_features(ds.train, tf), 4, cfg);
    int correct = 0;
    for (const auto& seq : ds.test)
        correct += classify(tr.model, to_features(seq, tf)).first == seq.label ? 1 : 0;
    EXPECT_GE(static_cast<double>(correct) / static_cast<double>(ds.test.size()), 0.9);
}

TEST(Classify, ZeroHeadTieBreaksToClassZero) {
    auto rng = make_rng(133);
    LstmStack m = init_lstm_stack(2, 3, 4, 2, 3);
    m.head_W.setZero();
    m.head_b.setZero();
    for (auto rule : {ClassificationRule::FinalStep, ClassificationRule::MeanPosterior,
                      ClassificationRule::SumLog})
        EXPECT_EQ(classify(m, random_sequence(rng, 6, 2), rule).first, 0);
}

TEST(Classify, DominantClassUnderAllRules) {
    auto rng = make_rng(134);
    LstmStack m = init_lstm_stack(2, 3, 4, 2, 3);
    m.head_W.setZero();
    m.head_b.setConstant(-20.0);
    m.head_b[2] = 20.0;
    for (auto rule : {ClassificationRule::FinalStep, ClassificationRule::MeanPosterior,
                      ClassificationRule::SumLog})
        EXPECT_EQ(classify(m, random_sequence(rng, 6, 2), rule).first, 2);
}

TEST(Classify, TruncationUsesOnlyTheGivenWindow) {
    auto rng = make_rng(135);
    const LstmStack m = init_lstm_stack(2, 4, 4, 3, 21);
    auto xs = random_sequence(rng, 12, 2);
    const std::size_t L = 7;
    const std::vector<Vector> prefix(xs.begin(), xs.begin() + L);
    const auto [label_a, probs_a] = classify(m, prefix);

    xs[L] += Vector::Constant(2, 100.0);  // perturb beyond the window
    const std::vector<Vector> prefix_b(xs.begin(), xs.begin() + L);
    const auto [label_b, probs_b] = classify(m, prefix_b);
    EXPECT_EQ(label_a, label_b);
    EXPECT_EQ(probs_a, probs_b);
}

TEST(Properties, SoftmaxRowsAlwaysSumToOne) {
    auto rng = make_rng(136);
    for (int rep = 0; rep < 5; ++rep) {
        const LstmStack m = init_lstm_stack(2, 5, 4, 3, 200 + static_cast<std::uint64_t>(rep));
        const Matrix probs = stack_forward(m, random_sequence(rng, 9, 2));
        for (Eigen::Index t = 0; t < probs.rows(); ++t) {
            EXPECT_NEAR(probs.row(t).sum(), 1.0, 1e-9);
            EXPECT_GE(probs.row(t).minCoeff(), 0.0);
        }
    }
}

TEST(Properties, GradientCheckSweep) {
    // Small randomised instances across layer counts and lengths.
    std::uint64_t seed = 600;
    for (int rep = 0; rep < 5; ++rep) {
        auto rng = make_rng(seed);
        std::uniform_int_distribution<int> hd(2, 4), td(1, 5), ld(1, 3), cd(2, 4);
        const Eigen::Index hidden = hd(rng), layers = ld(rng), classes = cd(rng);
        const std::size_t T = static_cast<std::size_t>(td(rng));
        const LstmStack m = init_lstm_stack(2, hidden, classes, layers, seed);
        const auto xs = random_sequence(rng, T, 2);
        std::uniform_int_distribution<int> lab(0, static_cast<int>(classes) - 1);
        const std::vector<int> labels(T, lab(rng));
        EXPECT_LE(gradcheck_max_rel_error(m, xs, labels), 1e-5) << "seed " << seed;
        ++seed;
    }
}
