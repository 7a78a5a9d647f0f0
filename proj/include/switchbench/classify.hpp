#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "switchbench/gaussian.hpp"

namespace switchbench {

/// A sequence of vectors carrying one class label. Depending on the consumer
/// the vectors are raw observations (SLDS) or standardised features (RNN).
struct LabelledSequence {
    int label = 0;
    std::vector<Vector> observations;
};

/// How a per-timestep probability trace becomes one sequence label.
enum class ClassificationRule {
    FinalStep,      // argmax of the last row
    MeanPosterior,  // argmax of the time-averaged posterior
    SumLog,         // argmax of the summed log posterior
};

inline std::string to_string(ClassificationRule r) {
    switch (r) {
        case ClassificationRule::FinalStep: return "final";
        case ClassificationRule::MeanPosterior: return "mean";
        case ClassificationRule::SumLog: return "sumlog";
    }
    return "?";
}

/// Aggregates a T x C row-stochastic trace into a class index. Ties break
/// toward the lowest class index.
inline int aggregate_trace(const Matrix& trace, ClassificationRule rule) {
    if (trace.rows() == 0 || trace.cols() == 0)
        throw EmptySequence("cannot aggregate an empty trace");
    const Eigen::Index C = trace.cols();
    Vector score(C);
    switch (rule) {
        case ClassificationRule::FinalStep:
            score = trace.row(trace.rows() - 1).transpose();
            break;
        case ClassificationRule::MeanPosterior:
            score = trace.colwise().mean().transpose();
            break;
        case ClassificationRule::SumLog:
            score = trace.array().max(1e-12).log().colwise().sum().transpose();
            break;
    }
    int best = 0;
    for (Eigen::Index c = 1; c < C; ++c)
        if (score[c] > score[best])
            best = static_cast<int>(c);
    return best;
}

}  // namespace switchbench
