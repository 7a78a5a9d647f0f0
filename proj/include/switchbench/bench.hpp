#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "switchbench/eval.hpp"
#include "switchbench/model_io.hpp"

namespace switchbench {

/// Wraps an SLDS as a track classifier: raw (x, z) observations in, filtered
/// switch posteriors out.
inline NamedClassifier slds_classifier(std::string name, SldsParams params,
                                       ClassificationRule rule = ClassificationRule::FinalStep) {
    auto p = std::make_shared<SldsParams>(std::move(params));
    return {std::move(name), [p, rule](const TrackSequence& seq) {
                return classify(*p, to_observations(seq), rule);
            }};
}

/// Wraps a trained RNN as a track classifier: the model's stored feature
/// standardisation is applied before the stack runs.
inline NamedClassifier rnn_classifier(std::string name, RnnModel model,
                                      ClassificationRule rule = ClassificationRule::MeanPosterior) {
    auto m = std::make_shared<RnnModel>(std::move(model));
    return {std::move(name), [m, rule](const TrackSequence& seq) {
                return classify(m->stack, to_features(seq, m->transform), rule);
            }};
}

inline std::vector<LabelledSequence> to_labelled_observations(const std::vector<TrackSequence>& seqs) {
    std::vector<LabelledSequence> out;
    out.reserve(seqs.size());
    for (const auto& s : seqs)
        out.push_back({s.label, to_observations(s)});
    return out;
}

inline std::vector<LabelledSequence> to_labelled_features(const std::vector<TrackSequence>& seqs,
                                                          const FeatureTransform& t) {
    std::vector<LabelledSequence> out;
    out.reserve(seqs.size());
    for (const auto& s : seqs)
        out.push_back({s.label, to_features(s, t)});
    return out;
}

}  // namespace switchbench
