#pragma once

#include <string>
#include <vector>

#include "ealm/ealm.hpp"
#include "ealm/report.hpp"
#include "ealm/textdata.hpp"

namespace ealm {

namespace detail {

inline void fold_into_report(EvalReport& report, const Utterance& u, int64_t line_no, double nll,
                             int n_tokens) {
    report.all.n_utterances++;
    report.all.n_tokens += n_tokens;
    report.all.total_nll += nll;
    for (const auto& type : u.entity_types_present) {
        SliceStats& s = report.per_type[type];
        s.n_utterances++;
        s.n_tokens += n_tokens;
        s.total_nll += nll;
    }
    report.per_utterance.push_back({line_no, n_tokens, nll});
}

}  // namespace detail

// Teacher-forced perplexity of the standalone pre-trained LM.
template <class Real>
EvalReport evaluate_pretrained(const PretrainedLM<Real>& lm, const std::vector<Utterance>& testset,
                               const std::string& testset_name) {
    EvalReport report;
    report.testset_name = testset_name;
    report.model_name = "pretrained";
    Rng rng(0);
    for (size_t i = 0; i < testset.size(); i++) {
        const Utterance& u = testset[i];
        if (u.tokens.size() < 2) continue;
        auto out = lm.forward(u.tokens, false, rng);
        const int t = out.logits.rows();
        std::vector<TokenId> targets(u.tokens.begin() + 1, u.tokens.begin() + t);
        double nll = cross_entropy(row_slice(out.logits, 0, t - 1), targets).item() *
                     static_cast<double>(targets.size());
        detail::fold_into_report(report, u, static_cast<int64_t>(i), nll,
                                 static_cast<int>(targets.size()));
    }
    return report;
}

// Teacher-forced perplexity of the composed EALM.
template <class Real>
EvalReport evaluate_ealm(const EntityAwareLM<Real>& lm, const std::vector<Utterance>& testset,
                         const std::string& testset_name, ComposeCache<Real>* cache) {
    EvalReport report;
    report.testset_name = testset_name;
    report.model_name = "ealm";
    report.checkpoint_hashes = lm.component_hashes;
    for (size_t i = 0; i < testset.size(); i++) {
        const Utterance& u = testset[i];
        if (u.tokens.size() < 2) continue;
        UtteranceEval ev = lm.eval_utterance(u.tokens, nullptr, cache);
        detail::fold_into_report(report, u, static_cast<int64_t>(i), ev.nll, ev.n_tokens);
    }
    return report;
}

// Mean pfusion mass assigned to one entity model, split by whether the
// predicted token lies inside a gold span of that type.
struct MassSplit {
    double in_entity_mass = 0;
    int64_t in_entity_count = 0;
    double carrier_mass = 0;
    int64_t carrier_count = 0;
};

template <class Real>
MassSplit pfusion_mass_split(const EntityAwareLM<Real>& lm, const std::vector<Utterance>& testset,
                             const std::string& entity_type, ComposeCache<Real>* cache) {
    const int column = lm.fusion.class_index(entity_type);
    MassSplit ms;
    for (const auto& u : testset) {
        if (u.tokens.size() < 2) continue;
        UtteranceEval ev = lm.eval_utterance(u.tokens, nullptr, cache, true);
        for (size_t pos = 0; pos < ev.trace.size(); pos++) {
            const double mass = ev.trace[pos].pfusion[column];
            const bool inside = pos < u.in_entity.size() && u.in_entity[pos];
            if (inside) {
                ms.in_entity_mass += mass;
                ms.in_entity_count++;
            } else {
                ms.carrier_mass += mass;
                ms.carrier_count++;
            }
        }
    }
    return ms;
}

}  // namespace ealm
