#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace ealm {

struct SliceStats {
    int64_t n_utterances = 0;
    int64_t n_tokens = 0;
    double total_nll = 0;

    double perplexity() const { return n_tokens ? std::exp(total_nll / n_tokens) : 0.0; }
};

// Perplexity totals plus a per-entity-type breakdown over utterances that
// contain at least one entity of that type. Slices with no utterances are
// absent, never zero. relative reduction = (base - new) / base on
// perplexity.
struct EvalReport {
    std::string testset_name;
    std::string model_name;
    uint64_t seed = 0;
    SliceStats all;
    std::map<std::string, SliceStats> per_type;
    std::vector<std::pair<std::string, std::string>> checkpoint_hashes;
    // raw sidecar rows: (line_no, tokens, nll)
    std::vector<std::tuple<int64_t, int64_t, double>> per_utterance;

    double relative_reduction_vs(const EvalReport& base) const {
        double b = base.all.perplexity();
        return (b - all.perplexity()) / b;
    }

    // TSV with '#' header lines; baseline adds a reduction column. The raw
    // NLL sidecar lands next to it as <path>.nll.tsv.
    void save(const std::string& path, const EvalReport* baseline = nullptr) const;
    static EvalReport load(const std::string& path);
};

// one row per predicted token of an utterance
struct PositionTrace {
    std::string token;
    std::vector<double> pfusion;                // pre-trained first, then manifest order
    std::vector<std::vector<double>> pcontext;  // per entity model, k+1 columns each
};

// Tab-separated trace: header row naming every column, one row per
// timestep with values rounded to 2 decimals; full precision goes to
// <path>.full.tsv.
void write_trace(const std::vector<PositionTrace>& trace,
                 const std::vector<std::string>& entity_types, int k, const std::string& path);

}  // namespace ealm
