#pragma once

#include <map>
#include <string>
#include <vector>

#include "ealm/config.hpp"
#include "ealm/ealm.hpp"
#include "ealm/eval.hpp"
#include "ealm/textdata.hpp"

namespace ealm {

// training and composition run in 32-bit; oracles use the 64-bit engine
using PReal = float;

// ---- desk-scale experiment configuration ----

struct DeskConfig {
    SynthWorldConfig world;
    int corpus_utterances = 8000;
    double slot_rate = 0.75;
    double coverage = 0.55;  // probability mass of slot fills covered by catalogues
    int bpe_merges = 512;
    int max_len = 32;

    int pre_layers = 2, d_model = 64, d_ff = 128, n_heads = 4;
    double pre_dropout = 0.1;
    LrSchedule pre_sched{1e-5, 3e-3, 3e-4, 4096, 65536, 0.9};
    int pre_epochs = 2, pre_accum = 2;

    int ent_layers = 2, k = 4;
    double ent_dropout = 0.1;
    LrSchedule ent_sched{1e-5, 3e-3, 3e-4, 2048, 131072, 0.9};
    int ent_samples = 9000, ent_accum = 2;

    double fus_dropout = 0.1, fus_dropout_entity = 0.25;
    LrSchedule fus_sched{1e-5, 3e-4, 3e-5, 256, 65536, 0.9};
    int fus_epochs = 12, fus_accum = 2;
    double fusion_fraction = 0.3;  // fraction of the pre-training corpus

    int test_utterances = 300;
    uint64_t seed = 1;
};

// Everything one pipeline run produces, kept in memory so the swap and
// catalogue-fraction experiments can run incrementally on top.
struct DeskArtifacts {
    SynthWorld world;
    Vocabulary vocab;
    Corpus pre_corpus;
    std::vector<Utterance> pre_tokens;
    std::vector<Utterance> fusion_tokens;
    Checkpoint pre_ck;
    std::vector<Checkpoint> ent_cks;  // manifest order = world catalogue order
    std::vector<std::string> entity_types;
    Checkpoint fus_ck;
    std::map<std::string, std::vector<Utterance>> testsets;  // general / seen / tail / new
    int64_t corpus_tokens = 0;
};

// three-stage pipeline over a synthetic world; pure function of (cfg, seed)
DeskArtifacts run_desk_pipeline(const DeskConfig& cfg, uint64_t seed, bool verbose = false);

struct TailEval {
    EvalReport pre_general, pre_seen, pre_tail;
    EvalReport ealm_general, ealm_seen, ealm_tail;
    double general_reduction = 0, seen_reduction = 0, tail_reduction = 0;
};

TailEval evaluate_tail(const DeskArtifacts& art, bool verbose = false);

struct SwapEval {
    std::string swapped_type;
    double new_reduction_before = 0, new_reduction_after = 0;
    double general_reduction_before = 0, general_reduction_after = 0;
    // relative growth of EALM general-set perplexity caused by the swap;
    // equals the loss in reduction percentage points up to the baseline ppl
    double general_degradation = 0;
    std::vector<std::string> skipped_additions;
};

// retrain one entity model with the world's novel entities placed at the
// top popularity ranks, hot-swap it without touching the fusion layer.
// An empty entity_type picks the model the fusion layer routes to most
// (mean in-entity pfusion mass on the entity-seen test set).
SwapEval run_swap_experiment(const DeskConfig& cfg, const DeskArtifacts& art,
                             std::string entity_type, uint64_t seed,
                             double top_rank_fraction = 0.05, bool verbose = false);

struct FractionRow {
    double fraction = 0;
    std::string label;
    double general_reduction = 0;
    double tailnew_reduction = 0;
};

struct FractionEval {
    std::vector<FractionRow> rows;  // entity25 then retrained sets ascending
    double noise_band = 0;          // |entity25 - retrained25| on the general set
};

// slices the catalogues to the given top fractions, trains entity sets and
// a fusion layer on the smallest-fraction models, then swaps each retrained
// set in; the tail-new test set draws from bottom-75% held-out entities
FractionEval run_fraction_study(const DeskConfig& cfg, const DeskArtifacts& art,
                                const std::vector<double>& fractions, uint64_t seed,
                                bool verbose = false);

// ---- EALM manifest file (key-value, points at component checkpoints) ----

struct EalmManifest {
    std::string vocab_path;
    std::string pretrained_path;
    std::vector<std::pair<std::string, std::string>> entity_paths;  // type -> path, in order
    std::string fusion_path;

    void save(const std::string& path) const;
    static EalmManifest load(const std::string& path);
};

EntityAwareLM<PReal> load_ealm(const EalmManifest& manifest, bool fusion_trainable = false);

// ---- CLI stages (each maps to one subcommand) ----

void stage_tokenizer_train(const KeyValue& cfg, const std::string& out_dir);
void stage_gen_corpus(const KeyValue& cfg, uint64_t seed, const std::string& out_dir);
void stage_pretrain(const KeyValue& cfg, uint64_t seed, const std::string& out_dir);
void stage_train_entity(const KeyValue& cfg, uint64_t seed, const std::string& out_dir);
void stage_train_fusion(const KeyValue& cfg, uint64_t seed, const std::string& out_dir);
void stage_eval(const KeyValue& cfg, uint64_t seed, const std::string& out_dir);
void stage_swap(const KeyValue& cfg, const std::string& out_dir);
void stage_fraction_study(const KeyValue& cfg, uint64_t seed, const std::string& out_dir);
void stage_trace(const KeyValue& cfg, const std::string& out_dir);

}  // namespace ealm
