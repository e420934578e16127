#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ealm/rng.hpp"
#include "ealm/vocab.hpp"

namespace ealm {

// ---- catalogues ----

struct CatalogueEntry {
    std::string surface;
    double popularity;
};

// Flat list of entity surface strings with popularity scores; the sole
// training data for an entity model.
struct Catalogue {
    std::string entity_type;
    std::vector<CatalogueEntry> entries;

    void validate() const;

    // draw with probability popularity_i / sum(popularity)
    const std::string& sample(Rng& rng) const;

    // top fraction of entries ranked by popularity (desc, stable)
    Catalogue top_fraction(double fraction) const;

    // new surfaces inserted with the popularity of the entry at the given
    // top-rank boundary, so they land inside that top fraction when ranked
    Catalogue with_additions(const std::vector<std::string>& additions,
                             double top_rank_fraction = 0.05) const;

    bool contains(const std::string& surface) const;

    // tab-separated "surface<TAB>popularity", '#' comments allowed
    static Catalogue load(const std::string& path, const std::string& entity_type);
    void save(const std::string& path) const;
};

// ---- corpus ----

struct GoldSpan {
    std::string entity_type;
    int char_start = 0;  // [start, end) over the utterance text
    int char_end = 0;
};

struct RawUtterance {
    std::string text;
    std::vector<GoldSpan> spans;
};

struct Corpus {
    std::vector<RawUtterance> lines;

    size_t size() const { return lines.size(); }
    // one utterance per line; spans go to a sidecar file
    void save(const std::string& corpus_path, const std::string& spans_path = "") const;
    static Corpus load(const std::string& corpus_path, const std::string& spans_path = "");
};

struct CorpusGenConfig {
    int n_utterances = 1000;
    double slot_rate = 0.8;  // fraction of utterances drawn from slotted templates
};

// Fills "{type}" slots in templates from the per-type pools by popularity
// sampling; pure function of (templates, pools, config, seed). Templates
// without slots form the carrier pool used at rate 1 - slot_rate.
Corpus generate_corpus(const std::vector<std::string>& templates,
                       const std::map<std::string, Catalogue>& pools, const CorpusGenConfig& cfg,
                       uint64_t seed);

// ---- tokenized utterances ----

struct Utterance {
    std::vector<TokenId> tokens;  // starts with <s>
    std::vector<GoldSpan> spans;  // char coordinates, evaluation only
    std::vector<uint8_t> in_entity;  // per non-bos token: inside any gold span
    std::vector<std::string> entity_types_present;
    bool truncated = false;
};

// Encodes with a leading <s>, truncating to max_len tokens (including <s>)
// with the truncation flag set, and maps gold spans onto token positions.
Utterance tokenize_utterance(const Vocabulary& vocab, const RawUtterance& raw, int max_len);

std::vector<Utterance> tokenize_corpus(const Vocabulary& vocab, const Corpus& corpus, int max_len);

// ---- entity contexts ----

// The candidate entity contexts [w0; w_{t-l..t-1}] for l = 0..k at position
// t (so tokens[0..t-1] is the history). Contexts needing more history than
// exists are truncated to the available tokens and deduplicated, giving
// exactly min(k, t-1)+1 distinct contexts, each anchored at tokens[0].
std::vector<std::vector<TokenId>> enumerate_entity_contexts(const std::vector<TokenId>& tokens,
                                                            int t, int k);

// ---- synthetic world ----

// Desk-scale substitute for the voice-assistant data: templated utterances
// over synthetic entity catalogues. "novel" entities use a second syllable
// family (same alphabet, unseen subword composition) and appear in no
// catalogue or corpus until a swap experiment adds them.
struct SynthWorldConfig {
    std::vector<std::string> entity_types = {"song", "person"};
    int entities_per_type = 500;
    double heldout_fraction = 0.3;   // in catalogue, excluded from all training text
    int ooc_per_type = 120;          // usable in text, absent from catalogues
    int novel_per_type = 60;
    int foreign_per_type = 30;
    double popularity_exponent = 0.5;  // zipf exponent of catalogue popularity
    uint64_t seed = 1;
};

struct SynthWorld {
    std::map<std::string, Catalogue> catalogues;               // full, includes heldout
    std::map<std::string, std::vector<std::string>> seen;      // catalogue minus heldout
    std::map<std::string, std::vector<std::string>> heldout;   // tail analogue
    std::map<std::string, std::vector<std::string>> ooc;       // in-text, out of catalogue
    // new-entity analogue: unseen combinations of individually seen words,
    // in no catalogue and no training text
    std::map<std::string, std::vector<std::string>> novel;
    // second syllable region: same alphabet, subword composition unseen in
    // any training text (the foreign-language stand-in)
    std::map<std::string, std::vector<std::string>> foreign;
    std::vector<std::string> templates;

    // pool for corpus generation: seen entities plus OOC strings, with
    // coverage = probability mass on catalogue-covered entities
    std::map<std::string, Catalogue> text_pools(double coverage) const;
    // pool restricted to one named subset, uniform popularity
    std::map<std::string, Catalogue> uniform_pools(
        const std::map<std::string, std::vector<std::string>>& subset) const;
};

SynthWorld make_synth_world(const SynthWorldConfig& cfg);

}  // namespace ealm
