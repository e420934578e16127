#include "ealm/textdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "ealm/errors.hpp"

namespace ealm {

// ---- catalogues ----

void Catalogue::validate() const {
    if (entries.empty()) throw ConfigError("catalogue '" + entity_type + "' is empty");
    bool any_positive = false;
    for (const auto& e : entries) {
        if (!std::isfinite(e.popularity) || e.popularity < 0)
            throw ConfigError("catalogue '" + entity_type + "': bad popularity for '" + e.surface +
                              "'");
        if (e.popularity > 0) any_positive = true;
    }
    if (!any_positive)
        throw ConfigError("catalogue '" + entity_type + "': all popularity scores are zero");
}

const std::string& Catalogue::sample(Rng& rng) const {
    validate();
    std::vector<double> w;
    w.reserve(entries.size());
    for (const auto& e : entries) w.push_back(e.popularity);
    return entries[rng.weighted_index(w)].surface;
}

Catalogue Catalogue::top_fraction(double fraction) const {
    if (fraction <= 0.0 || fraction > 1.0)
        throw ConfigError("top_fraction: fraction must be in (0, 1]");
    std::vector<size_t> order(entries.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return entries[a].popularity > entries[b].popularity;
    });
    size_t keep = static_cast<size_t>(std::ceil(fraction * entries.size()));
    if (keep == 0) throw ConfigError("top_fraction: slice is empty");
    Catalogue out;
    out.entity_type = entity_type;
    for (size_t i = 0; i < keep; i++) out.entries.push_back(entries[order[i]]);
    return out;
}

Catalogue Catalogue::with_additions(const std::vector<std::string>& additions,
                                    double top_rank_fraction) const {
    validate();
    std::vector<double> pops;
    for (const auto& e : entries) pops.push_back(e.popularity);
    std::sort(pops.begin(), pops.end(), std::greater<double>());
    size_t boundary = static_cast<size_t>(top_rank_fraction * pops.size());
    if (boundary >= pops.size()) boundary = pops.size() - 1;
    const double placement = pops[boundary];

    Catalogue out = *this;
    for (const auto& s : additions) out.entries.push_back({s, placement});
    return out;
}

bool Catalogue::contains(const std::string& surface) const {
    for (const auto& e : entries)
        if (e.surface == surface) return true;
    return false;
}

Catalogue Catalogue::load(const std::string& path, const std::string& entity_type) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("catalogue: cannot read " + path);
    Catalogue c;
    c.entity_type = entity_type;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        line_no++;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw IoError("catalogue " + path + ":" + std::to_string(line_no) +
                          ": expected surface<TAB>popularity");
        CatalogueEntry e;
        e.surface = line.substr(0, tab);
        try {
            e.popularity = std::stod(line.substr(tab + 1));
        } catch (const std::exception&) {
            throw IoError("catalogue " + path + ":" + std::to_string(line_no) +
                          ": bad popularity value");
        }
        c.entries.push_back(std::move(e));
    }
    c.validate();
    return c;
}

void Catalogue::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("catalogue: cannot write " + path);
    f << "# entity catalogue: " << entity_type << "\n";
    std::ostringstream os;
    os.precision(17);
    for (const auto& e : entries) {
        os.str("");
        os << e.surface << "\t" << e.popularity << "\n";
        f << os.str();
    }
}

// ---- corpus files ----

void Corpus::save(const std::string& corpus_path, const std::string& spans_path) const {
    std::ofstream f(corpus_path, std::ios::binary);
    if (!f) throw IoError("corpus: cannot write " + corpus_path);
    for (const auto& u : lines) f << u.text << "\n";
    if (spans_path.empty()) return;
    std::ofstream sf(spans_path, std::ios::binary);
    if (!sf) throw IoError("corpus: cannot write " + spans_path);
    for (size_t i = 0; i < lines.size(); i++)
        for (const auto& sp : lines[i].spans)
            sf << i << "\t" << sp.entity_type << "\t" << sp.char_start << "\t" << sp.char_end
               << "\n";
}

Corpus Corpus::load(const std::string& corpus_path, const std::string& spans_path) {
    std::ifstream f(corpus_path, std::ios::binary);
    if (!f) throw IoError("corpus: cannot read " + corpus_path);
    Corpus c;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        c.lines.push_back({line, {}});
    }
    if (!spans_path.empty()) {
        std::ifstream sf(spans_path, std::ios::binary);
        if (!sf) throw IoError("corpus: cannot read " + spans_path);
        while (std::getline(sf, line)) {
            if (line.empty()) continue;
            std::istringstream is(line);
            size_t line_no;
            GoldSpan sp;
            std::string type;
            if (!(is >> line_no >> type >> sp.char_start >> sp.char_end))
                throw IoError("corpus: malformed span line: " + line);
            sp.entity_type = type;
            if (line_no >= c.lines.size()) throw IoError("corpus: span line number out of range");
            c.lines[line_no].spans.push_back(std::move(sp));
        }
    }
    return c;
}

// ---- template expansion ----

namespace {

struct ParsedTemplate {
    struct Seg {
        bool is_slot;
        std::string text;  // literal text, or the slot's type name
    };
    std::vector<Seg> segs;
    bool has_slot = false;
};

ParsedTemplate parse_template(const std::string& t) {
    ParsedTemplate out;
    size_t i = 0;
    std::string lit;
    while (i < t.size()) {
        if (t[i] == '{') {
            auto close = t.find('}', i);
            if (close == std::string::npos)
                throw ConfigError("template '" + t + "': unterminated slot");
            if (!lit.empty()) {
                out.segs.push_back({false, lit});
                lit.clear();
            }
            out.segs.push_back({true, t.substr(i + 1, close - i - 1)});
            out.has_slot = true;
            i = close + 1;
        } else {
            lit += t[i];
            i++;
        }
    }
    if (!lit.empty()) out.segs.push_back({false, lit});
    return out;
}

}  // namespace

Corpus generate_corpus(const std::vector<std::string>& templates,
                       const std::map<std::string, Catalogue>& pools, const CorpusGenConfig& cfg,
                       uint64_t seed) {
    if (templates.empty()) throw ConfigError("generate_corpus: no templates");
    std::vector<ParsedTemplate> slotted, carriers;
    for (const auto& t : templates) {
        ParsedTemplate p = parse_template(t);
        for (const auto& s : p.segs)
            if (s.is_slot && pools.find(s.text) == pools.end())
                throw ConfigError("generate_corpus: slot type '" + s.text + "' has no catalogue");
        (p.has_slot ? slotted : carriers).push_back(std::move(p));
    }
    if (cfg.slot_rate > 0 && slotted.empty())
        throw ConfigError("generate_corpus: slot_rate > 0 but no slotted templates");
    if (cfg.slot_rate < 1 && carriers.empty())
        throw ConfigError("generate_corpus: slot_rate < 1 but no carrier templates");

    Rng rng(seed);
    Corpus corpus;
    corpus.lines.reserve(cfg.n_utterances);
    for (int n = 0; n < cfg.n_utterances; n++) {
        const bool with_slots = rng.uniform() < cfg.slot_rate;
        const auto& pool = with_slots ? slotted : carriers;
        const ParsedTemplate& tpl = pool[rng.uniform_below(pool.size())];
        RawUtterance u;
        for (const auto& seg : tpl.segs) {
            if (!seg.is_slot) {
                u.text += seg.text;
            } else {
                const std::string& fill = pools.at(seg.text).sample(rng);
                GoldSpan sp;
                sp.entity_type = seg.text;
                sp.char_start = static_cast<int>(u.text.size());
                u.text += fill;
                sp.char_end = static_cast<int>(u.text.size());
                u.spans.push_back(std::move(sp));
            }
        }
        corpus.lines.push_back(std::move(u));
    }
    return corpus;
}

// ---- tokenized utterances ----

Utterance tokenize_utterance(const Vocabulary& vocab, const RawUtterance& raw, int max_len) {
    Utterance u;
    u.spans = raw.spans;
    std::vector<std::pair<int, int>> offsets;
    std::vector<TokenId> body = vocab.encode_with_offsets(raw.text, &offsets);
    u.tokens.push_back(vocab.bos());
    for (size_t i = 0; i < body.size(); i++) {
        if (static_cast<int>(u.tokens.size()) >= max_len) {
            u.truncated = true;
            break;
        }
        u.tokens.push_back(body[i]);
        bool inside = false;
        for (const auto& sp : raw.spans) {
            // a token is in-entity if its char range overlaps a gold span
            if (offsets[i].first < sp.char_end && offsets[i].second > sp.char_start) {
                inside = true;
                break;
            }
        }
        u.in_entity.push_back(inside ? 1 : 0);
    }
    std::set<std::string> types;
    for (const auto& sp : raw.spans) types.insert(sp.entity_type);
    u.entity_types_present.assign(types.begin(), types.end());
    return u;
}

std::vector<Utterance> tokenize_corpus(const Vocabulary& vocab, const Corpus& corpus,
                                       int max_len) {
    std::vector<Utterance> out;
    out.reserve(corpus.lines.size());
    for (const auto& raw : corpus.lines) out.push_back(tokenize_utterance(vocab, raw, max_len));
    return out;
}

// ---- entity contexts ----

std::vector<std::vector<TokenId>> enumerate_entity_contexts(const std::vector<TokenId>& tokens,
                                                            int t, int k) {
    if (t < 1 || t > static_cast<int>(tokens.size()))
        throw UsageError("enumerate_entity_contexts: t out of range");
    if (k < 0) throw UsageError("enumerate_entity_contexts: k must be non-negative");
    const int max_l = std::min(k, t - 1);
    std::vector<std::vector<TokenId>> out;
    out.reserve(max_l + 1);
    for (int l = 0; l <= max_l; l++) {
        std::vector<TokenId> ctx;
        ctx.push_back(tokens[0]);
        for (int i = t - l; i <= t - 1; i++) ctx.push_back(tokens[i]);
        out.push_back(std::move(ctx));
    }
    return out;
}

// ---- synthetic world ----

namespace {

const char* kFamilyA[] = {"ka",  "lo",  "mi",  "ta",  "ri",  "su",  "ne",  "vo",  "da",  "pe",
                          "sha", "bru", "sto", "gli", "mor", "fen", "lu",  "zan", "tol", "wes",
                          "bi",  "cho", "dre", "'el", "fra", "gu",  "hin", "jo",  "kre", "lim",
                          "nop", "osa", "pli", "qua", "rem", "ski", "tru", "ulm", "vit", "yor"};
const char* kFamilyB[] = {"xqu", "zyx", "wix", "qev", "jyk", "xoz", "quv", "zey",
                          "kyx", "vyq", "jax", "quz", "xyl", "wyx", "zuq", "yxi"};

std::string make_entity_name(Rng& rng, const char* const* syll, size_t n_syll) {
    const int n_words = 1 + static_cast<int>(rng.uniform_below(3));
    std::string out;
    for (int w = 0; w < n_words; w++) {
        if (w) out += ' ';
        const int n = 2 + static_cast<int>(rng.uniform_below(2));
        for (int s = 0; s < n; s++) out += syll[rng.uniform_below(n_syll)];
    }
    return out;
}

std::vector<std::string> unique_names(Rng& rng, int count, const char* const* syll, size_t n_syll,
                                      std::set<std::string>& taken) {
    std::vector<std::string> out;
    while (static_cast<int>(out.size()) < count) {
        std::string name = make_entity_name(rng, syll, n_syll);
        if (taken.insert(name).second) out.push_back(std::move(name));
    }
    return out;
}

// new combinations of individually seen words (the surfaces are new, every
// word occurs in some catalogue or in-text entity)
std::vector<std::string> combination_names(Rng& rng, int count,
                                           const std::vector<std::string>& words,
                                           std::set<std::string>& taken) {
    std::vector<std::string> out;
    while (static_cast<int>(out.size()) < count) {
        const int n_words = 2 + static_cast<int>(rng.uniform_below(2));
        std::string name;
        for (int w = 0; w < n_words; w++) {
            if (w) name += ' ';
            name += words[rng.uniform_below(words.size())];
        }
        if (taken.insert(name).second) out.push_back(std::move(name));
    }
    return out;
}

}  // namespace

std::map<std::string, Catalogue> SynthWorld::text_pools(double coverage) const {
    std::map<std::string, Catalogue> pools;
    for (const auto& [type, names] : seen) {
        Catalogue c;
        c.entity_type = type;
        // covered mass follows a zipf profile over the seen entities,
        // uncovered mass is uniform over the OOC strings
        double covered_total = 0;
        std::vector<double> w(names.size());
        for (size_t i = 0; i < names.size(); i++) {
            w[i] = 1.0 / std::pow(static_cast<double>(i + 1), 0.8);
            covered_total += w[i];
        }
        for (size_t i = 0; i < names.size(); i++)
            c.entries.push_back({names[i], coverage * w[i] / covered_total});
        const auto& extra = ooc.at(type);
        if (!extra.empty() && coverage < 1.0) {
            for (const auto& name : extra)
                c.entries.push_back({name, (1.0 - coverage) / extra.size()});
        }
        pools[type] = std::move(c);
    }
    return pools;
}

std::map<std::string, Catalogue> SynthWorld::uniform_pools(
    const std::map<std::string, std::vector<std::string>>& subset) const {
    std::map<std::string, Catalogue> pools;
    for (const auto& [type, names] : subset) {
        Catalogue c;
        c.entity_type = type;
        for (const auto& name : names) c.entries.push_back({name, 1.0});
        pools[type] = std::move(c);
    }
    return pools;
}

SynthWorld make_synth_world(const SynthWorldConfig& cfg) {
    if (cfg.entity_types.empty()) throw ConfigError("make_synth_world: no entity types");
    if (cfg.heldout_fraction < 0 || cfg.heldout_fraction >= 1)
        throw ConfigError("make_synth_world: heldout_fraction must be in [0, 1)");

    SynthWorld world;
    std::set<std::string> taken;
    Rng base(cfg.seed);

    // each type draws from its own slice of the syllable inventory, so one
    // entity model cannot stand in for another's content and the fusion
    // layer has to route per type
    const size_t slice = std::max<size_t>(8, std::size(kFamilyA) / cfg.entity_types.size());
    for (size_t ti = 0; ti < cfg.entity_types.size(); ti++) {
        const std::string& type = cfg.entity_types[ti];
        Rng rng = base.derive(1000 + ti);
        const size_t offset = (ti * slice) % std::size(kFamilyA);
        const size_t width = std::min(slice, std::size(kFamilyA) - offset);
        const char* const* syll = kFamilyA + offset;
        auto names = unique_names(rng, cfg.entities_per_type, syll, width, taken);

        Catalogue cat;
        cat.entity_type = type;
        for (size_t i = 0; i < names.size(); i++)
            cat.entries.push_back(
                {names[i], 1e6 / std::pow(static_cast<double>(i + 1), cfg.popularity_exponent)});

        // held-out picks spread over all popularity ranks
        std::vector<size_t> order(names.size());
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        const size_t n_held = static_cast<size_t>(cfg.heldout_fraction * names.size());
        std::set<size_t> held(order.begin(), order.begin() + n_held);
        for (size_t i = 0; i < names.size(); i++)
            (held.count(i) ? world.heldout[type] : world.seen[type]).push_back(names[i]);

        world.ooc[type] = unique_names(rng, cfg.ooc_per_type, syll, width, taken);
        std::vector<std::string> words;
        {
            // words that actually occur in training text: from the seen
            // entities (held-out surfaces never enter the corpus)
            std::set<std::string> word_set;
            for (const auto& s : world.seen[type])
                for (const auto& piece : Vocabulary::pretokenize(s))
                    if (piece[0] != ' ' || piece.size() > 1)
                        word_set.insert(piece[0] == ' ' ? piece.substr(1) : piece);
            words.assign(word_set.begin(), word_set.end());
        }
        world.novel[type] = combination_names(rng, cfg.novel_per_type, words, taken);
        world.foreign[type] =
            unique_names(rng, cfg.foreign_per_type, kFamilyB, std::size(kFamilyB), taken);
        world.catalogues[type] = std::move(cat);
    }

    const std::vector<std::string> all_templates = {
        "play {song}",
        "play {song} please",
        "can you play {song}",
        "put on {song}",
        "add {song} to my playlist",
        "play {song} by {person}",
        "i want to hear {song}",
        "queue up {song}",
        "call {person}",
        "call {person} now",
        "text {person} i am on my way",
        "send a message to {person}",
        "when did {person} call me",
        "play something by {person}",
        "what time is it",
        "set an alarm for seven",
        "turn the volume up",
        "turn the volume down",
        "skip this track",
        "pause the music",
        "resume playback",
        "what is the weather today",
        "cancel my alarm",
        "play some music",
        "stop the timer",
    };
    // keep only templates whose slot types exist in this world
    for (const auto& t : all_templates) {
        bool ok = true;
        ParsedTemplate p = parse_template(t);
        for (const auto& s : p.segs)
            if (s.is_slot && !world.catalogues.count(s.text)) ok = false;
        if (ok) world.templates.push_back(t);
    }
    return world;
}

}  // namespace ealm
