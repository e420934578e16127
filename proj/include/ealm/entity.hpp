#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "ealm/checkpoint.hpp"
#include "ealm/optim.hpp"
#include "ealm/textdata.hpp"
#include "ealm/transformer.hpp"

namespace ealm {

struct EntityConfig {
    std::string entity_type;
    int n_layers = 2;
    int d_model = 64;
    int d_ff = 128;
    int n_heads = 4;
    double dropout = 0.1;
    int k = 4;  // markov dependency length; the local attention window equals k
    int vocab_size = 0;
    int max_entity_tokens = 32;

    void validate() const {
        if (entity_type.empty()) throw ConfigError("entity config: missing entity_type");
        if (d_model % n_heads != 0)
            throw ConfigError("entity config: d_model not divisible by n_heads");
        if (k < 0 || n_layers < 1 || vocab_size < 4)
            throw ConfigError("entity config: bad dimensions");
    }

    void to_meta(Checkpoint& ck) const {
        ck.set_meta("entity_type", entity_type);
        ck.set_meta("n_layers", std::to_string(n_layers));
        ck.set_meta("d_model", std::to_string(d_model));
        ck.set_meta("d_ff", std::to_string(d_ff));
        ck.set_meta("n_heads", std::to_string(n_heads));
        ck.set_meta("dropout", std::to_string(dropout));
        ck.set_meta("k", std::to_string(k));
        ck.set_meta("vocab_size", std::to_string(vocab_size));
        ck.set_meta("max_entity_tokens", std::to_string(max_entity_tokens));
    }

    static EntityConfig from_meta(const Checkpoint& ck) {
        EntityConfig c;
        c.entity_type = ck.meta("entity_type");
        c.n_layers = std::stoi(ck.meta("n_layers"));
        c.d_model = std::stoi(ck.meta("d_model"));
        c.d_ff = std::stoi(ck.meta("d_ff"));
        c.n_heads = std::stoi(ck.meta("n_heads"));
        c.dropout = std::stod(ck.meta("dropout"));
        c.k = std::stoi(ck.meta("k"));
        c.vocab_size = std::stoi(ck.meta("vocab_size"));
        c.max_entity_tokens = std::stoi(ck.meta("max_entity_tokens"));
        return c;
    }
};

// Per-entity-type LM over catalogue strings. No absolute positions: the
// attention sees a learned bias per relative offset in [-k, 0] plus a
// dedicated class for the <s> anchor, which every context keeps as its
// first token. Input and output embeddings are references to the
// pre-trained LM's (frozen; bit-identical across entity training).
template <class Real>
class EntityLM {
public:
    EntityConfig cfg;
    ParamRegistry<Real> params;
    Tensor<Real> tok_emb, wo;  // shared, always requires_grad == false
    std::vector<TransformerLayer<Real>> layers;
    Tensor<Real> lnf_g, lnf_b;

    // rel class layout: offsets -k..0 map to classes 0..k, anchor is k+1
    int n_rel_classes() const { return cfg.k + 2; }
    int anchor_class() const { return cfg.k + 1; }

    EntityLM(const EntityConfig& c, Rng* init_rng, bool trainable = true) : cfg(c) {
        cfg.validate();
        tok_emb = params.create({cfg.vocab_size, cfg.d_model}, "tok_emb", nullptr, 0, false);
        layers.resize(cfg.n_layers);
        for (int i = 0; i < cfg.n_layers; i++)
            layers[i].build(params, "layer" + std::to_string(i), cfg.d_model, cfg.n_heads,
                            cfg.d_ff, n_rel_classes(), init_rng, trainable);
        lnf_g = params.create_filled({1, cfg.d_model}, "lnf_g", Real(1), trainable);
        lnf_b = params.create({1, cfg.d_model}, "lnf_b", nullptr, 0, trainable);
        wo = params.create({cfg.d_model, cfg.vocab_size}, "wo", nullptr, 0, false);
    }

    void adopt_shared_embeddings(const Checkpoint& pretrained_ck) {
        Tensor<Real> e = pretrained_ck.get<Real>("tok_emb");
        Tensor<Real> o = pretrained_ck.get<Real>("wo");
        if (e.shape() != tok_emb.shape() || o.shape() != wo.shape())
            throw ConfigError("entity model: shared embedding shapes do not match d_model/vocab");
        tok_emb.value() = e.value();
        wo.value() = o.value();
    }

    uint64_t shared_embed_hash() const { return params.hash_of({"tok_emb", "wo"}); }

    // ---- attention patterns ----

    // packed causal local attention for a single context sequence:
    // query q attends the anchor (position 0) plus the last k tokens
    // (itself and up to k-1 predecessors)
    void packed_pattern(int len, Tensor<Real>& mask, std::vector<int>& cls) const {
        const int window_prior = std::max(cfg.k - 1, 0);
        std::vector<Real> m(static_cast<size_t>(len) * len, Real(-1e9));
        cls.assign(static_cast<size_t>(len) * len, 0);
        for (int q = 0; q < len; q++) {
            for (int p = 0; p <= q; p++) {
                const bool allowed = (p == 0) || (q - p <= window_prior);
                if (!allowed) continue;
                m[static_cast<size_t>(q) * len + p] = Real(0);
                cls[static_cast<size_t>(q) * len + p] =
                    (p == 0) ? anchor_class() : (p - q) + cfg.k;
            }
        }
        mask = Tensor<Real>::from_data({len, len}, std::move(m), "entity_mask");
    }

    // block-diagonal pattern over k+1 duplicated copies of the padded
    // window [w0, pad..., last m history tokens]; copy l exposes the anchor
    // plus the last min(l, m) history positions, causally
    void multi_pattern(int m, Tensor<Real>& mask, std::vector<int>& cls,
                       std::vector<int>& read_rows) const {
        const int s = cfg.k + 1;
        const int n = s * s;
        std::vector<Real> mk(static_cast<size_t>(n) * n, Real(-1e9));
        cls.assign(static_cast<size_t>(n) * n, 0);
        read_rows.assign(s, 0);
        for (int l = 0; l < s; l++) {
            const int l_eff = std::min(l, m);
            const int base = l * s;
            read_rows[l] = base + (l_eff == 0 ? 0 : s - 1);
            auto in_ctx = [&](int pos) { return pos == 0 || pos >= s - l_eff; };
            for (int q = 0; q < s; q++) {
                for (int p = 0; p < s; p++) {
                    bool allowed;
                    if (in_ctx(q))
                        allowed = in_ctx(p) && p <= q;
                    else
                        allowed = p == q;  // keep the softmax defined off-context
                    if (!allowed) continue;
                    const size_t at = static_cast<size_t>(base + q) * n + (base + p);
                    mk[at] = Real(0);
                    cls[at] = (p == 0) ? anchor_class() : (p - q) + cfg.k;
                }
            }
        }
        mask = Tensor<Real>::from_data({n, n}, std::move(mk), "entity_multi_mask");
    }

    // ---- forwards ----

    // final-layer states for a packed context [w0, tokens...]
    Tensor<Real> forward_states(const std::vector<TokenId>& tokens, bool train, Rng& rng) const {
        if (tokens.empty()) throw UsageError("entity forward: empty input");
        const int len = static_cast<int>(tokens.size());
        Tensor<Real> mask;
        std::vector<int> cls;
        packed_pattern(len, mask, cls);
        Tensor<Real> h = gather_rows(tok_emb, tokens);
        for (const auto& layer : layers) h = layer.forward(h, mask, &cls, cfg.dropout, train, rng);
        return layer_norm(h, lnf_g, lnf_b);
    }

    // last-state of the single context [w0; history] (the slow route that
    // forward_multi must agree with, row by row)
    Tensor<Real> forward_single(TokenId w0, const std::vector<TokenId>& history, bool train,
                                Rng& rng) const {
        std::vector<TokenId> seq;
        seq.push_back(w0);
        seq.insert(seq.end(), history.begin(), history.end());
        Tensor<Real> states = forward_states(seq, train, rng);
        return row_slice(states, states.rows() - 1, states.rows());
    }

    // k+1 outputs at once: row l equals forward_single on the truncated
    // context [w0; last min(l, |history|) tokens]
    Tensor<Real> forward_multi(TokenId w0, const std::vector<TokenId>& history, bool train,
                               Rng& rng) const {
        const int s = cfg.k + 1;
        const int m = std::min<int>(cfg.k, static_cast<int>(history.size()));
        std::vector<TokenId> base(s, w0);
        for (int i = 0; i < m; i++) base[s - m + i] = history[history.size() - m + i];
        std::vector<TokenId> ids;
        ids.reserve(static_cast<size_t>(s) * s);
        for (int l = 0; l < s; l++) ids.insert(ids.end(), base.begin(), base.end());

        Tensor<Real> mask;
        std::vector<int> cls, read_rows;
        multi_pattern(m, mask, cls, read_rows);
        Tensor<Real> h = gather_rows(tok_emb, ids);
        for (const auto& layer : layers) h = layer.forward(h, mask, &cls, cfg.dropout, train, rng);
        h = layer_norm(h, lnf_g, lnf_b);

        std::vector<Tensor<Real>> rows;
        rows.reserve(s);
        for (int r : read_rows) rows.push_back(row_slice(h, r, r + 1));
        return concat_rows(rows);
    }

    // mean NLL per token of a catalogue surface under this model (eval mode)
    double surface_nll(const Vocabulary& vocab, const std::string& surface) const {
        std::vector<TokenId> seq;
        seq.push_back(vocab.bos());
        for (TokenId id : vocab.encode(surface)) seq.push_back(id);
        if (static_cast<int>(seq.size()) > cfg.max_entity_tokens)
            seq.resize(cfg.max_entity_tokens);
        if (seq.size() < 2) throw UsageError("surface_nll: empty entity string");
        Rng rng(0);
        Tensor<Real> states = forward_states(seq, false, rng);
        Tensor<Real> logits = matmul(states, wo);
        std::vector<TokenId> targets(seq.begin() + 1, seq.end());
        return cross_entropy(row_slice(logits, 0, logits.rows() - 1), targets).item();
    }

    Checkpoint to_checkpoint(uint64_t vocab_hash, uint64_t seed, int64_t tokens_seen) const {
        Checkpoint ck;
        ck.kind = "entity";
        cfg.to_meta(ck);
        ck.set_meta("vocab_hash", hash_hex(vocab_hash));
        ck.set_meta("seed", std::to_string(seed));
        ck.set_meta("tokens_seen", std::to_string(tokens_seen));
        ck.set_meta("shared_embed_hash", hash_hex(shared_embed_hash()));
        params.save_into(ck);
        return ck;
    }

    static EntityLM from_checkpoint(const Checkpoint& ck, bool trainable) {
        if (ck.kind != "entity")
            throw ContractError("expected an entity checkpoint, got kind '" + ck.kind + "'");
        EntityLM lm(EntityConfig::from_meta(ck), nullptr, trainable);
        lm.params.load_from(ck);
        return lm;
    }
};

struct EntityTrainOptions {
    int n_samples = 4000;
    int grad_accum = 2;
    LrSchedule schedule;
    uint64_t seed = 1;
};

// Popularity-weighted sampling over the catalogue, next-token loss on
// <s>-prefixed entity strings with one output per position. The shared
// embeddings come from the pre-trained checkpoint and stay frozen; the
// result checkpoint carries their content hash for swap contract checks.
template <class Real>
Checkpoint train_entity_model(const Catalogue& cat, const Vocabulary& vocab,
                              const Checkpoint& pretrained_ck, EntityConfig cfg,
                              const EntityTrainOptions& opt) {
    cat.validate();
    cfg.entity_type = cat.entity_type;
    if (pretrained_ck.kind != "pretrained")
        throw ContractError("train_entity_model: embeddings must come from a pretrained checkpoint");
    if (pretrained_ck.meta("vocab_hash") != hash_hex(vocab.content_hash()))
        throw ContractError("train_entity_model: vocabulary hash mismatch with pretrained checkpoint");
    cfg.vocab_size = vocab.size();

    Rng init_rng = Rng(opt.seed).derive(11);
    EntityLM<Real> model(cfg, &init_rng, true);
    model.adopt_shared_embeddings(pretrained_ck);
    const uint64_t embed_hash_before = model.shared_embed_hash();

    // tokenize every entry once
    std::vector<std::vector<TokenId>> seqs(cat.entries.size());
    std::vector<double> weights(cat.entries.size());
    for (size_t i = 0; i < cat.entries.size(); i++) {
        seqs[i].push_back(vocab.bos());
        for (TokenId id : vocab.encode(cat.entries[i].surface)) seqs[i].push_back(id);
        if (static_cast<int>(seqs[i].size()) > cfg.max_entity_tokens)
            seqs[i].resize(cfg.max_entity_tokens);
        weights[i] = cat.entries[i].popularity;
    }

    AdamW<Real> adam(model.params.trainable());
    Rng pick_rng = Rng(opt.seed).derive(12);
    Rng drop_rng = Rng(opt.seed).derive(13);
    int64_t tokens_seen = 0;
    int pending = 0;
    for (int step = 0; step < opt.n_samples; step++) {
        const auto& seq = seqs[pick_rng.weighted_index(weights)];
        if (seq.size() < 2) continue;
        Tensor<Real> states = model.forward_states(seq, true, drop_rng);
        Tensor<Real> logits = matmul(states, model.wo);
        std::vector<TokenId> targets(seq.begin() + 1, seq.end());
        Tensor<Real> ce = cross_entropy(row_slice(logits, 0, logits.rows() - 1), targets);
        backward(scale(ce, 1.0 / opt.grad_accum));
        tokens_seen += targets.size();
        if (++pending == opt.grad_accum) {
            adam.step(opt.schedule.at(tokens_seen));
            adam.zero_grad();
            pending = 0;
        }
    }
    if (pending > 0) {
        adam.step(opt.schedule.at(tokens_seen));
        adam.zero_grad();
    }

    model.params.check_frozen_clean();
    if (model.shared_embed_hash() != embed_hash_before)
        throw ContractError("train_entity_model: frozen shared embeddings changed during training");
    return model.to_checkpoint(vocab.content_hash(), opt.seed, tokens_seen);
}

struct RetrainResult {
    Checkpoint checkpoint;
    std::vector<std::string> skipped;  // additions rejected by the vocabulary
};

// Fresh checkpoint interchangeable with the old one: same shapes and the
// same shared-embedding hash, with the additions placed at the top
// popularity ranks. Additions that do not tokenize under the frozen
// vocabulary are skipped or rejected per skip_untokenizable.
template <class Real>
RetrainResult retrain_with_additions(const Catalogue& cat,
                                     const std::vector<std::string>& additions,
                                     const Vocabulary& vocab, const Checkpoint& pretrained_ck,
                                     const EntityConfig& cfg, const EntityTrainOptions& opt,
                                     double top_rank_fraction = 0.05,
                                     bool skip_untokenizable = false) {
    RetrainResult res;
    std::vector<std::string> usable;
    for (const auto& s : additions) {
        bool ok = true;
        for (TokenId id : vocab.encode(s))
            if (id == Vocabulary::kUnk) ok = false;
        if (ok) {
            usable.push_back(s);
        } else if (skip_untokenizable) {
            res.skipped.push_back(s);
        } else {
            throw ConfigError("retrain_with_additions: entity '" + s +
                              "' contains tokens absent from the vocabulary");
        }
    }
    Catalogue augmented = usable.empty() ? cat : cat.with_additions(usable, top_rank_fraction);
    res.checkpoint = train_entity_model<Real>(augmented, vocab, pretrained_ck, cfg, opt);
    return res;
}

}  // namespace ealm
