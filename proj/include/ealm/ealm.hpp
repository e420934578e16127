#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "ealm/entity.hpp"
#include "ealm/fusion.hpp"
#include "ealm/pretrained.hpp"
#include "ealm/report.hpp"

namespace ealm {

// Memo for frozen forwards: entity windows and pre-trained states repeat
// heavily across positions and epochs, and frozen outputs are pure
// functions of their tokens.
template <class Real>
struct ComposeCache {
    std::unordered_map<std::string, std::vector<Real>> entity_rows;      // (k+1) x d values
    std::unordered_map<std::string, std::vector<Real>> pretrained_states;  // T x d values
    size_t max_entries = 400000;

    void trim() {
        if (entity_rows.size() > max_entries) entity_rows.clear();
        if (pretrained_states.size() > max_entries) pretrained_states.clear();
    }
};

struct UtteranceEval {
    double nll = 0;
    int n_tokens = 0;
    std::vector<PositionTrace> trace;
};

// A pre-trained LM, N entity LMs and a fusion layer composed into one
// next-token model (frozen components; the fusion layer owns the only
// trainable parameters when training).
template <class Real>
class EntityAwareLM {
public:
    PretrainedLM<Real> pretrained;
    std::vector<EntityLM<Real>> entities;  // manifest order = fusion.entity_types
    FusionLayer<Real> fusion;
    uint64_t vocab_hash = 0;
    std::vector<std::pair<std::string, std::string>> component_hashes;

    EntityAwareLM(PretrainedLM<Real> pre, std::vector<EntityLM<Real>> ents, FusionLayer<Real> fus)
        : pretrained(std::move(pre)), entities(std::move(ents)), fusion(std::move(fus)) {}

    // assemble from checkpoints; fusion_trainable=true gives the training
    // configuration (frozen pre-trained + entity models, fresh grads on
    // fusion parameters)
    static EntityAwareLM compose(const Checkpoint& pre_ck,
                                 const std::vector<Checkpoint>& entity_cks,
                                 const Checkpoint& fusion_ck, bool fusion_trainable = false) {
        PretrainedLM<Real> pre = PretrainedLM<Real>::from_checkpoint(pre_ck, false);
        FusionLayer<Real> fus = FusionLayer<Real>::from_checkpoint(fusion_ck, fusion_trainable);
        if (fus.entity_types.size() != entity_cks.size())
            throw ContractError("compose: fusion manifest lists " +
                                std::to_string(fus.entity_types.size()) + " entity models, got " +
                                std::to_string(entity_cks.size()));
        std::vector<EntityLM<Real>> ents;
        for (size_t i = 0; i < entity_cks.size(); i++) {
            EntityLM<Real> e = EntityLM<Real>::from_checkpoint(entity_cks[i], false);
            if (e.cfg.entity_type != fus.entity_types[i])
                throw ContractError("compose: entity checkpoint order does not match manifest (" +
                                    e.cfg.entity_type + " vs " + fus.entity_types[i] + ")");
            ents.push_back(std::move(e));
        }
        EntityAwareLM lm(std::move(pre), std::move(ents), std::move(fus));
        lm.validate_contracts(pre_ck, entity_cks, fusion_ck);
        return lm;
    }

    void validate_contracts(const Checkpoint& pre_ck, const std::vector<Checkpoint>& entity_cks,
                            const Checkpoint& fusion_ck) {
        const std::string vh = pre_ck.meta("vocab_hash");
        if (fusion_ck.meta("vocab_hash") != vh)
            throw ContractError("compose: fusion/pretrained vocabulary hash mismatch");
        const std::string embed_hash = pre_ck.meta("shared_embed_hash");
        for (const auto& eck : entity_cks) {
            if (eck.meta("vocab_hash") != vh)
                throw ContractError("compose: entity/pretrained vocabulary hash mismatch");
            if (eck.meta("shared_embed_hash") != embed_hash)
                throw ContractError("compose: entity model '" + eck.meta("entity_type") +
                                    "' shared embeddings do not match the pretrained checkpoint");
        }
        for (const auto& e : entities) {
            if (e.cfg.d_model != pretrained.cfg.d_model)
                throw ContractError("compose: d_model mismatch for entity model");
            if (e.cfg.k != fusion.cfg.k)
                throw ContractError("compose: markov length mismatch between entity and fusion");
        }
        vocab_hash = std::stoull(vh, nullptr, 16);
        component_hashes.clear();
        component_hashes.push_back({"pretrained", hash_hex(pre_ck.content_hash())});
        for (const auto& eck : entity_cks)
            component_hashes.push_back(
                {"entity." + eck.meta("entity_type"), hash_hex(eck.content_hash())});
        component_hashes.push_back({"fusion", hash_hex(fusion_ck.content_hash())});
    }

    // Replace exactly one entity model; fusion parameters untouched. The
    // replacement must be shape-compatible and share the pre-trained
    // embeddings bit-for-bit.
    void swap_entity(const std::string& entity_type, const Checkpoint& new_ck) {
        if (new_ck.kind != "entity")
            throw ContractError("swap: checkpoint kind '" + new_ck.kind + "' is not an entity model");
        EntityConfig nc = EntityConfig::from_meta(new_ck);
        if (nc.entity_type != entity_type)
            throw ContractError("swap: checkpoint is for entity type '" + nc.entity_type +
                                "', requested '" + entity_type + "'");
        int idx = fusion.class_index(entity_type) - 1;
        const EntityConfig& oc = entities[idx].cfg;
        if (nc.d_model != oc.d_model || nc.k != oc.k || nc.n_layers != oc.n_layers ||
            nc.d_ff != oc.d_ff || nc.n_heads != oc.n_heads || nc.vocab_size != oc.vocab_size)
            throw ContractError("swap: entity checkpoint shape-incompatible with slot '" +
                                entity_type + "'");
        if (new_ck.meta("shared_embed_hash") != hash_hex(pretrained.shared_embed_hash()))
            throw ContractError("swap: shared embedding hash mismatch for '" + entity_type + "'");
        entities[idx] = EntityLM<Real>::from_checkpoint(new_ck, false);
        for (auto& [name, hash] : component_hashes)
            if (name == "entity." + entity_type) hash = hash_hex(new_ck.content_hash());
    }

    // ---- composition ----

    // frozen pre-trained states for one utterance, memoized
    Tensor<Real> pretrained_states(const std::vector<TokenId>& tokens,
                                   ComposeCache<Real>* cache) const {
        std::string key;
        if (cache) {
            key.reserve(tokens.size() * 3);
            for (TokenId id : tokens) {
                key += std::to_string(id);
                key += ',';
            }
            auto it = cache->pretrained_states.find(key);
            if (it != cache->pretrained_states.end())
                return Tensor<Real>::from_data(
                    {static_cast<int>(tokens.size()), pretrained.cfg.d_model}, it->second, "hp");
        }
        Rng rng(0);
        auto out = pretrained.forward(tokens, false, rng);
        if (cache) {
            cache->pretrained_states[key] = out.states.value();
            cache->trim();
        }
        return out.states;
    }

    // frozen entity window rows, memoized on (entity, window history)
    Tensor<Real> entity_rows(int entity_idx, const std::vector<TokenId>& history,
                             ComposeCache<Real>* cache) const {
        const EntityLM<Real>& e = entities[entity_idx];
        const int m = std::min<int>(e.cfg.k, static_cast<int>(history.size()));
        std::vector<TokenId> window(history.end() - m, history.end());
        std::string key;
        if (cache) {
            key = std::to_string(entity_idx);
            key += ':';
            for (TokenId id : window) {
                key += std::to_string(id);
                key += ',';
            }
            auto it = cache->entity_rows.find(key);
            if (it != cache->entity_rows.end())
                return Tensor<Real>::from_data({e.cfg.k + 1, e.cfg.d_model}, it->second, "he");
        }
        Rng rng(0);
        Tensor<Real> rows = e.forward_multi(Vocabulary::kBos, window, false, rng);
        if (cache) {
            cache->entity_rows[key] = rows.value();
            cache->trim();
        }
        return rows;
    }

    struct StepOut {
        Tensor<Real> h_ealm;    // 1 x d
        Tensor<Real> pfusion;   // 1 x (N+1)
        std::vector<Tensor<Real>> pcontexts;  // per entity, 1 x (k+1)
    };

    // one fusion step at prefix length pl (history = tokens[0..pl-1]);
    // hp_states / hc_states are the per-position encodings for the utterance
    StepOut fusion_step(const std::vector<TokenId>& tokens, int pl, const Tensor<Real>& hp_states,
                        const Tensor<Real>& hc_states, bool train, Rng& rng,
                        ComposeCache<Real>* cache,
                        const std::vector<double>* pfusion_override = nullptr) const {
        StepOut out;
        Tensor<Real> hp_row = row_slice(hp_states, pl - 1, pl);
        Tensor<Real> hc_row = row_slice(hc_states, pl - 1, pl);
        std::vector<Tensor<Real>> outputs;
        outputs.push_back(hp_row);
        std::vector<TokenId> history(tokens.begin() + 1, tokens.begin() + pl);
        for (size_t i = 0; i < entities.size(); i++) {
            Tensor<Real> he = entity_rows(static_cast<int>(i), history, cache);
            auto mixed = fusion.mix(he, hc_row, static_cast<int>(i) + 1, train, rng);
            out.pcontexts.push_back(mixed.pcontext);
            outputs.push_back(mixed.o);
        }
        auto fused = fusion.fuse(concat_rows(outputs), hc_row, train, rng, pfusion_override);
        out.h_ealm = fused.h;
        out.pfusion = fused.pfusion;
        return out;
    }

    // teacher-forced evaluation (no dropout); optionally fills the trace
    UtteranceEval eval_utterance(const std::vector<TokenId>& tokens, const Vocabulary* vocab,
                                 ComposeCache<Real>* cache, bool want_trace = false,
                                 const std::vector<double>* pfusion_override = nullptr) const {
        if (tokens.size() < 2) throw UsageError("eval_utterance: nothing to predict");
        UtteranceEval ev;
        Rng rng(0);
        Tensor<Real> hp = pretrained_states(tokens, cache);
        Tensor<Real> hc = fusion.encode_context(hp, false, rng);
        const int t = hp.rows();
        std::vector<Tensor<Real>> rows;
        std::vector<TokenId> targets;
        for (int pl = 1; pl < t; pl++) {
            StepOut step = fusion_step(tokens, pl, hp, hc, false, rng, cache, pfusion_override);
            rows.push_back(step.h_ealm);
            targets.push_back(tokens[pl]);
            if (want_trace) {
                PositionTrace tr;
                tr.token = vocab ? vocab->token(tokens[pl]) : std::to_string(tokens[pl]);
                for (Real v : step.pfusion.value()) tr.pfusion.push_back(v);
                for (const auto& pc : step.pcontexts) {
                    std::vector<double> row;
                    for (Real v : pc.value()) row.push_back(v);
                    tr.pcontext.push_back(std::move(row));
                }
                ev.trace.push_back(std::move(tr));
            }
        }
        Tensor<Real> logits = matmul(concat_rows(rows), pretrained.wo);
        Tensor<Real> ce = cross_entropy(logits, targets);
        ev.nll = ce.item() * targets.size();
        ev.n_tokens = static_cast<int>(targets.size());
        return ev;
    }

    // next-token distribution for the full prefix, plus the trace entry of
    // its final step
    std::pair<std::vector<double>, PositionTrace> next_token_probs(
        const std::vector<TokenId>& tokens, ComposeCache<Real>* cache) const {
        if (tokens.empty()) throw UsageError("next_token_probs: empty prefix");
        Rng rng(0);
        Tensor<Real> hp = pretrained_states(tokens, cache);
        Tensor<Real> hc = fusion.encode_context(hp, false, rng);
        const int t = hp.rows();
        StepOut step = fusion_step(tokens, t, hp, hc, false, rng, cache);
        Tensor<Real> probs = softmax(matmul(step.h_ealm, pretrained.wo), 1);
        PositionTrace tr;
        tr.token = "?";
        for (Real v : step.pfusion.value()) tr.pfusion.push_back(v);
        for (const auto& pc : step.pcontexts) {
            std::vector<double> row;
            for (Real v : pc.value()) row.push_back(v);
            tr.pcontext.push_back(std::move(row));
        }
        std::vector<double> p(probs.value().begin(), probs.value().end());
        return {std::move(p), std::move(tr)};
    }
};

struct FusionTrainOptions {
    int epochs = 4;
    int grad_accum = 2;
    LrSchedule schedule;
    uint64_t seed = 1;
};

struct FusionTrainStats {
    std::vector<double> epoch_losses;  // mean next-token NLL per epoch
};

// Trains only the fusion layer on next-token loss through the composed
// model. Every non-fusion tensor is frozen; the freeze contract is checked
// bitwise before returning and any gradient on a frozen tensor aborts.
template <class Real>
Checkpoint train_fusion(EntityAwareLM<Real>& lm, const std::vector<Utterance>& corpus,
                        const FusionTrainOptions& opt, FusionTrainStats* stats = nullptr) {
    if (corpus.empty()) throw ConfigError("train_fusion: empty corpus");
    auto trainable = lm.fusion.params.trainable();
    if (trainable.empty())
        throw UsageError("train_fusion: fusion layer was composed without trainable parameters");

    // snapshot frozen bytes for the post-training bitwise check
    auto snapshot = [&]() {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& [name, t] : lm.pretrained.params.items())
            h = fnv1a(t.value().data(), t.size() * sizeof(Real), h);
        for (const auto& e : lm.entities)
            for (const auto& [name, t] : e.params.items())
                h = fnv1a(t.value().data(), t.size() * sizeof(Real), h);
        return h;
    };
    const uint64_t frozen_before = snapshot();

    AdamW<Real> adam(trainable);
    Rng order_rng = Rng(opt.seed).derive(21);
    Rng drop_rng = Rng(opt.seed).derive(22);
    ComposeCache<Real> cache;

    std::vector<size_t> order(corpus.size());
    for (size_t i = 0; i < order.size(); i++) order[i] = i;

    int64_t tokens_seen = 0;
    int pending = 0;
    for (int epoch = 0; epoch < opt.epochs; epoch++) {
        order_rng.shuffle(order);
        double epoch_loss = 0;
        int64_t epoch_tokens = 0;
        for (size_t idx : order) {
            const Utterance& u = corpus[idx];
            if (u.tokens.size() < 2) continue;
            Tensor<Real> hp = lm.pretrained_states(u.tokens, &cache);
            Tensor<Real> hc = lm.fusion.encode_context(hp, true, drop_rng);
            const int t = hp.rows();
            std::vector<Tensor<Real>> rows;
            std::vector<TokenId> targets;
            for (int pl = 1; pl < t; pl++) {
                auto step = lm.fusion_step(u.tokens, pl, hp, hc, true, drop_rng, &cache);
                rows.push_back(step.h_ealm);
                targets.push_back(u.tokens[pl]);
            }
            Tensor<Real> logits = matmul(concat_rows(rows), lm.pretrained.wo);
            Tensor<Real> ce = cross_entropy(logits, targets);
            epoch_loss += ce.item() * targets.size();
            epoch_tokens += targets.size();
            backward(scale(ce, 1.0 / opt.grad_accum));
            // nothing outside the fusion layer may receive gradient, no
            // matter how its flags were tampered with
            for (const auto& [name, t] : lm.pretrained.params.items())
                if (t.has_grad())
                    throw ContractError("train_fusion: gradient reached frozen tensor '" + name +
                                        "'");
            for (const auto& e : lm.entities)
                for (const auto& [name, t] : e.params.items())
                    if (t.has_grad())
                        throw ContractError("train_fusion: gradient reached frozen tensor '" +
                                            name + "'");
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
            pending = 0;
        }
        if (stats) stats->epoch_losses.push_back(epoch_tokens ? epoch_loss / epoch_tokens : 0);
    }

    if (snapshot() != frozen_before)
        throw ContractError("train_fusion: frozen component tensors changed during training");

    return lm.fusion.to_checkpoint(lm.vocab_hash, opt.seed, lm.component_hashes);
}

}  // namespace ealm
