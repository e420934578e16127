#pragma once

#include <string>
#include <vector>

#include "ealm/checkpoint.hpp"
#include "ealm/transformer.hpp"

namespace ealm {

struct FusionConfig {
    int d_model = 64;
    int d_ff = 128;
    int n_heads = 4;
    int max_positions = 32;
    int k = 4;
    double dropout = 0.1;          // context encoder and scorer MLPs
    double dropout_entity = 0.25;  // on the entity model outputs
    // score heads start near zero so pfusion/pcontext differentiate only
    // as fast as the rest of the layer learns to discriminate positions;
    // large initial scores saturate the softmax before that and the
    // entity-model gradient (proportional to pfusion) dies
    double score_init_std = 0.002;
    int vocab_size = 0;

    void validate() const {
        if (d_model % n_heads != 0)
            throw ConfigError("fusion config: d_model not divisible by n_heads");
        if (k < 0 || max_positions < 2) throw ConfigError("fusion config: bad dimensions");
    }

    void to_meta(Checkpoint& ck) const {
        ck.set_meta("d_model", std::to_string(d_model));
        ck.set_meta("d_ff", std::to_string(d_ff));
        ck.set_meta("n_heads", std::to_string(n_heads));
        ck.set_meta("max_positions", std::to_string(max_positions));
        ck.set_meta("k", std::to_string(k));
        ck.set_meta("dropout", std::to_string(dropout));
        ck.set_meta("dropout_entity", std::to_string(dropout_entity));
        ck.set_meta("score_init_std", std::to_string(score_init_std));
        ck.set_meta("vocab_size", std::to_string(vocab_size));
    }

    static FusionConfig from_meta(const Checkpoint& ck) {
        FusionConfig c;
        c.d_model = std::stoi(ck.meta("d_model"));
        c.d_ff = std::stoi(ck.meta("d_ff"));
        c.n_heads = std::stoi(ck.meta("n_heads"));
        c.max_positions = std::stoi(ck.meta("max_positions"));
        c.k = std::stoi(ck.meta("k"));
        c.dropout = std::stod(ck.meta("dropout"));
        c.dropout_entity = std::stod(ck.meta("dropout_entity"));
        c.score_init_std = std::stod(ck.meta_or("score_init_std", "0.002"));
        c.vocab_size = std::stoi(ck.meta("vocab_size"));
        return c;
    }
};

// The contextual fusion layer: a class embedding per model (row 0 is the
// pre-trained LM), a one-layer causal context encoder with its own
// positional embeddings over H^P, a mixer that collapses each entity
// model's k+1 outputs into one vector, and a fuser that interpolates all
// model representations. Mixer and fuser share their parameters across
// entity models, so entity checkpoints can be swapped without reshaping
// anything here.
template <class Real>
class FusionLayer {
public:
    FusionConfig cfg;
    std::vector<std::string> entity_types;  // manifest order; class index = 1 + position
    ParamRegistry<Real> params;
    Tensor<Real> class_emb;  // (N+1) x d
    Tensor<Real> ctx_pos_emb;
    TransformerLayer<Real> ctx_layer;
    Tensor<Real> ctx_lnf_g, ctx_lnf_b;
    Tensor<Real> mixer_fc1_w, mixer_fc1_b, mixer_fc2_w, mixer_fc2_b;
    Tensor<Real> fuser_fc1_w, fuser_fc1_b, fuser_fc2_w, fuser_fc2_b;

    FusionLayer(const FusionConfig& c, std::vector<std::string> types, Rng* init_rng,
                bool trainable = true)
        : cfg(c), entity_types(std::move(types)) {
        cfg.validate();
        const int d = cfg.d_model;
        const int n_models = static_cast<int>(entity_types.size()) + 1;
        const double sd = 0.02;
        class_emb = params.create({n_models, d}, "class_emb", init_rng, sd, trainable);
        ctx_pos_emb = params.create({cfg.max_positions, d}, "ctx_pos_emb", init_rng, sd, trainable);
        ctx_layer.build(params, "ctx_layer", d, cfg.n_heads, cfg.d_ff, 0, init_rng, trainable);
        ctx_lnf_g = params.create_filled({1, d}, "ctx_lnf_g", Real(1), trainable);
        ctx_lnf_b = params.create({1, d}, "ctx_lnf_b", nullptr, 0, trainable);
        mixer_fc1_w = params.create({3 * d, d}, "mixer_fc1_w", init_rng, sd, trainable);
        mixer_fc1_b = params.create({1, d}, "mixer_fc1_b", nullptr, 0, trainable);
        mixer_fc2_w = params.create({d, 1}, "mixer_fc2_w", init_rng, cfg.score_init_std, trainable);
        mixer_fc2_b = params.create({1, 1}, "mixer_fc2_b", nullptr, 0, trainable);
        fuser_fc1_w = params.create({3 * d, d}, "fuser_fc1_w", init_rng, sd, trainable);
        fuser_fc1_b = params.create({1, d}, "fuser_fc1_b", nullptr, 0, trainable);
        fuser_fc2_w = params.create({d, 1}, "fuser_fc2_w", init_rng, cfg.score_init_std, trainable);
        fuser_fc2_b = params.create({1, 1}, "fuser_fc2_b", nullptr, 0, trainable);
    }

    int n_entities() const { return static_cast<int>(entity_types.size()); }

    int class_index(const std::string& type) const {
        for (size_t i = 0; i < entity_types.size(); i++)
            if (entity_types[i] == type) return static_cast<int>(i) + 1;
        throw UsageError("fusion: unknown entity type '" + type + "'");
    }

    // causal per-position context encoding of H^P (adds fresh positional
    // embeddings, one decoder layer, final norm)
    Tensor<Real> encode_context(const Tensor<Real>& hp, bool train, Rng& rng) const {
        const int t = hp.rows();
        if (t > cfg.max_positions)
            throw UsageError("encode_context: sequence longer than positional table");
        Tensor<Real> h = add(hp, row_slice(ctx_pos_emb, 0, t));
        h = ctx_layer.forward(h, causal_mask<Real>(t), nullptr, cfg.dropout, train, rng);
        return layer_norm(h, ctx_lnf_g, ctx_lnf_b);
    }

    struct Mixed {
        Tensor<Real> pcontext;  // 1 x (k+1)
        Tensor<Real> o;         // 1 x d
    };

    // pcontext over the k+1 candidate contexts, then the convex combination
    // of the entity outputs: o = sum_l pcontext_l * h_e[l]
    Mixed mix(const Tensor<Real>& h_entity, const Tensor<Real>& h_ctx, int class_idx, bool train,
              Rng& rng, const std::vector<double>* pcontext_override = nullptr) const {
        const int rows = h_entity.rows();
        Tensor<Real> he = dropout(h_entity, cfg.dropout_entity, train, rng);
        Mixed out;
        if (pcontext_override) {
            if (static_cast<int>(pcontext_override->size()) != rows)
                throw UsageError("mix: override length mismatch");
            std::vector<Real> pv(pcontext_override->begin(), pcontext_override->end());
            out.pcontext = Tensor<Real>::from_data({1, rows}, std::move(pv), "pcontext_override");
        } else {
            Tensor<Real> wc = row_slice(class_emb, class_idx, class_idx + 1);
            Tensor<Real> inp = concat_cols(
                std::vector<Tensor<Real>>{he, repeat_row(h_ctx, rows), repeat_row(wc, rows)});
            Tensor<Real> hidden = gelu(add_rowvec(matmul(inp, mixer_fc1_w), mixer_fc1_b));
            hidden = dropout(hidden, cfg.dropout, train, rng);
            Tensor<Real> scores = add_rowvec(matmul(hidden, mixer_fc2_w), mixer_fc2_b);
            for (Real v : scores.value())
                if (!std::isfinite(static_cast<double>(v)))
                    throw NumericError("entity_output_mixer: non-finite score for entity model '" +
                                       entity_types[class_idx - 1] + "'");
            out.pcontext = softmax(reshape(scores, {1, rows}), 1);
        }
        out.o = matmul(out.pcontext, he);
        return out;
    }

    struct Fused {
        Tensor<Real> pfusion;  // 1 x (N+1)
        Tensor<Real> h;        // 1 x d
    };

    // one shared-parameter score per model over [o_i; W_c_i; h_ctx],
    // softmax across models, convex combination of representations
    Fused fuse(const Tensor<Real>& outputs, const Tensor<Real>& h_ctx, bool train, Rng& rng,
               const std::vector<double>* pfusion_override = nullptr) const {
        const int rows = outputs.rows();
        if (rows != n_entities() + 1)
            throw ConfigError("fuse: model count does not match class embedding matrix");
        Fused out;
        if (pfusion_override) {
            if (static_cast<int>(pfusion_override->size()) != rows)
                throw UsageError("fuse: override length mismatch");
            std::vector<Real> pv(pfusion_override->begin(), pfusion_override->end());
            out.pfusion = Tensor<Real>::from_data({1, rows}, std::move(pv), "pfusion_override");
        } else {
            Tensor<Real> inp = concat_cols(
                std::vector<Tensor<Real>>{outputs, class_emb, repeat_row(h_ctx, rows)});
            Tensor<Real> hidden = gelu(add_rowvec(matmul(inp, fuser_fc1_w), fuser_fc1_b));
            hidden = dropout(hidden, cfg.dropout, train, rng);
            Tensor<Real> scores = add_rowvec(matmul(hidden, fuser_fc2_w), fuser_fc2_b);
            scores.check_finite("pretrained_entity_fuser");
            out.pfusion = softmax(reshape(scores, {1, rows}), 1);
        }
        out.h = matmul(out.pfusion, outputs);
        return out;
    }

    Checkpoint to_checkpoint(uint64_t vocab_hash, uint64_t seed,
                             const std::vector<std::pair<std::string, std::string>>&
                                 component_hashes) const {
        Checkpoint ck;
        ck.kind = "fusion";
        cfg.to_meta(ck);
        ck.set_meta("vocab_hash", hash_hex(vocab_hash));
        ck.set_meta("seed", std::to_string(seed));
        std::string manifest;
        for (size_t i = 0; i < entity_types.size(); i++) {
            if (i) manifest += ",";
            manifest += entity_types[i];
        }
        ck.set_meta("entity_manifest", manifest);
        for (const auto& [name, hash] : component_hashes) ck.set_meta("component_hash." + name, hash);
        params.save_into(ck);
        return ck;
    }

    static FusionLayer from_checkpoint(const Checkpoint& ck, bool trainable) {
        if (ck.kind != "fusion")
            throw ContractError("expected a fusion checkpoint, got kind '" + ck.kind + "'");
        std::vector<std::string> types;
        const std::string manifest = ck.meta("entity_manifest");
        size_t start = 0;
        while (start < manifest.size()) {
            size_t comma = manifest.find(',', start);
            if (comma == std::string::npos) comma = manifest.size();
            types.push_back(manifest.substr(start, comma - start));
            start = comma + 1;
        }
        FusionLayer fl(FusionConfig::from_meta(ck), std::move(types), nullptr, trainable);
        fl.params.load_from(ck);
        return fl;
    }
};

}  // namespace ealm
