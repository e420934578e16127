#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ealm/checkpoint.hpp"
#include "ealm/errors.hpp"
#include "ealm/rng.hpp"
#include "ealm/tensor.hpp"

namespace ealm {

// Ordered parameter registry shared by the model classes: creation assigns
// names used for checkpoint IO and diagnostics; requires_grad doubles as
// the freeze flag (frozen tensors never get gradient storage).
template <class Real>
class ParamRegistry {
public:
    Tensor<Real> create(std::vector<int> shape, const std::string& name, Rng* rng, double stddev,
                        bool trainable = true) {
        Tensor<Real> t = rng ? Tensor<Real>::param(shape, name, *rng, stddev)
                             : Tensor<Real>::param_zeros(shape, name);
        t.set_requires_grad(trainable);
        items_.push_back({name, t});
        return t;
    }

    Tensor<Real> create_filled(std::vector<int> shape, const std::string& name, Real fill,
                               bool trainable = true) {
        Tensor<Real> t = Tensor<Real>::param_zeros(shape, name);
        std::fill(t.value().begin(), t.value().end(), fill);
        t.set_requires_grad(trainable);
        items_.push_back({name, t});
        return t;
    }

    void adopt(const std::string& name, Tensor<Real> t) { items_.push_back({name, t}); }

    const std::vector<std::pair<std::string, Tensor<Real>>>& items() const { return items_; }

    std::vector<Tensor<Real>> trainable() const {
        std::vector<Tensor<Real>> out;
        for (const auto& [name, t] : items_)
            if (t.requires_grad()) out.push_back(t);
        return out;
    }

    void save_into(Checkpoint& ck) const {
        for (const auto& [name, t] : items_) ck.put(name, t, !t.requires_grad());
    }

    void load_from(const Checkpoint& ck) {
        for (auto& [name, t] : items_) {
            Tensor<Real> loaded = ck.get<Real>(name);
            if (loaded.shape() != t.shape())
                throw ContractError("checkpoint tensor '" + name + "' has incompatible shape");
            t.value() = loaded.value();
        }
    }

    // frozen tensors must not carry gradients after a backward pass
    void check_frozen_clean() const {
        for (const auto& [name, t] : items_)
            if (!t.requires_grad() && t.has_grad())
                throw ContractError("gradient reached frozen tensor '" + name + "'");
    }

    uint64_t hash_of(std::initializer_list<const char*> names) const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const char* want : names) {
            for (const auto& [name, t] : items_) {
                if (name == want)
                    h = fnv1a(t.value().data(), t.size() * sizeof(Real), h);
            }
        }
        return h;
    }

private:
    std::vector<std::pair<std::string, Tensor<Real>>> items_;
};

// Pre-norm decoder block: x += Attn(LN(x)); x += MLP(LN(x)). The caller
// supplies the additive attention mask and, optionally, a per-pair relative
// class map resolved against this layer's learned bias table (one bias per
// head per class).
template <class Real>
struct TransformerLayer {
    int d_model = 0, n_heads = 0, d_ff = 0, n_rel_classes = 0;
    Tensor<Real> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<Real> ln1_g, ln1_b, ln2_g, ln2_b;
    Tensor<Real> fc1_w, fc1_b, fc2_w, fc2_b;
    Tensor<Real> rel_bias;  // (n_heads * n_rel_classes) x 1

    void build(ParamRegistry<Real>& reg, const std::string& prefix, int d, int heads, int ff,
               int rel_classes, Rng* rng, bool trainable = true) {
        if (d % heads != 0) throw ConfigError(prefix + ": d_model not divisible by heads");
        d_model = d;
        n_heads = heads;
        d_ff = ff;
        n_rel_classes = rel_classes;
        const double sd = 0.02;
        wq = reg.create({d, d}, prefix + ".wq", rng, sd, trainable);
        bq = reg.create({1, d}, prefix + ".bq", nullptr, 0, trainable);
        wk = reg.create({d, d}, prefix + ".wk", rng, sd, trainable);
        bk = reg.create({1, d}, prefix + ".bk", nullptr, 0, trainable);
        wv = reg.create({d, d}, prefix + ".wv", rng, sd, trainable);
        bv = reg.create({1, d}, prefix + ".bv", nullptr, 0, trainable);
        wo = reg.create({d, d}, prefix + ".wo", rng, sd, trainable);
        bo = reg.create({1, d}, prefix + ".bo", nullptr, 0, trainable);
        ln1_g = reg.create_filled({1, d}, prefix + ".ln1_g", Real(1), trainable);
        ln1_b = reg.create({1, d}, prefix + ".ln1_b", nullptr, 0, trainable);
        ln2_g = reg.create_filled({1, d}, prefix + ".ln2_g", Real(1), trainable);
        ln2_b = reg.create({1, d}, prefix + ".ln2_b", nullptr, 0, trainable);
        fc1_w = reg.create({d, ff}, prefix + ".fc1_w", rng, sd, trainable);
        fc1_b = reg.create({1, ff}, prefix + ".fc1_b", nullptr, 0, trainable);
        fc2_w = reg.create({ff, d}, prefix + ".fc2_w", rng, sd, trainable);
        fc2_b = reg.create({1, d}, prefix + ".fc2_b", nullptr, 0, trainable);
        if (rel_classes > 0)
            rel_bias = reg.create({heads * rel_classes, 1}, prefix + ".rel_bias", rng, sd,
                                  trainable);
    }

    Tensor<Real> forward(const Tensor<Real>& x, const Tensor<Real>& add_mask,
                         const std::vector<int>* rel_class, double drop, bool train,
                         Rng& rng) const {
        const int t = x.rows();
        const int dh = d_model / n_heads;
        const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

        Tensor<Real> a = layer_norm(x, ln1_g, ln1_b);
        Tensor<Real> q = add_rowvec(matmul(a, wq), bq);
        Tensor<Real> k = add_rowvec(matmul(a, wk), bk);
        Tensor<Real> v = add_rowvec(matmul(a, wv), bv);

        std::vector<Tensor<Real>> heads;
        heads.reserve(n_heads);
        for (int h = 0; h < n_heads; h++) {
            Tensor<Real> qh = col_slice(q, h * dh, (h + 1) * dh);
            Tensor<Real> kh = col_slice(k, h * dh, (h + 1) * dh);
            Tensor<Real> vh = col_slice(v, h * dh, (h + 1) * dh);
            Tensor<Real> scores = scale(matmul(qh, kh, true), att_scale);
            scores = add(scores, add_mask);
            if (rel_class) {
                if (n_rel_classes == 0)
                    throw UsageError("transformer layer has no relative bias table");
                std::vector<int> ids(rel_class->size());
                for (size_t i = 0; i < ids.size(); i++)
                    ids[i] = h * n_rel_classes + (*rel_class)[i];
                scores = add(scores, reshape(gather_rows(rel_bias, ids), {t, t}));
            }
            heads.push_back(matmul(softmax(scores, 1), vh));
        }
        Tensor<Real> att = add_rowvec(matmul(concat_cols(heads), wo), bo);
        Tensor<Real> h1 = add(x, dropout(att, drop, train, rng));

        Tensor<Real> b = layer_norm(h1, ln2_g, ln2_b);
        Tensor<Real> m = add_rowvec(matmul(gelu(add_rowvec(matmul(b, fc1_w), fc1_b)), fc2_w),
                                    fc2_b);
        return add(h1, dropout(m, drop, train, rng));
    }
};

// strictly lower-triangular-allowed additive mask (causal attention)
template <class Real>
Tensor<Real> causal_mask(int t) {
    std::vector<Real> m(static_cast<size_t>(t) * t, Real(0));
    for (int i = 0; i < t; i++)
        for (int j = i + 1; j < t; j++) m[static_cast<size_t>(i) * t + j] = Real(-1e9);
    return Tensor<Real>::from_data({t, t}, std::move(m), "causal_mask");
}

}  // namespace ealm
