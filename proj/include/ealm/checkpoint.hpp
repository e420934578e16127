#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "ealm/errors.hpp"
#include "ealm/tensor.hpp"
#include "ealm/vocab.hpp"

namespace ealm {

// Named-tensor container with a versioned header: magic, version, model
// kind, ordered key-value metadata, then each tensor as (name, dtype tag,
// frozen flag, shape, little-endian raw values). Round-trips bit-exactly.
class Checkpoint {
public:
    struct Blob {
        std::string name;
        char dtype = 'f';  // 'f' float32, 'd' float64
        bool frozen = false;
        std::vector<int> shape;
        std::vector<unsigned char> bytes;
    };

    std::string kind;  // "pretrained" | "entity" | "fusion"

    void set_meta(const std::string& key, const std::string& value);
    bool has_meta(const std::string& key) const;
    const std::string& meta(const std::string& key) const;
    std::string meta_or(const std::string& key, const std::string& fallback) const;
    const std::vector<std::pair<std::string, std::string>>& meta_items() const { return meta_; }

    template <class Real>
    void put(const std::string& name, const Tensor<Real>& t, bool frozen = false) {
        Blob b;
        b.name = name;
        b.dtype = sizeof(Real) == 4 ? 'f' : 'd';
        b.frozen = frozen;
        b.shape = t.shape();
        b.bytes.resize(t.size() * sizeof(Real));
        std::memcpy(b.bytes.data(), t.value().data(), b.bytes.size());
        for (auto& existing : blobs_) {
            if (existing.name == name) {
                existing = std::move(b);
                return;
            }
        }
        blobs_.push_back(std::move(b));
    }

    bool has(const std::string& name) const;
    const Blob& blob(const std::string& name) const;
    const std::vector<Blob>& blobs() const { return blobs_; }

    // dtype tag must match Real; precision is never converted silently
    template <class Real>
    Tensor<Real> get(const std::string& name, bool requires_grad = false) const {
        const Blob& b = blob(name);
        const char want = sizeof(Real) == 4 ? 'f' : 'd';
        if (b.dtype != want)
            throw ContractError("checkpoint tensor '" + name + "': dtype tag '" +
                                std::string(1, b.dtype) + "' does not match requested precision");
        std::vector<Real> data(b.bytes.size() / sizeof(Real));
        std::memcpy(data.data(), b.bytes.data(), b.bytes.size());
        Tensor<Real> t = Tensor<Real>::from_data(b.shape, std::move(data), name);
        t.set_requires_grad(requires_grad);
        return t;
    }

    uint64_t tensor_hash(const std::string& name) const;
    uint64_t content_hash() const;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
    std::vector<unsigned char> serialize() const;
    static Checkpoint deserialize(const std::vector<unsigned char>& buf);

private:
    std::vector<std::pair<std::string, std::string>> meta_;
    std::vector<Blob> blobs_;
};

// hex digest for reports and manifests
std::string hash_hex(uint64_t h);

}  // namespace ealm
