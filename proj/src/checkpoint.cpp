#include "ealm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace ealm {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format stores little-endian raw values");

namespace {

const char kMagic[8] = {'E', 'A', 'L', 'M', 'C', 'K', 'P', '1'};
const uint32_t kVersion = 1;

void put_u32(std::vector<unsigned char>& out, uint32_t v) {
    out.insert(out.end(), reinterpret_cast<unsigned char*>(&v),
               reinterpret_cast<unsigned char*>(&v) + 4);
}

void put_u64(std::vector<unsigned char>& out, uint64_t v) {
    out.insert(out.end(), reinterpret_cast<unsigned char*>(&v),
               reinterpret_cast<unsigned char*>(&v) + 8);
}

void put_str(std::vector<unsigned char>& out, const std::string& s) {
    put_u32(out, static_cast<uint32_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
}

struct Reader {
    const unsigned char* p;
    const unsigned char* end;

    void need(size_t n) const {
        if (static_cast<size_t>(end - p) < n) throw IoError("checkpoint: truncated file");
    }
    uint32_t u32() {
        need(4);
        uint32_t v;
        std::memcpy(&v, p, 4);
        p += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v;
        std::memcpy(&v, p, 8);
        p += 8;
        return v;
    }
    std::string str() {
        uint32_t n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(p), n);
        p += n;
        return s;
    }
    unsigned char byte() {
        need(1);
        return *p++;
    }
};

}  // namespace

void Checkpoint::set_meta(const std::string& key, const std::string& value) {
    for (auto& [k, v] : meta_) {
        if (k == key) {
            v = value;
            return;
        }
    }
    meta_.push_back({key, value});
}

bool Checkpoint::has_meta(const std::string& key) const {
    for (const auto& [k, v] : meta_)
        if (k == key) return true;
    return false;
}

const std::string& Checkpoint::meta(const std::string& key) const {
    for (const auto& [k, v] : meta_)
        if (k == key) return v;
    throw IoError("checkpoint: missing metadata key '" + key + "'");
}

std::string Checkpoint::meta_or(const std::string& key, const std::string& fallback) const {
    for (const auto& [k, v] : meta_)
        if (k == key) return v;
    return fallback;
}

bool Checkpoint::has(const std::string& name) const {
    for (const auto& b : blobs_)
        if (b.name == name) return true;
    return false;
}

const Checkpoint::Blob& Checkpoint::blob(const std::string& name) const {
    for (const auto& b : blobs_)
        if (b.name == name) return b;
    throw IoError("checkpoint: missing tensor '" + name + "'");
}

uint64_t Checkpoint::tensor_hash(const std::string& name) const {
    const Blob& b = blob(name);
    return fnv1a(b.bytes.data(), b.bytes.size());
}

uint64_t Checkpoint::content_hash() const {
    auto buf = serialize();
    return fnv1a(buf.data(), buf.size());
}

std::vector<unsigned char> Checkpoint::serialize() const {
    std::vector<unsigned char> out;
    out.insert(out.end(), kMagic, kMagic + 8);
    put_u32(out, kVersion);
    put_str(out, kind);
    put_u32(out, static_cast<uint32_t>(meta_.size()));
    for (const auto& [k, v] : meta_) {
        put_str(out, k);
        put_str(out, v);
    }
    put_u32(out, static_cast<uint32_t>(blobs_.size()));
    for (const auto& b : blobs_) {
        put_str(out, b.name);
        out.push_back(static_cast<unsigned char>(b.dtype));
        out.push_back(b.frozen ? 1 : 0);
        put_u32(out, static_cast<uint32_t>(b.shape.size()));
        for (int d : b.shape) put_u64(out, static_cast<uint64_t>(d));
        put_u64(out, b.bytes.size());
        out.insert(out.end(), b.bytes.begin(), b.bytes.end());
    }
    return out;
}

Checkpoint Checkpoint::deserialize(const std::vector<unsigned char>& buf) {
    Reader r{buf.data(), buf.data() + buf.size()};
    r.need(8);
    if (std::memcmp(r.p, kMagic, 8) != 0) throw IoError("checkpoint: bad magic");
    r.p += 8;
    if (r.u32() != kVersion) throw IoError("checkpoint: unsupported version");
    Checkpoint ck;
    ck.kind = r.str();
    const uint32_t n_meta = r.u32();
    for (uint32_t i = 0; i < n_meta; i++) {
        std::string k = r.str();
        std::string v = r.str();
        ck.meta_.push_back({std::move(k), std::move(v)});
    }
    const uint32_t n_tensors = r.u32();
    for (uint32_t i = 0; i < n_tensors; i++) {
        Blob b;
        b.name = r.str();
        b.dtype = static_cast<char>(r.byte());
        if (b.dtype != 'f' && b.dtype != 'd') throw IoError("checkpoint: unknown dtype tag");
        b.frozen = r.byte() != 0;
        const uint32_t ndim = r.u32();
        size_t total = 1;
        for (uint32_t d = 0; d < ndim; d++) {
            uint64_t dim = r.u64();
            b.shape.push_back(static_cast<int>(dim));
            total *= dim;
        }
        const uint64_t len = r.u64();
        const size_t elem = b.dtype == 'f' ? 4 : 8;
        if (len != total * elem) throw IoError("checkpoint: tensor byte length mismatch");
        r.need(len);
        b.bytes.assign(r.p, r.p + len);
        r.p += len;
        ck.blobs_.push_back(std::move(b));
    }
    return ck;
}

void Checkpoint::save(const std::string& path) const {
    auto buf = serialize();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("checkpoint: cannot write " + path);
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("checkpoint: short write to " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("checkpoint: cannot read " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
    return deserialize(buf);
}

std::string hash_hex(uint64_t h) {
    std::ostringstream os;
    os << std::hex;
    for (int i = 15; i >= 0; i--) os << "0123456789abcdef"[(h >> (i * 4)) & 0xf];
    return os.str().substr(0, 16);
}

}  // namespace ealm
