#pragma once

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "cmml/rng.hpp"
#include "cmml/tensor.hpp"

namespace cmml {

// Self-describing binary container: versioned header, run-config JSON with its
// fingerprint, parameters, optimizer moments, memory banks and rng streams.
// Doubles are stored bit-exactly (native little-endian layout).
struct Checkpoint {
    static constexpr char kMagic[8] = {'C', 'M', 'M', 'L', 'C', 'K', 'P', '1'};

    std::string config_json;
    int epoch = 0;
    long long adam_t = 0;
    std::vector<std::pair<std::string, Tensor>> params;
    std::vector<Tensor> adam_m, adam_v;
    struct BankState {
        Tensor contents;
        double lambda = 0.2;
        uint8_t frozen = 0;
    };
    std::vector<BankState> banks;
    std::string rng_shuffle, rng_mask, rng_drop;

    uint64_t fingerprint() const { return fnv1a64(config_json); }
};

namespace detail {

inline void write_u64(std::ostream& os, uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline uint64_t read_u64(std::istream& is) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}
inline void write_str(std::ostream& os, const std::string& s) {
    write_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string read_str(std::istream& is) {
    uint64_t n = read_u64(is);
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    return s;
}
inline void write_tensor(std::ostream& os, const Tensor& t) {
    write_u64(os, static_cast<uint64_t>(t.ndim()));
    for (int i = 0; i < t.ndim(); ++i) write_u64(os, static_cast<uint64_t>(t.dim(i)));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(double)));
}
inline Tensor read_tensor(std::istream& is) {
    uint64_t nd = read_u64(is);
    std::vector<int> shape;
    for (uint64_t i = 0; i < nd; ++i) shape.push_back(static_cast<int>(read_u64(is)));
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    return t;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write checkpoint: " + path);
    os.write(Checkpoint::kMagic, 8);
    detail::write_u64(os, 1);  // version
    detail::write_str(os, ck.config_json);
    detail::write_u64(os, ck.fingerprint());
    detail::write_u64(os, static_cast<uint64_t>(ck.epoch));
    detail::write_u64(os, static_cast<uint64_t>(ck.adam_t));
    detail::write_u64(os, ck.params.size());
    for (const auto& [name, value] : ck.params) {
        detail::write_str(os, name);
        detail::write_tensor(os, value);
    }
    CMML_CHECK(ck.adam_m.size() == ck.params.size() && ck.adam_v.size() == ck.params.size(),
               "checkpoint: optimizer moments must align with parameters");
    for (const Tensor& m : ck.adam_m) detail::write_tensor(os, m);
    for (const Tensor& v : ck.adam_v) detail::write_tensor(os, v);
    detail::write_u64(os, ck.banks.size());
    for (const auto& b : ck.banks) {
        detail::write_tensor(os, b.contents);
        os.write(reinterpret_cast<const char*>(&b.lambda), sizeof(double));
        os.write(reinterpret_cast<const char*>(&b.frozen), 1);
    }
    detail::write_str(os, ck.rng_shuffle);
    detail::write_str(os, ck.rng_mask);
    detail::write_str(os, ck.rng_drop);
    if (!os) throw IoError("short write: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, Checkpoint::kMagic, 8) != 0)
        throw ParseError("not a checkpoint file: " + path);
    uint64_t version = detail::read_u64(is);
    if (version != 1) throw ParseError("unsupported checkpoint version");
    Checkpoint ck;
    ck.config_json = detail::read_str(is);
    uint64_t fp = detail::read_u64(is);
    ck.epoch = static_cast<int>(detail::read_u64(is));
    ck.adam_t = static_cast<long long>(detail::read_u64(is));
    uint64_t np = detail::read_u64(is);
    for (uint64_t i = 0; i < np; ++i) {
        std::string name = detail::read_str(is);
        ck.params.push_back({name, detail::read_tensor(is)});
    }
    for (uint64_t i = 0; i < np; ++i) ck.adam_m.push_back(detail::read_tensor(is));
    for (uint64_t i = 0; i < np; ++i) ck.adam_v.push_back(detail::read_tensor(is));
    uint64_t nb = detail::read_u64(is);
    for (uint64_t i = 0; i < nb; ++i) {
        Checkpoint::BankState b;
        b.contents = detail::read_tensor(is);
        is.read(reinterpret_cast<char*>(&b.lambda), sizeof(double));
        is.read(reinterpret_cast<char*>(&b.frozen), 1);
        ck.banks.push_back(std::move(b));
    }
    ck.rng_shuffle = detail::read_str(is);
    ck.rng_mask = detail::read_str(is);
    ck.rng_drop = detail::read_str(is);
    if (!is) throw ParseError("truncated checkpoint: " + path);
    if (ck.fingerprint() != fp) throw ParseError("checkpoint fingerprint mismatch: " + path);
    return ck;
}

}  // namespace cmml
