#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctxlab/rng.hpp"
#include "ctxlab/tensor.hpp"

namespace ctxlab {

struct Parameter {
    std::string id;
    Tensor tensor;
    bool trainable = true;
};

// Ordered map of named parameters. Iteration order is the id order, which
// keeps gradient accumulation, optimizer sweeps and checkpoints deterministic.
class ParamStore {
  public:
    Parameter& add(const std::string& id, Tensor t, bool trainable = true) {
        auto [it, inserted] = params_.emplace(id, Parameter{id, std::move(t), trainable});
        if (!inserted) {
            throw std::invalid_argument("param store: duplicate id " + id);
        }
        return it->second;
    }

    Parameter& add_normal(const std::string& id, std::vector<int> shape, Rng& rng,
                          double sigma, double mu = 0.0, bool trainable = true) {
        Tensor t(std::move(shape));
        for (double& v : t.values) {
            v = rng.normal(mu, sigma);
        }
        return add(id, std::move(t), trainable);
    }

    bool contains(const std::string& id) const { return params_.count(id) != 0; }

    Parameter& at(const std::string& id) {
        auto it = params_.find(id);
        if (it == params_.end()) {
            throw std::out_of_range("param store: unknown id " + id);
        }
        return it->second;
    }
    const Parameter& at(const std::string& id) const {
        return const_cast<ParamStore*>(this)->at(id);
    }

    std::size_t size() const { return params_.size(); }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    std::vector<std::string> ids() const {
        std::vector<std::string> out;
        out.reserve(params_.size());
        for (const auto& [id, p] : params_) {
            out.push_back(id);
        }
        return out;
    }

    std::size_t total_values() const {
        std::size_t n = 0;
        for (const auto& [id, p] : params_) {
            n += p.tensor.size();
        }
        return n;
    }

    // FNV-1a over the raw value bytes, in id order. Bitwise-equal stores hash
    // equal; any flipped bit changes the hash.
    std::uint64_t value_hash(const std::string& id_prefix = "") const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& [id, p] : params_) {
            if (id.rfind(id_prefix, 0) != 0) {
                continue;
            }
            for (unsigned char c : id) {
                h = (h ^ c) * 0x100000001b3ULL;
            }
            for (double v : p.tensor.values) {
                std::uint64_t bits;
                std::memcpy(&bits, &v, sizeof(bits));
                for (int b = 0; b < 8; ++b) {
                    h = (h ^ ((bits >> (8 * b)) & 0xff)) * 0x100000001b3ULL;
                }
            }
        }
        return h;
    }

  private:
    std::map<std::string, Parameter> params_;
};

// --------------------------------------------------------------------------
// Checkpoint file: little-endian binary, bit-exact round trip.
//   magic "CTXCKPT1" | u32 meta_len | meta bytes (free-form JSON)
//   u32 n_params | per param: u32 id_len, id, u8 trainable,
//                             u32 ndim, u32 dims[], f64 values[]
// --------------------------------------------------------------------------

namespace detail {

template <class T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) {
        throw std::runtime_error("checkpoint: unexpected end of file");
    }
    return v;
}

}  // namespace detail

inline void save_checkpoint(const ParamStore& store, const std::string& path,
                            const std::string& meta = "{}") {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw std::runtime_error("checkpoint: cannot open for write: " + path);
    }
    os.write("CTXCKPT1", 8);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(meta.size()));
    os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(store.size()));
    for (const auto& [id, p] : store) {
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(id.size()));
        os.write(id.data(), static_cast<std::streamsize>(id.size()));
        detail::write_pod<std::uint8_t>(os, p.trainable ? 1 : 0);
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(p.tensor.shape.size()));
        for (int d : p.tensor.shape) {
            detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(d));
        }
        os.write(reinterpret_cast<const char*>(p.tensor.values.data()),
                 static_cast<std::streamsize>(p.tensor.values.size() * sizeof(double)));
    }
    if (!os) {
        throw std::runtime_error("checkpoint: write failed: " + path);
    }
}

struct Checkpoint {
    std::string meta;
    ParamStore store;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw std::runtime_error("checkpoint: cannot open: " + path);
    }
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, "CTXCKPT1", 8) != 0) {
        throw std::runtime_error("checkpoint: bad magic in " + path);
    }
    Checkpoint ck;
    const auto meta_len = detail::read_pod<std::uint32_t>(is);
    ck.meta.resize(meta_len);
    is.read(ck.meta.data(), meta_len);
    const auto n = detail::read_pod<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < n; ++i) {
        const auto id_len = detail::read_pod<std::uint32_t>(is);
        std::string id(id_len, '\0');
        is.read(id.data(), id_len);
        const bool trainable = detail::read_pod<std::uint8_t>(is) != 0;
        const auto ndim = detail::read_pod<std::uint32_t>(is);
        std::vector<int> shape(ndim);
        for (auto& d : shape) {
            d = static_cast<int>(detail::read_pod<std::uint32_t>(is));
        }
        Tensor t(shape);
        is.read(reinterpret_cast<char*>(t.values.data()),
                static_cast<std::streamsize>(t.values.size() * sizeof(double)));
        if (!is) {
            throw std::runtime_error("checkpoint: truncated values in " + path);
        }
        ck.store.add(id, std::move(t), trainable);
    }
    return ck;
}

// Copies checkpoint values into matching ids of an existing store;
// shapes must agree. Ids present only on one side are left alone.
inline int restore_into(ParamStore& store, const ParamStore& loaded) {
    int n = 0;
    for (const auto& [id, p] : loaded) {
        if (!store.contains(id)) {
            continue;
        }
        Parameter& dst = store.at(id);
        if (dst.tensor.shape != p.tensor.shape) {
            throw std::runtime_error("checkpoint: shape mismatch for " + id);
        }
        dst.tensor.values = p.tensor.values;
        ++n;
    }
    return n;
}

}  // namespace ctxlab
