#pragma once

// Single owner of all trainable arrays, addressed by group name. Slots tied
// to one group observe literally the same buffer, so tying identity and
// gradient accumulation across slots fall out of the tensor engine.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "ef/config.hpp"
#include "ef/tensor.hpp"
#include "ef/tying.hpp"

namespace ef {

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

template <typename T>
struct ParamGroup {
    std::string name;
    ShapeClass shape_class;
    std::map<std::string, Tensor<T>> tensors;
};

template <typename T>
struct ParamStore {
    std::map<std::string, ParamGroup<T>> groups;

    ParamGroup<T>& group(const std::string& name) {
        auto it = groups.find(name);
        if (it == groups.end()) throw config_error("param store has no group '" + name + "'");
        return it->second;
    }
    const ParamGroup<T>& group(const std::string& name) const {
        auto it = groups.find(name);
        if (it == groups.end()) throw config_error("param store has no group '" + name + "'");
        return it->second;
    }
    bool has_group(const std::string& name) const { return groups.count(name) != 0; }

    Tensor<T>& tensor(const std::string& group_name, const std::string& tensor_name) {
        auto& g = group(group_name);
        auto it = g.tensors.find(tensor_name);
        if (it == g.tensors.end())
            throw config_error("group '" + group_name + "' has no tensor '" + tensor_name + "'");
        return it->second;
    }

    int64_t param_count(bool include_embeddings) const {
        int64_t total = 0;
        for (const auto& [name, g] : groups) {
            if (!include_embeddings && g.shape_class == ShapeClass::embedding) continue;
            for (const auto& [tn, t] : g.tensors) total += t.numel();
        }
        return total;
    }

    template <typename Fn>
    void for_each_tensor(Fn&& fn) {
        for (auto& [gname, g] : groups)
            for (auto& [tname, t] : g.tensors) fn(g, tname, t);
    }

    void zero_grads() {
        for_each_tensor([](ParamGroup<T>&, const std::string&, Tensor<T>& t) { t.zero_grad(); });
    }
};

namespace detail {

// Weight matrices: zero-mean uniform scaled by fan-in. Vectors (biases) are
// zero except LN gains, which start at one. Adapter B matrices start at zero
// so the adapted forward equals the base forward at initialization.
template <typename T>
void init_tensor(Tensor<T>& t, const std::string& name, ShapeClass c, Rng& rng) {
    if (c == ShapeClass::bias) {
        const T v = (name == "ln1_g" || name == "ln2_g") ? T(1) : T(0);
        for (auto& x : t.data()) x = v;
        return;
    }
    if (c == ShapeClass::adapter && (name == "b_q" || name == "b_v")) {
        for (auto& x : t.data()) x = T(0);
        return;
    }
    const int64_t fan_in = t.rank() >= 2 ? t.dim(0) : t.dim(0);
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& x : t.data()) x = static_cast<T>(rng.uniform_pm(s));
}

}  // namespace detail

// Materializes each group of the plan exactly once; deterministic under seed.
template <typename T>
ParamStore<T> init_params(const TyingPlan& plan, const ModelConfig& cfg, uint64_t seed) {
    ParamStore<T> store;
    Rng rng(seed);
    // plan.groups is an ordered map, so the draw sequence is reproducible.
    for (const auto& [name, cls] : plan.groups) {
        ParamGroup<T> g;
        g.name = name;
        g.shape_class = cls;
        for (const auto& [tname, shape] : group_tensor_shapes(cls, cfg)) {
            auto t = Tensor<T>::zeros(shape, true);
            detail::init_tensor(t, tname, cls, rng);
            g.tensors.emplace(tname, std::move(t));
        }
        store.groups.emplace(name, std::move(g));
    }
    return store;
}

// ---------------------------------------------------------------------------
// Checkpoint container: human-readable header (JSON manifest supplied by the
// caller) followed by flat binary records of little-endian float32 data.
// Round-trips bit-exactly for float stores.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[] = "EFCKPT1\n";

namespace detail {

inline void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline uint32_t read_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
inline uint64_t read_u64(std::istream& is) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const ParamStore<T>& store, const std::string& header_json) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot open checkpoint for writing: " + path);
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
    detail::write_u64(os, header_json.size());
    os.write(header_json.data(), static_cast<std::streamsize>(header_json.size()));

    uint32_t records = 0;
    for (const auto& [gname, g] : store.groups) records += static_cast<uint32_t>(g.tensors.size());
    detail::write_u32(os, records);

    for (const auto& [gname, g] : store.groups) {
        for (const auto& [tname, t] : g.tensors) {
            const std::string name = gname + "/" + tname;
            detail::write_u32(os, static_cast<uint32_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            os.put(static_cast<char>(g.shape_class));
            os.put(static_cast<char>(t.rank()));
            for (int i = 0; i < t.rank(); ++i) detail::write_u64(os, static_cast<uint64_t>(t.dim(i)));
            for (T v : t.data()) {
                const float f = static_cast<float>(v);
                os.write(reinterpret_cast<const char*>(&f), 4);
            }
        }
    }
    if (!os) throw io_error("failed while writing checkpoint: " + path);
}

// Reads only the human-readable header of a checkpoint.
inline std::string read_checkpoint_header(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open checkpoint: " + path);
    char magic[sizeof(kCheckpointMagic) - 1];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
        throw io_error("not a checkpoint file: " + path);
    const uint64_t hlen = detail::read_u64(is);
    std::string header(hlen, '\0');
    is.read(header.data(), static_cast<std::streamsize>(hlen));
    if (!is) throw io_error("truncated checkpoint header: " + path);
    return header;
}

// Loads records into an existing store built from the same plan/config;
// returns the header. Shape or inventory mismatches are rejected.
template <typename T>
std::string load_checkpoint(const std::string& path, ParamStore<T>& store) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open checkpoint: " + path);
    char magic[sizeof(kCheckpointMagic) - 1];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
        throw io_error("not a checkpoint file: " + path);
    const uint64_t hlen = detail::read_u64(is);
    std::string header(hlen, '\0');
    is.read(header.data(), static_cast<std::streamsize>(hlen));

    const uint32_t records = detail::read_u32(is);
    uint32_t expected = 0;
    for (const auto& [gname, g] : store.groups) expected += static_cast<uint32_t>(g.tensors.size());
    if (records != expected)
        throw io_error("checkpoint record count " + std::to_string(records) + " does not match store (" +
                       std::to_string(expected) + ")");

    for (uint32_t rec = 0; rec < records; ++rec) {
        const uint32_t nlen = detail::read_u32(is);
        std::string name(nlen, '\0');
        is.read(name.data(), nlen);
        const auto slash = name.find('/');
        if (slash == std::string::npos) throw io_error("malformed checkpoint record name: " + name);
        const auto cls = static_cast<ShapeClass>(is.get());
        const int rank = is.get();
        Shape shape(static_cast<size_t>(rank));
        for (int i = 0; i < rank; ++i) shape[static_cast<size_t>(i)] = static_cast<int64_t>(detail::read_u64(is));

        auto& t = store.tensor(name.substr(0, slash), name.substr(slash + 1));
        if (store.group(name.substr(0, slash)).shape_class != cls)
            throw io_error("checkpoint shape-class mismatch for " + name);
        if (t.shape() != shape)
            throw io_error("checkpoint shape mismatch for " + name + ": file " + shape_str(shape) +
                           " vs store " + shape_str(t.shape()));
        for (auto& v : t.data()) {
            float f = 0;
            is.read(reinterpret_cast<char*>(&f), 4);
            v = static_cast<T>(f);
        }
        if (!is) throw io_error("truncated checkpoint: " + path);
    }
    return header;
}

using ParamStoreF = ParamStore<float>;
using ParamStoreD = ParamStore<double>;

}  // namespace ef
