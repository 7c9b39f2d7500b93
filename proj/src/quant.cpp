#include "ef/quant.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace ef {

namespace {

QuantTensor quantize_matrix(const Tensor<float>& t) {
    QuantTensor out;
    out.shape = t.shape();
    const int64_t rows = t.dim(0);
    const int64_t cols = t.numel() / rows;
    out.q.resize(static_cast<size_t>(t.numel()));
    out.scales.resize(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        float absmax = 0.0f;
        for (int64_t c = 0; c < cols; ++c)
            absmax = std::max(absmax, std::fabs(t.data()[static_cast<size_t>(r * cols + c)]));
        const double scale = absmax == 0.0f ? 1.0 : static_cast<double>(absmax) / 127.0;
        out.scales[static_cast<size_t>(r)] = scale;
        for (int64_t c = 0; c < cols; ++c) {
            const double v = static_cast<double>(t.data()[static_cast<size_t>(r * cols + c)]) / scale;
            const long q = std::lround(std::min(127.0, std::max(-127.0, v)));
            out.q[static_cast<size_t>(r * cols + c)] = static_cast<int8_t>(q);
        }
    }
    return out;
}

std::vector<float> dequantize_matrix(const QuantTensor& qt) {
    const int64_t rows = qt.shape[0];
    const int64_t cols = static_cast<int64_t>(qt.q.size()) / rows;
    std::vector<float> out(qt.q.size());
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c)
            out[static_cast<size_t>(r * cols + c)] = static_cast<float>(
                static_cast<double>(qt.q[static_cast<size_t>(r * cols + c)]) * qt.scales[static_cast<size_t>(r)]);
    return out;
}

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
uint32_t read_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
uint64_t read_u64(std::istream& is) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

constexpr char kMagic[] = "EFQNT1\n";

}  // namespace

QuantizedStore quantize_store(const ParamStore<float>& store) {
    QuantizedStore qs;
    for (const auto& [gname, g] : store.groups) {
        QuantGroup qg;
        qg.name = gname;
        qg.shape_class = g.shape_class;
        for (const auto& [tname, t] : g.tensors) {
            if (t.rank() >= 2)
                qg.quantized.emplace(tname, quantize_matrix(t));
            else
                qg.raw.emplace(tname, std::make_pair(t.shape(), t.data()));
        }
        qs.groups.emplace(gname, std::move(qg));
    }
    return qs;
}

ParamStore<float> dequantize_store(const QuantizedStore& qs) {
    ParamStore<float> store;
    for (const auto& [gname, qg] : qs.groups) {
        ParamGroup<float> g;
        g.name = gname;
        g.shape_class = qg.shape_class;
        for (const auto& [tname, qt] : qg.quantized)
            g.tensors.emplace(tname, Tensor<float>::from(qt.shape, dequantize_matrix(qt), true));
        for (const auto& [tname, raw] : qg.raw)
            g.tensors.emplace(tname, Tensor<float>::from(raw.first, raw.second, true));
        store.groups.emplace(gname, std::move(g));
    }
    return store;
}

Tensor<float> quantized_forward(const ModelConfig& cfg, const TyingPlan& plan,
                                const QuantizedStore& qs, const Batch& batch) {
    auto store = dequantize_store(qs);
    Model<float> model(cfg, plan, store);
    NoGradGuard ng;
    return model.forward(batch);
}

QuantSizeReport quant_size_report(const QuantizedStore& qs) {
    QuantSizeReport r;
    for (const auto& [gname, qg] : qs.groups) {
        for (const auto& [tname, qt] : qg.quantized) {
            r.weight_f32_bytes += static_cast<int64_t>(qt.q.size()) * 4;
            r.weight_int8_bytes += static_cast<int64_t>(qt.q.size());
            r.scale_bytes += static_cast<int64_t>(qt.scales.size()) * 8;
        }
        for (const auto& [tname, raw] : qg.raw)
            r.raw_f32_bytes += static_cast<int64_t>(raw.second.size()) * 4;
    }
    return r;
}

void save_quantized(const std::string& path, const QuantizedStore& qs, const std::string& header_json) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot open quantized store for writing: " + path);
    os.write(kMagic, sizeof(kMagic) - 1);
    write_u64(os, header_json.size());
    os.write(header_json.data(), static_cast<std::streamsize>(header_json.size()));
    uint32_t records = 0;
    for (const auto& [gname, qg] : qs.groups)
        records += static_cast<uint32_t>(qg.quantized.size() + qg.raw.size());
    write_u32(os, records);
    for (const auto& [gname, qg] : qs.groups) {
        auto write_name = [&](const std::string& tname, uint8_t kind, const Shape& shape) {
            const std::string name = gname + "/" + tname;
            write_u32(os, static_cast<uint32_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            os.put(static_cast<char>(qg.shape_class));
            os.put(static_cast<char>(kind));
            os.put(static_cast<char>(shape.size()));
            for (int64_t d : shape) write_u64(os, static_cast<uint64_t>(d));
        };
        for (const auto& [tname, qt] : qg.quantized) {
            write_name(tname, 0, qt.shape);
            os.write(reinterpret_cast<const char*>(qt.scales.data()),
                     static_cast<std::streamsize>(qt.scales.size() * 8));
            os.write(reinterpret_cast<const char*>(qt.q.data()),
                     static_cast<std::streamsize>(qt.q.size()));
        }
        for (const auto& [tname, raw] : qg.raw) {
            write_name(tname, 1, raw.first);
            os.write(reinterpret_cast<const char*>(raw.second.data()),
                     static_cast<std::streamsize>(raw.second.size() * 4));
        }
    }
    if (!os) throw io_error("failed while writing quantized store: " + path);
}

QuantizedStore load_quantized(const std::string& path, std::string* header_json) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open quantized store: " + path);
    char magic[sizeof(kMagic) - 1];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
        throw io_error("not a quantized store: " + path);
    const uint64_t hlen = read_u64(is);
    std::string header(hlen, '\0');
    is.read(header.data(), static_cast<std::streamsize>(hlen));
    if (header_json) *header_json = header;

    QuantizedStore qs;
    const uint32_t records = read_u32(is);
    for (uint32_t rec = 0; rec < records; ++rec) {
        const uint32_t nlen = read_u32(is);
        std::string name(nlen, '\0');
        is.read(name.data(), nlen);
        const auto cls = static_cast<ShapeClass>(is.get());
        const int kind = is.get();
        const int rank = is.get();
        Shape shape(static_cast<size_t>(rank));
        int64_t numel = 1;
        for (int i = 0; i < rank; ++i) {
            shape[static_cast<size_t>(i)] = static_cast<int64_t>(read_u64(is));
            numel *= shape[static_cast<size_t>(i)];
        }
        const auto slash = name.find('/');
        if (slash == std::string::npos) throw io_error("malformed record name in " + path);
        auto& qg = qs.groups[name.substr(0, slash)];
        qg.name = name.substr(0, slash);
        qg.shape_class = cls;
        if (kind == 0) {
            QuantTensor qt;
            qt.shape = shape;
            qt.scales.resize(static_cast<size_t>(shape[0]));
            qt.q.resize(static_cast<size_t>(numel));
            is.read(reinterpret_cast<char*>(qt.scales.data()),
                    static_cast<std::streamsize>(qt.scales.size() * 8));
            is.read(reinterpret_cast<char*>(qt.q.data()), static_cast<std::streamsize>(qt.q.size()));
            qg.quantized.emplace(name.substr(slash + 1), std::move(qt));
        } else {
            std::vector<float> raw(static_cast<size_t>(numel));
            is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4));
            qg.raw.emplace(name.substr(slash + 1), std::make_pair(shape, std::move(raw)));
        }
        if (!is) throw io_error("truncated quantized store: " + path);
    }
    return qs;
}

}  // namespace ef
