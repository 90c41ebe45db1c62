#pragma once

// Bit-exact binary checkpoints. Layout:
//   "SNKL" | u32 version | u64 header_len | header JSON |
//   u64 n_tensors | directory | 64-byte-aligned little-endian payloads
// Directory entry: u32 name_len | name | u32 dtype | u32 rank | u64 dims... |
// u64 absolute byte offset. Payload length is implied by shape and dtype.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "sinklab/common.hpp"
#include "sinklab/model.hpp"
#include "sinklab/tensor.hpp"
#include <nlohmann/json.hpp>

namespace sinklab {

inline constexpr uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'S', 'N', 'K', 'L'};

enum class Dtype : uint32_t { F32 = 0, F64 = 1 };

inline size_t dtype_size(uint32_t code) {
    switch (code) {
        case static_cast<uint32_t>(Dtype::F32): return 4;
        case static_cast<uint32_t>(Dtype::F64): return 8;
        default: throw IoError("unknown dtype code " + std::to_string(code));
    }
}

template <typename T>
constexpr uint32_t dtype_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    if constexpr (std::is_same_v<T, float>)
        return static_cast<uint32_t>(Dtype::F32);
    else
        return static_cast<uint32_t>(Dtype::F64);
}

// A tensor queued for writing; does not own its payload.
struct TensorRef {
    std::string name;
    uint32_t dtype = 0;
    Shape shape;
    const void* data = nullptr;

    int64_t numel() const { return shape_numel(shape); }
    size_t byte_size() const { return static_cast<size_t>(numel()) * dtype_size(dtype); }
};

template <typename T>
TensorRef tensor_ref(const std::string& name, const Tensor<T>& t) {
    return TensorRef{name, dtype_of<T>(), t.shape(), t.data()};
}

struct LoadedTensor {
    uint32_t dtype = 0;
    Shape shape;
    std::vector<unsigned char> bytes;

    int64_t numel() const { return shape_numel(shape); }
    template <typename T>
    const T* as() const {
        if (dtype != dtype_of<T>())
            throw IoError("tensor dtype mismatch: stored code " + std::to_string(dtype));
        return reinterpret_cast<const T*>(bytes.data());
    }
};

struct LoadedCheckpoint {
    nlohmann::json header;
    std::vector<std::string> order;  // directory order
    std::map<std::string, LoadedTensor> tensors;
};

namespace ckpt_detail {

struct File {
    std::FILE* f = nullptr;
    std::string path;
    File(const std::string& p, const char* mode) : path(p) {
        f = std::fopen(p.c_str(), mode);
        if (!f) throw IoError("cannot open " + p);
    }
    ~File() {
        if (f) std::fclose(f);
    }
    File(const File&) = delete;
    File& operator=(const File&) = delete;

    void write(const void* p, size_t n) {
        if (std::fwrite(p, 1, n, f) != n) throw IoError("write failed: " + path);
    }
    void read(void* p, size_t n) {
        if (std::fread(p, 1, n, f) != n) throw IoError("unexpected end of file: " + path);
    }
    void seek(uint64_t off) {
        if (std::fseek(f, static_cast<long>(off), SEEK_SET) != 0)
            throw IoError("seek failed: " + path);
    }
    uint64_t size() {
        if (std::fseek(f, 0, SEEK_END) != 0) throw IoError("seek failed: " + path);
        const long s = std::ftell(f);
        if (s < 0) throw IoError("tell failed: " + path);
        return static_cast<uint64_t>(s);
    }
};

inline void put_u32(std::vector<unsigned char>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::vector<unsigned char>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}
inline uint32_t get_u32(const unsigned char* p) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
    return v;
}
inline uint64_t get_u64(const unsigned char* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    return v;
}

inline uint64_t align64(uint64_t off) { return (off + 63) & ~static_cast<uint64_t>(63); }

}  // namespace ckpt_detail

inline void write_checkpoint_file(const std::string& path, const nlohmann::json& header,
                                  const std::vector<TensorRef>& tensors) {
    using namespace ckpt_detail;
    const std::string htext = header.dump();

    // Directory with offsets resolved up front.
    uint64_t dir_size = 0;
    for (const auto& t : tensors)
        dir_size += 4 + t.name.size() + 4 + 4 + 8 * t.shape.size() + 8;
    uint64_t cursor = 4 + 4 + 8 + htext.size() + 8 + dir_size;
    std::vector<uint64_t> offsets;
    offsets.reserve(tensors.size());
    for (const auto& t : tensors) {
        cursor = align64(cursor);
        offsets.push_back(cursor);
        cursor += t.byte_size();
    }

    std::vector<unsigned char> head;
    head.insert(head.end(), kCheckpointMagic, kCheckpointMagic + 4);
    put_u32(head, kCheckpointVersion);
    put_u64(head, htext.size());
    head.insert(head.end(), htext.begin(), htext.end());
    put_u64(head, tensors.size());
    for (size_t i = 0; i < tensors.size(); ++i) {
        const auto& t = tensors[i];
        put_u32(head, static_cast<uint32_t>(t.name.size()));
        head.insert(head.end(), t.name.begin(), t.name.end());
        put_u32(head, t.dtype);
        put_u32(head, static_cast<uint32_t>(t.shape.size()));
        for (int64_t d : t.shape) put_u64(head, static_cast<uint64_t>(d));
        put_u64(head, offsets[i]);
    }

    File f(path, "wb");
    f.write(head.data(), head.size());
    uint64_t pos = head.size();
    for (size_t i = 0; i < tensors.size(); ++i) {
        const uint64_t pad = offsets[i] - pos;
        static const unsigned char zeros[64] = {};
        if (pad > 64) throw IoError("internal: checkpoint alignment overflow");
        if (pad) f.write(zeros, pad);
        f.write(tensors[i].data, tensors[i].byte_size());
        pos = offsets[i] + tensors[i].byte_size();
    }
}

inline LoadedCheckpoint read_checkpoint_file(const std::string& path) {
    using namespace ckpt_detail;
    File f(path, "rb");
    const uint64_t file_size = f.size();
    f.seek(0);

    unsigned char fixed[16];
    if (file_size < 16) throw IoError("not a checkpoint (too short): " + path);
    f.read(fixed, 16);
    if (std::memcmp(fixed, kCheckpointMagic, 4) != 0)
        throw IoError("bad magic; not a checkpoint: " + path);
    const uint32_t version = get_u32(fixed + 4);
    if (version != kCheckpointVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + path +
                      " (expected " + std::to_string(kCheckpointVersion) + ")");
    const uint64_t hlen = get_u64(fixed + 8);
    if (16 + hlen + 8 > file_size) throw IoError("truncated header: " + path);
    std::string htext(hlen, '\0');
    f.read(htext.data(), hlen);

    LoadedCheckpoint out;
    try {
        out.header = nlohmann::json::parse(htext);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("corrupt checkpoint header in " + path + ": " + e.what());
    }

    unsigned char buf8[8];
    f.read(buf8, 8);
    const uint64_t n_tensors = get_u64(buf8);
    if (n_tensors > (1ull << 32)) throw IoError("implausible tensor count: " + path);

    struct Entry {
        std::string name;
        uint32_t dtype;
        Shape shape;
        uint64_t offset;
    };
    std::vector<Entry> entries;
    entries.reserve(n_tensors);
    for (uint64_t i = 0; i < n_tensors; ++i) {
        unsigned char b4[4];
        f.read(b4, 4);
        const uint32_t name_len = get_u32(b4);
        if (name_len > 4096) throw IoError("implausible tensor name length: " + path);
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        f.read(b4, 4);
        const uint32_t dtype = get_u32(b4);
        dtype_size(dtype);  // validates the code
        f.read(b4, 4);
        const uint32_t rank = get_u32(b4);
        if (rank > 8) throw IoError("implausible tensor rank: " + path);
        Shape shape(rank);
        for (uint32_t r = 0; r < rank; ++r) {
            f.read(buf8, 8);
            shape[r] = static_cast<int64_t>(get_u64(buf8));
            if (shape[r] < 0) throw IoError("negative dimension in " + path);
        }
        f.read(buf8, 8);
        entries.push_back({std::move(name), dtype, std::move(shape), get_u64(buf8)});
    }

    for (auto& e : entries) {
        LoadedTensor t;
        t.dtype = e.dtype;
        t.shape = e.shape;
        const uint64_t len = static_cast<uint64_t>(shape_numel(e.shape)) * dtype_size(e.dtype);
        if (e.offset + len > file_size || e.offset < 16)
            throw IoError("tensor '" + e.name + "' payload out of bounds (truncated?): " + path);
        t.bytes.resize(len);
        f.seek(e.offset);
        if (len) f.read(t.bytes.data(), len);
        if (out.tensors.count(e.name))
            throw IoError("duplicate tensor '" + e.name + "' in " + path);
        out.order.push_back(e.name);
        out.tensors.emplace(std::move(e.name), std::move(t));
    }
    return out;
}

// ---------------------------------------------------------------------------
// model-level wrappers

template <typename T>
void save_model_checkpoint(const std::string& path, const ModelParams<T>& mp, int64_t step,
                           uint64_t seed, const nlohmann::json& extra = nlohmann::json::object()) {
    nlohmann::json header;
    header["model"] = mp.cfg;
    header["step"] = step;
    header["seed"] = seed;
    header["variant"] = to_string(mp.cfg.variant);
    for (auto it = extra.begin(); it != extra.end(); ++it) header[it.key()] = it.value();

    std::vector<TensorRef> refs;
    const_cast<ModelParams<T>&>(mp).for_each_param(
        [&](const std::string& name, Tensor<T>& t) { refs.push_back(tensor_ref(name, t)); });
    write_checkpoint_file(path, header, refs);
}

struct ModelLoadResult {
    nlohmann::json header;
    std::vector<std::string> ignored;  // unknown tensors present in the file
};

// Reconstructs the parameter set from the stored config; unknown extra
// tensors are reported, not fatal.
template <typename T>
ModelLoadResult load_model_checkpoint(const std::string& path, ModelParams<T>& mp) {
    auto file = read_checkpoint_file(path);
    if (!file.header.contains("model"))
        throw IoError("checkpoint header lacks a model config: " + path);
    ModelConfig stored = file.header.at("model").get<ModelConfig>();
    stored.validate();

    mp = alloc_params<T>(stored);
    std::set<std::string> expected;
    mp.for_each_param([&](const std::string& name, Tensor<T>& t) {
        expected.insert(name);
        auto it = file.tensors.find(name);
        if (it == file.tensors.end())
            throw IoError("checkpoint missing tensor '" + name + "': " + path);
        const auto& lt = it->second;
        if (lt.shape != t.shape())
            throw IoError("checkpoint tensor '" + name + "' has shape " + shape_str(lt.shape) +
                          ", expected " + shape_str(t.shape()));
        const T* src = lt.template as<T>();
        std::memcpy(t.mutable_data(), src, static_cast<size_t>(t.numel()) * sizeof(T));
    });

    ModelLoadResult res;
    res.header = file.header;
    for (const auto& name : file.order)
        if (!expected.count(name)) res.ignored.push_back(name);
    return res;
}

}  // namespace sinklab
