#pragma once

// Corpus ingestion. Two on-disk forms:
//   - raw bytes: every byte is a token id (0..255) under the byte-level
//     vocabulary of 259 = 256 bytes + BOS + EOS + PAD
//   - pre-tokenized: "SNKT" | u32 vocab | u32 ids, little-endian
// Training prepends BOS to each sampled block; the final 5% of the corpus is
// held out as the validation split.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "sinklab/common.hpp"
#include "sinklab/rng.hpp"

namespace sinklab {

inline constexpr int32_t kByteVocab = 259;
inline constexpr int32_t kBosId = 256;
inline constexpr int32_t kEosId = 257;
inline constexpr int32_t kPadId = 258;
inline constexpr char kTokenMagic[4] = {'S', 'N', 'K', 'T'};

class TokenStream {
  public:
    static TokenStream from_ids(std::vector<int32_t> ids, int32_t vocab) {
        for (size_t i = 0; i < ids.size(); ++i)
            if (ids[i] < 0 || ids[i] >= vocab)
                throw IoError("token id " + std::to_string(ids[i]) + " at position " +
                              std::to_string(i) + " outside vocab " + std::to_string(vocab));
        TokenStream s;
        s.ids_ = std::move(ids);
        s.vocab_ = vocab;
        return s;
    }

    static TokenStream from_bytes(const unsigned char* data, size_t n) {
        std::vector<int32_t> ids(n);
        for (size_t i = 0; i < n; ++i) ids[i] = static_cast<int32_t>(data[i]);
        TokenStream s;
        s.ids_ = std::move(ids);
        s.vocab_ = kByteVocab;
        return s;
    }

    // Sniffs the pre-tokenized magic; anything else is read as raw bytes.
    static TokenStream from_file(const std::string& path) {
        std::FILE* f = std::fopen(path.c_str(), "rb");
        if (!f) throw IoError("cannot open corpus file: " + path);
        std::vector<unsigned char> bytes;
        unsigned char buf[1 << 16];
        size_t got;
        while ((got = std::fread(buf, 1, sizeof buf, f)) > 0)
            bytes.insert(bytes.end(), buf, buf + got);
        const bool fail = std::ferror(f);
        std::fclose(f);
        if (fail) throw IoError("read failed: " + path);

        if (bytes.size() >= 8 && std::memcmp(bytes.data(), kTokenMagic, 4) == 0) {
            uint32_t vocab = 0;
            for (int i = 0; i < 4; ++i)
                vocab |= static_cast<uint32_t>(bytes[4 + static_cast<size_t>(i)]) << (8 * i);
            if (vocab == 0 || vocab > (1u << 24))
                throw IoError("implausible vocab " + std::to_string(vocab) + " in " + path);
            if ((bytes.size() - 8) % 4 != 0)
                throw IoError("truncated pre-tokenized corpus: " + path);
            const size_t n = (bytes.size() - 8) / 4;
            std::vector<int32_t> ids(n);
            for (size_t i = 0; i < n; ++i) {
                uint32_t v = 0;
                for (int b = 0; b < 4; ++b)
                    v |= static_cast<uint32_t>(bytes[8 + i * 4 + static_cast<size_t>(b)]) << (8 * b);
                ids[i] = static_cast<int32_t>(v);
            }
            return from_ids(std::move(ids), static_cast<int32_t>(vocab));
        }
        return from_bytes(bytes.data(), bytes.size());
    }

    int32_t vocab() const { return vocab_; }
    int64_t size() const { return static_cast<int64_t>(ids_.size()); }
    const int32_t* data() const { return ids_.data(); }

    // Final 5% (at least one token when possible) is validation.
    int64_t train_size() const {
        const int64_t n = size();
        const int64_t val = n / 20;
        return n - val;
    }
    int64_t val_size() const { return size() - train_size(); }
    const int32_t* train_data() const { return ids_.data(); }
    const int32_t* val_data() const { return ids_.data() + train_size(); }

  private:
    std::vector<int32_t> ids_;
    int32_t vocab_ = kByteVocab;
};

inline void write_pretokenized_file(const std::string& path, const std::vector<int32_t>& ids,
                                    int32_t vocab) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw IoError("cannot open for writing: " + path);
    std::vector<unsigned char> out;
    out.reserve(8 + ids.size() * 4);
    out.insert(out.end(), kTokenMagic, kTokenMagic + 4);
    for (int i = 0; i < 4; ++i)
        out.push_back(static_cast<unsigned char>((static_cast<uint32_t>(vocab) >> (8 * i)) & 0xff));
    for (int32_t id : ids)
        for (int i = 0; i < 4; ++i)
            out.push_back(static_cast<unsigned char>((static_cast<uint32_t>(id) >> (8 * i)) & 0xff));
    const bool ok = std::fwrite(out.data(), 1, out.size(), f) == out.size();
    std::fclose(f);
    if (!ok) throw IoError("write failed: " + path);
}

// One training sample: x = [BOS, s_j, ..., s_{j+block-2}], y = next token at
// each position. Needs block_size consecutive corpus tokens.
inline void sample_block(const int32_t* region, int64_t region_len, int64_t block_size,
                         CounterRng& rng, int32_t* x, int32_t* y) {
    if (region_len < block_size)
        throw ConfigError("corpus region of " + std::to_string(region_len) +
                          " tokens is smaller than one block of " + std::to_string(block_size));
    const int64_t max_start = region_len - block_size;
    const int64_t start =
        max_start == 0 ? 0 : static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(max_start + 1));
    x[0] = kBosId;
    for (int64_t t = 0; t < block_size - 1; ++t) x[t + 1] = region[start + t];
    for (int64_t t = 0; t < block_size; ++t) y[t] = region[start + t];
}

}  // namespace sinklab
