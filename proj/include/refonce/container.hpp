#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "refonce/tensor.hpp"

namespace refonce {

/// Malformed binary record; `offset` is the byte position where decoding failed.
class FormatError : public Error {
   public:
    FormatError(const std::string& what, std::size_t offset)
        : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
    std::size_t offset() const { return offset_; }

   private:
    std::size_t offset_;
};

enum class DType : std::uint8_t { kF32 = 0, kU8 = 1 };

struct ContainerEntry {
    std::string name;
    DType dtype = DType::kF32;
    Shape dims;
    std::vector<float> f32;
    std::vector<std::uint8_t> u8;
};

/// Named-tensor container:
///
///   "RFO1" | version u32 | count u32 | entry* | crc32 u32
///   entry = name_len u32 | name | dtype u8 | rank u32 | dims u32[rank] | payload
///
/// All integers and float payloads are little-endian. The CRC covers every
/// byte before it.
class Container {
   public:
    static constexpr std::uint32_t kVersion = 1;
    static constexpr char kMagic[4] = {'R', 'F', 'O', '1'};

    void add_f32(const std::string& name, Shape dims, std::span<const float> values) {
        if (shape_numel(dims) != values.size()) throw ShapeError("container entry '" + name + "': size mismatch");
        ContainerEntry e;
        e.name = name;
        e.dtype = DType::kF32;
        e.dims = std::move(dims);
        e.f32.assign(values.begin(), values.end());
        insert(std::move(e));
    }

    void add_f32(const std::string& name, float value) { add_f32(name, {1}, std::span<const float>(&value, 1)); }

    void add_text(const std::string& name, const std::string& text) {
        ContainerEntry e;
        e.name = name;
        e.dtype = DType::kU8;
        e.dims = {text.size()};
        e.u8.assign(text.begin(), text.end());
        insert(std::move(e));
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    const ContainerEntry& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw Error("container has no entry '" + name + "'");
        return entries_[it->second];
    }

    const std::vector<float>& f32(const std::string& name) const {
        const auto& e = get(name);
        if (e.dtype != DType::kF32) throw Error("container entry '" + name + "' is not f32");
        return e.f32;
    }

    float scalar(const std::string& name) const {
        const auto& v = f32(name);
        if (v.size() != 1) throw Error("container entry '" + name + "' is not a scalar");
        return v[0];
    }

    std::string text(const std::string& name) const {
        const auto& e = get(name);
        if (e.dtype != DType::kU8) throw Error("container entry '" + name + "' is not text");
        return std::string(e.u8.begin(), e.u8.end());
    }

    const std::vector<ContainerEntry>& entries() const { return entries_; }

    std::vector<std::uint8_t> encode() const {
        std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
        put_u32(out, kVersion);
        put_u32(out, static_cast<std::uint32_t>(entries_.size()));
        for (const auto& e : entries_) {
            put_u32(out, static_cast<std::uint32_t>(e.name.size()));
            out.insert(out.end(), e.name.begin(), e.name.end());
            out.push_back(static_cast<std::uint8_t>(e.dtype));
            put_u32(out, static_cast<std::uint32_t>(e.dims.size()));
            for (auto d : e.dims) put_u32(out, static_cast<std::uint32_t>(d));
            if (e.dtype == DType::kF32) {
                for (float v : e.f32) put_u32(out, std::bit_cast<std::uint32_t>(v));
            } else {
                out.insert(out.end(), e.u8.begin(), e.u8.end());
            }
        }
        put_u32(out, crc(out));
        return out;
    }

    static Container decode(std::span<const std::uint8_t> bytes) {
        if (bytes.size() < 16) throw FormatError("container truncated: " + std::to_string(bytes.size()) + " bytes", bytes.size());
        for (int i = 0; i < 4; ++i)
            if (bytes[static_cast<std::size_t>(i)] != static_cast<std::uint8_t>(kMagic[i]))
                throw FormatError("bad magic, expected RFO1", 0);
        const std::uint32_t version = get_u32(bytes, 4);
        if (version != kVersion) throw FormatError("unsupported container version " + std::to_string(version), 4);
        const std::size_t crc_at = bytes.size() - 4;
        const std::uint32_t stored = get_u32(bytes, crc_at);
        if (stored != crc(bytes.first(crc_at))) throw FormatError("CRC mismatch", crc_at);

        Container c;
        std::size_t pos = 8;
        auto need = [&](std::size_t n, const char* what) {
            if (pos + n > crc_at) throw FormatError(std::string("truncated ") + what, pos);
        };
        need(4, "entry count");
        const std::uint32_t count = get_u32(bytes, pos);
        pos += 4;
        for (std::uint32_t k = 0; k < count; ++k) {
            const std::size_t entry_at = pos;
            ContainerEntry e;
            need(4, "name length");
            const std::uint32_t name_len = get_u32(bytes, pos);
            pos += 4;
            need(name_len, "name");
            e.name.assign(reinterpret_cast<const char*>(bytes.data() + pos), name_len);
            pos += name_len;
            need(1, "dtype");
            const std::uint8_t dtype = bytes[pos];
            if (dtype > 1) throw FormatError("unknown dtype code " + std::to_string(dtype), pos);
            e.dtype = static_cast<DType>(dtype);
            pos += 1;
            need(4, "rank");
            const std::uint32_t rank = get_u32(bytes, pos);
            pos += 4;
            need(static_cast<std::size_t>(rank) * 4, "dims");
            std::size_t n = 1;
            for (std::uint32_t d = 0; d < rank; ++d) {
                e.dims.push_back(get_u32(bytes, pos));
                n *= e.dims.back();
                pos += 4;
            }
            if (e.dtype == DType::kF32) {
                need(n * 4, "f32 payload");
                e.f32.resize(n);
                for (std::size_t i = 0; i < n; ++i, pos += 4) e.f32[i] = std::bit_cast<float>(get_u32(bytes, pos));
            } else {
                need(n, "u8 payload");
                e.u8.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
                pos += n;
            }
            if (c.contains(e.name)) throw FormatError("duplicate entry name '" + e.name + "'", entry_at);
            c.insert(std::move(e));
        }
        if (pos != crc_at) throw FormatError("trailing bytes after last entry", pos);
        return c;
    }

    void save(const std::string& path) const {
        const auto bytes = encode();
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw Error("cannot open '" + path + "' for writing");
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw Error("failed writing '" + path + "'");
    }

    static Container load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw Error("cannot open '" + path + "'");
        std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        return decode(bytes);
    }

   private:
    void insert(ContainerEntry e) {
        if (index_.count(e.name)) throw Error("duplicate container entry '" + e.name + "'");
        index_[e.name] = entries_.size();
        entries_.push_back(std::move(e));
    }

    static void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }

    static std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t at) {
        return static_cast<std::uint32_t>(b[at]) | static_cast<std::uint32_t>(b[at + 1]) << 8 |
               static_cast<std::uint32_t>(b[at + 2]) << 16 | static_cast<std::uint32_t>(b[at + 3]) << 24;
    }

    static std::uint32_t crc(std::span<const std::uint8_t> b) {
        return static_cast<std::uint32_t>(::crc32(0L, b.data(), static_cast<uInt>(b.size())));
    }

    std::vector<ContainerEntry> entries_;
    std::map<std::string, std::size_t> index_;
};

}  // namespace refonce
