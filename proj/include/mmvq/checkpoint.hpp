#pragma once

// Binary tensor container used by every save/load path (model checkpoints,
// FVTC caches, session-matrix files).
//
// Layout: magic "MMVQ", format version u32, entry count u32, then per entry:
// name length u16 + UTF-8 name, dtype byte (0 = f32, 1 = raw u8 bytes),
// rank u8, dims as u32 little-endian, raw little-endian payload.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mmvq/errors.hpp"

namespace mmvq::io {

struct Entry {
    std::string name;
    uint8_t dtype = 0;  // 0 = f32, 1 = u8
    std::vector<uint32_t> dims;
    std::vector<float> f32;     // dtype 0
    std::vector<uint8_t> bytes; // dtype 1
};

class Container {
public:
    static constexpr uint32_t kFormatVersion = 1;

    void put_f32(const std::string& name, std::vector<uint32_t> dims, std::vector<float> data);
    void put_bytes(const std::string& name, std::vector<uint8_t> data);
    void put_string(const std::string& name, const std::string& text);

    bool has(const std::string& name) const;
    const Entry& get(const std::string& name) const;
    std::string get_string(const std::string& name) const;

    std::vector<std::string> names() const;  // insertion order
    size_t size() const { return entries_.size(); }

    // Atomic: writes to a temp file in the same directory, then renames.
    void save(const std::filesystem::path& path) const;
    static Container load(const std::filesystem::path& path);

private:
    std::vector<Entry> entries_;
    std::map<std::string, size_t> index_;
};

}  // namespace mmvq::io
