#include "mmvq/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace mmvq::io {

namespace {

void append_u16(std::vector<uint8_t>& buf, uint16_t v) {
    buf.push_back(static_cast<uint8_t>(v & 0xff));
    buf.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
}

void append_u32(std::vector<uint8_t>& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

uint16_t read_u16(const uint8_t* p) { return static_cast<uint16_t>(p[0] | (p[1] << 8)); }
uint32_t read_u32(const uint8_t* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) | (static_cast<uint32_t>(p[2]) << 16) |
           (static_cast<uint32_t>(p[3]) << 24);
}

uint64_t dims_numel(const std::vector<uint32_t>& dims) {
    uint64_t n = 1;
    for (uint32_t d : dims) n *= d;
    return n;
}

}  // namespace

void Container::put_f32(const std::string& name, std::vector<uint32_t> dims, std::vector<float> data) {
    if (dims_numel(dims) != data.size())
        throw ValidationError("container: entry '" + name + "' dims do not match payload size");
    Entry e;
    e.name = name;
    e.dtype = 0;
    e.dims = std::move(dims);
    e.f32 = std::move(data);
    auto it = index_.find(name);
    if (it != index_.end()) {
        entries_[it->second] = std::move(e);
    } else {
        index_[name] = entries_.size();
        entries_.push_back(std::move(e));
    }
}

void Container::put_bytes(const std::string& name, std::vector<uint8_t> data) {
    Entry e;
    e.name = name;
    e.dtype = 1;
    e.dims = {static_cast<uint32_t>(data.size())};
    e.bytes = std::move(data);
    auto it = index_.find(name);
    if (it != index_.end()) {
        entries_[it->second] = std::move(e);
    } else {
        index_[name] = entries_.size();
        entries_.push_back(std::move(e));
    }
}

void Container::put_string(const std::string& name, const std::string& text) {
    put_bytes(name, std::vector<uint8_t>(text.begin(), text.end()));
}

bool Container::has(const std::string& name) const { return index_.count(name) > 0; }

const Entry& Container::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("container: missing entry '" + name + "'");
    return entries_[it->second];
}

std::string Container::get_string(const std::string& name) const {
    const Entry& e = get(name);
    if (e.dtype != 1) throw ValidationError("container: entry '" + name + "' is not a byte entry");
    return std::string(e.bytes.begin(), e.bytes.end());
}

std::vector<std::string> Container::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.name);
    return out;
}

void Container::save(const std::filesystem::path& path) const {
    std::vector<uint8_t> buf;
    buf.push_back('M');
    buf.push_back('M');
    buf.push_back('V');
    buf.push_back('Q');
    append_u32(buf, kFormatVersion);
    append_u32(buf, static_cast<uint32_t>(entries_.size()));
    for (const auto& e : entries_) {
        if (e.name.size() > 0xffff) throw ValidationError("container: entry name too long");
        append_u16(buf, static_cast<uint16_t>(e.name.size()));
        buf.insert(buf.end(), e.name.begin(), e.name.end());
        buf.push_back(e.dtype);
        buf.push_back(static_cast<uint8_t>(e.dims.size()));
        for (uint32_t d : e.dims) append_u32(buf, d);
        if (e.dtype == 0) {
            for (float f : e.f32) append_u32(buf, std::bit_cast<uint32_t>(f));
        } else {
            buf.insert(buf.end(), e.bytes.begin(), e.bytes.end());
        }
    }
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw ValidationError("container: cannot open '" + tmp.string() + "' for writing");
        os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!os) throw ValidationError("container: write failed for '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

Container Container::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("container: cannot open '" + path.string() + "'");
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    size_t off = 0;
    auto need = [&](size_t n) {
        if (off + n > buf.size()) throw ValidationError("container: truncated file '" + path.string() + "'");
    };
    need(4);
    if (std::memcmp(buf.data(), "MMVQ", 4) != 0)
        throw ValidationError("container: bad magic in '" + path.string() + "'");
    off = 4;
    need(8);
    const uint32_t version = read_u32(buf.data() + off);
    off += 4;
    if (version != kFormatVersion)
        throw ValidationError("container: unsupported format version " + std::to_string(version));
    const uint32_t count = read_u32(buf.data() + off);
    off += 4;
    Container c;
    for (uint32_t i = 0; i < count; ++i) {
        need(2);
        const uint16_t name_len = read_u16(buf.data() + off);
        off += 2;
        need(name_len);
        std::string name(reinterpret_cast<const char*>(buf.data() + off), name_len);
        off += name_len;
        need(2);
        const uint8_t dtype = buf[off++];
        const uint8_t rank = buf[off++];
        std::vector<uint32_t> dims(rank);
        need(4u * rank);
        for (uint8_t r = 0; r < rank; ++r) {
            dims[r] = read_u32(buf.data() + off);
            off += 4;
        }
        const uint64_t n = dims_numel(dims);
        if (dtype == 0) {
            need(n * 4);
            std::vector<float> data(n);
            for (uint64_t j = 0; j < n; ++j) {
                data[j] = std::bit_cast<float>(read_u32(buf.data() + off));
                off += 4;
            }
            c.put_f32(name, std::move(dims), std::move(data));
        } else if (dtype == 1) {
            need(n);
            c.put_bytes(name, std::vector<uint8_t>(buf.begin() + static_cast<long>(off),
                                                   buf.begin() + static_cast<long>(off + n)));
            off += n;
        } else {
            throw ValidationError("container: unknown dtype " + std::to_string(dtype) + " for entry '" + name + "'");
        }
    }
    return c;
}

}  // namespace mmvq::io
