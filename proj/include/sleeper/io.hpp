#pragma once

// Shared file plumbing: the JSON-header binary container used for model
// checkpoints and poison artifacts, content hashing, and small text helpers.

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sleeper {

using json = nlohmann::json;

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// FNV-1a, 64 bit.
class ContentHash {
public:
    void update(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            state_ ^= p[i];
            state_ *= 0x100000001b3ULL;
        }
    }
    void update(std::string_view s) { update(s.data(), s.size()); }
    void update(double v) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        update_u64(bits);
    }
    void update_u64(std::uint64_t v) {
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        update(b, 8);
    }
    std::uint64_t value() const noexcept { return state_; }
    std::string hex() const {
        std::ostringstream os;
        os << std::hex << std::setw(16) << std::setfill('0') << state_;
        return os.str();
    }

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string hash_hex(std::string_view s) {
    ContentHash h;
    h.update(s);
    return h.hex();
}

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw IoError("truncated container");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline constexpr char kMagic[4] = {'S', 'L', 'P', 'R'};

} // namespace detail

/// A JSON header followed by a flat array of little-endian float64 values.
///
/// Layout: "SLPR" | u64 header length | header bytes (UTF-8 JSON) |
/// u64 value count | values.
struct Container {
    json header;
    std::vector<double> values;
};

inline void write_container(const std::filesystem::path& path, const Container& c) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    const std::string header = c.header.dump();
    os.write(detail::kMagic, 4);
    detail::put_u64(os, header.size());
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    detail::put_u64(os, c.values.size());
    for (double v : c.values) detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
    if (!os) throw IoError("write failed: " + path.string());
}

inline Container read_container(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, detail::kMagic, 4) != 0)
        throw IoError("not a container file: " + path.string());
    const auto header_len = detail::get_u64(is);
    std::string header(header_len, '\0');
    if (!is.read(header.data(), static_cast<std::streamsize>(header_len))) throw IoError("truncated header: " + path.string());
    Container c;
    c.header = json::parse(header);
    const auto count = detail::get_u64(is);
    c.values.resize(count);
    for (auto& v : c.values) v = std::bit_cast<double>(detail::get_u64(is));
    return c;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os << text;
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

/// Shortest round-trip decimal text for a double.
inline std::string format_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

} // namespace sleeper
