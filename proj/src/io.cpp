// SPDX-License-Identifier: Apache-2.0

#include "mckd/io.hpp"

#include <zlib.h>

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mckd/error.hpp"

namespace mckd {

namespace {

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

}  // namespace

KvFile KvFile::parse(const std::string& text, const std::string& origin) {
    KvFile kv;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw Error(ErrorKind::Config, origin + ":" + std::to_string(lineno) + ": expected `key = value`");
        }
        std::string key = trim(line.substr(0, eq));
        if (key.empty()) throw Error(ErrorKind::Config, origin + ":" + std::to_string(lineno) + ": empty key");
        kv.entries_[key] = trim(line.substr(eq + 1));
    }
    return kv;
}

KvFile KvFile::read(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::Io, "cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string());
}

std::string KvFile::str() const {
    std::string out;
    for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
    return out;
}

void KvFile::write(const std::filesystem::path& path) const {
    const std::string text = str();
    write_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void KvFile::set(const std::string& key, double value) { entries_[key] = format_double(value); }

const std::string& KvFile::get(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw Error(ErrorKind::Config, "missing key `" + key + "`");
    return it->second;
}

std::string KvFile::get_or(const std::string& key, const std::string& fallback) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? fallback : it->second;
}

double KvFile::get_double(const std::string& key) const {
    const std::string& v = get(key);
    try {
        std::size_t pos = 0;
        double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw Error(ErrorKind::Config, "key `" + key + "`: not a number: " + v);
    }
}

double KvFile::get_double_or(const std::string& key, double fallback) const {
    return has(key) ? get_double(key) : fallback;
}

std::uint64_t KvFile::get_u64(const std::string& key) const {
    const std::string& v = get(key);
    std::uint64_t out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
        throw Error(ErrorKind::Config, "key `" + key + "`: not an unsigned integer: " + v);
    }
    return out;
}

std::uint64_t KvFile::get_u64_or(const std::string& key, std::uint64_t fallback) const {
    return has(key) ? get_u64(key) : fallback;
}

std::vector<std::size_t> KvFile::get_sizes(const std::string& key) const {
    try {
        return parse_sizes(get(key));
    } catch (const Error&) {
        throw Error(ErrorKind::Config, "key `" + key + "`: expected comma-separated sizes: " + get(key));
    }
}

void KvFile::merge(const KvFile& other) {
    for (const auto& [k, v] : other.entries_) entries_[k] = v;
}

std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

std::string format_sizes(std::span<const std::size_t> xs) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i != 0) out += ',';
        out += std::to_string(xs[i]);
    }
    return out;
}

std::vector<std::size_t> parse_sizes(const std::string& text) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        std::size_t v = 0;
        auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
        if (ec != std::errc() || ptr != item.data() + item.size()) {
            throw Error(ErrorKind::Config, "not a size: " + item);
        }
        out.push_back(v);
    }
    return out;
}

std::vector<double> parse_doubles(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        try {
            std::size_t pos = 0;
            out.push_back(std::stod(item, &pos));
            if (pos != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw Error(ErrorKind::Config, "not a number: " + item);
        }
    }
    return out;
}

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks.
    std::size_t off = 0;
    while (off < bytes.size()) {
        const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
        crc = ::crc32(crc, bytes.data() + off, static_cast<uInt>(n));
        off += n;
    }
    return static_cast<std::uint32_t>(crc);
}

std::string crc32_hex(std::uint32_t crc) {
    char buf[9];
    std::snprintf(buf, sizeof buf, "%08x", crc);
    return buf;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::Io, "cannot read " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::Io, "write failed: " + path.string());
}

namespace {

template <typename T, typename U>
std::vector<std::uint8_t> encode_le(std::span<const T> values) {
    std::vector<std::uint8_t> out(values.size() * sizeof(T));
    for (std::size_t i = 0; i < values.size(); ++i) {
        U bits = std::bit_cast<U>(values[i]);
        for (std::size_t b = 0; b < sizeof(T); ++b) out[i * sizeof(T) + b] = static_cast<std::uint8_t>(bits >> (8 * b));
    }
    return out;
}

template <typename T, typename U>
std::vector<T> decode_le(std::span<const std::uint8_t> bytes) {
    if (bytes.size() % sizeof(T) != 0) {
        throw Error(ErrorKind::Format, "payload length " + std::to_string(bytes.size()) +
                                           " is not a multiple of " + std::to_string(sizeof(T)));
    }
    std::vector<T> out(bytes.size() / sizeof(T));
    for (std::size_t i = 0; i < out.size(); ++i) {
        U bits = 0;
        for (std::size_t b = 0; b < sizeof(T); ++b) bits |= static_cast<U>(bytes[i * sizeof(T) + b]) << (8 * b);
        out[i] = std::bit_cast<T>(bits);
    }
    return out;
}

}  // namespace

std::vector<std::uint8_t> encode_f64(std::span<const double> values) {
    return encode_le<double, std::uint64_t>(values);
}
std::vector<double> decode_f64(std::span<const std::uint8_t> bytes) {
    return decode_le<double, std::uint64_t>(bytes);
}
std::vector<std::uint8_t> encode_i32(std::span<const std::int32_t> values) {
    return encode_le<std::int32_t, std::uint32_t>(values);
}
std::vector<std::int32_t> decode_i32(std::span<const std::uint8_t> bytes) {
    return decode_le<std::int32_t, std::uint32_t>(bytes);
}

}  // namespace mckd
