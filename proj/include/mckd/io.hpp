// SPDX-License-Identifier: Apache-2.0
//
// Flat key-value text files and little-endian binary payloads.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace mckd {

/// `key = value` lines with dotted keys; `#` starts a comment. Keys are kept
/// sorted so written files are byte-stable.
class KvFile {
  public:
    static KvFile parse(const std::string& text, const std::string& origin = "<text>");
    /// Throws Io if the file cannot be read, Config on a malformed line.
    static KvFile read(const std::filesystem::path& path);

    void write(const std::filesystem::path& path) const;
    std::string str() const;

    bool has(const std::string& key) const { return entries_.count(key) != 0; }
    void set(const std::string& key, const std::string& value) { entries_[key] = value; }
    void set(const std::string& key, double value);
    void set(const std::string& key, std::uint64_t value) { entries_[key] = std::to_string(value); }
    void set(const std::string& key, int value) { entries_[key] = std::to_string(value); }

    /// Throws Config when a key is missing or unparsable.
    const std::string& get(const std::string& key) const;
    std::string get_or(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key) const;
    double get_double_or(const std::string& key, double fallback) const;
    std::uint64_t get_u64(const std::string& key) const;
    std::uint64_t get_u64_or(const std::string& key, std::uint64_t fallback) const;
    std::vector<std::size_t> get_sizes(const std::string& key) const;

    const std::map<std::string, std::string>& entries() const { return entries_; }
    /// Merge `other` over this file.
    void merge(const KvFile& other);

  private:
    std::map<std::string, std::string> entries_;
};

/// Shortest decimal text that round-trips the double.
std::string format_double(double v);
/// Comma-separated list of sizes, e.g. "64,32".
std::string format_sizes(std::span<const std::size_t> xs);
std::vector<std::size_t> parse_sizes(const std::string& text);
std::vector<double> parse_doubles(const std::string& text);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);
std::string crc32_hex(std::uint32_t crc);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode_f64(std::span<const double> values);
std::vector<double> decode_f64(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_i32(std::span<const std::int32_t> values);
std::vector<std::int32_t> decode_i32(std::span<const std::uint8_t> bytes);

}  // namespace mckd
