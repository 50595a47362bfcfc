#pragma once

// Little-endian binary record helpers shared by the checkpoint and artifacts files.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace sdmlm::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::filesystem::path& path) : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot open for writing: " + path.string());
  }

  void magic(std::string_view m) { out_.write(m.data(), static_cast<std::streamsize>(m.size())); }

  template <typename P>
    requires std::is_trivially_copyable_v<P>
  void pod(const P& v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(P));
  }

  template <typename P>
    requires std::is_trivially_copyable_v<P>
  void array(std::span<const P> v) {
    pod<std::uint64_t>(v.size());
    out_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size_bytes()));
  }

  void string(std::string_view s) { array(std::span<const char>(s.data(), s.size())); }

  void finish() {
    out_.flush();
    if (!out_) throw std::runtime_error("write failed");
  }

 private:
  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::filesystem::path& path) : in_(path, std::ios::binary) {
    if (!in_) throw std::runtime_error("cannot open for reading: " + path.string());
  }

  void expect_magic(std::string_view m) {
    std::string buf(m.size(), '\0');
    in_.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!in_ || buf != m) throw FormatError("bad magic, expected " + std::string(m));
  }

  template <typename P>
    requires std::is_trivially_copyable_v<P>
  P pod() {
    P v;
    in_.read(reinterpret_cast<char*>(&v), sizeof(P));
    if (!in_) throw FormatError("truncated file");
    return v;
  }

  template <typename P>
    requires std::is_trivially_copyable_v<P>
  std::vector<P> array(std::uint64_t max_len = (1ull << 32)) {
    const auto n = pod<std::uint64_t>();
    if (n > max_len) throw FormatError("array length out of range");
    std::vector<P> v(n);
    in_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(P)));
    if (!in_) throw FormatError("truncated file");
    return v;
  }

  std::string string(std::uint64_t max_len = (1ull << 20)) {
    const auto v = array<char>(max_len);
    return std::string(v.begin(), v.end());
  }

  void expect_end() {
    if (in_.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes");
  }

 private:
  std::ifstream in_;
};

}  // namespace sdmlm::io
