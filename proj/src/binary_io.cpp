#include "apa/binary_io.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "apa/errors.hpp"

namespace apa::io {

void ByteReader::need(std::size_t n) const {
  if (n > bytes_.size() - pos_)
    throw IoError(what_ + ": truncated (needed " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) +
                  ", " + std::to_string(bytes_.size() - pos_) + " left)");
}

std::uint64_t ByteReader::get(int n) {
  need(static_cast<std::size_t>(n));
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
  pos_ += static_cast<std::size_t>(n);
  return v;
}

std::string ByteReader::str(std::size_t n) {
  need(n);
  std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
  pos_ += n;
  return s;
}

std::span<const std::uint8_t> ByteReader::span(std::size_t n) {
  need(n);
  auto s = bytes_.subspan(pos_, n);
  pos_ += n;
  return s;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

void write_container_prefix(ByteWriter& w, std::string_view magic, std::uint32_t version, std::string_view header) {
  w.raw(magic);
  w.u32(version);
  w.u32(static_cast<std::uint32_t>(header.size()));
  w.raw(header);
}

Container read_container_prefix(ByteReader& r, std::string_view magic, std::uint32_t expected_version,
                                const std::string& what) {
  if (r.remaining() < magic.size() || r.str(magic.size()) != magic)
    throw FormatError(what + ": bad magic bytes (not a " + std::string(magic.substr(0, 7)) + " file)");
  Container c;
  c.version = r.u32();
  if (c.version != expected_version)
    throw FormatError(what + ": format version " + std::to_string(c.version) + ", expected " +
                      std::to_string(expected_version));
  const auto len = r.u32();
  c.header = r.str(len);
  c.payload_offset = r.offset();
  return c;
}

}  // namespace apa::io
