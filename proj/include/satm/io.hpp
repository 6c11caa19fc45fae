#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace satm::io {

// Little-endian primitives appended to / consumed from byte buffers. File
// formats are built fully in memory and written in one shot, which keeps
// round-trips bit-exact and makes truncation checks trivial.

void put_u64(std::string& out, uint64_t v);
void put_f64(std::string& out, double v);
void put_i32(std::string& out, int32_t v);

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  uint64_t read_u64();
  double read_f64();
  int32_t read_i32();
  std::string_view read_bytes(std::size_t n);
  bool exhausted() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

void write_file(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

uint64_t fnv1a64(std::string_view bytes);
std::string hex64(uint64_t v);
uint64_t hash_file(const std::filesystem::path& path);

}  // namespace satm::io
