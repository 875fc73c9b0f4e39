#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "segcaps/tensor.hpp"

namespace segcaps {

// Named-tensor archive. Layout (all integers little-endian):
//
//   "CAPS" | version u32 | entry count u32
//   per entry: name length u16 | UTF-8 name | dtype u8 (1 = f32, 2 = f64)
//              | rank u8 | dims u32 x rank | raw little-endian payload
//
// Entries keep insertion order; names are unique.
enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

inline constexpr std::uint32_t kArchiveVersion = 1;

struct ArchiveEntry {
  std::string name;
  DType dtype = DType::f64;
  Shape shape;
  std::vector<double> values;
};

class TensorArchive {
 public:
  void add(std::string name, const Tensor& t, DType dtype = DType::f64);
  void add(std::string name, Shape shape, std::vector<double> values, DType dtype = DType::f64);

  bool contains(std::string_view name) const;
  // Throws Error if the entry is missing.
  Tensor get(std::string_view name) const;
  const ArchiveEntry& entry(std::string_view name) const;
  const std::vector<ArchiveEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::vector<std::uint8_t> serialize() const;
  static TensorArchive parse(std::span<const std::uint8_t> bytes);

  void save(const std::filesystem::path& path) const;
  static TensorArchive load(const std::filesystem::path& path);

 private:
  std::vector<ArchiveEntry> entries_;
};

}  // namespace segcaps
