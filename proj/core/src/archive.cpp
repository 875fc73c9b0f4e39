#include "segcaps/archive.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

namespace segcaps {

namespace {

constexpr char kMagic[4] = {'C', 'A', 'P', 'S'};

template <class T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  using U = std::make_unsigned_t<T>;
  U u = static_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>((u >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <class T>
  T get_le(const char* what) {
    need(sizeof(T), what);
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      u |= static_cast<std::make_unsigned_t<T>>(bytes_[pos_ + i]) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw ParseError(std::string("CAPS archive truncated while reading ") + what, pos_);
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void TensorArchive::add(std::string name, const Tensor& t, DType dtype) {
  add(std::move(name), t.shape(), std::vector<double>(t.data().begin(), t.data().end()), dtype);
}

void TensorArchive::add(std::string name, Shape shape, std::vector<double> values, DType dtype) {
  if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw Error("archive: entry name too long");
  if (shape.size() > std::numeric_limits<std::uint8_t>::max()) throw Error("archive: rank too large");
  if (shape_numel(shape) != values.size()) throw ShapeError("archive", shape, Shape{values.size()});
  for (auto d : shape) {
    if (d > std::numeric_limits<std::uint32_t>::max()) throw Error("archive: dimension exceeds u32");
  }
  if (contains(name)) throw Error("archive: duplicate entry '" + name + "'");
  if (dtype == DType::f32) {
    for (auto& v : values) v = static_cast<double>(static_cast<float>(v));
  }
  entries_.push_back({std::move(name), dtype, std::move(shape), std::move(values)});
}

bool TensorArchive::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.name == name; });
}

const ArchiveEntry& TensorArchive::entry(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e;
  }
  throw Error("archive: no entry named '" + std::string(name) + "'");
}

Tensor TensorArchive::get(std::string_view name) const {
  const auto& e = entry(name);
  return Tensor(e.shape, e.values);
}

std::vector<std::uint8_t> TensorArchive::serialize() const {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_le<std::uint32_t>(out, kArchiveVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& e : entries_) {
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.push_back(static_cast<std::uint8_t>(e.dtype));
    out.push_back(static_cast<std::uint8_t>(e.shape.size()));
    for (auto d : e.shape) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double v : e.values) {
      if (e.dtype == DType::f32) {
        put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      } else {
        put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
      }
    }
  }
  return out;
}

TensorArchive TensorArchive::parse(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), std::begin(kMagic))) throw ParseError("CAPS archive: bad magic", 0);
  const std::size_t version_at = r.pos();
  const auto version = r.get_le<std::uint32_t>("version");
  if (version != kArchiveVersion) throw ParseError("CAPS archive: unsupported version " + std::to_string(version), version_at);
  const auto count = r.get_le<std::uint32_t>("entry count");
  TensorArchive archive;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto name_len = r.get_le<std::uint16_t>("name length");
    const auto name_bytes = r.take(name_len, "name");
    std::string name(name_bytes.begin(), name_bytes.end());
    const std::size_t dtype_at = r.pos();
    const auto dtype_code = r.get_le<std::uint8_t>("dtype");
    if (dtype_code != 1 && dtype_code != 2) throw ParseError("CAPS archive: unknown dtype code " + std::to_string(dtype_code), dtype_at);
    const auto rank = r.get_le<std::uint8_t>("rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.get_le<std::uint32_t>("dims");
    const std::size_t n = shape_numel(shape);
    std::vector<double> values(n);
    const DType dtype = static_cast<DType>(dtype_code);
    for (auto& v : values) {
      if (dtype == DType::f32) {
        v = std::bit_cast<float>(r.get_le<std::uint32_t>("payload"));
      } else {
        v = std::bit_cast<double>(r.get_le<std::uint64_t>("payload"));
      }
    }
    const std::size_t entry_end = r.pos();
    if (archive.contains(name)) throw ParseError("CAPS archive: duplicate entry '" + name + "'", entry_end);
    archive.entries_.push_back({std::move(name), dtype, std::move(shape), std::move(values)});
  }
  if (!r.done()) throw ParseError("CAPS archive: trailing bytes", r.pos());
  return archive;
}

void TensorArchive::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("archive: cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("archive: write failed for '" + path.string() + "'");
}

TensorArchive TensorArchive::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("archive: cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse(bytes);
}

}  // namespace segcaps
