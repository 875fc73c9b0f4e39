#include "segcaps/io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "segcaps/archive.hpp"

namespace segcaps::io {

namespace fs = std::filesystem;

std::vector<std::uint8_t> encode_pgm(const Pgm& img) {
  if (img.maxval == 0 || img.maxval > 65535) throw Error("pgm: maxval must be in [1, 65535]");
  if (img.pixels.size() != img.width * img.height) throw Error("pgm: pixel count does not match dimensions");
  const std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n" +
                             std::to_string(img.maxval) + "\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  const bool wide = img.maxval > 255;
  for (auto p : img.pixels) {
    if (p > img.maxval) throw Error("pgm: pixel exceeds maxval");
    if (wide) out.push_back(static_cast<std::uint8_t>(p >> 8));
    out.push_back(static_cast<std::uint8_t>(p & 0xFF));
  }
  return out;
}

namespace {

bool is_space(std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

struct HeaderReader {
  std::span<const std::uint8_t> b;
  std::size_t pos = 0;

  void skip_space_and_comments() {
    while (pos < b.size()) {
      if (is_space(b[pos])) {
        ++pos;
      } else if (b[pos] == '#') {
        while (pos < b.size() && b[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
  }

  std::uint64_t number(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos;
    std::uint64_t v = 0;
    while (pos < b.size() && b[pos] >= '0' && b[pos] <= '9') {
      v = v * 10 + (b[pos] - '0');
      if (v > 0xFFFFFFFFULL) throw ParseError(std::string("pgm: ") + what + " too large", start);
      ++pos;
    }
    if (pos == start) throw ParseError(std::string("pgm: expected ") + what, start);
    return v;
  }
};

}  // namespace

Pgm decode_pgm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw ParseError("pgm: bad magic (expected P5)", 0);
  HeaderReader r{bytes, 2};
  Pgm img;
  img.width = r.number("width");
  img.height = r.number("height");
  r.skip_space_and_comments();
  const std::size_t maxval_at = r.pos;
  const auto maxval = r.number("maxval");
  if (maxval == 0 || maxval > 65535) throw ParseError("pgm: maxval out of range", maxval_at);
  img.maxval = static_cast<std::uint32_t>(maxval);
  if (r.pos >= bytes.size() || !is_space(bytes[r.pos])) throw ParseError("pgm: expected whitespace after maxval", r.pos);
  ++r.pos;
  const std::size_t bpp = img.maxval > 255 ? 2 : 1;
  const std::size_t n = img.width * img.height;
  if (bytes.size() - r.pos < n * bpp) throw ParseError("pgm: truncated pixel data", bytes.size());
  if (bytes.size() - r.pos > n * bpp) throw ParseError("pgm: trailing bytes", r.pos + n * bpp);
  img.pixels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t at = r.pos + i * bpp;
    const std::uint16_t v = bpp == 2 ? static_cast<std::uint16_t>((bytes[at] << 8) | bytes[at + 1]) : bytes[at];
    if (v > img.maxval) throw ParseError("pgm: pixel exceeds maxval", at);
    img.pixels[i] = v;
  }
  return img;
}

namespace {

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write failed for '" + path.string() + "'");
}

}  // namespace

void write_pgm(const fs::path& path, const Pgm& img) { write_bytes(path, encode_pgm(img)); }

Pgm read_pgm(const fs::path& path) {
  const auto bytes = read_bytes(path);
  return decode_pgm(bytes);
}

Pgm image_to_pgm(const Tensor& image, std::uint32_t maxval) {
  if (image.rank() != 2) throw ShapeError("image_to_pgm", image.shape(), Shape{0, 0}, "expected [H, W]");
  Pgm p;
  p.height = image.dim(0);
  p.width = image.dim(1);
  p.maxval = maxval;
  p.pixels.resize(image.numel());
  for (std::size_t i = 0; i < image.numel(); ++i) {
    const double v = std::clamp(image[i], 0.0, 1.0);
    p.pixels[i] = static_cast<std::uint16_t>(std::lround(v * maxval));
  }
  return p;
}

Tensor pgm_to_image(const Pgm& pgm) {
  std::vector<double> v(pgm.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(pgm.pixels[i]) / pgm.maxval;
  return Tensor(Shape{pgm.height, pgm.width}, std::move(v));
}

Pgm mask_to_pgm(const Tensor& mask) {
  Pgm p;
  p.height = mask.dim(0);
  p.width = mask.dim(1);
  p.maxval = 255;
  p.pixels.resize(mask.numel());
  for (std::size_t i = 0; i < mask.numel(); ++i) p.pixels[i] = mask[i] != 0.0 ? 255 : 0;
  return p;
}

Tensor pgm_to_mask(const Pgm& pgm) {
  std::vector<double> v(pgm.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = pgm.pixels[i] * 2 > pgm.maxval ? 1.0 : 0.0;
  return Tensor(Shape{pgm.height, pgm.width}, std::move(v));
}

void write_caps_image(const fs::path& path, const Tensor& image) {
  TensorArchive a;
  a.add("image", image);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  a.save(path);
}

Tensor read_caps_image(const fs::path& path) { return TensorArchive::load(path).get("image"); }

std::string format_manifest(const std::vector<ManifestRow>& rows) {
  std::ostringstream os;
  os << "id\timage\tmask\tsplit\n";
  for (const auto& r : rows) os << r.id << '\t' << r.image << '\t' << r.mask << '\t' << r.split << '\n';
  return os.str();
}

std::vector<ManifestRow> parse_manifest(std::string_view text) {
  std::vector<ManifestRow> rows;
  std::size_t pos = 0, line_no = 0;
  while (pos < text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    const std::size_t line_start = pos;
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::size_t c = 0;
    while (true) {
      const std::size_t t = line.find('\t', c);
      cells.emplace_back(line.substr(c, t == std::string_view::npos ? std::string_view::npos : t - c));
      if (t == std::string_view::npos) break;
      c = t + 1;
    }
    if (cells.size() != 4) throw ParseError("manifest: line " + std::to_string(line_no) + " needs 4 tab-separated fields", line_start);
    if (line_no == 1) {
      if (cells[0] != "id" || cells[1] != "image" || cells[2] != "mask" || cells[3] != "split") {
        throw ParseError("manifest: bad header", 0);
      }
      continue;
    }
    if (cells[3] != "train" && cells[3] != "val" && cells[3] != "test") {
      throw ParseError("manifest: unknown split '" + cells[3] + "'", line_start);
    }
    rows.push_back({cells[0], cells[1], cells[2], cells[3]});
  }
  return rows;
}

void save_dataset(const data::Dataset& d, const fs::path& dir) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  std::vector<ManifestRow> rows;
  auto emit = [&](const std::vector<data::Sample>& split, const char* name) {
    for (const auto& s : split) {
      const std::string img = "images/" + s.id + ".pgm", msk = "masks/" + s.id + ".pgm";
      write_pgm(dir / img, image_to_pgm(s.image));
      write_pgm(dir / msk, mask_to_pgm(s.mask));
      rows.push_back({s.id, img, msk, name});
    }
  };
  emit(d.train, "train");
  emit(d.val, "val");
  emit(d.test, "test");
  write_text(dir / "manifest.tsv", format_manifest(rows));
}

data::Dataset load_dataset(const fs::path& manifest) {
  const auto rows = parse_manifest(read_text(manifest));
  const fs::path base = manifest.parent_path();
  data::Dataset d;
  for (const auto& r : rows) {
    data::Sample s;
    s.id = r.id;
    s.image = pgm_to_image(read_pgm(base / r.image));
    s.mask = pgm_to_mask(read_pgm(base / r.mask));
    if (s.image.shape() != s.mask.shape()) throw ShapeError("load_dataset " + r.id, s.image.shape(), s.mask.shape());
    (r.split == "train" ? d.train : r.split == "val" ? d.val : d.test).push_back(std::move(s));
  }
  return d;
}

std::string read_text(const fs::path& path) {
  const auto b = read_bytes(path);
  return std::string(b.begin(), b.end());
}

void write_text(const fs::path& path, std::string_view text) {
  write_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace segcaps::io
