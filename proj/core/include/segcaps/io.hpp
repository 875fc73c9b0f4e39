#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "segcaps/data.hpp"
#include "segcaps/tensor.hpp"

namespace segcaps::io {

// Binary PGM (P5). maxval < 256 stores one byte per pixel, otherwise two
// bytes big-endian, as the format requires.
struct Pgm {
  std::size_t width = 0, height = 0;
  std::uint32_t maxval = 255;
  std::vector<std::uint16_t> pixels;
};

std::vector<std::uint8_t> encode_pgm(const Pgm& img);
// Throws ParseError with the byte offset of the first malformed field.
Pgm decode_pgm(std::span<const std::uint8_t> bytes);

void write_pgm(const std::filesystem::path& path, const Pgm& img);
Pgm read_pgm(const std::filesystem::path& path);

// [H, W] tensor in [0, 1] <-> PGM with the given maxval (rounded, clamped).
Pgm image_to_pgm(const Tensor& image, std::uint32_t maxval = 65535);
Tensor pgm_to_image(const Pgm& pgm);
// Binary masks are stored as 0 / 255.
Pgm mask_to_pgm(const Tensor& mask);
Tensor pgm_to_mask(const Pgm& pgm);

// Float images in a CAPS archive under the entry name "image".
void write_caps_image(const std::filesystem::path& path, const Tensor& image);
Tensor read_caps_image(const std::filesystem::path& path);

struct ManifestRow {
  std::string id;
  std::string image;  // relative to the manifest's directory
  std::string mask;
  std::string split;  // train | val | test
};

// Tab-separated with header "id\timage\tmask\tsplit".
std::string format_manifest(const std::vector<ManifestRow>& rows);
std::vector<ManifestRow> parse_manifest(std::string_view text);

// Writes images/<id>.pgm (16-bit), masks/<id>.pgm and manifest.tsv.
void save_dataset(const data::Dataset& d, const std::filesystem::path& dir);
data::Dataset load_dataset(const std::filesystem::path& manifest);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);

}  // namespace segcaps::io
