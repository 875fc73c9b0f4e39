#include <gtest/gtest.h>

#include <filesystem>
#include <string>

#include "segcaps/io.hpp"
#include "support.hpp"

namespace segcaps {
namespace {

namespace fs = std::filesystem;

std::vector<std::uint8_t> bytes(const std::string& s) { return {s.begin(), s.end()}; }

std::size_t parse_offset(const std::vector<std::uint8_t>& b) {
  try {
    io::decode_pgm(b);
  } catch (const ParseError& e) {
    return e.offset();
  }
  ADD_FAILURE() << "no ParseError";
  return static_cast<std::size_t>(-1);
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("segcaps_test_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TEST(Pgm, EightBitEncodingIsByteExact) {
  io::Pgm p{3, 2, 255, {0, 1, 2, 253, 254, 255}};
  const auto b = io::encode_pgm(p);
  const std::string header = "P5\n3 2\n255\n";
  ASSERT_EQ(b.size(), header.size() + 6);
  EXPECT_EQ(std::string(b.begin(), b.begin() + static_cast<long>(header.size())), header);
  EXPECT_EQ(b.back(), 255);
  const auto back = io::decode_pgm(b);
  EXPECT_EQ(back.width, 3u);
  EXPECT_EQ(back.height, 2u);
  EXPECT_EQ(back.pixels, p.pixels);
}

TEST(Pgm, SixteenBitIsBigEndian) {
  io::Pgm p{2, 1, 65535, {0x1234, 0xFFFF}};
  const auto b = io::encode_pgm(p);
  const std::size_t h = std::string("P5\n2 1\n65535\n").size();
  ASSERT_EQ(b.size(), h + 4);
  EXPECT_EQ(b[h], 0x12);
  EXPECT_EQ(b[h + 1], 0x34);
  EXPECT_EQ(io::decode_pgm(b).pixels, p.pixels);
}

TEST(Pgm, RandomRoundTrips) {
  CounterRng rng(1, 1);
  for (int k = 0; k < 30; ++k) {
    io::Pgm p;
    p.width = 1 + rng.below(9);
    p.height = 1 + rng.below(9);
    p.maxval = static_cast<std::uint32_t>(1 + rng.below(65535));
    for (std::size_t i = 0; i < p.width * p.height; ++i) p.pixels.push_back(static_cast<std::uint16_t>(rng.below(p.maxval + 1)));
    const auto q = io::decode_pgm(io::encode_pgm(p));
    EXPECT_EQ(q.maxval, p.maxval);
    EXPECT_EQ(q.pixels, p.pixels);
  }
}

TEST(Pgm, HeaderCommentsAndWhitespace) {
  const auto p = io::decode_pgm(bytes("P5 # comment\n# more\n 2\t1 \n# x\n7\n\x03\x07"));
  EXPECT_EQ(p.width, 2u);
  EXPECT_EQ(p.maxval, 7u);
  EXPECT_EQ(p.pixels, (std::vector<std::uint16_t>{3, 7}));
}

TEST(Pgm, ParseErrorsCarryByteOffsets) {
  EXPECT_EQ(parse_offset(bytes("P2\n1 1\n255\n\x01")), 0u);
  EXPECT_EQ(parse_offset(bytes("P5\nx 1\n255\n\x01")), 3u);      // width
  EXPECT_EQ(parse_offset(bytes("P5\n1 1\n70000\n\x01")), 7u);    // maxval out of range
  EXPECT_EQ(parse_offset(bytes("P5\n2 1\n255\n\x01")), 12u);     // truncated: end of input
  EXPECT_EQ(parse_offset(bytes("P5\n1 1\n255\n\x01\x02")), 12u); // trailing byte
  EXPECT_EQ(parse_offset(bytes("P5\n1 1\n9\n\x0A")), 9u);        // pixel above maxval
  EXPECT_EQ(parse_offset(bytes("P5\n1 1\n")), 7u);               // missing maxval
}

TEST(Pgm, TensorConversions) {
  const Tensor img({1, 3}, {0.0, 0.5, 1.0});
  const auto p = io::image_to_pgm(img, 255);
  EXPECT_EQ(p.pixels, (std::vector<std::uint16_t>{0, 128, 255}));
  const Tensor back = io::pgm_to_image(io::image_to_pgm(img));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(back[i], img[i], 0.5 / 65535);
  const Tensor mask({1, 3}, {0.0, 1.0, 1.0});
  const auto mp = io::mask_to_pgm(mask);
  EXPECT_EQ(mp.pixels, (std::vector<std::uint16_t>{0, 255, 255}));
  const Tensor mb = io::pgm_to_mask(mp);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(mb[i], mask[i]);
}

TEST(CapsImage, FullPrecisionRoundTrip) {
  const auto dir = temp_dir("caps");
  CounterRng rng(2, 2);
  const Tensor img = testing::random_tensor({7, 5}, rng, 0, 1);
  io::write_caps_image(dir / "x.caps", img);
  const Tensor back = io::read_caps_image(dir / "x.caps");
  ASSERT_EQ(back.shape(), img.shape());
  for (std::size_t i = 0; i < img.numel(); ++i) EXPECT_EQ(back[i], img[i]);
}

TEST(Manifest, FormatAndParse) {
  const std::vector<io::ManifestRow> rows{{"a", "images/a.pgm", "masks/a.pgm", "train"},
                                          {"b", "images/b.pgm", "masks/b.pgm", "test"}};
  const auto text = io::format_manifest(rows);
  EXPECT_EQ(text.substr(0, text.find('\n')), "id\timage\tmask\tsplit");
  const auto back = io::parse_manifest(text);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].id, "b");
  EXPECT_EQ(back[1].split, "test");
  EXPECT_THROW(io::parse_manifest("id\timage\tmask\n"), ParseError);
  EXPECT_THROW(io::parse_manifest("id\timage\tmask\tsplit\na\tx\ty\tholdout\n"), ParseError);
}

TEST(Dataset, SaveLoadRoundTrip) {
  const auto dir = temp_dir("dataset");
  data::SynthConfig c;
  c.height = c.width = 32;
  const auto d = data::generate(c, 10);
  io::save_dataset(d, dir);
  const auto back = io::load_dataset(dir / "manifest.tsv");
  ASSERT_EQ(back.train.size(), d.train.size());
  ASSERT_EQ(back.val.size(), d.val.size());
  ASSERT_EQ(back.test.size(), d.test.size());
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    EXPECT_EQ(back.train[i].id, d.train[i].id);
    for (std::size_t p = 0; p < d.train[i].image.numel(); ++p) {
      EXPECT_NEAR(back.train[i].image[p], d.train[i].image[p], 0.5 / 65535);
      EXPECT_EQ(back.train[i].mask[p], d.train[i].mask[p]);
    }
  }
  EXPECT_THROW(io::load_dataset(dir / "missing.tsv"), Error);
}

}  // namespace
}  // namespace segcaps
