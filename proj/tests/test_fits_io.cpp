#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <fstream>

#include "celeste/fits_io.hpp"
#include "celeste/rng.hpp"

using namespace celeste;

namespace {

std::vector<std::byte> to_bytes(const std::string& s) {
  std::vector<std::byte> out(s.size());
  std::memcpy(out.data(), s.data(), s.size());
  return out;
}

std::string pad_header(std::string cards) {
  cards += "END";
  cards.append(kFitsCardSize - 3, ' ');
  if (cards.size() % kFitsBlockSize != 0) {
    cards.append(kFitsBlockSize - cards.size() % kFitsBlockSize, ' ');
  }
  return cards;
}

ImageMetadata small_meta(int w, int h) {
  ImageMetadata m;
  m.band = 3;
  m.width = w;
  m.height = h;
  m.sky_background = 123.5;
  m.psf = PsfModel{{{0.7, 1.25}, {0.3, 2.75}}};
  m.wcs = make_wcs(0.396, {15.125, -0.75}, w, h);
  m.id = 42;
  return m;
}

std::vector<std::byte> read_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::vector<char> data((std::istreambuf_iterator<char>(in)),
                         std::istreambuf_iterator<char>());
  std::vector<std::byte> out(data.size());
  std::memcpy(out.data(), data.data(), data.size());
  return out;
}

}  // namespace

TEST_CASE("fixed-format cards parse per the standard") {
  {
    const auto [cards, off] = parse_header(
        to_bytes(pad_header(format_card(HeaderCard{"SIMPLE", true, ""}))));
    REQUIRE(cards.size() == 1);
    CHECK(cards[0].keyword == "SIMPLE");
    CHECK(std::get<bool>(cards[0].value) == true);
    CHECK(off == kFitsBlockSize);
  }
  {
    // exact byte layout: logical T in byte 30
    std::string card = format_card(HeaderCard{"SIMPLE", true, ""});
    CHECK(card.substr(0, 30) == "SIMPLE  =                    T");
  }
  {
    std::string card =
        format_card(HeaderCard{"NAXIS1", std::int64_t{2048}, ""});
    CHECK(card.substr(0, 30) == "NAXIS1  =                 2048");
    const auto [cards, off] = parse_header(to_bytes(pad_header(card)));
    CHECK(std::get<std::int64_t>(cards[0].value) == 2048);
  }
}

TEST_CASE("string and real cards round trip through text") {
  std::vector<HeaderCard> cards = {
      string_card("OBJECT", "M 31", "target"),
      real_card("SKYBKG", 123.0625, "sky"),
      real_card("CD1_1", -1.2345678901234e-05, ""),
      int_card("BANDIDX", 4, ""),
  };
  std::string text;
  for (const auto& c : cards) text += format_card(c);
  const auto [parsed, off] = parse_header(to_bytes(pad_header(text)));
  REQUIRE(parsed.size() == cards.size());
  for (std::size_t i = 0; i < cards.size(); ++i) {
    CHECK(parsed[i] == cards[i]);
  }
}

TEST_CASE("malformed headers are rejected") {
  // not block-aligned
  CHECK_THROWS_AS(parse_header(to_bytes(std::string(100, ' '))), FitsError);
  // missing END
  std::string no_end(kFitsBlockSize, ' ');
  CHECK_THROWS_AS(parse_header(to_bytes(no_end)), FitsError);
  // non-ASCII byte
  std::string bad = pad_header(format_card(HeaderCard{"SIMPLE", true, ""}));
  bad[40] = static_cast<char>(0xff);
  try {
    parse_header(to_bytes(bad));
    FAIL("expected FitsError");
  } catch (const FitsError& e) {
    CHECK(e.kind() == FitsError::Kind::kMalformedHeader);
  }
}

TEST_CASE("write/read round trip is bit-exact on the payload") {
  Rng rng(9);
  const auto meta = small_meta(13, 7);
  std::vector<float> data(13 * 7);
  for (auto& v : data) v = static_cast<float>(rng.normal(100.0, 40.0));
  const auto bytes = write_image(meta, data);
  CHECK(bytes.size() % kFitsBlockSize == 0);

  const FitsReadResult r = read_image(bytes);
  CHECK(r.fits.width == 13);
  CHECK(r.fits.height == 7);
  REQUIRE(r.fits.data.size() == data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(std::memcmp(&r.fits.data[i], &data[i], 4) == 0);
  }
  // metadata cards decode back
  CHECK(r.meta.band == meta.band);
  CHECK(r.meta.id == meta.id);
  CHECK(r.meta.sky_background == doctest::Approx(meta.sky_background));
  REQUIRE(r.meta.psf.components.size() == 2);
  CHECK(r.meta.psf.components[1].sigma == doctest::Approx(2.75));
  CHECK((r.meta.wcs.pix_per_deg - meta.wcs.pix_per_deg).cwiseAbs().maxCoeff() <
        1e-9);
  CHECK((r.meta.wcs.world_ref - meta.wcs.world_ref).norm() < 1e-12);
}

TEST_CASE("header cards of a written file survive reserialization") {
  const auto meta = small_meta(4, 3);
  std::vector<float> data(12, 1.5f);
  const auto bytes = write_image(meta, data);
  const auto [cards1, off1] = parse_header(bytes);
  std::string text;
  for (const auto& c : cards1) text += format_card(c);
  const auto [cards2, off2] = parse_header(to_bytes(pad_header(text)));
  CHECK(cards1 == cards2);
}

TEST_CASE("1x1 image occupies exactly one header and one data block") {
  ImageMetadata meta = small_meta(1, 1);
  const std::vector<float> data = {3.0f};
  CHECK(write_image(meta, data).size() == 5760);
}

TEST_CASE("2x2 zero image: padded data block after 16 payload bytes") {
  ImageMetadata meta = small_meta(2, 2);
  const std::vector<float> data(4, 0.0f);
  const auto bytes = write_image(meta, data);
  REQUIRE(bytes.size() == 2 * kFitsBlockSize);
  for (std::size_t i = kFitsBlockSize; i < bytes.size(); ++i) {
    CHECK(bytes[i] == std::byte{0});
  }
}

TEST_CASE("survey-sized image has the documented payload size") {
  const int w = 1361, h = 2048;
  ImageMetadata meta = small_meta(w, h);
  std::vector<float> data(static_cast<std::size_t>(w) * h, 7.0f);
  CHECK(static_cast<std::size_t>(w) * h * 4 == 11149312);
  const auto bytes = write_image(meta, data);
  const std::size_t padded_payload =
      (11149312 + kFitsBlockSize - 1) / kFitsBlockSize * kFitsBlockSize;
  CHECK(bytes.size() == kFitsBlockSize + padded_payload);
  const FitsReadResult r = read_image(bytes);
  CHECK(r.fits.data.size() == static_cast<std::size_t>(w) * h);
}

TEST_CASE("BITPIX 16 with BZERO reconstructs unsigned counts") {
  const int w = 5, h = 3;
  std::string header;
  header += format_card(HeaderCard{"SIMPLE", true, ""});
  header += format_card(HeaderCard{"BITPIX", std::int64_t{16}, ""});
  header += format_card(HeaderCard{"NAXIS", std::int64_t{2}, ""});
  header += format_card(HeaderCard{"NAXIS1", std::int64_t{w}, ""});
  header += format_card(HeaderCard{"NAXIS2", std::int64_t{h}, ""});
  header += format_card(HeaderCard{"BZERO", 32768.0, ""});
  header += format_card(HeaderCard{"BSCALE", 1.0, ""});
  std::string blob = pad_header(header);

  // unsigned 16-bit counts, stored as offset signed big-endian
  std::vector<std::uint16_t> counts = {0,     1,     77,    32767, 32768,
                                       40000, 65535, 12345, 54321, 2,
                                       60000, 33000, 5,     32769, 400};
  std::string data;
  for (std::uint16_t u : counts) {
    const std::int32_t raw = static_cast<std::int32_t>(u) - 32768;
    const auto r16 = static_cast<std::int16_t>(raw);
    data += static_cast<char>((static_cast<std::uint16_t>(r16) >> 8) & 0xff);
    data += static_cast<char>(static_cast<std::uint16_t>(r16) & 0xff);
  }
  data.append(kFitsBlockSize - data.size(), '\0');
  blob += data;

  const FitsReadResult r = read_image(to_bytes(blob));
  REQUIRE(r.fits.data.size() == counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    // reference decode: value = BZERO + signed raw
    CHECK(r.fits.data[i] == doctest::Approx(double(counts[i])));
  }
}

TEST_CASE("unsupported encodings and truncated payloads are typed errors") {
  std::string header;
  header += format_card(HeaderCard{"SIMPLE", true, ""});
  header += format_card(HeaderCard{"BITPIX", std::int64_t{8}, ""});
  header += format_card(HeaderCard{"NAXIS", std::int64_t{2}, ""});
  header += format_card(HeaderCard{"NAXIS1", std::int64_t{2}, ""});
  header += format_card(HeaderCard{"NAXIS2", std::int64_t{2}, ""});
  try {
    read_image(to_bytes(pad_header(header)));
    FAIL("expected FitsError");
  } catch (const FitsError& e) {
    CHECK(e.kind() == FitsError::Kind::kUnsupportedEncoding);
  }

  // valid header but no data blocks at all
  std::string h2;
  h2 += format_card(HeaderCard{"SIMPLE", true, ""});
  h2 += format_card(HeaderCard{"BITPIX", std::int64_t{-32}, ""});
  h2 += format_card(HeaderCard{"NAXIS", std::int64_t{2}, ""});
  h2 += format_card(HeaderCard{"NAXIS1", std::int64_t{100}, ""});
  h2 += format_card(HeaderCard{"NAXIS2", std::int64_t{100}, ""});
  try {
    read_image(to_bytes(pad_header(h2)));
    FAIL("expected FitsError");
  } catch (const FitsError& e) {
    CHECK(e.kind() == FitsError::Kind::kTruncatedFile);
  }
}

TEST_CASE("count-image convenience round trip") {
  ImageMetadata meta = small_meta(6, 4);
  Image img;
  img.meta = meta;
  Rng rng(3);
  img.pixels.resize(24);
  for (auto& p : img.pixels) {
    p = static_cast<std::int32_t>(rng.poisson(500.0));
  }
  const Image back = to_count_image(read_image(write_image(img)));
  CHECK(back.pixels == img.pixels);
  CHECK(back.meta.band == img.meta.band);
}

// golden files pin the on-disk format bit-for-bit
TEST_CASE("golden file: writer output matches the committed bytes") {
  ImageMetadata meta = small_meta(4, 3);
  std::vector<float> data(12);
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = static_cast<float>(i) * 0.25f - 1.0f;
  }
  const auto bytes = write_image(meta, data);
  const auto golden = read_binary(std::string(GOLDEN_DIR) + "/ramp_4x3.fits");
  REQUIRE(bytes.size() == golden.size());
  CHECK(std::memcmp(bytes.data(), golden.data(), bytes.size()) == 0);
}

TEST_CASE("golden file: reader decodes the committed bytes") {
  const auto golden = read_binary(std::string(GOLDEN_DIR) + "/ramp_4x3.fits");
  const FitsReadResult r = read_image(golden);
  CHECK(r.meta.id == 42);
  CHECK(r.meta.band == 3);
  CHECK(r.fits.width == 4);
  CHECK(r.fits.height == 3);
  CHECK(r.fits.data[0] == doctest::Approx(-1.0f));
  CHECK(r.fits.data[11] == doctest::Approx(1.75f));
}
