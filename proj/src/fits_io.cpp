#include "celeste/fits_io.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>

namespace celeste {

namespace {

std::string format_real(double v) {
  // shortest representation that round-trips; falls back to a fixed
  // 13-significant-digit form if it will not fit the 20-char value field
  char buf[40];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  std::string s(buf, ptr);
  if (s.size() > 20) {
    std::snprintf(buf, sizeof(buf), "%.12E", v);
    s = buf;
  }
  for (char& c : s) {
    if (c == 'e') c = 'E';
  }
  // FITS requires a decimal point or exponent to mark a real value
  if (s.find('.') == std::string::npos && s.find('E') == std::string::npos) {
    s += ".0";
  }
  return s;
}

void append_value_comment(std::string& card, const std::string& value,
                          const std::string& comment) {
  card += "= ";
  if (value.size() < 20) card.append(20 - value.size(), ' ');
  card += value;
  if (!comment.empty()) {
    card += " / ";
    card += comment;
  }
}

bool is_commentary(const std::string& kw) {
  return kw == "COMMENT" || kw == "HISTORY" || kw.empty();
}

std::uint32_t load_be32(const std::byte* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
         (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

void store_be32(std::byte* p, std::uint32_t v) {
  p[0] = std::byte(v >> 24);
  p[1] = std::byte((v >> 16) & 0xff);
  p[2] = std::byte((v >> 8) & 0xff);
  p[3] = std::byte(v & 0xff);
}

const HeaderCard* find_card(const std::vector<HeaderCard>& cards,
                            const std::string& kw) {
  for (const auto& c : cards) {
    if (c.keyword == kw) return &c;
  }
  return nullptr;
}

double numeric_value(const HeaderCard& c) {
  if (std::holds_alternative<double>(c.value)) return std::get<double>(c.value);
  if (std::holds_alternative<std::int64_t>(c.value)) {
    return static_cast<double>(std::get<std::int64_t>(c.value));
  }
  throw FitsError(FitsError::Kind::kMalformedHeader,
                  "card " + c.keyword + " is not numeric");
}

std::int64_t int_value(const HeaderCard& c) {
  if (!std::holds_alternative<std::int64_t>(c.value)) {
    throw FitsError(FitsError::Kind::kMalformedHeader,
                    "card " + c.keyword + " is not an integer");
  }
  return std::get<std::int64_t>(c.value);
}

}  // namespace

HeaderCard logical_card(const std::string& kw, bool v,
                        const std::string& comment) {
  return {kw, v, comment};
}

HeaderCard int_card(const std::string& kw, std::int64_t v,
                    const std::string& comment) {
  return {kw, v, comment};
}

HeaderCard real_card(const std::string& kw, double v,
                     const std::string& comment) {
  return {kw, v, comment};
}

HeaderCard string_card(const std::string& kw, const std::string& v,
                       const std::string& comment) {
  return {kw, v, comment};
}

std::string format_card(const HeaderCard& card) {
  if (card.keyword.size() > 8) {
    throw FitsError(FitsError::Kind::kMalformedHeader,
                    "keyword too long: " + card.keyword);
  }
  std::string out = card.keyword;
  out.append(8 - out.size(), ' ');

  if (std::holds_alternative<std::monostate>(card.value)) {
    out += card.comment;
  } else if (std::holds_alternative<bool>(card.value)) {
    append_value_comment(out, std::get<bool>(card.value) ? "T" : "F",
                         card.comment);
  } else if (std::holds_alternative<std::int64_t>(card.value)) {
    append_value_comment(out, std::to_string(std::get<std::int64_t>(card.value)),
                         card.comment);
  } else if (std::holds_alternative<double>(card.value)) {
    append_value_comment(out, format_real(std::get<double>(card.value)),
                         card.comment);
  } else {
    const std::string& s = std::get<std::string>(card.value);
    std::string quoted = "'";
    for (char c : s) {
      quoted += c;
      if (c == '\'') quoted += '\'';  // escaped quote
    }
    if (quoted.size() < 9) quoted.append(9 - quoted.size(), ' ');
    quoted += "'";
    out += "= ";
    out += quoted;
    if (!card.comment.empty()) {
      out += " / ";
      out += card.comment;
    }
  }

  if (out.size() > kFitsCardSize) {
    throw FitsError(FitsError::Kind::kMalformedHeader,
                    "card overflows 80 bytes: " + card.keyword);
  }
  out.append(kFitsCardSize - out.size(), ' ');
  return out;
}

namespace {

HeaderCard parse_card(const char* p) {
  for (std::size_t i = 0; i < kFitsCardSize; ++i) {
    const unsigned char c = static_cast<unsigned char>(p[i]);
    if (c < 0x20 || c > 0x7e) {
      throw FitsError(FitsError::Kind::kMalformedHeader,
                      "non-ASCII byte in header");
    }
  }
  HeaderCard card;
  std::string kw(p, 8);
  while (!kw.empty() && kw.back() == ' ') kw.pop_back();
  card.keyword = kw;

  const bool has_value = p[8] == '=' && p[9] == ' ' && !is_commentary(kw);
  if (!has_value) {
    std::string rest(p + 8, kFitsCardSize - 8);
    while (!rest.empty() && rest.back() == ' ') rest.pop_back();
    card.comment = rest;
    return card;
  }

  std::string field(p + 10, kFitsCardSize - 10);
  if (!field.empty() && field.find_first_not_of(' ') != std::string::npos &&
      field[field.find_first_not_of(' ')] == '\'') {
    // quoted string; closing quote may be followed by a comment
    std::size_t start = field.find('\'') + 1;
    std::string value;
    std::size_t i = start;
    bool closed = false;
    while (i < field.size()) {
      if (field[i] == '\'') {
        if (i + 1 < field.size() && field[i + 1] == '\'') {
          value += '\'';
          i += 2;
          continue;
        }
        closed = true;
        ++i;
        break;
      }
      value += field[i++];
    }
    if (!closed) {
      throw FitsError(FitsError::Kind::kMalformedHeader,
                      "unterminated string in card " + card.keyword);
    }
    while (!value.empty() && value.back() == ' ') value.pop_back();
    card.value = value;
    std::size_t slash = field.find('/', i);
    if (slash != std::string::npos) {
      std::string c = field.substr(slash + 1);
      if (!c.empty() && c.front() == ' ') c.erase(c.begin());
      while (!c.empty() && c.back() == ' ') c.pop_back();
      card.comment = c;
    }
    return card;
  }

  // fixed-format value in bytes 11-30, optional comment after '/'
  std::string value20 = field.substr(0, 20);
  std::size_t slash = field.find('/', 20);
  if (slash != std::string::npos) {
    std::string c = field.substr(slash + 1);
    if (!c.empty() && c.front() == ' ') c.erase(c.begin());
    while (!c.empty() && c.back() == ' ') c.pop_back();
    card.comment = c;
  }
  std::string token = value20;
  const std::size_t b = token.find_first_not_of(' ');
  if (b == std::string::npos) {
    throw FitsError(FitsError::Kind::kMalformedHeader,
                    "empty value in card " + card.keyword);
  }
  token = token.substr(b);
  while (!token.empty() && token.back() == ' ') token.pop_back();

  if (token == "T" || token == "F") {
    card.value = (token == "T");
    return card;
  }
  if (token.find_first_of(".ED") != std::string::npos) {
    std::string t = token;
    for (char& c : t) {
      if (c == 'D') c = 'E';
    }
    char* end = nullptr;
    const double d = std::strtod(t.c_str(), &end);
    if (end != t.c_str() + t.size()) {
      throw FitsError(FitsError::Kind::kMalformedHeader,
                      "bad real value in card " + card.keyword);
    }
    card.value = d;
    return card;
  }
  std::int64_t iv = 0;
  auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), iv);
  if (ec != std::errc() || ptr != token.data() + token.size()) {
    throw FitsError(FitsError::Kind::kMalformedHeader,
                    "bad value in card " + card.keyword);
  }
  card.value = iv;
  return card;
}

}  // namespace

std::pair<std::vector<HeaderCard>, std::size_t> parse_header(
    std::span<const std::byte> bytes) {
  if (bytes.size() % kFitsBlockSize != 0) {
    throw FitsError(FitsError::Kind::kMalformedHeader,
                    "input is not a multiple of the 2880-byte block size");
  }
  std::vector<HeaderCard> cards;
  const char* p = reinterpret_cast<const char*>(bytes.data());
  for (std::size_t off = 0; off + kFitsCardSize <= bytes.size();
       off += kFitsCardSize) {
    if (std::memcmp(p + off, "END     ", 8) == 0) {
      // verify the card is ASCII-clean, then skip to the block boundary
      parse_card(p + off);
      const std::size_t data_off =
          (off / kFitsBlockSize + 1) * kFitsBlockSize;
      return {std::move(cards), data_off};
    }
    cards.push_back(parse_card(p + off));
  }
  throw FitsError(FitsError::Kind::kMalformedHeader, "missing END card");
}

namespace {

std::vector<HeaderCard> metadata_cards(const ImageMetadata& meta) {
  std::vector<HeaderCard> cards;
  cards.push_back(int_card("IMAGEID", meta.id, "image identifier"));
  cards.push_back(int_card("BANDIDX", meta.band, "filter band index"));
  cards.push_back(real_card("SKYBKG", meta.sky_background,
                            "sky background, counts/pixel"));
  // standard-style WCS: CD is degrees per pixel, CRPIX is 1-indexed
  const Eigen::Matrix2d cd = meta.wcs.pix_per_deg.inverse();
  cards.push_back(real_card("CRPIX1", meta.wcs.pixel_ref.x() + 1.0));
  cards.push_back(real_card("CRPIX2", meta.wcs.pixel_ref.y() + 1.0));
  cards.push_back(real_card("CRVAL1", meta.wcs.world_ref.x()));
  cards.push_back(real_card("CRVAL2", meta.wcs.world_ref.y()));
  cards.push_back(real_card("CD1_1", cd(0, 0)));
  cards.push_back(real_card("CD1_2", cd(0, 1)));
  cards.push_back(real_card("CD2_1", cd(1, 0)));
  cards.push_back(real_card("CD2_2", cd(1, 1)));
  cards.push_back(int_card("NPSF", meta.psf.components.size(),
                           "PSF mixture components"));
  for (std::size_t i = 0; i < meta.psf.components.size(); ++i) {
    const std::string n = std::to_string(i + 1);
    cards.push_back(real_card("PSFW" + n, meta.psf.components[i].weight));
    cards.push_back(real_card("PSFS" + n, meta.psf.components[i].sigma));
  }
  return cards;
}

ImageMetadata decode_metadata(const std::vector<HeaderCard>& cards, int width,
                              int height) {
  ImageMetadata meta;
  meta.width = width;
  meta.height = height;
  if (const auto* c = find_card(cards, "IMAGEID")) {
    meta.id = static_cast<std::uint32_t>(int_value(*c));
  }
  if (const auto* c = find_card(cards, "BANDIDX")) {
    meta.band = static_cast<int>(int_value(*c));
  }
  if (const auto* c = find_card(cards, "SKYBKG")) {
    meta.sky_background = numeric_value(*c);
  }
  if (find_card(cards, "CD1_1")) {
    Eigen::Matrix2d cd;
    cd(0, 0) = numeric_value(*find_card(cards, "CD1_1"));
    cd(0, 1) = find_card(cards, "CD1_2") ? numeric_value(*find_card(cards, "CD1_2")) : 0.0;
    cd(1, 0) = find_card(cards, "CD2_1") ? numeric_value(*find_card(cards, "CD2_1")) : 0.0;
    cd(1, 1) = numeric_value(*find_card(cards, "CD2_2"));
    meta.wcs.pix_per_deg = cd.inverse();
    if (const auto* c = find_card(cards, "CRPIX1")) {
      meta.wcs.pixel_ref.x() = numeric_value(*c) - 1.0;
    }
    if (const auto* c = find_card(cards, "CRPIX2")) {
      meta.wcs.pixel_ref.y() = numeric_value(*c) - 1.0;
    }
    if (const auto* c = find_card(cards, "CRVAL1")) {
      meta.wcs.world_ref.x() = numeric_value(*c);
    }
    if (const auto* c = find_card(cards, "CRVAL2")) {
      meta.wcs.world_ref.y() = numeric_value(*c);
    }
  } else {
    meta.wcs = make_wcs(0.396, Eigen::Vector2d::Zero(), width, height);
  }
  if (const auto* c = find_card(cards, "NPSF")) {
    const int n = static_cast<int>(int_value(*c));
    PsfModel psf;
    for (int i = 1; i <= n; ++i) {
      const auto* w = find_card(cards, "PSFW" + std::to_string(i));
      const auto* s = find_card(cards, "PSFS" + std::to_string(i));
      if (!w || !s) {
        throw FitsError(FitsError::Kind::kMalformedHeader,
                        "incomplete PSF cards");
      }
      psf.components.push_back({numeric_value(*w), numeric_value(*s)});
    }
    meta.psf = psf;
  } else {
    meta.psf = default_psf();
  }
  return meta;
}

}  // namespace

FitsReadResult read_image(std::span<const std::byte> bytes) {
  auto [cards, data_off] = parse_header(bytes);

  const auto* simple = find_card(cards, "SIMPLE");
  if (!simple || !std::holds_alternative<bool>(simple->value) ||
      !std::get<bool>(simple->value)) {
    throw FitsError(FitsError::Kind::kMalformedHeader,
                    "not a simple FITS file");
  }
  const auto* bitpix_card = find_card(cards, "BITPIX");
  const auto* naxis_card = find_card(cards, "NAXIS");
  const auto* n1 = find_card(cards, "NAXIS1");
  const auto* n2 = find_card(cards, "NAXIS2");
  if (!bitpix_card || !naxis_card || !n1 || !n2) {
    throw FitsError(FitsError::Kind::kMalformedHeader,
                    "missing required card");
  }
  const std::int64_t bitpix = int_value(*bitpix_card);
  if (int_value(*naxis_card) != 2) {
    throw FitsError(FitsError::Kind::kUnsupportedEncoding,
                    "only NAXIS=2 supported");
  }
  if (bitpix != -32 && bitpix != 16) {
    throw FitsError(FitsError::Kind::kUnsupportedEncoding,
                    "BITPIX " + std::to_string(bitpix) + " unsupported");
  }
  const std::int64_t width = int_value(*n1);
  const std::int64_t height = int_value(*n2);
  if (width < 1 || height < 1) {
    throw FitsError(FitsError::Kind::kMalformedHeader, "bad NAXIS1/NAXIS2");
  }
  double bzero = 0.0, bscale = 1.0;
  if (const auto* c = find_card(cards, "BZERO")) bzero = numeric_value(*c);
  if (const auto* c = find_card(cards, "BSCALE")) bscale = numeric_value(*c);

  const std::size_t npix = static_cast<std::size_t>(width * height);
  const std::size_t elem = (bitpix == -32) ? 4 : 2;
  if (data_off + npix * elem > bytes.size()) {
    throw FitsError(FitsError::Kind::kTruncatedFile,
                    "data payload truncated");
  }

  FitsReadResult out;
  out.fits.header = std::move(cards);
  out.fits.width = static_cast<int>(width);
  out.fits.height = static_cast<int>(height);
  out.fits.data.resize(npix);
  const std::byte* d = bytes.data() + data_off;
  if (bitpix == -32) {
    for (std::size_t i = 0; i < npix; ++i) {
      const std::uint32_t u = load_be32(d + 4 * i);
      float f;
      std::memcpy(&f, &u, 4);
      if (bzero != 0.0 || bscale != 1.0) {
        f = static_cast<float>(bscale * f + bzero);
      }
      out.fits.data[i] = f;
    }
  } else {
    for (std::size_t i = 0; i < npix; ++i) {
      const std::uint16_t hi = std::uint16_t(d[2 * i]);
      const std::uint16_t lo = std::uint16_t(d[2 * i + 1]);
      const std::int16_t raw = static_cast<std::int16_t>((hi << 8) | lo);
      out.fits.data[i] = static_cast<float>(bscale * raw + bzero);
    }
  }
  out.meta = decode_metadata(out.fits.header, out.fits.width, out.fits.height);
  return out;
}

std::vector<std::byte> write_image(const ImageMetadata& meta,
                                   std::span<const float> data) {
  if (meta.width < 1 || meta.height < 1) {
    throw std::domain_error("write_image: dimensions must be >= 1");
  }
  if (data.size() != static_cast<std::size_t>(meta.width) * meta.height) {
    throw std::domain_error("write_image: data size mismatch");
  }
  std::vector<HeaderCard> cards;
  cards.push_back(logical_card("SIMPLE", true, "conforms to FITS standard"));
  cards.push_back(int_card("BITPIX", -32, "IEEE 754 32-bit float"));
  cards.push_back(int_card("NAXIS", 2));
  cards.push_back(int_card("NAXIS1", meta.width));
  cards.push_back(int_card("NAXIS2", meta.height));
  for (auto& c : metadata_cards(meta)) cards.push_back(std::move(c));

  std::string header;
  for (const auto& c : cards) header += format_card(c);
  header += "END";
  header.append(kFitsCardSize - 3, ' ');
  if (header.size() % kFitsBlockSize != 0) {
    header.append(kFitsBlockSize - header.size() % kFitsBlockSize, ' ');
  }

  const std::size_t payload = data.size() * 4;
  const std::size_t data_padded =
      (payload + kFitsBlockSize - 1) / kFitsBlockSize * kFitsBlockSize;
  std::vector<std::byte> out(header.size() + data_padded, std::byte{0});
  std::memcpy(out.data(), header.data(), header.size());
  std::byte* d = out.data() + header.size();
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, &data[i], 4);
    store_be32(d + 4 * i, u);
  }
  return out;
}

std::vector<std::byte> write_image(const Image& image) {
  std::vector<float> data(image.pixels.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = static_cast<float>(image.pixels[i]);
  }
  return write_image(image.meta, data);
}

Image to_count_image(const FitsReadResult& r) {
  Image img;
  img.meta = r.meta;
  img.pixels.resize(r.fits.data.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    img.pixels[i] = static_cast<std::int32_t>(std::lround(r.fits.data[i]));
  }
  return img;
}

}  // namespace celeste
