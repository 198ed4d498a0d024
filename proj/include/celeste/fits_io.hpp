#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "celeste/sky_model.hpp"

namespace celeste {

// Minimal FITS subset: primary HDU only, BITPIX -32 (written) or 16
// (read), fixed-format header cards, no extensions. 2880-byte blocks;
// headers padded with spaces, data with zero bytes. Big-endian on disk.

constexpr std::size_t kFitsBlockSize = 2880;
constexpr std::size_t kFitsCardSize = 80;

class FitsError : public std::runtime_error {
 public:
  enum class Kind { kMalformedHeader, kUnsupportedEncoding, kTruncatedFile };

  FitsError(Kind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// One 80-byte header card. `value` holds monostate for commentary cards
/// (COMMENT / HISTORY / blank keyword) and for END.
struct HeaderCard {
  std::string keyword;  // <= 8 ASCII chars, stored unpadded
  std::variant<std::monostate, bool, std::int64_t, double, std::string> value;
  std::string comment;

  bool operator==(const HeaderCard&) const = default;
};

HeaderCard logical_card(const std::string& kw, bool v,
                        const std::string& comment = "");
HeaderCard int_card(const std::string& kw, std::int64_t v,
                    const std::string& comment = "");
HeaderCard real_card(const std::string& kw, double v,
                     const std::string& comment = "");
HeaderCard string_card(const std::string& kw, const std::string& v,
                       const std::string& comment = "");

/// Serializes one card to exactly 80 ASCII bytes (fixed format: value
/// right-justified in bytes 11-30, logicals at byte 30, quoted strings
/// from byte 11).
std::string format_card(const HeaderCard& card);

/// Float image with its raw header; `data` is row-major, index
/// y * width + x.
struct FitsImage {
  std::vector<HeaderCard> header;
  int width = 0;
  int height = 0;
  std::vector<float> data;
};

/// Parses header cards up to (and excluding) END. Returns the cards and
/// the byte offset where data begins (a block multiple).
std::pair<std::vector<HeaderCard>, std::size_t> parse_header(
    std::span<const std::byte> bytes);

struct FitsReadResult {
  FitsImage fits;
  ImageMetadata meta;
};

/// Decodes a minimal-subset file: pixel payload plus any recognized
/// metadata cards (SKYBKG, BANDIDX, IMAGEID, NPSF/PSFWn/PSFSn, CRPIXn/
/// CRVALn/CDi_j). Missing metadata cards fall back to defaults.
FitsReadResult read_image(std::span<const std::byte> bytes);

/// Serializes a float image with the metadata keyword schema above.
/// BITPIX is always -32; output length is a block multiple.
std::vector<std::byte> write_image(const ImageMetadata& meta,
                                   std::span<const float> data);

/// Convenience: integer-count image to FITS bytes.
std::vector<std::byte> write_image(const Image& image);

/// Count-image view of a read result (values rounded to nearest int).
Image to_count_image(const FitsReadResult& r);

}  // namespace celeste
