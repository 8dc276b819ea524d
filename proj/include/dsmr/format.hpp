#pragma once

// Little-endian byte I/O and exact text <-> number conversion shared by the
// file formats.

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <ostream>
#include <string>
#include <string_view>
#include <type_traits>

#include "dsmr/errors.hpp"

namespace dsmr {

namespace detail {
template <typename U>
U byteswap_if_big(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    U out = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) out = (out << 8) | ((v >> (8 * i)) & 0xFF);
    return out;
  } else {
    return v;
  }
}

template <typename T>
using UintOf = std::conditional_t<sizeof(T) == 2, std::uint16_t,
                                  std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>;
}  // namespace detail

template <typename T>
void write_le(std::ostream& out, T value) {
  using U = detail::UintOf<T>;
  U bits;
  std::memcpy(&bits, &value, sizeof(T));
  bits = detail::byteswap_if_big(bits);
  out.write(reinterpret_cast<const char*>(&bits), sizeof(T));
}

/// Bounds-checked cursor over an in-memory file image.
class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string source)
      : bytes_(bytes), source_(std::move(source)) {}

  std::size_t remaining() const { return bytes_.size() - pos_; }

  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string out(bytes_.substr(pos_, n));
    pos_ += n;
    return out;
  }

  template <typename T>
  T le(const char* what) {
    using U = detail::UintOf<T>;
    need(sizeof(T), what);
    U bits;
    std::memcpy(&bits, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    bits = detail::byteswap_if_big(bits);
    T value;
    std::memcpy(&value, &bits, sizeof(T));
    return value;
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (remaining() < n)
      throw PayloadError("'" + source_ + "': truncated while reading " + what);
  }

  std::string_view bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

/// Parses the whole of `text` as a number; throws ConfigError otherwise.
template <typename T>
T parse_number(std::string_view text) {
  while (!text.empty() && (text.front() == ' ' || text.front() == '\t')) text.remove_prefix(1);
  while (!text.empty() && (text.back() == ' ' || text.back() == '\t' || text.back() == '\r'))
    text.remove_suffix(1);
  if (!text.empty() && text.front() == '+') text.remove_prefix(1);
  T value{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (text.empty() || ec != std::errc() || ptr != end)
    throw ConfigError("cannot parse '" + std::string(text) + "' as a number");
  return value;
}

/// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace dsmr
