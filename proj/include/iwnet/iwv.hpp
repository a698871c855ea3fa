#pragma once

// IWV1 volume format: a JSON header (`<name>.json`) next to a raw
// little-endian payload (`<name>.raw`). Scalar and soft grids are f32,
// masks are u8 in {0, 1}.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <variant>

#include <nlohmann/json.hpp>

#include "iwnet/volgrid.hpp"

namespace iwnet {

inline constexpr const char* kIwvFormat = "IWV1";

using AnyGrid = std::variant<ScalarVolume, SoftMask, BinaryMask>;

template <GridKind K>
nlohmann::json iwv_header(const Grid<K>& grid) {
  const auto& g = grid.geometry;
  return {{"format", kIwvFormat},
          {"kind", kind_name(K)},
          {"dims", g.dims},
          {"spacing_mm", g.spacing_mm},
          {"origin_mm", g.origin_mm},
          {"dtype", K == GridKind::mask ? "u8" : "f32"}};
}

namespace detail {

inline std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big)
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  return v;
}

template <class T>
T header_field(const nlohmann::json& h, const char* key) {
  if (!h.is_object() || !h.contains(key))
    fail(Errc::malformed_format, std::string("IWV1 header is missing '") + key + "'");
  try {
    return h.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    fail(Errc::malformed_format, std::string("IWV1 header field '") + key + "' has the wrong type");
  }
}

struct ParsedHeader {
  GridKind kind;
  VolumeGeometry geometry;
};

inline ParsedHeader parse_header(const nlohmann::json& h) {
  const auto format = header_field<std::string>(h, "format");
  if (format != kIwvFormat) fail(Errc::unsupported_version, "unsupported volume format '" + format + "'");
  const auto kind_s = header_field<std::string>(h, "kind");
  const auto dtype = header_field<std::string>(h, "dtype");
  ParsedHeader out{};
  if (kind_s == "scalar") {
    out.kind = GridKind::scalar;
  } else if (kind_s == "soft") {
    out.kind = GridKind::soft;
  } else if (kind_s == "mask") {
    out.kind = GridKind::mask;
  } else {
    fail(Errc::malformed_format, "unknown IWV1 kind '" + kind_s + "'");
  }
  const char* expected_dtype = out.kind == GridKind::mask ? "u8" : "f32";
  if (dtype != expected_dtype) fail(Errc::malformed_format, "dtype '" + dtype + "' does not match kind " + kind_s);
  out.geometry.dims = header_field<std::array<int, 3>>(h, "dims");
  out.geometry.spacing_mm = header_field<std::array<double, 3>>(h, "spacing_mm");
  out.geometry.origin_mm = header_field<std::array<double, 3>>(h, "origin_mm");
  out.geometry.validate();
  return out;
}

template <GridKind K>
Grid<K> decode_payload(const VolumeGeometry& g, std::string_view bytes) {
  using V = typename Grid<K>::value_type;
  const std::size_t n = g.voxel_count();
  if (bytes.size() != n * sizeof(V))
    fail(Errc::payload_length, "payload holds " + std::to_string(bytes.size()) + " bytes, header implies " +
                                   std::to_string(n * sizeof(V)));
  std::vector<V> values(n);
  if constexpr (K == GridKind::mask) {
    std::memcpy(values.data(), bytes.data(), n);
    for (auto v : values)
      if (v > 1) fail(Errc::malformed_format, "mask payload contains values other than 0/1");
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, bytes.data() + 4 * i, 4);
      values[i] = std::bit_cast<float>(to_little(bits));
    }
  }
  return Grid<K>(g, std::move(values));
}

}  // namespace detail

template <GridKind K>
std::string encode_payload(const Grid<K>& grid) {
  if constexpr (K == GridKind::mask) {
    return std::string(reinterpret_cast<const char*>(grid.values.data()), grid.values.size());
  } else {
    std::string out(grid.values.size() * 4, '\0');
    for (std::size_t i = 0; i < grid.values.size(); ++i) {
      const std::uint32_t bits = detail::to_little(std::bit_cast<std::uint32_t>(grid.values[i]));
      std::memcpy(out.data() + 4 * i, &bits, 4);
    }
    return out;
  }
}

inline AnyGrid decode_any(const nlohmann::json& header, std::string_view bytes) {
  const auto h = detail::parse_header(header);
  switch (h.kind) {
    case GridKind::scalar: return detail::decode_payload<GridKind::scalar>(h.geometry, bytes);
    case GridKind::soft: return detail::decode_payload<GridKind::soft>(h.geometry, bytes);
    case GridKind::mask: return detail::decode_payload<GridKind::mask>(h.geometry, bytes);
  }
  fail(Errc::malformed_format, "unreachable kind");
}

template <GridKind K>
Grid<K> decode(const nlohmann::json& header, std::string_view bytes) {
  const auto h = detail::parse_header(header);
  if (h.kind != K)
    fail(Errc::malformed_format, std::string("expected a ") + kind_name(K) + " grid, got " + kind_name(h.kind));
  return detail::decode_payload<K>(h.geometry, bytes);
}

// Accepts "dir/name", "dir/name.json" or "dir/name.raw".
inline std::filesystem::path iwv_base(const std::filesystem::path& p) {
  auto ext = p.extension();
  if (ext == ".json" || ext == ".raw") return p.parent_path() / p.stem();
  return p;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(Errc::io_failure, "cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& p, std::string_view bytes) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io_failure, "cannot write " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(Errc::io_failure, "short write to " + p.string());
}

inline nlohmann::json parse_json_text(std::string_view text, const std::string& what) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(Errc::malformed_format, what + " is not valid JSON: " + e.what());
  }
}

template <GridKind K>
void save_volume(const Grid<K>& grid, const std::filesystem::path& path) {
  const auto base = iwv_base(path);
  write_file(base.string() + ".json", iwv_header(grid).dump(2) + "\n");
  write_file(base.string() + ".raw", encode_payload(grid));
}

inline void save_volume(const AnyGrid& grid, const std::filesystem::path& path) {
  std::visit([&](const auto& g) { save_volume(g, path); }, grid);
}

inline AnyGrid load_any(const std::filesystem::path& path) {
  const auto base = iwv_base(path);
  const auto header = parse_json_text(read_file(base.string() + ".json"), base.string() + ".json");
  return decode_any(header, read_file(base.string() + ".raw"));
}

template <GridKind K>
Grid<K> load_volume(const std::filesystem::path& path) {
  const auto base = iwv_base(path);
  const auto header = parse_json_text(read_file(base.string() + ".json"), base.string() + ".json");
  return decode<K>(header, read_file(base.string() + ".raw"));
}

}  // namespace iwnet
