#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hdp/error.hpp"
#include "hdp/numcore/params.hpp"
#include "hdp/numcore/tensor.hpp"

// Checkpoint layout:
//   "HDPCKPT1" | u32 LE header length | UTF-8 JSON header | LE float32 blob
// The header is {"params": [{"name", "shape", "offset", "count"}, ...]} with
// byte offsets relative to the start of the blob.

namespace hdp::nc {

inline constexpr char kCheckpointMagic[] = "HDPCKPT1";

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

inline std::string encode_checkpoint(const ParamStore<float>& params) {
  nlohmann::json header;
  header["params"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& p : params) {
    header["params"].push_back({{"name", p.name},
                                {"shape", p.value.shape()},
                                {"offset", offset},
                                {"count", p.value.size()}});
    offset += static_cast<std::uint64_t>(p.value.size()) * 4u;
  }
  const std::string hdr = header.dump();
  std::string buf(kCheckpointMagic, 8);
  detail::put_u32(buf, static_cast<std::uint32_t>(hdr.size()));
  buf += hdr;
  buf.reserve(buf.size() + offset);
  for (const auto& p : params) {
    for (float v : p.value.data()) detail::put_u32(buf, std::bit_cast<std::uint32_t>(v));
  }
  return buf;
}

inline ParamStore<float> decode_checkpoint(const std::string& buf) {
  if (buf.size() < 12 || std::memcmp(buf.data(), kCheckpointMagic, 8) != 0) {
    throw FormatError("not a checkpoint (bad magic)");
  }
  const auto* bytes = reinterpret_cast<const unsigned char*>(buf.data());
  const std::uint32_t hlen = detail::get_u32(bytes + 8);
  if (12 + static_cast<std::size_t>(hlen) > buf.size()) throw FormatError("truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(buf.substr(12, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  const std::size_t blob = 12 + hlen;
  ParamStore<float> out;
  for (const auto& entry : header.at("params")) {
    Shape shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto count = numel(shape);
    if (blob + offset + static_cast<std::uint64_t>(count) * 4u > buf.size()) {
      throw FormatError("checkpoint blob truncated");
    }
    std::vector<float> data(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) {
      data[static_cast<std::size_t>(i)] =
          std::bit_cast<float>(detail::get_u32(bytes + blob + offset + 4 * static_cast<std::uint64_t>(i)));
    }
    out.add(entry.at("name").get<std::string>(), Tensor<float>(std::move(shape), std::move(data)));
  }
  return out;
}

inline void save_checkpoint(const std::string& path, const ParamStore<float>& params) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write checkpoint " + path);
  const std::string buf = encode_checkpoint(params);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline ParamStore<float> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open checkpoint " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(buf);
}

}  // namespace hdp::nc
