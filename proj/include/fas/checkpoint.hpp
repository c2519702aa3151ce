#pragma once

// Checkpoint file (little endian):
//   "FASK" | u32 version | u32 header_len | header JSON | u32 count |
//   count x (u32 name_len | name | tensor record as in io.hpp)
//
// The header carries the branch, the epoch and the full config echo, so a
// checkpoint alone is enough to rebuild its model.

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "fas/io.hpp"
#include "fas/nn.hpp"

namespace fas {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json header;
  nn::ParamStore<float> params;
};

inline std::string encode_checkpoint(const nlohmann::json& header, const nn::ParamStore<float>& params) {
  std::string buf("FASK", 4);
  io::detail::put_u32(buf, kCheckpointVersion);
  const std::string h = header.dump();
  io::detail::put_u32(buf, static_cast<std::uint32_t>(h.size()));
  buf += h;
  io::detail::put_u32(buf, static_cast<std::uint32_t>(params.count()));
  for (std::size_t i = 0; i < params.count(); ++i) {
    const auto& name = params.name(static_cast<int>(i));
    io::detail::put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf += name;
    io::append_tensor(buf, params.value(static_cast<int>(i)));
  }
  return buf;
}

inline Checkpoint decode_checkpoint(const std::string& buf, const std::string& origin) {
  try {
    require(buf.compare(0, 4, "FASK") == 0, ErrorCode::IOFailure, origin + " is not a checkpoint");
    std::size_t pos = 4;
    require(io::detail::get_u32(buf, pos) == kCheckpointVersion, ErrorCode::IOFailure,
            origin + ": unsupported checkpoint version");
    const std::uint32_t hlen = io::detail::get_u32(buf, pos);
    require(pos + hlen <= buf.size(), ErrorCode::IOFailure, origin + ": truncated header");
    Checkpoint c;
    c.header = nlohmann::json::parse(buf.substr(pos, hlen));
    pos += hlen;
    const std::uint32_t count = io::detail::get_u32(buf, pos);
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::uint32_t nlen = io::detail::get_u32(buf, pos);
      require(pos + nlen <= buf.size(), ErrorCode::IOFailure, origin + ": truncated parameter name");
      std::string name = buf.substr(pos, nlen);
      pos += nlen;
      c.params.add(std::move(name), io::parse_tensor<float>(buf, pos));
    }
    require(pos == buf.size(), ErrorCode::IOFailure, origin + ": trailing bytes");
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::IOFailure, origin + ": bad checkpoint header: " + e.what());
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& header,
                            const nn::ParamStore<float>& params) {
  io::write_text(path, encode_checkpoint(header, params));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  require(std::filesystem::is_regular_file(path), ErrorCode::MissingArtifact, "checkpoint " + path.string() + " not found");
  return decode_checkpoint(io::read_text(path), path.string());
}

/// Copies every parameter of `src` into the identically named and shaped slot of `dst`.
template <typename T>
void restore_params(nn::ParamStore<T>& dst, const nn::ParamStore<float>& src) {
  require(dst.count() == src.count(), ErrorCode::ShapeMismatch,
          "checkpoint has " + std::to_string(src.count()) + " tensors, model expects " + std::to_string(dst.count()));
  for (std::size_t i = 0; i < dst.count(); ++i) {
    const int id = static_cast<int>(i);
    const int s = src.find(dst.name(id));
    require(s >= 0, ErrorCode::ShapeMismatch, "checkpoint lacks parameter " + dst.name(id));
    require(src.value(s).shape == dst.value(id).shape, ErrorCode::ShapeMismatch,
            "parameter " + dst.name(id) + " shape " + shape_str(src.value(s).shape) + " vs model " +
                shape_str(dst.value(id).shape));
    dst.value(id) = src.value(s).template cast<T>();
  }
}

}  // namespace fas
