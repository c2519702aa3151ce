#pragma once

// On-disk formats.
//
// Clip directory:
//   frame_0000.ppm ...   binary PPM (P6), 8-bit RGB
//   keypoints.txt        per frame: "<index> x0 y0 x1 y1 ..." in kp:: order
//   label.txt            live | print | replay
//
// Tensor file (little endian):
//   "FAST" | u32 version | u32 dtype (1 = float32) | u32 rank | u32 dims[rank] | f32 data

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "fas/media_prep.hpp"

namespace fas::io {

namespace fs = std::filesystem;

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::IOFailure, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::IOFailure, "cannot write " + path.string());
  out << text;
  require(static_cast<bool>(out), ErrorCode::IOFailure, "short write to " + path.string());
}

inline std::uint8_t quantize(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline void write_ppm(const fs::path& path, const Image& img) {
  require(img.rank() == 3 && img.shape[2] == 3, ErrorCode::ShapeMismatch, "PPM needs an [H, W, 3] image");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::IOFailure, "cannot write " + path.string());
  out << "P6\n" << img.shape[1] << ' ' << img.shape[0] << "\n255\n";
  std::vector<char> bytes(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) bytes[i] = static_cast<char>(quantize(img[i]));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorCode::IOFailure, "short write to " + path.string());
}

inline Image read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::IOFailure, "cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(c);
    }
    return t;
  };
  require(token() == "P6", ErrorCode::IOFailure, path.string() + " is not a binary PPM");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw Error(ErrorCode::IOFailure, "malformed PPM header in " + path.string());
  }
  require(w > 0 && h > 0 && maxval == 255, ErrorCode::IOFailure, "unsupported PPM " + path.string());
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(in.gcount() == static_cast<std::streamsize>(bytes.size()), ErrorCode::IOFailure,
          "truncated PPM " + path.string());
  Image img({h, w, 3});
  for (std::size_t i = 0; i < bytes.size(); ++i) img[i] = static_cast<float>(bytes[i]) / 255.0f;
  return img;
}

inline std::string format_keypoints(const std::vector<Keypoints>& per_frame) {
  std::ostringstream os;
  os << std::setprecision(9);
  for (std::size_t f = 0; f < per_frame.size(); ++f) {
    os << f;
    for (const auto& p : per_frame[f].points) os << ' ' << p.x << ' ' << p.y;
    os << '\n';
  }
  return os.str();
}

inline std::vector<Keypoints> parse_keypoints(const std::string& text, const std::string& origin) {
  std::vector<Keypoints> out;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    long index = -1;
    require(static_cast<bool>(ls >> index) && index == static_cast<long>(out.size()), ErrorCode::IOFailure,
            origin + ": keypoint records must be numbered 0, 1, 2, ...");
    Keypoints k;
    double x, y;
    while (ls >> x) {
      require(static_cast<bool>(ls >> y), ErrorCode::IOFailure, origin + ": odd number of coordinates");
      k.points.push_back({x, y});
    }
    require(ls.eof(), ErrorCode::IOFailure, origin + ": malformed keypoint record");
    out.push_back(std::move(k));
  }
  return out;
}

inline std::string frame_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%04zu.ppm", index);
  return buf;
}

inline bool valid_label(const std::string& label) {
  return label == "live" || label == "print" || label == "replay";
}

inline void write_clip(const fs::path& dir, const Clip& clip) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < clip.frames.size(); ++i) write_ppm(dir / frame_name(i), clip.frames[i]);
  write_text(dir / "keypoints.txt", format_keypoints(clip.keypoints));
  write_text(dir / "label.txt", clip.label + "\n");
}

inline Clip read_clip(const fs::path& dir) {
  require(fs::is_directory(dir), ErrorCode::IOFailure, "clip directory " + dir.string() + " does not exist");
  Clip clip;
  clip.clip_id = dir.filename().string();
  if (clip.clip_id.empty()) clip.clip_id = dir.parent_path().filename().string();
  std::string label = read_text(dir / "label.txt");
  label.erase(label.find_last_not_of(" \t\r\n") + 1);
  require(valid_label(label), ErrorCode::InvalidInput, dir.string() + ": unknown label '" + label + "'");
  clip.label = label;
  clip.keypoints = parse_keypoints(read_text(dir / "keypoints.txt"), (dir / "keypoints.txt").string());
  for (std::size_t i = 0; fs::exists(dir / frame_name(i)); ++i) clip.frames.push_back(read_ppm(dir / frame_name(i)));
  require(clip.frames.size() == clip.keypoints.size(), ErrorCode::InvalidInput,
          dir.string() + ": " + std::to_string(clip.frames.size()) + " frames but " +
              std::to_string(clip.keypoints.size()) + " keypoint records");
  for (const auto& k : clip.keypoints) k.validate();
  return clip;
}

/// Sorted clip directories directly under `root`.
inline std::vector<fs::path> list_clip_dirs(const fs::path& root) {
  require(fs::is_directory(root), ErrorCode::IOFailure, "dataset split " + root.string() + " does not exist");
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / "label.txt")) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  return dirs;
}

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const std::string& buf, std::size_t& pos) {
  require(pos + 4 <= buf.size(), ErrorCode::IOFailure, "truncated binary file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

}  // namespace detail

inline constexpr std::uint32_t kTensorVersion = 1;
inline constexpr std::uint32_t kDtypeFloat32 = 1;

/// Appends the header and little-endian float32 payload of `t`.
template <typename T>
void append_tensor(std::string& buf, const Tensor<T>& t) {
  buf.append("FAST", 4);
  detail::put_u32(buf, kTensorVersion);
  detail::put_u32(buf, kDtypeFloat32);
  detail::put_u32(buf, static_cast<std::uint32_t>(t.rank()));
  for (int d : t.shape) detail::put_u32(buf, static_cast<std::uint32_t>(d));
  for (T v : t.data) detail::put_u32(buf, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

template <typename T = float>
Tensor<T> parse_tensor(const std::string& buf, std::size_t& pos) {
  require(buf.compare(pos, 4, "FAST") == 0, ErrorCode::IOFailure, "bad tensor magic");
  pos += 4;
  require(detail::get_u32(buf, pos) == kTensorVersion, ErrorCode::IOFailure, "unsupported tensor version");
  require(detail::get_u32(buf, pos) == kDtypeFloat32, ErrorCode::IOFailure, "unsupported tensor dtype");
  const std::uint32_t rank = detail::get_u32(buf, pos);
  require(rank <= 8, ErrorCode::IOFailure, "implausible tensor rank");
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<int>(detail::get_u32(buf, pos)));
  Tensor<T> t(shape);
  for (auto& v : t.data) v = static_cast<T>(std::bit_cast<float>(detail::get_u32(buf, pos)));
  return t;
}

template <typename T>
void write_tensor(const fs::path& path, const Tensor<T>& t) {
  std::string buf;
  append_tensor(buf, t);
  write_text(path, buf);
}

template <typename T = float>
Tensor<T> read_tensor(const fs::path& path) {
  const std::string buf = read_text(path);
  std::size_t pos = 0;
  auto t = parse_tensor<T>(buf, pos);
  require(pos == buf.size(), ErrorCode::IOFailure, "trailing bytes in " + path.string());
  return t;
}

}  // namespace fas::io
