#pragma once

// EGT2 binary container.
//
// Array blob:  "EGT2" | u8 version=1 | u8 dtype (1 = f32) | u8 rank | rank x u32 LE dims | LE payload
// Checkpoint:  "EGT2" | u8 version=1 | u8 dtype=1 | u8 rank=0 | u32 LE index length | JSON index | payload
//              The index maps each array name to {offset (bytes into payload), shape}.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "egot2/autograd.hpp"
#include "json.hpp"

namespace egot2 {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr char kMagic[4] = {'E', 'G', 'T', '2'};
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 1;

using Bytes = std::vector<std::uint8_t>;

namespace detail {

inline void put_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}

inline void put_f32(Bytes& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

inline float get_f32(const std::uint8_t* p) { return std::bit_cast<float>(get_u32(p)); }

inline void check_header(const Bytes& b, std::size_t at, const std::string& what) {
  if (b.size() < at + 7) throw FormatError(what + ": truncated header (field: header)");
  if (std::memcmp(b.data() + at, kMagic, 4) != 0) throw FormatError(what + ": bad magic bytes (field: magic)");
  if (b[at + 4] != kVersion) throw FormatError(what + ": unsupported version " + std::to_string(b[at + 4]) + " (field: version)");
  if (b[at + 5] != kDtypeF32) throw FormatError(what + ": unsupported dtype code " + std::to_string(b[at + 5]) + " (field: dtype)");
}

}  // namespace detail

inline Bytes read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return Bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void write_file(const fs::path& path, const Bytes& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline void write_text(const fs::path& path, const std::string& text) {
  write_file(path, Bytes(text.begin(), text.end()));
}

inline std::string read_text(const fs::path& path) {
  Bytes b = read_file(path);
  return std::string(b.begin(), b.end());
}

inline Bytes encode_array(const Matrix<float>& m) {
  Bytes out(kMagic, kMagic + 4);
  out.push_back(kVersion);
  out.push_back(kDtypeF32);
  out.push_back(2);
  detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
  detail::put_u32(out, static_cast<std::uint32_t>(m.cols()));
  out.reserve(out.size() + 4 * static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) detail::put_f32(out, m.data()[i]);
  return out;
}

// Accepts rank 1 (read as a single row) or rank 2 arrays.
inline Matrix<float> decode_array(const Bytes& b, const std::string& what = "array") {
  detail::check_header(b, 0, what);
  const std::uint8_t rank = b[6];
  if (rank < 1 || rank > 2) throw FormatError(what + ": unsupported rank " + std::to_string(rank) + " (field: rank)");
  if (b.size() < 7 + 4u * rank) throw FormatError(what + ": truncated dims (field: dims)");
  std::uint32_t rows = 1, cols = detail::get_u32(b.data() + 7);
  if (rank == 2) {
    rows = cols;
    cols = detail::get_u32(b.data() + 11);
  }
  const std::size_t start = 7 + 4u * rank;
  const std::size_t want = static_cast<std::size_t>(rows) * cols * 4;
  if (b.size() != start + want)
    throw FormatError(what + ": payload is " + std::to_string(b.size() - start) + " bytes, dims require " +
                      std::to_string(want) + " (field: payload)");
  Matrix<float> m(rows, cols);
  for (std::size_t i = 0; i < static_cast<std::size_t>(m.size()); ++i) m.data()[i] = detail::get_f32(b.data() + start + 4 * i);
  return m;
}

inline void save_array(const fs::path& path, const Matrix<float>& m) { write_file(path, encode_array(m)); }
inline Matrix<float> load_array(const fs::path& path) { return decode_array(read_file(path), path.string()); }

// Named float arrays plus a JSON metadata block.
struct Checkpoint {
  json meta = json::object();
  std::vector<std::pair<std::string, Matrix<float>>> arrays;

  const Matrix<float>* find(const std::string& name) const {
    for (const auto& [n, m] : arrays)
      if (n == name) return &m;
    return nullptr;
  }

  bool operator==(const Checkpoint& o) const {
    if (meta != o.meta || arrays.size() != o.arrays.size()) return false;
    for (std::size_t i = 0; i < arrays.size(); ++i) {
      const auto& a = arrays[i].second;
      const auto& b = o.arrays[i].second;
      if (arrays[i].first != o.arrays[i].first || a.rows() != b.rows() || a.cols() != b.cols()) return false;
      if (a.size() && std::memcmp(a.data(), b.data(), sizeof(float) * a.size()) != 0) return false;
    }
    return true;
  }
};

inline Bytes encode_checkpoint(const Checkpoint& ck) {
  json index = json::object();
  json order = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : ck.arrays) {
    if (index.contains(name)) throw ValidationError("checkpoint: duplicate array name " + name);
    index[name] = {{"offset", offset}, {"shape", {m.rows(), m.cols()}}};
    order.push_back(name);
    offset += 4 * static_cast<std::uint64_t>(m.size());
  }
  json header = {{"format", "egt2-checkpoint"}, {"meta", ck.meta}, {"arrays", index}, {"order", order}};
  const std::string text = header.dump();
  Bytes out(kMagic, kMagic + 4);
  out.push_back(kVersion);
  out.push_back(kDtypeF32);
  out.push_back(0);
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [name, m] : ck.arrays)
    for (Eigen::Index i = 0; i < m.size(); ++i) detail::put_f32(out, m.data()[i]);
  return out;
}

inline Checkpoint decode_checkpoint(const Bytes& b, const std::string& what = "checkpoint") {
  detail::check_header(b, 0, what);
  if (b[6] != 0) throw FormatError(what + ": not a checkpoint container (field: rank)");
  if (b.size() < 11) throw FormatError(what + ": truncated index length (field: index)");
  const std::uint32_t len = detail::get_u32(b.data() + 7);
  if (b.size() < 11 + std::size_t(len)) throw FormatError(what + ": truncated index block (field: index)");
  json header;
  try {
    header = json::parse(b.begin() + 11, b.begin() + 11 + len);
  } catch (const json::exception& e) {
    throw FormatError(what + ": index is not valid JSON (field: index): " + e.what());
  }
  if (header.value("format", "") != "egt2-checkpoint") throw FormatError(what + ": wrong format tag (field: format)");
  if (!header.contains("meta") || !header.contains("order") || !header.contains("arrays"))
    throw FormatError(what + ": index lacks 'meta', 'order' or 'arrays' (field: index)");
  Checkpoint ck;
  ck.meta = header.at("meta");
  const std::size_t base = 11 + len;
  for (const auto& name : header.at("order")) {
    const json& entry = header.at("arrays").at(name.get<std::string>());
    const std::uint64_t off = entry.at("offset");
    const Eigen::Index rows = entry.at("shape")[0], cols = entry.at("shape")[1];
    const std::size_t bytes = 4 * static_cast<std::size_t>(rows * cols);
    if (base + off + bytes > b.size())
      throw FormatError(what + ": array '" + name.get<std::string>() + "' runs past end of file (field: payload)");
    Matrix<float> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = detail::get_f32(b.data() + base + off + 4 * i);
    ck.arrays.emplace_back(name.get<std::string>(), std::move(m));
  }
  return ck;
}

inline void save_checkpoint_file(const fs::path& path, const Checkpoint& ck) { write_file(path, encode_checkpoint(ck)); }
inline Checkpoint load_checkpoint_file(const fs::path& path) { return decode_checkpoint(read_file(path), path.string()); }

template <class S>
Matrix<float> to_f32(const Matrix<S>& m) {
  return m.template cast<float>();
}

// FNV-1a 64 over bytes, rendered as 16 hex digits.
inline std::string digest_bytes(const Bytes& b) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto c : b) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// Digest of a file, or of a directory tree (sorted relative paths and contents).
inline std::string digest_path(const fs::path& path) {
  if (fs::is_regular_file(path)) return digest_bytes(read_file(path));
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(path))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), path));
  std::sort(files.begin(), files.end());
  Bytes all;
  for (const auto& f : files) {
    const std::string rel = f.generic_string();
    all.insert(all.end(), rel.begin(), rel.end());
    all.push_back(0);
    Bytes content = read_file(path / f);
    const std::string d = digest_bytes(content);
    all.insert(all.end(), d.begin(), d.end());
  }
  return digest_bytes(all);
}

}  // namespace egot2
