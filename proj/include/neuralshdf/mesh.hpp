#pragma once

// Indexed triangle meshes: OBJ/PLY I/O, adjacency, and per-face geometry.

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <spdlog/spdlog.h>

#include "neuralshdf/errors.hpp"

namespace nshdf {

using Vec3 = Eigen::Vector3d;
using Face = std::array<int, 3>;

struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<Face> faces;
  std::vector<Vec3> normals;  // optional per-vertex normals, empty when absent
};

enum class MeshFormat { Obj, Ply };

struct Aabb {
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = Vec3::Constant(-std::numeric_limits<double>::infinity());

  void extend(const Vec3& p) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  void extend(const Aabb& b) {
    lo = lo.cwiseMin(b.lo);
    hi = hi.cwiseMax(b.hi);
  }
  bool empty() const { return lo.x() > hi.x(); }
  double diagonal() const { return empty() ? 0.0 : (hi - lo).norm(); }
  Vec3 center() const { return 0.5 * (lo + hi); }
};

inline Aabb bounds(const Mesh& mesh) {
  Aabb box;
  for (const auto& v : mesh.vertices) box.extend(v);
  return box;
}

inline double bbox_diagonal(const Mesh& mesh) { return bounds(mesh).diagonal(); }

inline double mean_edge_length(const Mesh& mesh) {
  double sum = 0;
  std::size_t n = 0;
  for (const auto& f : mesh.faces) {
    for (int i = 0; i < 3; ++i) {
      sum += (mesh.vertices[f[i]] - mesh.vertices[f[(i + 1) % 3]]).norm();
      ++n;
    }
  }
  return n ? sum / n : 0.0;
}

// ---------------------------------------------------------------------------
// Loading

namespace detail {

/// Adds a face, dropping repeated-index and zero-area faces. Returns false when dropped.
inline bool push_face(Mesh& mesh, int a, int b, int c) {
  if (a == b || b == c || a == c) return false;
  const Vec3& p0 = mesh.vertices[a];
  const Vec3& p1 = mesh.vertices[b];
  const Vec3& p2 = mesh.vertices[c];
  if ((p1 - p0).cross(p2 - p0).squaredNorm() == 0.0) return false;
  mesh.faces.push_back({a, b, c});
  return true;
}

inline std::string_view trim(std::string_view s) {
  const auto ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t' || s[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < s.size() && s[j] != ' ' && s[j] != '\t' && s[j] != '\r') ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

template <typename T>
bool parse_number(std::string_view tok, T& out) {
  const char* first = tok.data();
  const char* last = tok.data() + tok.size();
  if (first != last && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last;
}

/// Visits the lines of a buffer with their 1-based line numbers.
template <typename Fn>
void for_each_line(std::string_view text, Fn&& fn) {
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    const std::size_t end = nl == std::string_view::npos ? text.size() : nl;
    ++line_no;
    if (!fn(text.substr(pos, end - pos), line_no)) return;
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
}

inline Mesh parse_obj(std::string_view text) {
  Mesh mesh;
  struct RawFace {
    std::vector<long> idx;
    std::size_t line;
  };
  std::vector<RawFace> raw;
  for_each_line(text, [&](std::string_view line, std::size_t no) {
    line = trim(line);
    if (line.empty() || line[0] == '#') return true;
    const auto toks = split_ws(line);
    if (toks[0] == "v") {
      if (toks.size() < 4) throw ParseError("vertex record needs 3 coordinates", no);
      Vec3 p;
      for (int k = 0; k < 3; ++k) {
        if (!parse_number(toks[1 + k], p[k])) {
          throw ParseError("bad vertex coordinate '" + std::string(toks[1 + k]) + "'", no);
        }
      }
      mesh.vertices.push_back(p);
    } else if (toks[0] == "f") {
      if (toks.size() < 4) throw ParseError("face record needs at least 3 indices", no);
      RawFace f{{}, no};
      for (std::size_t k = 1; k < toks.size(); ++k) {
        const auto tok = toks[k].substr(0, toks[k].find('/'));
        long idx = 0;
        if (!parse_number(tok, idx) || idx == 0) {
          throw ParseError("bad face index '" + std::string(toks[k]) + "'", no);
        }
        // Negative indices are relative to the vertices read so far.
        if (idx < 0) idx = static_cast<long>(mesh.vertices.size()) + idx + 1;
        f.idx.push_back(idx - 1);
      }
      raw.push_back(std::move(f));
    }
    // vn/vt/g/o/s/usemtl/mtllib are ignored.
    return true;
  });
  if (mesh.vertices.empty()) throw ParseError("no vertices");
  if (raw.empty()) throw ParseError("no faces");
  std::size_t dropped = 0;
  const long nv = static_cast<long>(mesh.vertices.size());
  for (const auto& f : raw) {
    for (long i : f.idx) {
      if (i < 0 || i >= nv) {
        throw StructuralError("line " + std::to_string(f.line) + ": face index " +
                              std::to_string(i + 1) + " out of range (" + std::to_string(nv) +
                              " vertices)");
      }
    }
    for (std::size_t k = 1; k + 1 < f.idx.size(); ++k) {
      if (!push_face(mesh, static_cast<int>(f.idx[0]), static_cast<int>(f.idx[k]),
                     static_cast<int>(f.idx[k + 1]))) {
        ++dropped;
      }
    }
  }
  if (dropped) spdlog::warn("dropped {} degenerate face(s)", dropped);
  return mesh;
}

enum class PlyType { I8, U8, I16, U16, I32, U32, F32, F64 };

inline std::optional<PlyType> ply_type(std::string_view name) {
  if (name == "char" || name == "int8") return PlyType::I8;
  if (name == "uchar" || name == "uint8") return PlyType::U8;
  if (name == "short" || name == "int16") return PlyType::I16;
  if (name == "ushort" || name == "uint16") return PlyType::U16;
  if (name == "int" || name == "int32") return PlyType::I32;
  if (name == "uint" || name == "uint32") return PlyType::U32;
  if (name == "float" || name == "float32") return PlyType::F32;
  if (name == "double" || name == "float64") return PlyType::F64;
  return std::nullopt;
}

inline std::size_t ply_size(PlyType t) {
  switch (t) {
    case PlyType::I8:
    case PlyType::U8: return 1;
    case PlyType::I16:
    case PlyType::U16: return 2;
    case PlyType::I32:
    case PlyType::U32:
    case PlyType::F32: return 4;
    case PlyType::F64: return 8;
  }
  return 0;
}

struct PlyProperty {
  std::string name;
  PlyType type = PlyType::F32;
  bool is_list = false;
  PlyType count_type = PlyType::U8;
};

struct PlyElement {
  std::string name;
  std::size_t count = 0;
  std::vector<PlyProperty> props;
};

template <typename T>
T read_le(const char* p) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts unsupported");
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

inline double read_binary(PlyType t, const char* p) {
  switch (t) {
    case PlyType::I8: return read_le<std::int8_t>(p);
    case PlyType::U8: return read_le<std::uint8_t>(p);
    case PlyType::I16: return read_le<std::int16_t>(p);
    case PlyType::U16: return read_le<std::uint16_t>(p);
    case PlyType::I32: return read_le<std::int32_t>(p);
    case PlyType::U32: return read_le<std::uint32_t>(p);
    case PlyType::F32: return read_le<float>(p);
    case PlyType::F64: return read_le<double>(p);
  }
  return 0;
}

inline Mesh parse_ply(std::string_view data) {
  if (data.substr(0, 3) != "ply") throw ParseError("missing 'ply' magic", 1);
  std::vector<PlyElement> elements;
  bool binary = false;
  bool have_format = false;
  std::size_t body = std::string_view::npos;
  std::size_t header_lines = 0;
  for_each_line(data, [&](std::string_view line, std::size_t no) {
    header_lines = no;
    line = trim(line);
    const auto toks = split_ws(line);
    if (toks.empty()) return true;
    if (toks[0] == "ply" || toks[0] == "comment" || toks[0] == "obj_info") return true;
    if (toks[0] == "format") {
      if (toks.size() < 2) throw ParseError("bad format line", no);
      if (toks[1] == "ascii") {
        binary = false;
      } else if (toks[1] == "binary_little_endian") {
        binary = true;
      } else {
        throw ParseError("unsupported PLY format '" + std::string(toks[1]) + "'", no);
      }
      have_format = true;
    } else if (toks[0] == "element") {
      std::size_t count = 0;
      if (toks.size() != 3 || !parse_number(toks[2], count)) throw ParseError("bad element line", no);
      elements.push_back({std::string(toks[1]), count, {}});
    } else if (toks[0] == "property") {
      if (elements.empty()) throw ParseError("property before element", no);
      PlyProperty prop;
      if (toks.size() == 5 && toks[1] == "list") {
        auto ct = ply_type(toks[2]);
        auto it = ply_type(toks[3]);
        if (!ct || !it) throw ParseError("bad list property types", no);
        prop = {std::string(toks[4]), *it, true, *ct};
      } else if (toks.size() == 3) {
        auto t = ply_type(toks[1]);
        if (!t) throw ParseError("unknown property type '" + std::string(toks[1]) + "'", no);
        prop = {std::string(toks[2]), *t, false, PlyType::U8};
      } else {
        throw ParseError("bad property line", no);
      }
      elements.back().props.push_back(prop);
    } else if (toks[0] == "end_header") {
      const std::size_t nl = line.data() - data.data() + line.size();
      const std::size_t after = data.find('\n', nl);
      body = after == std::string_view::npos ? data.size() : after + 1;
      return false;
    } else {
      throw ParseError("unexpected header keyword '" + std::string(toks[0]) + "'", no);
    }
    return true;
  });
  if (body == std::string_view::npos) throw ParseError("missing end_header");
  if (!have_format) throw ParseError("missing format line");

  Mesh mesh;
  std::vector<std::vector<long>> raw_faces;
  std::vector<std::size_t> raw_face_lines;

  auto prop_index = [](const PlyElement& e, std::string_view name) -> int {
    for (std::size_t i = 0; i < e.props.size(); ++i) {
      if (e.props[i].name == name) return static_cast<int>(i);
    }
    return -1;
  };

  if (binary) {
    const char* p = data.data() + body;
    const char* end = data.data() + data.size();
    auto need = [&](std::size_t n) {
      if (static_cast<std::size_t>(end - p) < n) throw ParseError("truncated binary body");
    };
    for (const auto& e : elements) {
      const int ix = prop_index(e, "x"), iy = prop_index(e, "y"), iz = prop_index(e, "z");
      int ifaces = prop_index(e, "vertex_indices");
      if (ifaces < 0) ifaces = prop_index(e, "vertex_index");
      for (std::size_t r = 0; r < e.count; ++r) {
        Vec3 pos = Vec3::Zero();
        std::vector<long> idx;
        for (std::size_t k = 0; k < e.props.size(); ++k) {
          const auto& prop = e.props[k];
          if (prop.is_list) {
            need(ply_size(prop.count_type));
            const auto n = static_cast<std::size_t>(read_binary(prop.count_type, p));
            p += ply_size(prop.count_type);
            need(n * ply_size(prop.type));
            for (std::size_t j = 0; j < n; ++j) {
              const double v = read_binary(prop.type, p);
              if (static_cast<int>(k) == ifaces) idx.push_back(static_cast<long>(v));
              p += ply_size(prop.type);
            }
          } else {
            need(ply_size(prop.type));
            const double v = read_binary(prop.type, p);
            if (static_cast<int>(k) == ix) pos.x() = v;
            if (static_cast<int>(k) == iy) pos.y() = v;
            if (static_cast<int>(k) == iz) pos.z() = v;
            p += ply_size(prop.type);
          }
        }
        if (e.name == "vertex") mesh.vertices.push_back(pos);
        if (e.name == "face") {
          raw_faces.push_back(std::move(idx));
          raw_face_lines.push_back(0);
        }
      }
    }
  } else {
    std::size_t line_no = header_lines;
    std::size_t pos = body;
    auto next_line = [&]() -> std::string_view {
      while (pos < data.size()) {
        const std::size_t nl = data.find('\n', pos);
        const std::size_t end = nl == std::string_view::npos ? data.size() : nl;
        auto line = trim(data.substr(pos, end - pos));
        pos = end + 1;
        ++line_no;
        if (!line.empty()) return line;
      }
      throw ParseError("unexpected end of ASCII body", line_no);
    };
    for (const auto& e : elements) {
      const int ix = prop_index(e, "x"), iy = prop_index(e, "y"), iz = prop_index(e, "z");
      int ifaces = prop_index(e, "vertex_indices");
      if (ifaces < 0) ifaces = prop_index(e, "vertex_index");
      for (std::size_t r = 0; r < e.count; ++r) {
        const auto toks = split_ws(next_line());
        std::size_t t = 0;
        Vec3 v3 = Vec3::Zero();
        std::vector<long> idx;
        auto take = [&]() -> double {
          if (t >= toks.size()) throw ParseError("too few values in element row", line_no);
          double v = 0;
          if (!parse_number(toks[t], v)) {
            throw ParseError("bad number '" + std::string(toks[t]) + "'", line_no);
          }
          ++t;
          return v;
        };
        for (std::size_t k = 0; k < e.props.size(); ++k) {
          const auto& prop = e.props[k];
          if (prop.is_list) {
            const auto n = static_cast<std::size_t>(take());
            for (std::size_t j = 0; j < n; ++j) {
              const double v = take();
              if (static_cast<int>(k) == ifaces) idx.push_back(static_cast<long>(v));
            }
          } else {
            const double v = take();
            if (static_cast<int>(k) == ix) v3.x() = v;
            if (static_cast<int>(k) == iy) v3.y() = v;
            if (static_cast<int>(k) == iz) v3.z() = v;
          }
        }
        if (e.name == "vertex") mesh.vertices.push_back(v3);
        if (e.name == "face") {
          raw_faces.push_back(std::move(idx));
          raw_face_lines.push_back(line_no);
        }
      }
    }
  }

  if (mesh.vertices.empty()) throw ParseError("no vertices");
  if (raw_faces.empty()) throw ParseError("no faces");
  const long nv = static_cast<long>(mesh.vertices.size());
  std::size_t dropped = 0;
  for (std::size_t fi = 0; fi < raw_faces.size(); ++fi) {
    const auto& f = raw_faces[fi];
    if (f.size() < 3) throw ParseError("face with fewer than 3 indices", raw_face_lines[fi]);
    for (long i : f) {
      if (i < 0 || i >= nv) {
        throw StructuralError("face " + std::to_string(fi) + ": index " + std::to_string(i) +
                              " out of range (" + std::to_string(nv) + " vertices)");
      }
    }
    for (std::size_t k = 1; k + 1 < f.size(); ++k) {
      if (!push_face(mesh, static_cast<int>(f[0]), static_cast<int>(f[k]),
                     static_cast<int>(f[k + 1]))) {
        ++dropped;
      }
    }
  }
  if (dropped) spdlog::warn("dropped {} degenerate face(s)", dropped);
  return mesh;
}

}  // namespace detail

/// Parses an OBJ or PLY buffer. Polygons are fan-triangulated; degenerate faces are dropped.
inline Mesh load_mesh(std::string_view bytes, MeshFormat format) {
  if (detail::trim(bytes).empty()) throw ParseError("empty buffer");
  return format == MeshFormat::Obj ? detail::parse_obj(bytes) : detail::parse_ply(bytes);
}

/// Guesses the format from the buffer's first bytes.
inline MeshFormat sniff_format(std::string_view bytes) {
  return bytes.substr(0, 3) == "ply" ? MeshFormat::Ply : MeshFormat::Obj;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Mesh load_mesh_file(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".obj") return load_mesh(bytes, MeshFormat::Obj);
  if (ext == ".ply") return load_mesh(bytes, MeshFormat::Ply);
  return load_mesh(bytes, sniff_format(bytes));
}

// ---------------------------------------------------------------------------
// Saving

inline std::string save_obj(const Mesh& mesh) {
  std::string out;
  out.reserve(mesh.vertices.size() * 48 + mesh.faces.size() * 24);
  char buf[128];
  for (const auto& v : mesh.vertices) {
    const int n = std::snprintf(buf, sizeof buf, "v %.17g %.17g %.17g\n", v.x(), v.y(), v.z());
    out.append(buf, n);
  }
  for (const auto& f : mesh.faces) {
    const int n = std::snprintf(buf, sizeof buf, "f %d %d %d\n", f[0] + 1, f[1] + 1, f[2] + 1);
    out.append(buf, n);
  }
  return out;
}

struct PlyWriteOptions {
  bool binary = true;
  /// Per-face RGB, one entry per face when set.
  std::span<const std::array<std::uint8_t, 3>> face_colors{};
  /// Per-face scalar written as a float property named `face_scalar_name`.
  std::span<const double> face_scalars{};
  std::string face_scalar_name = "shdf";
};

inline std::string save_ply(const Mesh& mesh, const PlyWriteOptions& opt = {}) {
  const bool colors = !opt.face_colors.empty();
  const bool scalars = !opt.face_scalars.empty();
  if (colors && opt.face_colors.size() != mesh.faces.size()) {
    throw ContractError("face color count does not match face count");
  }
  if (scalars && opt.face_scalars.size() != mesh.faces.size()) {
    throw ContractError("face scalar count does not match face count");
  }
  std::string out = "ply\n";
  out += opt.binary ? "format binary_little_endian 1.0\n" : "format ascii 1.0\n";
  out += "element vertex " + std::to_string(mesh.vertices.size()) + "\n";
  out += "property double x\nproperty double y\nproperty double z\n";
  out += "element face " + std::to_string(mesh.faces.size()) + "\n";
  out += "property list uchar int vertex_indices\n";
  if (colors) out += "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  if (scalars) out += "property float " + opt.face_scalar_name + "\n";
  out += "end_header\n";
  if (opt.binary) {
    auto put = [&out](const auto& v) {
      out.append(reinterpret_cast<const char*>(&v), sizeof v);
    };
    for (const auto& v : mesh.vertices) {
      put(v.x());
      put(v.y());
      put(v.z());
    }
    for (std::size_t i = 0; i < mesh.faces.size(); ++i) {
      put(std::uint8_t{3});
      for (int k = 0; k < 3; ++k) put(static_cast<std::int32_t>(mesh.faces[i][k]));
      if (colors) {
        for (auto c : opt.face_colors[i]) put(c);
      }
      if (scalars) put(static_cast<float>(opt.face_scalars[i]));
    }
  } else {
    char buf[160];
    for (const auto& v : mesh.vertices) {
      const int n = std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g\n", v.x(), v.y(), v.z());
      out.append(buf, n);
    }
    for (std::size_t i = 0; i < mesh.faces.size(); ++i) {
      const auto& f = mesh.faces[i];
      int n = std::snprintf(buf, sizeof buf, "3 %d %d %d", f[0], f[1], f[2]);
      out.append(buf, n);
      if (colors) {
        const auto& c = opt.face_colors[i];
        n = std::snprintf(buf, sizeof buf, " %u %u %u", unsigned(c[0]), unsigned(c[1]), unsigned(c[2]));
        out.append(buf, n);
      }
      if (scalars) {
        n = std::snprintf(buf, sizeof buf, " %.9g", static_cast<double>(static_cast<float>(opt.face_scalars[i])));
        out.append(buf, n);
      }
      out += '\n';
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adjacency

struct Edge {
  int v0 = 0;  // v0 < v1
  int v1 = 0;
  std::vector<int> faces;
};

struct Adjacency {
  std::vector<Edge> edges;
  std::vector<std::array<int, 3>> face_edges;   // edge of (f[i], f[i+1])
  std::vector<std::vector<int>> face_neighbors;  // faces sharing an edge, ascending
  std::vector<std::vector<int>> vertex_rings;    // neighbor vertices, ascending
  std::unordered_map<std::uint64_t, int> edge_lookup;

  static std::uint64_t key(int a, int b) {
    if (a > b) std::swap(a, b);
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
  }

  /// Index of edge (a, b) or -1.
  int find_edge(int a, int b) const {
    const auto it = edge_lookup.find(key(a, b));
    return it == edge_lookup.end() ? -1 : it->second;
  }
};

/// Builds the edge table, face adjacency and vertex one-rings. With `strict`,
/// edges shared by more than two faces raise NonManifoldError.
inline Adjacency build_adjacency(const Mesh& mesh, bool strict = true) {
  Adjacency adj;
  adj.face_edges.resize(mesh.faces.size());
  adj.edge_lookup.reserve(mesh.faces.size() * 2);
  adj.edges.reserve(mesh.faces.size() * 3 / 2 + 8);
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const auto& tri = mesh.faces[f];
    for (int i = 0; i < 3; ++i) {
      const int a = tri[i], b = tri[(i + 1) % 3];
      auto [it, inserted] = adj.edge_lookup.try_emplace(Adjacency::key(a, b), static_cast<int>(adj.edges.size()));
      if (inserted) adj.edges.push_back({std::min(a, b), std::max(a, b), {}});
      adj.edges[it->second].faces.push_back(static_cast<int>(f));
      adj.face_edges[f][i] = it->second;
    }
  }
  if (strict) {
    std::vector<std::pair<int, int>> bad;
    for (const auto& e : adj.edges) {
      if (e.faces.size() > 2) bad.emplace_back(e.v0, e.v1);
    }
    if (!bad.empty()) {
      std::string msg = "non-manifold edges:";
      for (std::size_t i = 0; i < bad.size() && i < 16; ++i) {
        msg += " (" + std::to_string(bad[i].first) + "," + std::to_string(bad[i].second) + ")";
      }
      if (bad.size() > 16) msg += " ...";
      throw NonManifoldError(msg, std::move(bad));
    }
  }
  adj.face_neighbors.resize(mesh.faces.size());
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    auto& nb = adj.face_neighbors[f];
    for (int e : adj.face_edges[f]) {
      for (int g : adj.edges[e].faces) {
        if (g != static_cast<int>(f)) nb.push_back(g);
      }
    }
    std::sort(nb.begin(), nb.end());
    nb.erase(std::unique(nb.begin(), nb.end()), nb.end());
  }
  adj.vertex_rings.resize(mesh.vertices.size());
  for (const auto& e : adj.edges) {
    adj.vertex_rings[e.v0].push_back(e.v1);
    adj.vertex_rings[e.v1].push_back(e.v0);
  }
  for (auto& ring : adj.vertex_rings) std::sort(ring.begin(), ring.end());
  return adj;
}

// ---------------------------------------------------------------------------
// Geometry

struct FaceGeometry {
  std::vector<Vec3> centroids;
  std::vector<Vec3> normals;  // unit, following winding order
  std::vector<double> areas;
  std::vector<bool> degenerate;
  double total_area = 0;
};

inline Vec3 face_normal_unnormalized(const Mesh& mesh, const Face& f) {
  const Vec3& a = mesh.vertices[f[0]];
  return (mesh.vertices[f[1]] - a).cross(mesh.vertices[f[2]] - a);
}

inline FaceGeometry face_geometry(const Mesh& mesh) {
  FaceGeometry g;
  const std::size_t n = mesh.faces.size();
  g.centroids.resize(n);
  g.normals.resize(n);
  g.areas.resize(n);
  g.degenerate.assign(n, false);
  std::size_t flagged = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& f = mesh.faces[i];
    g.centroids[i] = (mesh.vertices[f[0]] + mesh.vertices[f[1]] + mesh.vertices[f[2]]) / 3.0;
    const Vec3 c = face_normal_unnormalized(mesh, f);
    const double len = c.norm();
    g.areas[i] = 0.5 * len;
    if (!(len > 0) || !std::isfinite(len)) {
      g.degenerate[i] = true;
      g.normals[i] = Vec3::Zero();
      g.areas[i] = 0;
      ++flagged;
    } else {
      g.normals[i] = c / len;
    }
    g.total_area += g.areas[i];
  }
  if (flagged) spdlog::warn("{} zero-area face(s) flagged", flagged);
  return g;
}

/// Angle between the two face planes at an interior edge, measured outside the
/// surface: pi when coplanar, below pi on convex edges, above pi on concave ones.
inline double dihedral_angle(const Mesh& mesh, const Adjacency& adj, int a, int b) {
  const int e = adj.find_edge(a, b);
  if (e < 0) throw DomainError("edge (" + std::to_string(a) + "," + std::to_string(b) + ") not in mesh");
  const auto& faces = adj.edges[e].faces;
  if (faces.size() != 2) {
    throw DomainError("edge (" + std::to_string(a) + "," + std::to_string(b) + ") has " +
                      std::to_string(faces.size()) + " incident face(s); need 2");
  }
  const Face& f1 = mesh.faces[faces[0]];
  const Face& f2 = mesh.faces[faces[1]];
  const Vec3 n1 = face_normal_unnormalized(mesh, f1).normalized();
  const Vec3 n2 = face_normal_unnormalized(mesh, f2).normalized();
  const double phi = std::atan2(n1.cross(n2).norm(), n1.dot(n2));
  int opposite = f2[0];
  for (int v : f2) {
    if (v != a && v != b) opposite = v;
  }
  const double side = n1.dot(mesh.vertices[opposite] - mesh.vertices[a]);
  return side > 0 ? std::numbers::pi + phi : std::numbers::pi - phi;
}

inline double dihedral_angle(const Mesh& mesh, const Adjacency& adj, int edge_index) {
  const auto& e = adj.edges[edge_index];
  return dihedral_angle(mesh, adj, e.v0, e.v1);
}

/// Faces reachable through shared edges, as connected-component ids per face.
inline std::vector<int> face_components(const Adjacency& adj, int* count = nullptr) {
  const std::size_t n = adj.face_neighbors.size();
  std::vector<int> comp(n, -1);
  std::vector<int> stack;
  int c = 0;
  for (std::size_t s = 0; s < n; ++s) {
    if (comp[s] >= 0) continue;
    comp[s] = c;
    stack.push_back(static_cast<int>(s));
    while (!stack.empty()) {
      const int f = stack.back();
      stack.pop_back();
      for (int g : adj.face_neighbors[f]) {
        if (comp[g] < 0) {
          comp[g] = c;
          stack.push_back(g);
        }
      }
    }
    ++c;
  }
  if (count) *count = c;
  return comp;
}

struct ManifoldReport {
  bool is_closed = false;
  std::size_t boundary_edge_count = 0;
  std::size_t non_manifold_edge_count = 0;
  long euler_characteristic = 0;
  std::size_t vertex_count = 0;  // referenced vertices only
  std::size_t edge_count = 0;
  std::size_t face_count = 0;
  std::size_t component_count = 0;

  /// Genus of a closed, connected surface; -1 otherwise.
  long genus() const {
    if (!is_closed || component_count != 1) return -1;
    return (2 - euler_characteristic) / 2;
  }
};

inline ManifoldReport validate_manifold(const Mesh& mesh, const Adjacency& adj) {
  ManifoldReport r;
  std::vector<char> used(mesh.vertices.size(), 0);
  for (const auto& f : mesh.faces) {
    for (int v : f) used[v] = 1;
  }
  r.vertex_count = static_cast<std::size_t>(std::count(used.begin(), used.end(), 1));
  r.edge_count = adj.edges.size();
  r.face_count = mesh.faces.size();
  for (const auto& e : adj.edges) {
    if (e.faces.size() == 1) ++r.boundary_edge_count;
    if (e.faces.size() > 2) ++r.non_manifold_edge_count;
  }
  r.euler_characteristic = static_cast<long>(r.vertex_count) - static_cast<long>(r.edge_count) +
                           static_cast<long>(r.face_count);
  r.is_closed = r.boundary_edge_count == 0 && r.non_manifold_edge_count == 0 && r.face_count > 0;

  int components = 0;
  face_components(adj, &components);
  r.component_count = static_cast<std::size_t>(components);
  return r;
}

/// Copies the listed faces into a compact mesh. `vertex_map[i]` gives the
/// parent vertex of sub-mesh vertex i.
struct SubMesh {
  Mesh mesh;
  std::vector<int> vertex_map;
  std::vector<int> face_map;
};

inline SubMesh extract_submesh(const Mesh& mesh, std::span<const int> faces) {
  SubMesh sub;
  std::vector<int> remap(mesh.vertices.size(), -1);
  sub.face_map.assign(faces.begin(), faces.end());
  sub.mesh.faces.reserve(faces.size());
  for (int f : faces) {
    Face out{};
    for (int k = 0; k < 3; ++k) {
      const int v = mesh.faces[f][k];
      if (remap[v] < 0) {
        remap[v] = static_cast<int>(sub.mesh.vertices.size());
        sub.mesh.vertices.push_back(mesh.vertices[v]);
        sub.vertex_map.push_back(v);
      }
      out[k] = remap[v];
    }
    sub.mesh.faces.push_back(out);
  }
  return sub;
}

}  // namespace nshdf
