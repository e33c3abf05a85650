#pragma once

// ASCII PLY and whitespace-separated XYZ[+label] readers and writers.
// Numbers are printed in shortest round-trip form, so save→load is bit-exact.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "fkaconv/checkpoint.hpp"
#include "fkaconv/error.hpp"
#include "fkaconv/geometry.hpp"

namespace fkac {

enum class CloudFormat { kPly, kXyz };

using WarningSink = std::function<void(const std::string&)>;

inline void warn_to_stderr(const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }

inline std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t j = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > j) out.push_back(line.substr(j, i - j));
  }
  return out;
}

inline double parse_double(std::string_view tok, std::size_t line) {
  double v = 0;
  if (!tok.empty() && tok.front() == '+') tok.remove_prefix(1);
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size())
    throw ParseError("invalid number '" + std::string(tok) + "'", line);
  return v;
}

inline int parse_int(std::string_view tok, std::size_t line) {
  const double v = parse_double(tok, line);
  if (v != std::floor(v)) throw ParseError("label '" + std::string(tok) + "' is not an integer", line);
  return static_cast<int>(v);
}

}  // namespace detail

/// Parses ASCII PLY. Vertex properties x, y, z are required; red/green/blue and
/// feat_* become feature channels; label/scalar_label/class become labels.
/// Other properties are skipped with a warning.
inline PointCloud parse_ply(std::istream& is, const WarningSink& warn = warn_to_stderr) {
  std::string line;
  std::size_t lineno = 0;
  auto next = [&]() -> bool {
    if (!std::getline(is, line)) return false;
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  };
  if (!next() || line != "ply") throw ParseError("missing 'ply' magic", lineno);

  enum class Role { kIgnore, kX, kY, kZ, kFeature, kLabel };
  std::vector<Role> roles;
  std::size_t n_vertex = 0;
  bool in_vertex = false, seen_vertex = false, ascii = false, vertex_first = false;
  bool header_done = false;
  while (next()) {
    const auto tok = detail::split_ws(line);
    if (tok.empty()) continue;
    if (tok[0] == "end_header") {
      header_done = true;
      break;
    }
    if (tok[0] == "comment" || tok[0] == "obj_info") continue;
    if (tok[0] == "format") {
      if (tok.size() < 2 || tok[1] != "ascii") throw ParseError("only ASCII PLY is supported", lineno);
      ascii = true;
    } else if (tok[0] == "element") {
      if (tok.size() != 3) throw ParseError("malformed element line", lineno);
      in_vertex = tok[1] == "vertex";
      if (in_vertex) {
        vertex_first = !seen_vertex && roles.empty();
        seen_vertex = true;
        n_vertex = static_cast<std::size_t>(detail::parse_int(tok[2], lineno));
      } else if (!seen_vertex) {
        throw ParseError("elements before 'vertex' are not supported", lineno);
      }
    } else if (tok[0] == "property") {
      if (!in_vertex) continue;
      if (tok.size() < 3 || tok[1] == "list") throw ParseError("unsupported vertex property", lineno);
      const auto name = tok[2];
      Role r = Role::kIgnore;
      if (name == "x") r = Role::kX;
      else if (name == "y") r = Role::kY;
      else if (name == "z") r = Role::kZ;
      else if (name == "red" || name == "green" || name == "blue" || name.starts_with("feat_")) r = Role::kFeature;
      else if (name == "label" || name == "scalar_label" || name == "class") r = Role::kLabel;
      else warn("ignoring unknown PLY vertex property '" + std::string(name) + "'");
      roles.push_back(r);
    } else {
      throw ParseError("unexpected header keyword '" + std::string(tok[0]) + "'", lineno);
    }
  }
  if (!header_done) throw ParseError("missing end_header", lineno);
  if (!ascii) throw ParseError("missing format line", lineno);
  if (!seen_vertex || !vertex_first) throw ParseError("no vertex element", lineno);
  auto count = [&](Role r) { return static_cast<std::size_t>(std::count(roles.begin(), roles.end(), r)); };
  if (count(Role::kX) != 1 || count(Role::kY) != 1 || count(Role::kZ) != 1)
    throw ParseError("vertex element needs exactly one x, y and z property", lineno);

  PointCloud cloud;
  cloud.feature_dim = count(Role::kFeature);
  const bool labelled = count(Role::kLabel) > 0;
  cloud.coords.reserve(n_vertex);
  for (std::size_t v = 0; v < n_vertex; ++v) {
    if (!next()) throw ParseError("file ends before all vertices were read", lineno + 1);
    const auto tok = detail::split_ws(line);
    if (tok.size() < roles.size()) throw ParseError("vertex row has too few values", lineno);
    Vec3 p{};
    int label = 0;
    for (std::size_t j = 0; j < roles.size(); ++j) {
      switch (roles[j]) {
        case Role::kX: p[0] = detail::parse_double(tok[j], lineno); break;
        case Role::kY: p[1] = detail::parse_double(tok[j], lineno); break;
        case Role::kZ: p[2] = detail::parse_double(tok[j], lineno); break;
        case Role::kFeature: cloud.features.push_back(detail::parse_double(tok[j], lineno)); break;
        case Role::kLabel: label = detail::parse_int(tok[j], lineno); break;
        case Role::kIgnore: break;
      }
    }
    cloud.coords.push_back(p);
    if (labelled) cloud.labels.push_back(label);
  }
  cloud.validate();
  return cloud;
}

inline std::string format_ply(const PointCloud& cloud) {
  std::ostringstream os;
  os << "ply\nformat ascii 1.0\nelement vertex " << cloud.size() << "\n";
  os << "property double x\nproperty double y\nproperty double z\n";
  for (std::size_t f = 0; f < cloud.feature_dim; ++f) os << "property double feat_" << f << "\n";
  if (cloud.has_labels()) os << "property int label\n";
  os << "end_header\n";
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    os << format_number(cloud.coords[i][0]) << ' ' << format_number(cloud.coords[i][1]) << ' '
       << format_number(cloud.coords[i][2]);
    for (std::size_t f = 0; f < cloud.feature_dim; ++f)
      os << ' ' << format_number(cloud.features[i * cloud.feature_dim + f]);
    if (cloud.has_labels()) os << ' ' << cloud.labels[i];
    os << '\n';
  }
  return os.str();
}

/// One point per line: "x y z" or "x y z label". Blank lines and '#' comments are skipped.
inline PointCloud parse_xyz(std::istream& is, bool with_labels) {
  PointCloud cloud;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto tok = detail::split_ws(line);
    if (tok.empty() || tok[0].starts_with('#')) continue;
    const std::size_t need = with_labels ? 4 : 3;
    if (tok.size() < need)
      throw ParseError("expected " + std::to_string(need) + " values, found " + std::to_string(tok.size()), lineno);
    cloud.coords.push_back({detail::parse_double(tok[0], lineno), detail::parse_double(tok[1], lineno),
                            detail::parse_double(tok[2], lineno)});
    if (with_labels) cloud.labels.push_back(detail::parse_int(tok[3], lineno));
  }
  cloud.validate();
  return cloud;
}

inline std::string format_xyz(const PointCloud& cloud) {
  std::ostringstream os;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    os << format_number(cloud.coords[i][0]) << ' ' << format_number(cloud.coords[i][1]) << ' '
       << format_number(cloud.coords[i][2]);
    if (cloud.has_labels()) os << ' ' << cloud.labels[i];
    os << '\n';
  }
  return os.str();
}

inline CloudFormat format_from_path(const std::filesystem::path& path) {
  return path.extension() == ".ply" ? CloudFormat::kPly : CloudFormat::kXyz;
}

inline PointCloud load_cloud(const std::filesystem::path& path, CloudFormat format, bool with_labels = false,
                             const WarningSink& warn = warn_to_stderr) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open " + path.string());
  return format == CloudFormat::kPly ? parse_ply(is, warn) : parse_xyz(is, with_labels);
}

inline void save_cloud(const std::filesystem::path& path, const PointCloud& cloud, CloudFormat format) {
  write_file_atomic(path, format == CloudFormat::kPly ? format_ply(cloud) : format_xyz(cloud));
}

}  // namespace fkac
