#pragma once

// Synthetic shapes, depth-buffer partial views, attack-pair manifests and the
// ASCII point-cloud formats.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pointca/metrics.hpp"
#include "pointca/point_cloud.hpp"

namespace pointca {

enum class ShapeClass { sphere = 0, box = 1, cylinder = 2, plane = 3 };
inline constexpr std::size_t kShapeClassCount = 4;

inline const char* to_string(ShapeClass c) {
  switch (c) {
    case ShapeClass::sphere: return "sphere";
    case ShapeClass::box: return "box";
    case ShapeClass::cylinder: return "cylinder";
    case ShapeClass::plane: return "plane";
  }
  return "sphere";
}

inline ShapeClass shape_class_from_string(const std::string& s) {
  for (std::size_t c = 0; c < kShapeClassCount; ++c) {
    if (s == to_string(static_cast<ShapeClass>(c))) return static_cast<ShapeClass>(c);
  }
  throw Error(Errc::InvalidSpec, "unknown shape class '" + s + "'");
}

/// Derives an independent stream seed from a base seed and a tuple of indices.
inline std::uint64_t mix_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> parts) {
  auto splitmix = [](std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  };
  std::uint64_t h = splitmix(seed);
  for (auto p : parts) h = splitmix(h ^ splitmix(p));
  return h;
}

// ---------------------------------------------------------------------------
// Shapes

/// Surface shape; the largest half-extent equals `scale`, the others are
/// scaled by `aspect` relative to the largest aspect component.
struct ShapeSpec {
  ShapeClass cls = ShapeClass::sphere;
  double scale = 0.35;
  Vec3 aspect{1.0, 1.0, 1.0};
  std::size_t sample_count = 1024;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(scale > 0.0 && scale <= 1.0)) throw Error(Errc::InvalidSpec, "scale must lie in (0, 1]");
    for (double a : aspect) {
      if (!(a > 0.0 && a <= 1.0)) throw Error(Errc::InvalidSpec, "aspect components must lie in (0, 1]");
    }
    if (sample_count == 0) throw Error(Errc::InvalidSpec, "sample_count must be positive");
  }

  Vec3 half_extents() const {
    const double amax = std::max({aspect[0], aspect[1], aspect[2]});
    return {scale * aspect[0] / amax, scale * aspect[1] / amax, scale * aspect[2] / amax};
  }
};

inline constexpr double kDefaultMinScale = 0.25;
inline constexpr double kDefaultMaxScale = 0.4;

inline ShapeSpec random_shape_spec(ShapeClass cls, std::uint64_t seed, std::size_t sample_count = 1024,
                                   double min_scale = kDefaultMinScale, double max_scale = kDefaultMaxScale) {
  if (!(min_scale > 0.0 && min_scale <= max_scale && max_scale <= 1.0)) {
    throw Error(Errc::InvalidSpec, "scale range must satisfy 0 < min <= max <= 1");
  }
  std::mt19937_64 rng(mix_seed(seed, {0x5eed}));
  std::uniform_real_distribution<double> scale(min_scale, max_scale);
  std::uniform_real_distribution<double> aspect(0.5, 1.0);
  ShapeSpec s;
  s.cls = cls;
  s.scale = scale(rng);
  s.aspect = {aspect(rng), aspect(rng), aspect(rng)};
  s.sample_count = sample_count;
  s.seed = seed;
  return s;
}

/// Uniform samples on the shape surface, centered at the origin.
inline PointCloud generate_shape(const ShapeSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto sym = [&](double h) { return h * (2.0 * u01(rng) - 1.0); };
  const Vec3 h = spec.half_extents();
  std::vector<Vec3> pts;
  pts.reserve(spec.sample_count);

  switch (spec.cls) {
    case ShapeClass::sphere:
      while (pts.size() < spec.sample_count) {
        Vec3 v{gauss(rng), gauss(rng), gauss(rng)};
        const double n = norm(v);
        if (n < 1e-12) continue;
        pts.push_back(v * (spec.scale / n));
      }
      break;
    case ShapeClass::box: {
      const double ax = h[1] * h[2], ay = h[0] * h[2], az = h[0] * h[1];
      const double total = ax + ay + az;
      while (pts.size() < spec.sample_count) {
        const double pick = u01(rng) * total;
        const double side = u01(rng) < 0.5 ? -1.0 : 1.0;
        if (pick < ax) {
          pts.push_back({side * h[0], sym(h[1]), sym(h[2])});
        } else if (pick < ax + ay) {
          pts.push_back({sym(h[0]), side * h[1], sym(h[2])});
        } else {
          pts.push_back({sym(h[0]), sym(h[1]), side * h[2]});
        }
      }
      break;
    }
    case ShapeClass::cylinder: {
      // Axis along z; radius from the x aspect, half-height from the z aspect.
      const double r = h[0];
      const double hh = h[2];
      const double lateral = 2.0 * std::numbers::pi * r * 2.0 * hh;
      const double caps = 2.0 * std::numbers::pi * r * r;
      while (pts.size() < spec.sample_count) {
        if (u01(rng) * (lateral + caps) < lateral) {
          const double a = 2.0 * std::numbers::pi * u01(rng);
          pts.push_back({r * std::cos(a), r * std::sin(a), sym(hh)});
        } else {
          const double a = 2.0 * std::numbers::pi * u01(rng);
          const double rr = r * std::sqrt(u01(rng));
          pts.push_back({rr * std::cos(a), rr * std::sin(a), u01(rng) < 0.5 ? -hh : hh});
        }
      }
      break;
    }
    case ShapeClass::plane:
      while (pts.size() < spec.sample_count) pts.push_back({sym(h[0]), sym(h[1]), 0.0});
      break;
  }
  return PointCloud(std::move(pts), CloudKind::complete, static_cast<int>(spec.cls));
}

// ---------------------------------------------------------------------------
// Partial views

struct RenderConfig {
  std::size_t raster = 64;
  /// Points within this depth of the nearest surface in their pixel stay visible.
  double depth_tolerance = 0.03;
};

/// Depth-buffer culling from a pinhole camera at `viewpoint` looking at the
/// origin, followed by resampling to exactly m points.
inline PointCloud render_partial(const PointCloud& complete, const Vec3& viewpoint, std::size_t m, std::uint64_t seed,
                                 const RenderConfig& cfg = {}) {
  if (!(norm(viewpoint) > 1.0)) throw Error(Errc::InvalidViewpoint, "viewpoint must lie outside the unit ball");
  if (complete.size() < m || m == 0) {
    throw Error(Errc::TooFewPoints, "need at least m=" + std::to_string(m) + " points to render a partial view");
  }
  if (cfg.raster == 0) throw Error(Errc::InvalidParam, "raster must be positive");

  const Vec3 forward = viewpoint * (-1.0 / norm(viewpoint));
  Vec3 up{0.0, 0.0, 1.0};
  if (std::abs(dot(up, forward)) > 0.99) up = {0.0, 1.0, 0.0};
  Vec3 right = cross(forward, up);
  right = right * (1.0 / norm(right));
  const Vec3 cam_up = cross(right, forward);

  // Fixed intrinsics: the raster spans the cone tangent to the unit ball, so
  // pixel size depends on the camera, not on the object.
  const double half_fov = 1.0 / std::sqrt(dot(viewpoint, viewpoint) - 1.0);
  const std::size_t n = complete.size();
  std::vector<double> px(n), py(n), depth(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 rel = complete[i] - viewpoint;
    depth[i] = dot(rel, forward);
    px[i] = dot(rel, right) / depth[i];
    py[i] = dot(rel, cam_up) / depth[i];
  }
  const auto R = cfg.raster;
  auto pixel_of = [&](std::size_t i) {
    auto cell = [&](double v) {
      const double f = std::floor((v + half_fov) / (2.0 * half_fov) * static_cast<double>(R));
      return static_cast<std::size_t>(std::clamp(f, 0.0, static_cast<double>(R - 1)));
    };
    return cell(py[i]) * R + cell(px[i]);
  };
  std::vector<double> zbuf(R * R, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i) {
    auto& z = zbuf[pixel_of(i)];
    z = std::min(z, depth[i]);
  }
  std::vector<std::size_t> visible;
  for (std::size_t i = 0; i < n; ++i) {
    if (depth[i] <= zbuf[pixel_of(i)] + cfg.depth_tolerance) visible.push_back(i);
  }

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> chosen;
  if (visible.size() >= m) {
    std::shuffle(visible.begin(), visible.end(), rng);
    chosen.assign(visible.begin(), visible.begin() + static_cast<std::ptrdiff_t>(m));
    std::sort(chosen.begin(), chosen.end());
  } else {
    chosen = visible;
    std::uniform_int_distribution<std::size_t> pick(0, visible.size() - 1);
    while (chosen.size() < m) chosen.push_back(visible[pick(rng)]);
  }
  std::vector<Vec3> pts;
  pts.reserve(m);
  for (auto i : chosen) pts.push_back(complete[i]);
  return PointCloud(std::move(pts), CloudKind::partial, complete.label);
}

/// Number of distinct points a viewpoint sees before resampling.
inline std::size_t visible_count(const PointCloud& complete, const Vec3& viewpoint, const RenderConfig& cfg = {}) {
  const auto all = render_partial(complete, viewpoint, complete.size(), 0, cfg);
  std::vector<Vec3> pts = all.points;
  std::sort(pts.begin(), pts.end());
  return static_cast<std::size_t>(std::unique(pts.begin(), pts.end()) - pts.begin());
}

inline Vec3 random_viewpoint(std::mt19937_64& rng, double distance) {
  std::normal_distribution<double> g(0.0, 1.0);
  Vec3 v{g(rng), g(rng), g(rng)};
  while (norm(v) < 1e-9) v = {g(rng), g(rng), g(rng)};
  return v * (distance / norm(v));
}

// ---------------------------------------------------------------------------
// Point-cloud files

inline std::string format_coord(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

/// Rounds coordinates to what the ASCII formats store, so in-memory clouds
/// and their files agree exactly.
inline void quantize(PointCloud& cloud) {
  for (auto& p : cloud.points) {
    for (double& c : p) c = std::strtod(format_coord(c).c_str(), nullptr);
  }
}

namespace detail {

inline bool parse_doubles(const std::string& line, std::vector<double>& out) {
  out.clear();
  const char* s = line.c_str();
  while (true) {
    while (*s == ' ' || *s == '\t' || *s == '\r' || *s == ',') ++s;
    if (*s == '\0') return true;
    char* end = nullptr;
    const double v = std::strtod(s, &end);
    if (end == s || !std::isfinite(v)) return false;
    out.push_back(v);
    s = end;
  }
}

}  // namespace detail

inline void write_xyz(const PointCloud& cloud, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::IoError, "cannot write " + path);
  for (const auto& p : cloud.points) out << format_coord(p[0]) << ' ' << format_coord(p[1]) << ' ' << format_coord(p[2]) << '\n';
  if (!out) throw Error(Errc::IoError, "failed writing " + path);
}

inline PointCloud read_xyz(const std::string& path, CloudKind kind = CloudKind::partial) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoError, "cannot read " + path);
  std::vector<Vec3> pts;
  std::string line;
  std::vector<double> vals;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    if (!detail::parse_doubles(line, vals) || vals.size() != 3) {
      throw Error(Errc::ParseError, path + ":" + std::to_string(lineno) + ": expected 'x y z'");
    }
    pts.push_back({vals[0], vals[1], vals[2]});
  }
  if (pts.empty()) throw Error(Errc::ParseError, path + ": no points");
  return PointCloud(std::move(pts), kind);
}

inline void write_ply(const PointCloud& cloud, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::IoError, "cannot write " + path);
  out << "ply\nformat ascii 1.0\nelement vertex " << cloud.size()
      << "\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
  for (const auto& p : cloud.points) out << format_coord(p[0]) << ' ' << format_coord(p[1]) << ' ' << format_coord(p[2]) << '\n';
  if (!out) throw Error(Errc::IoError, "failed writing " + path);
}

/// ASCII PLY reader. Extra vertex properties and later elements are ignored.
inline PointCloud read_ply(const std::string& path, CloudKind kind = CloudKind::partial) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoError, "cannot read " + path);
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& why) {
    throw Error(Errc::ParseError, path + ":" + std::to_string(lineno) + ": " + why);
  };
  if (!std::getline(in, line) || (++lineno, line.rfind("ply", 0) != 0)) fail("missing 'ply' magic");
  std::size_t vertex_count = 0;
  bool in_vertex = false, seen_vertex = false, ascii = false;
  std::vector<std::string> props;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ss(line);
    std::string word;
    ss >> word;
    if (word == "format") {
      std::string fmt;
      ss >> fmt;
      if (fmt != "ascii") fail("binary PLY is not supported, convert to ASCII");
      ascii = true;
    } else if (word == "element") {
      std::string name;
      ss >> name;
      in_vertex = name == "vertex";
      if (in_vertex) {
        if (!(ss >> vertex_count)) fail("bad vertex count");
        seen_vertex = true;
      }
    } else if (word == "property") {
      std::string type, name;
      ss >> type >> name;
      if (type == "list") fail("list properties are not supported");
      if (in_vertex) props.push_back(name);
    } else if (word == "end_header") {
      break;
    } else if (word != "comment" && word != "obj_info" && !word.empty()) {
      fail("unexpected header line");
    }
  }
  if (!ascii) fail("missing format line");
  if (!seen_vertex) fail("no vertex element");
  const auto idx = [&](const char* n) {
    const auto it = std::find(props.begin(), props.end(), n);
    if (it == props.end()) fail(std::string("vertex element lacks property ") + n);
    return static_cast<std::size_t>(it - props.begin());
  };
  const std::size_t ix = idx("x"), iy = idx("y"), iz = idx("z");
  std::vector<Vec3> pts;
  pts.reserve(vertex_count);
  std::vector<double> vals;
  while (pts.size() < vertex_count) {
    if (!std::getline(in, line)) {
      ++lineno;
      fail("expected " + std::to_string(vertex_count) + " vertices, got " + std::to_string(pts.size()));
    }
    ++lineno;
    if (!detail::parse_doubles(line, vals) || vals.size() != props.size()) fail("malformed vertex line");
    pts.push_back({vals[ix], vals[iy], vals[iz]});
  }
  if (pts.empty()) fail("no points");
  return PointCloud(std::move(pts), kind);
}

/// Chooses the reader by extension (.ply, otherwise XYZ).
inline PointCloud read_cloud(const std::string& path, CloudKind kind = CloudKind::partial) {
  return std::filesystem::path(path).extension() == ".ply" ? read_ply(path, kind) : read_xyz(path, kind);
}

// ---------------------------------------------------------------------------
// Datasets

struct DatasetConfig {
  std::size_t objects_per_class = 30;
  std::size_t test_objects_per_class = 10;
  std::size_t views_per_object = 4;
  std::size_t complete_points = 1024;
  std::size_t partial_points = 256;
  std::size_t raster = 64;
  double depth_tolerance = 0.03;
  double view_distance = 4.0;
  double min_scale = kDefaultMinScale;
  double max_scale = kDefaultMaxScale;
  std::uint64_t seed = 2024;

  void validate() const {
    if (objects_per_class == 0 || views_per_object == 0 || test_objects_per_class > objects_per_class) {
      throw Error(Errc::InvalidConfig, "dataset needs objects, views, and test_objects_per_class <= objects_per_class");
    }
    if (partial_points == 0 || complete_points < partial_points) {
      throw Error(Errc::InvalidConfig, "need 0 < partial_points <= complete_points");
    }
    if (!(view_distance > 1.0)) throw Error(Errc::InvalidConfig, "view_distance must exceed 1");
    if (!(min_scale > 0.0 && min_scale <= max_scale && max_scale <= 1.0)) {
      throw Error(Errc::InvalidConfig, "scale range must satisfy 0 < min_scale <= max_scale <= 1");
    }
  }
};

struct DatasetObject {
  std::string id;
  ShapeClass cls = ShapeClass::sphere;
  std::size_t index = 0;
  bool test = false;
  ShapeSpec spec;
  PointCloud gt;
  std::vector<Vec3> viewpoints;
  std::vector<PointCloud> partials;

  std::string gt_path() const { return "clouds/" + id + "/gt.xyz"; }
  std::string partial_path(std::size_t v) const { return "clouds/" + id + "/partial_" + std::to_string(v) + ".xyz"; }
};

struct Dataset {
  DatasetConfig config;
  std::vector<DatasetObject> objects;

  const DatasetObject& object(const std::string& id) const {
    for (const auto& o : objects) {
      if (o.id == id) return o;
    }
    throw Error(Errc::InvalidParam, "dataset has no object '" + id + "'");
  }
};

inline Dataset generate_dataset(const DatasetConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.config = cfg;
  const RenderConfig render{cfg.raster, cfg.depth_tolerance};
  for (std::size_t c = 0; c < kShapeClassCount; ++c) {
    for (std::size_t i = 0; i < cfg.objects_per_class; ++i) {
      DatasetObject o;
      o.cls = static_cast<ShapeClass>(c);
      o.index = i;
      char id[64];
      std::snprintf(id, sizeof(id), "%s_%03zu", to_string(o.cls), i);
      o.id = id;
      o.test = i >= cfg.objects_per_class - cfg.test_objects_per_class;
      o.spec = random_shape_spec(o.cls, mix_seed(cfg.seed, {c, i}), cfg.complete_points, cfg.min_scale, cfg.max_scale);
      o.gt = generate_shape(o.spec);
      quantize(o.gt);
      std::mt19937_64 view_rng(mix_seed(cfg.seed, {c, i, 0x7e7}));
      for (std::size_t v = 0; v < cfg.views_per_object; ++v) {
        o.viewpoints.push_back(random_viewpoint(view_rng, cfg.view_distance));
        o.partials.push_back(
            render_partial(o.gt, o.viewpoints.back(), cfg.partial_points, mix_seed(cfg.seed, {c, i, v}), render));
      }
      ds.objects.push_back(std::move(o));
    }
  }
  return ds;
}

inline void to_json(nlohmann::json& j, const DatasetConfig& c) {
  j = nlohmann::json{{"objects_per_class", c.objects_per_class},
                     {"test_objects_per_class", c.test_objects_per_class},
                     {"views_per_object", c.views_per_object},
                     {"complete_points", c.complete_points},
                     {"partial_points", c.partial_points},
                     {"raster", c.raster},
                     {"depth_tolerance", c.depth_tolerance},
                     {"view_distance", c.view_distance},
                     {"min_scale", c.min_scale},
                     {"max_scale", c.max_scale},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, DatasetConfig& c) {
  j.at("objects_per_class").get_to(c.objects_per_class);
  j.at("test_objects_per_class").get_to(c.test_objects_per_class);
  j.at("views_per_object").get_to(c.views_per_object);
  j.at("complete_points").get_to(c.complete_points);
  j.at("partial_points").get_to(c.partial_points);
  j.at("raster").get_to(c.raster);
  j.at("depth_tolerance").get_to(c.depth_tolerance);
  j.at("view_distance").get_to(c.view_distance);
  j.at("min_scale").get_to(c.min_scale);
  j.at("max_scale").get_to(c.max_scale);
  j.at("seed").get_to(c.seed);
}

inline void write_json_file(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::IoError, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoError, "cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ParseError, path.string() + ": " + e.what());
  }
}

/// Layout: dataset.json index plus clouds/<object>/{gt,partial_<v>}.xyz.
inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json index;
  index["version"] = 1;
  index["config"] = ds.config;
  index["objects"] = nlohmann::json::array();
  for (const auto& o : ds.objects) {
    std::filesystem::create_directories(dir / "clouds" / o.id);
    write_xyz(o.gt, (dir / o.gt_path()).string());
    nlohmann::json jo{{"id", o.id},
                      {"class", to_string(o.cls)},
                      {"index", o.index},
                      {"split", o.test ? "test" : "train"},
                      {"scale", o.spec.scale},
                      {"aspect", o.spec.aspect},
                      {"gt", o.gt_path()},
                      {"partials", nlohmann::json::array()},
                      {"viewpoints", nlohmann::json::array()}};
    for (std::size_t v = 0; v < o.partials.size(); ++v) {
      write_xyz(o.partials[v], (dir / o.partial_path(v)).string());
      jo["partials"].push_back(o.partial_path(v));
      jo["viewpoints"].push_back(o.viewpoints[v]);
    }
    index["objects"].push_back(std::move(jo));
  }
  write_json_file(index, dir / "dataset.json");
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  const auto index = read_json_file(dir / "dataset.json");
  Dataset ds;
  try {
    if (index.at("version").get<int>() != 1) throw Error(Errc::VersionMismatch, "unsupported dataset.json version");
    ds.config = index.at("config").get<DatasetConfig>();
    for (const auto& jo : index.at("objects")) {
      DatasetObject o;
      o.id = jo.at("id").get<std::string>();
      o.cls = shape_class_from_string(jo.at("class").get<std::string>());
      o.index = jo.at("index").get<std::size_t>();
      o.test = jo.at("split").get<std::string>() == "test";
      o.spec.cls = o.cls;
      o.spec.scale = jo.at("scale").get<double>();
      o.spec.aspect = jo.at("aspect").get<Vec3>();
      o.gt = read_xyz((dir / jo.at("gt").get<std::string>()).string(), CloudKind::complete);
      o.gt.label = static_cast<int>(o.cls);
      for (const auto& p : jo.at("partials")) {
        o.partials.push_back(read_xyz((dir / p.get<std::string>()).string(), CloudKind::partial));
        o.partials.back().label = static_cast<int>(o.cls);
      }
      for (const auto& v : jo.at("viewpoints")) o.viewpoints.push_back(v.get<Vec3>());
      ds.objects.push_back(std::move(o));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ParseError, (dir / "dataset.json").string() + ": " + e.what());
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Attack pairs

struct PairEntry {
  std::string pair_id;
  std::string source_object;
  std::size_t source_view = 0;
  std::string target_object;
  std::size_t target_view = 0;
  std::string source_partial_path;
  std::string source_gt_path;
  std::string target_partial_path;
  std::string target_gt_path;
  std::string source_class;
  std::string target_class;
  std::size_t target_rank = 0;       // 0 = CD-P nearest target within its class
  double source_target_cd = 0.0;     // CD-P between the two ground truths
  std::optional<double> t_nre_denominator;  // d(f(Y^P), Y)
  std::optional<double> s_nre_denominator;  // d(f(X^P), X)
};

struct PairManifest {
  std::size_t sources_per_class = 0;
  std::size_t targets_top_n = 0;
  std::uint64_t seed = 0;
  std::vector<PairEntry> entries;
};

/// For each class, samples source objects from the test split; for each other
/// class, pairs every source with the top-N test objects whose ground truths
/// are CD-P nearest to the source ground truth.
inline PairManifest build_pair_manifest(const Dataset& ds, std::size_t sources_per_class, std::size_t targets_top_n,
                                        std::uint64_t seed) {
  std::vector<std::vector<const DatasetObject*>> by_class(kShapeClassCount);
  for (const auto& o : ds.objects) {
    if (o.test) by_class[static_cast<std::size_t>(o.cls)].push_back(&o);
  }
  const auto populated = std::count_if(by_class.begin(), by_class.end(), [](const auto& v) { return !v.empty(); });
  if (populated < 2) throw Error(Errc::TooFewClasses, "pairing needs test objects from at least two classes");
  if (targets_top_n == 0 || sources_per_class == 0) throw Error(Errc::InvalidConfig, "pair counts must be positive");

  PairManifest manifest;
  manifest.sources_per_class = sources_per_class;
  manifest.targets_top_n = targets_top_n;
  manifest.seed = seed;
  std::mt19937_64 rng(mix_seed(seed, {0xa11}));
  std::size_t next_id = 0;
  for (std::size_t c = 0; c < kShapeClassCount; ++c) {
    auto sources = by_class[c];
    std::shuffle(sources.begin(), sources.end(), rng);
    sources.resize(std::min(sources.size(), sources_per_class));
    std::sort(sources.begin(), sources.end(), [](auto* a, auto* b) { return a->index < b->index; });
    for (const auto* src : sources) {
      const std::size_t src_view = std::uniform_int_distribution<std::size_t>(0, src->partials.size() - 1)(rng);
      for (std::size_t tc = 0; tc < kShapeClassCount; ++tc) {
        if (tc == c || by_class[tc].empty()) continue;
        std::vector<std::pair<double, const DatasetObject*>> ranked;
        for (const auto* t : by_class[tc]) ranked.emplace_back(chamfer(src->gt, t->gt), t);
        std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
        for (std::size_t r = 0; r < std::min(targets_top_n, ranked.size()); ++r) {
          const auto* tgt = ranked[r].second;
          const std::size_t tgt_view = std::uniform_int_distribution<std::size_t>(0, tgt->partials.size() - 1)(rng);
          PairEntry e;
          char id[32];
          std::snprintf(id, sizeof(id), "pair_%05zu", next_id++);
          e.pair_id = id;
          e.source_object = src->id;
          e.source_view = src_view;
          e.target_object = tgt->id;
          e.target_view = tgt_view;
          e.source_partial_path = src->partial_path(src_view);
          e.source_gt_path = src->gt_path();
          e.target_partial_path = tgt->partial_path(tgt_view);
          e.target_gt_path = tgt->gt_path();
          e.source_class = to_string(src->cls);
          e.target_class = to_string(tgt->cls);
          e.target_rank = r;
          e.source_target_cd = ranked[r].first;
          manifest.entries.push_back(std::move(e));
        }
      }
    }
  }
  return manifest;
}

inline void to_json(nlohmann::json& j, const PairEntry& e) {
  j = nlohmann::json{{"pair_id", e.pair_id},
                     {"source_object", e.source_object},
                     {"source_view", e.source_view},
                     {"target_object", e.target_object},
                     {"target_view", e.target_view},
                     {"source_partial_path", e.source_partial_path},
                     {"source_gt_path", e.source_gt_path},
                     {"target_partial_path", e.target_partial_path},
                     {"target_gt_path", e.target_gt_path},
                     {"source_class", e.source_class},
                     {"target_class", e.target_class},
                     {"target_rank", e.target_rank},
                     {"source_target_cd", e.source_target_cd},
                     {"t_nre_denominator", nullptr},
                     {"s_nre_denominator", nullptr}};
  if (e.t_nre_denominator) j["t_nre_denominator"] = *e.t_nre_denominator;
  if (e.s_nre_denominator) j["s_nre_denominator"] = *e.s_nre_denominator;
}

inline void from_json(const nlohmann::json& j, PairEntry& e) {
  j.at("pair_id").get_to(e.pair_id);
  j.at("source_object").get_to(e.source_object);
  j.at("source_view").get_to(e.source_view);
  j.at("target_object").get_to(e.target_object);
  j.at("target_view").get_to(e.target_view);
  j.at("source_partial_path").get_to(e.source_partial_path);
  j.at("source_gt_path").get_to(e.source_gt_path);
  j.at("target_partial_path").get_to(e.target_partial_path);
  j.at("target_gt_path").get_to(e.target_gt_path);
  j.at("source_class").get_to(e.source_class);
  j.at("target_class").get_to(e.target_class);
  j.at("target_rank").get_to(e.target_rank);
  j.at("source_target_cd").get_to(e.source_target_cd);
  if (j.contains("t_nre_denominator") && !j["t_nre_denominator"].is_null()) {
    e.t_nre_denominator = j["t_nre_denominator"].get<double>();
  }
  if (j.contains("s_nre_denominator") && !j["s_nre_denominator"].is_null()) {
    e.s_nre_denominator = j["s_nre_denominator"].get<double>();
  }
}

inline nlohmann::json manifest_to_json(const PairManifest& m) {
  return nlohmann::json{{"version", 1},
                        {"sources_per_class", m.sources_per_class},
                        {"targets_top_n", m.targets_top_n},
                        {"seed", m.seed},
                        {"entries", m.entries}};
}

inline void write_manifest(const PairManifest& m, const std::filesystem::path& path) {
  write_json_file(manifest_to_json(m), path);
}

/// Loads a manifest and checks its invariants; `dataset_dir` resolves the
/// relative cloud paths (pass an empty path to skip the file-existence check).
inline PairManifest read_manifest(const std::filesystem::path& path, const std::filesystem::path& dataset_dir = {}) {
  const auto j = read_json_file(path);
  PairManifest m;
  try {
    if (j.at("version").get<int>() != 1) throw Error(Errc::VersionMismatch, path.string() + ": unsupported version");
    j.at("sources_per_class").get_to(m.sources_per_class);
    j.at("targets_top_n").get_to(m.targets_top_n);
    j.at("seed").get_to(m.seed);
    m.entries = j.at("entries").get<std::vector<PairEntry>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ParseError, path.string() + ": " + e.what());
  }
  for (const auto& e : m.entries) {
    if (e.source_class == e.target_class) {
      throw Error(Errc::ParseError, e.pair_id + ": source and target share class " + e.source_class);
    }
    for (const auto* d : {&e.t_nre_denominator, &e.s_nre_denominator}) {
      if (*d && !(**d > 0.0)) throw Error(Errc::ParseError, e.pair_id + ": nonpositive cached denominator");
    }
    if (!dataset_dir.empty()) {
      for (const auto* p : {&e.source_partial_path, &e.source_gt_path, &e.target_partial_path, &e.target_gt_path}) {
        if (!std::filesystem::exists(dataset_dir / *p)) {
          throw Error(Errc::IoError, e.pair_id + ": missing file " + (dataset_dir / *p).string());
        }
      }
    }
  }
  return m;
}

/// The four clouds of one attack pair.
struct AttackPair {
  PairEntry entry;
  PointCloud source_partial;
  PointCloud source_gt;
  PointCloud target_partial;
  PointCloud target_gt;
  int source_label = 0;
  int target_label = 0;
};

inline AttackPair resolve_pair(const Dataset& ds, const PairEntry& e) {
  const auto& src = ds.object(e.source_object);
  const auto& tgt = ds.object(e.target_object);
  return {e,
          src.partials.at(e.source_view),
          src.gt,
          tgt.partials.at(e.target_view),
          tgt.gt,
          static_cast<int>(src.cls),
          static_cast<int>(tgt.cls)};
}

}  // namespace pointca
