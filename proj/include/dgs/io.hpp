#pragma once

#include "dgs/loss.hpp"
#include "dgs/raster.hpp"
#include "dgs/trainer.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace dgs {

struct PlyParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// PLY. Two content modes: plain point clouds (x,y,z[,red,green,blue]) and
// splat checkpoints using the 3DGS property convention
// (x,y,z,nx,ny,nz,f_dc_*,f_rest_*,opacity,scale_*,rot_*), float32 properties,
// ascii or binary little-endian. See FORMATS.md.
// ---------------------------------------------------------------------------

struct PlyScene {
    bool is_splats = false;
    std::vector<Vec3<double>> points;
    std::vector<Vec3<double>> colors;     // empty entries default to mid-gray
    std::vector<Splat<float>> splats;
};

namespace detail {

struct PlyProperty {
    std::string name;
    std::string type;
};

struct PlyElement {
    std::string name;
    std::size_t count = 0;
    std::vector<PlyProperty> properties;
};

inline std::size_t ply_type_size(const std::string& t, std::size_t line_no) {
    if (t == "char" || t == "int8" || t == "uchar" || t == "uint8") return 1;
    if (t == "short" || t == "int16" || t == "ushort" || t == "uint16") return 2;
    if (t == "int" || t == "int32" || t == "uint" || t == "uint32" || t == "float" || t == "float32")
        return 4;
    if (t == "double" || t == "float64") return 8;
    throw PlyParseError("ply parse error at line " + std::to_string(line_no) + ": unknown type " + t);
}

inline double ply_read_binary_value(std::istream& in, const std::string& type, std::size_t line_no) {
    auto read_as = [&](auto dummy) -> double {
        decltype(dummy) v{};
        in.read(reinterpret_cast<char*>(&v), sizeof(v));
        return double(v);
    };
    if (type == "float" || type == "float32") return read_as(float{});
    if (type == "double" || type == "float64") return read_as(double{});
    if (type == "uchar" || type == "uint8") return read_as(std::uint8_t{});
    if (type == "char" || type == "int8") return read_as(std::int8_t{});
    if (type == "short" || type == "int16") return read_as(std::int16_t{});
    if (type == "ushort" || type == "uint16") return read_as(std::uint16_t{});
    if (type == "int" || type == "int32") return read_as(std::int32_t{});
    if (type == "uint" || type == "uint32") return read_as(std::uint32_t{});
    throw PlyParseError("ply parse error at line " + std::to_string(line_no) + ": unknown type " + type);
}

inline int sh_degree_from_rest(std::size_t rest_count) {
    for (int d = 0; d <= 3; ++d)
        if (rest_count == std::size_t(3 * ((d + 1) * (d + 1) - 1))) return d;
    throw PlyParseError("ply: f_rest count " + std::to_string(rest_count) +
                        " does not match any SH degree <= 3");
}

}  // namespace detail

inline PlyScene load_ply(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_ply: cannot open " + path);

    std::size_t line_no = 0;
    auto next_line = [&]() -> std::string {
        std::string line;
        if (!std::getline(in, line)) throw PlyParseError("ply parse error at line " + std::to_string(line_no + 1) + ": unexpected end of header");
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return line;
    };

    if (next_line() != "ply")
        throw PlyParseError("ply parse error at line 1: missing ply magic");
    bool binary = false;
    bool format_seen = false;
    std::vector<detail::PlyElement> elements;
    for (;;) {
        const std::string line = next_line();
        std::istringstream ls(line);
        std::string tok;
        ls >> tok;
        if (tok == "comment" || tok.empty()) continue;
        if (tok == "format") {
            std::string fmt;
            ls >> fmt;
            if (fmt == "ascii") binary = false;
            else if (fmt == "binary_little_endian") binary = true;
            else if (fmt == "binary_big_endian")
                throw PlyParseError("ply: big-endian files are not supported");
            else
                throw PlyParseError("ply parse error at line " + std::to_string(line_no) +
                                    ": unknown format " + fmt);
            format_seen = true;
        } else if (tok == "element") {
            detail::PlyElement e;
            ls >> e.name >> e.count;
            if (ls.fail())
                throw PlyParseError("ply parse error at line " + std::to_string(line_no) +
                                    ": malformed element");
            elements.push_back(std::move(e));
        } else if (tok == "property") {
            if (elements.empty())
                throw PlyParseError("ply parse error at line " + std::to_string(line_no) +
                                    ": property before element");
            std::string type, name;
            ls >> type;
            if (type == "list")
                throw PlyParseError("ply parse error at line " + std::to_string(line_no) +
                                    ": list properties are not supported");
            ls >> name;
            if (ls.fail() || name.empty())
                throw PlyParseError("ply parse error at line " + std::to_string(line_no) +
                                    ": malformed property");
            elements.back().properties.push_back({name, type});
        } else if (tok == "end_header") {
            break;
        } else {
            throw PlyParseError("ply parse error at line " + std::to_string(line_no) +
                                ": unexpected token " + tok);
        }
    }
    if (!format_seen) throw PlyParseError("ply parse error: missing format line");

    const detail::PlyElement* vertex = nullptr;
    for (const auto& e : elements)
        if (e.name == "vertex") vertex = &e;
    if (!vertex) throw PlyParseError("ply: no vertex element");

    auto index_of = [&](const std::string& name) -> int {
        for (std::size_t i = 0; i < vertex->properties.size(); ++i)
            if (vertex->properties[i].name == name) return int(i);
        return -1;
    };

    PlyScene out;
    const bool splat_mode = index_of("opacity") >= 0 && index_of("scale_0") >= 0 &&
                            index_of("rot_0") >= 0 && index_of("f_dc_0") >= 0;
    out.is_splats = splat_mode;

    // Gather per-vertex values as doubles, in property order.
    std::vector<double> row(vertex->properties.size());
    std::vector<std::vector<double>> rows;
    rows.reserve(vertex->count);
    for (const auto& e : elements) {
        if (&e == vertex) {
            for (std::size_t i = 0; i < e.count; ++i) {
                if (binary) {
                    for (std::size_t p = 0; p < e.properties.size(); ++p)
                        row[p] = detail::ply_read_binary_value(in, e.properties[p].type, line_no);
                    if (!in) throw PlyParseError("ply: truncated binary vertex data");
                } else {
                    const std::string line = next_line();
                    std::istringstream ls(line);
                    for (std::size_t p = 0; p < e.properties.size(); ++p) {
                        ls >> row[p];
                        if (ls.fail())
                            throw PlyParseError("ply parse error at line " + std::to_string(line_no) +
                                                ": malformed vertex row");
                    }
                }
                rows.push_back(row);
            }
        } else {
            // Skip foreign elements.
            if (binary) {
                std::size_t rec = 0;
                for (const auto& p : e.properties) rec += detail::ply_type_size(p.type, line_no);
                in.seekg(std::streamoff(rec * e.count), std::ios::cur);
            } else {
                for (std::size_t i = 0; i < e.count; ++i) next_line();
            }
        }
    }

    const int ix = index_of("x"), iy = index_of("y"), iz = index_of("z");
    if (ix < 0 || iy < 0 || iz < 0) throw PlyParseError("ply: vertex element lacks x/y/z");

    if (!splat_mode) {
        const int ir = index_of("red"), ig = index_of("green"), ib = index_of("blue");
        const bool color_as_byte = ir >= 0 && vertex->properties[ir].type != "float" &&
                                   vertex->properties[ir].type != "float32" &&
                                   vertex->properties[ir].type != "double";
        for (const auto& r : rows) {
            out.points.push_back({r[ix], r[iy], r[iz]});
            if (ir >= 0 && ig >= 0 && ib >= 0) {
                const double scale = color_as_byte ? 1.0 / 255.0 : 1.0;
                out.colors.push_back({r[ir] * scale, r[ig] * scale, r[ib] * scale});
            } else {
                out.colors.push_back({0.5, 0.5, 0.5});
            }
        }
        return out;
    }

    // Splat checkpoint: count f_rest properties to infer the SH degree.
    std::size_t rest_count = 0;
    while (index_of("f_rest_" + std::to_string(rest_count)) >= 0) ++rest_count;
    const int degree = detail::sh_degree_from_rest(rest_count);
    const int n_coeff = (degree + 1) * (degree + 1);

    const int iop = index_of("opacity");
    int isc[3], irt[4], idc[3];
    for (int a = 0; a < 3; ++a) isc[a] = index_of("scale_" + std::to_string(a));
    for (int a = 0; a < 4; ++a) irt[a] = index_of("rot_" + std::to_string(a));
    for (int a = 0; a < 3; ++a) idc[a] = index_of("f_dc_" + std::to_string(a));
    std::vector<int> irest(rest_count);
    for (std::size_t a = 0; a < rest_count; ++a) irest[a] = index_of("f_rest_" + std::to_string(a));
    if (isc[2] < 0 || irt[3] < 0 || idc[2] < 0)
        throw PlyParseError("ply: incomplete splat property set");

    SplatId id = 0;
    for (const auto& r : rows) {
        Splat<float> s;
        s.id = id++;
        s.mu = {float(r[ix]), float(r[iy]), float(r[iz])};
        for (int a = 0; a < 3; ++a) s.log_scale[a] = float(r[isc[a]]);
        for (int a = 0; a < 4; ++a) s.rotation[a] = float(r[irt[a]]);
        s.opacity_logit = float(r[iop]);
        s.sh.assign(n_coeff, Vec3<float>::Zero());
        for (int a = 0; a < 3; ++a) s.sh[0][a] = float(r[idc[a]]);
        // f_rest is channel-major: index = channel * (n_coeff-1) + (coeff-1).
        for (int c = 1; c < n_coeff; ++c)
            for (int a = 0; a < 3; ++a)
                s.sh[c][a] = float(r[irest[std::size_t(a) * (n_coeff - 1) + (c - 1)]]);
        out.splats.push_back(std::move(s));
    }
    return out;
}

/// Write a splat checkpoint in the 3DGS property convention (float32).
inline void save_splats_ply(std::span<const Splat<float>> splats, const std::string& path,
                            bool binary = true) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_splats_ply: cannot open " + path);
    const int n_coeff = splats.empty() ? 1 : int(splats.front().sh.size());
    const int rest = 3 * (n_coeff - 1);
    f << "ply\nformat " << (binary ? "binary_little_endian" : "ascii") << " 1.0\n";
    f << "element vertex " << splats.size() << "\n";
    const char* base[] = {"x", "y", "z", "nx", "ny", "nz"};
    for (const char* p : base) f << "property float " << p << "\n";
    for (int a = 0; a < 3; ++a) f << "property float f_dc_" << a << "\n";
    for (int a = 0; a < rest; ++a) f << "property float f_rest_" << a << "\n";
    f << "property float opacity\n";
    for (int a = 0; a < 3; ++a) f << "property float scale_" << a << "\n";
    for (int a = 0; a < 4; ++a) f << "property float rot_" << a << "\n";
    f << "end_header\n";

    std::vector<float> row;
    for (const auto& s : splats) {
        if (int(s.sh.size()) != n_coeff)
            throw std::invalid_argument("save_splats_ply: mixed SH degrees");
        row.clear();
        for (int a = 0; a < 3; ++a) row.push_back(s.mu[a]);
        for (int a = 0; a < 3; ++a) row.push_back(0.0f);  // normals unused
        for (int a = 0; a < 3; ++a) row.push_back(s.sh[0][a]);
        for (int a = 0; a < 3; ++a)
            for (int c = 1; c < n_coeff; ++c) row.push_back(s.sh[c][a]);
        row.push_back(s.opacity_logit);
        for (int a = 0; a < 3; ++a) row.push_back(s.log_scale[a]);
        for (int a = 0; a < 4; ++a) row.push_back(s.rotation[a]);
        if (binary) {
            f.write(reinterpret_cast<const char*>(row.data()),
                    std::streamsize(row.size() * sizeof(float)));
        } else {
            for (std::size_t i = 0; i < row.size(); ++i)
                f << (i ? " " : "") << row[i];
            f << "\n";
        }
    }
    if (!f) throw std::runtime_error("save_splats_ply: write failed for " + path);
}

/// Write a plain point cloud (float32 xyz + uchar rgb).
inline void save_points_ply(std::span<const Vec3<double>> points, std::span<const Vec3<double>> colors,
                            const std::string& path, bool binary = true) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_points_ply: cannot open " + path);
    f << "ply\nformat " << (binary ? "binary_little_endian" : "ascii") << " 1.0\n";
    f << "element vertex " << points.size() << "\n";
    f << "property float x\nproperty float y\nproperty float z\n";
    f << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    f << "end_header\n";
    for (std::size_t i = 0; i < points.size(); ++i) {
        const float xyz[3] = {float(points[i][0]), float(points[i][1]), float(points[i][2])};
        const Vec3<double> c = colors.empty() ? Vec3<double>{0.5, 0.5, 0.5} : colors[i];
        const std::uint8_t rgb[3] = {to_byte(c[0]), to_byte(c[1]), to_byte(c[2])};
        if (binary) {
            f.write(reinterpret_cast<const char*>(xyz), sizeof(xyz));
            f.write(reinterpret_cast<const char*>(rgb), sizeof(rgb));
        } else {
            f << xyz[0] << " " << xyz[1] << " " << xyz[2] << " " << int(rgb[0]) << " " << int(rgb[1])
              << " " << int(rgb[2]) << "\n";
        }
    }
}

// ---------------------------------------------------------------------------
// Camera JSON (COLMAP world-to-camera convention, qvec = (w,x,y,z)).
// ---------------------------------------------------------------------------

struct NamedCamera {
    std::string name;  // target image path, relative to the file's directory
    Camera<double> camera;
};

inline std::vector<NamedCamera> load_cameras(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_cameras: cannot open " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("load_cameras: invalid JSON in " + path + ": " + e.what());
    }
    if (!j.contains("images") || !j["images"].is_array())
        throw std::runtime_error("load_cameras: missing field images");

    std::vector<NamedCamera> out;
    for (std::size_t i = 0; i < j["images"].size(); ++i) {
        const auto& e = j["images"][i];
        const std::string at = "images[" + std::to_string(i) + "]";
        auto need = [&](const char* field) -> const nlohmann::json& {
            if (!e.contains(field))
                throw std::runtime_error("load_cameras: missing field " + at + "." + field);
            return e[field];
        };
        NamedCamera nc;
        nc.name = need("name").get<std::string>();
        nc.camera.width = need("width").get<int>();
        nc.camera.height = need("height").get<int>();
        nc.camera.fx = need("fx").get<double>();
        nc.camera.fy = need("fy").get<double>();
        nc.camera.cx = need("cx").get<double>();
        nc.camera.cy = need("cy").get<double>();
        const auto& q = need("qvec");
        const auto& t = need("tvec");
        if (!q.is_array() || q.size() != 4)
            throw std::runtime_error("load_cameras: malformed field " + at + ".qvec");
        if (!t.is_array() || t.size() != 3)
            throw std::runtime_error("load_cameras: malformed field " + at + ".tvec");
        for (int a = 0; a < 4; ++a) nc.camera.q_wc[a] = q[a].get<double>();
        for (int a = 0; a < 3; ++a) nc.camera.t_wc[a] = t[a].get<double>();
        try {
            nc.camera.validate();
        } catch (const std::exception& ex) {
            throw std::runtime_error("load_cameras: invalid camera at " + at + ": " + ex.what());
        }
        out.push_back(std::move(nc));
    }
    return out;
}

inline void save_cameras(const std::vector<NamedCamera>& cams, const std::string& path) {
    nlohmann::json j;
    j["images"] = nlohmann::json::array();
    for (const auto& nc : cams) {
        nlohmann::json e;
        e["name"] = nc.name;
        e["width"] = nc.camera.width;
        e["height"] = nc.camera.height;
        e["fx"] = nc.camera.fx;
        e["fy"] = nc.camera.fy;
        e["cx"] = nc.camera.cx;
        e["cy"] = nc.camera.cy;
        e["qvec"] = {nc.camera.q_wc[0], nc.camera.q_wc[1], nc.camera.q_wc[2], nc.camera.q_wc[3]};
        e["tvec"] = {nc.camera.t_wc[0], nc.camera.t_wc[1], nc.camera.t_wc[2]};
        j["images"].push_back(std::move(e));
    }
    std::ofstream f(path);
    if (!f) throw std::runtime_error("save_cameras: cannot open " + path);
    f << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Metrics.
// ---------------------------------------------------------------------------

struct Metrics {
    double psnr = 0;
    double ssim = 0;
};

template <typename T>
Metrics metrics(const Image<T>& render, const Image<T>& target) {
    if (!render.same_shape(target)) throw std::invalid_argument("metrics: resolution mismatch");
    return {psnr(render, target), double(ssim(render, target))};
}

// ---------------------------------------------------------------------------
// Synthetic scenes: the desk-scale dataset substitute. Ground-truth splats,
// a camera ring, and targets rendered by the monolithic renderer in oracle
// mode; bit-reproducible for a fixed spec and seed.
// ---------------------------------------------------------------------------

struct SynthSpec {
    int count = 5000;
    bool clustered = false;       // 90% of the primitives in one corner cluster
    int n_views = 64;
    int width = 64, height = 64;
    double fov_deg = 60.0;
    double ring_radius = 3.2;
    double extent = 1.0;          // centers within [-extent, extent]^3
    int sh_degree = 3;
    Vec3<double> background{0.0, 0.0, 0.0};
};

template <typename T>
struct SceneBundle {
    std::vector<Camera<T>> cameras;
    std::vector<Image<T>> images;
    std::vector<Splat<T>> gt_splats;    // empty for loaded real scenes
    std::vector<Vec3<T>> points;        // initialization cloud
    std::vector<Vec3<T>> point_colors;
    Vec3<T> background = Vec3<T>::Zero();
    Vec3<T> bounds_min = Vec3<T>::Zero();
    Vec3<T> bounds_max = Vec3<T>::Zero();
};

namespace detail {

template <typename T>
Camera<T> ring_camera(const SynthSpec& spec, int i) {
    const double a = 2.0 * M_PI * double(i) / double(spec.n_views);
    const double height = 0.55 * spec.extent * ((i % 2 == 0) ? 1.0 : -1.0);
    const Vec3<T> pos{T(spec.ring_radius * spec.extent * std::cos(a)), T(height),
                      T(spec.ring_radius * spec.extent * std::sin(a))};
    Camera<T> cam;
    cam.width = spec.width;
    cam.height = spec.height;
    cam.fx = cam.fy = T(spec.width / (2.0 * std::tan(spec.fov_deg * M_PI / 360.0)));
    cam.cx = T(spec.width) / T(2);
    cam.cy = T(spec.height) / T(2);
    const Vec3<T> z = (-pos).normalized();
    Vec3<T> up{T(0), T(1), T(0)};
    if (std::abs(double(z.dot(up))) > 0.99) up = {T(1), T(0), T(0)};
    const Vec3<T> x = z.cross(up).normalized();
    const Vec3<T> y = z.cross(x);
    Mat3<T> r;
    r.row(0) = x.transpose();
    r.row(1) = y.transpose();
    r.row(2) = z.transpose();
    // Rotation -> quaternion, w >= 0 branch is fine for ring poses.
    Vec4<T> q;
    const T tr = r.trace();
    if (tr > T(0)) {
        T s = std::sqrt(tr + T(1)) * T(2);
        q = {s / T(4), (r(2, 1) - r(1, 2)) / s, (r(0, 2) - r(2, 0)) / s, (r(1, 0) - r(0, 1)) / s};
    } else if (r(0, 0) > r(1, 1) && r(0, 0) > r(2, 2)) {
        T s = std::sqrt(T(1) + r(0, 0) - r(1, 1) - r(2, 2)) * T(2);
        q = {(r(2, 1) - r(1, 2)) / s, s / T(4), (r(0, 1) + r(1, 0)) / s, (r(0, 2) + r(2, 0)) / s};
    } else if (r(1, 1) > r(2, 2)) {
        T s = std::sqrt(T(1) + r(1, 1) - r(0, 0) - r(2, 2)) * T(2);
        q = {(r(0, 2) - r(2, 0)) / s, (r(0, 1) + r(1, 0)) / s, s / T(4), (r(1, 2) + r(2, 1)) / s};
    } else {
        T s = std::sqrt(T(1) + r(2, 2) - r(0, 0) - r(1, 1)) * T(2);
        q = {(r(1, 0) - r(0, 1)) / s, (r(0, 2) + r(2, 0)) / s, (r(1, 2) + r(2, 1)) / s, s / T(4)};
    }
    cam.q_wc = q.normalized();
    cam.t_wc = -(r * pos);
    return cam;
}

}  // namespace detail

template <typename T>
SceneBundle<T> synth_scene(const SynthSpec& spec, std::uint64_t seed) {
    SceneBundle<T> out;
    out.background = spec.background.cast<T>();

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::normal_distribution<double> gauss;

    const double e = spec.extent;
    // Typical nearest-neighbor spacing for the target count drives the scales.
    const double spacing = 1.1 * e * std::pow(double(std::max(spec.count, 1)), -1.0 / 3.0);

    out.gt_splats.resize(spec.count);
    const int n_coeff = (spec.sh_degree + 1) * (spec.sh_degree + 1);
    for (int i = 0; i < spec.count; ++i) {
        auto& s = out.gt_splats[i];
        s.id = SplatId(i);
        if (spec.clustered && u01(rng) < 0.9) {
            const Vec3<double> c{-0.55 * e, -0.55 * e, -0.55 * e};
            for (int a = 0; a < 3; ++a)
                s.mu[a] = T(std::clamp(c[a] + gauss(rng) * 0.12 * e, -e, e));
        } else {
            for (int a = 0; a < 3; ++a) s.mu[a] = T((2 * u01(rng) - 1) * e);
        }
        const double base = spacing * (0.6 + 0.9 * u01(rng));
        for (int a = 0; a < 3; ++a) s.log_scale[a] = T(std::log(base * (0.7 + 0.6 * u01(rng))));
        Vec4<T> q{T(gauss(rng)), T(gauss(rng)), T(gauss(rng)), T(gauss(rng))};
        s.rotation = q.normalized();
        const double alpha = 0.5 + 0.45 * u01(rng);
        s.opacity_logit = T(std::log(alpha / (1.0 - alpha)));
        s.sh.assign(n_coeff, Vec3<T>::Zero());
        for (int a = 0; a < 3; ++a) s.sh[0][a] = T((0.1 + 0.8 * u01(rng) - 0.5) / sh::kC0);
    }

    out.bounds_min = Vec3<T>::Constant(T(-e));
    out.bounds_max = Vec3<T>::Constant(T(e));

    // Initialization cloud: ground-truth centers with their realized colors.
    out.points.reserve(spec.count);
    out.point_colors.reserve(spec.count);
    for (const auto& s : out.gt_splats) {
        out.points.push_back(s.mu);
        Vec3<T> color = Vec3<T>::Constant(T(0.5)) + T(sh::kC0) * s.sh[0];
        out.point_colors.push_back(color.cwiseMax(T(0)).cwiseMin(T(1)));
    }

    for (int i = 0; i < spec.n_views; ++i) out.cameras.push_back(detail::ring_camera<T>(spec, i));
    out.images.reserve(out.cameras.size());
    for (const auto& cam : out.cameras)
        out.images.push_back(render_view<T>(out.gt_splats, cam, out.background, oracle_options()).color);
    return out;
}

// ---------------------------------------------------------------------------
// Scene directory layout (see FORMATS.md): cameras.json, scene.json,
// points.ply, gt_splats.ply (optional), images/view_NNNN.ppm.
// ---------------------------------------------------------------------------

template <typename T>
void save_scene_dir(const SceneBundle<T>& bundle, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");

    std::vector<NamedCamera> cams;
    for (std::size_t i = 0; i < bundle.cameras.size(); ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "images/view_%04zu.ppm", i);
        cams.push_back({name, bundle.cameras[i].template cast<double>()});
        write_ppm(bundle.images[i], (fs::path(dir) / name).string());
    }
    save_cameras(cams, (fs::path(dir) / "cameras.json").string());

    std::vector<Vec3<double>> pts, cols;
    for (const auto& p : bundle.points) pts.push_back(p.template cast<double>());
    for (const auto& c : bundle.point_colors) cols.push_back(c.template cast<double>());
    save_points_ply(pts, cols, (fs::path(dir) / "points.ply").string());

    if (!bundle.gt_splats.empty()) {
        std::vector<Splat<float>> fsplats;
        for (const auto& s : bundle.gt_splats) {
            Splat<float> f;
            f.id = s.id;
            f.mu = s.mu.template cast<float>();
            f.log_scale = s.log_scale.template cast<float>();
            f.rotation = s.rotation.template cast<float>();
            f.opacity_logit = float(s.opacity_logit);
            for (const auto& c : s.sh) f.sh.push_back(c.template cast<float>());
            fsplats.push_back(std::move(f));
        }
        save_splats_ply(fsplats, (fs::path(dir) / "gt_splats.ply").string());
    }

    nlohmann::json j;
    j["background"] = {double(bundle.background[0]), double(bundle.background[1]),
                       double(bundle.background[2])};
    j["bounds_min"] = {double(bundle.bounds_min[0]), double(bundle.bounds_min[1]),
                       double(bundle.bounds_min[2])};
    j["bounds_max"] = {double(bundle.bounds_max[0]), double(bundle.bounds_max[1]),
                       double(bundle.bounds_max[2])};
    std::ofstream f((fs::path(dir) / "scene.json").string());
    f << j.dump(2) << "\n";
}

template <typename T>
SceneBundle<T> load_scene_dir(const std::string& dir) {
    namespace fs = std::filesystem;
    SceneBundle<T> out;

    const auto cams = load_cameras((fs::path(dir) / "cameras.json").string());
    for (const auto& nc : cams) {
        const auto img_path = (fs::path(dir) / nc.name).string();
        if (!fs::exists(img_path))
            throw std::runtime_error("load_scene_dir: missing image " + img_path);
        Image<T> img = read_ppm<T>(img_path);
        if (img.width != nc.camera.width || img.height != nc.camera.height)
            throw std::runtime_error("load_scene_dir: image resolution mismatch for " + nc.name);
        out.cameras.push_back(nc.camera.template cast<T>());
        out.images.push_back(std::move(img));
    }

    const auto cloud_path = (fs::path(dir) / "points.ply").string();
    if (fs::exists(cloud_path)) {
        const PlyScene ply = load_ply(cloud_path);
        for (const auto& p : ply.points) out.points.push_back(p.template cast<T>());
        for (const auto& c : ply.colors) out.point_colors.push_back(c.template cast<T>());
    }

    const auto meta_path = (fs::path(dir) / "scene.json").string();
    if (fs::exists(meta_path)) {
        std::ifstream f(meta_path);
        nlohmann::json j;
        f >> j;
        for (int a = 0; a < 3; ++a) {
            out.background[a] = T(j["background"][a].get<double>());
            out.bounds_min[a] = T(j["bounds_min"][a].get<double>());
            out.bounds_max[a] = T(j["bounds_max"][a].get<double>());
        }
    }
    return out;
}

/// Append metric-log records as newline-delimited JSON.
inline void append_metrics_ndjson(const std::string& path, std::span<const TrainRecord> records) {
    std::ofstream f(path, std::ios::app);
    if (!f) throw std::runtime_error("append_metrics_ndjson: cannot open " + path);
    for (const auto& r : records) {
        nlohmann::json j;
        j["step"] = r.step;
        j["loss"] = r.loss;
        j["psnr"] = std::isfinite(r.psnr) ? r.psnr : 99.0;
        j["lr_position"] = r.lr_position;
        j["comm_bytes"] = r.comm_bytes;
        j["wall_ms"] = r.wall_ms;
        f << j.dump() << "\n";
    }
}

}  // namespace dgs
