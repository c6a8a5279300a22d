#pragma once

// Synthetic capture: ray-cast parametric scenes under a projector-camera rig, emit the captured
// image together with analytic ground truth (depth, wrapped phase, nearest node, code), and
// augment captures with roll, brightness and Gaussian noise.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "oneshot/core/error.hpp"
#include "oneshot/core/geometry.hpp"
#include "oneshot/core/image.hpp"
#include "oneshot/core/parallel.hpp"
#include "oneshot/core/phase.hpp"
#include "oneshot/pattern.hpp"

namespace oneshot {

// --- scenes ----------------------------------------------------------------------

/// Surface reflectance in [0, 1] as a function of the world point.
struct Albedo {
    enum class Kind { Constant, Checker, Stripes } kind = Kind::Constant;
    double value = 1.0;  // constant level, or the high level of a texture
    double low = 0.4;    // low level of a texture
    double size = 0.05;  // texture cell size in meters

    double at(const Vec3& p) const {
        switch (kind) {
            case Kind::Constant: return value;
            case Kind::Checker: {
                const long a = static_cast<long>(std::floor(p.x() / size)) + static_cast<long>(std::floor(p.y() / size));
                return (a & 1) ? low : value;
            }
            case Kind::Stripes: return (static_cast<long>(std::floor(p.x() / size)) & 1) ? low : value;
        }
        return value;
    }
};

/// Infinite plane normal . X = offset.
struct PlaneSurface {
    Vec3 normal = Vec3(0, 0, -1);
    double offset = -1.0;
};

/// Z = base_z + h(X, Y) over [x0, x1] x [y0, y1], bilinear in a ny x nx grid of heights.
struct Heightfield {
    int nx = 2, ny = 2;
    double x0 = -1, x1 = 1, y0 = -1, y1 = 1;
    double base_z = 1.0;
    std::vector<double> heights = std::vector<double>(4, 0.0);
    std::optional<std::pair<double, double>> range;  // cached min/max of heights; see update_range()

    void update_range() {
        if (heights.empty()) return;
        const auto [lo, hi] = std::minmax_element(heights.begin(), heights.end());
        range = std::make_pair(*lo, *hi);
    }

    double height(double x, double y) const {
        const double gx = std::clamp((x - x0) / (x1 - x0) * (nx - 1), 0.0, static_cast<double>(nx - 1));
        const double gy = std::clamp((y - y0) / (y1 - y0) * (ny - 1), 0.0, static_cast<double>(ny - 1));
        const int ix = std::min(static_cast<int>(gx), nx - 2);
        const int iy = std::min(static_cast<int>(gy), ny - 2);
        const double fx = gx - ix, fy = gy - iy;
        auto h = [&](int a, int b) { return heights[static_cast<std::size_t>(b) * nx + a]; };
        return (1 - fy) * ((1 - fx) * h(ix, iy) + fx * h(ix + 1, iy)) + fy * ((1 - fx) * h(ix, iy + 1) + fx * h(ix + 1, iy + 1));
    }
    double surface_z(double x, double y) const { return base_z + height(x, y); }
};

struct Mesh {
    std::vector<std::array<Vec3, 3>> triangles;
};

struct Scene {
    std::variant<PlaneSurface, Heightfield, Mesh> surface;
    Albedo albedo;
    nlohmann::json spec;  // generator parameters, recorded in manifests

    bool convex() const { return std::holds_alternative<PlaneSurface>(surface); }
};

namespace detail {

inline std::optional<double> intersect(const PlaneSurface& s, const Ray& r, double t_min) {
    const double denom = s.normal.dot(r.dir);
    if (std::abs(denom) < 1e-12) return std::nullopt;
    const double t = (s.offset - s.normal.dot(r.origin)) / denom;
    if (!(t > t_min)) return std::nullopt;
    return t;
}

inline std::optional<double> intersect(const Heightfield& hf, const Ray& r, double t_min) {
    double zlo = 0, zhi = 0;
    if (hf.range) {
        std::tie(zlo, zhi) = *hf.range;
    } else {
        const auto [lo, hi] = std::minmax_element(hf.heights.begin(), hf.heights.end());
        zlo = *lo;
        zhi = *hi;
    }
    zlo += hf.base_z - 1e-9;
    zhi += hf.base_z + 1e-9;
    double t0 = t_min, t1 = 1e30;
    const std::array<double, 3> lo = {hf.x0, hf.y0, zlo}, hi = {hf.x1, hf.y1, zhi};
    for (int a = 0; a < 3; ++a) {
        const double o = r.origin[a], d = r.dir[a];
        if (std::abs(d) < 1e-15) {
            if (o < lo[a] || o > hi[a]) return std::nullopt;
            continue;
        }
        double ta = (lo[a] - o) / d, tb = (hi[a] - o) / d;
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
    }
    if (!(t0 <= t1)) return std::nullopt;

    auto f = [&](double t) {
        const Vec3 p = r.at(t);
        return p.z() - hf.surface_z(p.x(), p.y());
    };
    const double cell = std::min((hf.x1 - hf.x0) / (hf.nx - 1), (hf.y1 - hf.y0) / (hf.ny - 1));
    const double dxy = std::hypot(r.dir.x(), r.dir.y());
    double dt = (t1 - t0) / 4.0;
    if (dxy > 1e-12) dt = std::min(dt, 0.25 * cell / dxy);
    dt = std::max(dt, 1e-9);

    double ta = t0, fa = f(t0);
    if (fa == 0.0) return t0 > t_min ? std::optional<double>(t0) : std::nullopt;
    while (ta < t1) {
        const double tb = std::min(ta + dt, t1);
        const double fb = f(tb);
        if ((fa < 0.0) != (fb < 0.0) || fb == 0.0) {
            double lo_t = ta, hi_t = tb, flo = fa;
            for (int it = 0; it < 80 && hi_t - lo_t > 1e-13; ++it) {
                const double mid = 0.5 * (lo_t + hi_t);
                const double fm = f(mid);
                if ((fm < 0.0) == (flo < 0.0) && fm != 0.0) {
                    lo_t = mid;
                    flo = fm;
                } else {
                    hi_t = mid;
                }
            }
            return 0.5 * (lo_t + hi_t);
        }
        ta = tb;
        fa = fb;
        if (tb >= t1) break;
    }
    return std::nullopt;
}

inline std::optional<double> intersect(const Mesh& m, const Ray& r, double t_min) {
    std::optional<double> best;
    for (const auto& tri : m.triangles) {
        const Vec3 e1 = tri[1] - tri[0], e2 = tri[2] - tri[0];
        const Vec3 pv = r.dir.cross(e2);
        const double det = e1.dot(pv);
        if (std::abs(det) < 1e-14) continue;
        const double inv = 1.0 / det;
        const Vec3 tv = r.origin - tri[0];
        const double u = tv.dot(pv) * inv;
        if (u < 0.0 || u > 1.0) continue;
        const Vec3 qv = tv.cross(e1);
        const double v = r.dir.dot(qv) * inv;
        if (v < 0.0 || u + v > 1.0) continue;
        const double t = e2.dot(qv) * inv;
        if (t > t_min && (!best || t < *best)) best = t;
    }
    return best;
}

}  // namespace detail

/// Nearest intersection parameter along `r` beyond t_min.
inline std::optional<double> intersect(const Scene& s, const Ray& r, double t_min = 1e-9) {
    return std::visit([&](const auto& surf) { return detail::intersect(surf, r, t_min); }, s.surface);
}

inline Scene make_plane_scene(const Vec3& normal, double offset, Albedo albedo = {}) {
    Scene s;
    s.surface = PlaneSurface{normal.normalized(), offset / normal.norm()};
    s.albedo = albedo;
    s.spec = {{"type", "plane"}, {"normal", {normal.x(), normal.y(), normal.z()}}, {"offset", offset}};
    return s;
}

/// Plane through (0, 0, distance) whose normal is tilted from -Z by `tilt_x_deg` about Y then `tilt_y_deg` about X.
inline Scene make_tilted_plane(double distance, double tilt_x_deg = 0.0, double tilt_y_deg = 0.0, Albedo albedo = {}) {
    const Mat3 r = (Eigen::AngleAxisd(tilt_y_deg * M_PI / 180, Vec3::UnitX()) *
                    Eigen::AngleAxisd(tilt_x_deg * M_PI / 180, Vec3::UnitY())).toRotationMatrix();
    const Vec3 n = r * Vec3(0, 0, -1);
    Scene s = make_plane_scene(n, n.dot(Vec3(0, 0, distance)), albedo);
    s.spec = {{"type", "tilted_plane"}, {"distance", distance}, {"tilt_x_deg", tilt_x_deg}, {"tilt_y_deg", tilt_y_deg}};
    return s;
}

/// Heightfield sampled from h(x, y) on a regular grid with spacing `cell`.
template <typename Fn>
Heightfield sample_heightfield(double half_w, double half_h, double base_z, double cell, Fn&& h) {
    Heightfield hf;
    hf.x0 = -half_w;
    hf.x1 = half_w;
    hf.y0 = -half_h;
    hf.y1 = half_h;
    hf.base_z = base_z;
    hf.nx = static_cast<int>(std::ceil(2 * half_w / cell)) + 1;
    hf.ny = static_cast<int>(std::ceil(2 * half_h / cell)) + 1;
    hf.heights.assign(static_cast<std::size_t>(hf.nx) * hf.ny, 0.0);
    for (int b = 0; b < hf.ny; ++b)
        for (int a = 0; a < hf.nx; ++a) {
            const double x = hf.x0 + (hf.x1 - hf.x0) * a / (hf.nx - 1);
            const double y = hf.y0 + (hf.y1 - hf.y0) * b / (hf.ny - 1);
            hf.heights[static_cast<std::size_t>(b) * hf.nx + a] = h(x, y);
        }
    hf.update_range();
    return hf;
}

/// Egg-crate surface: amplitude * sin(2 pi x / wavelength) * sin(2 pi y / wavelength).
inline Scene make_sinusoid_scene(double distance, double amplitude, double wavelength, double half_extent = 0.8,
                                 double cell = 0.001, Albedo albedo = {}) {
    Scene s;
    s.surface = sample_heightfield(half_extent, half_extent, distance, cell, [&](double x, double y) {
        return amplitude * std::sin(2 * M_PI * x / wavelength) * std::sin(2 * M_PI * y / wavelength);
    });
    s.albedo = albedo;
    s.spec = {{"type", "sinusoid"}, {"distance", distance},        {"amplitude", amplitude},
              {"wavelength", wavelength}, {"half_extent", half_extent}, {"cell", cell}};
    return s;
}

/// Sum of `count` random Gaussian bumps on a base plane; smooth and reproducible from `seed`.
inline Scene make_bumps_scene(double distance, double max_amplitude, int count, std::uint64_t seed,
                              double half_extent = 0.8, double cell = 0.002, Albedo albedo = {}) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> pos(-0.5, 0.5), amp(-max_amplitude, max_amplitude), wid(0.04, 0.15);
    struct Bump { double x, y, a, s; };
    std::vector<Bump> bumps;
    for (int k = 0; k < count; ++k) bumps.push_back({pos(rng), pos(rng), amp(rng), wid(rng)});
    Scene s;
    s.surface = sample_heightfield(half_extent, half_extent, distance, cell, [&](double x, double y) {
        double h = 0;
        for (const auto& b : bumps) h += b.a * std::exp(-((x - b.x) * (x - b.x) + (y - b.y) * (y - b.y)) / (2 * b.s * b.s));
        return h;
    });
    s.albedo = albedo;
    s.spec = {{"type", "bumps"}, {"distance", distance}, {"max_amplitude", max_amplitude}, {"count", count},
              {"seed", seed},    {"half_extent", half_extent}, {"cell", cell}};
    return s;
}

// --- rendering ---------------------------------------------------------------------

struct SceneCapture {
    ImageU8 image;
    ImageF gt_depth;        // camera-frame z in meters; 0 where no surface
    ImageF gt_phase_u;      // [0, 1); 0 on background
    ImageF gt_phase_v;
    ImageI32 gt_node_id;    // nearest lattice node; -1 on background
    ImageI32 gt_code;       // code of that node; -1 on background
    ImageU8 foreground;     // 1 where the surface is hit, lit and inside the projector raster
    bool empty = true;      // no foreground pixel at all
};

struct RenderOptions {
    double ambient = 0.0;  // fraction of full-scale light that reaches every surface point
};

/// Wrapped phase of projector coordinate `u` for a lattice of period `period` (0 at nodes, 0.5 on lines).
inline float phase_of(double u, double period) { return wrap01f(u / period); }

inline SceneCapture render_capture(const Scene& scene, const Rig& rig, const GridPattern& pattern,
                                   const RenderOptions& opt = {}) {
    rig.validate();
    pattern.validate();
    const ImageU8 raster = rasterize_pattern(pattern);
    const auto& cam = rig.camera;
    const auto& proj = rig.projector;
    const int w = cam.width, h = cam.height;

    SceneCapture cap;
    ImageD radiance(w, h, 0.0);
    cap.gt_depth = ImageF(w, h, 0.0f);
    cap.gt_phase_u = ImageF(w, h, 0.0f);
    cap.gt_phase_v = ImageF(w, h, 0.0f);
    cap.gt_node_id = ImageI32(w, h, -1);
    cap.gt_code = ImageI32(w, h, -1);
    cap.foreground = ImageU8(w, h, 0);
    const Vec3 proj_center = proj.center();

    parallel_for(0, h, [&](int y) {
        for (int x = 0; x < w; ++x) {
            const Ray ray = cam.ray(x, y);
            const auto t = intersect(scene, ray);
            if (!t) continue;
            const Vec3 p = ray.at(*t);
            const double depth = cam.to_device(p).z();
            if (!(depth > 0)) continue;
            cap.gt_depth(x, y) = static_cast<float>(depth);
            const auto uv = proj.project(p);
            if (!uv) continue;
            const double u = uv->x(), v = uv->y();
            if (u < -0.5 || v < -0.5 || u >= pattern.width - 0.5 || v >= pattern.height - 0.5) continue;
            if (!scene.convex()) {
                const Vec3 to_p = p - proj_center;
                const double dist = to_p.norm();
                const auto tp = intersect(scene, Ray{proj_center, to_p / dist});
                if (!tp || std::abs(*tp - dist) > 1e-6 * (1.0 + dist)) continue;  // shadowed
            }
            const double a = scene.albedo.at(p);
            radiance(x, y) = a * (opt.ambient * 255.0 + (1.0 - opt.ambient) * sample_bilinear(raster, u, v));
            cap.gt_phase_u(x, y) = phase_of(u, pattern.period_u);
            cap.gt_phase_v(x, y) = phase_of(v, pattern.period_v);
            const int j = std::clamp(static_cast<int>(std::lround(u / pattern.period_u)), 0, pattern.cols - 1);
            const int i = std::clamp(static_cast<int>(std::lround(v / pattern.period_v)), 0, pattern.rows - 1);
            cap.gt_node_id(x, y) = pattern.id(i, j);
            cap.gt_code(x, y) = pattern.code(i, j);
            cap.foreground(x, y) = 1;
        }
    });
    cap.image = quantize(radiance);
    cap.empty = std::none_of(cap.foreground.pixels().begin(), cap.foreground.pixels().end(), [](auto v) { return v != 0; });
    return cap;
}

/// Ground-truth projector coordinates (u_p, v_p) for a foreground pixel, rebuilt from node id + phase.
inline Vec2 gt_projector_coords(const SceneCapture& cap, const GridPattern& p, int x, int y) {
    const int id = cap.gt_node_id(x, y);
    const double ju = unwrap_near(cap.gt_phase_u(x, y), p.col_of(id));
    const double iv = unwrap_near(cap.gt_phase_v(x, y), p.row_of(id));
    return {ju * p.period_u, iv * p.period_v};
}

// --- augmentation --------------------------------------------------------------------

inline constexpr std::array<double, 9> kRollSet = {0, 2, -2, 4, -4, 6, -6, 8, -8};

struct AugmentConfig {
    double noise_mean = 60.0;
    double noise_std = 180.0;
    double roll_degrees = 0.0;
    double brightness_scale = 1.0;
    std::uint64_t rng_seed = 0;
    bool allow_any_roll = false;

    static AugmentConfig identity() { return {0.0, 0.0, 0.0, 1.0, 0, false}; }

    void validate() const {
        if (!(noise_std >= 0.0)) throw ConfigError("augment: noise_std must be >= 0");
        if (!(brightness_scale > 0.0)) throw ConfigError("augment: brightness_scale must be > 0");
        if (!allow_any_roll && std::find(kRollSet.begin(), kRollSet.end(), roll_degrees) == kRollSet.end())
            throw ConfigError("augment: roll must be one of 0, +-2, +-4, +-6, +-8 degrees");
    }
};

/// Rotation about the image center, bilinear, zero fill. Positive angles turn content counter-clockwise
/// on screen (y down).
inline ImageD rotate_image(const ImageD& src, double degrees) {
    if (degrees == 0.0) return src;
    const double th = degrees * M_PI / 180.0, c = std::cos(th), s = std::sin(th);
    const double cx = 0.5 * (src.width() - 1), cy = 0.5 * (src.height() - 1);
    ImageD out(src.width(), src.height(), 0.0);
    for (int y = 0; y < src.height(); ++y)
        for (int x = 0; x < src.width(); ++x) {
            const double dx = x - cx, dy = y - cy;
            // inverse map: rotate the output offset by -th (screen CCW is +th with y down)
            const double sx = c * dx - s * dy + cx;
            const double sy = s * dx + c * dy + cy;
            out(x, y) = sample_bilinear(src, sx, sy, 0.0);
        }
    return out;
}

/// Float path without clipping: brightness * rotate(image) + N(mean, std^2).
inline ImageD augment_float(const ImageD& img, const AugmentConfig& cfg) {
    cfg.validate();
    ImageD out = rotate_image(img, cfg.roll_degrees);
    std::mt19937_64 rng(cfg.rng_seed);
    std::normal_distribution<double> noise(cfg.noise_mean, cfg.noise_std);
    const bool add_noise = cfg.noise_std > 0.0 || cfg.noise_mean != 0.0;
    for (auto& v : out.pixels()) {
        v *= cfg.brightness_scale;
        if (add_noise) v += cfg.noise_std > 0.0 ? noise(rng) : cfg.noise_mean;
    }
    return out;
}

/// 8-bit path: scale -> rotate -> add noise -> clip to [0, 255].
inline ImageU8 augment(const ImageU8& img, const AugmentConfig& cfg) {
    return quantize(augment_float(convert<double>(img), cfg));
}

// --- JSON ----------------------------------------------------------------------------

inline nlohmann::json to_json(const AugmentConfig& c) {
    return {{"noise_mean", c.noise_mean},       {"noise_std", c.noise_std}, {"roll_degrees", c.roll_degrees},
            {"brightness_scale", c.brightness_scale}, {"rng_seed", c.rng_seed}, {"allow_any_roll", c.allow_any_roll}};
}

inline AugmentConfig augment_from_json(const nlohmann::json& j) {
    AugmentConfig c = AugmentConfig::identity();
    c.noise_mean = j.value("noise_mean", c.noise_mean);
    c.noise_std = j.value("noise_std", c.noise_std);
    c.roll_degrees = j.value("roll_degrees", c.roll_degrees);
    c.brightness_scale = j.value("brightness_scale", c.brightness_scale);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    c.allow_any_roll = j.value("allow_any_roll", c.allow_any_roll);
    c.validate();
    return c;
}

inline Albedo albedo_from_json(const nlohmann::json& j) {
    Albedo a;
    const std::string kind = j.value("type", std::string("constant"));
    if (kind == "constant") a.kind = Albedo::Kind::Constant;
    else if (kind == "checker") a.kind = Albedo::Kind::Checker;
    else if (kind == "stripes") a.kind = Albedo::Kind::Stripes;
    else throw ConfigError("scene: unknown albedo type '" + kind + "'");
    a.value = j.value("value", a.value);
    a.low = j.value("low", a.low);
    a.size = j.value("size", a.size);
    if (!(a.size > 0)) throw ConfigError("scene: albedo size must be positive");
    return a;
}

inline nlohmann::json to_json(const Albedo& a) {
    static constexpr const char* names[] = {"constant", "checker", "stripes"};
    return {{"type", names[static_cast<int>(a.kind)]}, {"value", a.value}, {"low", a.low}, {"size", a.size}};
}

namespace detail {
inline Vec3 vec3_from_json(const nlohmann::json& j) {
    if (!j.is_array() || j.size() != 3) throw ConfigError("expected a 3-vector");
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}
}  // namespace detail

/// Builds a scene from its JSON description (see README for the schema).
inline Scene scene_from_json(const nlohmann::json& j) {
    try {
        const std::string type = j.at("type").get<std::string>();
        const Albedo albedo = j.contains("albedo") ? albedo_from_json(j.at("albedo")) : Albedo{};
        Scene s;
        if (type == "plane") {
            s = make_plane_scene(detail::vec3_from_json(j.at("normal")), j.at("offset").get<double>(), albedo);
        } else if (type == "tilted_plane") {
            s = make_tilted_plane(j.at("distance").get<double>(), j.value("tilt_x_deg", 0.0), j.value("tilt_y_deg", 0.0), albedo);
        } else if (type == "sinusoid") {
            s = make_sinusoid_scene(j.at("distance").get<double>(), j.at("amplitude").get<double>(),
                                    j.at("wavelength").get<double>(), j.value("half_extent", 0.8), j.value("cell", 0.001), albedo);
        } else if (type == "bumps") {
            s = make_bumps_scene(j.at("distance").get<double>(), j.at("max_amplitude").get<double>(), j.at("count").get<int>(),
                                 j.at("seed").get<std::uint64_t>(), j.value("half_extent", 0.8), j.value("cell", 0.002), albedo);
        } else if (type == "heightfield") {
            Heightfield hf;
            hf.nx = j.at("nx").get<int>();
            hf.ny = j.at("ny").get<int>();
            const auto ext = j.at("extent");  // [x0, x1, y0, y1]
            hf.x0 = ext.at(0).get<double>();
            hf.x1 = ext.at(1).get<double>();
            hf.y0 = ext.at(2).get<double>();
            hf.y1 = ext.at(3).get<double>();
            hf.base_z = j.value("base_z", 0.0);
            hf.heights = j.at("heights").get<std::vector<double>>();
            if (hf.nx < 2 || hf.ny < 2 || hf.heights.size() != static_cast<std::size_t>(hf.nx) * hf.ny)
                throw ConfigError("scene: heightfield grid size mismatch");
            if (!(hf.x1 > hf.x0) || !(hf.y1 > hf.y0)) throw ConfigError("scene: heightfield extent is empty");
            for (double v : hf.heights)
                if (!std::isfinite(v)) throw ConfigError("scene: heightfield heights must be finite");
            hf.update_range();
            s.surface = std::move(hf);
            s.albedo = albedo;
            s.spec = j;
        } else if (type == "mesh") {
            Mesh m;
            for (const auto& t : j.at("triangles")) {
                if (t.size() != 3) throw ConfigError("scene: triangle needs 3 vertices");
                m.triangles.push_back({detail::vec3_from_json(t[0]), detail::vec3_from_json(t[1]), detail::vec3_from_json(t[2])});
            }
            s.surface = std::move(m);
            s.albedo = albedo;
            s.spec = j;
        } else {
            throw ConfigError("scene: unknown type '" + type + "'");
        }
        if (j.contains("albedo")) s.spec["albedo"] = to_json(albedo);
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("scene: ") + e.what());
    }
}

// --- dataset ---------------------------------------------------------------------------

struct DatasetRanges {
    double plane_fraction = 0.5;
    double depth_min = 0.85, depth_max = 1.25;
    double max_tilt_deg = 20.0;
    double max_bump_amplitude = 0.03;
    int max_bumps = 8;
    double noise_mean_max = 60.0;
    double noise_std_max = 180.0;
    double brightness_min = 0.6, brightness_max = 1.4;
};

struct DatasetItem {
    Scene scene;
    AugmentConfig augment;
    SceneCapture capture;  // capture.image is the augmented image
    ImageU8 clean_image;
};

struct Dataset {
    std::vector<DatasetItem> items;
    nlohmann::json manifest;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Randomized planes and bump heightfields with augmentation drawn from the roll set and noise ranges.
inline Dataset generate_dataset(int n_scenes, const Rig& rig, const GridPattern& pattern, const DatasetRanges& ranges,
                                std::uint64_t seed) {
    if (n_scenes < 1) throw ConfigError("dataset needs at least one scene");
    Dataset ds;
    ds.manifest = {{"seed", seed}, {"count", n_scenes}, {"rig", to_json(rig)}, {"pattern_seed", pattern.code_seed}};
    nlohmann::json entries = nlohmann::json::array();
    for (int k = 0; k < n_scenes; ++k) {
        const std::uint64_t item_seed = splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(k)));
        std::mt19937_64 rng(item_seed);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        auto uniform = [&](double a, double b) { return a + (b - a) * unit(rng); };
        const double depth = uniform(ranges.depth_min, ranges.depth_max);
        Scene scene;
        if (unit(rng) < ranges.plane_fraction) {
            scene = make_tilted_plane(depth, uniform(-ranges.max_tilt_deg, ranges.max_tilt_deg),
                                      uniform(-ranges.max_tilt_deg, ranges.max_tilt_deg));
        } else {
            const int count = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(std::max(1, ranges.max_bumps)));
            scene = make_bumps_scene(depth, ranges.max_bump_amplitude, count, rng());
        }
        AugmentConfig aug;
        aug.roll_degrees = kRollSet[rng() % kRollSet.size()];
        aug.noise_mean = uniform(0.0, ranges.noise_mean_max);
        aug.noise_std = uniform(0.0, ranges.noise_std_max);
        aug.brightness_scale = uniform(ranges.brightness_min, ranges.brightness_max);
        aug.rng_seed = rng();

        DatasetItem item{scene, aug, render_capture(scene, rig, pattern), {}};
        item.clean_image = item.capture.image;
        item.capture.image = augment(item.clean_image, aug);
        entries.push_back({{"index", k}, {"seed", item_seed}, {"scene", scene.spec}, {"augment", to_json(aug)},
                           {"empty", item.capture.empty}});
        ds.items.push_back(std::move(item));
    }
    ds.manifest["captures"] = std::move(entries);
    return ds;
}

}  // namespace oneshot
