#pragma once

// Triangulation of dense correspondences and evaluation against ground truth.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "oneshot/core/error.hpp"
#include "oneshot/core/geometry.hpp"
#include "oneshot/core/image.hpp"
#include "oneshot/core/parallel.hpp"
#include "oneshot/unwrap.hpp"

namespace oneshot {

static_assert(std::endian::native == std::endian::little, "binary PLY output assumes a little-endian host");

struct PointCloud {
    std::vector<Vec3> points;             // world frame, meters
    std::vector<Eigen::Vector2i> pixels;  // source camera pixel
    std::vector<float> intensity;         // empty or one per point

    std::size_t size() const { return points.size(); }
};

struct Triangulation {
    PointCloud cloud;
    ImageD depth;      // camera-frame z, 0 where invalid
    ImageU8 valid;
    long dropped_parallel = 0;
    long dropped_behind = 0;
    long ray_ray = 0;  // points from the midpoint fallback
};

/// Closest-approach midpoint of two rays; nullopt when they are parallel.
inline std::optional<Vec3> ray_ray_midpoint(const Ray& a, const Ray& b) {
    const Vec3 w0 = a.origin - b.origin;
    const double aa = a.dir.dot(a.dir), bb = b.dir.dot(b.dir), ab = a.dir.dot(b.dir);
    const double da = a.dir.dot(w0), db = b.dir.dot(w0);
    const double den = aa * bb - ab * ab;
    if (std::abs(den) < 1e-15) return std::nullopt;
    const double s = (ab * db - bb * da) / den, t = (aa * db - ab * da) / den;
    return 0.5 * (a.at(s) + b.at(t));
}

/// Camera ray through (x, y) intersected with the projector column plane through u_p. Rays within
/// `min_angle_deg` of the plane fall back to the ray-ray midpoint with the projector ray through
/// (u_p, v_p), or are dropped when v_p is unavailable.
inline Triangulation triangulate(const CorrespondenceMap& corr, const Rig& rig, const ImageU8* intensity = nullptr,
                                 double min_angle_deg = 0.1, bool use_v = true) {
    rig.validate();
    const int w = corr.width(), h = corr.height();
    Triangulation t{{}, ImageD(w, h, 0.0), ImageU8(w, h, 0)};
    const auto& cam = rig.camera;
    const auto& proj = rig.projector;
    const double sin_min = std::sin(min_angle_deg * M_PI / 180.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!corr.valid(x, y)) continue;
            const Ray r = cam.ray(x, y);
            const double up = corr.u(x, y);
            const Vec3 n_dev(proj.fx, 0.0, -(up - proj.cx));
            const Vec3 n = proj.rotation.transpose() * n_dev;
            const double off = -n_dev.dot(proj.translation);
            const double den = n.dot(r.dir);
            std::optional<Vec3> p;
            if (std::abs(den) >= sin_min * n.norm()) {
                p = r.at((off - n.dot(r.origin)) / den);
            } else if (use_v) {
                p = ray_ray_midpoint(r, proj.ray(up, corr.v(x, y)));
                if (p) ++t.ray_ray;
            }
            if (!p) {
                ++t.dropped_parallel;
                continue;
            }
            const double zc = cam.to_device(*p).z(), zp = proj.to_device(*p).z();
            if (!(zc > 0) || !(zp > 0) || !p->allFinite()) {
                ++t.dropped_behind;
                continue;
            }
            t.depth(x, y) = zc;
            t.valid(x, y) = 1;
            t.cloud.points.push_back(*p);
            t.cloud.pixels.push_back({x, y});
            if (intensity) t.cloud.intensity.push_back(static_cast<float>((*intensity)(x, y)));
        }
    return t;
}

/// Rebuilds a triangulation from a stored depth map (0 = invalid) by scaling camera rays.
inline Triangulation triangulation_from_depth(const ImageF& depth, const PinholeModel& camera) {
    const int w = depth.width(), h = depth.height();
    Triangulation t{{}, ImageD(w, h, 0.0), ImageU8(w, h, 0)};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double z = depth(x, y);
            if (!(z > 0) || !std::isfinite(z)) continue;
            const Ray r = camera.ray(x, y);
            const double dz = (camera.rotation * r.dir).z();
            if (!(dz > 0)) continue;
            t.depth(x, y) = z;
            t.valid(x, y) = 1;
            t.cloud.points.push_back(r.at((z - camera.to_device(r.origin).z()) / dz));
            t.cloud.pixels.push_back({x, y});
        }
    return t;
}

// --- metrics -----------------------------------------------------------------------------

struct Plane {
    Vec3 normal = Vec3(0, 0, 1);  // unit
    double offset = 0.0;          // normal . X = offset
    double distance(const Vec3& p) const { return normal.dot(p) - offset; }
};

/// Total-least-squares plane through the points (SVD of the centered coordinates).
inline Plane fit_plane(const std::vector<Vec3>& pts) {
    if (pts.size() < 3) throw StageError("eval", "plane fit needs at least three points");
    Vec3 c = Vec3::Zero();
    for (const auto& p : pts) c += p;
    c /= static_cast<double>(pts.size());
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (const auto& p : pts) cov += (p - c) * (p - c).transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
    Plane pl;
    pl.normal = es.eigenvectors().col(0).normalized();
    pl.offset = pl.normal.dot(c);
    return pl;
}

inline double rms_distance_mm(const std::vector<Vec3>& pts, const Plane& pl) {
    if (pts.empty()) return 0.0;
    double s = 0;
    for (const auto& p : pts) s += pl.distance(p) * pl.distance(p);
    return 1000.0 * std::sqrt(s / static_cast<double>(pts.size()));
}

struct MetricsReport {
    double rmse_mm = 0.0;             // point-to-plane for plane targets, depth difference otherwise
    double depth_rmse_mm = 0.0;       // over the shared mask
    double plane_fit_rmse_mm = -1.0;  // residual of a best-fit plane; -1 when not a plane target
    double inlier_fraction = 0.0;     // |error| below the inlier threshold
    double coverage = 0.0;            // valid / ground-truth foreground
    long points = 0;
    double inlier_threshold_mm = 5.0;
};

inline nlohmann::json to_json(const MetricsReport& m) {
    return {{"rmse_mm", m.rmse_mm},
            {"depth_rmse_mm", m.depth_rmse_mm},
            {"plane_fit_rmse_mm", m.plane_fit_rmse_mm},
            {"inlier_fraction", m.inlier_fraction},
            {"coverage", m.coverage},
            {"points", m.points},
            {"inlier_threshold_mm", m.inlier_threshold_mm}};
}

/// RMSE of pred - gt depth in mm over pixels valid in both.
inline double depth_rmse_mm(const ImageD& pred, const ImageU8& pred_valid, const ImageF& gt, const ImageU8& gt_valid) {
    double s = 0;
    long n = 0;
    for (int y = 0; y < pred.height(); ++y)
        for (int x = 0; x < pred.width(); ++x)
            if (pred_valid(x, y) && gt_valid(x, y)) {
                const double e = pred(x, y) - gt(x, y);
                s += e * e;
                ++n;
            }
    if (n == 0) throw StageError("eval", "prediction and ground truth share no valid pixel");
    return 1000.0 * std::sqrt(s / static_cast<double>(n));
}

/// Metrics of a triangulation against ground-truth depth; `plane` switches the headline RMSE to
/// point-to-plane distance. The masks must overlap unless the prediction is empty.
inline MetricsReport evaluate(const Triangulation& t, const ImageF& gt_depth, const ImageU8& gt_valid,
                              const std::optional<Plane>& plane = std::nullopt, double inlier_mm = 5.0) {
    if (!t.depth.same_shape(gt_depth) || !t.depth.same_shape(gt_valid)) throw StageError("eval", "prediction and ground truth differ in size");
    MetricsReport m;
    m.inlier_threshold_mm = inlier_mm;
    long fg = 0, shared = 0, inliers = 0;
    for (int y = 0; y < gt_valid.height(); ++y)
        for (int x = 0; x < gt_valid.width(); ++x) {
            fg += gt_valid(x, y) != 0;
            shared += gt_valid(x, y) && t.valid(x, y);
        }
    m.points = static_cast<long>(t.cloud.size());
    if (m.points == 0) return m;  // empty prediction: coverage 0
    if (shared == 0) throw StageError("eval", "prediction and ground truth share no valid pixel");
    m.coverage = fg > 0 ? static_cast<double>(shared) / static_cast<double>(fg) : 0.0;
    m.depth_rmse_mm = depth_rmse_mm(t.depth, t.valid, gt_depth, gt_valid);
    std::vector<Vec3> pts;
    double s = 0;
    for (std::size_t k = 0; k < t.cloud.size(); ++k) {
        const auto px = t.cloud.pixels[k];
        if (!gt_valid(px.x(), px.y())) continue;
        const double e = plane ? plane->distance(t.cloud.points[k]) : t.depth(px.x(), px.y()) - gt_depth(px.x(), px.y());
        s += e * e;
        inliers += std::abs(e) * 1000.0 < inlier_mm;
        pts.push_back(t.cloud.points[k]);
    }
    m.rmse_mm = 1000.0 * std::sqrt(s / static_cast<double>(pts.size()));
    m.inlier_fraction = static_cast<double>(inliers) / static_cast<double>(pts.size());
    if (plane && pts.size() >= 3) m.plane_fit_rmse_mm = rms_distance_mm(pts, fit_plane(pts));
    return m;
}

/// Depth along one image row as CSV: x, predicted mm (empty if invalid), ground truth mm.
inline std::string profile_csv(const Triangulation& t, const ImageF& gt_depth, const ImageU8& gt_valid, int row) {
    if (row < 0 || row >= t.depth.height()) throw StageError("eval", "profile row outside the image");
    std::ostringstream os;
    os.precision(9);
    os << "x,pred_mm,gt_mm\n";
    for (int x = 0; x < t.depth.width(); ++x) {
        os << x << ',';
        if (t.valid(x, row)) os << 1000.0 * t.depth(x, row);
        os << ',';
        if (gt_valid(x, row)) os << 1000.0 * gt_depth(x, row);
        os << '\n';
    }
    return os.str();
}

// --- PLY ---------------------------------------------------------------------------------

inline void write_ply(const PointCloud& c, const std::string& path, bool binary = true, const std::vector<std::string>& comments = {}) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw StageError("reconstruct", "cannot write " + path);
    const bool with_i = !c.intensity.empty();
    os << "ply\nformat " << (binary ? "binary_little_endian" : "ascii") << " 1.0\n";
    for (const auto& c_line : comments) os << "comment " << c_line << "\n";
    os << "element vertex " << c.size() << "\n"
       << "property double x\nproperty double y\nproperty double z\n";
    if (with_i) os << "property float intensity\n";
    os << "end_header\n";
    if (binary) {
        std::vector<char> buf;
        buf.reserve(c.size() * (24 + (with_i ? 4 : 0)));
        auto put = [&](const void* p, std::size_t n) {
            const char* b = static_cast<const char*>(p);
            buf.insert(buf.end(), b, b + n);
        };
        for (std::size_t k = 0; k < c.size(); ++k) {
            put(c.points[k].data(), 24);
            if (with_i) put(&c.intensity[k], 4);
        }
        os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    } else {
        os.precision(17);
        for (std::size_t k = 0; k < c.size(); ++k) {
            os << c.points[k].x() << ' ' << c.points[k].y() << ' ' << c.points[k].z();
            if (with_i) os << ' ' << c.intensity[k];
            os << '\n';
        }
    }
    if (!os) throw StageError("reconstruct", "write failed for " + path);
}

/// Reads clouds written by write_ply (x, y, z as float or double, optional intensity).
inline PointCloud read_ply(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path);
    std::string line, format;
    std::size_t count = 0;
    struct Prop {
        std::string type, name;
    };
    std::vector<Prop> props;
    std::getline(is, line);
    if (line != "ply") throw FormatError(path + ": not a PLY file");
    while (std::getline(is, line)) {
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "format") ls >> format;
        else if (key == "element") {
            std::string name;
            ls >> name >> count;
            if (name != "vertex") throw FormatError(path + ": unsupported element " + name);
        } else if (key == "property") {
            Prop p;
            ls >> p.type >> p.name;
            props.push_back(p);
        } else if (key == "end_header") break;
    }
    if (format != "ascii" && format != "binary_little_endian") throw FormatError(path + ": unsupported PLY format " + format);
    PointCloud c;
    const bool with_i = props.size() == 4 && props[3].name == "intensity";
    if (props.size() < 3 || props[0].name != "x" || props[1].name != "y" || props[2].name != "z")
        throw FormatError(path + ": expected x, y, z properties");
    for (std::size_t k = 0; k < count; ++k) {
        double v[4] = {0, 0, 0, 0};
        for (std::size_t p = 0; p < props.size(); ++p) {
            if (format == "ascii") {
                if (!(is >> v[p])) throw FormatError(path + ": truncated vertex data");
            } else if (props[p].type == "double") {
                if (!is.read(reinterpret_cast<char*>(&v[p]), 8)) throw FormatError(path + ": truncated vertex data");
            } else if (props[p].type == "float") {
                float f;
                if (!is.read(reinterpret_cast<char*>(&f), 4)) throw FormatError(path + ": truncated vertex data");
                v[p] = f;
            } else {
                throw FormatError(path + ": unsupported property type " + props[p].type);
            }
        }
        c.points.emplace_back(v[0], v[1], v[2]);
        if (with_i) c.intensity.push_back(static_cast<float>(v[3]));
    }
    return c;
}

}  // namespace oneshot
