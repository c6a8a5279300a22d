#pragma once

#include <cmath>
#include <optional>

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <nlohmann/json.hpp>

#include "oneshot/core/error.hpp"

namespace oneshot {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct Ray {
    Vec3 origin;
    Vec3 dir;  // unit length
    Vec3 at(double t) const { return origin + t * dir; }
};

/// Pinhole device (camera, or projector treated as an inverse camera).
/// Device coordinates: x_dev = rotation * x_world + translation; +z looks forward.
struct PinholeModel {
    double fx = 600.0, fy = 600.0;
    double cx = 319.5, cy = 239.5;
    int width = 640, height = 480;
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    Vec3 center() const { return -rotation.transpose() * translation; }

    Vec3 to_device(const Vec3& world) const { return rotation * world + translation; }

    /// Pixel of a device-frame point; nullopt behind the device.
    std::optional<Vec2> project_device(const Vec3& p) const {
        if (!(p.z() > 0.0)) return std::nullopt;
        return Vec2(fx * p.x() / p.z() + cx, fy * p.y() / p.z() + cy);
    }

    std::optional<Vec2> project(const Vec3& world) const { return project_device(to_device(world)); }

    /// World-frame ray through pixel (x, y).
    Ray ray(double x, double y) const {
        Vec3 d_dev((x - cx) / fx, (y - cy) / fy, 1.0);
        return {center(), (rotation.transpose() * d_dev).normalized()};
    }

    void validate(const char* what = "device") const {
        if (!(fx > 0.0) || !(fy > 0.0)) throw ConfigError(std::string(what) + ": focal lengths must be positive");
        if (width <= 0 || height <= 0) throw ConfigError(std::string(what) + ": resolution must be positive");
        if ((rotation.transpose() * rotation - Mat3::Identity()).norm() >= 1e-9)
            throw ConfigError(std::string(what) + ": rotation is not orthonormal");
        if (rotation.determinant() < 0.0) throw ConfigError(std::string(what) + ": rotation is a reflection");
    }
};

/// Calibrated projector-camera pair.
struct Rig {
    PinholeModel camera;
    PinholeModel projector;

    double baseline() const { return (camera.center() - projector.center()).norm(); }

    void validate() const {
        camera.validate("camera");
        projector.validate("projector");
        if (baseline() < 1e-6) throw ConfigError("degenerate baseline: camera and projector share a center");
    }
};

/// Rotation of `deg` degrees about the device y axis (toe-in).
inline Mat3 rotation_about_y(double deg) {
    return Eigen::AngleAxisd(deg * M_PI / 180.0, Vec3::UnitY()).toRotationMatrix();
}

/// Default desk-scale rig: VGA camera at the origin, projector 0.2 m to its right with parallel axes.
inline Rig default_rig() {
    Rig r;
    r.camera = PinholeModel{};
    r.projector.fx = r.projector.fy = 430.0;
    r.projector.width = 640;
    r.projector.height = 480;
    r.projector.cx = 319.5;
    r.projector.cy = 239.5;
    r.projector.rotation = Mat3::Identity();
    r.projector.translation = Vec3(-0.2, 0.0, 0.0);  // center at world x = +0.2
    return r;
}

// --- JSON ------------------------------------------------------------------

inline nlohmann::json to_json(const PinholeModel& m) {
    nlohmann::json r = nlohmann::json::array();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) r.push_back(m.rotation(i, j));
    return {{"fx", m.fx}, {"fy", m.fy}, {"cx", m.cx}, {"cy", m.cy}, {"width", m.width}, {"height", m.height},
            {"rotation", r}, {"translation", {m.translation.x(), m.translation.y(), m.translation.z()}}};
}

inline PinholeModel pinhole_from_json(const nlohmann::json& j) {
    PinholeModel m;
    m.fx = j.at("fx").get<double>();
    m.fy = j.at("fy").get<double>();
    m.cx = j.at("cx").get<double>();
    m.cy = j.at("cy").get<double>();
    m.width = j.at("width").get<int>();
    m.height = j.at("height").get<int>();
    if (j.contains("rotation")) {
        const auto& r = j.at("rotation");
        if (r.size() != 9) throw ConfigError("rotation must have 9 entries (row-major)");
        for (int i = 0; i < 3; ++i)
            for (int k = 0; k < 3; ++k) m.rotation(i, k) = r[3 * i + k].get<double>();
    }
    if (j.contains("translation")) {
        const auto& t = j.at("translation");
        if (t.size() != 3) throw ConfigError("translation must have 3 entries");
        m.translation = Vec3(t[0].get<double>(), t[1].get<double>(), t[2].get<double>());
    }
    return m;
}

inline nlohmann::json to_json(const Rig& r) { return {{"camera", to_json(r.camera)}, {"projector", to_json(r.projector)}}; }

inline Rig rig_from_json(const nlohmann::json& j) {
    try {
        return Rig{pinhole_from_json(j.at("camera")), pinhole_from_json(j.at("projector"))};
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("calibration: ") + e.what());
    }
}

}  // namespace oneshot
