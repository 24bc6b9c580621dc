#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace avatar {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Mat34 = Eigen::Matrix<double, 3, 4>;
using MatX = Eigen::MatrixXd;
using VecX = Eigen::VectorXd;
using MatX3 = Eigen::Matrix<double, Eigen::Dynamic, 3>;
using FaceMat = Eigen::Matrix<int, Eigen::Dynamic, 3>;

// A computation degenerated numerically (singular blend transform,
// non-finite field output, diverged loss).
class numerical_error : public std::runtime_error {
 public:
  explicit numerical_error(const std::string& msg) : std::runtime_error(msg) {}
};

// An operation was invoked without a required precondition (e.g. a
// backward pass without its forward cache).
class precondition_error : public std::logic_error {
 public:
  explicit precondition_error(const std::string& msg) : std::logic_error(msg) {}
};

inline double clamp01(double x) { return x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x); }

}  // namespace avatar
