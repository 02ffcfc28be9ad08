#pragma once

#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace driftalign {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat3 = Eigen::Matrix3d;
using Mat36 = Eigen::Matrix<double, 3, 6>;

/// Base class for every error raised by the library. `kind` is a short
/// machine-readable tag ("io", "config", "domain", ...) surfaced by the CLI.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

}  // namespace driftalign
