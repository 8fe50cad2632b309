#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace motionbook::kinematics {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// First two columns of a rotation matrix, column-major:
// (R00, R10, R20, R01, R11, R21).
struct Rotation6D {
  std::array<double, 6> v{};

  double operator[](std::size_t i) const { return v[i]; }
  double& operator[](std::size_t i) { return v[i]; }
};

struct RootTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 position = Vec3::Zero();
};

// Kinematic tree. Joint 0 is the root; parents[j] < j for every other joint.
struct Skeleton {
  std::string name;
  std::vector<int> parents;
  std::vector<Vec3> offsets;  // rest-pose bone vectors in the parent frame, meters

  std::size_t joint_count() const { return parents.size(); }
  void validate() const;  // throws InvalidConfig
};

// Joint indices of the built-in 22-joint body skeleton.
namespace joint {
inline constexpr int kPelvis = 0, kLeftHip = 1, kRightHip = 2, kSpine1 = 3, kLeftKnee = 4,
                     kRightKnee = 5, kSpine2 = 6, kLeftAnkle = 7, kRightAnkle = 8, kSpine3 = 9,
                     kLeftFoot = 10, kRightFoot = 11, kNeck = 12, kLeftCollar = 13,
                     kRightCollar = 14, kHead = 15, kLeftShoulder = 16, kRightShoulder = 17,
                     kLeftElbow = 18, kRightElbow = 19, kLeftWrist = 20, kRightWrist = 21;
inline constexpr int kBodyJointCount = 22;
}  // namespace joint

// Root + 21 body joints with SMPL body topology, y-up, facing +z, meters.
const Skeleton& default_skeleton();

Skeleton skeleton_from_json(const nlohmann::json& doc);
nlohmann::json skeleton_to_json(const Skeleton& skel);
Skeleton load_skeleton(const std::filesystem::path& path);

// Gram-Schmidt on the two stored columns, third column = cross product.
// Throws DegenerateRotation when a normalization divides by a norm < 1e-9.
Mat3 sixd_to_matrix(const Rotation6D& r);

// Throws NotARotation unless R is orthonormal with det +1 within 1e-4.
Rotation6D matrix_to_sixd(const Mat3& R);

bool is_rotation(const Mat3& R, double tol);

Mat3 axis_angle_to_matrix(const Vec3& axis_angle);
Mat3 rotation_x(double radians);
Mat3 rotation_y(double radians);
Mat3 rotation_z(double radians);

// Global joint positions. joint_rots holds local rotations for joints 1..J-1.
std::vector<Vec3> forward_kinematics(const Skeleton& skel, const RootTransform& root,
                                     std::span<const Mat3> joint_rots);

}  // namespace motionbook::kinematics
