#include "motionbook/kinematics.hpp"

#include <cmath>
#include <fstream>

#include <Eigen/Geometry>

#include "motionbook/error.hpp"

namespace motionbook::kinematics {

namespace {

constexpr double kNormFloor = 1e-9;
constexpr double kRotationInputTol = 1e-4;

}  // namespace

void Skeleton::validate() const {
  require(!parents.empty(), ErrorKind::kInvalidConfig, "skeleton has no joints");
  require(parents.size() == offsets.size(), ErrorKind::kInvalidConfig,
          "skeleton parents/offsets length mismatch");
  require(parents[0] < 0, ErrorKind::kInvalidConfig, "joint 0 must be the root (parent -1)");
  for (std::size_t j = 1; j < parents.size(); ++j) {
    require(parents[j] >= 0 && static_cast<std::size_t>(parents[j]) < j,
            ErrorKind::kInvalidConfig,
            "skeleton joint " + std::to_string(j) + " must have a parent index below it");
  }
  for (const auto& o : offsets) {
    require(o.allFinite(), ErrorKind::kInvalidConfig, "skeleton offsets must be finite");
  }
}

const Skeleton& default_skeleton() {
  static const Skeleton skel = [] {
    Skeleton s;
    s.name = "smpl-body-22";
    s.parents = {-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19};
    s.offsets = {
        {0.0, 0.0, 0.0},       // pelvis
        {0.06, -0.09, 0.0},    // left hip
        {-0.06, -0.09, 0.0},   // right hip
        {0.0, 0.11, -0.02},    // spine1
        {0.04, -0.38, 0.0},    // left knee
        {-0.04, -0.38, 0.0},   // right knee
        {0.0, 0.13, 0.0},      // spine2
        {-0.01, -0.40, -0.04}, // left ankle
        {0.01, -0.40, -0.04},  // right ankle
        {0.0, 0.05, 0.02},     // spine3
        {0.02, -0.04, 0.12},   // left foot
        {-0.02, -0.04, 0.12},  // right foot
        {0.0, 0.21, -0.03},    // neck
        {0.07, 0.11, -0.01},   // left collar
        {-0.07, 0.11, -0.01},  // right collar
        {0.0, 0.09, 0.05},     // head
        {0.12, 0.05, -0.01},   // left shoulder
        {-0.12, 0.05, -0.01},  // right shoulder
        {0.26, 0.0, -0.02},    // left elbow
        {-0.26, 0.0, -0.02},   // right elbow
        {0.25, 0.01, 0.0},     // left wrist
        {-0.25, 0.01, 0.0},    // right wrist
    };
    return s;
  }();
  return skel;
}

Skeleton skeleton_from_json(const nlohmann::json& doc) {
  Skeleton s;
  try {
    s.name = doc.at("name").get<std::string>();
    s.parents = doc.at("parents").get<std::vector<int>>();
    for (const auto& o : doc.at("offsets")) {
      auto v = o.get<std::vector<double>>();
      require(v.size() == 3, ErrorKind::kInvalidConfig, "skeleton offsets must be [x,y,z]");
      s.offsets.emplace_back(v[0], v[1], v[2]);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kInvalidConfig, std::string("bad skeleton document: ") + e.what());
  }
  s.validate();
  return s;
}

nlohmann::json skeleton_to_json(const Skeleton& skel) {
  nlohmann::json offsets = nlohmann::json::array();
  for (const auto& o : skel.offsets) offsets.push_back({o.x(), o.y(), o.z()});
  return {{"name", skel.name}, {"parents", skel.parents}, {"offsets", offsets}};
}

Skeleton load_skeleton(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::kIo, "cannot open skeleton file: " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kInvalidConfig, "cannot parse skeleton file " + path.string() + ": " + e.what());
  }
  return skeleton_from_json(doc);
}

Mat3 sixd_to_matrix(const Rotation6D& r) {
  const Vec3 a(r[0], r[1], r[2]);
  const Vec3 b(r[3], r[4], r[5]);
  const double na = a.norm();
  if (!(na >= kNormFloor)) fail(ErrorKind::kDegenerateRotation, "6D rotation: first column is ~zero");
  const Vec3 c1 = a / na;
  const Vec3 resid = b - c1.dot(b) * c1;
  const double nr = resid.norm();
  if (!(nr >= kNormFloor)) {
    fail(ErrorKind::kDegenerateRotation, "6D rotation: columns are linearly dependent");
  }
  const Vec3 c2 = resid / nr;
  Mat3 R;
  R.col(0) = c1;
  R.col(1) = c2;
  R.col(2) = c1.cross(c2);
  return R;
}

bool is_rotation(const Mat3& R, double tol) {
  if (!R.allFinite()) return false;
  const double orth = (R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff();
  return orth <= tol && std::abs(R.determinant() - 1.0) <= tol;
}

Rotation6D matrix_to_sixd(const Mat3& R) {
  require(is_rotation(R, kRotationInputTol), ErrorKind::kNotARotation,
          "matrix is not a rotation within 1e-4");
  Rotation6D out;
  for (int i = 0; i < 3; ++i) {
    out[i] = R(i, 0);
    out[3 + i] = R(i, 1);
  }
  return out;
}

Mat3 axis_angle_to_matrix(const Vec3& axis_angle) {
  const double angle = axis_angle.norm();
  if (angle < 1e-12) return Mat3::Identity();
  return Eigen::AngleAxisd(angle, axis_angle / angle).toRotationMatrix();
}

Mat3 rotation_x(double radians) { return Eigen::AngleAxisd(radians, Vec3::UnitX()).toRotationMatrix(); }
Mat3 rotation_y(double radians) { return Eigen::AngleAxisd(radians, Vec3::UnitY()).toRotationMatrix(); }
Mat3 rotation_z(double radians) { return Eigen::AngleAxisd(radians, Vec3::UnitZ()).toRotationMatrix(); }

std::vector<Vec3> forward_kinematics(const Skeleton& skel, const RootTransform& root,
                                     std::span<const Mat3> joint_rots) {
  const std::size_t J = skel.joint_count();
  require(J >= 1 && joint_rots.size() == J - 1, ErrorKind::kShapeMismatch,
          "forward_kinematics: expected " + std::to_string(J - 1) + " joint rotations, got " +
              std::to_string(joint_rots.size()));
  require(is_rotation(root.rotation, kRotationInputTol), ErrorKind::kNotARotation,
          "forward_kinematics: root rotation is not orthonormal");

  std::vector<Mat3> global(J);
  std::vector<Vec3> pos(J);
  global[0] = root.rotation;
  pos[0] = root.position;
  for (std::size_t j = 1; j < J; ++j) {
    const Mat3& local = joint_rots[j - 1];
    require(is_rotation(local, kRotationInputTol), ErrorKind::kNotARotation,
            "forward_kinematics: rotation of joint " + std::to_string(j) + " is not orthonormal");
    const auto p = static_cast<std::size_t>(skel.parents[j]);
    pos[j] = pos[p] + global[p] * skel.offsets[j];
    global[j] = global[p] * local;
  }
  return pos;
}

}  // namespace motionbook::kinematics
