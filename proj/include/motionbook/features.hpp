#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "motionbook/kinematics.hpp"

namespace motionbook::features {

using kinematics::Mat3;
using kinematics::Vec3;

// Values are the on-disk format tags of MOTB files.
enum class FeatureFormat : std::uint32_t {
  kH3dD263 = 1,
  kSmplD130 = 2,
  kSmplD135 = 3,
  kSmplD263 = 4,
  kSmplD268 = 5,
};

inline constexpr std::array<FeatureFormat, 5> kAllFormats = {
    FeatureFormat::kH3dD263, FeatureFormat::kSmplD130, FeatureFormat::kSmplD135,
    FeatureFormat::kSmplD263, FeatureFormat::kSmplD268};

std::size_t feature_width(FeatureFormat fmt);
std::string_view format_name(FeatureFormat fmt);
FeatureFormat parse_format(std::string_view name);  // throws UnsupportedFormat
FeatureFormat format_from_tag(std::uint32_t tag);    // throws UnsupportedFormat
bool is_smpl_family(FeatureFormat fmt);

// Root XZ velocity frame. Only world frame is implemented; the enum keeps room
// for a root-relative variant.
enum class RootVelocityFrame { kWorld };

// Column layout of every format. Blocks absent from a format have width 0.
struct FeatureLayout {
  std::size_t root_rot6d = 0, root_rot6d_width = 0;  // 6D root rotation (D135 family)
  std::size_t yaw_velocity = 0, yaw_velocity_width = 0;  // 1-D root angular velocity
  std::size_t root_velocity = 0;                         // 2 dims: x, z (m/frame)
  std::size_t root_height = 0;                           // 1 dim (m)
  std::size_t joint_rot6d = 0;                           // 21 x 6
  std::size_t positions = 0, positions_width = 0;        // 21 x 3, root-centered
  std::size_t velocities = 0, velocities_width = 0;      // 22 x 3
  std::size_t contacts = 0, contacts_width = 0;          // 4
  std::size_t width = 0;
};
FeatureLayout feature_layout(FeatureFormat fmt);

// T x D frame-major feature matrix.
class MotionSequence {
 public:
  MotionSequence() = default;
  MotionSequence(FeatureFormat format, std::uint32_t fps, std::size_t frames);
  // Throws ShapeMismatch / NonFiniteValue when data violates the format.
  MotionSequence(FeatureFormat format, std::uint32_t fps, std::size_t frames,
                 std::vector<float> data);

  FeatureFormat format() const { return format_; }
  std::uint32_t fps() const { return fps_; }
  std::size_t frames() const { return frames_; }
  std::size_t width() const { return width_; }

  std::span<float> frame(std::size_t t) { return {data_.data() + t * width_, width_}; }
  std::span<const float> frame(std::size_t t) const { return {data_.data() + t * width_, width_}; }
  float& at(std::size_t t, std::size_t d) { return data_[t * width_ + d]; }
  float at(std::size_t t, std::size_t d) const { return data_[t * width_ + d]; }

  std::span<const float> data() const { return data_; }
  std::span<float> data() { return data_; }

  // First `frames` frames.
  MotionSequence head(std::size_t frames) const;
  void validate() const;

 private:
  FeatureFormat format_ = FeatureFormat::kSmplD135;
  std::uint32_t fps_ = 30;
  std::size_t frames_ = 0;
  std::size_t width_ = 0;
  std::vector<float> data_;
};

struct PoseFrame {
  kinematics::RootTransform root;
  std::vector<Mat3> joint_rots;  // local rotations of joints 1..J-1
};

struct PoseStream {
  std::uint32_t fps = 30;
  std::vector<PoseFrame> frames;
};

// Per-frame flags: left heel, right heel, left toe, right toe.
using FootContact = std::array<std::uint8_t, 4>;

struct ContactThresholds {
  double velocity = 0.002;  // m/frame
  double height = 0.05;     // m
};

using JointPositions = std::vector<std::vector<Vec3>>;  // T x J

// Positions of every joint at every frame of the stream.
JointPositions stream_positions(const PoseStream& stream,
                                const kinematics::Skeleton& skel = kinematics::default_skeleton());

MotionSequence encode_smpl_d135(const PoseStream& stream);

// Integrates XZ velocities from initial_xz (x, z); rotations via Gram-Schmidt.
PoseStream decode_smpl_d135(const MotionSequence& m, const Eigen::Vector2d& initial_xz);

// Any of the five formats. H3D-D263 rotations are copied from the stream.
MotionSequence encode_format(const PoseStream& stream, FeatureFormat fmt,
                             const ContactThresholds& contact = {},
                             const kinematics::Skeleton& skel = kinematics::default_skeleton());

// Decodes any SMPL-family format. D130/D263 carry only root yaw, integrated from 0.
PoseStream decode_pose_stream(const MotionSequence& m, const Eigen::Vector2d& initial_xz);

std::vector<FootContact> derive_foot_contact(const JointPositions& positions,
                                             const ContactThresholds& thresholds = {});

// Decode with initial_xz = (0, 0) then FK per frame. H3D-D263 positions come
// from its positional block with the integrated root added back.
JointPositions to_joint_positions(const MotionSequence& m,
                                  const kinematics::Skeleton& skel = kinematics::default_skeleton());

// Root yaw (rotation about +y) of a root orientation, from its forward axis.
double root_yaw(const Mat3& root_rotation);

}  // namespace motionbook::features
