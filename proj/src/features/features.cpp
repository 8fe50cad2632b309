#include "motionbook/features.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "motionbook/error.hpp"

namespace motionbook::features {

namespace {

using kinematics::Rotation6D;
using kinematics::Skeleton;

constexpr std::size_t kBodyJoints = kinematics::joint::kBodyJointCount;
constexpr std::size_t kRotatedJoints = kBodyJoints - 1;  // 21
constexpr std::array<int, 4> kContactJoints = {kinematics::joint::kLeftAnkle,
                                               kinematics::joint::kRightAnkle,
                                               kinematics::joint::kLeftFoot,
                                               kinematics::joint::kRightFoot};

double wrap_angle(double a) {
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  a = std::fmod(a + std::numbers::pi, kTwoPi);
  if (a < 0) a += kTwoPi;
  return a - std::numbers::pi;
}

// Forward difference over frames; the last slot repeats the previous
// difference, and a single frame has zero velocity.
template <typename Get>
std::vector<Vec3> forward_difference(std::size_t T, Get position) {
  std::vector<Vec3> v(T, Vec3::Zero());
  for (std::size_t t = 0; t + 1 < T; ++t) v[t] = position(t + 1) - position(t);
  if (T >= 2) v[T - 1] = v[T - 2];
  return v;
}

void check_stream(const PoseStream& stream) {
  require(!stream.frames.empty(), ErrorKind::kTooShort, "pose stream has no frames");
  for (const auto& f : stream.frames) {
    require(f.joint_rots.size() == kRotatedJoints, ErrorKind::kWrongJointCount,
            "expected a 22-joint stream (21 joint rotations), got " +
                std::to_string(f.joint_rots.size() + 1) + " joints");
  }
}

void put_sixd(std::span<float> out, const Mat3& R) {
  const Rotation6D r = kinematics::matrix_to_sixd(R);
  for (std::size_t i = 0; i < 6; ++i) out[i] = static_cast<float>(r[i]);
}

Mat3 get_sixd(std::span<const float> in) {
  Rotation6D r;
  for (std::size_t i = 0; i < 6; ++i) r[i] = in[i];
  return kinematics::sixd_to_matrix(r);
}

}  // namespace

std::size_t feature_width(FeatureFormat fmt) { return feature_layout(fmt).width; }

std::string_view format_name(FeatureFormat fmt) {
  switch (fmt) {
    case FeatureFormat::kH3dD263: return "H3D-D263";
    case FeatureFormat::kSmplD130: return "SMPL-D130";
    case FeatureFormat::kSmplD135: return "SMPL-D135";
    case FeatureFormat::kSmplD263: return "SMPL-D263";
    case FeatureFormat::kSmplD268: return "SMPL-D268";
  }
  fail(ErrorKind::kUnsupportedFormat, "unknown feature format");
}

FeatureFormat parse_format(std::string_view name) {
  for (auto fmt : kAllFormats) {
    if (format_name(fmt) == name) return fmt;
  }
  fail(ErrorKind::kUnsupportedFormat, "unsupported feature format: " + std::string(name));
}

FeatureFormat format_from_tag(std::uint32_t tag) {
  for (auto fmt : kAllFormats) {
    if (static_cast<std::uint32_t>(fmt) == tag) return fmt;
  }
  fail(ErrorKind::kUnsupportedFormat, "unsupported format tag " + std::to_string(tag));
}

bool is_smpl_family(FeatureFormat fmt) { return fmt != FeatureFormat::kH3dD263; }

FeatureLayout feature_layout(FeatureFormat fmt) {
  FeatureLayout L;
  std::size_t next = 0;
  auto yaw_root = [&] {
    L.yaw_velocity = 0;
    L.yaw_velocity_width = 1;
    L.root_velocity = 1;
    L.root_height = 3;
    next = 4;
  };
  auto sixd_root = [&] {
    L.root_rot6d = 0;
    L.root_rot6d_width = 6;
    L.root_velocity = 6;
    L.root_height = 8;
    next = 9;
  };
  auto redundant = [&] {
    L.positions = next;
    L.positions_width = kRotatedJoints * 3;
    L.velocities = L.positions + L.positions_width;
    L.velocities_width = kBodyJoints * 3;
    L.contacts = L.velocities + L.velocities_width;
    L.contacts_width = 4;
    next = L.contacts + 4;
  };
  switch (fmt) {
    case FeatureFormat::kSmplD130:
    case FeatureFormat::kSmplD263:
      yaw_root();
      L.joint_rot6d = next;
      next += kRotatedJoints * 6;
      if (fmt == FeatureFormat::kSmplD263) redundant();
      break;
    case FeatureFormat::kSmplD135:
    case FeatureFormat::kSmplD268:
      sixd_root();
      L.joint_rot6d = next;
      next += kRotatedJoints * 6;
      if (fmt == FeatureFormat::kSmplD268) redundant();
      break;
    case FeatureFormat::kH3dD263:
      yaw_root();
      L.positions = next;
      L.positions_width = kRotatedJoints * 3;
      next += L.positions_width;
      L.joint_rot6d = next;
      next += kRotatedJoints * 6;
      L.velocities = next;
      L.velocities_width = kBodyJoints * 3;
      next += L.velocities_width;
      L.contacts = next;
      L.contacts_width = 4;
      next += 4;
      break;
  }
  L.width = next;
  return L;
}

MotionSequence::MotionSequence(FeatureFormat format, std::uint32_t fps, std::size_t frames)
    : format_(format), fps_(fps), frames_(frames), width_(feature_width(format)),
      data_(frames * width_, 0.0f) {}

MotionSequence::MotionSequence(FeatureFormat format, std::uint32_t fps, std::size_t frames,
                               std::vector<float> data)
    : format_(format), fps_(fps), frames_(frames), width_(feature_width(format)),
      data_(std::move(data)) {
  validate();
}

MotionSequence MotionSequence::head(std::size_t frames) const {
  require(frames <= frames_, ErrorKind::kShapeMismatch, "head() beyond sequence length");
  MotionSequence out(format_, fps_, frames);
  std::copy_n(data_.begin(), frames * width_, out.data_.begin());
  return out;
}

void MotionSequence::validate() const {
  require(frames_ >= 1, ErrorKind::kTooShort, "motion sequence must have at least one frame");
  require(data_.size() == frames_ * width_, ErrorKind::kShapeMismatch,
          "motion data size does not match T x D for " + std::string(format_name(format_)));
  for (float v : data_) {
    require(std::isfinite(v), ErrorKind::kNonFiniteValue, "motion sequence has non-finite entries");
  }
}

double root_yaw(const Mat3& root_rotation) {
  const Vec3 fwd = root_rotation * Vec3::UnitZ();
  return std::atan2(fwd.x(), fwd.z());
}

JointPositions stream_positions(const PoseStream& stream, const Skeleton& skel) {
  JointPositions out;
  out.reserve(stream.frames.size());
  for (const auto& f : stream.frames) {
    out.push_back(kinematics::forward_kinematics(skel, f.root, f.joint_rots));
  }
  return out;
}

MotionSequence encode_smpl_d135(const PoseStream& stream) {
  return encode_format(stream, FeatureFormat::kSmplD135);
}

MotionSequence encode_format(const PoseStream& stream, FeatureFormat fmt,
                             const ContactThresholds& contact, const Skeleton& skel) {
  check_stream(stream);
  require(skel.joint_count() == kBodyJoints, ErrorKind::kWrongJointCount,
          "feature encoding needs the 22-joint body skeleton");
  const FeatureLayout L = feature_layout(fmt);
  const std::size_t T = stream.frames.size();
  MotionSequence m(fmt, stream.fps, T);

  const auto root_vel = forward_difference(T, [&](std::size_t t) -> Vec3 {
    return stream.frames[t].root.position;
  });

  std::vector<double> yaw_vel(T, 0.0);
  if (L.yaw_velocity_width) {
    for (std::size_t t = 0; t + 1 < T; ++t) {
      yaw_vel[t] = wrap_angle(root_yaw(stream.frames[t + 1].root.rotation) -
                              root_yaw(stream.frames[t].root.rotation));
    }
    if (T >= 2) yaw_vel[T - 1] = yaw_vel[T - 2];
  }

  JointPositions positions;
  std::vector<FootContact> contacts;
  std::vector<std::vector<Vec3>> joint_vel;
  if (L.positions_width) {
    positions = stream_positions(stream, skel);
    contacts = derive_foot_contact(positions, contact);
    joint_vel.assign(kBodyJoints, {});
    for (std::size_t j = 0; j < kBodyJoints; ++j) {
      joint_vel[j] = forward_difference(T, [&](std::size_t t) -> Vec3 { return positions[t][j]; });
    }
  }

  for (std::size_t t = 0; t < T; ++t) {
    const PoseFrame& f = stream.frames[t];
    auto row = m.frame(t);
    if (L.root_rot6d_width) put_sixd(row.subspan(L.root_rot6d, 6), f.root.rotation);
    if (L.yaw_velocity_width) row[L.yaw_velocity] = static_cast<float>(yaw_vel[t]);
    row[L.root_velocity] = static_cast<float>(root_vel[t].x());
    row[L.root_velocity + 1] = static_cast<float>(root_vel[t].z());
    row[L.root_height] = static_cast<float>(f.root.position.y());
    for (std::size_t j = 0; j < kRotatedJoints; ++j) {
      put_sixd(row.subspan(L.joint_rot6d + 6 * j, 6), f.joint_rots[j]);
    }
    if (L.positions_width) {
      for (std::size_t j = 1; j < kBodyJoints; ++j) {
        const Vec3 rel = positions[t][j] - positions[t][0];
        for (int k = 0; k < 3; ++k) row[L.positions + 3 * (j - 1) + k] = static_cast<float>(rel[k]);
      }
      for (std::size_t j = 0; j < kBodyJoints; ++j) {
        for (int k = 0; k < 3; ++k) {
          row[L.velocities + 3 * j + k] = static_cast<float>(joint_vel[j][t][k]);
        }
      }
      for (std::size_t c = 0; c < 4; ++c) row[L.contacts + c] = contacts[t][c];
    }
  }
  return m;
}

PoseStream decode_pose_stream(const MotionSequence& m, const Eigen::Vector2d& initial_xz) {
  require(is_smpl_family(m.format()), ErrorKind::kFormatMismatch,
          "decode needs an SMPL-family format, got " + std::string(format_name(m.format())));
  require(m.frames() >= 1, ErrorKind::kTooShort, "cannot decode an empty sequence");
  const FeatureLayout L = feature_layout(m.format());
  PoseStream out;
  out.fps = m.fps();
  out.frames.resize(m.frames());

  double x = initial_xz.x(), z = initial_xz.y(), yaw = 0.0;
  for (std::size_t t = 0; t < m.frames(); ++t) {
    const auto row = m.frame(t);
    PoseFrame& f = out.frames[t];
    if (t > 0) {
      const auto prev = m.frame(t - 1);
      x += prev[L.root_velocity];
      z += prev[L.root_velocity + 1];
      if (L.yaw_velocity_width) yaw += prev[L.yaw_velocity];
    }
    f.root.position = Vec3(x, row[L.root_height], z);
    f.root.rotation = L.root_rot6d_width ? get_sixd(row.subspan(L.root_rot6d, 6))
                                         : kinematics::rotation_y(yaw);
    f.joint_rots.resize(kRotatedJoints);
    for (std::size_t j = 0; j < kRotatedJoints; ++j) {
      f.joint_rots[j] = get_sixd(row.subspan(L.joint_rot6d + 6 * j, 6));
    }
  }
  return out;
}

PoseStream decode_smpl_d135(const MotionSequence& m, const Eigen::Vector2d& initial_xz) {
  require(m.format() == FeatureFormat::kSmplD135, ErrorKind::kFormatMismatch,
          "decode_smpl_d135 got " + std::string(format_name(m.format())));
  return decode_pose_stream(m, initial_xz);
}

std::vector<FootContact> derive_foot_contact(const JointPositions& positions,
                                             const ContactThresholds& thresholds) {
  const std::size_t T = positions.size();
  std::vector<FootContact> out(T, FootContact{});
  for (std::size_t c = 0; c < kContactJoints.size(); ++c) {
    const auto j = static_cast<std::size_t>(kContactJoints[c]);
    const auto vel = forward_difference(T, [&](std::size_t t) -> Vec3 { return positions[t].at(j); });
    for (std::size_t t = 0; t < T; ++t) {
      const bool still = vel[t].norm() < thresholds.velocity;
      const bool low = positions[t][j].y() < thresholds.height;
      out[t][c] = (still && low) ? 1 : 0;
    }
  }
  return out;
}

JointPositions to_joint_positions(const MotionSequence& m, const Skeleton& skel) {
  if (is_smpl_family(m.format())) {
    return stream_positions(decode_pose_stream(m, Eigen::Vector2d::Zero()), skel);
  }
  const FeatureLayout L = feature_layout(m.format());
  JointPositions out(m.frames(), std::vector<Vec3>(kBodyJoints));
  double x = 0.0, z = 0.0;
  for (std::size_t t = 0; t < m.frames(); ++t) {
    const auto row = m.frame(t);
    if (t > 0) {
      x += m.at(t - 1, L.root_velocity);
      z += m.at(t - 1, L.root_velocity + 1);
    }
    const Vec3 root(x, row[L.root_height], z);
    out[t][0] = root;
    for (std::size_t j = 1; j < kBodyJoints; ++j) {
      const std::size_t o = L.positions + 3 * (j - 1);
      out[t][j] = root + Vec3(row[o], row[o + 1], row[o + 2]);
    }
  }
  return out;
}

}  // namespace motionbook::features
