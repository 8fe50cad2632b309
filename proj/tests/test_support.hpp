#pragma once

#include <numbers>

#include "motionbook/features.hpp"
#include "motionbook/rng.hpp"

namespace motionbook::testing {

inline kinematics::Mat3 random_rotation(Rng& rng, double max_angle = std::numbers::pi) {
  kinematics::Vec3 axis(rng.normal(), rng.normal(), rng.normal());
  axis.normalize();
  return kinematics::axis_angle_to_matrix(axis * rng.uniform(-max_angle, max_angle));
}

// Random 22-joint stream with a wandering root.
inline features::PoseStream random_stream(Rng& rng, std::size_t frames) {
  features::PoseStream s;
  s.fps = 30;
  kinematics::Vec3 pos(rng.normal(), 0.9, rng.normal());
  for (std::size_t t = 0; t < frames; ++t) {
    features::PoseFrame f;
    f.root.rotation = random_rotation(rng);
    pos += kinematics::Vec3(rng.normal(0, 0.02), rng.normal(0, 0.005), rng.normal(0, 0.02));
    f.root.position = pos;
    for (int j = 0; j < 21; ++j) f.joint_rots.push_back(random_rotation(rng, 1.5));
    s.frames.push_back(std::move(f));
  }
  return s;
}

inline features::PoseStream static_stream(std::size_t frames, double height) {
  features::PoseStream s;
  for (std::size_t t = 0; t < frames; ++t) {
    features::PoseFrame f;
    f.root.position = kinematics::Vec3(0.3, height, -0.2);
    f.joint_rots.assign(21, kinematics::Mat3::Identity());
    s.frames.push_back(std::move(f));
  }
  return s;
}

}  // namespace motionbook::testing
