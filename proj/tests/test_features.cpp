#include <doctest.h>

#include <cmath>

#include "motionbook/error.hpp"
#include "motionbook/features.hpp"
#include "test_support.hpp"

using namespace motionbook;
using namespace motionbook::features;
using motionbook::testing::random_stream;
using motionbook::testing::static_stream;

namespace {

double max_feature_diff(const MotionSequence& a, const MotionSequence& b) {
  REQUIRE(a.data().size() == b.data().size());
  double m = 0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    m = std::max(m, static_cast<double>(std::abs(a.data()[i] - b.data()[i])));
  }
  return m;
}

// Mean joint distance in millimeters, written out longhand.
double mpjpe_mm(const JointPositions& a, const JointPositions& b) {
  double total = 0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < a.size(); ++t) {
    for (std::size_t j = 0; j < a[t].size(); ++j) {
      total += (a[t][j] - b[t][j]).norm();
      ++n;
    }
  }
  return 1000.0 * total / static_cast<double>(n);
}

}  // namespace

TEST_CASE("format widths") {
  CHECK(feature_width(FeatureFormat::kSmplD135) == 6 + 2 + 1 + 21 * 6);
  CHECK(feature_width(FeatureFormat::kSmplD130) == 126 + 4);
  CHECK(feature_width(FeatureFormat::kSmplD263) == 130 + 63 + 66 + 4);
  CHECK(feature_width(FeatureFormat::kSmplD268) == 135 + 63 + 66 + 4);
  CHECK(feature_width(FeatureFormat::kH3dD263) == 4 + 63 + 126 + 66 + 4);

  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const auto stream = random_stream(rng, 1 + static_cast<std::size_t>(rng.uniform_int(0, 12)));
    for (auto fmt : kAllFormats) {
      const auto m = encode_format(stream, fmt);
      CHECK(m.width() == feature_width(fmt));
      CHECK(m.frames() == stream.frames.size());
      CHECK(m.data().size() == m.frames() * m.width());
    }
  }
}

TEST_CASE("format names parse back") {
  for (auto fmt : kAllFormats) CHECK(parse_format(format_name(fmt)) == fmt);
  CHECK_THROWS_AS(parse_format("SMPL-D999"), Error);
  CHECK_THROWS_AS(format_from_tag(42), Error);
}

TEST_CASE("static standing pose") {
  const auto m = encode_smpl_d135(static_stream(10, 0.9));
  const auto L = feature_layout(FeatureFormat::kSmplD135);
  for (std::size_t t = 0; t < m.frames(); ++t) {
    CHECK(m.at(t, L.root_velocity) == 0.0f);
    CHECK(m.at(t, L.root_velocity + 1) == 0.0f);
    CHECK(m.at(t, L.root_height) == doctest::Approx(0.9));
  }

  for (auto fmt : {FeatureFormat::kSmplD263, FeatureFormat::kSmplD268, FeatureFormat::kH3dD263}) {
    const auto r = encode_format(static_stream(6, 0.9), fmt);
    const auto FL = feature_layout(fmt);
    for (std::size_t t = 0; t < r.frames(); ++t) {
      for (std::size_t k = 0; k < FL.velocities_width; ++k) CHECK(r.at(t, FL.velocities + k) == 0.0f);
      for (std::size_t k = 0; k < 4; ++k) CHECK(r.at(t, FL.contacts + k) == 1.0f);
    }
  }
}

TEST_CASE("constant root velocity") {
  PoseStream s = static_stream(8, 0.9);
  for (std::size_t t = 0; t < s.frames.size(); ++t) {
    s.frames[t].root.position = Vec3(0.02 * static_cast<double>(t), 0.9, 0.01 * static_cast<double>(t));
  }
  const auto m = encode_smpl_d135(s);
  const auto L = feature_layout(FeatureFormat::kSmplD135);
  for (std::size_t t = 0; t < m.frames(); ++t) {
    CHECK(m.at(t, L.root_velocity) == doctest::Approx(0.02).epsilon(1e-6));
    CHECK(m.at(t, L.root_velocity + 1) == doctest::Approx(0.01).epsilon(1e-6));
  }
}

TEST_CASE("D135 decode") {
  SUBCASE("random stream roundtrip") {
    Rng rng(5);
    const auto stream = random_stream(rng, 40);
    const auto m = encode_smpl_d135(stream);
    const Eigen::Vector2d xz(stream.frames[0].root.position.x(), stream.frames[0].root.position.z());
    const auto decoded = decode_smpl_d135(m, xz);
    REQUIRE(decoded.frames.size() == stream.frames.size());
    for (std::size_t t = 0; t < stream.frames.size(); ++t) {
      CHECK((decoded.frames[t].root.rotation - stream.frames[t].root.rotation).cwiseAbs().maxCoeff() < 1e-5);
      CHECK((decoded.frames[t].root.position - stream.frames[t].root.position).norm() < 1e-5);
      for (std::size_t j = 0; j < 21; ++j) {
        CHECK((decoded.frames[t].joint_rots[j] - stream.frames[t].joint_rots[j]).cwiseAbs().maxCoeff() < 1e-5);
      }
    }
    CHECK(max_feature_diff(encode_smpl_d135(decoded), m) < 1e-5);

    const double err = mpjpe_mm(to_joint_positions(m), [&] {
      auto p = stream_positions(stream);
      for (auto& frame : p) {
        for (auto& j : frame) j -= Vec3(xz.x(), 0, xz.y());
      }
      return p;
    }());
    CHECK(err < 0.1);
  }

  SUBCASE("zero velocity keeps the initial position") {
    const auto m = encode_smpl_d135(static_stream(5, 0.8));
    const auto d = decode_smpl_d135(m, Eigen::Vector2d(3, 4));
    for (const auto& f : d.frames) {
      CHECK(f.root.position.x() == 3.0);
      CHECK(f.root.position.z() == 4.0);
    }
  }

  SUBCASE("single frame") {
    const auto m = encode_smpl_d135(static_stream(1, 0.75));
    const auto d = decode_smpl_d135(m, Eigen::Vector2d(1.5, -2));
    REQUIRE(d.frames.size() == 1);
    CHECK((d.frames[0].root.position - Vec3(1.5, 0.75, -2)).norm() < 1e-6);
  }

  SUBCASE("format mismatch") {
    const auto m = encode_format(static_stream(3, 0.9), FeatureFormat::kSmplD130);
    CHECK_THROWS_AS(decode_smpl_d135(m, Eigen::Vector2d::Zero()), Error);
    const auto h = encode_format(static_stream(3, 0.9), FeatureFormat::kH3dD263);
    CHECK_THROWS_AS(decode_pose_stream(h, Eigen::Vector2d::Zero()), Error);
  }

  SUBCASE("wrong joint count") {
    auto s = static_stream(3, 0.9);
    s.frames[1].joint_rots.pop_back();
    CHECK_THROWS_AS(encode_smpl_d135(s), Error);
  }
}

TEST_CASE("D263 and D268 share their redundant blocks") {
  Rng rng(17);
  const auto stream = random_stream(rng, 12);
  const auto a = encode_format(stream, FeatureFormat::kSmplD263);
  const auto b = encode_format(stream, FeatureFormat::kSmplD268);
  const auto La = feature_layout(FeatureFormat::kSmplD263);
  const auto Lb = feature_layout(FeatureFormat::kSmplD268);
  for (std::size_t t = 0; t < a.frames(); ++t) {
    for (std::size_t k = 0; k < 126; ++k) CHECK(a.at(t, La.joint_rot6d + k) == b.at(t, Lb.joint_rot6d + k));
    for (std::size_t k = 0; k < 63 + 66 + 4; ++k) CHECK(a.at(t, La.positions + k) == b.at(t, Lb.positions + k));
    CHECK(a.at(t, La.root_velocity) == b.at(t, Lb.root_velocity));
    CHECK(a.at(t, La.root_height) == b.at(t, Lb.root_height));
  }
}

TEST_CASE("D130 yaw velocity integrates back to the root heading") {
  PoseStream s = static_stream(20, 0.9);
  for (std::size_t t = 0; t < s.frames.size(); ++t) {
    s.frames[t].root.rotation = kinematics::rotation_y(0.05 * static_cast<double>(t));
  }
  const auto m = encode_format(s, FeatureFormat::kSmplD130);
  const auto d = decode_pose_stream(m, Eigen::Vector2d::Zero());
  for (std::size_t t = 0; t < s.frames.size(); ++t) {
    CHECK((d.frames[t].root.rotation - s.frames[t].root.rotation).cwiseAbs().maxCoeff() < 1e-5);
  }
}

TEST_CASE("foot contact") {
  const auto still = stream_positions(static_stream(8, 0.9));
  for (const auto& c : derive_foot_contact(still)) CHECK(c == FootContact{1, 1, 1, 1});

  JointPositions swinging = still;
  for (std::size_t t = 0; t < swinging.size(); ++t) {
    for (int j : {kinematics::joint::kLeftAnkle, kinematics::joint::kLeftFoot}) {
      swinging[t][static_cast<std::size_t>(j)].z() += 0.05 * static_cast<double>(t);
    }
  }
  const auto flags = derive_foot_contact(swinging, {0.01, 0.05});
  for (const auto& c : flags) CHECK(c == FootContact{0, 1, 0, 1});

  // Raised but stationary feet are not in contact.
  JointPositions raised = still;
  for (auto& frame : raised) {
    for (auto& p : frame) p.y() += 0.3;
  }
  for (const auto& c : derive_foot_contact(raised)) CHECK(c == FootContact{0, 0, 0, 0});
}

TEST_CASE("to_joint_positions") {
  SUBCASE("rest pose repeated") {
    const auto m = encode_smpl_d135(static_stream(4, 0.9));
    const auto pos = to_joint_positions(m);
    const auto rest = kinematics::forward_kinematics(kinematics::default_skeleton(),
                                                     {Mat3::Identity(), Vec3(0, 0.9, 0)},
                                                     std::vector<Mat3>(21, Mat3::Identity()));
    REQUIRE(pos.size() == 4);
    for (const auto& frame : pos) {
      for (std::size_t j = 0; j < rest.size(); ++j) CHECK((frame[j] - rest[j]).norm() < 1e-6);
    }
  }

  SUBCASE("H3D positional block") {
    Rng rng(23);
    const auto stream = random_stream(rng, 10);
    const auto h = encode_format(stream, FeatureFormat::kH3dD263);
    auto expect = stream_positions(stream);
    const Vec3 start = stream.frames[0].root.position;
    for (auto& frame : expect) {
      for (auto& p : frame) p -= Vec3(start.x(), 0, start.z());
    }
    CHECK(mpjpe_mm(to_joint_positions(h), expect) < 0.01);
  }

  SUBCASE("every SMPL format reproduces FK of a yaw-only stream") {
    Rng rng(29);
    auto stream = random_stream(rng, 15);
    for (std::size_t t = 0; t < stream.frames.size(); ++t) {
      stream.frames[t].root.rotation = kinematics::rotation_y(0.4 + 0.03 * static_cast<double>(t));
    }
    auto expect = stream_positions(stream);
    const Vec3 start = stream.frames[0].root.position;
    for (auto& frame : expect) {
      for (auto& p : frame) p -= Vec3(start.x(), 0, start.z());
    }
    for (auto fmt : {FeatureFormat::kSmplD135, FeatureFormat::kSmplD268}) {
      CHECK(mpjpe_mm(to_joint_positions(encode_format(stream, fmt)), expect) < 0.1);
    }
  }
}

TEST_CASE("time reversal negates velocity blocks") {
  Rng rng(31);
  const auto stream = random_stream(rng, 16);
  PoseStream reversed = stream;
  std::reverse(reversed.frames.begin(), reversed.frames.end());
  const auto fwd = encode_format(stream, FeatureFormat::kSmplD268);
  const auto bwd = encode_format(reversed, FeatureFormat::kSmplD268);
  const auto L = feature_layout(FeatureFormat::kSmplD268);
  const std::size_t T = fwd.frames();
  // Interior frames: v_rev(t) = -v(T - 2 - t). The final slot follows the
  // repeat-previous convention and is excluded.
  for (std::size_t t = 0; t + 1 < T; ++t) {
    const std::size_t s = T - 2 - t;
    for (std::size_t k = 0; k < 2; ++k) {
      CHECK(bwd.at(t, L.root_velocity + k) == doctest::Approx(-fwd.at(s, L.root_velocity + k)).epsilon(1e-5));
    }
    for (std::size_t k = 0; k < L.velocities_width; ++k) {
      CHECK(bwd.at(t, L.velocities + k) == doctest::Approx(-fwd.at(s, L.velocities + k)).epsilon(1e-4));
    }
  }
}

TEST_CASE("MotionSequence invariants") {
  CHECK_THROWS_AS(MotionSequence(FeatureFormat::kSmplD135, 30, 2, std::vector<float>(10)), Error);
  std::vector<float> bad(135, 0.0f);
  bad[3] = std::nanf("");
  CHECK_THROWS_AS(MotionSequence(FeatureFormat::kSmplD135, 30, 1, bad), Error);
}
