#include "motionbook/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>

#include "motionbook/binary_io.hpp"
#include "motionbook/error.hpp"

namespace motionbook::data {

using features::FeatureFormat;
using features::MotionSequence;
using kinematics::Mat3;
using kinematics::rotation_x;
using kinematics::rotation_y;
using kinematics::rotation_z;
using kinematics::Vec3;
namespace J = kinematics::joint;

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kAnkleHeight = 0.045;  // standing ankle height, below the contact threshold
constexpr double kArmDrop = 1.3;        // shoulder roll of relaxed arms

const std::set<std::string> kSplits = {"train", "val", "test"};

double frac(double x) { return x - std::floor(x); }

struct Pose {
  Mat3 root = Mat3::Identity();
  std::array<Mat3, J::kBodyJointCount> local;  // index 0 unused
  Pose() { local.fill(Mat3::Identity()); }
};

std::vector<Vec3> relative_positions(const Pose& p) {
  kinematics::RootTransform root;
  root.rotation = p.root;
  return kinematics::forward_kinematics(kinematics::default_skeleton(), root,
                                        std::span<const Mat3>(p.local.data() + 1, J::kBodyJointCount - 1));
}

void relax_arms(Pose& p, double sway = 0) {
  p.local[J::kLeftShoulder] = rotation_z(-kArmDrop + sway);
  p.local[J::kRightShoulder] = rotation_z(kArmDrop + sway);
}

// Chooses root translations so the anchor foot's ankle stays fixed in the
// world while it is the anchor. Switching anchors re-plants the new foot at
// its current position, snapped to the standing ankle height.
std::vector<Vec3> pin_root(const std::vector<Pose>& poses, const std::vector<int>& anchor) {
  const int ankle[2] = {J::kLeftAnkle, J::kRightAnkle};
  std::vector<Vec3> root(poses.size());
  Vec3 planted = Vec3::Zero();
  for (std::size_t t = 0; t < poses.size(); ++t) {
    const auto rel = relative_positions(poses[t]);
    const auto a = static_cast<std::size_t>(ankle[anchor[t]]);
    if (t == 0) {
      planted = Vec3(rel[a].x(), kAnkleHeight, rel[a].z());
    } else if (anchor[t] != anchor[t - 1]) {
      const auto prev = relative_positions(poses[t - 1]);
      planted = root[t - 1] + prev[a];
      planted.y() = kAnkleHeight;
    }
    root[t] = planted - rel[a];
  }
  return root;
}

std::string speed_word(const FamilyRanges& r, double f, const char* slow, const char* fast) {
  return f < 0.5 * (r.frequency.lo + r.frequency.hi) ? slow : fast;
}

struct Built {
  std::vector<Pose> poses;
  std::vector<int> anchor;
  std::vector<std::array<std::uint8_t, 2>> stance;
  std::string caption;
  std::vector<std::string> parts;
};

Built build_idle(const SampleParams& p) {
  Built b;
  const double A = p.amplitude;
  for (std::size_t t = 0; t < p.frames; ++t) {
    const double s = static_cast<double>(t) / p.fps;
    const double w = kTwoPi * p.frequency * s + p.phase;
    Pose pose;
    pose.root = rotation_y(p.heading);
    pose.local[J::kSpine1] = rotation_z(A * std::sin(w));
    pose.local[J::kSpine2] = rotation_x(0.5 * A * std::sin(0.7 * w + 1.0));
    pose.local[J::kHead] = rotation_y(0.5 * A * std::sin(w + 2.0));
    relax_arms(pose, 0.3 * A * std::sin(w));
    b.poses.push_back(pose);
    b.anchor.push_back(0);
  }
  if (A == 0) {
    b.caption = "a person stands still";
  } else {
    b.caption = std::string("a person stands and sways ") + (A < 0.075 ? "gently" : "noticeably");
  }
  b.parts = {"torso: sways side to side", "arms: hang relaxed", "legs: stand still", "head: looks around"};
  return b;
}

Built build_arm_wave(const SampleParams& p, const FamilyRanges& r) {
  Built b;
  const double A = p.amplitude;
  const bool left = p.side == 0 || p.side == 2, right = p.side == 1 || p.side == 2;
  for (std::size_t t = 0; t < p.frames; ++t) {
    const double s = static_cast<double>(t) / p.fps;
    const double w = kTwoPi * p.frequency * s + p.phase;
    Pose pose;
    pose.root = rotation_y(p.heading);
    relax_arms(pose);
    if (left) {
      pose.local[J::kLeftShoulder] = rotation_z(1.2 + A * std::sin(w));
      pose.local[J::kLeftElbow] = rotation_z(0.4 + 0.5 * A * std::sin(2 * w));
    }
    if (right) {
      pose.local[J::kRightShoulder] = rotation_z(-1.2 - A * std::sin(w));
      pose.local[J::kRightElbow] = rotation_z(-0.4 - 0.5 * A * std::sin(2 * w));
    }
    b.poses.push_back(pose);
    b.anchor.push_back(0);
  }
  const std::string which = p.side == 0 ? "the left arm" : p.side == 1 ? "the right arm" : "both arms";
  b.caption = "a person waves " + which + " " + speed_word(r, p.frequency, "slowly", "quickly");
  b.parts = {std::string("left arm: ") + (left ? "waves overhead" : "hangs relaxed"),
             std::string("right arm: ") + (right ? "waves overhead" : "hangs relaxed"), "legs: stand still",
             "torso: upright"};
  return b;
}

Built build_squat(const SampleParams& p, const FamilyRanges& r) {
  Built b;
  const double A = p.amplitude;
  for (std::size_t t = 0; t < p.frames; ++t) {
    const double s = static_cast<double>(t) / p.fps;
    const double theta = 0.5 * A * (1 - std::cos(kTwoPi * p.frequency * s + p.phase));
    const double reach = A > 0 ? theta / A : 0.0;
    Pose pose;
    pose.root = rotation_y(p.heading);
    for (int side = 0; side < 2; ++side) {
      pose.local[side == 0 ? J::kLeftHip : J::kRightHip] = rotation_x(-theta);
      pose.local[side == 0 ? J::kLeftKnee : J::kRightKnee] = rotation_x(2 * theta);
      pose.local[side == 0 ? J::kLeftAnkle : J::kRightAnkle] = rotation_x(-theta);
    }
    pose.local[J::kSpine1] = rotation_x(0.4 * theta);
    pose.local[J::kLeftShoulder] = rotation_y(-0.5 * std::numbers::pi * reach) * rotation_z(-kArmDrop * (1 - reach));
    pose.local[J::kRightShoulder] = rotation_y(0.5 * std::numbers::pi * reach) * rotation_z(kArmDrop * (1 - reach));
    b.poses.push_back(pose);
    b.anchor.push_back(0);
  }
  const double mid = 0.5 * (r.amplitude.lo + r.amplitude.hi);
  b.caption = std::string("a person does ") + (A < mid ? "shallow" : "deep") + " squats " +
              speed_word(r, p.frequency, "slowly", "quickly");
  b.parts = {"legs: bend and straighten", "arms: reach forward", "torso: leans forward", "head: faces forward"};
  return b;
}

// Pendulum gait. Each leg's hip swings as A sin(2 pi phi); the foot is in
// stance for phi mod 1 in [0.25, 0.75), when the leg sweeps backward, and
// the knee flexes only during swing. The stance foot is held flat and fixed.
Built build_gait(const SampleParams& p, const FamilyRanges& r, bool circle) {
  Built b;
  const double A = p.amplitude;
  const double knee_max = 0.3 + 1.6 * A;
  const double turn = circle ? p.turn_rate : 0.0;
  double foot_yaw[2] = {p.heading, p.heading};       // yaw held during stance
  double lift_yaw[2] = {p.heading, p.heading};       // yaw at the last lift-off
  double lift_root_yaw[2] = {p.heading, p.heading};  // root yaw at the last lift-off
  bool was_stance[2] = {false, false};
  for (std::size_t t = 0; t < p.frames; ++t) {
    const double s = static_cast<double>(t) / p.fps;
    const double yaw = p.heading + turn * s;
    Pose pose;
    pose.root = rotation_y(yaw);
    std::array<std::uint8_t, 2> stance{};
    for (int leg = 0; leg < 2; ++leg) {
      const double phi = p.frequency * s + p.phase / kTwoPi + 0.5 * leg;
      const double u = frac(phi);
      const double theta = A * std::sin(kTwoPi * phi);
      const bool in_stance = u >= 0.25 && u < 0.75;
      const double knee = in_stance ? 0.0 : knee_max * std::sin(std::numbers::pi * frac(u - 0.75) / 0.5);
      if (in_stance && !was_stance[leg]) foot_yaw[leg] = yaw;
      if (!in_stance && (was_stance[leg] || t == 0)) {
        lift_yaw[leg] = t == 0 ? yaw : foot_yaw[leg];
        lift_root_yaw[leg] = yaw;
      }
      double target = foot_yaw[leg];
      if (!in_stance) {
        // blend from the planted yaw back to the body's heading over the swing
        const double progress = frac(u - 0.75) / 0.5;
        target = yaw + (lift_yaw[leg] - lift_root_yaw[leg]) * (1 - progress);
      }
      const Mat3 hip = rotation_x(-theta), knee_rot = rotation_x(knee);
      const Mat3 ankle = (hip * knee_rot).transpose() * rotation_y(yaw).transpose() * rotation_y(target);
      pose.local[leg == 0 ? J::kLeftHip : J::kRightHip] = hip;
      pose.local[leg == 0 ? J::kLeftKnee : J::kRightKnee] = knee_rot;
      pose.local[leg == 0 ? J::kLeftAnkle : J::kRightAnkle] = ankle;
      pose.local[leg == 0 ? J::kLeftShoulder : J::kRightShoulder] =
          rotation_x(0.6 * A * std::sin(kTwoPi * phi)) * rotation_z(leg == 0 ? -kArmDrop : kArmDrop);
      stance[static_cast<std::size_t>(leg)] = in_stance;
      was_stance[leg] = in_stance;
    }
    b.poses.push_back(pose);
    b.anchor.push_back(stance[0] ? 0 : 1);
    b.stance.push_back(stance);
  }
  if (circle) {
    b.caption = std::string("a person walks in a circle to the ") + (turn > 0 ? "left" : "right");
    b.parts = {"legs: step in a curve", "arms: swing in rhythm", "torso: turns gradually", "head: faces forward"};
  } else {
    b.caption = "a person walks forward " + speed_word(r, p.frequency, "slowly", "briskly");
    b.parts = {"legs: step forward", "arms: swing in rhythm", "torso: upright", "head: faces forward"};
  }
  return b;
}

void check_range(const std::string& family, const char* what, ParamRange r) {
  require(std::isfinite(r.lo) && std::isfinite(r.hi) && r.lo <= r.hi && r.lo >= 0, ErrorKind::kInvalidConfig,
          family + ": " + what + " range must satisfy 0 <= lo <= hi");
}

}  // namespace

const std::vector<std::string>& family_names() {
  static const std::vector<std::string> names = {"arm-wave", "squat", "walk", "walk-in-circle", "idle-sway"};
  return names;
}

FamilyRanges default_ranges(const std::string& family) {
  if (family == "arm-wave") return {{0.3, 0.8}, {0.5, 1.5}};
  if (family == "squat") return {{0.6, 1.2}, {0.3, 0.7}};
  if (family == "walk") return {{0.25, 0.45}, {0.8, 1.2}};
  if (family == "walk-in-circle") return {{0.25, 0.45}, {0.8, 1.2}};
  if (family == "idle-sway") return {{0.03, 0.12}, {0.2, 0.5}};
  fail(ErrorKind::kInvalidConfig, "unknown motion family '" + family + "'");
}

FamilyRanges SyntheticConfig::range_of(const std::string& family) const {
  auto it = ranges.find(family);
  return it != ranges.end() ? it->second : default_ranges(family);
}

void SyntheticConfig::validate() const {
  require(count >= 1, ErrorKind::kInvalidConfig, "count must be >= 1");
  require(!families.empty(), ErrorKind::kInvalidConfig, "at least one family is required");
  require(fps >= 1, ErrorKind::kInvalidConfig, "fps must be positive");
  require(min_frames >= 1 && min_frames <= max_frames, ErrorKind::kInvalidConfig,
          "frame range must satisfy 1 <= min_frames <= max_frames");
  for (const auto& f : families) {
    const auto r = range_of(f);
    check_range(f, "amplitude", r.amplitude);
    check_range(f, "frequency", r.frequency);
    require(r.frequency.hi < 0.5 * fps, ErrorKind::kInvalidConfig,
            f + ": frequency must stay below fps/2 (" + std::to_string(0.5 * fps) + " Hz)");
  }
  for (const auto& [name, r] : ranges) default_ranges(name);
  features::feature_width(format);
}

nlohmann::json to_json(const SyntheticConfig& cfg) {
  nlohmann::json ranges = nlohmann::json::object();
  for (const auto& [name, r] : cfg.ranges) {
    ranges[name] = {{"amplitude", {r.amplitude.lo, r.amplitude.hi}}, {"frequency", {r.frequency.lo, r.frequency.hi}}};
  }
  return {{"families", cfg.families}, {"ranges", ranges},           {"min_frames", cfg.min_frames},
          {"max_frames", cfg.max_frames}, {"fps", cfg.fps},         {"count", cfg.count},
          {"seed", cfg.seed},           {"format", std::string(features::format_name(cfg.format))}};
}

SyntheticConfig synthetic_config_from_json(const nlohmann::json& doc) {
  static const std::set<std::string> known = {"families", "ranges", "min_frames", "max_frames",
                                              "fps",      "count",  "seed",       "format"};
  require(doc.is_object(), ErrorKind::kInvalidConfig, "synthetic config must be an object");
  SyntheticConfig cfg;
  try {
    for (const auto& [key, value] : doc.items()) {
      if (!known.count(key)) fail(ErrorKind::kInvalidConfig, "unknown synthetic config key '" + key + "'");
    }
    if (doc.contains("families")) cfg.families = doc["families"].get<std::vector<std::string>>();
    if (doc.contains("ranges")) {
      for (const auto& [name, r] : doc["ranges"].items()) {
        const auto a = r.at("amplitude").get<std::array<double, 2>>();
        const auto f = r.at("frequency").get<std::array<double, 2>>();
        cfg.ranges[name] = {{a[0], a[1]}, {f[0], f[1]}};
      }
    }
    if (doc.contains("min_frames")) cfg.min_frames = doc["min_frames"].get<std::size_t>();
    if (doc.contains("max_frames")) cfg.max_frames = doc["max_frames"].get<std::size_t>();
    if (doc.contains("fps")) cfg.fps = doc["fps"].get<std::uint32_t>();
    if (doc.contains("count")) cfg.count = doc["count"].get<std::size_t>();
    if (doc.contains("seed")) cfg.seed = doc["seed"].get<std::uint64_t>();
    if (doc.contains("format")) cfg.format = features::parse_format(doc["format"].get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kInvalidConfig, std::string("synthetic config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

SampleParams draw_params(const SyntheticConfig& cfg, const std::string& family, Rng& rng) {
  const auto r = cfg.range_of(family);
  SampleParams p;
  p.family = family;
  p.fps = cfg.fps;
  p.frames = static_cast<std::size_t>(
      rng.uniform_int(static_cast<std::int64_t>(cfg.min_frames), static_cast<std::int64_t>(cfg.max_frames)));
  p.amplitude = rng.uniform(r.amplitude.lo, r.amplitude.hi);
  p.frequency = rng.uniform(r.frequency.lo, r.frequency.hi);
  p.phase = rng.uniform(0.0, kTwoPi);
  p.heading = rng.uniform(-std::numbers::pi, std::numbers::pi);
  p.side = static_cast<int>(rng.uniform_int(0, family == "arm-wave" ? 2 : 1));
  if (family == "walk-in-circle") p.turn_rate = (p.side == 0 ? 1.0 : -1.0) * rng.uniform(0.3, 0.6);
  return p;
}

GeneratedMotion generate_motion(const SampleParams& p) {
  require(p.frames >= 1 && p.fps >= 1, ErrorKind::kInvalidConfig, "sample needs frames and fps");
  require(p.frequency < 0.5 * p.fps, ErrorKind::kInvalidConfig, "frequency must stay below fps/2");
  const auto r = default_ranges(p.family);
  Built b;
  if (p.family == "idle-sway") b = build_idle(p);
  else if (p.family == "arm-wave") b = build_arm_wave(p, r);
  else if (p.family == "squat") b = build_squat(p, r);
  else b = build_gait(p, r, p.family == "walk-in-circle");

  const auto roots = pin_root(b.poses, b.anchor);
  GeneratedMotion g;
  g.stream.fps = p.fps;
  for (std::size_t t = 0; t < b.poses.size(); ++t) {
    features::PoseFrame f;
    f.root.rotation = b.poses[t].root;
    f.root.position = roots[t];
    f.joint_rots.assign(b.poses[t].local.begin() + 1, b.poses[t].local.end());
    g.stream.frames.push_back(std::move(f));
  }
  g.caption = std::move(b.caption);
  g.part_captions = std::move(b.parts);
  g.stance = std::move(b.stance);
  return g;
}

std::vector<std::size_t> Manifest::indices(const std::string& split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].split == split) out.push_back(i);
  }
  return out;
}

void Manifest::validate() const {
  std::set<std::string> paths;
  for (const auto& e : entries) {
    require(!e.path.empty(), ErrorKind::kInvalidConfig, "manifest entry without a path");
    require(paths.insert(e.path).second, ErrorKind::kInvalidConfig, "duplicate manifest path '" + e.path + "'");
    require(kSplits.count(e.split) > 0, ErrorKind::kInvalidConfig,
            "manifest entry '" + e.path + "' has split '" + e.split + "'");
  }
}

nlohmann::json to_json(const Manifest& m) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : m.entries) {
    entries.push_back({{"path", e.path},
                       {"caption", e.caption},
                       {"part_captions", e.part_captions},
                       {"split", e.split},
                       {"family", e.family}});
  }
  return {{"format", std::string(features::format_name(m.format))}, {"fps", m.fps}, {"entries", entries}};
}

Manifest manifest_from_json(const nlohmann::json& doc) {
  Manifest m;
  try {
    m.format = features::parse_format(doc.at("format").get<std::string>());
    m.fps = doc.at("fps").get<std::uint32_t>();
    for (const auto& e : doc.at("entries")) {
      ManifestEntry entry;
      entry.path = e.at("path").get<std::string>();
      entry.caption = e.at("caption").get<std::string>();
      entry.part_captions = e.value("part_captions", std::vector<std::string>{});
      entry.split = e.at("split").get<std::string>();
      entry.family = e.value("family", std::string{});
      m.entries.push_back(std::move(entry));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kInvalidConfig, std::string("malformed manifest: ") + e.what());
  }
  m.validate();
  return m;
}

void write_manifest(const std::filesystem::path& path, const Manifest& m) {
  m.validate();
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out << to_json(m).dump(1) << "\n";
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot read manifest " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kInvalidConfig, "manifest " + path.string() + " is not JSON: " + e.what());
  }
  return manifest_from_json(doc);
}

Corpus gen_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  Rng root(cfg.seed);
  Corpus c;
  c.manifest.format = cfg.format;
  c.manifest.fps = cfg.fps;
  const std::size_t digits = std::max<std::size_t>(6, std::to_string(cfg.count).size());
  for (std::size_t i = 0; i < cfg.count; ++i) {
    Rng rng = root.fork(static_cast<std::uint64_t>(i));
    const auto& family = cfg.families[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(cfg.families.size()) - 1))];
    const auto params = draw_params(cfg, family, rng);
    auto g = generate_motion(params);
    c.motions.push_back(features::encode_format(g.stream, cfg.format));
    std::string name = std::to_string(i);
    name.insert(0, digits - name.size(), '0');
    c.manifest.entries.push_back({"motions/" + name + ".motb", g.caption, g.part_captions, "train", family});
  }
  c.manifest = split_corpus(c.manifest, kDefaultSplit, Rng(cfg.seed).fork("split").seed());
  return c;
}

void write_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
  require(corpus.motions.size() == corpus.manifest.entries.size(), ErrorKind::kShapeMismatch,
          "corpus motions and manifest entries differ in count");
  std::filesystem::create_directories(dir / "motions");
  for (std::size_t i = 0; i < corpus.motions.size(); ++i) {
    write_motion(dir / corpus.manifest.entries[i].path, corpus.motions[i]);
  }
  write_manifest(dir / "manifest.json", corpus.manifest);
}

Corpus read_corpus(const std::filesystem::path& dir) {
  Corpus c;
  c.manifest = read_manifest(dir / "manifest.json");
  if (c.manifest.entries.empty()) fail(ErrorKind::kEmptyManifest, "manifest " + (dir / "manifest.json").string() + " has no entries");
  for (const auto& e : c.manifest.entries) {
    auto m = read_motion(dir / e.path);
    if (m.format() != c.manifest.format) {
      fail(ErrorKind::kFormatMismatch, e.path + " is " + std::string(features::format_name(m.format())) +
                                           ", manifest says " + std::string(features::format_name(c.manifest.format)));
    }
    c.motions.push_back(std::move(m));
  }
  return c;
}

Manifest split_corpus(const Manifest& manifest, std::array<double, 3> ratios, std::uint64_t seed) {
  const std::size_t n = manifest.entries.size();
  if (n == 0) fail(ErrorKind::kEmptyManifest, "cannot split an empty manifest");
  double total = 0;
  for (double r : ratios) {
    require(std::isfinite(r) && r > 0, ErrorKind::kInvalidConfig, "split ratios must be positive");
    total += r;
  }
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> remainder{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double exact = static_cast<double>(n) * ratios[i] / total;
    counts[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    remainder[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  std::array<std::size_t, 3> order = {0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++counts[order[k % 3]];

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(perm[i - 1], perm[j]);
  }
  static const char* names[3] = {"train", "val", "test"};
  Manifest out = manifest;
  std::size_t pos = 0;
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t k = 0; k < counts[s]; ++k) out.entries[perm[pos++]].split = names[s];
  }
  return out;
}

void write_motion(const std::filesystem::path& path, const MotionSequence& m) {
  m.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out.write("MOTB", 4);
  io::write_u32(out, 1);
  io::write_u32(out, static_cast<std::uint32_t>(m.format()));
  io::write_u32(out, m.fps());
  io::write_u32(out, static_cast<std::uint32_t>(m.frames()));
  io::write_u32(out, static_cast<std::uint32_t>(m.width()));
  io::write_f32s(out, m.data());
  if (!out) fail(ErrorKind::kIo, "failed writing " + path.string());
}

MotionSequence read_motion(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot read " + path.string());
  char magic[4] = {};
  if (!in.read(magic, 4)) fail(ErrorKind::kTruncatedFile, path.string() + ": truncated header");
  if (std::memcmp(magic, "MOTB", 4) != 0) fail(ErrorKind::kBadMagic, path.string() + " is not a MOTB file");
  std::uint32_t header[5];
  for (auto& h : header) {
    if (!io::read_u32(in, h)) fail(ErrorKind::kTruncatedFile, path.string() + ": truncated header");
  }
  if (header[0] != 1) fail(ErrorKind::kUnsupportedVersion, path.string() + ": MOTB version " + std::to_string(header[0]));
  const auto fmt = features::format_from_tag(header[1]);
  const std::size_t T = header[3], D = header[4];
  if (D != features::feature_width(fmt)) {
    fail(ErrorKind::kShapeMismatch, path.string() + ": width " + std::to_string(D) + " does not match " +
                                        std::string(features::format_name(fmt)));
  }
  std::vector<float> values(T * D);
  if (!io::read_array(in, std::span<float>(values))) fail(ErrorKind::kTruncatedFile, path.string() + ": truncated payload");
  return MotionSequence(fmt, header[2], T, std::move(values));
}

}  // namespace motionbook::data
