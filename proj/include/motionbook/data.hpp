#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "motionbook/features.hpp"
#include "motionbook/rng.hpp"

namespace motionbook::data {

struct ParamRange {
  double lo = 0, hi = 0;
};

struct FamilyRanges {
  ParamRange amplitude;  // radians
  ParamRange frequency;  // Hz
};

// Families: arm-wave, squat, walk, walk-in-circle, idle-sway.
const std::vector<std::string>& family_names();
FamilyRanges default_ranges(const std::string& family);

struct SyntheticConfig {
  std::vector<std::string> families = family_names();
  std::map<std::string, FamilyRanges> ranges;  // missing families use default_ranges
  std::size_t min_frames = 64;
  std::size_t max_frames = 64;
  std::uint32_t fps = 30;
  std::size_t count = 2000;
  std::uint64_t seed = 0;
  features::FeatureFormat format = features::FeatureFormat::kSmplD135;

  FamilyRanges range_of(const std::string& family) const;
  void validate() const;
};

nlohmann::json to_json(const SyntheticConfig& cfg);
// Unknown keys are rejected with InvalidConfig.
SyntheticConfig synthetic_config_from_json(const nlohmann::json& doc);

struct SampleParams {
  std::string family;
  double amplitude = 0;
  double frequency = 1;
  double phase = 0;
  int side = 0;            // arm-wave: 0 left, 1 right, 2 both; walk-in-circle: turn sign
  double heading = 0;      // initial root yaw
  double turn_rate = 0;    // rad/s, walk-in-circle
  std::size_t frames = 64;
  std::uint32_t fps = 30;
};

SampleParams draw_params(const SyntheticConfig& cfg, const std::string& family, Rng& rng);

struct GeneratedMotion {
  features::PoseStream stream;
  std::string caption;
  std::vector<std::string> part_captions;
  // Generator ground truth for gait families: per frame, {left, right} foot in stance.
  std::vector<std::array<std::uint8_t, 2>> stance;
};

GeneratedMotion generate_motion(const SampleParams& params);

struct ManifestEntry {
  std::string path;  // relative to the corpus directory
  std::string caption;
  std::vector<std::string> part_captions;
  std::string split;  // train, val or test
  std::string family;
};

struct Manifest {
  features::FeatureFormat format = features::FeatureFormat::kSmplD135;
  std::uint32_t fps = 30;
  std::vector<ManifestEntry> entries;

  // Entries of one split, in manifest order.
  std::vector<std::size_t> indices(const std::string& split) const;
  void validate() const;
};

nlohmann::json to_json(const Manifest& m);
Manifest manifest_from_json(const nlohmann::json& doc);
void write_manifest(const std::filesystem::path& path, const Manifest& m);
Manifest read_manifest(const std::filesystem::path& path);

struct Corpus {
  Manifest manifest;
  std::vector<features::MotionSequence> motions;  // aligned with manifest entries
};

// Generates every sample and assigns splits with split_corpus (85/5/10).
Corpus gen_synthetic(const SyntheticConfig& cfg);

// <dir>/manifest.json and <dir>/motions/*.motb
void write_corpus(const std::filesystem::path& dir, const Corpus& corpus);
Corpus read_corpus(const std::filesystem::path& dir);

// Ratios are normalized. Counts per split come from largest remainders of
// n * ratio; the assignment is a seeded shuffle.
Manifest split_corpus(const Manifest& manifest, std::array<double, 3> ratios, std::uint64_t seed);

inline constexpr std::array<double, 3> kDefaultSplit = {0.85, 0.05, 0.10};

// MOTB files: "MOTB", u32 version 1, u32 format tag, u32 fps, u32 T, u32 D, T*D f32.
void write_motion(const std::filesystem::path& path, const features::MotionSequence& m);
features::MotionSequence read_motion(const std::filesystem::path& path);

}  // namespace motionbook::data
