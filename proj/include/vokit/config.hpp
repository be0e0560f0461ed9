#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "vokit/error.hpp"
#include "vokit/odometry.hpp"
#include "vokit/synthetic_scene.hpp"

namespace vokit {

// Experiment configuration. Every key has a default matching the simulation
// setup described for the method (f = 800 px, 0.5 m baseline, depths 1-40 m,
// 100-200 visible points, 1 px noise, 2% outliers, 500 frames).
struct ExperimentConfig {
  SceneConfig scene;
  PipelineConfig pipeline;

  // consistency sweep
  std::vector<int> sizes{30, 60, 120, 240, 480, 960};
  std::vector<double> sigmas_px{0.5, 1.0};
  double trial_max_rotation_deg = 10.0;
  double trial_max_translation_m = 1.0;

  // `pipeline` command
  std::string policy = "latest";

  int repetitions = 0;  // 0: the command's own default
  std::uint64_t seed = 1;
};

namespace detail {

inline std::string Trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T ParseNumber(const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw std::invalid_argument("not a number: '" + v + "'");
  return out;
}

template <typename T>
std::vector<T> ParseList(const std::string& v) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(ParseNumber<T>(Trim(item)));
  if (out.empty()) throw std::invalid_argument("empty list");
  return out;
}

using Setter = std::function<void(ExperimentConfig&, const std::string&)>;

inline const std::map<std::string, Setter, std::less<>>& ConfigKeys() {
  static const std::map<std::string, Setter, std::less<>> keys = [] {
    std::map<std::string, Setter, std::less<>> k;
    // rig
    k["focal_px"] = [](auto& c, auto& v) { c.scene.rig.focal_px = ParseNumber<double>(v); };
    k["principal_u"] = [](auto& c, auto& v) { c.scene.rig.principal_point.x() = ParseNumber<double>(v); };
    k["principal_v"] = [](auto& c, auto& v) { c.scene.rig.principal_point.y() = ParseNumber<double>(v); };
    k["image_width"] = [](auto& c, auto& v) { c.scene.rig.image_size.x() = ParseNumber<double>(v); };
    k["image_height"] = [](auto& c, auto& v) { c.scene.rig.image_size.y() = ParseNumber<double>(v); };
    k["baseline_m"] = [](auto& c, auto& v) {
      c.scene.rig.extrinsics.translation = Vector3(ParseNumber<double>(v), 0.0, 0.0);
    };
    // scene
    k["depth_min"] = [](auto& c, auto& v) { c.scene.depth_min = ParseNumber<double>(v); };
    k["depth_max"] = [](auto& c, auto& v) { c.scene.depth_max = ParseNumber<double>(v); };
    k["visible_min"] = [](auto& c, auto& v) { c.scene.visible_min = ParseNumber<int>(v); };
    k["visible_max"] = [](auto& c, auto& v) { c.scene.visible_max = ParseNumber<int>(v); };
    k["noise_sigma_px"] = [](auto& c, auto& v) { c.scene.noise_sigma_px = ParseNumber<double>(v); };
    k["outlier_ratio"] = [](auto& c, auto& v) { c.scene.outlier_ratio = ParseNumber<double>(v); };
    k["n_frames"] = [](auto& c, auto& v) { c.scene.n_frames = ParseNumber<int>(v); };
    k["line_step_m"] = [](auto& c, auto& v) { c.scene.line_step = ParseNumber<double>(v); };
    k["circle_radius_m"] = [](auto& c, auto& v) { c.scene.circle_radius = ParseNumber<double>(v); };
    k["circle_loop_frames"] = [](auto& c, auto& v) { c.scene.circle_loop_frames = ParseNumber<int>(v); };
    k["trajectory"] = [](auto& c, auto& v) {
      if (v == "line") c.scene.trajectory = TrajectoryKind::kLine;
      else if (v == "circle") c.scene.trajectory = TrajectoryKind::kCircle;
      else throw std::invalid_argument("trajectory must be line or circle");
    };
    // pipeline
    k["delta_pnp"] = [](auto& c, auto& v) { c.pipeline.delta_pnp = ParseNumber<double>(v); };
    k["delta_ba"] = [](auto& c, auto& v) { c.pipeline.delta_ba = ParseNumber<double>(v); };
    k["trim_fraction"] = [](auto& c, auto& v) { c.pipeline.trim_fraction = ParseNumber<double>(v); };
    k["pnp_max_iters"] = [](auto& c, auto& v) { c.pipeline.pnp_max_iters = ParseNumber<int>(v); };
    k["ba_max_iters"] = [](auto& c, auto& v) { c.pipeline.ba_max_iters = ParseNumber<int>(v); };
    k["ba_window_ofs"] = [](auto& c, auto& v) { c.pipeline.ba_window_ofs = ParseNumber<int>(v); };
    k["ba_kf_interval"] = [](auto& c, auto& v) { c.pipeline.ba_kf_interval = ParseNumber<int>(v); };
    k["ba_pairs"] = [](auto& c, auto& v) {
      if (v == "all") c.pipeline.ba_pairs = PairPolicy::kAllImages;
      else if (v == "stereo_and_left") c.pipeline.ba_pairs = PairPolicy::kStereoAndLeft;
      else throw std::invalid_argument("ba_pairs must be all or stereo_and_left");
    };
    k["fusion"] = [](auto& c, auto& v) {
      if (v == "first_observation") c.pipeline.fusion = FusionMode::kFirstObservation;
      else if (v == "all_keyframes") c.pipeline.fusion = FusionMode::kAllKeyframes;
      else throw std::invalid_argument("fusion must be first_observation or all_keyframes");
    };
    k["min_correspondences"] = [](auto& c, auto& v) {
      c.pipeline.min_correspondences = ParseNumber<std::size_t>(v);
    };
    k["policy"] = [](auto& c, auto& v) {
      if (v != "latest" && v != "two" && v != "three" && v != "latest+ba") {
        throw std::invalid_argument("policy must be latest, two, three or latest+ba");
      }
      c.policy = v;
    };
    // consistency
    k["sizes"] = [](auto& c, auto& v) { c.sizes = ParseList<int>(v); };
    k["sigmas_px"] = [](auto& c, auto& v) { c.sigmas_px = ParseList<double>(v); };
    k["trial_max_rotation_deg"] = [](auto& c, auto& v) { c.trial_max_rotation_deg = ParseNumber<double>(v); };
    k["trial_max_translation_m"] = [](auto& c, auto& v) { c.trial_max_translation_m = ParseNumber<double>(v); };
    // run
    k["repetitions"] = [](auto& c, auto& v) { c.repetitions = ParseNumber<int>(v); };
    k["seed"] = [](auto& c, auto& v) { c.seed = ParseNumber<std::uint64_t>(v); };
    return k;
  }();
  return keys;
}

}  // namespace detail

/// Pipeline settings for a policy name (latest, two, three, latest+ba).
inline PipelineConfig WithPolicy(PipelineConfig base, std::string_view policy) {
  if (policy == "latest") {
    base.policy = KfPolicy::kLatest;
    base.m = 1;
  } else if (policy == "two" || policy == "three") {
    base.policy = KfPolicy::kMultiKeyframe;
    base.m = policy == "two" ? 2 : 3;
  } else if (policy == "latest+ba") {
    base.policy = KfPolicy::kLatestPlusBa;
    base.m = 1;
  } else {
    throw Error(ErrorCode::kConfig, "unknown policy '" + std::string(policy) + "'");
  }
  return base;
}

inline void ValidateConfig(const ExperimentConfig& c) {
  try {
    c.scene.Validate();
    c.pipeline.Validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::kConfig, e.what());
  }
  if (c.repetitions < 0) throw Error(ErrorCode::kConfig, "repetitions must be >= 1");
  for (int n : c.sizes) {
    if (n < 6) throw Error(ErrorCode::kConfig, "sizes must be >= 6");
  }
  for (double s : c.sigmas_px) {
    if (!(s > 0.0)) throw Error(ErrorCode::kConfig, "sigmas_px must be positive");
  }
}

/// Parses `key = value` lines; '#' starts a comment. Unknown keys, malformed
/// lines and bad values raise kConfig with "<source>:<line>: ..." messages.
inline ExperimentConfig ParseConfig(std::istream& is, const std::string& source = "<config>") {
  ExperimentConfig cfg;
  const auto& keys = detail::ConfigKeys();
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    const std::string body = detail::Trim(std::string_view(line).substr(0, hash));
    if (body.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::kConfig, where + "expected 'key = value'");
    const std::string key = detail::Trim(std::string_view(body).substr(0, eq));
    const std::string value = detail::Trim(std::string_view(body).substr(eq + 1));
    const auto it = keys.find(key);
    if (it == keys.end()) throw Error(ErrorCode::kConfig, where + "unknown key '" + key + "'");
    if (value.empty()) throw Error(ErrorCode::kConfig, where + "missing value for '" + key + "'");
    try {
      it->second(cfg, value);
    } catch (const std::exception& e) {
      throw Error(ErrorCode::kConfig, where + key + ": " + e.what());
    }
  }
  ValidateConfig(cfg);
  return cfg;
}

inline ExperimentConfig ParseConfigFile(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kConfig, "cannot open config file '" + path + "'");
  return ParseConfig(in, path);
}

/// Canonical `key = value` echo of every setting (used in meta.txt).
inline std::string EchoConfig(const ExperimentConfig& c) {
  std::ostringstream os;
  os << std::setprecision(17);
  const auto& r = c.scene.rig;
  auto list = [&](const auto& v) {
    std::ostringstream s;
    s << std::setprecision(17);
    for (std::size_t i = 0; i < v.size(); ++i) s << (i ? ", " : "") << v[i];
    return s.str();
  };
  os << "focal_px = " << r.focal_px << "\n"
     << "principal_u = " << r.principal_point.x() << "\n"
     << "principal_v = " << r.principal_point.y() << "\n"
     << "image_width = " << r.image_size.x() << "\n"
     << "image_height = " << r.image_size.y() << "\n"
     << "baseline_m = " << r.extrinsics.translation.norm() << "\n"
     << "depth_min = " << c.scene.depth_min << "\n"
     << "depth_max = " << c.scene.depth_max << "\n"
     << "visible_min = " << c.scene.visible_min << "\n"
     << "visible_max = " << c.scene.visible_max << "\n"
     << "noise_sigma_px = " << c.scene.noise_sigma_px << "\n"
     << "outlier_ratio = " << c.scene.outlier_ratio << "\n"
     << "n_frames = " << c.scene.n_frames << "\n"
     << "line_step_m = " << c.scene.line_step << "\n"
     << "circle_radius_m = " << c.scene.circle_radius << "\n"
     << "circle_loop_frames = " << c.scene.circle_loop_frames << "\n"
     << "trajectory = " << ToString(c.scene.trajectory) << "\n"
     << "delta_pnp = " << c.pipeline.delta_pnp << "\n"
     << "delta_ba = " << c.pipeline.delta_ba << "\n"
     << "trim_fraction = " << c.pipeline.trim_fraction << "\n"
     << "pnp_max_iters = " << c.pipeline.pnp_max_iters << "\n"
     << "ba_max_iters = " << c.pipeline.ba_max_iters << "\n"
     << "ba_window_ofs = " << c.pipeline.ba_window_ofs << "\n"
     << "ba_kf_interval = " << c.pipeline.ba_kf_interval << "\n"
     << "ba_pairs = " << (c.pipeline.ba_pairs == PairPolicy::kAllImages ? "all" : "stereo_and_left") << "\n"
     << "fusion = "
     << (c.pipeline.fusion == FusionMode::kFirstObservation ? "first_observation" : "all_keyframes") << "\n"
     << "min_correspondences = " << c.pipeline.min_correspondences << "\n"
     << "policy = " << c.policy << "\n"
     << "sizes = " << list(c.sizes) << "\n"
     << "sigmas_px = " << list(c.sigmas_px) << "\n"
     << "trial_max_rotation_deg = " << c.trial_max_rotation_deg << "\n"
     << "trial_max_translation_m = " << c.trial_max_translation_m << "\n"
     << "repetitions = " << c.repetitions << "\n"
     << "seed = " << c.seed << "\n";
  return os.str();
}

}  // namespace vokit
