#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "vokit/config.hpp"
#include "vokit/evaluation.hpp"
#include "vokit/noise_estimation.hpp"
#include "vokit/odometry.hpp"
#include "vokit/pnp.hpp"
#include "vokit/random.hpp"
#include "vokit/synthetic_scene.hpp"
#include "vokit/triangulation.hpp"

#ifndef VOKIT_VERSION
#define VOKIT_VERSION "unknown"
#endif

namespace vokit {

// ---------------------------------------------------------------------------
// Deterministic fan-out: job i always writes slot i, so the gathered result is
// independent of the worker count and of scheduling.

template <typename Fn>
auto ParallelMap(std::size_t count, int workers, Fn&& fn) {
  using R = decltype(fn(std::size_t{0}));
  std::vector<std::optional<R>> slots(count);
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        slots[i].emplace(fn(i));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto n_threads = static_cast<std::size_t>(std::max(1, workers));
  if (n_threads == 1 || count < 2) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < std::min(n_threads, count); ++t) pool.emplace_back(work);
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  std::vector<R> out;
  out.reserve(count);
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

inline int DefaultWorkers() {
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

// ---------------------------------------------------------------------------
// CSV

inline std::string FormatDouble(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  template <typename... Ts>
  void Add(const Ts&... cells) {
    std::vector<std::string> row;
    (row.push_back(Cell(cells)), ...);
    rows.push_back(std::move(row));
  }

  std::string ToString() const {
    std::string s;
    auto line = [&](const std::vector<std::string>& r) {
      for (std::size_t i = 0; i < r.size(); ++i) s += (i ? "," : "") + r[i];
      s += '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    return s;
  }

 private:
  static std::string Cell(double v) { return FormatDouble(v); }
  static std::string Cell(int v) { return std::to_string(v); }
  static std::string Cell(std::size_t v) { return std::to_string(v); }
  static std::string Cell(bool v) { return v ? "1" : "0"; }
  static std::string Cell(const std::string& v) { return v; }
  static std::string Cell(std::string_view v) { return std::string(v); }
  static std::string Cell(const char* v) { return v; }
};

// ---------------------------------------------------------------------------
// Consistency sweep (bias-eliminated PnP vs the number of correspondences)

struct ConsistencyCell {
  double sigma_px = 0.0;
  int n = 0;
  int trials = 0;
  int failures = 0;
  double rmse_sigma_px = 0.0;
  double rmse_rot_deg = 0.0;
  double rmse_trans_m = 0.0;
  double rmse_rot_biased_deg = 0.0;
  double rmse_trans_biased_m = 0.0;
};

struct ConsistencySlope {
  double sigma_px = 0.0;
  std::string quantity;
  double slope = 0.0;
};

struct ConsistencyResult {
  std::vector<ConsistencyCell> cells;  // sigma-major, then n
  std::vector<ConsistencySlope> slopes;
};

struct TrialErrors {
  bool ok = false;
  double sigma_err_px = 0.0;
  double rot_deg = 0.0, trans_m = 0.0;
  double rot_biased_deg = 0.0, trans_biased_m = 0.0;
};

/// One Monte-Carlo PnP trial: random pose and `n` points, sigma^2 estimated
/// from the keyframe stereo pairs, points triangulated with covariance, then
/// the biased and bias-eliminated linear solves.
inline TrialErrors RunPnPTrial(std::size_t n, const SceneConfig& scene, Rng& rng,
                               const PnPTrialOptions& opts = {}) {
  const auto trial = GeneratePnPTrial(n, scene, rng, opts);
  TrialErrors out;
  try {
    const NoiseModel noise = EstimateSigma2(trial.stereo, scene.rig);
    PnPProblem problem;
    problem.sigma2 = noise.sigma2;
    for (std::size_t i = 0; i < n; ++i) {
      problem.points.push_back(
          TriangulateWithCov(trial.stereo[i].x, trial.stereo[i].y, scene.rig, noise));
      problem.observations.push_back(trial.z[i]);
    }
    const auto be = SolveBiasEliminated(problem);
    const auto biased = SolveBiasedPose(problem);
    auto rot_err = [&](const RigidTransform& t) {
      return Rad2Deg(RotationAngle(t.rotation.transpose() * trial.truth.rotation));
    };
    out.sigma_err_px = noise.sigma() * scene.rig.focal_px - scene.noise_sigma_px;
    out.rot_deg = rot_err(be.pose);
    out.trans_m = (be.pose.translation - trial.truth.translation).norm();
    out.rot_biased_deg = rot_err(biased.pose);
    out.trans_biased_m = (biased.pose.translation - trial.truth.translation).norm();
    out.ok = true;
  } catch (const Error&) {
    out.ok = false;
  }
  return out;
}

inline ConsistencyResult RunConsistency(const ExperimentConfig& cfg, int reps, int workers) {
  const std::size_t ns = cfg.sizes.size(), nsig = cfg.sigmas_px.size();
  const auto r = static_cast<std::size_t>(reps);
  PnPTrialOptions topts;
  topts.max_rotation_deg = cfg.trial_max_rotation_deg;
  topts.max_translation_m = cfg.trial_max_translation_m;

  const auto trials = ParallelMap(nsig * ns * r, workers, [&](std::size_t job) {
    const std::size_t si = job / (ns * r), ni = (job / r) % ns, t = job % r;
    SceneConfig scene = cfg.scene;
    scene.noise_sigma_px = cfg.sigmas_px[si];
    // The trial index alone picks the stream, so the two noise levels see the
    // same poses and point layouts.
    Rng rng = MakeRng(cfg.seed, stream::kTrial, (static_cast<std::uint64_t>(ni) << 32) | t);
    return RunPnPTrial(static_cast<std::size_t>(cfg.sizes[ni]), scene, rng, topts);
  });

  ConsistencyResult res;
  for (std::size_t si = 0; si < nsig; ++si) {
    std::vector<std::pair<double, double>> fs, fr, ft;
    for (std::size_t ni = 0; ni < ns; ++ni) {
      ConsistencyCell c;
      c.sigma_px = cfg.sigmas_px[si];
      c.n = cfg.sizes[ni];
      double es = 0, er = 0, et = 0, erb = 0, etb = 0;
      for (std::size_t t = 0; t < r; ++t) {
        const auto& e = trials[(si * ns + ni) * r + t];
        if (!e.ok) {
          ++c.failures;
          continue;
        }
        ++c.trials;
        es += e.sigma_err_px * e.sigma_err_px;
        er += e.rot_deg * e.rot_deg;
        et += e.trans_m * e.trans_m;
        erb += e.rot_biased_deg * e.rot_biased_deg;
        etb += e.trans_biased_m * e.trans_biased_m;
      }
      const double k = std::max(1, c.trials);
      c.rmse_sigma_px = std::sqrt(es / k);
      c.rmse_rot_deg = std::sqrt(er / k);
      c.rmse_trans_m = std::sqrt(et / k);
      c.rmse_rot_biased_deg = std::sqrt(erb / k);
      c.rmse_trans_biased_m = std::sqrt(etb / k);
      fs.emplace_back(c.n, c.rmse_sigma_px);
      fr.emplace_back(c.n, c.rmse_rot_deg);
      ft.emplace_back(c.n, c.rmse_trans_m);
      res.cells.push_back(c);
    }
    if (ns >= 3) {
      const double s = cfg.sigmas_px[si];
      res.slopes.push_back({s, "sigma", LogLogSlope(fs)});
      res.slopes.push_back({s, "rotation", LogLogSlope(fr)});
      res.slopes.push_back({s, "translation", LogLogSlope(ft)});
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Odometry runs

struct RunRecord {
  TrajectoryKind trajectory = TrajectoryKind::kLine;
  std::string policy;
  int rep = 0;
  MetricReport metrics;
  int dropped_frames = 0;
  int ba_runs = 0;
  std::vector<FrameDiagnostics> frames;
};

inline std::uint64_t SceneSeed(std::uint64_t master, TrajectoryKind traj, int rep) {
  return DeriveSeed(master, stream::kRepetition,
                    (static_cast<std::uint64_t>(traj) << 32) | static_cast<std::uint64_t>(rep));
}

/// Every policy runs on the same scene for a given (trajectory, repetition),
/// so policy comparisons are paired.
inline std::vector<RunRecord> RunPolicies(const ExperimentConfig& cfg,
                                          const std::vector<TrajectoryKind>& trajectories,
                                          const std::vector<std::string>& policies, int reps,
                                          int workers) {
  const auto r = static_cast<std::size_t>(reps);
  const auto per_job = ParallelMap(trajectories.size() * r, workers, [&](std::size_t job) {
    SceneConfig sc = cfg.scene;
    sc.trajectory = trajectories[job / r];
    const int rep = static_cast<int>(job % r);
    sc.seed = SceneSeed(cfg.seed, sc.trajectory, rep);
    const Scene scene = GenerateScene(sc);
    std::vector<RunRecord> out;
    for (const auto& policy : policies) {
      const auto res = RunOdometry(WithPolicy(cfg.pipeline, policy), scene);
      out.push_back({sc.trajectory, policy, rep, res.metrics, res.dropped_frames, res.ba_runs, res.frames});
    }
    return out;
  });
  std::vector<RunRecord> flat;
  for (const auto& v : per_job) flat.insert(flat.end(), v.begin(), v.end());
  return flat;
}

struct PolicySummary {
  TrajectoryKind trajectory = TrajectoryKind::kLine;
  std::string policy;
  MetricReport mean;
  int runs = 0;
};

inline std::vector<PolicySummary> SummarizeRuns(const std::vector<RunRecord>& runs,
                                                const std::vector<TrajectoryKind>& trajectories,
                                                const std::vector<std::string>& policies) {
  std::vector<PolicySummary> out;
  for (auto traj : trajectories) {
    for (const auto& policy : policies) {
      PolicySummary s{traj, policy, {}, 0};
      for (const auto& run : runs) {
        if (run.trajectory != traj || run.policy != policy) continue;
        s.mean.ate_t += run.metrics.ate_t;
        s.mean.ate_r += run.metrics.ate_r;
        s.mean.rpe_t += run.metrics.rpe_t;
        s.mean.rpe_r += run.metrics.rpe_r;
        ++s.runs;
      }
      if (s.runs > 0) {
        const double k = s.runs;
        s.mean = {s.mean.ate_t / k, s.mean.ate_r / k, s.mean.rpe_t / k, s.mean.rpe_r / k};
      }
      out.push_back(s);
    }
  }
  return out;
}

inline const PolicySummary& FindSummary(const std::vector<PolicySummary>& s, TrajectoryKind traj,
                                        std::string_view policy) {
  for (const auto& x : s) {
    if (x.trajectory == traj && x.policy == policy) return x;
  }
  throw Error(ErrorCode::kInvalidArgument, "no summary for policy " + std::string(policy));
}

// ---------------------------------------------------------------------------
// Commands

enum class Profile { kDefault, kSmoke, kFull };

inline Profile ParseProfile(std::string_view s) {
  if (s.empty() || s == "default") return Profile::kDefault;
  if (s == "smoke") return Profile::kSmoke;
  if (s == "full") return Profile::kFull;
  throw Error(ErrorCode::kConfig, "profile must be smoke or full");
}

struct RunOptions {
  Profile profile = Profile::kDefault;
  std::optional<int> reps;  // overrides config and profile
  int workers = 1;
};

using OutputFiles = std::map<std::string, std::string>;  // file name -> contents

inline const std::vector<std::string>& KnownCommands() {
  static const std::vector<std::string> c{"consistency", "kf-compare", "ba-effect", "pipeline"};
  return c;
}

namespace detail {

// Smoke profile: 30 repetitions and n <= 240 for the sweep; two short runs
// (100 frames) for the odometry commands.
inline int ResolveRepetitions(const std::string& command, const ExperimentConfig& cfg,
                              const RunOptions& opts) {
  int reps = command == "consistency" ? 1000 : command == "pipeline" ? 1 : 10;
  if (opts.profile == Profile::kSmoke) reps = command == "consistency" ? 30 : std::min(reps, 2);
  if (cfg.repetitions > 0) reps = cfg.repetitions;
  if (opts.reps) reps = *opts.reps;
  if (reps < 1) throw Error(ErrorCode::kConfig, "repetitions must be >= 1");
  return reps;
}

inline ExperimentConfig ApplyProfile(ExperimentConfig cfg, const RunOptions& opts) {
  if (opts.profile != Profile::kSmoke) return cfg;
  std::erase_if(cfg.sizes, [](int n) { return n > 240; });
  cfg.scene.n_frames = std::min(cfg.scene.n_frames, 100);
  return cfg;
}

inline std::string Meta(const std::string& command, const ExperimentConfig& cfg,
                        const RunOptions& opts, int reps) {
  std::string m = "vo-kit " VOKIT_VERSION "\n";
  m += "command = " + command + "\n";
  m += std::string("profile = ") +
       (opts.profile == Profile::kSmoke ? "smoke" : opts.profile == Profile::kFull ? "full" : "default") +
       "\n";
  m += "effective_repetitions = " + std::to_string(reps) + "\n";
  m += "# configuration\n" + EchoConfig(cfg);
  return m;
}

inline void AddFrameRows(CsvTable& t, const RunRecord& run) {
  for (const auto& f : run.frames) {
    t.Add(std::string(ToString(run.trajectory)), run.policy, run.rep, f.frame, f.keyframe, f.status,
          f.n_correspondences, f.n_kept, f.n_inliers, f.sigma_px, f.rel_t_err, f.rel_r_err_deg,
          f.abs_t_err, f.abs_r_err_deg);
  }
}

inline CsvTable RunsTable(const std::vector<RunRecord>& runs) {
  CsvTable t{{"trajectory", "policy", "rep", "ate_t_m", "ate_r_deg", "rpe_t_m", "rpe_r_deg",
              "dropped_frames", "ba_runs"},
             {}};
  for (const auto& r : runs) {
    t.Add(std::string(ToString(r.trajectory)), r.policy, r.rep, r.metrics.ate_t, r.metrics.ate_r,
          r.metrics.rpe_t, r.metrics.rpe_r, r.dropped_frames, r.ba_runs);
  }
  return t;
}

inline CsvTable SummaryTable(const std::vector<PolicySummary>& s) {
  CsvTable t{{"trajectory", "policy", "runs", "ate_t_m", "ate_r_deg", "rpe_t_m", "rpe_r_deg"}, {}};
  for (const auto& x : s) {
    t.Add(std::string(ToString(x.trajectory)), x.policy, x.runs, x.mean.ate_t, x.mean.ate_r,
          x.mean.rpe_t, x.mean.rpe_r);
  }
  return t;
}

}  // namespace detail

inline const std::vector<std::string>& TablePolicies() {
  static const std::vector<std::string> p{"latest", "two", "three", "latest+ba"};
  return p;
}

/// Runs one command and returns its output files (results.csv, summary.csv,
/// meta.txt, plus runs.csv for the odometry comparisons). Pure in (config,
/// options minus worker count).
inline OutputFiles RunCommand(const std::string& command, const ExperimentConfig& config,
                              const RunOptions& opts) {
  if (std::find(KnownCommands().begin(), KnownCommands().end(), command) == KnownCommands().end()) {
    throw Error(ErrorCode::kConfig, "unknown command '" + command + "'");
  }
  const ExperimentConfig cfg = detail::ApplyProfile(config, opts);
  ValidateConfig(cfg);
  const int reps = detail::ResolveRepetitions(command, cfg, opts);
  OutputFiles files;
  files["meta.txt"] = detail::Meta(command, cfg, opts, reps);

  if (command == "consistency") {
    const auto res = RunConsistency(cfg, reps, opts.workers);
    CsvTable results{{"sigma_px", "n", "trials", "failures", "rmse_sigma_px", "rmse_rot_deg",
                      "rmse_trans_m", "rmse_rot_biased_deg", "rmse_trans_biased_m"},
                     {}};
    for (const auto& c : res.cells) {
      results.Add(c.sigma_px, c.n, c.trials, c.failures, c.rmse_sigma_px, c.rmse_rot_deg,
                  c.rmse_trans_m, c.rmse_rot_biased_deg, c.rmse_trans_biased_m);
    }
    CsvTable summary{{"sigma_px", "quantity", "slope"}, {}};
    for (const auto& s : res.slopes) summary.Add(s.sigma_px, s.quantity, s.slope);
    files["results.csv"] = results.ToString();
    files["summary.csv"] = summary.ToString();
    return files;
  }

  CsvTable frames{{"trajectory", "policy", "rep", "frame", "keyframe", "status", "correspondences",
                   "kept", "inliers", "sigma_px", "rel_t_err_m", "rel_r_err_deg", "abs_t_err_m",
                   "abs_r_err_deg"},
                  {}};

  if (command == "kf-compare" || command == "ba-effect") {
    const std::vector<TrajectoryKind> trajs{TrajectoryKind::kLine, TrajectoryKind::kCircle};
    const std::vector<std::string> policies =
        command == "kf-compare" ? TablePolicies() : std::vector<std::string>{"latest", "latest+ba"};
    const auto runs = RunPolicies(cfg, trajs, policies, reps, opts.workers);
    const auto summary = SummarizeRuns(runs, trajs, policies);
    files["runs.csv"] = detail::RunsTable(runs).ToString();

    if (command == "kf-compare") {
      // Per-frame errors averaged over repetitions.
      CsvTable series{{"trajectory", "policy", "frame", "mean_rel_t_err_m", "mean_rel_r_err_deg",
                       "mean_abs_t_err_m", "mean_abs_r_err_deg"},
                      {}};
      for (auto traj : trajs) {
        for (const auto& policy : policies) {
          std::vector<const RunRecord*> sel;
          for (const auto& r : runs) {
            if (r.trajectory == traj && r.policy == policy) sel.push_back(&r);
          }
          const std::size_t nf = sel.front()->frames.size();
          for (std::size_t f = 0; f < nf; ++f) {
            double a = 0, b = 0, c = 0, d = 0;
            for (const auto* r : sel) {
              a += r->frames[f].rel_t_err;
              b += r->frames[f].rel_r_err_deg;
              c += r->frames[f].abs_t_err;
              d += r->frames[f].abs_r_err_deg;
            }
            const double k = static_cast<double>(sel.size());
            series.Add(std::string(ToString(traj)), policy, f, a / k, b / k, c / k, d / k);
          }
        }
      }
      files["results.csv"] = series.ToString();
      files["summary.csv"] = detail::SummaryTable(summary).ToString();
    } else {
      files["results.csv"] = detail::SummaryTable(summary).ToString();
      CsvTable effect{{"trajectory", "ate_t_without_m", "ate_t_with_m", "ate_t_improvement",
                       "rpe_t_without_m", "rpe_t_with_m", "rpe_t_ratio"},
                      {}};
      for (auto traj : trajs) {
        const auto& wo = FindSummary(summary, traj, "latest").mean;
        const auto& w = FindSummary(summary, traj, "latest+ba").mean;
        effect.Add(std::string(ToString(traj)), wo.ate_t, w.ate_t, wo.ate_t / w.ate_t, wo.rpe_t,
                   w.rpe_t, w.rpe_t / wo.rpe_t);
      }
      files["summary.csv"] = effect.ToString();
    }
    return files;
  }

  // pipeline: the configured trajectory and policy.
  const auto runs = RunPolicies(cfg, {cfg.scene.trajectory}, {cfg.policy}, reps, opts.workers);
  for (const auto& r : runs) detail::AddFrameRows(frames, r);
  files["results.csv"] = frames.ToString();
  files["summary.csv"] = detail::RunsTable(runs).ToString();
  return files;
}

inline void WriteOutputs(const std::filesystem::path& dir, const OutputFiles& files) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kConfig, "cannot create output directory '" + dir.string() + "'");
  for (const auto& [name, contents] : files) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw Error(ErrorCode::kConfig, "cannot write '" + (dir / name).string() + "'");
    out << contents;
  }
}

}  // namespace vokit
