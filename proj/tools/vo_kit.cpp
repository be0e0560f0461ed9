// vo-kit: runs the simulation studies and writes CSV results.
//
//   vo-kit <consistency|kf-compare|ba-effect|pipeline> --config <path> --out <dir>
//          [--seed S] [--reps R] [--profile smoke|full] [--workers W]
//
// Exit codes: 0 success, 2 configuration error, 3 runtime failure.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "vokit/config.hpp"
#include "vokit/experiments.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stereo visual odometry estimation kit"};
  app.set_version_flag("--version", std::string("vo-kit ") + VOKIT_VERSION);
  app.require_subcommand(1, 1);

  std::string config_path, out_dir, profile;
  std::optional<std::uint64_t> seed;
  std::optional<int> reps;
  int workers = vokit::DefaultWorkers();

  for (const auto& name : vokit::KnownCommands()) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "key = value configuration file")->required();
    sub->add_option("--out", out_dir, "output directory")->required();
    sub->add_option("--seed", seed, "master seed (overrides the config)");
    sub->add_option("--reps", reps, "Monte-Carlo repetitions")->check(CLI::PositiveNumber);
    sub->add_option("--profile", profile, "smoke or full")->check(CLI::IsMember({"smoke", "full"}));
    sub->add_option("--workers", workers, "worker threads")->check(CLI::PositiveNumber);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  vokit::ExperimentConfig cfg;
  vokit::RunOptions opts;
  try {
    cfg = vokit::ParseConfigFile(config_path);
    if (seed) cfg.seed = *seed;
    opts.profile = vokit::ParseProfile(profile);
    opts.reps = reps;
    opts.workers = workers;
  } catch (const vokit::Error& e) {
    std::cerr << "vo-kit: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    const auto files = vokit::RunCommand(command, cfg, opts);
    vokit::WriteOutputs(out_dir, files);
  } catch (const vokit::Error& e) {
    std::cerr << "vo-kit: " << e.what() << "\n";
    return e.code() == vokit::ErrorCode::kConfig ? kExitConfig : kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "vo-kit: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
