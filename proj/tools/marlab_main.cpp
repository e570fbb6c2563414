#include <chrono>
#include <cstdio>
#include <string>
#include <thread>

#include <CLI11.hpp>

#include "marlab/harness.hpp"
#include "marlab/service.hpp"

namespace {

int run_with_config(const std::string& verb, const std::string& config_path,
                    const std::string& out_override, bool has_seed,
                    std::uint64_t seed_override) {
  marlab::ExperimentConfig config;
  try {
    config = marlab::load_experiment_config(config_path);
  } catch (const marlab::ConfigError& e) {
    if (e.line > 0)
      std::fprintf(stderr, "config error at line %d, column %d: %s\n", e.line,
                   e.column, e.what());
    else
      std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  }

  const bool kind_ok =
      (verb == "verify" && config.kind == marlab::ExperimentKind::VerifyTheory) ||
      (verb == "train" && config.kind == marlab::ExperimentKind::Train) ||
      (verb == "ablate" &&
       (config.kind == marlab::ExperimentKind::AblationReweight ||
        config.kind == marlab::ExperimentKind::AblationParallel ||
        config.kind == marlab::ExperimentKind::AblationRoundsEpochs));
  if (!kind_ok) {
    std::fprintf(stderr,
                 "config error: experiment kind does not match the '%s' verb\n",
                 verb.c_str());
    return 2;
  }

  if (!out_override.empty()) config.out_dir = out_override;
  if (has_seed) config.seeds = {seed_override};
  return marlab::run_experiment(config);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "marlab: interleaved multi-agent RL on exactly solvable games"};
  app.require_subcommand(1);

  std::string config_path, out_override;
  std::uint64_t seed_override = 0;
  bool has_seed = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config file")
        ->required();
    sub->add_option("--out", out_override, "output directory override");
    sub->add_option("--seed", seed_override, "single-seed override")
        ->each([&](const std::string&) { has_seed = true; });
  };

  CLI::App* verify = app.add_subcommand(
      "verify", "certify the training guarantees with the exact oracle");
  add_common(verify);
  CLI::App* train =
      app.add_subcommand("train", "interleaved training experiment");
  add_common(train);
  CLI::App* ablate = app.add_subcommand(
      "ablate", "reweighting / parallel / rounds-epochs ablations");
  add_common(ablate);

  CLI::App* serve =
      app.add_subcommand("serve", "serve a frozen policy over the wire");
  std::string policy_path, host = "127.0.0.1";
  int port = 0;
  serve->add_option("--policy", policy_path, "policy JSON file")->required();
  serve->add_option("--host", host, "bind address");
  serve->add_option("--port", port, "bind port (0 picks one)");

  CLI11_PARSE(app, argc, argv);

  if (serve->parsed()) {
    try {
      marlab::TabularPolicy policy = marlab::load_policy(policy_path);
      marlab::PolicyServer server(policy.agent_id, policy, {host, port});
      std::printf("serving agent %d on %s\n", server.agent_id(),
                  server.endpoint().c_str());
      std::fflush(stdout);
      while (true) std::this_thread::sleep_for(std::chrono::seconds(1));
    } catch (const std::exception& e) {
      std::fprintf(stderr, "serve failed: %s\n", e.what());
      return 1;
    }
  }

  const std::string verb = app.get_subcommands().front()->get_name();
  return run_with_config(verb, config_path, out_override, has_seed,
                         seed_override);
}
