#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ikdrive/commands.hpp"

namespace {

using ikdrive::ExperimentConfig;

struct Args {
  std::string config;
  std::string data;
  std::string checkpoint;
  std::vector<std::string> checkpoints;
  std::string out;
};

void print_summary(const nlohmann::json& summary) { std::printf("%s\n", summary.dump(2).c_str()); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic driving-policy experiment runner"};
  app.set_version_flag("--version", std::string(ikdrive::kToolVersion));
  app.require_subcommand(1);

  Args a;
  auto add_common = [&](CLI::App* sub, bool needs_data, bool needs_out) {
    sub->add_option("-c,--config", a.config, "experiment config JSON")->required();
    if (needs_data) sub->add_option("-d,--data", a.data, "gen-data output directory")->required();
    if (needs_out) sub->add_option("-o,--out", a.out, "output directory")->required();
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate the episode dataset");
  add_common(gen, false, true);

  CLI::App* tr = app.add_subcommand("train", "train the configured variant");
  add_common(tr, true, true);

  CLI::App* ev = app.add_subcommand("eval", "endpoint metrics, collision proxy, stratified tables");
  add_common(ev, true, true);
  ev->add_option("-k,--checkpoint", a.checkpoint, "train output directory")->required();

  CLI::App* ps = app.add_subcommand("probe-stitch", "counterfactual obstacle-stitch probe");
  add_common(ps, true, true);
  ps->add_option("-k,--checkpoint", a.checkpoint, "train output directory")->required();

  CLI::App* sa = app.add_subcommand("probe-saliency", "input-gradient grounding probe");
  add_common(sa, true, true);
  sa->add_option("-k,--checkpoint", a.checkpoint, "train output directory")->required();

  CLI::App* an = app.add_subcommand("analyze", "decomposition, variance floor, correlations, comparison");
  add_common(an, true, true);
  an->add_option("-k,--checkpoint", a.checkpoints, "train output directories (repeatable)")
      ->required()
      ->take_all();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;  // bad usage is a configuration problem
  }

  try {
    ExperimentConfig cfg = ikdrive::load_experiment_config(a.config);
    if (gen->parsed()) {
      print_summary(ikdrive::cmd_gen_data(cfg, a.out));
    } else if (tr->parsed()) {
      print_summary(ikdrive::cmd_train(cfg, a.data, a.out));
    } else if (ev->parsed()) {
      print_summary(ikdrive::cmd_eval(cfg, a.checkpoint, a.data, a.out));
    } else if (ps->parsed()) {
      print_summary(ikdrive::cmd_probe_stitch(cfg, a.checkpoint, a.data, a.out));
    } else if (sa->parsed()) {
      print_summary(ikdrive::cmd_probe_saliency(cfg, a.checkpoint, a.data, a.out));
    } else if (an->parsed()) {
      std::vector<std::filesystem::path> dirs(a.checkpoints.begin(), a.checkpoints.end());
      print_summary(ikdrive::cmd_analyze(cfg, dirs, a.data, a.out));
    }
    return 0;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return ikdrive::classify_error(e);
  }
}
