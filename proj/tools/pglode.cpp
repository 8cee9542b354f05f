// pglode: generate / train / evaluate / case-study over synthetic monsoon data.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pglode/pglode.hpp"

namespace fs = std::filesystem;
using namespace pglode;

namespace {

struct GlobalOptions {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> dataset;
};

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory '" + dir + "': " + ec.message());
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void write_text(const std::string& path, const std::string& text) {
  binary::write_file(path, text, DataError("cannot write '" + path + "'"));
}

RunConfig resolve_config(const GlobalOptions& g) {
  RunConfig cfg = g.config_path.empty() ? RunConfig{} : load_config(g.config_path);
  for (const auto& kv : g.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (g.seed) cfg.seed = *g.seed;
  if (g.out) cfg.out = *g.out;
  if (g.dataset) cfg.dataset = *g.dataset;
  return cfg;
}

/// Echo the effective configuration next to the outputs.
void echo_config(const RunConfig& cfg, const std::string& command) {
  ensure_dir(cfg.out);
  write_text(join(cfg.out, command + ".config"), dump_config(cfg));
}

Experiment load_experiment(const RunConfig& cfg) { return prepare_experiment(read_dataset(cfg.dataset), cfg); }

std::vector<Checkpoint> load_checkpoints(const std::vector<std::string>& paths) {
  std::vector<Checkpoint> cks;
  for (const auto& p : paths) cks.push_back(read_checkpoint(p));
  return cks;
}

int cmd_generate(const RunConfig& cfg) {
  cfg.validate();
  echo_config(cfg, "generate");
  const auto set = generate(cfg.synth_config());
  if (auto parent = fs::path(cfg.dataset).parent_path(); !parent.empty()) ensure_dir(parent.string());
  write_dataset(set, cfg.dataset);
  std::printf("wrote %s: %zu days on %s, %zu planted extreme pixel-days\n", cfg.dataset.c_str(), set.days(),
              set.spec().describe().c_str(), planted_extreme_count(set));
  return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& model_name) {
  cfg.validate();
  const ModelKind kind = parse_model_kind(model_name);
  echo_config(cfg, "train_" + model_name);
  const auto ex = load_experiment(cfg);
  auto outcome = train_model(ex, kind, cfg, [](const EpochLoss& e) {
    std::printf("epoch %zu total %.6f mse %.6f bce %.6f\n", e.epoch, e.total, e.mse, e.bce);
    std::fflush(stdout);
  });
  const std::string ck_path = join(cfg.out, model_name + ".pgw");
  write_checkpoint(outcome.checkpoint, ck_path);
  write_text(join(cfg.out, model_name + "_loss.csv"), outcome.report.to_csv());
  std::printf("wrote %s (%.1f s)\n", ck_path.c_str(), outcome.report.seconds);
  return 0;
}

int cmd_evaluate(const RunConfig& cfg, const std::vector<std::string>& checkpoint_paths) {
  cfg.validate();
  echo_config(cfg, "evaluate");
  const auto ex = load_experiment(cfg);
  const auto cks = load_checkpoints(checkpoint_paths);
  const auto result = evaluate_experiment(ex, cfg, cks);
  const auto csv = report_csv(result.rows);
  write_text(join(cfg.out, "report.csv"), csv);
  write_text(join(cfg.out, "report.svg"), report_svg(result.rows));
  std::fputs(csv.c_str(), stdout);
  return 0;
}

int cmd_case_study(const RunConfig& cfg, const std::vector<std::string>& checkpoint_paths,
                   const CaseStudyRequest& req) {
  cfg.validate();
  echo_config(cfg, "case_study");
  const auto ex = load_experiment(cfg);
  const auto cks = load_checkpoints(checkpoint_paths);
  const auto cs = case_study(ex, cfg, cks, req);
  write_text(join(cfg.out, "case_study.csv"), cs.to_csv());
  const std::string title =
      "Tile (" + std::to_string(req.tile_row) + ", " + std::to_string(req.tile_col) + ") maximum rainfall";
  write_text(join(cfg.out, "case_study.svg"), cs.to_svg(title));
  std::fputs(cs.to_csv().c_str(), stdout);
  return 0;
}

int fail(int code, const std::string& msg) {
  std::string line = msg;
  for (char& c : line)
    if (c == '\n') c = ' ';
  std::fprintf(stderr, "error: %s\n", line.c_str());
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Physics-gated latent ODE extreme-rainfall experiments on synthetic data"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOptions g;
  app.add_option("--config", g.config_path, "key=value configuration file")->check(CLI::ExistingFile);
  app.add_option("--set", g.sets, "override one config key (key=value), repeatable");
  app.add_option("--seed", g.seed, "global seed");
  app.add_option("--out", g.out, "output directory");
  app.add_option("--dataset", g.dataset, "PGL1 dataset path");

  auto* gen = app.add_subcommand("generate", "generate a synthetic dataset");
  std::optional<std::size_t> n_days;
  gen->add_option("--n-days", n_days, "number of days");

  auto* train = app.add_subcommand("train", "train one model and save a checkpoint");
  std::string model_name;
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
  train->add_option("--model", model_name, "pg-lode or convlstm")->required();
  train->add_option("--epochs", epochs, "training epochs");
  train->add_option("--learning-rate", lr, "Adam learning rate");

  auto* eval = app.add_subcommand("evaluate", "verify persistence and checkpoints on the eval split");
  std::vector<std::string> eval_cks;
  eval->add_option("--checkpoint", eval_cks, "PGW1 checkpoint (repeatable)");

  auto* cs = app.add_subcommand("case-study", "single-tile time series around an extreme day");
  std::vector<std::string> cs_cks;
  CaseStudyRequest req;
  cs->add_option("--checkpoint", cs_cks, "PGW1 checkpoint (repeatable)");
  cs->add_option("--tile-row", req.tile_row, "tile row in the tile grid");
  cs->add_option("--tile-col", req.tile_col, "tile column in the tile grid");
  cs->add_option("--center-day", req.center_day, "eval-split day index (default: largest observed tile max)");
  cs->add_option("--window", req.window, "number of days");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(1, e.what());
  }

  try {
    RunConfig cfg = resolve_config(g);
    if (n_days) cfg.synth.n_days = *n_days;
    if (epochs) cfg.loss.epochs = *epochs;
    if (lr) cfg.loss.learning_rate = *lr;
    if (gen->parsed()) return cmd_generate(cfg);
    if (train->parsed()) return cmd_train(cfg, model_name);
    if (eval->parsed()) return cmd_evaluate(cfg, eval_cks);
    if (cs->parsed()) return cmd_case_study(cfg, cs_cks, req);
  } catch (const ConfigError& e) {
    return fail(1, e.what());
  } catch (const NumericalError& e) {
    return fail(3, e.what());
  } catch (const std::exception& e) {
    return fail(2, e.what());
  }
  return 1;
}
