#include "drqs/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace drqs;
namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::vector<double> taus;
  std::optional<int> h;
  std::optional<int> workers;
  std::string out_dir = "out";
  std::string input;
  std::size_t draws = 0;
};

BacktestPlan resolve_plan(const Options& o) {
  if (o.config.empty()) throw ConfigError("--config is required");
  auto plan = load_plan(o.config);
  if (o.seed) plan.seed = *o.seed;
  if (!o.taus.empty()) plan.taus = o.taus;
  if (o.h) plan.h = *o.h;
  if (o.workers) plan.workers = *o.workers;
  plan.validate();
  return plan;
}

SeriesPanel load_panel(const BacktestPlan& plan) {
  auto panel = ingest(plan.panel_path, plan.h);
  if (panel.quarterly != plan.quarterly) throw ConfigError("plan and panel use different time formats");
  return panel;
}

// Agent forecasts from a previous fit-agents run, or fitted now when absent.
AgentStageResult agent_forecasts(const BacktestPlan& plan, const SeriesPanel& panel, const fs::path& dir) {
  const auto path = dir / "agent_forecasts.csv";
  AgentStageResult stage;
  if (fs::exists(path)) {
    stage.forecasts.quarterly = plan.quarterly;
    merge_external_agents(stage, load_agent_forecasts(path.string()));
    return stage;
  }
  stage = run_agent_stage(plan, panel);
  if (!plan.agent_file.empty()) merge_external_agents(stage, load_agent_forecasts(plan.agent_file));
  return stage;
}

int cmd_ingest(const Options& o) {
  std::string path;
  int h = o.h.value_or(1);
  if (!o.input.empty()) {
    path = o.input;
  } else {
    const auto plan = resolve_plan(o);
    path = plan.panel_path;
    h = plan.h;
  }
  const auto panel = ingest(path, h);
  fs::create_directories(o.out_dir);
  write_transformed_panel((fs::path(o.out_dir) / "panel_transformed.csv").string(), panel);
  std::size_t n = 0;
  for (const auto& s : panel.series) n += s.y.size();
  std::cout << "ingested " << panel.series.size() << " series, " << n << " observations\n";
  return 0;
}

int cmd_fit_agents(const Options& o) {
  const auto plan = resolve_plan(o);
  const auto panel = load_panel(plan);
  auto stage = run_agent_stage(plan, panel);
  fs::create_directories(o.out_dir);
  write_agent_forecasts((fs::path(o.out_dir) / "agent_forecasts.csv").string(), stage.forecasts);
  write_audit((fs::path(o.out_dir) / "audit_agents.csv").string(), stage.audit, plan.quarterly);
  std::cout << "wrote " << stage.forecasts.size() << " agent forecasts\n";
  return 0;
}

int cmd_synth(const Options& o, bool factor) {
  const auto plan = resolve_plan(o);
  const auto panel = load_panel(plan);
  fs::create_directories(o.out_dir);
  const auto agents = agent_forecasts(plan, panel, o.out_dir);
  const auto q = plan.quarterly;
  if (factor) {
    const auto res = run_fdrqs_stage(plan, panel, agents);
    write_forecasts((fs::path(o.out_dir) / "forecasts_fdrqs.csv").string(), res.rows, q);
    if (plan.joint_draws) write_joint_draws((fs::path(o.out_dir) / "joint_draws_fdrqs.csv").string(), res.joint, q);
    write_correlations((fs::path(o.out_dir) / "correlation_fdrqs.csv").string(), res.joint, q);
    std::cout << "wrote " << res.rows.size() << " factor synthesis forecasts\n";
  } else {
    const auto res = run_drqs_stage(plan, panel, agents);
    write_forecasts((fs::path(o.out_dir) / "forecasts_drqs.csv").string(), res.rows, q);
    std::cout << "wrote " << res.rows.size() << " synthesis forecasts\n";
  }
  return 0;
}

int cmd_evaluate(const Options& o) {
  const auto plan = resolve_plan(o);
  const auto panel = load_panel(plan);
  const fs::path dir = o.out_dir;
  const QuantileGrid grid(plan.taus);
  std::vector<ModelForecasts> models;
  const auto agent_path = dir / "agent_forecasts.csv";
  if (!fs::exists(agent_path)) throw ConfigError("missing score panel: no agent_forecasts.csv in " + dir.string());
  const auto set = load_agent_forecasts(agent_path.string());
  for (const auto& a : synthesis_agents(plan, set)) models.push_back(model_from_agent(a, set, grid));
  for (const char* name : {"drqs", "fdrqs"}) {
    const auto path = dir / (std::string("forecasts_") + name + ".csv");
    if (!fs::exists(path)) continue;
    bool quarterly = plan.quarterly;
    models.push_back(model_from_rows(name, read_forecasts(path.string(), quarterly), grid));
  }
  const auto summary = evaluate_models(plan, panel, models, dir);
  std::cout << "scored " << summary.scored << " (series, time, model, scheme) cells\n";
  return 0;
}

int cmd_reconstruct(const Options& o) {
  if (o.input.empty()) throw ConfigError("reconstruct needs --input <forecasts csv>");
  std::size_t R = o.draws;
  std::uint64_t seed = o.seed.value_or(20240601);
  if (!o.config.empty()) {
    const auto plan = resolve_plan(o);
    if (R == 0) R = plan.reconstruction_draws;
    seed = plan.seed;
  }
  if (R == 0) R = 10000;
  bool quarterly = true;
  const auto rows = read_forecasts(o.input, quarterly);
  std::map<std::pair<std::string, std::int64_t>, std::vector<std::pair<double, double>>> cells;
  for (const auto& r : rows) cells[{r.series, r.time}].push_back({r.tau, r.point});
  fs::create_directories(o.out_dir);
  CsvWriter out((fs::path(o.out_dir) / "reconstruction_draws.csv").string(), {"series", "time", "draw", "value"});
  for (auto& [key, nodes] : cells) {
    std::sort(nodes.begin(), nodes.end());
    std::vector<double> taus, qs;
    for (const auto& [t, v] : nodes) {
      taus.push_back(t);
      qs.push_back(v);
    }
    auto rng = make_stream(seed, {static_cast<std::uint64_t>(Stage::pit), hash_string(key.first),
                                  static_cast<std::uint64_t>(key.second)});
    const auto rec = reconstruct_predictive(qs, QuantileGrid(taus), R, rng);
    for (std::size_t d = 0; d < rec.draws.size(); ++d)
      out.row({key.first, format_time(key.second, quarterly), std::to_string(d), format_double(rec.draws[d])});
  }
  std::cout << "reconstructed " << cells.size() << " predictive densities\n";
  return 0;
}

int cmd_backtest(const Options& o, bool audit_only) {
  const auto plan = resolve_plan(o);
  const auto res = run_backtest(plan, o.out_dir);
  if (audit_only) {
    std::cout << "look-ahead audit: " << res.audit.size() << " records, " << res.violations << " violations\n";
  } else {
    std::cout << "backtest complete: " << res.manifest["files"].size() << " files in " << o.out_dir << "\n";
  }
  return res.violations == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian quantile forecast synthesis backtests"};
  app.set_help_flag("--help", "print help");
  app.require_subcommand(1);
  Options o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON backtest plan");
    sub->add_option("--seed", o.seed, "root seed override");
    sub->add_option("--tau", o.taus, "quantile levels override")->delimiter(',');
    sub->add_option("--h", o.h, "transform horizon override")->check(CLI::PositiveNumber);
    sub->add_option("--workers", o.workers, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--out-dir", o.out_dir, "output directory");
  };
  std::map<std::string, std::function<int()>> handlers{
      {"ingest", [&] { return cmd_ingest(o); }},
      {"fit-agents", [&] { return cmd_fit_agents(o); }},
      {"synth", [&] { return cmd_synth(o, false); }},
      {"synth-factor", [&] { return cmd_synth(o, true); }},
      {"evaluate", [&] { return cmd_evaluate(o); }},
      {"reconstruct", [&] { return cmd_reconstruct(o); }},
      {"backtest", [&] { return cmd_backtest(o, false); }},
      {"audit-lookahead", [&] { return cmd_backtest(o, true); }},
  };
  const std::map<std::string, std::string> help{
      {"ingest", "transform a level panel to annualized log growth"},
      {"fit-agents", "fit quantile agents over the expanding windows"},
      {"synth", "univariate quantile synthesis"},
      {"synth-factor", "multivariate factor quantile synthesis"},
      {"evaluate", "score forecasts and write plot data"},
      {"reconstruct", "draws from quantile forecasts"},
      {"backtest", "full pipeline"},
      {"audit-lookahead", "full pipeline, then report look-ahead violations"},
  };
  for (const auto& [name, text] : help) {
    auto* sub = app.add_subcommand(name, text);
    add_common(sub);
    if (name == "ingest" || name == "reconstruct") sub->add_option("--input", o.input, "input CSV");
    if (name == "reconstruct") sub->add_option("--draws", o.draws, "draws per density");
  }
  CLI11_PARSE(app, argc, argv);
  try {
    for (auto* sub : app.get_subcommands()) return handlers.at(sub->get_name())();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const SchemaError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
