#pragma once

// Expanding-window backtest: panel ingestion, plan/config, a bounded worker
// pool, the agent -> synthesis -> evaluation stages and their output files.

#include "drqs/agents.hpp"
#include "drqs/drqs.hpp"
#include "drqs/eval.hpp"
#include "drqs/fdrqs.hpp"
#include "drqs/io.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <thread>

namespace drqs {

inline constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Panel

struct SeriesData {
  std::string id;
  std::vector<std::int64_t> level_times;  // every row of the input file
  std::vector<double> level;
  std::map<std::string, std::vector<double>> predictors;  // aligned with level_times, NaN when missing
  std::vector<std::int64_t> times;  // transformed target times (first h dropped)
  std::vector<double> y;

  std::optional<double> target(std::int64_t t) const {
    if (times.empty() || t < times.front() || t > times.back()) return std::nullopt;
    return y[static_cast<std::size_t>(t - times.front())];
  }
  // "y" is the transformed target; anything else is a raw predictor column.
  std::optional<double> value(const std::string& column, std::int64_t t) const {
    if (column == "y") return target(t);
    auto it = predictors.find(column);
    if (it == predictors.end()) throw ConfigError("unknown predictor column '" + column + "'");
    if (level_times.empty() || t < level_times.front() || t > level_times.back()) return std::nullopt;
    const double v = it->second[static_cast<std::size_t>(t - level_times.front())];
    if (!std::isfinite(v)) return std::nullopt;
    return v;
  }
};

struct SeriesPanel {
  bool quarterly = true;
  int h = 1;
  std::vector<std::string> predictor_names;
  std::vector<SeriesData> series;  // sorted by id

  const SeriesData& get(const std::string& id) const {
    for (const auto& s : series)
      if (s.id == id) return s;
    throw ConfigError("series '" + id + "' not in panel");
  }
};

/// Read `series,time,Y,<predictors...>` and form y_t = 400 log(Y_t / Y_{t-h}) / h.
inline SeriesPanel ingest(const std::string& path, int h) {
  if (h < 1) throw ConfigError("transform horizon h must be at least 1");
  const auto table = read_csv(path);
  const auto c_series = table.require_column("series");
  const auto c_time = table.require_column("time");
  const auto c_level = table.require_column("Y");
  SeriesPanel panel;
  panel.h = h;
  std::vector<std::size_t> pred_cols;
  for (std::size_t c = 0; c < table.header.size(); ++c) {
    if (c == c_series || c == c_time || c == c_level) continue;
    if (table.header[c] == "y") throw SchemaError("predictor column may not be named 'y'", 1);
    pred_cols.push_back(c);
    panel.predictor_names.push_back(table.header[c]);
  }

  std::map<std::string, SeriesData> by_id;
  std::optional<bool> quarterly;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    const long line = table.line_numbers[r];
    if (row[c_series].empty()) throw SchemaError("missing series id", line);
    const auto time = parse_time(row[c_time]);
    if (!time) throw SchemaError("unparseable time '" + row[c_time] + "'", line);
    if (quarterly && *quarterly != time->quarterly) throw SchemaError("mixed time formats", line);
    quarterly = time->quarterly;
    const auto level = parse_double(row[c_level]);
    if (!level || !std::isfinite(*level)) throw SchemaError("missing or non-numeric Y", line);
    if (!(*level > 0.0)) throw SchemaError("nonpositive level Y; the log transform needs Y > 0", line);

    auto& s = by_id[row[c_series]];
    s.id = row[c_series];
    if (!s.level_times.empty()) {
      const auto prev = s.level_times.back();
      if (time->value <= prev) throw SchemaError("times must be strictly increasing within a series", line);
      if (time->value != prev + 1) throw SchemaError("gap in time index for series " + s.id, line);
    }
    s.level_times.push_back(time->value);
    s.level.push_back(*level);
    for (std::size_t p = 0; p < pred_cols.size(); ++p) {
      const auto& cell = row[pred_cols[p]];
      double v = std::numeric_limits<double>::quiet_NaN();
      if (!cell.empty() && cell != "NA") {
        const auto parsed = parse_double(cell);
        if (!parsed) throw SchemaError("non-numeric predictor '" + table.header[pred_cols[p]] + "'", line);
        v = *parsed;
      }
      s.predictors[panel.predictor_names[p]].push_back(v);
    }
  }
  panel.quarterly = quarterly.value_or(true);
  for (auto& [id, s] : by_id) {
    for (const auto& name : panel.predictor_names) s.predictors[name];  // present even when empty
    for (std::size_t k = static_cast<std::size_t>(h); k < s.level.size(); ++k) {
      s.times.push_back(s.level_times[k]);
      s.y.push_back(400.0 * std::log(s.level[k] / s.level[k - static_cast<std::size_t>(h)]) / h);
    }
    panel.series.push_back(std::move(s));
  }
  return panel;
}

inline void write_transformed_panel(const std::string& path, const SeriesPanel& panel) {
  CsvWriter out(path, {"series", "time", "y"});
  for (const auto& s : panel.series)
    for (std::size_t k = 0; k < s.times.size(); ++k)
      out.row({s.id, format_time(s.times[k], panel.quarterly), format_double(s.y[k])});
}

// ---------------------------------------------------------------------------
// Plan

struct PredictorRef {
  std::string column;
  int lag = 1;
};

struct AgentSpecConfig {
  std::string name;
  std::vector<PredictorRef> predictors;
  bool intercept = true;
  double delta = 0.95;
  double prior_var = 1000.0;
};

struct Windows {
  std::int64_t agent_fit_start = 0;
  std::int64_t agent_forecast_start = 0;
  std::int64_t synth_fit_start = 0;
  std::int64_t synth_forecast_start = 0;
  std::int64_t end = 0;
};

struct DrqsSettings {
  bool enabled = true;
  double delta = 0.9;
  double beta = 0.9;
  double n0 = 0.01;
  double s0 = 0.01;
  double c0_intercept = 1000.0;
  double c0_weight = 1.0;
};

struct FdrqsSettings {
  bool enabled = false;
  int factors = 5;
  double delta = 0.85;
  double beta = 0.85;
  double n0 = 0.001;
  double s0 = 0.001;
  double nu = 3.0;
  double a1 = 2.5;
  double a2 = 3.5;
  double c0_intercept = 1000.0;
  double c0_weight = 1.0;
};

struct BacktestPlan {
  std::string panel_path;
  std::string agent_file;  // optional external agent forecasts, merged with fitted agents
  int h = 1;
  std::uint64_t seed = 20240601;
  int workers = 1;
  std::vector<double> taus = QuantileGrid::standard().taus();
  std::vector<std::string> series;  // empty: all series in the panel
  bool quarterly = true;
  Windows windows;
  std::vector<AgentSpecConfig> agents;
  McmcConfig agent_mcmc{3000, 1000, false};
  McmcConfig synth_mcmc{3000, 1000, false};
  DrqsSettings drqs;
  FdrqsSettings fdrqs;
  std::string reference;  // empty: first agent
  std::size_t reconstruction_draws = 10000;
  bool joint_draws = true;

  void validate() const {
    if (panel_path.empty()) throw ConfigError("plan: 'panel' is required");
    if (h < 1) throw ConfigError("plan: h must be at least 1");
    if (workers < 1) throw ConfigError("plan: workers must be at least 1");
    if (taus.empty()) throw ConfigError("plan: tau grid is empty");
    QuantileGrid{taus};
    const auto& w = windows;
    if (!(w.agent_fit_start < w.agent_forecast_start)) {
      throw ConfigError("plan: agent_fit_start must precede agent_forecast_start");
    }
    if (w.synth_fit_start < w.agent_forecast_start) {
      throw ConfigError("plan: synth_fit_start precedes agent_forecast_start; agents have no forecasts there");
    }
    if (!(w.synth_fit_start < w.synth_forecast_start)) {
      throw ConfigError("plan: synth_fit_start must precede synth_forecast_start");
    }
    if (w.end < w.synth_forecast_start) throw ConfigError("plan: end precedes synth_forecast_start");
    if (agents.empty() && agent_file.empty()) throw ConfigError("plan: no agents configured and no agent file");
    std::set<std::string> names;
    for (const auto& a : agents) {
      if (a.name.empty()) throw ConfigError("plan: agent name missing");
      if (a.name == "drqs" || a.name == "fdrqs") throw ConfigError("plan: agent name '" + a.name + "' is reserved");
      if (!names.insert(a.name).second) throw ConfigError("plan: duplicate agent name '" + a.name + "'");
      if (a.predictors.empty() && !a.intercept) throw ConfigError("plan: agent " + a.name + " has no predictors");
      for (const auto& p : a.predictors) {
        // lag >= 1 keeps every predictor strictly before the forecast target
        if (p.lag < 1) throw ConfigError("plan: agent " + a.name + " predictor lags must be >= 1");
      }
      DqlmSpec{QuantileLevel{0.5}, a.delta, a.prior_var}.validate();
    }
    agent_mcmc.validate();
    synth_mcmc.validate();
    DiscountConfig{drqs.delta, drqs.beta}.validate();
    if (fdrqs.enabled) {
      if (fdrqs.factors < 1) throw ConfigError("plan: fdrqs factors must be >= 1");
      DiscountConfig{fdrqs.delta, fdrqs.beta}.validate();
    }
    if (reconstruction_draws < 1) throw ConfigError("plan: reconstruction_draws must be positive");
  }

  nlohmann::json to_json() const {
    auto t = [&](std::int64_t v) { return format_time(v, quarterly); };
    nlohmann::json j;
    j["panel"] = panel_path;
    if (!agent_file.empty()) j["agent_file"] = agent_file;
    j["h"] = h;
    j["seed"] = seed;
    j["taus"] = taus;
    j["series"] = series;
    j["windows"] = {{"agent_fit_start", t(windows.agent_fit_start)},
                    {"agent_forecast_start", t(windows.agent_forecast_start)},
                    {"synth_fit_start", t(windows.synth_fit_start)},
                    {"synth_forecast_start", t(windows.synth_forecast_start)},
                    {"end", t(windows.end)}};
    j["agents"] = nlohmann::json::array();
    for (const auto& a : agents) {
      nlohmann::json preds = nlohmann::json::array();
      for (const auto& p : a.predictors) preds.push_back({{"column", p.column}, {"lag", p.lag}});
      j["agents"].push_back(
          {{"name", a.name}, {"predictors", preds}, {"intercept", a.intercept}, {"delta", a.delta}, {"prior_var", a.prior_var}});
    }
    j["mcmc"] = {{"agent", {{"draws", agent_mcmc.draws}, {"burnin", agent_mcmc.burnin}}},
                 {"synth", {{"draws", synth_mcmc.draws}, {"burnin", synth_mcmc.burnin}}}};
    j["drqs"] = {{"enabled", drqs.enabled}, {"delta", drqs.delta}, {"beta", drqs.beta}, {"n0", drqs.n0},
                 {"s0", drqs.s0}, {"c0_intercept", drqs.c0_intercept}, {"c0_weight", drqs.c0_weight}};
    j["fdrqs"] = {{"enabled", fdrqs.enabled}, {"factors", fdrqs.factors}, {"delta", fdrqs.delta},
                  {"beta", fdrqs.beta}, {"n0", fdrqs.n0}, {"s0", fdrqs.s0}, {"nu", fdrqs.nu}, {"a1", fdrqs.a1},
                  {"a2", fdrqs.a2}, {"c0_intercept", fdrqs.c0_intercept}, {"c0_weight", fdrqs.c0_weight}};
    j["reference"] = reference;
    j["reconstruction_draws"] = reconstruction_draws;
    j["joint_draws"] = joint_draws;
    return j;
  }

  // Worker count is excluded: it never changes results.
  std::string config_hash() const {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash_string(to_json().dump())));
    return buf;
  }
};

namespace detail {

inline std::int64_t json_time(const nlohmann::json& v, const char* key, std::optional<bool>& quarterly) {
  std::optional<TimeIndex> t;
  if (v.is_number_integer()) {
    t = TimeIndex{v.get<std::int64_t>(), false};
  } else if (v.is_string()) {
    t = parse_time(v.get<std::string>());
  }
  if (!t) throw ConfigError(std::string("plan: bad time for '") + key + "'");
  if (quarterly && *quarterly != t->quarterly) throw ConfigError("plan: mixed time formats in windows");
  quarterly = t->quarterly;
  return t->value;
}

template <class T>
void get_if(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const char* where) {
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) throw ConfigError(std::string("plan: unknown key '") + k + "' in " + where);
  }
}

}  // namespace detail

/// Parse a JSON plan. Relative paths resolve against `base_dir`.
inline BacktestPlan plan_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  using detail::get_if;
  try {
    detail::check_keys(j,
                       {"panel", "agent_file", "h", "seed", "workers", "taus", "series", "windows", "agents", "mcmc",
                        "drqs", "fdrqs", "reference", "reconstruction_draws", "joint_draws"},
                       "plan");
    BacktestPlan p;
    auto resolve = [&](const std::string& s) {
      if (s.empty()) return s;
      std::filesystem::path path(s);
      return (path.is_absolute() || base_dir.empty() ? path : base_dir / path).lexically_normal().string();
    };
    p.panel_path = resolve(j.value("panel", std::string{}));
    p.agent_file = resolve(j.value("agent_file", std::string{}));
    get_if(j, "h", p.h);
    get_if(j, "seed", p.seed);
    get_if(j, "workers", p.workers);
    get_if(j, "taus", p.taus);
    get_if(j, "series", p.series);
    get_if(j, "reference", p.reference);
    get_if(j, "reconstruction_draws", p.reconstruction_draws);
    get_if(j, "joint_draws", p.joint_draws);
    if (!j.contains("windows")) throw ConfigError("plan: 'windows' is required");
    const auto& w = j.at("windows");
    detail::check_keys(w, {"agent_fit_start", "agent_forecast_start", "synth_fit_start", "synth_forecast_start", "end"},
                       "windows");
    std::optional<bool> quarterly;
    for (const char* key : {"agent_fit_start", "agent_forecast_start", "synth_fit_start", "synth_forecast_start", "end"}) {
      if (!w.contains(key)) throw ConfigError(std::string("plan: windows.") + key + " is required");
    }
    p.windows.agent_fit_start = detail::json_time(w.at("agent_fit_start"), "agent_fit_start", quarterly);
    p.windows.agent_forecast_start = detail::json_time(w.at("agent_forecast_start"), "agent_forecast_start", quarterly);
    p.windows.synth_fit_start = detail::json_time(w.at("synth_fit_start"), "synth_fit_start", quarterly);
    p.windows.synth_forecast_start = detail::json_time(w.at("synth_forecast_start"), "synth_forecast_start", quarterly);
    p.windows.end = detail::json_time(w.at("end"), "end", quarterly);
    p.quarterly = quarterly.value_or(true);

    if (j.contains("agents")) {
      for (const auto& a : j.at("agents")) {
        detail::check_keys(a, {"name", "predictors", "intercept", "delta", "prior_var"}, "agent");
        AgentSpecConfig spec;
        spec.name = a.value("name", std::string{});
        get_if(a, "intercept", spec.intercept);
        get_if(a, "delta", spec.delta);
        get_if(a, "prior_var", spec.prior_var);
        if (a.contains("predictors")) {
          for (const auto& pr : a.at("predictors")) {
            detail::check_keys(pr, {"column", "lag"}, "predictor");
            spec.predictors.push_back({pr.at("column").get<std::string>(), pr.value("lag", 1)});
          }
        }
        p.agents.push_back(std::move(spec));
      }
    }
    if (j.contains("mcmc")) {
      const auto& m = j.at("mcmc");
      detail::check_keys(m, {"agent", "synth"}, "mcmc");
      for (auto [key, cfg] : {std::pair{"agent", &p.agent_mcmc}, std::pair{"synth", &p.synth_mcmc}}) {
        if (!m.contains(key)) continue;
        detail::check_keys(m.at(key), {"draws", "burnin"}, "mcmc section");
        get_if(m.at(key), "draws", cfg->draws);
        get_if(m.at(key), "burnin", cfg->burnin);
      }
    }
    if (j.contains("drqs")) {
      const auto& d = j.at("drqs");
      detail::check_keys(d, {"enabled", "delta", "beta", "n0", "s0", "c0_intercept", "c0_weight"}, "drqs");
      get_if(d, "enabled", p.drqs.enabled);
      get_if(d, "delta", p.drqs.delta);
      get_if(d, "beta", p.drqs.beta);
      get_if(d, "n0", p.drqs.n0);
      get_if(d, "s0", p.drqs.s0);
      get_if(d, "c0_intercept", p.drqs.c0_intercept);
      get_if(d, "c0_weight", p.drqs.c0_weight);
    }
    if (j.contains("fdrqs")) {
      const auto& f = j.at("fdrqs");
      detail::check_keys(
          f, {"enabled", "factors", "delta", "beta", "n0", "s0", "nu", "a1", "a2", "c0_intercept", "c0_weight"}, "fdrqs");
      get_if(f, "enabled", p.fdrqs.enabled);
      get_if(f, "factors", p.fdrqs.factors);
      get_if(f, "delta", p.fdrqs.delta);
      get_if(f, "beta", p.fdrqs.beta);
      get_if(f, "n0", p.fdrqs.n0);
      get_if(f, "s0", p.fdrqs.s0);
      get_if(f, "nu", p.fdrqs.nu);
      get_if(f, "a1", p.fdrqs.a1);
      get_if(f, "a2", p.fdrqs.a2);
      get_if(f, "c0_intercept", p.fdrqs.c0_intercept);
      get_if(f, "c0_weight", p.fdrqs.c0_weight);
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("plan: ") + e.what());
  }
}

inline BacktestPlan load_plan(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return plan_from_json(j, std::filesystem::path(path).parent_path());
}

// ---------------------------------------------------------------------------
// Worker pool

struct Job {
  std::string label;
  std::function<void()> run;
};

class JobFailed : public std::runtime_error {
 public:
  JobFailed(std::string label, const std::string& message)
      : std::runtime_error("job " + label + " failed: " + message), label_(std::move(label)) {}
  const std::string& label() const { return label_; }

 private:
  std::string label_;
};

/// Runs jobs on at most `workers` threads. After the first failure no new jobs
/// start; the failure reported is the lowest-index failing job.
inline void run_jobs(std::vector<Job>& jobs, int workers) {
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::mutex mu;
  std::optional<std::size_t> first_failure;
  std::string message;
  auto worker = [&] {
    while (!failed.load()) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      try {
        jobs[i].run();
      } catch (const std::exception& e) {
        std::lock_guard lock(mu);
        if (!first_failure || i < *first_failure) {
          first_failure = i;
          message = e.what();
        }
        failed.store(true);
      }
    }
  };
  const int n = std::max(1, std::min<int>(workers, static_cast<int>(jobs.size())));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (int k = 0; k < n; ++k) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (first_failure) throw JobFailed(jobs[*first_failure].label, message);
}

// ---------------------------------------------------------------------------
// Stage records

enum class Stage : std::uint64_t { agent = 1, drqs = 2, fdrqs = 3, pit = 4 };

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::agent: return "agent";
    case Stage::drqs: return "drqs";
    case Stage::fdrqs: return "fdrqs";
    case Stage::pit: return "pit";
  }
  return "?";
}

/// What a job consumed: the fit range and the latest time index of any value read.
struct AuditRecord {
  Stage stage;
  std::string series;  // "*" for joint jobs
  std::string agent;   // "" for synthesis
  double tau;
  std::int64_t target;
  std::int64_t fit_from;
  std::int64_t fit_to;
  std::int64_t info_time;
  bool ok() const { return info_time <= target - 1; }
};

struct Timing {
  std::string label;
  double seconds;
};

struct ForecastRow {
  std::string series;
  std::int64_t time;
  double tau;
  double point;
  double lo;
  double hi;
  std::size_t n_draws;
};

struct JointDrawBlock {
  std::int64_t time;
  double tau;
  std::vector<std::string> series;
  Matrix draws;  // D x N
};

inline std::string format_tau(double tau) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", tau);
  return buf;
}

inline std::string job_label(Stage stage, const std::string& series, const std::string& agent, double tau,
                             std::int64_t target, bool quarterly) {
  std::string s = std::string(to_string(stage)) + "[series=" + series;
  if (!agent.empty()) s += ",agent=" + agent;
  return s + ",tau=" + format_tau(tau) + ",window=" + format_time(target - 1, quarterly) + "]";
}

// ---------------------------------------------------------------------------
// Agent stage

struct AgentStageResult {
  AgentForecastSet forecasts;
  std::map<AgentForecastSet::Key, std::int64_t> info_time;
  std::vector<AuditRecord> audit;
  std::vector<Timing> timings;
};

inline std::vector<std::string> selected_series(const BacktestPlan& plan, const SeriesPanel& panel) {
  std::vector<std::string> out;
  if (plan.series.empty()) {
    for (const auto& s : panel.series) out.push_back(s.id);
  } else {
    for (const auto& id : plan.series) out.push_back(panel.get(id).id);
  }
  if (out.empty()) throw ConfigError("panel has no series");
  return out;
}

/// DQLM design row for target time t: sources are the columns at t - lag.
inline std::optional<Vector> agent_design_row(const SeriesData& s, const AgentSpecConfig& a, std::int64_t t,
                                              std::int64_t& latest_source) {
  Vector x(static_cast<Eigen::Index>(a.predictors.size()) + (a.intercept ? 1 : 0));
  Eigen::Index k = 0;
  if (a.intercept) x(k++) = 1.0;
  for (const auto& p : a.predictors) {
    const auto v = s.value(p.column, t - p.lag);
    if (!v) return std::nullopt;
    latest_source = std::max(latest_source, t - p.lag);
    x(k++) = *v;
  }
  return x;
}

inline AgentStageResult run_agent_stage(const BacktestPlan& plan, const SeriesPanel& panel) {
  const auto ids = selected_series(plan, panel);
  const auto& w = plan.windows;
  AgentStageResult out;
  out.forecasts.quarterly = plan.quarterly;

  struct Slot {
    std::string series, agent;
    double tau;
    std::int64_t target;
    AgentForecast forecast;
    AuditRecord audit;
    double seconds = 0.0;
  };
  std::vector<Slot> slots;
  for (const auto& id : ids)
    for (const auto& a : plan.agents)
      for (double tau : plan.taus)
        for (auto t = w.agent_forecast_start; t <= w.end; ++t) slots.push_back({id, a.name, tau, t, {}, {}});

  std::vector<Job> jobs;
  jobs.reserve(slots.size());
  for (std::size_t k = 0; k < slots.size(); ++k) {
    Slot& slot = slots[k];
    jobs.push_back({job_label(Stage::agent, slot.series, slot.agent, slot.tau, slot.target, plan.quarterly), [&, k] {
                      Slot& sl = slots[k];
                      const auto start = std::chrono::steady_clock::now();
                      const auto& s = panel.get(sl.series);
                      const AgentSpecConfig* spec = nullptr;
                      for (const auto& a : plan.agents)
                        if (a.name == sl.agent) spec = &a;
                      std::int64_t latest = std::numeric_limits<std::int64_t>::min();
                      std::vector<Vector> rows;
                      std::vector<double> ys;
                      std::int64_t fit_from = std::numeric_limits<std::int64_t>::max();
                      for (auto t = w.agent_fit_start; t <= sl.target - 1; ++t) {
                        std::int64_t src = latest;
                        const auto x = agent_design_row(s, *spec, t, src);
                        const auto y = s.target(t);
                        if (!x || !y) {
                          // Leading rows without lagged predictors are skipped; holes later are errors.
                          if (rows.empty()) continue;
                          throw std::runtime_error("missing data at " + format_time(t, plan.quarterly));
                        }
                        fit_from = std::min(fit_from, t);
                        latest = std::max({latest, src, t});
                        rows.push_back(*x);
                        ys.push_back(*y);
                      }
                      if (rows.empty()) throw std::runtime_error("no usable observations in the fit window");
                      Matrix X(static_cast<Eigen::Index>(rows.size()), rows.front().size());
                      for (std::size_t r = 0; r < rows.size(); ++r) X.row(static_cast<Eigen::Index>(r)) = rows[r].transpose();
                      const Vector y = Eigen::Map<const Vector>(ys.data(), static_cast<Eigen::Index>(ys.size()));
                      auto rng = make_stream(plan.seed, {static_cast<std::uint64_t>(Stage::agent), hash_string(sl.series),
                                                         hash_string(sl.agent), static_cast<std::uint64_t>(tau_key(sl.tau)),
                                                         static_cast<std::uint64_t>(sl.target)});
                      const DqlmSpec dspec{QuantileLevel{sl.tau}, spec->delta, spec->prior_var};
                      const auto post = fit_dqlm(y, X, dspec, plan.agent_mcmc, rng);
                      std::int64_t src = latest;
                      const auto x_next = agent_design_row(s, *spec, sl.target, src);
                      if (!x_next) throw std::runtime_error("predictors for the forecast target are missing");
                      latest = std::max(latest, src);
                      sl.forecast = forecast_dqlm(post, *x_next, sl.target, sl.tau);
                      sl.audit = {Stage::agent, sl.series, sl.agent, sl.tau, sl.target, fit_from, sl.target - 1, latest};
                      sl.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
                    }});
  }
  run_jobs(jobs, plan.workers);

  for (const auto& sl : slots) {
    out.forecasts.insert(sl.series, sl.target, sl.agent, sl.tau, sl.forecast.a, sl.forecast.A);
    out.info_time[{sl.series, sl.target, sl.agent, tau_key(sl.tau)}] = sl.audit.info_time;
    out.audit.push_back(sl.audit);
    out.timings.push_back({job_label(Stage::agent, sl.series, sl.agent, sl.tau, sl.target, plan.quarterly), sl.seconds});
  }
  return out;
}

/// Add forecasts from an external file. Their information time is taken as the
/// period before the target, the contract such files are required to meet.
inline void merge_external_agents(AgentStageResult& stage, const AgentForecastSet& external) {
  for (const auto& [k, f] : external.entries()) {
    stage.forecasts.insert(k.series, k.time, k.agent, f.tau, f.a, f.A);
    stage.info_time[k] = k.time - 1;
  }
}

/// Agent order used by the synthesizers: configured agents first, then external ones.
inline std::vector<std::string> synthesis_agents(const BacktestPlan& plan, const AgentForecastSet& set) {
  std::vector<std::string> out;
  for (const auto& a : plan.agents) out.push_back(a.name);
  for (const auto& a : set.agents())
    if (std::find(out.begin(), out.end(), a) == out.end()) out.push_back(a);
  return out;
}

// ---------------------------------------------------------------------------
// Synthesis stages

struct SynthStageResult {
  std::vector<ForecastRow> rows;
  std::vector<JointDrawBlock> joint;
  std::vector<AuditRecord> audit;
  std::vector<Timing> timings;
};

namespace detail {

inline std::int64_t agent_info_time(const AgentStageResult& agents, const std::string& series,
                                    const std::vector<std::string>& names, double tau, std::int64_t from,
                                    std::int64_t to) {
  std::int64_t latest = std::numeric_limits<std::int64_t>::min();
  for (const auto& a : names)
    for (auto t = from; t <= to; ++t) {
      auto it = agents.info_time.find({series, t, a, tau_key(tau)});
      if (it == agents.info_time.end()) {
        throw std::runtime_error("no agent forecast for agent " + a + " at time index " + std::to_string(t));
      }
      latest = std::max(latest, it->second);
    }
  return latest;
}

inline Vector target_range(const SeriesData& s, std::int64_t from, std::int64_t to, bool quarterly) {
  Vector y(to - from + 1);
  for (auto t = from; t <= to; ++t) {
    const auto v = s.target(t);
    if (!v) throw std::runtime_error("series " + s.id + " has no observation at " + format_time(t, quarterly));
    y(t - from) = *v;
  }
  return y;
}

}  // namespace detail

inline DrqsConfig drqs_config(const BacktestPlan& plan, double tau, int J) {
  auto cfg = DrqsConfig::defaults(QuantileLevel{tau}, J);
  cfg.discount = {plan.drqs.delta, plan.drqs.beta};
  cfg.prior.n0 = plan.drqs.n0;
  cfg.prior.s0 = plan.drqs.s0;
  cfg.prior.C0.diagonal().setConstant(plan.drqs.c0_weight);
  cfg.prior.C0(0, 0) = plan.drqs.c0_intercept;
  return cfg;
}

inline FdrqsConfig fdrqs_config(const BacktestPlan& plan, double tau, int N, int J) {
  const int L = plan.fdrqs.factors;
  auto cfg = FdrqsConfig::defaults(QuantileLevel{tau}, N, J, L);
  cfg.delta = plan.fdrqs.delta;
  cfg.beta.setConstant(plan.fdrqs.beta);
  cfg.n0.setConstant(plan.fdrqs.n0);
  cfg.s0.setConstant(plan.fdrqs.s0);
  cfg.nu.setConstant(plan.fdrqs.nu);
  cfg.a1.setConstant(plan.fdrqs.a1);
  cfg.a2.setConstant(plan.fdrqs.a2);
  cfg.C0.diagonal().setConstant(plan.fdrqs.c0_weight);
  cfg.C0.diagonal().head(L).setConstant(plan.fdrqs.c0_intercept);
  return cfg;
}

inline SynthStageResult run_drqs_stage(const BacktestPlan& plan, const SeriesPanel& panel,
                                       const AgentStageResult& agents) {
  const auto ids = selected_series(plan, panel);
  const auto names = synthesis_agents(plan, agents.forecasts);
  const auto& w = plan.windows;
  struct Slot {
    std::string series;
    double tau;
    std::int64_t target;
    QuantileForecast forecast;
    AuditRecord audit;
    double seconds = 0.0;
  };
  std::vector<Slot> slots;
  for (const auto& id : ids)
    for (double tau : plan.taus)
      for (auto t = w.synth_forecast_start; t <= w.end; ++t) slots.push_back({id, tau, t, {}, {}});

  std::vector<Job> jobs;
  for (std::size_t k = 0; k < slots.size(); ++k) {
    jobs.push_back({job_label(Stage::drqs, slots[k].series, "", slots[k].tau, slots[k].target, plan.quarterly), [&, k] {
                      Slot& sl = slots[k];
                      const auto start = std::chrono::steady_clock::now();
                      const auto& s = panel.get(sl.series);
                      const auto from = w.synth_fit_start, to = sl.target - 1;
                      const Vector y = detail::target_range(s, from, to, plan.quarterly);
                      const auto inputs = agents.forecasts.inputs(sl.series, sl.tau, names, from, to);
                      const auto next = agents.forecasts.inputs(sl.series, sl.tau, names, sl.target, sl.target);
                      const auto info = std::max(to, detail::agent_info_time(agents, sl.series, names, sl.tau, from, sl.target));
                      auto rng = make_stream(plan.seed, {static_cast<std::uint64_t>(Stage::drqs), hash_string(sl.series),
                                                         static_cast<std::uint64_t>(tau_key(sl.tau)),
                                                         static_cast<std::uint64_t>(sl.target)});
                      const auto cfg = drqs_config(plan, sl.tau, static_cast<int>(names.size()));
                      const auto post = gibbs_drqs(y, inputs, cfg, plan.synth_mcmc, rng);
                      sl.forecast = forecast_drqs(post, next.mean.row(0).transpose(), next.var.row(0).transpose(), rng,
                                                  sl.target);
                      sl.audit = {Stage::drqs, sl.series, "", sl.tau, sl.target, from, to, info};
                      sl.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
                    }});
  }
  run_jobs(jobs, plan.workers);

  SynthStageResult out;
  for (const auto& sl : slots) {
    const auto& f = sl.forecast;
    out.rows.push_back({sl.series, sl.target, sl.tau, f.point, f.lo, f.hi, f.draws.size()});
    out.audit.push_back(sl.audit);
    out.timings.push_back({job_label(Stage::drqs, sl.series, "", sl.tau, sl.target, plan.quarterly), sl.seconds});
  }
  return out;
}

inline SynthStageResult run_fdrqs_stage(const BacktestPlan& plan, const SeriesPanel& panel,
                                        const AgentStageResult& agents) {
  const auto ids = selected_series(plan, panel);
  const auto names = synthesis_agents(plan, agents.forecasts);
  const int N = static_cast<int>(ids.size());
  const int J = static_cast<int>(names.size());
  if (plan.fdrqs.factors >= N) {
    throw ConfigError("plan: fdrqs needs fewer factors than series (L=" + std::to_string(plan.fdrqs.factors) +
                      ", N=" + std::to_string(N) + ")");
  }
  const auto& w = plan.windows;
  struct Slot {
    double tau;
    std::int64_t target;
    FdrqsForecast forecast;
    AuditRecord audit;
    double seconds = 0.0;
  };
  std::vector<Slot> slots;
  for (double tau : plan.taus)
    for (auto t = w.synth_forecast_start; t <= w.end; ++t) slots.push_back({tau, t, {}, {}});

  std::vector<Job> jobs;
  for (std::size_t k = 0; k < slots.size(); ++k) {
    jobs.push_back({job_label(Stage::fdrqs, "*", "", slots[k].tau, slots[k].target, plan.quarterly), [&, k] {
                      Slot& sl = slots[k];
                      const auto start = std::chrono::steady_clock::now();
                      const auto from = w.synth_fit_start, to = sl.target - 1;
                      Matrix Y(N, to - from + 1);
                      std::vector<AgentInputs> inputs;
                      Matrix a_next(N, J), A_next(N, J);
                      std::int64_t info = to;
                      for (int i = 0; i < N; ++i) {
                        Y.row(i) = detail::target_range(panel.get(ids[i]), from, to, plan.quarterly).transpose();
                        inputs.push_back(agents.forecasts.inputs(ids[i], sl.tau, names, from, to));
                        const auto next = agents.forecasts.inputs(ids[i], sl.tau, names, sl.target, sl.target);
                        a_next.row(i) = next.mean.row(0);
                        A_next.row(i) = next.var.row(0);
                        info = std::max(info, detail::agent_info_time(agents, ids[i], names, sl.tau, from, sl.target));
                      }
                      auto rng = make_stream(plan.seed, {static_cast<std::uint64_t>(Stage::fdrqs),
                                                         static_cast<std::uint64_t>(tau_key(sl.tau)),
                                                         static_cast<std::uint64_t>(sl.target)});
                      const auto cfg = fdrqs_config(plan, sl.tau, N, J);
                      const auto post = gibbs_fdrqs(Y, inputs, cfg, plan.synth_mcmc, rng);
                      sl.forecast = forecast_fdrqs(post, a_next, A_next, rng, sl.target);
                      sl.audit = {Stage::fdrqs, "*", "", sl.tau, sl.target, from, to, info};
                      sl.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
                    }});
  }
  run_jobs(jobs, plan.workers);

  SynthStageResult out;
  for (auto& sl : slots) {
    for (int i = 0; i < N; ++i) {
      const auto& f = sl.forecast.series[static_cast<std::size_t>(i)];
      out.rows.push_back({ids[i], sl.target, sl.tau, f.point, f.lo, f.hi, f.draws.size()});
    }
    out.joint.push_back({sl.target, sl.tau, ids, std::move(sl.forecast.joint)});
    out.audit.push_back(sl.audit);
    out.timings.push_back({job_label(Stage::fdrqs, "*", "", sl.tau, sl.target, plan.quarterly), sl.seconds});
  }
  // Rows grouped by series, then time, then tau, matching the univariate file.
  std::stable_sort(out.rows.begin(), out.rows.end(), [](const ForecastRow& a, const ForecastRow& b) {
    return std::tie(a.series, a.time, a.tau) < std::tie(b.series, b.time, b.tau);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Files

inline const std::vector<std::string>& forecast_header() {
  static const std::vector<std::string> h{"series", "time", "tau", "point", "lo95", "hi95", "n_draws"};
  return h;
}

inline void write_forecasts(const std::string& path, const std::vector<ForecastRow>& rows, bool quarterly) {
  CsvWriter out(path, forecast_header());
  auto sorted = rows;
  std::stable_sort(sorted.begin(), sorted.end(), [](const ForecastRow& a, const ForecastRow& b) {
    return std::tie(a.series, a.time, a.tau) < std::tie(b.series, b.time, b.tau);
  });
  for (const auto& r : sorted) {
    out.row({r.series, format_time(r.time, quarterly), format_tau(r.tau), format_double(r.point), format_double(r.lo),
             format_double(r.hi), std::to_string(r.n_draws)});
  }
}

inline std::vector<ForecastRow> read_forecasts(const std::string& path, bool& quarterly) {
  const auto table = read_csv(path);
  std::vector<std::size_t> col;
  for (const auto& name : forecast_header()) col.push_back(table.require_column(name));
  std::vector<ForecastRow> rows;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    const long line = table.line_numbers[r];
    const auto t = parse_time(row[col[1]]);
    if (!t) throw SchemaError("unparseable time", line);
    quarterly = t->quarterly;
    auto num = [&](std::size_t c) {
      const auto v = parse_double(row[col[c]]);
      if (!v) throw SchemaError("non-numeric '" + table.header[col[c]] + "'", line);
      return *v;
    };
    const double tau = num(2);
    QuantileLevel{tau};
    rows.push_back({row[col[0]], t->value, tau, num(3), num(4), num(5), static_cast<std::size_t>(num(6))});
  }
  return rows;
}

inline void write_joint_draws(const std::string& path, const std::vector<JointDrawBlock>& blocks, bool quarterly) {
  CsvWriter out(path, {"time", "tau", "draw", "series", "Q"});
  for (const auto& b : blocks)
    for (Eigen::Index d = 0; d < b.draws.rows(); ++d)
      for (std::size_t i = 0; i < b.series.size(); ++i)
        out.row({format_time(b.time, quarterly), format_tau(b.tau), std::to_string(d), b.series[i],
                 format_double(b.draws(d, static_cast<Eigen::Index>(i)))});
}

inline void write_correlations(const std::string& path, const std::vector<JointDrawBlock>& blocks, bool quarterly) {
  CsvWriter out(path, {"time", "tau", "series_a", "series_b", "rho"});
  for (const auto& b : blocks) {
    const Matrix c = b.draws.rowwise() - b.draws.colwise().mean();
    const Matrix cov = c.transpose() * c;
    for (std::size_t i = 0; i < b.series.size(); ++i)
      for (std::size_t j = 0; j < b.series.size(); ++j) {
        const auto ii = static_cast<Eigen::Index>(i), jj = static_cast<Eigen::Index>(j);
        const double den = std::sqrt(cov(ii, ii) * cov(jj, jj));
        const double rho = den > 0.0 ? cov(ii, jj) / den : (i == j ? 1.0 : 0.0);
        out.row({format_time(b.time, quarterly), format_tau(b.tau), b.series[i], b.series[j], format_double(rho)});
      }
  }
}

inline void write_audit(const std::string& path, const std::vector<AuditRecord>& records, bool quarterly) {
  CsvWriter out(path, {"stage", "series", "agent", "tau", "target", "fit_from", "fit_to", "info_time", "ok"});
  for (const auto& r : records) {
    out.row({to_string(r.stage), r.series, r.agent, format_tau(r.tau), format_time(r.target, quarterly),
             format_time(r.fit_from, quarterly), format_time(r.fit_to, quarterly), format_time(r.info_time, quarterly),
             r.ok() ? "1" : "0"});
  }
}

// ---------------------------------------------------------------------------
// Evaluation

/// Quantile forecasts of one model keyed by (series, time), in grid order.
struct ModelForecasts {
  std::string name;
  std::map<std::pair<std::string, std::int64_t>, std::vector<double>> quantiles;
  std::vector<ForecastRow> rows;  // for fan data; empty for agents
};

inline ModelForecasts model_from_rows(const std::string& name, const std::vector<ForecastRow>& rows,
                                      const QuantileGrid& grid) {
  ModelForecasts m{name, {}, rows};
  for (const auto& r : rows) {
    auto& q = m.quantiles[{r.series, r.time}];
    if (q.empty()) q.assign(grid.size(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t k = 0; k < grid.size(); ++k)
      if (tau_key(grid[k]) == tau_key(r.tau)) q[k] = r.point;
  }
  return m;
}

inline ModelForecasts model_from_agent(const std::string& agent, const AgentForecastSet& set, const QuantileGrid& grid) {
  ModelForecasts m{agent, {}, {}};
  for (const auto& [k, f] : set.entries()) {
    if (k.agent != agent) continue;
    auto& q = m.quantiles[{k.series, k.time}];
    if (q.empty()) q.assign(grid.size(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t g = 0; g < grid.size(); ++g)
      if (tau_key(grid[g]) == k.tau) q[g] = f.a;
  }
  return m;
}

struct EvaluationSummary {
  std::size_t scored = 0;
  std::vector<std::string> files;
};

/// Scores every model on the common evaluation times and writes scores,
/// ratios, PIT and plot-ready files into `dir`.
inline EvaluationSummary evaluate_models(const BacktestPlan& plan, const SeriesPanel& panel,
                                         std::vector<ModelForecasts> models, const std::filesystem::path& dir) {
  const QuantileGrid grid(plan.taus);
  const auto ids = selected_series(plan, panel);
  std::sort(models.begin(), models.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  std::string reference = plan.reference;
  if (reference.empty() && !plan.agents.empty()) reference = plan.agents.front().name;
  if (reference.empty() && !models.empty()) reference = models.front().name;

  EvaluationSummary summary;
  auto file = [&](const std::string& name) {
    summary.files.push_back(name);
    return (dir / name).string();
  };
  const auto q = plan.quarterly;

  // Evaluation times: forecast window times where every model has a full grid and y is observed.
  std::vector<std::int64_t> times;
  for (auto t = plan.windows.synth_forecast_start; t <= plan.windows.end; ++t) {
    bool all = !models.empty();
    for (const auto& id : ids) {
      if (!panel.get(id).target(t)) all = false;
      for (const auto& m : models) {
        auto it = m.quantiles.find({id, t});
        if (it == m.quantiles.end()) {
          all = false;
          continue;
        }
        for (double v : it->second) all = all && std::isfinite(v);
      }
    }
    if (all) times.push_back(t);
  }

  // crps[model][scheme][series][time position]
  std::map<std::string, std::map<int, std::vector<std::vector<double>>>> crps;
  {
    CsvWriter out(file("scores.csv"), {"series", "time", "model", "scheme", "crps"});
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const auto& s = panel.get(ids[i]);
      for (std::size_t p = 0; p < times.size(); ++p) {
        const double y = *s.target(times[p]);
        for (const auto& m : models) {
          // Monotone rearrangement first so every node of the integrand is nonnegative.
          const auto qs = monotone_rearrange(m.quantiles.at({ids[i], times[p]}));
          for (auto scheme : kAllSchemes) {
            const double c = crps_quantile_weighted(y, qs, grid, scheme);
            auto& panel_scores = crps[m.name][static_cast<int>(scheme)];
            if (panel_scores.empty()) panel_scores.assign(ids.size(), std::vector<double>(times.size()));
            panel_scores[i][p] = c;
            out.row({ids[i], format_time(times[p], q), m.name, to_string(scheme), format_double(c)});
            ++summary.scored;
          }
        }
      }
    }
  }

  {
    const bool have_ref = crps.count(reference) > 0;
    CsvWriter ratios(file("ratios.csv"), {"model", "scheme", "t_star", "rcs"});
    CsvWriter curve(file("rcs_curve.csv"), {"series", "model", "scheme", "t_star", "rcs"});
    if (have_ref) {
      for (const auto& m : models) {
        for (auto scheme : kAllSchemes) {
          const auto& self = crps[m.name][static_cast<int>(scheme)];
          const auto& ref = crps[reference][static_cast<int>(scheme)];
          for (std::size_t p = 0; p < times.size(); ++p) {
            std::string value;
            try {
              value = format_double(rtcs(self, ref, 0, p));
            } catch (const std::domain_error&) {
              value = "NaN";
            }
            ratios.row({m.name, to_string(scheme), format_time(times[p], q), value});
            curve.row({"ALL", m.name, to_string(scheme), format_time(times[p], q), value});
          }
          for (std::size_t i = 0; i < ids.size(); ++i) {
            for (std::size_t p = 0; p < times.size(); ++p) {
              std::string value;
              try {
                value = format_double(rcs(self[i], ref[i], 0, p));
              } catch (const std::domain_error&) {
                value = "NaN";
              }
              curve.row({ids[i], m.name, to_string(scheme), format_time(times[p], q), value});
            }
          }
        }
      }
    }
  }

  {
    CsvWriter pits(file("pit.csv"), {"series", "time", "model", "pit"});
    std::map<std::string, std::vector<double>> by_model;
    if (grid.size() >= 4) {
      for (const auto& m : models) {
        for (const auto& id : ids) {
          for (auto t : times) {
            auto rng = make_stream(plan.seed, {static_cast<std::uint64_t>(Stage::pit), hash_string(id),
                                               hash_string(m.name), static_cast<std::uint64_t>(t)});
            const auto rec = reconstruct_predictive(m.quantiles.at({id, t}), grid, plan.reconstruction_draws, rng);
            const double u = pit(*panel.get(id).target(t), rec.draws);
            by_model[m.name].push_back(u);
            pits.row({id, format_time(t, q), m.name, format_double(u)});
          }
        }
      }
    }
    CsvWriter ecdf(file("pit_ecdf.csv"), {"model", "u", "ecdf"});
    for (auto& [name, us] : by_model) {
      std::sort(us.begin(), us.end());
      for (int k = 0; k <= 100; ++k) {
        const double u = k / 100.0;
        const auto below = std::upper_bound(us.begin(), us.end(), u + 1e-12) - us.begin();
        ecdf.row({name, format_double(u), format_double(static_cast<double>(below) / static_cast<double>(us.size()))});
      }
    }
  }

  for (const auto& m : models) {
    if (m.rows.empty() && (m.name != "drqs" && m.name != "fdrqs")) continue;
    CsvWriter fan(file("fan_" + m.name + ".csv"), {"series", "time", "tau", "point", "lo95", "hi95"});
    auto rows = m.rows;
    std::stable_sort(rows.begin(), rows.end(), [](const ForecastRow& a, const ForecastRow& b) {
      return std::tie(a.series, a.time, a.tau) < std::tie(b.series, b.time, b.tau);
    });
    for (const auto& r : rows)
      fan.row({r.series, format_time(r.time, q), format_tau(r.tau), format_double(r.point), format_double(r.lo),
               format_double(r.hi)});
  }
  return summary;
}

// ---------------------------------------------------------------------------
// Full run

struct RunResult {
  nlohmann::json manifest;
  std::vector<AuditRecord> audit;
  std::size_t violations = 0;
};

inline void write_manifest(const std::filesystem::path& dir, const nlohmann::json& manifest) {
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
}

inline RunResult run_backtest(const BacktestPlan& plan, const std::filesystem::path& out_dir) {
  plan.validate();
  std::filesystem::create_directories(out_dir);
  const auto started = std::chrono::steady_clock::now();
  RunResult result;
  auto& manifest = result.manifest;
  manifest["version"] = kVersion;
  manifest["config_hash"] = plan.config_hash();
  manifest["seed"] = plan.seed;
  manifest["config"] = plan.to_json();
  manifest["status"] = "running";
  manifest["files"] = nlohmann::json::array();
  manifest["timings"] = nlohmann::json::array();
  auto add_timings = [&](const std::vector<Timing>& ts) {
    for (const auto& t : ts) manifest["timings"].push_back({{"job", t.label}, {"seconds", t.seconds}});
  };
  auto add_file = [&](const std::string& name) { manifest["files"].push_back(name); };
  const auto q = plan.quarterly;

  try {
    const auto panel = ingest(plan.panel_path, plan.h);
    if (panel.quarterly != plan.quarterly) throw ConfigError("plan and panel use different time formats");

    AgentStageResult agents = run_agent_stage(plan, panel);
    if (!plan.agent_file.empty()) merge_external_agents(agents, load_agent_forecasts(plan.agent_file));
    add_timings(agents.timings);
    write_agent_forecasts((out_dir / "agent_forecasts.csv").string(), agents.forecasts);
    add_file("agent_forecasts.csv");
    result.audit = agents.audit;

    const QuantileGrid grid(plan.taus);
    std::vector<ModelForecasts> models;
    for (const auto& a : synthesis_agents(plan, agents.forecasts)) models.push_back(model_from_agent(a, agents.forecasts, grid));

    if (plan.drqs.enabled) {
      auto drqs = run_drqs_stage(plan, panel, agents);
      add_timings(drqs.timings);
      write_forecasts((out_dir / "forecasts_drqs.csv").string(), drqs.rows, q);
      add_file("forecasts_drqs.csv");
      result.audit.insert(result.audit.end(), drqs.audit.begin(), drqs.audit.end());
      models.push_back(model_from_rows("drqs", drqs.rows, grid));
    }
    if (plan.fdrqs.enabled) {
      auto fd = run_fdrqs_stage(plan, panel, agents);
      add_timings(fd.timings);
      write_forecasts((out_dir / "forecasts_fdrqs.csv").string(), fd.rows, q);
      add_file("forecasts_fdrqs.csv");
      if (plan.joint_draws) {
        write_joint_draws((out_dir / "joint_draws_fdrqs.csv").string(), fd.joint, q);
        add_file("joint_draws_fdrqs.csv");
      }
      write_correlations((out_dir / "correlation_fdrqs.csv").string(), fd.joint, q);
      add_file("correlation_fdrqs.csv");
      result.audit.insert(result.audit.end(), fd.audit.begin(), fd.audit.end());
      models.push_back(model_from_rows("fdrqs", fd.rows, grid));
    }

    const auto summary = evaluate_models(plan, panel, models, out_dir);
    for (const auto& f : summary.files) add_file(f);
    write_audit((out_dir / "audit.csv").string(), result.audit, q);
    add_file("audit.csv");
    for (const auto& r : result.audit)
      if (!r.ok()) ++result.violations;
    manifest["audit_violations"] = result.violations;
    manifest["status"] = "complete";
  } catch (const JobFailed& e) {
    manifest["status"] = "incomplete";
    manifest["failure"] = {{"job", e.label()}, {"message", e.what()}};
    manifest["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    write_manifest(out_dir, manifest);
    throw;
  } catch (const std::exception& e) {
    manifest["status"] = "incomplete";
    manifest["failure"] = {{"message", e.what()}};
    manifest["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    write_manifest(out_dir, manifest);
    throw;
  }
  manifest["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  write_manifest(out_dir, manifest);
  return result;
}

}  // namespace drqs
