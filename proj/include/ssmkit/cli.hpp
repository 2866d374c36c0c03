#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "ssmkit/baselines.hpp"
#include "ssmkit/estimate.hpp"
#include "ssmkit/gauss.hpp"
#include "ssmkit/io.hpp"
#include "ssmkit/models.hpp"

namespace ssmkit::cli {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config helpers
// ---------------------------------------------------------------------------

inline json load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path.string());
  json j;
  in >> j;
  return j;
}

inline Vec vec_from_json(const json& j) {
  Vec v(j.size());
  int i = 0;
  for (const auto& x : j) v(i++) = x.get<double>();
  return v;
}

inline Mat mat_from_json(const json& j) {
  const int rows = static_cast<int>(j.size());
  const int cols = rows > 0 ? static_cast<int>(j.at(0).size()) : 0;
  Mat m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    if (static_cast<int>(j.at(r).size()) != cols)
      throw std::invalid_argument("ragged matrix in config");
    for (int c = 0; c < cols; ++c) m(r, c) = j.at(r).at(c).get<double>();
  }
  return m;
}

/// Builds the model named in config["model"]["name"] with optional parameter
/// overrides.  Known names: "ungm", "ct", "linear".
inline StateSpaceModel model_from_json(const json& model_cfg) {
  const std::string name = model_cfg.at("name").get<std::string>();
  const auto get = [&model_cfg](const char* key, double fallback) {
    return model_cfg.contains(key) ? model_cfg.at(key).get<double>() : fallback;
  };
  if (name == "ungm") {
    return ungm_model(get("a", 0.5), get("b", 25.0), get("c", 8.0), get("d", std::sqrt(0.05)),
                      get("q", 10.0), get("r", 0.01));
  }
  if (name == "ct") {
    std::vector<Vec> sensors = {(Vec(2) << -1.0, 0.5).finished(),
                                (Vec(2) << 1.0, 1.0).finished()};
    if (model_cfg.contains("sensors")) {
      sensors.clear();
      for (const auto& s : model_cfg.at("sensors")) sensors.push_back(vec_from_json(s));
    }
    Vec r_diag = (Vec(2) << 0.05 * 0.05, 0.1 * 0.1).finished();
    if (model_cfg.contains("r_diag")) r_diag = vec_from_json(model_cfg.at("r_diag"));
    return ct_model(get("qc", 0.1), get("qw", 0.1), get("dt", 0.01), sensors, r_diag);
  }
  if (name == "linear") {
    return linear_gaussian_model(mat_from_json(model_cfg.at("A")), mat_from_json(model_cfg.at("H")),
                                 mat_from_json(model_cfg.at("Q")), mat_from_json(model_cfg.at("R")),
                                 vec_from_json(model_cfg.at("m0")),
                                 mat_from_json(model_cfg.at("P0")));
  }
  throw std::invalid_argument("unknown model name: " + name);
}

inline Vec theta_from_json(const json& cfg, const StateSpaceModel& model) {
  if (cfg.contains("theta")) return vec_from_json(cfg.at("theta"));
  return model.default_theta;
}

/// Rule identifiers for multi-rule commands; "ekf" selects the extended
/// Kalman baseline instead of a sigma-point scheme.
inline std::vector<std::string> rules_from_json(const json& cfg) {
  std::vector<std::string> rules;
  if (cfg.contains("rules"))
    for (const auto& r : cfg.at("rules")) rules.push_back(r.get<std::string>());
  else if (cfg.contains("rule"))
    rules.push_back(cfg.at("rule").get<std::string>());
  else
    rules.emplace_back("sym3");
  return rules;
}

/// File-name-safe spelling of a rule identifier: "gh(3)" -> "gh3",
/// "ut(1,0.5,2)" -> "ut1_0.5_2".
inline std::string sanitize_rule_name(const std::string& rule) {
  std::string out;
  for (char c : rule) {
    if (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-')
      out.push_back(c);
    else if (c == ',' )
      out.push_back('_');
  }
  return out;
}

inline OptimizerConfig optimizer_from_json(const json& cfg, int param_dim) {
  OptimizerConfig oc;
  if (!cfg.contains("optimizer")) return oc;
  const json& j = cfg.at("optimizer");
  if (j.contains("max_iter")) oc.max_iter = j.at("max_iter").get<int>();
  if (j.contains("grad_tol")) oc.grad_tol = j.at("grad_tol").get<double>();
  if (j.contains("gradient")) {
    const std::string g = j.at("gradient").get<std::string>();
    if (g == "sensitivity")
      oc.gradient = GradientMode::kSensitivity;
    else if (g == "fisher")
      oc.gradient = GradientMode::kFisher;
    else if (g == "fd")
      oc.gradient = GradientMode::kFiniteDifference;
    else
      throw std::invalid_argument("unknown gradient mode: " + g);
  }
  if (j.contains("log_params")) {
    oc.transforms.assign(static_cast<size_t>(param_dim), ParamTransform::kIdentity);
    for (const auto& idx : j.at("log_params"))
      oc.transforms.at(idx.get<size_t>()) = ParamTransform::kLog;
  }
  return oc;
}

inline EMFreeSet free_set_from_json(const json& cfg) {
  EMFreeSet fs_out;
  if (!cfg.contains("em")) return fs_out;
  const json& j = cfg.at("em");
  if (j.contains("free")) {
    for (const auto& name : j.at("free")) {
      const std::string s = name.get<std::string>();
      if (s == "A") fs_out.A = true;
      else if (s == "H") fs_out.H = true;
      else if (s == "Q") fs_out.Q = true;
      else if (s == "R") fs_out.R = true;
      else if (s == "m0") fs_out.m0 = true;
      else if (s == "P0") fs_out.P0 = true;
      else throw std::invalid_argument("unknown EM free block: " + s);
    }
  }
  if (j.contains("q_diag")) {
    std::vector<int> idx;
    for (const auto& i : j.at("q_diag")) idx.push_back(i.get<int>());
    fs_out.q_diag = std::move(idx);
    fs_out.Q = true;
  }
  if (j.contains("r_diag")) {
    std::vector<int> idx;
    for (const auto& i : j.at("r_diag")) idx.push_back(i.get<int>());
    fs_out.r_diag = std::move(idx);
    fs_out.R = true;
  }
  return fs_out;
}

// ---------------------------------------------------------------------------
// Dataset access
// ---------------------------------------------------------------------------

inline std::string trajectory_file_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "traj_%04d.csv", index);
  return buf;
}

inline std::vector<fs::path> dataset_files(const fs::path& dir) {
  std::vector<fs::path> files;
  if (!fs::exists(dir)) throw std::runtime_error("dataset directory not found: " + dir.string());
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("traj_", 0) == 0 && name.size() >= 4 &&
        name.compare(name.size() - 4, 4, ".csv") == 0)
      files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("no trajectory CSVs in " + dir.string());
  return files;
}

inline fs::path dataset_dir_from_json(const json& cfg, const fs::path& out_dir) {
  if (cfg.contains("dataset")) return fs::path(cfg.at("dataset").get<std::string>());
  return out_dir;  // convention: simulate and the consumer share one directory
}

/// Runs fn(0..count-1) on up to `threads` workers.  Results must be written
/// to index-addressed slots by the caller so the output order is independent
/// of scheduling.
template <class Fn>
inline void parallel_for(int count, int threads, Fn&& fn) {
  threads = std::max(1, std::min(threads, count));
  if (threads <= 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<int> next(0);
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(threads));
  for (int w = 0; w < threads; ++w)
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1)) fn(i);
    });
  for (auto& t : pool) t.join();
}

inline int threads_from_json(const json& cfg) {
  return cfg.contains("threads") ? cfg.at("threads").get<int>() : 1;
}

inline void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << text;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// simulate: draw `trajectories` independent realizations of length T and
/// write one CSV per trajectory plus a dataset.json describing the draw.
inline int cmd_simulate(const json& cfg, const fs::path& out_dir) {
  const StateSpaceModel model = model_from_json(cfg.at("model"));
  const Vec theta = theta_from_json(cfg, model);
  const int t_len = cfg.at("T").get<int>();
  const int count = cfg.contains("trajectories") ? cfg.at("trajectories").get<int>() : 1;
  const auto seed = cfg.contains("seed") ? cfg.at("seed").get<std::uint64_t>() : 1;

  for (int i = 0; i < count; ++i) {
    const SimOutput sim = simulate(model, theta, t_len, seed, static_cast<std::uint64_t>(i));
    write_simulation_csv(out_dir / trajectory_file_name(i), sim);
  }

  json meta;
  meta["model"] = cfg.at("model");
  meta["theta"] = json::array();
  for (int i = 0; i < theta.size(); ++i) meta["theta"].push_back(theta(i));
  meta["T"] = t_len;
  meta["trajectories"] = count;
  meta["seed"] = seed;
  write_text(out_dir / "dataset.json", meta.dump(2) + "\n");
  return 0;
}

namespace detail_cli {

struct NamedFilter {
  FilterResult filter;
  SmootherResult smoother;  // only filled when smoothing was requested
  bool ok = false;
  std::string error;
};

/// Filter (and optionally smooth) one trajectory under a rule identifier
/// that may be a sigma-point scheme or "ekf".
inline NamedFilter run_filter(const StateSpaceModel& model, const Vec& theta, const Mat& y,
                              const std::string& rule_id, bool smooth) {
  NamedFilter out;
  try {
    if (rule_id == "ekf") {
      out.filter = ekf_filter_pass(model, theta, y);
      if (smooth) out.smoother = ekf_rts_pass(out.filter, model, theta);
    } else {
      const auto rule = build_rule(rule_id, static_cast<int>(model.state_dim));
      out.filter = filter_pass(model, theta, y, *rule);
      if (smooth) out.smoother = rts_pass(out.filter, model, theta, *rule);
    }
    out.ok = true;
  } catch (const std::exception& e) {
    out.error = e.what();
  }
  return out;
}

inline void append_vec(std::vector<std::string>& row, const Vec& v) {
  for (int i = 0; i < v.size(); ++i) row.push_back(format_double(v(i)));
}

}  // namespace detail_cli

/// filter / smooth: write per-step posterior (or smoothed) means and
/// covariance diagonals for every dataset trajectory and requested rule.
inline int cmd_filter_or_smooth(const json& cfg, const fs::path& out_dir, bool smooth) {
  const StateSpaceModel model = model_from_json(cfg.at("model"));
  const Vec theta = theta_from_json(cfg, model);
  const auto files = dataset_files(dataset_dir_from_json(cfg, out_dir));
  const auto rules = rules_from_json(cfg);
  const char* prefix = smooth ? "smooth" : "filter";

  for (const auto& rule_id : rules) {
    for (size_t t = 0; t < files.size(); ++t) {
      const SimOutput sim = read_simulation_csv(files[t]);
      const auto run = detail_cli::run_filter(model, theta, sim.measurements, rule_id, smooth);
      if (!run.ok) throw std::runtime_error(rule_id + " on " + files[t].string() + ": " + run.error);

      CsvTable table;
      table.header.emplace_back("step");
      for (int i = 1; i <= static_cast<int>(model.state_dim); ++i)
        table.header.push_back("m" + std::to_string(i));
      for (int i = 1; i <= static_cast<int>(model.state_dim); ++i)
        table.header.push_back("P" + std::to_string(i) + std::to_string(i));
      if (!smooth) table.header.emplace_back("loglik");

      const int t_len = static_cast<int>(sim.measurements.cols());
      for (int k = 0; k <= t_len; ++k) {
        std::vector<std::string> row;
        row.push_back(std::to_string(k));
        const GaussState& state =
            smooth ? run.smoother.steps[static_cast<size_t>(k)].smoothed
                   : (k == 0 ? run.filter.initial : run.filter.steps[static_cast<size_t>(k - 1)].posterior);
        detail_cli::append_vec(row, state.mean);
        detail_cli::append_vec(row, state.cov.diagonal());
        if (!smooth) row.push_back(k == 0 ? "" : format_double(run.filter.steps[static_cast<size_t>(k - 1)].loglik));
        table.rows.push_back(std::move(row));
      }
      char name[128];
      std::snprintf(name, sizeof(name), "%s_%s_t%04zu.csv", prefix,
                    sanitize_rule_name(rule_id).c_str(), t);
      write_csv(out_dir / name, table);
    }
  }
  return 0;
}

inline int cmd_filter(const json& cfg, const fs::path& out_dir) {
  return cmd_filter_or_smooth(cfg, out_dir, false);
}
inline int cmd_smooth(const json& cfg, const fs::path& out_dir) {
  return cmd_filter_or_smooth(cfg, out_dir, true);
}

/// likelihood-grid: scan one parameter over an inclusive linspace and tabulate
/// the log-likelihood under each rule (and optionally a particle-filter
/// estimate).  Cells where the filter breaks down numerically record -inf.
inline int cmd_likelihood_grid(const json& cfg, const fs::path& out_dir) {
  const StateSpaceModel model = model_from_json(cfg.at("model"));
  const Vec theta_base = theta_from_json(cfg, model);
  const auto files = dataset_files(dataset_dir_from_json(cfg, out_dir));
  const int traj = cfg.contains("trajectory") ? cfg.at("trajectory").get<int>() : 0;
  const SimOutput sim = read_simulation_csv(files.at(static_cast<size_t>(traj)));
  const auto rules = rules_from_json(cfg);

  const json& grid = cfg.at("grid");
  const int param = grid.at("param").get<int>();
  const double lo = grid.at("min").get<double>();
  const double hi = grid.at("max").get<double>();
  const int count = grid.at("count").get<int>();
  if (param < 0 || param >= theta_base.size()) throw std::invalid_argument("grid.param out of range");
  if (count < 1) throw std::invalid_argument("grid.count must be positive");

  const bool with_pf = cfg.contains("pf");
  int pf_particles = 1000;
  std::uint64_t pf_seed = 0;
  PfProposal pf_proposal = PfProposal::kBootstrap;
  if (with_pf) {
    const json& pf = cfg.at("pf");
    if (pf.contains("particles")) pf_particles = pf.at("particles").get<int>();
    if (pf.contains("seed")) pf_seed = pf.at("seed").get<std::uint64_t>();
    if (pf.contains("proposal"))
      pf_proposal = pf.at("proposal").get<std::string>() == "optimal" ? PfProposal::kOptimalLinear
                                                                      : PfProposal::kBootstrap;
  }

  CsvTable table;
  table.header.emplace_back("value");
  for (const auto& r : rules) table.header.push_back(r);
  if (with_pf) table.header.emplace_back("pf");

  std::vector<std::vector<std::string>> rows(static_cast<size_t>(count));
  const int threads = threads_from_json(cfg);
  parallel_for(count, threads, [&](int i) {
    Vec theta = theta_base;
    theta(param) = count == 1 ? lo : lo + (hi - lo) * i / (count - 1);
    std::vector<std::string> row;
    row.push_back(format_double(theta(param)));
    for (const auto& rule_id : rules) {
      double value = -std::numeric_limits<double>::infinity();
      try {
        if (rule_id == "ekf") {
          value = ekf_filter_pass(model, theta, sim.measurements).loglik;
        } else {
          const auto rule = build_rule(rule_id, static_cast<int>(model.state_dim));
          value = log_likelihood(model, theta, sim.measurements, *rule);
        }
      } catch (const NumericalBreakdown&) {
      }
      row.push_back(format_double(value));
    }
    if (with_pf) {
      double value = -std::numeric_limits<double>::infinity();
      try {
        value = pf_loglik(model, theta, sim.measurements, pf_particles, pf_seed, pf_proposal).loglik;
      } catch (const NumericalBreakdown&) {
      }
      row.push_back(format_double(value));
    }
    rows[static_cast<size_t>(i)] = std::move(row);
  });
  table.rows = std::move(rows);
  write_csv(out_dir / "likelihood_grid.csv", table);
  return 0;
}

namespace detail_cli {

/// Sweep values for the initial-uncertainty study; sigma = 0 means the base
/// model (no sweep).
inline std::vector<double> sigmas_from_json(const json& cfg) {
  std::vector<double> sigmas;
  if (cfg.contains("sigma_sweep"))
    for (const auto& s : cfg.at("sigma_sweep")) sigmas.push_back(s.get<double>());
  else if (cfg.contains("sigma"))
    sigmas.push_back(cfg.at("sigma").get<double>());
  else
    sigmas.push_back(0.0);
  return sigmas;
}

inline StateSpaceModel model_at_sigma(const StateSpaceModel& base, double sigma, const Vec& x0_true) {
  if (sigma == 0.0) return base;
  return initial_uncertainty_sweep(base, sigma, x0_true);
}

struct MleCell {
  Vec theta;
  double loglik = 0.0;
  std::string status;
  int iterations = 0;
  long long evals = 0;
  std::vector<OptimizerTraceRow> trace;
  bool ok = false;
  std::string error;
};

inline MleCell run_mle(const StateSpaceModel& model, const Vec& theta0, const Mat& y,
                       const std::string& rule_id, const OptimizerConfig& oc) {
  MleCell cell;
  try {
    OptimizerResult res;
    if (rule_id == "ekf") {
      res = ekf_maximize_likelihood(model, theta0, y, oc);
    } else {
      const auto rule = build_rule(rule_id, static_cast<int>(model.state_dim));
      res = maximize_likelihood(model, theta0, y, *rule, oc);
    }
    cell.theta = res.theta;
    cell.loglik = res.loglik;
    cell.status = res.status;
    cell.iterations = res.iterations;
    cell.evals = res.evals;
    cell.trace = std::move(res.trace);
    cell.ok = cell.theta.allFinite();
    if (!cell.ok) cell.error = "non-finite estimate";
  } catch (const std::exception& e) {
    cell.error = e.what();
    cell.status = "exception";
  }
  return cell;
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  if (n == 0) return std::numeric_limits<double>::quiet_NaN();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail_cli

/// mle: per-trajectory maximum-likelihood estimates for every rule and sweep
/// value, a per-iteration trace, and a summary of median absolute deviation
/// from a reference rule.  Wall-clock times go to a separate .log file so the
/// CSVs are byte-identical across reruns.
inline int cmd_mle(const json& cfg, const fs::path& out_dir) {
  const StateSpaceModel base = model_from_json(cfg.at("model"));
  const auto files = dataset_files(dataset_dir_from_json(cfg, out_dir));
  const auto rules = rules_from_json(cfg);
  const auto sigmas = detail_cli::sigmas_from_json(cfg);
  const OptimizerConfig oc = optimizer_from_json(cfg, static_cast<int>(base.param_dim));
  const Vec theta0 = cfg.contains("theta0") ? vec_from_json(cfg.at("theta0")) : base.default_theta;
  const std::string reference =
      cfg.contains("reference_rule") ? cfg.at("reference_rule").get<std::string>() : "";

  std::vector<SimOutput> sims;
  sims.reserve(files.size());
  for (const auto& f : files) sims.push_back(read_simulation_csv(f));

  struct Task {
    int sigma_idx, traj, rule_idx;
  };
  std::vector<Task> tasks;
  for (int s = 0; s < static_cast<int>(sigmas.size()); ++s)
    for (int t = 0; t < static_cast<int>(sims.size()); ++t)
      for (int r = 0; r < static_cast<int>(rules.size()); ++r) tasks.push_back({s, t, r});

  std::vector<detail_cli::MleCell> cells(tasks.size());
  std::vector<double> wall(tasks.size(), 0.0);
  parallel_for(static_cast<int>(tasks.size()), threads_from_json(cfg), [&](int i) {
    const Task& task = tasks[static_cast<size_t>(i)];
    const StateSpaceModel model = detail_cli::model_at_sigma(
        base, sigmas[static_cast<size_t>(task.sigma_idx)], sims[static_cast<size_t>(task.traj)].states.col(0));
    const auto t0 = std::chrono::steady_clock::now();
    cells[static_cast<size_t>(i)] = detail_cli::run_mle(
        model, theta0, sims[static_cast<size_t>(task.traj)].measurements,
        rules[static_cast<size_t>(task.rule_idx)], oc);
    wall[static_cast<size_t>(i)] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  });

  const int p = static_cast<int>(base.param_dim);
  CsvTable estimates;
  estimates.header = {"sigma", "trajectory", "rule"};
  for (int i = 1; i <= p; ++i) estimates.header.push_back("theta" + std::to_string(i));
  estimates.header.insert(estimates.header.end(), {"loglik", "status", "iterations", "evals"});

  CsvTable trace;
  trace.header = {"sigma", "trajectory", "rule", "iteration"};
  for (int i = 1; i <= p; ++i) trace.header.push_back("theta" + std::to_string(i));
  trace.header.insert(trace.header.end(), {"objective", "grad_norm", "cum_evals"});

  std::string timing = "sigma,trajectory,rule,wall_seconds\n";
  for (size_t i = 0; i < tasks.size(); ++i) {
    const Task& task = tasks[i];
    const detail_cli::MleCell& cell = cells[i];
    const std::string sigma_s = format_double(sigmas[static_cast<size_t>(task.sigma_idx)]);
    const std::string& rule_s = rules[static_cast<size_t>(task.rule_idx)];

    std::vector<std::string> row = {sigma_s, std::to_string(task.traj), rule_s};
    for (int j = 0; j < p; ++j)
      row.push_back(cell.ok ? format_double(cell.theta(j)) : "nan");
    row.push_back(cell.ok ? format_double(cell.loglik) : "nan");
    row.push_back(cell.status);
    row.push_back(std::to_string(cell.iterations));
    row.push_back(std::to_string(cell.evals));
    estimates.rows.push_back(std::move(row));

    for (const auto& tr : cell.trace) {
      std::vector<std::string> trow = {sigma_s, std::to_string(task.traj), rule_s,
                                       std::to_string(tr.iteration)};
      for (int j = 0; j < p; ++j) trow.push_back(format_double(tr.theta(j)));
      trow.push_back(format_double(tr.objective));
      trow.push_back(format_double(tr.grad_norm));
      trow.push_back(std::to_string(tr.cum_evals));
      trace.rows.push_back(std::move(trow));
    }
    timing += sigma_s + "," + std::to_string(task.traj) + "," + rule_s + "," +
              format_double(wall[i]) + "\n";
  }
  write_csv(out_dir / "mle_estimates.csv", estimates);
  write_csv(out_dir / "mle_trace.csv", trace);
  write_text(out_dir / "mle_timing.log", timing);

  if (!reference.empty()) {
    const auto cell_at = [&](int s, int t, const std::string& rule) -> const detail_cli::MleCell* {
      for (size_t i = 0; i < tasks.size(); ++i)
        if (tasks[i].sigma_idx == s && tasks[i].traj == t &&
            rules[static_cast<size_t>(tasks[i].rule_idx)] == rule)
          return &cells[i];
      return nullptr;
    };
    CsvTable summary;
    summary.header = {"sigma", "rule", "median_abs_dev", "used", "failures"};
    for (int s = 0; s < static_cast<int>(sigmas.size()); ++s) {
      for (const auto& rule_id : rules) {
        if (rule_id == reference) continue;
        std::vector<double> devs;
        int failures = 0;
        for (int t = 0; t < static_cast<int>(sims.size()); ++t) {
          const auto* a = cell_at(s, t, rule_id);
          const auto* b = cell_at(s, t, reference);
          if (a == nullptr || b == nullptr || !a->ok || !b->ok) {
            ++failures;
            continue;
          }
          devs.push_back((a->theta - b->theta).cwiseAbs().maxCoeff());
        }
        summary.rows.push_back({format_double(sigmas[static_cast<size_t>(s)]), rule_id,
                                format_double(detail_cli::median(devs)),
                                std::to_string(devs.size()), std::to_string(failures)});
      }
    }
    write_csv(out_dir / "mle_summary.csv", summary);
  }
  return 0;
}

/// em: per-iteration EM traces for every rule, and (by default) the direct
/// maximum-likelihood estimate alongside for comparison.
inline int cmd_em(const json& cfg, const fs::path& out_dir) {
  const StateSpaceModel base = model_from_json(cfg.at("model"));
  const auto files = dataset_files(dataset_dir_from_json(cfg, out_dir));
  const auto rules = rules_from_json(cfg);
  const EMFreeSet free_set = free_set_from_json(cfg);
  const json em_cfg = cfg.contains("em") ? cfg.at("em") : json::object();
  const int iterations = em_cfg.contains("iterations") ? em_cfg.at("iterations").get<int>() : 10;
  const bool direct_compare =
      em_cfg.contains("direct_compare") ? em_cfg.at("direct_compare").get<bool>() : true;
  const Vec theta0 = cfg.contains("theta0") ? vec_from_json(cfg.at("theta0")) : base.default_theta;
  const double sigma = detail_cli::sigmas_from_json(cfg).front();
  const OptimizerConfig oc = optimizer_from_json(cfg, static_cast<int>(base.param_dim));

  std::vector<int> traj_list;
  if (cfg.contains("trajectory"))
    traj_list.push_back(cfg.at("trajectory").get<int>());
  else
    for (int t = 0; t < static_cast<int>(files.size()); ++t) traj_list.push_back(t);

  const int p = static_cast<int>(base.param_dim);
  CsvTable trace;
  trace.header = {"trajectory", "rule", "iteration"};
  for (int i = 1; i <= p; ++i) trace.header.push_back("theta" + std::to_string(i));
  trace.header.emplace_back("q_value");
  trace.header.emplace_back("cum_evals");

  CsvTable final_table;
  final_table.header = {"trajectory", "rule"};
  for (int i = 1; i <= p; ++i) final_table.header.push_back("theta" + std::to_string(i) + "_em");
  if (direct_compare)
    for (int i = 1; i <= p; ++i)
      final_table.header.push_back("theta" + std::to_string(i) + "_direct");

  std::string timing = "trajectory,rule,wall_seconds\n";
  for (int t : traj_list) {
    const SimOutput sim = read_simulation_csv(files.at(static_cast<size_t>(t)));
    const StateSpaceModel model = detail_cli::model_at_sigma(base, sigma, sim.states.col(0));
    for (const auto& rule_id : rules) {
      const auto rule = build_rule(rule_id, static_cast<int>(model.state_dim));
      const auto t0 = std::chrono::steady_clock::now();
      const EMTrace em = em_iterate(model, theta0, sim.measurements, *rule, iterations, free_set);
      const double wall =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

      // em.evals is cumulative over the whole run; attribute evenly per
      // iteration for the trace (each iteration costs the same).
      for (int it = 0; it < static_cast<int>(em.thetas.size()); ++it) {
        std::vector<std::string> row = {std::to_string(t), rule_id, std::to_string(it)};
        for (int j = 0; j < p; ++j) row.push_back(format_double(em.thetas[static_cast<size_t>(it)](j)));
        row.push_back(it == 0 ? "" : format_double(em.q_values[static_cast<size_t>(it - 1)]));
        row.push_back(std::to_string(iterations > 0 ? em.evals * it / iterations : 0));
        trace.rows.push_back(std::move(row));
      }

      std::vector<std::string> frow = {std::to_string(t), rule_id};
      for (int j = 0; j < p; ++j) frow.push_back(format_double(em.thetas.back()(j)));
      if (direct_compare) {
        const auto direct = detail_cli::run_mle(model, theta0, sim.measurements, rule_id, oc);
        for (int j = 0; j < p; ++j)
          frow.push_back(direct.ok ? format_double(direct.theta(j)) : "nan");
      }
      final_table.rows.push_back(std::move(frow));
      timing += std::to_string(t) + "," + rule_id + "," + format_double(wall) + "\n";
    }
  }
  write_csv(out_dir / "em_trace.csv", trace);
  write_csv(out_dir / "em_final.csv", final_table);
  write_text(out_dir / "em_timing.log", timing);
  return 0;
}

/// track-rmse: smooth each trajectory at its estimated parameter (from a
/// previous mle run) and report the mean location RMSE per sweep value and
/// rule.  Location components: first two states for the turn model, the
/// full state otherwise.
inline int cmd_track_rmse(const json& cfg, const fs::path& out_dir) {
  const StateSpaceModel base = model_from_json(cfg.at("model"));
  const auto files = dataset_files(dataset_dir_from_json(cfg, out_dir));
  const fs::path estimates_path = cfg.contains("estimates")
                                      ? fs::path(cfg.at("estimates").get<std::string>())
                                      : out_dir / "mle_estimates.csv";
  const CsvTable estimates = read_csv(estimates_path);
  const int p = static_cast<int>(base.param_dim);

  const bool is_ct = cfg.at("model").at("name").get<std::string>() == "ct";
  const int loc_dims = is_ct ? 2 : static_cast<int>(base.state_dim);

  std::vector<SimOutput> sims;
  sims.reserve(files.size());
  for (const auto& f : files) sims.push_back(read_simulation_csv(f));

  // Group estimate rows by (sigma, rule) preserving first-seen order.
  struct Group {
    std::string sigma, rule;
    std::vector<std::pair<int, Vec>> entries;  // (trajectory, theta)
  };
  std::vector<Group> groups;
  for (const auto& row : estimates.rows) {
    if (row.size() < static_cast<size_t>(3 + p)) continue;
    const std::string& sigma = row[0];
    const std::string& rule = row[2];
    Vec theta(p);
    bool ok = true;
    for (int j = 0; j < p; ++j) {
      if (row[static_cast<size_t>(3 + j)] == "nan") { ok = false; break; }
      theta(j) = parse_double(row[static_cast<size_t>(3 + j)]);
    }
    if (!ok) continue;
    auto it = std::find_if(groups.begin(), groups.end(),
                           [&](const Group& g) { return g.sigma == sigma && g.rule == rule; });
    if (it == groups.end()) {
      groups.push_back({sigma, rule, {}});
      it = std::prev(groups.end());
    }
    it->entries.emplace_back(std::stoi(row[1]), theta);
  }

  CsvTable rmse;
  rmse.header = {"sigma", "rule", "mean_rmse", "trajectories"};
  for (const auto& group : groups) {
    double total = 0.0;
    int used = 0;
    for (const auto& [traj, theta] : group.entries) {
      if (traj < 0 || traj >= static_cast<int>(sims.size())) continue;
      const SimOutput& sim = sims[static_cast<size_t>(traj)];
      const StateSpaceModel model =
          detail_cli::model_at_sigma(base, parse_double(group.sigma), sim.states.col(0));
      const auto run = detail_cli::run_filter(model, theta, sim.measurements, group.rule, true);
      if (!run.ok) continue;
      double sq_sum = 0.0;
      const int t_len = static_cast<int>(sim.measurements.cols());
      for (int k = 1; k <= t_len; ++k) {
        const Vec err = run.smoother.steps[static_cast<size_t>(k)].smoothed.mean.head(loc_dims) -
                        sim.states.col(k).head(loc_dims);
        sq_sum += err.squaredNorm();
      }
      total += std::sqrt(sq_sum / t_len);
      ++used;
    }
    rmse.rows.push_back({group.sigma, group.rule,
                         format_double(used > 0 ? total / used : std::numeric_limits<double>::quiet_NaN()),
                         std::to_string(used)});
  }
  write_csv(out_dir / "rmse.csv", rmse);
  return 0;
}

/// Dispatch by subcommand name; returns a process exit code.
inline int run_command(const std::string& command, const json& cfg, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  if (command == "simulate") return cmd_simulate(cfg, out_dir);
  if (command == "filter") return cmd_filter(cfg, out_dir);
  if (command == "smooth") return cmd_smooth(cfg, out_dir);
  if (command == "likelihood-grid") return cmd_likelihood_grid(cfg, out_dir);
  if (command == "mle") return cmd_mle(cfg, out_dir);
  if (command == "em") return cmd_em(cfg, out_dir);
  if (command == "track-rmse") return cmd_track_rmse(cfg, out_dir);
  throw std::invalid_argument("unknown command: " + command);
}

}  // namespace ssmkit::cli
