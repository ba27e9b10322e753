// qlmm command-line front end. Links the C interface only.

#include "qlmm/qlmm.h"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace {

using Json = nlohmann::ordered_json;

// Bad configuration values: reported like command-line usage errors (exit 2).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Library failures (exit 1).
struct RuntimeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void check(qlmm_status s, const char* what) {
  if (s != QLMM_OK)
    throw RuntimeError(std::string(what) + ": " + qlmm_status_name(s) + ": " +
                       qlmm_last_error());
}

template <class T, void (*Free)(T*)>
struct Handle {
  T* p = nullptr;
  Handle() = default;
  Handle(const Handle&) = delete;
  Handle& operator=(const Handle&) = delete;
  Handle(Handle&& o) noexcept : p(o.p) { o.p = nullptr; }
  ~Handle() { Free(p); }
  T** out() { return &p; }
};

using Dataset = Handle<qlmm_dataset, qlmm_dataset_free>;
using Fit = Handle<qlmm_fit, qlmm_fit_free>;
using Inference = Handle<qlmm_inference, qlmm_inference_free>;
using VarComp = Handle<qlmm_varcomp, qlmm_varcomp_free>;
using Report = Handle<qlmm_report, qlmm_report_free>;
using Sweep = Handle<qlmm_sweep, qlmm_sweep_free>;

Json read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config '" + path + "'");
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw UsageError("config '" + path + "': " + e.what());
  }
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream s(text);
  std::string item;
  while (std::getline(s, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

// ---- typed config access

void allow_keys(const Json& obj, const std::set<std::string>& keys, const std::string& where) {
  if (!obj.is_object()) throw UsageError(where + " must be an object");
  for (const auto& [k, v] : obj.items())
    if (!keys.count(k)) throw UsageError("unknown key '" + k + "' in " + where);
}

double get_number(const Json& c, const std::string& key, double fallback) {
  if (!c.contains(key) || c[key].is_null()) return fallback;
  if (!c[key].is_number()) throw UsageError("'" + key + "' must be a number");
  return c[key].get<double>();
}

long long get_integer(const Json& c, const std::string& key, long long fallback) {
  if (!c.contains(key) || c[key].is_null()) return fallback;
  if (!c[key].is_number_integer()) throw UsageError("'" + key + "' must be an integer");
  return c[key].get<long long>();
}

size_t get_count(const Json& c, const std::string& key, size_t fallback) {
  const auto v = get_integer(c, key, static_cast<long long>(fallback));
  if (v < 0) throw UsageError("'" + key + "' must be >= 0");
  return static_cast<size_t>(v);
}

bool get_bool(const Json& c, const std::string& key, bool fallback) {
  if (!c.contains(key) || c[key].is_null()) return fallback;
  if (!c[key].is_boolean()) throw UsageError("'" + key + "' must be true or false");
  return c[key].get<bool>();
}

std::string get_string(const Json& c, const std::string& key, const std::string& fallback) {
  if (!c.contains(key) || c[key].is_null()) return fallback;
  if (!c[key].is_string()) throw UsageError("'" + key + "' must be a string");
  return c[key].get<std::string>();
}

std::vector<double> get_numbers(const Json& v, const std::string& key) {
  std::vector<double> out;
  if (v.is_number()) return {v.get<double>()};
  if (!v.is_array()) throw UsageError("'" + key + "' must be a number or an array of numbers");
  for (const auto& e : v) {
    if (!e.is_number()) throw UsageError("'" + key + "' must hold numbers");
    out.push_back(e.get<double>());
  }
  return out;
}

// One-based coordinate list to zero-based.
std::vector<size_t> get_coordinates(const Json& c, const std::string& key) {
  std::vector<size_t> out;
  if (!c.contains(key) || c[key].is_null()) return out;
  if (!c[key].is_array()) throw UsageError("'" + key + "' must be an array of coordinates");
  for (const auto& e : c[key]) {
    if (!e.is_number_integer() || e.get<long long>() < 1)
      throw UsageError("'" + key + "' holds one-based coordinates (integers >= 1)");
    out.push_back(static_cast<size_t>(e.get<long long>() - 1));
  }
  return out;
}

qlmm_lambda_scale lambda_scale_of(const std::string& name) {
  if (name == "effective") return QLMM_LAMBDA_EFFECTIVE;
  if (name == "observations") return QLMM_LAMBDA_OBSERVATIONS;
  throw UsageError("lambda_scale must be 'effective' or 'observations'");
}

qlmm_debias_mode mode_of(const std::string& name) {
  if (name == "whitened") return QLMM_MODE_WHITENED;
  if (name == "a0-robust") return QLMM_MODE_A0_ROBUST;
  throw UsageError("mode must be 'whitened' or 'a0-robust'");
}

qlmm_psi_kind psi_of(const std::string& name) {
  if (name == "pd") return QLMM_PSI_PD;
  if (name == "singular") return QLMM_PSI_SINGULAR;
  if (name == "diagonal") return QLMM_PSI_DIAGONAL;
  throw UsageError("psi must be 'pd', 'singular' or 'diagonal'");
}

std::string format_of(const Json& c) {
  const auto f = get_string(c, "format", "csv");
  if (f != "csv" && f != "json") throw UsageError("format must be 'csv' or 'json'");
  return f;
}

// Settings shared by the estimation commands.
struct Common {
  std::vector<double> a{1.0};
  double alpha = 0.05;
  uint64_t seed = 1;
  int threads = 1;
  int folds = 5;
  std::string format = "csv";
  std::string output = "-";
  qlmm_lasso_options lasso{};
  std::vector<double> weights;
  std::vector<size_t> unpenalized;
};

Common common_of(const Json& c) {
  Common k;
  if (c.contains("a") && !c["a"].is_null()) k.a = get_numbers(c["a"], "a");
  if (k.a.empty()) throw UsageError("'a' grid is empty");
  for (double a : k.a)
    if (!(a >= 0.0)) throw UsageError("'a' values must be >= 0");
  k.alpha = get_number(c, "alpha", 0.05);
  if (!(k.alpha > 0.0 && k.alpha < 1.0)) throw UsageError("alpha must lie in (0, 1)");
  const auto seed = get_integer(c, "seed", 1);
  if (seed < 0) throw UsageError("seed must be >= 0");
  k.seed = static_cast<uint64_t>(seed);
  k.threads = static_cast<int>(get_integer(c, "threads", 1));
  if (k.threads < 0) throw UsageError("threads must be >= 0 (0 = all cores)");
  k.folds = static_cast<int>(get_integer(c, "folds", 5));
  if (k.folds < 2) throw UsageError("folds must be >= 2");
  k.format = format_of(c);
  k.output = get_string(c, "output", "-");
  qlmm_lasso_options_init(&k.lasso);
  k.lasso.lambda = get_number(c, "lambda", 0.0);
  if (k.lasso.lambda < 0.0) throw UsageError("lambda must be > 0 (omit for automatic)");
  k.lasso.lambda_scale = lambda_scale_of(get_string(c, "lambda_scale", "effective"));
  k.lasso.standardize = get_bool(c, "standardize", true) ? 1 : 0;
  if (c.contains("weights") && c["weights"].is_array()) {
    k.weights = get_numbers(c["weights"], "weights");
    k.lasso.weights = k.weights.data();
    k.lasso.n_weights = k.weights.size();
  }
  return k;
}

const std::set<std::string> kCommonKeys{"data",   "a",      "alpha",        "seed",
                                        "threads", "folds",  "format",       "output",
                                        "lambda", "lambda_scale", "standardize", "weights",
                                        "ridge_grid"};

Dataset load_dataset(const Json& c) {
  if (!c.contains("data")) throw UsageError("no input data (use --data or a 'data' object)");
  const Json& d = c["data"];
  allow_keys(d, {"path", "cluster", "response", "fixed", "random", "fixed_matrix", "intercept"},
             "data");
  const auto path = get_string(d, "path", "");
  if (path.empty()) throw UsageError("data.path is required");
  auto names = [&](const char* key) {
    std::vector<std::string> out;
    if (!d.contains(key) || d[key].is_null()) return out;
    if (!d[key].is_array()) throw UsageError(std::string("data.") + key + " must be an array");
    for (const auto& e : d[key]) {
      if (!e.is_string()) throw UsageError(std::string("data.") + key + " must hold names");
      out.push_back(e.get<std::string>());
    }
    return out;
  };
  const auto fixed = names("fixed");
  const auto random = names("random");
  const auto matrix = get_string(d, "fixed_matrix", "");
  if (fixed.empty() && matrix.empty())
    throw UsageError("data.fixed must name at least one column (or give data.fixed_matrix)");
  std::vector<const char*> f, r;
  for (const auto& s : fixed) f.push_back(s.c_str());
  for (const auto& s : random) r.push_back(s.c_str());
  const auto cluster = get_string(d, "cluster", "cluster");
  const auto response = get_string(d, "response", "y");
  Dataset ds;
  check(qlmm_dataset_load_csv(path.c_str(), cluster.c_str(), response.c_str(), f.data(),
                              f.size(), r.data(), r.size(),
                              matrix.empty() ? nullptr : matrix.c_str(), ds.out()),
        "loading data");
  if (get_bool(d, "intercept", false)) {
    Dataset with;
    check(qlmm_dataset_add_intercept(ds.p, with.out()), "adding intercept");
    return with;
  }
  return ds;
}

void mark_intercept(const Json& c, Common& k) {
  if (!get_bool(c["data"], "intercept", false)) return;
  k.unpenalized = {0};
  k.lasso.unpenalized = k.unpenalized.data();
  k.lasso.n_unpenalized = 1;
}

// Ridge-based adaptive weights when "weights" is "ridge".
void apply_weights(const Json& c, const qlmm_dataset* ds, double a, Common& k) {
  if (!c.contains("weights") || !c["weights"].is_string()) return;
  if (c["weights"].get<std::string>() != "ridge")
    throw UsageError("weights must be an array or \"ridge\"");
  std::vector<double> grid{0.01, 0.1, 1.0, 10.0};
  if (c.contains("ridge_grid")) grid = get_numbers(c["ridge_grid"], "ridge_grid");
  qlmm_dims dims;
  check(qlmm_dataset_dims(ds, &dims), "reading dimensions");
  k.weights.assign(dims.p, 1.0);
  check(qlmm_ridge_weights(ds, a, grid.data(), grid.size(), k.folds, k.seed, k.weights.data(),
                           k.weights.size()),
        "ridge weights");
  k.lasso.weights = k.weights.data();
  k.lasso.n_weights = k.weights.size();
}

// Single a, or the cross-validated choice over a grid.
double choose_a(const qlmm_dataset* ds, const Common& k, Json& tuning) {
  if (k.a.size() == 1) return k.a.front();
  double a_star = 0.0;
  std::vector<double> criteria(k.a.size(), 0.0);
  check(qlmm_cross_validate_a(ds, k.a.data(), k.a.size(), k.folds, k.seed, &k.lasso, &a_star,
                              criteria.data()),
        "cross-validating a");
  tuning["a_grid"] = k.a;
  tuning["cv_criteria"] = criteria;
  tuning["a_star"] = a_star;
  return a_star;
}

Json provenance(const std::string& command, const Json& config, const Json& tuning) {
  Json p;
  p["tool"] = "qlmm";
  p["version"] = qlmm_version();
  p["command"] = command;
  p["config"] = config;
  if (!tuning.empty()) p["tuning"] = tuning;
  return p;
}

// ---- commands

int run_fit(const Json& c) {
  allow_keys(c, kCommonKeys, "config");
  Common k = common_of(c);
  Dataset ds = load_dataset(c);
  mark_intercept(c, k);
  Json tuning = Json::object();
  const double a = choose_a(ds.p, k, tuning);
  apply_weights(c, ds.p, a, k);
  Fit fit;
  check(qlmm_fit_lasso(ds.p, a, &k.lasso, fit.out()), "fitting");
  const auto prov = provenance("fit", c, tuning).dump();
  check(qlmm_fit_write(fit.p, k.output.c_str(), k.format.c_str(), prov.c_str()), "writing fit");
  return 0;
}

int run_infer(const Json& c) {
  auto keys = kCommonKeys;
  keys.insert({"targets", "mode", "lambda_j", "null_value", "fdr"});
  allow_keys(c, keys, "config");
  Common k = common_of(c);
  Dataset ds = load_dataset(c);
  mark_intercept(c, k);
  qlmm_dims dims;
  check(qlmm_dataset_dims(ds.p, &dims), "reading dimensions");
  auto targets = get_coordinates(c, "targets");
  if (targets.empty())
    for (size_t j = 0; j < dims.p; ++j) targets.push_back(j);
  for (size_t j : targets)
    if (j >= dims.p)
      throw UsageError("target " + std::to_string(j + 1) + " exceeds p = " +
                       std::to_string(dims.p));
  Json tuning = Json::object();
  const double a = choose_a(ds.p, k, tuning);
  apply_weights(c, ds.p, a, k);
  qlmm_infer_options o;
  qlmm_infer_options_init(&o);
  o.lasso = k.lasso;
  o.mode = mode_of(get_string(c, "mode", "whitened"));
  o.lambda_j = get_number(c, "lambda_j", 0.0);
  o.null_value = get_number(c, "null_value", 0.0);
  o.fdr_level = get_number(c, "fdr", 0.0);
  if (o.fdr_level < 0.0 || o.fdr_level >= 1.0) throw UsageError("fdr must lie in (0, 1)");
  Inference inf;
  check(qlmm_infer(ds.p, a, targets.data(), targets.size(), k.alpha, &o, inf.out()),
        "inference");
  for (size_t f = 0; f < qlmm_inference_failure_count(inf.p); ++f) {
    size_t j = 0;
    const char* msg = qlmm_inference_failure(inf.p, f, &j);
    std::cerr << "qlmm: coordinate " << j + 1 << ": " << msg << "\n";
  }
  const auto prov = provenance("infer", c, tuning).dump();
  check(qlmm_inference_write(inf.p, k.output.c_str(), k.format.c_str(), prov.c_str()),
        "writing inference");
  return 0;
}

int run_varcomp(const Json& c) {
  auto keys = kCommonKeys;
  keys.insert({"basis", "sample_split", "cross_fit", "project_psd"});
  allow_keys(c, keys, "config");
  Common k = common_of(c);
  Dataset ds = load_dataset(c);
  mark_intercept(c, k);
  qlmm_dims dims;
  check(qlmm_dataset_dims(ds.p, &dims), "reading dimensions");
  qlmm_varcomp_options o;
  qlmm_varcomp_options_init(&o);
  if (k.a.size() == 1) {
    o.a = k.a.front();
  } else {
    o.a_grid = k.a.data();
    o.n_a_grid = k.a.size();
  }
  o.lasso = k.lasso;
  o.folds = k.folds;
  o.seed = k.seed;
  std::string basis_name = "diagonal-halves";
  std::vector<double> matrices;
  if (c.contains("basis") && c["basis"].is_array()) {
    // Explicit basis: array of q x q matrices given as arrays of rows.
    for (const auto& g : c["basis"]) {
      if (!g.is_array() || g.size() != dims.q) throw UsageError("basis matrices must be q x q");
      for (const auto& row : g) {
        const auto r = get_numbers(row, "basis");
        if (r.size() != dims.q) throw UsageError("basis matrices must be q x q");
        matrices.insert(matrices.end(), r.begin(), r.end());
      }
      ++o.n_basis;
    }
    o.basis = nullptr;
    o.basis_matrices = matrices.data();
  } else {
    basis_name = get_string(c, "basis", basis_name);
    o.basis = basis_name.c_str();
  }
  o.sample_split = get_bool(c, "sample_split", true) ? 1 : 0;
  o.cross_fit = get_bool(c, "cross_fit", true) ? 1 : 0;
  o.project_psd = get_bool(c, "project_psd", false) ? 1 : 0;
  VarComp fit;
  check(qlmm_varcomp_fit(ds.p, &o, fit.out()), "variance components");
  const auto prov = provenance("varcomp", c, Json::object()).dump();
  check(qlmm_varcomp_write(fit.p, k.output.c_str(), k.format.c_str(), prov.c_str()),
        "writing variance components");
  return 0;
}

const std::set<std::string> kScenarioKeys{"total", "n",         "m",        "p",   "q",
                                          "rho",   "psi",       "psi_scale", "sigma2_e",
                                          "seed"};

qlmm_scenario scenario_of(const Json& base, const Json& cell) {
  Json merged = base;
  for (const auto& [key, v] : cell.items()) merged[key] = v;
  allow_keys(merged, kScenarioKeys, "scenario");
  qlmm_scenario s;
  qlmm_scenario_init(&s);
  s.total = get_count(merged, "total", s.total);
  s.n = get_count(merged, "n", s.n);
  s.m = get_count(merged, "m", s.m);
  s.p = get_count(merged, "p", s.p);
  s.q = get_count(merged, "q", s.q);
  s.rho = get_number(merged, "rho", s.rho);
  s.psi = psi_of(get_string(merged, "psi", "pd"));
  s.psi_scale = get_number(merged, "psi_scale", s.psi_scale);
  s.sigma2_e = get_number(merged, "sigma2_e", s.sigma2_e);
  const auto seed = get_integer(merged, "seed", static_cast<long long>(s.seed));
  if (seed < 0) throw UsageError("seed must be >= 0");
  s.seed = static_cast<uint64_t>(seed);
  if (s.m == 0) throw UsageError("m must be positive");
  if (s.n == 0 && s.total % s.m != 0)
    throw UsageError("total = " + std::to_string(s.total) + " is not divisible by m = " +
                     std::to_string(s.m));
  return s;
}

int run_simulate(const Json& c) {
  allow_keys(c,
             {"a", "alpha", "seed", "threads", "folds", "format", "output", "lambda",
              "lambda_scale", "nodewise_lambda_scale", "standardize", "mode", "reps",
              "scenario", "cells", "coverage", "rejection", "inference", "varcomp", "basis",
              "sample_split", "cross_fit", "project_psd", "sweep"},
             "config");
  Common k = common_of(c);
  const size_t reps = get_count(c, "reps", 300);
  if (reps == 0) throw UsageError("reps must be positive");

  qlmm_pipeline_options o;
  qlmm_pipeline_options_init(&o);
  std::vector<double> grid = k.a;
  if (c.contains("a") && c["a"].is_number()) {
    o.fixed_a = k.a.front();
  } else if (c.contains("a")) {
    o.a_grid = grid.data();
    o.n_a_grid = grid.size();
  }
  o.lasso = k.lasso;
  if (c.contains("nodewise_lambda_scale"))
    o.nodewise_lambda_scale = lambda_scale_of(get_string(c, "nodewise_lambda_scale", ""));
  o.folds = k.folds;
  o.mode = mode_of(get_string(c, "mode", "whitened"));
  o.alpha = k.alpha;
  const auto coverage = get_coordinates(c, "coverage");
  const auto rejection = get_coordinates(c, "rejection");
  if (c.contains("coverage")) {
    o.coverage = coverage.data();
    o.n_coverage = coverage.size();
  }
  if (c.contains("rejection")) {
    o.rejection = rejection.data();
    o.n_rejection = rejection.size();
  }
  o.inference = get_bool(c, "inference", true) ? 1 : 0;
  o.varcomp = get_bool(c, "varcomp", false) ? 1 : 0;
  const auto basis = get_string(c, "basis", "diagonal-halves");
  o.basis = basis.c_str();
  o.sample_split = get_bool(c, "sample_split", true) ? 1 : 0;
  o.cross_fit = get_bool(c, "cross_fit", true) ? 1 : 0;
  o.project_psd = get_bool(c, "project_psd", false) ? 1 : 0;
  o.threads = k.threads;

  Json base = c.contains("scenario") ? c["scenario"] : Json::object();
  if (c.contains("seed")) base["seed"] = c["seed"];
  std::vector<Json> cells;
  if (c.contains("cells")) {
    if (!c["cells"].is_array() || c["cells"].empty())
      throw UsageError("cells must be a non-empty array");
    for (const auto& cell : c["cells"]) cells.push_back(cell);
  } else {
    cells.push_back(Json::object());
  }
  std::vector<qlmm_scenario> scenarios;
  for (const auto& cell : cells) scenarios.push_back(scenario_of(base, cell));

  const auto prov = provenance("simulate", c, Json::object()).dump();
  if (c.contains("sweep")) {
    if (scenarios.size() != 1) throw UsageError("sweep runs a single scenario");
    const auto sweep_grid = get_numbers(c["sweep"], "sweep");
    Sweep sweep;
    check(qlmm_a_sweep(&scenarios.front(), sweep_grid.data(), sweep_grid.size(), reps, &o,
                       sweep.out()),
          "a sweep");
    check(qlmm_sweep_write(sweep.p, k.output.c_str(), k.format.c_str(), prov.c_str()),
          "writing sweep");
    return 0;
  }
  std::vector<Report> reports;
  for (const auto& s : scenarios) {
    Report r;
    check(qlmm_run_mc(&s, reps, &o, r.out()), "simulation");
    qlmm_report_summary sum;
    check(qlmm_report_summary_get(r.p, &sum), "report summary");
    std::cerr << "qlmm: q=" << s.q << " m=" << s.m << " reps=" << sum.reps
              << " failed=" << sum.failed << " (" << sum.wall_seconds << " s)\n";
    reports.push_back(std::move(r));
  }
  std::vector<const qlmm_report*> ptrs;
  for (const auto& r : reports) ptrs.push_back(r.p);
  check(qlmm_reports_write(ptrs.data(), ptrs.size(), k.output.c_str(), k.format.c_str(),
                           prov.c_str()),
        "writing report");
  return 0;
}

int run_generate(const Json& c) {
  allow_keys(c, {"seed", "output", "scenario"}, "config");
  Json base = c.contains("scenario") ? c["scenario"] : Json::object();
  if (c.contains("seed")) base["seed"] = c["seed"];
  const auto s = scenario_of(base, Json::object());
  const auto output = get_string(c, "output", "-");
  Dataset ds;
  check(qlmm_simulate_dataset(&s, ds.out()), "simulating data");
  check(qlmm_dataset_write_csv(ds.p, output.c_str()), "writing data");
  return 0;
}

// Command-line flags collected before they are merged into the config.
struct Flags {
  std::string config;
  std::optional<long long> seed;
  std::optional<std::string> a;
  std::optional<double> alpha;
  std::optional<int> threads;
  std::optional<int> folds;
  std::optional<std::string> mode;
  std::optional<std::string> format;
  std::optional<std::string> output;
  std::optional<double> lambda;
  std::optional<std::string> lambda_scale;
  std::optional<std::string> targets;
  std::optional<double> fdr;
  std::optional<std::string> data;
  std::optional<std::string> cluster;
  std::optional<std::string> response;
  std::optional<std::string> fixed;
  std::optional<std::string> random;
  std::optional<std::string> fixed_matrix;
  bool intercept = false;
  std::optional<std::string> basis;
  bool no_split = false;
  bool no_cross_fit = false;
  bool psd = false;
  std::optional<long long> reps;
  std::optional<std::string> sweep;
};

std::vector<double> parse_numbers(const std::string& text, const char* flag) {
  std::vector<double> out;
  for (const auto& item : split_list(text)) {
    try {
      size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError(std::string(flag) + ": '" + item + "' is not a number");
    }
  }
  if (out.empty()) throw UsageError(std::string(flag) + " is empty");
  return out;
}

Json merged_config(const Flags& f, const std::string& command) {
  Json c = f.config.empty() ? Json::object() : read_config(f.config);
  if (!c.is_object()) throw UsageError("config must be a JSON object");
  if (f.seed) c["seed"] = *f.seed;
  if (f.a) {
    const auto v = parse_numbers(*f.a, "--a");
    c["a"] = v.size() == 1 ? Json(v.front()) : Json(v);
  }
  if (f.alpha) c["alpha"] = *f.alpha;
  if (f.threads) c["threads"] = *f.threads;
  if (f.folds) c["folds"] = *f.folds;
  if (f.mode) c["mode"] = *f.mode;
  if (f.format) c["format"] = *f.format;
  if (f.output) c["output"] = *f.output;
  if (f.lambda) c["lambda"] = *f.lambda;
  if (f.lambda_scale) c["lambda_scale"] = *f.lambda_scale;
  if (f.targets) {
    Json t = Json::array();
    for (double v : parse_numbers(*f.targets, "--targets")) {
      if (v < 1 || v != static_cast<double>(static_cast<long long>(v)))
        throw UsageError("--targets holds one-based integer coordinates");
      t.push_back(static_cast<long long>(v));
    }
    c["targets"] = t;
  }
  if (f.fdr) c["fdr"] = *f.fdr;
  if (command != "simulate" && command != "generate") {
    Json d = c.contains("data") ? c["data"] : Json::object();
    if (f.data) d["path"] = *f.data;
    if (f.cluster) d["cluster"] = *f.cluster;
    if (f.response) d["response"] = *f.response;
    if (f.fixed) d["fixed"] = split_list(*f.fixed);
    if (f.random) d["random"] = split_list(*f.random);
    if (f.fixed_matrix) d["fixed_matrix"] = *f.fixed_matrix;
    if (f.intercept) d["intercept"] = true;
    if (!d.empty()) c["data"] = d;
  }
  if (f.basis) c["basis"] = *f.basis;
  if (f.no_split) c["sample_split"] = false;
  if (f.no_cross_fit) c["cross_fit"] = false;
  if (f.psd) c["project_psd"] = true;
  if (f.reps) c["reps"] = *f.reps;
  if (f.sweep) c["sweep"] = parse_numbers(*f.sweep, "--sweep");
  return c;
}

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("-c,--config", f.config, "JSON config; flags override its fields");
  cmd->add_option("--seed", f.seed, "Master seed");
  cmd->add_option("--a", f.a, "Proxy constant, or a comma-separated grid chosen by CV");
  cmd->add_option("--alpha", f.alpha, "Interval level is 1 - alpha");
  cmd->add_option("--threads", f.threads, "Worker threads (0 = all cores)");
  cmd->add_option("--folds", f.folds, "Cross-validation folds");
  cmd->add_option("--format", f.format, "Output format")
      ->check(CLI::IsMember({"csv", "json"}));
  cmd->add_option("-o,--output", f.output, "Output path ('-' = stdout)");
  cmd->add_option("--lambda", f.lambda, "Fixed Lasso penalty (default: scaled Lasso)");
  cmd->add_option("--lambda-scale", f.lambda_scale, "Sample size in the automatic penalty")
      ->check(CLI::IsMember({"effective", "observations"}));
}

void add_data(CLI::App* cmd, Flags& f) {
  cmd->add_option("--data", f.data, "Long-format CSV");
  cmd->add_option("--cluster", f.cluster, "Cluster id column");
  cmd->add_option("--response", f.response, "Response column");
  cmd->add_option("--fixed", f.fixed, "Comma-separated fixed-effect columns");
  cmd->add_option("--random", f.random, "Comma-separated random-effect columns");
  cmd->add_option("--fixed-matrix", f.fixed_matrix, "Wide CSV holding the fixed effects");
  cmd->add_flag("--intercept", f.intercept, "Prepend an unpenalized intercept column");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lasso fitting, inference and variance components for clustered data"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(qlmm_version()));
  Flags f;

  auto* fit = app.add_subcommand("fit", "Fit the fixed effects");
  add_common(fit, f);
  add_data(fit, f);

  auto* infer = app.add_subcommand("infer", "Debiased intervals and tests");
  add_common(infer, f);
  add_data(infer, f);
  infer->add_option("--targets", f.targets, "Comma-separated one-based coordinates");
  infer->add_option("--mode", f.mode, "Debiasing mode")
      ->check(CLI::IsMember({"whitened", "a0-robust"}));
  infer->add_option("--fdr", f.fdr, "Benjamini-Hochberg level for selection");

  auto* varcomp = app.add_subcommand("varcomp", "Variance components");
  add_common(varcomp, f);
  add_data(varcomp, f);
  varcomp->add_option("--basis", f.basis, "diagonal-halves, identity or free-diagonal");
  varcomp->add_flag("--no-split", f.no_split, "Use every cluster for both stages");
  varcomp->add_flag("--no-cross-fit", f.no_cross_fit, "Use one split direction only");
  varcomp->add_flag("--psd", f.psd, "Project the covariance estimate onto the PSD cone");

  auto* simulate = app.add_subcommand("simulate", "Monte-Carlo study");
  add_common(simulate, f);
  simulate->add_option("--mode", f.mode, "Debiasing mode")
      ->check(CLI::IsMember({"whitened", "a0-robust"}));
  simulate->add_option("--reps", f.reps, "Replications per cell");
  simulate->add_option("--sweep", f.sweep, "Comma-separated fixed-a grid for an a sweep");
  simulate->add_option("--basis", f.basis, "Variance-component basis");
  simulate->add_flag("--no-split", f.no_split, "Use every cluster for both stages");

  auto* generate = app.add_subcommand("generate", "Write one simulated dataset as long-format CSV");
  generate->add_option("-c,--config", f.config, "JSON config with a 'scenario' object");
  generate->add_option("--seed", f.seed, "Seed");
  generate->add_option("-o,--output", f.output, "Output path ('-' = stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    const Json config = merged_config(f, command);
    if (command == "fit") return run_fit(config);
    if (command == "infer") return run_infer(config);
    if (command == "varcomp") return run_varcomp(config);
    if (command == "generate") return run_generate(config);
    return run_simulate(config);
  } catch (const UsageError& e) {
    std::cerr << "qlmm " << command << ": " << e.what() << "\n"
              << "Run 'qlmm " << command << " --help' for usage.\n";
    return 2;
  } catch (const RuntimeError& e) {
    std::cerr << "qlmm " << command << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "qlmm " << command << ": " << e.what() << "\n";
    return 1;
  }
}
