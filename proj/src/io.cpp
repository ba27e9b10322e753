#include "qlmm/io.hpp"

#include "qlmm/error.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

namespace qlmm {

void LongFormatSchema::validate() const {
  if (fixed.empty()) fail(ErrorCode::InvalidArgument, "schema needs at least one fixed-effect column");
  std::set<std::string> seen;
  auto add = [&](const std::string& name) {
    if (name.empty()) fail(ErrorCode::InvalidArgument, "schema column names must be non-empty");
    if (!seen.insert(name).second)
      fail(ErrorCode::InvalidArgument, "column '" + name + "' appears more than once in the schema");
  };
  add(cluster);
  add(response);
  for (const auto& f : fixed) add(f);
  for (const auto& r : random) add(r);
}

std::size_t CsvTable::column(const std::string& name) const {
  for (std::size_t k = 0; k < header.size(); ++k)
    if (header[k] == name) return k;
  fail(ErrorCode::Parse, "missing column '" + name + "'");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  bool quoted = false;
  for (std::size_t k = 0; k < line.size(); ++k) {
    const char c = line[k];
    if (quoted) {
      if (c == '"' && k + 1 < line.size() && line[k + 1] == '"') {
        cell += '"';
        ++k;
      } else if (c == '"') {
        quoted = false;
      } else {
        cell += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(trim(cell));
      cell.clear();
    } else {
      cell += c;
    }
  }
  out.push_back(trim(cell));
  return out;
}

double parse_number(const std::string& cell, std::size_t line, const std::string& column,
                    const std::string& source) {
  double v = 0.0;
  const char* begin = cell.data();
  const char* end = begin + cell.size();
  if (!cell.empty() && *begin == '+') ++begin;
  const auto res = std::from_chars(begin, end, v);
  if (cell.empty() || res.ec != std::errc() || res.ptr != end) {
    std::ostringstream s;
    s << source << ": row " << line << ", column '" << column << "': non-numeric cell '" << cell << "'";
    fail(ErrorCode::Parse, s.str());
  }
  return v;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open '" + path + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Json vector_json(const Vector& v) {
  Json out = Json::array();
  for (Index k = 0; k < v.size(); ++k) out.push_back(v[k]);
  return out;
}

Json matrix_json(const Matrix& m) {
  Json out = Json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    out.push_back(std::move(row));
  }
  return out;
}

// JSON has no NaN; such values are written as null and read back as NaN.
Json number(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

double number_from(const Json& v) {
  return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
}

std::string scale_name(LambdaScale s) {
  return s == LambdaScale::Observations ? "observations" : "effective";
}

Json one_based(const std::vector<Index>& v) {
  Json out = Json::array();
  for (Index j : v) out.push_back(j + 1);
  return out;
}

}  // namespace

CsvTable parse_csv(const std::string& text, const std::string& source) {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++number;
    if (trim(line).empty()) continue;
    auto cells = split_line(line);
    if (!have_header) {
      if (number == 1 && cells.front().rfind("\xEF\xBB\xBF", 0) == 0) cells.front().erase(0, 3);
      t.header = std::move(cells);
      have_header = true;
      continue;
    }
    if (cells.size() != t.header.size()) {
      std::ostringstream s;
      s << source << ": row " << number << " has " << cells.size() << " cells, header has "
        << t.header.size();
      fail(ErrorCode::Parse, s.str());
    }
    t.rows.push_back(std::move(cells));
    t.line.push_back(number);
  }
  if (!have_header) fail(ErrorCode::Parse, source + ": empty file");
  return t;
}

CsvTable read_csv(const std::string& path) { return parse_csv(read_file(path), path); }

ClusteredDataset load_csv(const std::string& path, const LongFormatSchema& schema,
                          const std::string& fixed_matrix_path) {
  const bool wide = !fixed_matrix_path.empty();
  if (wide) {
    LongFormatSchema check = schema;
    if (check.fixed.empty()) check.fixed = {"\x01"};
    check.validate();
  } else {
    schema.validate();
  }
  const CsvTable t = read_csv(path);
  if (t.rows.empty()) fail(ErrorCode::Parse, path + ": no data rows");
  const std::size_t id_col = t.column(schema.cluster);
  const std::size_t y_col = t.column(schema.response);
  std::vector<std::size_t> z_cols;
  for (const auto& name : schema.random) z_cols.push_back(t.column(name));

  std::optional<CsvTable> w;
  std::vector<std::size_t> x_cols;
  std::vector<std::string> x_names = schema.fixed;
  if (wide) {
    w.emplace(read_csv(fixed_matrix_path));
    if (w->rows.size() != t.rows.size()) {
      std::ostringstream s;
      s << fixed_matrix_path << ": " << w->rows.size() << " rows, expected " << t.rows.size();
      fail(ErrorCode::Parse, s.str());
    }
    if (x_names.empty()) x_names = w->header;
    for (const auto& name : x_names) x_cols.push_back(w->column(name));
  } else {
    for (const auto& name : x_names) x_cols.push_back(t.column(name));
  }
  const CsvTable& xt = wide ? *w : t;
  const std::string& xsource = wide ? fixed_matrix_path : path;

  std::vector<std::string> order;
  std::map<std::string, std::vector<std::size_t>> rows;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const std::string& id = t.rows[r][id_col];
    if (id.empty()) {
      std::ostringstream s;
      s << path << ": row " << t.line[r] << ": empty cluster id";
      fail(ErrorCode::Parse, s.str());
    }
    auto [it, fresh] = rows.try_emplace(id);
    if (fresh) order.push_back(id);
    it->second.push_back(r);
  }

  const auto p = static_cast<Index>(x_cols.size());
  const auto q = static_cast<Index>(z_cols.size());
  std::vector<Cluster> clusters;
  for (const auto& id : order) {
    const auto& members = rows[id];
    const auto m = static_cast<Index>(members.size());
    Cluster c;
    c.id = id;
    c.y.resize(m);
    c.X.resize(m, p);
    c.Z.resize(m, q);
    for (Index r = 0; r < m; ++r) {
      const std::size_t src = members[static_cast<std::size_t>(r)];
      const auto& cells = t.rows[src];
      c.y[r] = parse_number(cells[y_col], t.line[src], schema.response, path);
      for (Index k = 0; k < p; ++k)
        c.X(r, k) = parse_number(xt.rows[src][x_cols[static_cast<std::size_t>(k)]], xt.line[src],
                                 x_names[static_cast<std::size_t>(k)], xsource);
      for (Index k = 0; k < q; ++k)
        c.Z(r, k) = parse_number(cells[z_cols[static_cast<std::size_t>(k)]], t.line[src],
                                 schema.random[static_cast<std::size_t>(k)], path);
    }
    clusters.push_back(std::move(c));
  }
  ClusteredDataset out(std::move(clusters), p, q);
  require_valid(out);
  return out;
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  if (path == "-") {
    std::cout << text;
    std::cout.flush();
    if (!std::cout) fail(ErrorCode::Io, "write to standard output failed");
    return;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot write '" + path + "'");
  out << text;
  out.flush();
  if (!out) fail(ErrorCode::Io, "write to '" + path + "' failed");
}

void write_dataset_csv(const ClusteredDataset& dataset, const std::string& path,
                       LongFormatSchema schema) {
  if (schema.fixed.empty())
    for (Index k = 0; k < dataset.p(); ++k) schema.fixed.push_back("x" + std::to_string(k + 1));
  if (schema.random.empty())
    for (Index k = 0; k < dataset.q(); ++k) schema.random.push_back("z" + std::to_string(k + 1));
  if (static_cast<Index>(schema.fixed.size()) != dataset.p() ||
      static_cast<Index>(schema.random.size()) != dataset.q())
    fail(ErrorCode::DimensionMismatch, "schema does not match the dataset dimensions");
  schema.validate();
  std::ostringstream s;
  s << schema.cluster << ',' << schema.response;
  for (const auto& f : schema.fixed) s << ',' << f;
  for (const auto& r : schema.random) s << ',' << r;
  s << '\n';
  for (const auto& c : dataset.clusters()) {
    for (Index r = 0; r < c.size(); ++r) {
      s << c.id << ',' << format_double(c.y[r]);
      for (Index k = 0; k < c.X.cols(); ++k) s << ',' << format_double(c.X(r, k));
      for (Index k = 0; k < c.Z.cols(); ++k) s << ',' << format_double(c.Z(r, k));
      s << '\n';
    }
  }
  write_text(path, s.str());
}

Json fit_to_json(const FixedEffectsFit& fit, const Json& provenance) {
  Json j;
  j["provenance"] = provenance;
  j["a"] = fit.a;
  j["lambda"] = fit.lambda;
  j["effective_sample_size"] = fit.effective_sample_size;
  j["sigma_init"] = fit.sigma_init ? Json(*fit.sigma_init) : Json(nullptr);
  j["objective"] = fit.objective;
  j["iterations"] = fit.iterations;
  j["converged"] = fit.converged;
  j["kkt_residual"] = fit.kkt_residual;
  j["penalty_weights"] = vector_json(fit.penalty_weights);
  j["beta"] = vector_json(fit.beta);
  Json support = Json::array();
  for (Index k = 0; k < fit.beta.size(); ++k)
    if (fit.beta[k] != 0.0) support.push_back(k + 1);
  j["support"] = support;
  return j;
}

std::string fit_to_csv(const FixedEffectsFit& fit) {
  std::ostringstream s;
  s << "j,beta\n";
  for (Index k = 0; k < fit.beta.size(); ++k) s << k + 1 << ',' << format_double(fit.beta[k]) << '\n';
  return s.str();
}

std::string inference_to_csv(const std::vector<InferenceRecord>& records) {
  std::ostringstream s;
  s << "j,beta_db,V_hat,ci_lo,ci_hi,z,p_value\n";
  for (const auto& r : records)
    s << r.j + 1 << ',' << format_double(r.beta_db) << ',' << format_double(r.V_hat) << ','
      << format_double(r.ci_lo) << ',' << format_double(r.ci_hi) << ',' << format_double(r.z)
      << ',' << format_double(r.p_value) << '\n';
  return s.str();
}

std::vector<InferenceRecord> inference_from_csv(const std::string& text) {
  const CsvTable t = parse_csv(text, "inference table");
  const std::vector<std::string> cols{"j", "beta_db", "V_hat", "ci_lo", "ci_hi", "z", "p_value"};
  std::vector<std::size_t> at;
  for (const auto& c : cols) at.push_back(t.column(c));
  std::vector<InferenceRecord> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    auto get = [&](std::size_t k) { return parse_number(t.rows[r][at[k]], t.line[r], cols[k], "inference table"); };
    InferenceRecord rec;
    rec.j = static_cast<Index>(get(0)) - 1;
    rec.beta_db = get(1);
    rec.V_hat = get(2);
    rec.ci_lo = get(3);
    rec.ci_hi = get(4);
    rec.z = get(5);
    rec.p_value = get(6);
    out.push_back(rec);
  }
  return out;
}

std::vector<InferenceRecord> read_inference_csv(const std::string& path) {
  return inference_from_csv(read_file(path));
}

Json inference_to_json(const InferenceResult& result, const std::vector<Index>& selected,
                       const Json& provenance) {
  Json j;
  j["provenance"] = provenance;
  j["fit"] = fit_to_json(result.fit);
  j["fit"].erase("provenance");
  j["debias_a"] = result.debias_a;
  Json records = Json::array();
  for (const auto& r : result.records) {
    Json o;
    o["j"] = r.j + 1;
    o["beta_hat"] = r.beta_hat;
    o["beta_db"] = r.beta_db;
    o["V_hat"] = r.V_hat;
    o["ci_lo"] = r.ci_lo;
    o["ci_hi"] = r.ci_hi;
    o["z"] = number(r.z);
    o["p_value"] = number(r.p_value);
    o["alpha"] = r.alpha;
    o["lambda_j"] = r.lambda_j;
    o["degenerate"] = r.degenerate;
    o["warning"] = r.warning;
    records.push_back(std::move(o));
  }
  j["records"] = records;
  Json failures = Json::array();
  for (const auto& f : result.failures) failures.push_back({{"j", f.j + 1}, {"message", f.message}});
  j["failures"] = failures;
  j["selected"] = one_based(selected);
  return j;
}

std::vector<InferenceRecord> inference_records_from_json(const Json& doc) {
  std::vector<InferenceRecord> out;
  for (const auto& o : doc.at("records")) {
    InferenceRecord r;
    r.j = o.at("j").get<Index>() - 1;
    r.beta_hat = o.at("beta_hat").get<double>();
    r.beta_db = o.at("beta_db").get<double>();
    r.V_hat = o.at("V_hat").get<double>();
    r.ci_lo = o.at("ci_lo").get<double>();
    r.ci_hi = o.at("ci_hi").get<double>();
    r.z = number_from(o.at("z"));
    r.p_value = number_from(o.at("p_value"));
    r.alpha = o.at("alpha").get<double>();
    r.lambda_j = o.at("lambda_j").get<double>();
    r.degenerate = o.at("degenerate").get<bool>();
    r.warning = o.at("warning").get<std::string>();
    out.push_back(r);
  }
  return out;
}

Json varcomp_to_json(const VarCompFit& fit, const Json& provenance) {
  Json j;
  j["provenance"] = provenance;
  j["sigma2_e"] = fit.sigma2_e_hat;
  j["eta"] = vector_json(fit.eta_hat);
  j["psi"] = matrix_json(fit.Psi_hat);
  Json basis = Json::array();
  for (const auto& g : fit.basis) basis.push_back(matrix_json(g));
  j["basis"] = basis;
  j["design_condition"] = fit.design_condition;
  j["sample_split"] = fit.sample_split;
  j["cross_fit"] = fit.cross_fit;
  j["split_seed"] = fit.split.seed;
  j["first_fold"] = one_based(fit.split.first);
  j["second_fold"] = one_based(fit.split.second);
  j["sigma2_clamped"] = fit.sigma2_clamped;
  j["psd_projected"] = fit.psd_projected;
  Json halves = Json::array();
  for (const auto& h : fit.halves)
    halves.push_back({{"sigma2_e", h.sigma2_e}, {"eta", vector_json(h.eta)}, {"a", h.a},
                      {"lambda", h.lambda}, {"clamped", h.clamped}});
  j["halves"] = halves;
  return j;
}

std::string varcomp_to_csv(const VarCompFit& fit) {
  std::ostringstream s;
  s << "component,estimate\n";
  s << "sigma2_e," << format_double(fit.sigma2_e_hat) << '\n';
  for (Index k = 0; k < fit.eta_hat.size(); ++k)
    s << "eta_" << k + 1 << ',' << format_double(fit.eta_hat[k]) << '\n';
  return s.str();
}

Json scenario_to_json(const Scenario& s) {
  Json j;
  j["N"] = s.total;
  j["n"] = s.clusters();
  j["m"] = s.m;
  j["p"] = s.p;
  j["q"] = s.q;
  j["rho"] = s.rho;
  j["psi"] = to_string(s.psi_kind);
  j["psi_scale"] = s.psi_scale;
  if (s.psi_kind == PsiKind::Custom) j["psi_matrix"] = matrix_json(s.psi_custom);
  j["sigma2_e"] = s.sigma2_e;
  j["beta"] = vector_json(s.beta());
  j["seed"] = s.seed;
  return j;
}

namespace {

Json options_json(const PipelineOptions& o) {
  Json j;
  j["a_grid"] = o.a_grid;
  j["fixed_a"] = o.fixed_a ? Json(*o.fixed_a) : Json(nullptr);
  j["lambda"] = o.lasso.lambda ? Json(*o.lasso.lambda) : Json("auto");
  j["lambda_scale"] = scale_name(o.lasso.lambda_scale);
  j["nodewise_lambda_scale"] = scale_name(o.nodewise_lambda_scale.value_or(o.lasso.lambda_scale));
  j["standardize"] = o.lasso.standardize;
  j["cv_folds"] = o.cv_folds;
  j["mode"] = o.mode == DebiasMode::Whitened ? "whitened" : "a0-robust";
  j["alpha"] = o.alpha;
  j["coverage_coordinates"] = one_based(o.coverage_coordinates);
  j["rejection_coordinates"] = one_based(o.rejection_coordinates);
  j["inference"] = o.inference;
  j["varcomp"] = o.varcomp;
  if (o.varcomp) {
    j["basis"] = o.basis;
    j["sample_split"] = o.sample_split;
    j["cross_fit"] = o.cross_fit;
    j["project_psd"] = o.project_psd;
  }
  return j;
}

}  // namespace

Json report_to_json(const McReport& r, const Json& provenance, bool include_replications) {
  Json j;
  j["provenance"] = provenance;
  j["scenario"] = scenario_to_json(r.scenario);
  j["options"] = options_json(r.options);
  j["reps"] = r.reps;
  j["succeeded"] = r.succeeded;
  j["failed"] = r.failed;
  j["failures"] = r.failures;
  Json cov = Json::array();
  for (const auto& c : r.coverage)
    cov.push_back({{"j", c.j + 1}, {"beta", c.beta_true}, {"coverage", c.rate}, {"sd", c.mean_sd}});
  j["coverage"] = cov;
  Json rej = Json::array();
  for (const auto& c : r.rejection) rej.push_back({{"j", c.j + 1}, {"beta", c.beta_true}, {"rate", c.rate}});
  j["rejection"] = rej;
  j["sse"] = r.mean_sse;
  j["median_l2"] = number(r.median_l2);
  j["mean_effective_sample_size"] = r.mean_effective_sample_size;
  j["mean_a"] = r.mean_a;
  j["max_kkt_residual"] = r.max_kkt_residual;
  j["nonconverged"] = r.nonconverged;
  j["degenerate"] = r.degenerate;
  if (r.options.varcomp) {
    j["mae_sigma2_e"] = r.mae_sigma2;
    j["mae_eta"] = vector_json(r.mae_eta);
    j["median_eta_l2"] = number(r.median_eta_l2);
  }
  if (include_replications) {
    Json reps = Json::array();
    for (const auto& x : r.replications) {
      Json o;
      o["rep"] = x.rep;
      o["seed"] = x.seed;
      o["ok"] = x.ok;
      if (!x.ok) {
        o["failure"] = x.failure;
        reps.push_back(std::move(o));
        continue;
      }
      o["a"] = x.a;
      o["lambda"] = x.lambda;
      o["effective_sample_size"] = x.effective_sample_size;
      o["sse"] = x.sse;
      o["kkt_residual"] = x.kkt_residual;
      o["covered"] = std::vector<int>(x.covered.begin(), x.covered.end());
      o["sd"] = x.sd;
      o["rejected"] = std::vector<int>(x.rejected.begin(), x.rejected.end());
      if (r.options.varcomp) {
        o["sigma2_e"] = x.sigma2_hat;
        o["eta"] = vector_json(x.eta_hat);
      }
      reps.push_back(std::move(o));
    }
    j["replications"] = reps;
  }
  return j;
}

std::string reports_to_csv(const std::vector<McReport>& reports) {
  std::ostringstream body;
  std::string header;
  for (const auto& r : reports) {
    std::ostringstream h, row;
    const Scenario& s = r.scenario;
    h << "q,m,n,p,psi,rho,sigma2_e,reps,succeeded,failed,mean_a,mean_T,sse,median_l2";
    row << s.q << ',' << s.m << ',' << s.clusters() << ',' << s.p << ',' << to_string(s.psi_kind)
        << ',' << format_double(s.rho) << ',' << format_double(s.sigma2_e) << ',' << r.reps << ','
        << r.succeeded << ',' << r.failed << ',' << format_double(r.mean_a) << ','
        << format_double(r.mean_effective_sample_size) << ',' << format_double(r.mean_sse) << ','
        << format_double(r.median_l2);
    for (const auto& c : r.coverage) {
      h << ",cov_" << c.j + 1 << ",sd_" << c.j + 1;
      row << ',' << format_double(c.rate) << ',' << format_double(c.mean_sd);
    }
    for (const auto& c : r.rejection) {
      h << ",rej_" << c.j + 1;
      row << ',' << format_double(c.rate);
    }
    if (r.options.varcomp) {
      h << ",mae_sigma2_e";
      row << ',' << format_double(r.mae_sigma2);
      for (Index k = 0; k < r.mae_eta.size(); ++k) {
        h << ",mae_eta_" << k + 1;
        row << ',' << format_double(r.mae_eta[k]);
      }
      h << ",median_eta_l2";
      row << ',' << format_double(r.median_eta_l2);
    }
    h << ",max_kkt,nonconverged,degenerate\n";
    row << ',' << format_double(r.max_kkt_residual) << ',' << r.nonconverged << ',' << r.degenerate << '\n';
    if (header.empty()) header = h.str();
    else if (header != h.str()) fail(ErrorCode::InvalidArgument, "reports have different column layouts");
    body << row.str();
  }
  if (header.empty()) header = "q,m,n,p,psi,rho,sigma2_e,reps,succeeded,failed,mean_a,mean_T,sse,median_l2\n";
  return header + body.str();
}

std::string sweep_to_csv(const Scenario& scenario, const std::vector<SweepRow>& rows) {
  std::ostringstream s;
  s << "q,m,psi,a,sse,mean_T,cov_signal,cov_null,sd_signal,sd_null,succeeded\n";
  for (const auto& r : rows)
    s << scenario.q << ',' << scenario.m << ',' << to_string(scenario.psi_kind) << ','
      << format_double(r.a) << ',' << format_double(r.sse) << ','
      << format_double(r.mean_effective_sample_size) << ',' << format_double(r.cov_signal) << ','
      << format_double(r.cov_null) << ',' << format_double(r.sd_signal) << ','
      << format_double(r.sd_null) << ',' << r.succeeded << '\n';
  return s.str();
}

Json sweep_to_json(const Scenario& scenario, const std::vector<SweepRow>& rows,
                   const Json& provenance) {
  Json j;
  j["provenance"] = provenance;
  j["scenario"] = scenario_to_json(scenario);
  Json out = Json::array();
  for (const auto& r : rows)
    out.push_back({{"a", r.a}, {"sse", r.sse}, {"mean_T", r.mean_effective_sample_size},
                   {"cov_signal", r.cov_signal}, {"cov_null", r.cov_null},
                   {"sd_signal", r.sd_signal}, {"sd_null", r.sd_null}, {"succeeded", r.succeeded}});
  j["rows"] = out;
  return j;
}

}  // namespace qlmm
