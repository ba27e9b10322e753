#pragma once

#include "qlmm/debias.hpp"
#include "qlmm/lasso.hpp"
#include "qlmm/model.hpp"
#include "qlmm/simulation.hpp"
#include "qlmm/varcomp.hpp"

#include "json.hpp"

#include <string>
#include <vector>

namespace qlmm {

using Json = nlohmann::ordered_json;

struct LongFormatSchema {
  std::string cluster = "cluster";
  std::string response = "y";
  std::vector<std::string> fixed;   // ordered
  std::vector<std::string> random;  // ordered; may be empty

  /// Throws InvalidArgument when names repeat or no fixed column is given.
  void validate() const;
};

/// A parsed comma-separated table: header plus numeric or text cells.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line;  // one-based file line of each row

  std::size_t column(const std::string& name) const;  // throws Parse naming the column
};

CsvTable read_csv(const std::string& path);
CsvTable parse_csv(const std::string& text, const std::string& source = "<memory>");

/// Rows are grouped by cluster id in order of first appearance; order within
/// a cluster follows the file. When `fixed_matrix_path` is non-empty the
/// fixed-effect columns are read from that wide file instead (same row order;
/// all of its columns when schema.fixed is empty).
ClusteredDataset load_csv(const std::string& path, const LongFormatSchema& schema,
                          const std::string& fixed_matrix_path = "");

/// Writes the long format read by load_csv; columns are named from `schema`
/// or default to x1..xp and z1..zq.
void write_dataset_csv(const ClusteredDataset& dataset, const std::string& path,
                       LongFormatSchema schema = {});

/// Shortest text that parses back to the same double (17 significant digits).
std::string format_double(double v);

/// Path "-" writes to standard output.
void write_text(const std::string& path, const std::string& text);

// Fixed effects.
Json fit_to_json(const FixedEffectsFit& fit, const Json& provenance = Json::object());
std::string fit_to_csv(const FixedEffectsFit& fit);

// Inference. CSV columns: j, beta_db, V_hat, ci_lo, ci_hi, z, p_value (j one-based).
std::string inference_to_csv(const std::vector<InferenceRecord>& records);
std::vector<InferenceRecord> inference_from_csv(const std::string& text);
std::vector<InferenceRecord> read_inference_csv(const std::string& path);
Json inference_to_json(const InferenceResult& result, const std::vector<Index>& selected = {},
                       const Json& provenance = Json::object());
std::vector<InferenceRecord> inference_records_from_json(const Json& doc);

// Variance components.
Json varcomp_to_json(const VarCompFit& fit, const Json& provenance = Json::object());
std::string varcomp_to_csv(const VarCompFit& fit);

// Monte-Carlo reports.
Json scenario_to_json(const Scenario& scenario);
Json report_to_json(const McReport& report, const Json& provenance = Json::object(),
                    bool include_replications = true);
/// One row per report; all reports must share the coordinate layout.
std::string reports_to_csv(const std::vector<McReport>& reports);
std::string sweep_to_csv(const Scenario& scenario, const std::vector<SweepRow>& rows);
Json sweep_to_json(const Scenario& scenario, const std::vector<SweepRow>& rows,
                   const Json& provenance = Json::object());

}  // namespace qlmm
