#pragma once

// End-to-end orchestration: per-triple normal models, parallel per-lot
// fitting, anomaly records, signature tables, heatmap export, and the CLI.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "shapesig/anomaly.hpp"
#include "shapesig/csv.hpp"
#include "shapesig/fit.hpp"

namespace shapesig {

struct PipelineConfig {
  FitConfig fit;
  int initial_lots = 4;   // lots pooled into the normal model
  int workers = 1;        // (triple, lot) task parallelism
  double z_spike = 3.0;
  int change_window = 8;
  double z_change = 3.0;
};

struct LotSummary {
  std::string lot_id;
  std::vector<int> wafer_indices;  // into the triple's wafer vector
  LotFit fit;
};

struct TripleResult {
  TripleKey key;
  bool ok = false;
  std::string error;               // set when the triple was skipped
  std::vector<std::string> notes;  // non-fatal warnings
  NormalModel normal;
  std::vector<LotSummary> lots;           // time order
  std::vector<AnomalyRecord> records;     // wafer sequence order
  std::vector<int> spikes;                // sequence indices
  std::vector<int> changepoints;          // sequence indices
};

struct RunResult {
  std::vector<TripleResult> triples;  // triple key order
};

/// Fits every triple: normal model from the first initial_lots lots, then
/// per-lot fits warm-started from the normal hyperparameters, then scores
/// and gradients for every wafer. Triples whose initial fit fails to
/// converge are reported and skipped. Output is independent of worker count.
RunResult run_fit(const Dataset& dataset, const PipelineConfig& cfg);

/// Single-triple variant; preset_normal, when given, replaces the
/// internally fitted normal model (used by the score subcommand).
TripleResult process_triple(const TripleKey& key,
                            const std::vector<TraceSeries>& wafers,
                            const PipelineConfig& cfg,
                            const NormalModel* preset_normal = nullptr);

// ---------------------------------------------------------------------------
// Signature tables: one table per tool, one row per wafer in time order,
// one 9-column group (7 parameters, ssr, score) per (sensor, step).
// ---------------------------------------------------------------------------

struct TableCell {
  ShapeSignature signature;
  double ssr = 0.0;
  double score = 0.0;
};

struct TableRow {
  std::string wafer_id, lot_id;
  int sequence_index = 0;
  std::map<std::pair<std::string, std::string>, TableCell> cells;
};

struct SignatureTable {
  std::string tool;
  std::vector<std::pair<std::string, std::string>> groups;  // (sensor, step)
  std::vector<TableRow> rows;  // time order
};

std::map<std::string, SignatureTable> build_tables(const Dataset& dataset,
                                                   const RunResult& run);

std::string table_csv_string(const SignatureTable& table);

/// Writes out_dir/table_<tool>.csv for every tool; returns the paths.
std::vector<std::string> export_tables(
    const std::map<std::string, SignatureTable>& tables,
    const std::string& out_dir);

// ---------------------------------------------------------------------------
// Heatmaps: z-score matrix with rows {gamma,R,omega,y,phi,c,x,ssr,anom} and
// columns = wafers in time order, exported as CSV plus a static SVG with a
// diverging color scale clipped at |z| = 4.
// ---------------------------------------------------------------------------

struct HeatmapData {
  std::vector<std::string> row_labels;
  std::vector<std::string> wafer_ids;
  Eigen::MatrixXd z;  // 9 x wafers
};

HeatmapData heatmap_matrix(const TripleResult& triple);
HeatmapData heatmap_from_table(const SignatureTable& table,
                               const std::string& sensor,
                               const std::string& step);
SignatureTable read_table_csv(const std::string& path);

std::string heatmap_csv_string(const HeatmapData& hm);
std::string heatmap_svg_string(const HeatmapData& hm,
                               const std::string& title);
/// Writes <out_prefix>.csv and <out_prefix>.svg.
void render_heatmap(const HeatmapData& hm, const std::string& title,
                    const std::string& out_prefix);

std::string records_csv_string(const TripleResult& triple,
                               const Dataset& dataset);

/// CLI entry point (subcommands simulate, fit, normal, score, deconstruct,
/// heatmap, report). Returns 0 on success, 1 on validation failure, 2 on
/// runtime failure.
int cli(int argc, const char* const* argv);
int cli(const std::vector<std::string>& args);  // convenience for tests

}  // namespace shapesig
