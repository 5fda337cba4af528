#pragma once

// File formats: dataset CSV ingestion/serialization, ground-truth sidecar,
// normal-model files, and number/timestamp parsing helpers.
//
// Dataset CSV schema (header required, UTF-8, '.' decimal):
//   tool,sensor,step,wafer,lot,seq,timestamp,value
// Timestamps are float seconds or ISO-8601.

#include <compare>
#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "shapesig/anomaly.hpp"
#include "shapesig/oscillator.hpp"
#include "shapesig/simulate.hpp"

namespace shapesig {

struct TripleKey {
  std::string tool, sensor, step;
  auto operator<=>(const TripleKey&) const = default;
  std::string str() const { return tool + "/" + sensor + "/" + step; }
};

struct IngestReport {
  std::size_t total_rows = 0;
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::vector<std::string> diagnostics;  // line-numbered rejection reasons
};

struct Dataset {
  // Wafer traces per triple, ordered by sequence_index (dense-ranked 0..W-1).
  std::map<TripleKey, std::vector<TraceSeries>> triples;
  IngestReport report;

  bool empty() const { return triples.empty(); }
  std::size_t wafer_count() const;
};

struct IngestOptions {
  bool force = false;        // tolerate >1% rejected rows
  int lot_size_fallback = 0; // group consecutive wafers when lots are absent
};

/// Parses and validates a dataset CSV file. Malformed rows are rejected
/// with line-numbered diagnostics; more than 1% rejections is fatal unless
/// opts.force. A missing required column is always fatal.
Dataset ingest_csv(const std::string& path, const IngestOptions& opts = {});
Dataset ingest_csv_text(std::string_view text, const IngestOptions& opts = {});

/// Groups already-built traces into a Dataset (same normalization as
/// ingest_csv, no file round trip).
Dataset dataset_from_traces(const std::vector<TraceSeries>& traces);

std::string dataset_csv_string(const SyntheticDataset& ds);
void write_dataset_csv(const SyntheticDataset& ds, const std::string& path);

// Sidecar rows: wafer (qualified tool:sensor:step:wafer), param, true_value.
// Injected deltas are recorded as param "injected:<name>".
std::string ground_truth_csv_string(const SyntheticDataset& ds);
void write_ground_truth_csv(const SyntheticDataset& ds,
                            const std::string& path);

// Flat key = value text listing sigma*, mu*, sigma_S* plus the triple ids.
void write_normal_model(const NormalModel& nm, const std::string& path);
NormalModel read_normal_model(const std::string& path);

/// Shortest round-trip decimal representation.
std::string fmt_double(double v);

/// Float seconds or ISO-8601 (YYYY-MM-DD[T ]HH:MM:SS[.frac][Z]) to seconds.
/// Throws ValidationError on anything else.
double parse_timestamp(const std::string& text);

}  // namespace shapesig
