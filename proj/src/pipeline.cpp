#include "shapesig/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include "shapesig/errors.hpp"
#include "shapesig/parallel.hpp"

namespace shapesig {

namespace {

// Lots of a triple in time order (by the earliest wafer of each lot).
std::vector<std::pair<std::string, std::vector<int>>> group_lots(
    const std::vector<TraceSeries>& wafers) {
  std::map<std::string, std::vector<int>> by_lot;
  for (std::size_t i = 0; i < wafers.size(); ++i)
    by_lot[wafers[i].lot_id].push_back(static_cast<int>(i));
  std::vector<std::pair<std::string, std::vector<int>>> lots(by_lot.begin(),
                                                             by_lot.end());
  std::sort(lots.begin(), lots.end(), [&](const auto& a, const auto& b) {
    return std::tuple(wafers[a.second.front()].sequence_index, a.first) <
           std::tuple(wafers[b.second.front()].sequence_index, b.first);
  });
  return lots;
}

std::string sanitize_filename(const std::string& name) {
  std::string out = name;
  for (char& c : out)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.' && c != '-' &&
        c != '_')
      c = '_';
  return out;
}

}  // namespace

TripleResult process_triple(const TripleKey& key,
                            const std::vector<TraceSeries>& wafers,
                            const PipelineConfig& cfg,
                            const NormalModel* preset_normal) {
  TripleResult out;
  out.key = key;
  try {
    const auto lots = group_lots(wafers);

    if (!preset_normal) {
      const int use = std::min<int>(cfg.initial_lots,
                                    static_cast<int>(lots.size()));
      if (use < cfg.initial_lots)
        out.notes.push_back("only " + std::to_string(lots.size()) +
                            " lots available for the normal model (wanted " +
                            std::to_string(cfg.initial_lots) + ")");
      std::vector<TraceSeries> pooled;
      for (int li = 0; li < use; ++li)
        for (int wi : lots[li].second) pooled.push_back(wafers[wi]);
      LotFit diag;
      out.normal = fit_normal_model(pooled, cfg.fit, &diag);
      if (!diag.converged) {
        out.error = "initial fit did not converge within " +
                    std::to_string(cfg.fit.bcd_max_rounds) + " rounds";
        return out;
      }
    } else {
      out.normal = *preset_normal;
    }
    const Hyperparams warm = out.normal.as_hyperparams();

    out.lots.resize(lots.size());
    std::vector<ShapeSignature> signatures(wafers.size());
    std::vector<double> ssrs(wafers.size());
    for (std::size_t li = 0; li < lots.size(); ++li) {
      LotSummary& summary = out.lots[li];
      summary.lot_id = lots[li].first;
      summary.wafer_indices = lots[li].second;
      std::vector<TraceSeries> lot_traces;
      for (int wi : summary.wafer_indices) lot_traces.push_back(wafers[wi]);
      summary.fit = fit_lot(lot_traces, cfg.fit, &warm);
      for (std::size_t j = 0; j < summary.wafer_indices.size(); ++j) {
        signatures[summary.wafer_indices[j]] = summary.fit.signatures[j];
        ssrs[summary.wafer_indices[j]] = summary.fit.per_wafer_ssr[j];
      }
    }

    out.records.reserve(wafers.size());
    std::vector<double> score_series;
    score_series.reserve(wafers.size());
    for (std::size_t wi = 0; wi < wafers.size(); ++wi) {
      AnomalyRecord rec;
      rec.wafer_id = wafers[wi].wafer_id;
      rec.sequence_index = wafers[wi].sequence_index;
      rec.signature = signatures[wi];
      rec.ssr = ssrs[wi];
      rec.score = score(signatures[wi], wafers[wi], out.normal);
      rec.gradient = score_gradient(signatures[wi], wafers[wi], out.normal);
      score_series.push_back(rec.score);
      out.records.push_back(std::move(rec));
    }

    if (score_series.size() >= 5)
      out.spikes = detect_spikes(score_series, cfg.z_spike);
    if (score_series.size() >= 2 * static_cast<std::size_t>(cfg.change_window))
      out.changepoints =
          detect_changepoints(score_series, cfg.change_window, cfg.z_change);
    out.ok = true;
  } catch (const std::exception& e) {
    out.ok = false;
    out.error = e.what();
    out.records.clear();
    out.lots.clear();
  }
  return out;
}

RunResult run_fit(const Dataset& dataset, const PipelineConfig& cfg) {
  if (dataset.empty()) throw std::domain_error("run_fit: empty dataset");

  std::vector<const std::pair<const TripleKey, std::vector<TraceSeries>>*>
      entries;
  for (const auto& entry : dataset.triples) entries.push_back(&entry);

  RunResult run;
  run.triples.resize(entries.size());

  // Phase 1: normal models, one task per triple.
  std::vector<NormalModel> normals(entries.size());
  std::vector<std::string> normal_errors(entries.size());
  std::vector<std::vector<std::string>> normal_notes(entries.size());
  parallel_for(static_cast<int>(entries.size()), cfg.workers, [&](int ti) {
    const auto& [key, wafers] = *entries[ti];
    try {
      const auto lots = group_lots(wafers);
      const int use =
          std::min<int>(cfg.initial_lots, static_cast<int>(lots.size()));
      if (use < cfg.initial_lots)
        normal_notes[ti].push_back(
            "only " + std::to_string(lots.size()) +
            " lots available for the normal model (wanted " +
            std::to_string(cfg.initial_lots) + ")");
      std::vector<TraceSeries> pooled;
      for (int li = 0; li < use; ++li)
        for (int wi : lots[li].second) pooled.push_back(wafers[wi]);
      LotFit diag;
      normals[ti] = fit_normal_model(pooled, cfg.fit, &diag);
      if (!diag.converged)
        normal_errors[ti] = "initial fit did not converge within " +
                            std::to_string(cfg.fit.bcd_max_rounds) + " rounds";
    } catch (const std::exception& e) {
      normal_errors[ti] = e.what();
    }
  });

  // Phase 2: per-lot fits across all healthy triples, one task per lot.
  struct LotTask {
    int triple = 0;
    int lot = 0;
    std::string lot_id;
    std::vector<int> wafer_indices;
    LotFit fit;
    std::string error;
  };
  std::vector<LotTask> tasks;
  std::vector<std::vector<int>> task_of_triple(entries.size());
  for (std::size_t ti = 0; ti < entries.size(); ++ti) {
    if (!normal_errors[ti].empty()) continue;
    const auto lots = group_lots(entries[ti]->second);
    for (std::size_t li = 0; li < lots.size(); ++li) {
      LotTask task;
      task.triple = static_cast<int>(ti);
      task.lot = static_cast<int>(li);
      task.lot_id = lots[li].first;
      task.wafer_indices = lots[li].second;
      task_of_triple[ti].push_back(static_cast<int>(tasks.size()));
      tasks.push_back(std::move(task));
    }
  }
  parallel_for(static_cast<int>(tasks.size()), cfg.workers, [&](int k) {
    LotTask& task = tasks[static_cast<std::size_t>(k)];
    const auto& wafers = entries[static_cast<std::size_t>(task.triple)]->second;
    std::vector<TraceSeries> lot_traces;
    for (int wi : task.wafer_indices) lot_traces.push_back(wafers[wi]);
    const Hyperparams warm =
        normals[static_cast<std::size_t>(task.triple)].as_hyperparams();
    try {
      task.fit = fit_lot(lot_traces, cfg.fit, &warm);
    } catch (const std::exception& e) {
      task.error = e.what();
    }
  });

  // Phase 3: scores, gradients, detections; deterministic assembly.
  parallel_for(static_cast<int>(entries.size()), cfg.workers, [&](int ti) {
    const auto& [key, wafers] = *entries[ti];
    TripleResult& tr = run.triples[static_cast<std::size_t>(ti)];
    tr.key = key;
    tr.notes = normal_notes[ti];
    if (!normal_errors[ti].empty()) {
      tr.error = normal_errors[ti];
      return;
    }
    tr.normal = normals[ti];
    std::vector<ShapeSignature> signatures(wafers.size());
    std::vector<double> ssrs(wafers.size(), 0.0);
    for (int k : task_of_triple[ti]) {
      const LotTask& task = tasks[static_cast<std::size_t>(k)];
      if (!task.error.empty()) {
        tr.error = "lot " + task.lot_id + ": " + task.error;
        return;
      }
      LotSummary summary;
      summary.lot_id = task.lot_id;
      summary.wafer_indices = task.wafer_indices;
      summary.fit = task.fit;
      for (std::size_t j = 0; j < task.wafer_indices.size(); ++j) {
        signatures[task.wafer_indices[j]] = task.fit.signatures[j];
        ssrs[task.wafer_indices[j]] = task.fit.per_wafer_ssr[j];
      }
      tr.lots.push_back(std::move(summary));
    }
    std::vector<double> score_series;
    score_series.reserve(wafers.size());
    for (std::size_t wi = 0; wi < wafers.size(); ++wi) {
      AnomalyRecord rec;
      rec.wafer_id = wafers[wi].wafer_id;
      rec.sequence_index = wafers[wi].sequence_index;
      rec.signature = signatures[wi];
      rec.ssr = ssrs[wi];
      rec.score = score(signatures[wi], wafers[wi], tr.normal);
      rec.gradient = score_gradient(signatures[wi], wafers[wi], tr.normal);
      score_series.push_back(rec.score);
      tr.records.push_back(std::move(rec));
    }
    if (score_series.size() >= 5)
      tr.spikes = detect_spikes(score_series, cfg.z_spike);
    if (score_series.size() >= 2 * static_cast<std::size_t>(cfg.change_window))
      tr.changepoints =
          detect_changepoints(score_series, cfg.change_window, cfg.z_change);
    tr.ok = true;
  });

  return run;
}

// ---------------------------------------------------------------------------
// Signature tables
// ---------------------------------------------------------------------------

std::map<std::string, SignatureTable> build_tables(const Dataset& dataset,
                                                   const RunResult& run) {
  std::map<std::string, SignatureTable> tables;

  // Wafer metadata per tool: first-seen sequence index and lot.
  struct RowMeta {
    int seq = 0;
    std::string lot;
  };
  std::map<std::string, std::map<std::string, RowMeta>> meta;  // tool -> wafer
  for (const auto& [key, wafers] : dataset.triples)
    for (const TraceSeries& tr : wafers) {
      auto& m = meta[key.tool];
      if (m.emplace(tr.wafer_id, RowMeta{tr.sequence_index, tr.lot_id}).second)
        continue;
    }

  for (const TripleResult& tr : run.triples) {
    if (!tr.ok) continue;
    SignatureTable& table = tables[tr.key.tool];
    table.tool = tr.key.tool;
    table.groups.emplace_back(tr.key.sensor, tr.key.step);
  }

  for (auto& [tool, table] : tables) {
    std::sort(table.groups.begin(), table.groups.end());
    table.groups.erase(std::unique(table.groups.begin(), table.groups.end()),
                       table.groups.end());

    std::map<std::string, TableRow> rows;
    for (const TripleResult& tr : run.triples) {
      if (!tr.ok || tr.key.tool != tool) continue;
      for (const AnomalyRecord& rec : tr.records) {
        TableRow& row = rows[rec.wafer_id];
        row.wafer_id = rec.wafer_id;
        const RowMeta& rm = meta[tool][rec.wafer_id];
        row.lot_id = rm.lot;
        row.sequence_index = rm.seq;
        row.cells[{tr.key.sensor, tr.key.step}] =
            TableCell{rec.signature, rec.ssr, rec.score};
      }
    }
    table.rows.reserve(rows.size());
    for (auto& [wafer, row] : rows) table.rows.push_back(std::move(row));
    std::stable_sort(table.rows.begin(), table.rows.end(),
                     [](const TableRow& a, const TableRow& b) {
                       return std::tie(a.sequence_index, a.wafer_id) <
                              std::tie(b.sequence_index, b.wafer_id);
                     });
  }
  return tables;
}

namespace {

const char* kCellFields[9] = {"gamma", "R",   "omega", "y",    "phi",
                              "c",     "x",   "ssr",   "score"};

double cell_field(const TableCell& cell, int f) {
  if (f < 7) return cell.signature[f];
  return f == 7 ? cell.ssr : cell.score;
}

}  // namespace

std::string table_csv_string(const SignatureTable& table) {
  std::string out = "wafer,lot,seq";
  for (const auto& [sensor, step] : table.groups)
    for (const char* field : kCellFields)
      out += "," + sensor + "__" + step + "__" + field;
  out += "\n";
  for (const TableRow& row : table.rows) {
    out += row.wafer_id + "," + row.lot_id + "," +
           std::to_string(row.sequence_index);
    for (const auto& group : table.groups) {
      const auto it = row.cells.find(group);
      for (int f = 0; f < 9; ++f) {
        out += ",";
        if (it != row.cells.end()) out += fmt_double(cell_field(it->second, f));
      }
    }
    out += "\n";
  }
  return out;
}

std::vector<std::string> export_tables(
    const std::map<std::string, SignatureTable>& tables,
    const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::vector<std::string> paths;
  for (const auto& [tool, table] : tables) {
    const std::string path =
        (std::filesystem::path(out_dir) /
         ("table_" + sanitize_filename(tool) + ".csv"))
            .string();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot open for writing: " + path);
    out << table_csv_string(table);
    if (!out) throw std::runtime_error("write failed: " + path);
    paths.push_back(path);
  }
  return paths;
}

SignatureTable read_table_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open table file: " + path);
  std::string header;
  if (!std::getline(in, header))
    throw ValidationError("empty table file: " + path);
  if (!header.empty() && header.back() == '\r') header.pop_back();

  std::vector<std::string> names;
  {
    std::stringstream ss(header);
    std::string field;
    while (std::getline(ss, field, ',')) names.push_back(field);
  }
  if (names.size() < 3 || names[0] != "wafer" || names[1] != "lot" ||
      names[2] != "seq")
    throw ValidationError("table file " + path +
                          ": expected wafer,lot,seq leading columns");

  SignatureTable table;
  struct ColRef {
    std::pair<std::string, std::string> group;
    int field = -1;
  };
  std::vector<ColRef> cols(names.size());
  for (std::size_t i = 3; i < names.size(); ++i) {
    const std::string& name = names[i];
    const std::size_t a = name.find("__");
    const std::size_t b = name.rfind("__");
    if (a == std::string::npos || b == a)
      throw ValidationError("table file " + path + ": bad column '" + name +
                            "'");
    const std::string sensor = name.substr(0, a);
    const std::string step = name.substr(a + 2, b - a - 2);
    const std::string field = name.substr(b + 2);
    int fi = -1;
    for (int f = 0; f < 9; ++f)
      if (field == kCellFields[f]) fi = f;
    if (fi < 0)
      throw ValidationError("table file " + path + ": unknown field '" +
                            field + "'");
    cols[i] = {{sensor, step}, fi};
    table.groups.emplace_back(sensor, step);
  }
  std::sort(table.groups.begin(), table.groups.end());
  table.groups.erase(std::unique(table.groups.begin(), table.groups.end()),
                     table.groups.end());

  std::string line;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    fields.resize(names.size());
    TableRow row;
    row.wafer_id = fields[0];
    row.lot_id = fields[1];
    row.sequence_index = std::atoi(fields[2].c_str());
    std::map<std::pair<std::string, std::string>, int> filled;
    for (std::size_t i = 3; i < fields.size(); ++i) {
      if (fields[i].empty()) continue;
      TableCell& cell = row.cells[cols[i].group];
      const double v = std::strtod(fields[i].c_str(), nullptr);
      if (cols[i].field < 7)
        cell.signature[cols[i].field] = v;
      else if (cols[i].field == 7)
        cell.ssr = v;
      else
        cell.score = v;
      ++filled[cols[i].group];
    }
    for (const auto& [group, count] : filled)
      if (count != 9)
        throw ValidationError("table file " + path + " line " +
                              std::to_string(line_no) +
                              ": incomplete cell for " + group.first + "__" +
                              group.second);
    table.rows.push_back(std::move(row));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Heatmaps
// ---------------------------------------------------------------------------

namespace {

const char* kHeatRows[9] = {"gamma", "R",   "omega", "y",   "phi",
                            "c",     "x",   "ssr",   "anom"};

HeatmapData heatmap_from_values(const std::vector<std::string>& wafer_ids,
                                const Eigen::MatrixXd& values) {
  HeatmapData hm;
  hm.row_labels.assign(kHeatRows, kHeatRows + 9);
  hm.wafer_ids = wafer_ids;
  hm.z = standardize(values).transpose();  // 9 x wafers
  return hm;
}

}  // namespace

HeatmapData heatmap_matrix(const TripleResult& triple) {
  const std::size_t w = triple.records.size();
  if (w < 2)
    throw std::domain_error("heatmap_matrix: need at least 2 wafers");
  Eigen::MatrixXd values(static_cast<Eigen::Index>(w), 9);
  std::vector<std::string> ids;
  ids.reserve(w);
  for (std::size_t i = 0; i < w; ++i) {
    const AnomalyRecord& rec = triple.records[i];
    for (int d = 0; d < 7; ++d)
      values(static_cast<Eigen::Index>(i), d) = rec.signature[d];
    values(static_cast<Eigen::Index>(i), 7) = rec.ssr;
    values(static_cast<Eigen::Index>(i), 8) = rec.score;
    ids.push_back(rec.wafer_id);
  }
  return heatmap_from_values(ids, values);
}

HeatmapData heatmap_from_table(const SignatureTable& table,
                               const std::string& sensor,
                               const std::string& step) {
  std::vector<std::string> ids;
  std::vector<const TableCell*> cells;
  for (const TableRow& row : table.rows) {
    const auto it = row.cells.find({sensor, step});
    if (it == row.cells.end()) continue;
    ids.push_back(row.wafer_id);
    cells.push_back(&it->second);
  }
  if (cells.size() < 2)
    throw ValidationError("heatmap: fewer than 2 wafers carry sensor '" +
                          sensor + "' step '" + step + "'");
  Eigen::MatrixXd values(static_cast<Eigen::Index>(cells.size()), 9);
  for (std::size_t i = 0; i < cells.size(); ++i)
    for (int f = 0; f < 9; ++f)
      values(static_cast<Eigen::Index>(i), f) = cell_field(*cells[i], f);
  return heatmap_from_values(ids, values);
}

std::string heatmap_csv_string(const HeatmapData& hm) {
  std::string out = "param";
  for (const std::string& id : hm.wafer_ids) out += "," + id;
  out += "\n";
  for (std::size_t r = 0; r < hm.row_labels.size(); ++r) {
    out += hm.row_labels[r];
    for (Eigen::Index c = 0; c < hm.z.cols(); ++c)
      out += "," + fmt_double(hm.z(static_cast<Eigen::Index>(r), c));
    out += "\n";
  }
  return out;
}

namespace {

std::string heat_color(double z) {
  // Diverging blue-white-red, clipped at |z| = 4.
  const double t = std::clamp(z, -4.0, 4.0) / 4.0;
  const auto lerp = [](double a, double b, double f) {
    return a + (b - a) * f;
  };
  double r, g, b;
  if (t < 0.0) {
    r = lerp(247.0, 33.0, -t);
    g = lerp(247.0, 102.0, -t);
    b = lerp(247.0, 172.0, -t);
  } else {
    r = lerp(247.0, 178.0, t);
    g = lerp(247.0, 24.0, t);
    b = lerp(247.0, 43.0, t);
  }
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", static_cast<int>(r),
                static_cast<int>(g), static_cast<int>(b));
  return buf;
}

}  // namespace

std::string heatmap_svg_string(const HeatmapData& hm,
                               const std::string& title) {
  const int rows = static_cast<int>(hm.row_labels.size());
  const int cols = static_cast<int>(hm.wafer_ids.size());
  const int cell_w = std::max(3, std::min(16, 1200 / std::max(cols, 1)));
  const int cell_h = 22;
  const int left = 70, top = 34, bottom = 26;
  const int width = left + cols * cell_w + 10;
  const int height = top + rows * cell_h + bottom;

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << left << "\" y=\"20\" font-family=\"sans-serif\" "
      << "font-size=\"13\">" << title << "</text>\n";
  for (int r = 0; r < rows; ++r) {
    svg << "<text x=\"" << left - 6 << "\" y=\""
        << top + r * cell_h + cell_h / 2 + 4
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
        << "font-size=\"11\">" << hm.row_labels[r] << "</text>\n";
    for (int c = 0; c < cols; ++c) {
      svg << "<rect x=\"" << left + c * cell_w << "\" y=\"" << top + r * cell_h
          << "\" width=\"" << cell_w << "\" height=\"" << cell_h
          << "\" fill=\"" << heat_color(hm.z(r, c)) << "\"/>\n";
    }
  }
  const int tick = std::max(1, cols / 12);
  for (int c = 0; c < cols; c += tick)
    svg << "<text x=\"" << left + c * cell_w + cell_w / 2 << "\" y=\""
        << top + rows * cell_h + 16
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
        << "font-size=\"9\">" << c << "</text>\n";
  svg << "</svg>\n";
  return svg.str();
}

void render_heatmap(const HeatmapData& hm, const std::string& title,
                    const std::string& out_prefix) {
  const auto write = [](const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot open for writing: " + path);
    out << content;
    if (!out) throw std::runtime_error("write failed: " + path);
  };
  write(out_prefix + ".csv", heatmap_csv_string(hm));
  write(out_prefix + ".svg", heatmap_svg_string(hm, title));
}

std::string records_csv_string(const TripleResult& triple,
                               const Dataset& dataset) {
  std::map<std::string, std::string> lots;
  const auto it = dataset.triples.find(triple.key);
  if (it != dataset.triples.end())
    for (const TraceSeries& tr : it->second) lots[tr.wafer_id] = tr.lot_id;

  std::string out = "wafer,lot,seq,score,ssr";
  for (int d = 0; d < 7; ++d) out += std::string(",grad_") + kParamNames[d];
  for (int d = 0; d < 7; ++d) out += std::string(",sig_") + kParamNames[d];
  out += "\n";
  for (const AnomalyRecord& rec : triple.records) {
    out += rec.wafer_id + "," + lots[rec.wafer_id] + "," +
           std::to_string(rec.sequence_index) + "," + fmt_double(rec.score) +
           "," + fmt_double(rec.ssr);
    for (int d = 0; d < 7; ++d) out += "," + fmt_double(rec.gradient[d]);
    for (int d = 0; d < 7; ++d) out += "," + fmt_double(rec.signature[d]);
    out += "\n";
  }
  return out;
}

}  // namespace shapesig
