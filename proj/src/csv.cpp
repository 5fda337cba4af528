#include "shapesig/csv.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <tuple>

#include "shapesig/errors.hpp"

namespace shapesig {

std::size_t Dataset::wafer_count() const {
  std::size_t n = 0;
  for (const auto& [key, wafers] : triples) n += wafers.size();
  return n;
}

std::string fmt_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace {

bool parse_double(std::string_view text, double& out) {
  const char* begin = text.data();
  const char* end = begin + text.size();
  const auto res = std::from_chars(begin, end, out);
  return res.ec == std::errc() && res.ptr == end && std::isfinite(out);
}

bool parse_int(std::string_view text, long& out) {
  const char* begin = text.data();
  const char* end = begin + text.size();
  const auto res = std::from_chars(begin, end, out);
  return res.ec == std::errc() && res.ptr == end;
}

// Days since 1970-01-01 for a civil date (valid for the Gregorian calendar).
long days_from_civil(long y, unsigned m, unsigned d) {
  y -= m <= 2;
  const long era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<long>(doe) - 719468;
}

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      out.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

}  // namespace

double parse_timestamp(const std::string& text) {
  double seconds;
  if (parse_double(text, seconds)) return seconds;

  int year, month, day, hour, minute;
  double sec;
  char sep;
  int consumed = 0;
  if (std::sscanf(text.c_str(), "%4d-%2d-%2d%c%2d:%2d:%lf%n", &year, &month,
                  &day, &sep, &hour, &minute, &sec, &consumed) == 7 &&
      (sep == 'T' || sep == ' ')) {
    std::string rest = text.substr(static_cast<std::size_t>(consumed));
    if ((rest.empty() || rest == "Z") && month >= 1 && month <= 12 &&
        day >= 1 && day <= 31 && hour >= 0 && hour < 24 && minute >= 0 &&
        minute < 60 && sec >= 0.0 && sec < 61.0) {
      const long days = days_from_civil(year, static_cast<unsigned>(month),
                                        static_cast<unsigned>(day));
      return static_cast<double>(days) * 86400.0 + hour * 3600.0 +
             minute * 60.0 + sec;
    }
  }
  throw ValidationError("unparseable timestamp: '" + text + "'");
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

namespace {

struct RawWafer {
  std::string lot;
  long seq = 0;
  std::vector<std::pair<double, double>> points;  // (t, value), file order
  std::vector<std::size_t> point_lines;
};

using WaferKey = std::tuple<std::string, std::string, std::string, std::string>;

}  // namespace

Dataset ingest_csv_text(std::string_view text, const IngestOptions& opts) {
  Dataset ds;
  IngestReport& report = ds.report;

  std::size_t pos = 0;
  std::size_t line_no = 0;
  bool have_header = false;
  int col[8] = {-1, -1, -1, -1, -1, -1, -1, -1};
  static const char* kColumns[8] = {"tool", "sensor", "step",      "wafer",
                                    "lot",  "seq",    "timestamp", "value"};
  std::size_t n_cols = 0;

  std::map<WaferKey, RawWafer> wafers;

  const auto reject = [&](std::size_t line, const std::string& why) {
    ++report.rejected;
    if (report.diagnostics.size() < 200)
      report.diagnostics.push_back("line " + std::to_string(line) + ": " + why);
  };

  while (pos <= text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = text.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (trim(line).empty()) {
      if (pos > text.size()) break;
      continue;
    }

    const std::vector<std::string_view> fields = split_csv(line);
    if (!have_header) {
      for (std::size_t i = 0; i < fields.size(); ++i) {
        const std::string_view name = trim(fields[i]);
        for (int c = 0; c < 8; ++c)
          if (name == kColumns[c]) col[c] = static_cast<int>(i);
      }
      for (int c = 0; c < 8; ++c)
        if (col[c] < 0)
          throw ValidationError(std::string("missing required column '") +
                                kColumns[c] + "' in header");
      n_cols = fields.size();
      have_header = true;
      continue;
    }

    ++report.total_rows;
    if (fields.size() != n_cols) {
      reject(line_no, "expected " + std::to_string(n_cols) + " fields, got " +
                          std::to_string(fields.size()));
      continue;
    }
    const std::string tool(trim(fields[static_cast<std::size_t>(col[0])]));
    const std::string sensor(trim(fields[static_cast<std::size_t>(col[1])]));
    const std::string step(trim(fields[static_cast<std::size_t>(col[2])]));
    const std::string wafer(trim(fields[static_cast<std::size_t>(col[3])]));
    const std::string lot(trim(fields[static_cast<std::size_t>(col[4])]));
    const std::string seq_text(trim(fields[static_cast<std::size_t>(col[5])]));
    const std::string ts_text(trim(fields[static_cast<std::size_t>(col[6])]));
    const std::string val_text(trim(fields[static_cast<std::size_t>(col[7])]));

    if (tool.empty() || sensor.empty() || step.empty() || wafer.empty()) {
      reject(line_no, "empty identifier");
      continue;
    }
    long seq;
    if (!parse_int(seq_text, seq)) {
      reject(line_no, "bad seq '" + seq_text + "'");
      continue;
    }
    double ts;
    try {
      ts = parse_timestamp(ts_text);
    } catch (const ValidationError& e) {
      reject(line_no, e.what());
      continue;
    }
    double value;
    if (!parse_double(val_text, value)) {
      reject(line_no, "bad value '" + val_text + "'");
      continue;
    }

    RawWafer& rw = wafers[{tool, sensor, step, wafer}];
    if (rw.points.empty()) {
      rw.lot = lot;
      rw.seq = seq;
    } else if (rw.lot != lot) {
      reject(line_no, "wafer '" + wafer + "' listed under two lots");
      continue;
    } else if (rw.seq != seq) {
      reject(line_no, "wafer '" + wafer + "' listed with two seq values");
      continue;
    }
    rw.points.emplace_back(ts, value);
    rw.point_lines.push_back(line_no);
  }
  if (!have_header) throw ValidationError("empty input: no header row");

  // Sort each wafer by time and reject duplicate timestamps.
  std::map<TripleKey, std::vector<TraceSeries>> grouped;
  for (auto& [key, rw] : wafers) {
    std::vector<std::size_t> order(rw.points.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) {
                       return rw.points[a].first < rw.points[b].first;
                     });
    TraceSeries trace;
    trace.tool_id = std::get<0>(key);
    trace.sensor_id = std::get<1>(key);
    trace.step_id = std::get<2>(key);
    trace.wafer_id = std::get<3>(key);
    trace.lot_id = rw.lot;
    trace.sequence_index = static_cast<int>(rw.seq);
    for (std::size_t idx : order) {
      const auto& [t, v] = rw.points[idx];
      if (!trace.times.empty() && t == trace.times.back()) {
        reject(rw.point_lines[idx],
               "duplicate timestamp for wafer '" + trace.wafer_id + "'");
        continue;
      }
      trace.times.push_back(t);
      trace.values.push_back(v);
    }
    report.accepted += trace.times.size();
    grouped[{trace.tool_id, trace.sensor_id, trace.step_id}].push_back(
        std::move(trace));
  }

  if (report.total_rows > 0 &&
      static_cast<double>(report.rejected) >
          0.01 * static_cast<double>(report.total_rows) &&
      !opts.force) {
    std::string msg = "rejected " + std::to_string(report.rejected) + " of " +
                      std::to_string(report.total_rows) +
                      " rows (>1%); pass force to continue";
    for (std::size_t i = 0; i < std::min<std::size_t>(10, report.diagnostics.size()); ++i)
      msg += "\n  " + report.diagnostics[i];
    throw ValidationError(msg);
  }

  // Normalize wafer order and sequence indices per triple; apply the lot
  // fallback when the lot column was left empty.
  for (auto& [key, list] : grouped) {
    std::stable_sort(list.begin(), list.end(),
                     [](const TraceSeries& a, const TraceSeries& b) {
                       return std::tie(a.sequence_index, a.wafer_id) <
                              std::tie(b.sequence_index, b.wafer_id);
                     });
    bool all_lots_empty = true;
    for (const TraceSeries& tr : list)
      if (!tr.lot_id.empty()) all_lots_empty = false;
    for (std::size_t i = 0; i < list.size(); ++i) {
      list[i].sequence_index = static_cast<int>(i);
      if (all_lots_empty) {
        if (opts.lot_size_fallback < 1)
          throw ValidationError("triple " + key.str() +
                                " has no lot values; provide a lot-size "
                                "fallback to group consecutive wafers");
        list[i].lot_id =
            "lot" + std::to_string(i / static_cast<std::size_t>(
                                           opts.lot_size_fallback));
      } else if (list[i].lot_id.empty()) {
        throw ValidationError("triple " + key.str() +
                              " mixes empty and non-empty lot values");
      }
      list[i].validate();
    }
  }
  ds.triples = std::move(grouped);
  return ds;
}

Dataset ingest_csv(const std::string& path, const IngestOptions& opts) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open dataset file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return ingest_csv_text(buf.str(), opts);
}

Dataset dataset_from_traces(const std::vector<TraceSeries>& traces) {
  Dataset ds;
  for (const TraceSeries& tr : traces) {
    tr.validate();
    ds.triples[{tr.tool_id, tr.sensor_id, tr.step_id}].push_back(tr);
    ds.report.total_rows += tr.size();
    ds.report.accepted += tr.size();
  }
  for (auto& [key, list] : ds.triples) {
    std::stable_sort(list.begin(), list.end(),
                     [](const TraceSeries& a, const TraceSeries& b) {
                       return std::tie(a.sequence_index, a.wafer_id) <
                              std::tie(b.sequence_index, b.wafer_id);
                     });
    for (std::size_t i = 0; i < list.size(); ++i)
      list[i].sequence_index = static_cast<int>(i);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Writers
// ---------------------------------------------------------------------------

std::string dataset_csv_string(const SyntheticDataset& ds) {
  std::string out = "tool,sensor,step,wafer,lot,seq,timestamp,value\n";
  for (const TraceSeries& tr : ds.traces) {
    const std::string prefix = tr.tool_id + "," + tr.sensor_id + "," +
                               tr.step_id + "," + tr.wafer_id + "," +
                               tr.lot_id + "," +
                               std::to_string(tr.sequence_index) + ",";
    for (std::size_t i = 0; i < tr.times.size(); ++i) {
      out += prefix;
      out += fmt_double(tr.times[i]);
      out += ',';
      out += fmt_double(tr.values[i]);
      out += '\n';
    }
  }
  return out;
}

namespace {

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot open for writing: " + path);
  out << content;
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace

void write_dataset_csv(const SyntheticDataset& ds, const std::string& path) {
  write_text_file(path, dataset_csv_string(ds));
}

std::string ground_truth_csv_string(const SyntheticDataset& ds) {
  static const char* kControlNames[6] = {"k_p", "k_c", "tau_p",
                                         "tau_I", "q1", "q2"};
  std::string out = "wafer,param,true_value\n";
  const auto qualified = [](const std::string& tool, const std::string& sensor,
                            const std::string& step, const std::string& wafer) {
    return tool + ":" + sensor + ":" + step + ":" + wafer;
  };
  for (const WaferTruth& wt : ds.ground_truth) {
    const std::string id = qualified(wt.tool, wt.sensor, wt.step, wt.wafer);
    if (wt.signature)
      for (int d = 0; d < 7; ++d)
        out += id + "," + kParamNames[d] + "," +
               fmt_double((*wt.signature)[d]) + "\n";
    if (wt.control) {
      const ControlParams& cp = *wt.control;
      const double vals[6] = {cp.k_p, cp.k_c, cp.tau_p, cp.tau_I, cp.q1, cp.q2};
      for (int d = 0; d < 6; ++d)
        out += id + "," + kControlNames[d] + "," + fmt_double(vals[d]) + "\n";
    }
  }
  for (const InjectedAnomaly& inj : ds.injected)
    out += qualified(inj.tool, inj.sensor, inj.step, inj.wafer) +
           ",injected:" + inj.param + "," + fmt_double(inj.delta) + "\n";
  return out;
}

void write_ground_truth_csv(const SyntheticDataset& ds,
                            const std::string& path) {
  write_text_file(path, ground_truth_csv_string(ds));
}

// ---------------------------------------------------------------------------
// Normal-model files (flat key = value text)
// ---------------------------------------------------------------------------

void write_normal_model(const NormalModel& nm, const std::string& path) {
  std::string out;
  out += "tool = " + nm.tool + "\n";
  out += "sensor = " + nm.sensor + "\n";
  out += "step = " + nm.step + "\n";
  out += std::string("prior_exponent = ") +
         (nm.prior_exponent == PriorExponent::variance ? "variance" : "std") +
         "\n";
  out += "sigma = " + fmt_double(nm.sigma_star) + "\n";
  for (int d = 0; d < 7; ++d)
    out += std::string("mu_") + kParamNames[d] + " = " +
           fmt_double(nm.mu_star[d]) + "\n";
  for (int d = 0; d < 7; ++d)
    out += std::string("sigma_s_") + kParamNames[d] + " = " +
           fmt_double(nm.sigma_star_s[d]) + "\n";
  out += "source_lots = ";
  for (std::size_t i = 0; i < nm.source_lots.size(); ++i) {
    if (i) out += ",";
    out += nm.source_lots[i];
  }
  out += "\n";
  write_text_file(path, out);
}

NormalModel read_normal_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open normal-model file: " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view trimmed = trim(line);
    if (trimmed.empty() || trimmed.front() == '#') continue;
    const std::size_t eq = trimmed.find('=');
    if (eq == std::string_view::npos)
      throw ValidationError("normal-model file " + path + " line " +
                            std::to_string(line_no) + ": expected key = value");
    kv[std::string(trim(trimmed.substr(0, eq)))] =
        std::string(trim(trimmed.substr(eq + 1)));
  }

  const auto need = [&](const std::string& key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end())
      throw ValidationError("normal-model file " + path + " missing key '" +
                            key + "'");
    return it->second;
  };
  const auto need_double = [&](const std::string& key) {
    double v;
    if (!parse_double(need(key), v))
      throw ValidationError("normal-model file " + path + ": bad number for '" +
                            key + "'");
    return v;
  };

  NormalModel nm;
  nm.tool = need("tool");
  nm.sensor = need("sensor");
  nm.step = need("step");
  nm.prior_exponent = need("prior_exponent") == "std"
                          ? PriorExponent::std_dev
                          : PriorExponent::variance;
  nm.sigma_star = need_double("sigma");
  for (int d = 0; d < 7; ++d) {
    nm.mu_star[d] = need_double(std::string("mu_") + kParamNames[d]);
    nm.sigma_star_s[d] = need_double(std::string("sigma_s_") + kParamNames[d]);
  }
  std::string lots = need("source_lots");
  std::size_t start = 0;
  while (start <= lots.size()) {
    std::size_t comma = lots.find(',', start);
    if (comma == std::string::npos) comma = lots.size();
    const std::string lot(trim(std::string_view(lots).substr(start, comma - start)));
    if (!lot.empty()) nm.source_lots.push_back(lot);
    start = comma + 1;
  }
  nm.validate();
  return nm;
}

}  // namespace shapesig
