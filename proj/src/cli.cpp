#include <cctype>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "shapesig/errors.hpp"
#include "shapesig/pipeline.hpp"
#include "shapesig/simulate.hpp"

namespace shapesig {

namespace {

std::map<std::string, std::string> load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file: " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ss(line);
    std::string key, eq, value;
    if (!(ss >> key)) continue;
    if (!(ss >> eq) || eq != "=" || !(ss >> value))
      throw ValidationError("config file " + path + " line " +
                            std::to_string(line_no) + ": expected key = value");
    kv[key] = value;
  }
  return kv;
}

// Shared pipeline/ingest options with config-file < CLI-flag precedence.
struct CommonOptions {
  std::string config_path;
  PipelineConfig pcfg;
  IngestOptions ingest;

  CLI::App* app = nullptr;

  void attach(CLI::App& sub) {
    app = &sub;
    sub.add_option("--config", config_path,
                   "flat key = value config file (CLI flags win)");
    sub.add_option("--newton-tol", pcfg.fit.newton_tol);
    sub.add_option("--newton-max-iters", pcfg.fit.newton_max_iters);
    sub.add_option("--bcd-tol", pcfg.fit.bcd_tol);
    sub.add_option("--bcd-max-rounds", pcfg.fit.bcd_max_rounds);
    sub.add_option("--damping-init", pcfg.fit.damping_init);
    sub.add_option("--sigma-floor", pcfg.fit.sigma_floor);
    sub.add_option("--sigma-s-floor", pcfg.fit.sigma_s_floor);
    sub.add_option("--multistart", pcfg.fit.multistart_count);
    sub.add_option("--prior-exponent", prior_exponent_,
                   "variance (default) or std")
        ->check(CLI::IsMember({"variance", "std"}));
    sub.add_option("--initial-lots", pcfg.initial_lots);
    sub.add_option("--workers", pcfg.workers);
    sub.add_option("--z-spike", pcfg.z_spike);
    sub.add_option("--z-change", pcfg.z_change);
    sub.add_option("--change-window", pcfg.change_window);
    sub.add_option("--lot-size", ingest.lot_size_fallback,
                   "group consecutive wafers when the lot column is empty");
    sub.add_flag("--force", ingest.force, "tolerate >1% rejected rows");
  }

  // Fill any option the CLI did not set from the config file.
  void finalize() {
    if (!config_path.empty()) {
      const auto kv = load_config_file(config_path);
      const auto take = [&](const std::string& key, const std::string& flag,
                            auto& target) {
        const auto it = kv.find(key);
        if (it == kv.end()) return;
        if (app->count(flag) > 0) return;  // CLI wins
        std::istringstream ss(it->second);
        ss >> target;
        if (ss.fail())
          throw ValidationError("config key '" + key + "': bad value '" +
                                it->second + "'");
      };
      take("newton_tol", "--newton-tol", pcfg.fit.newton_tol);
      take("newton_max_iters", "--newton-max-iters", pcfg.fit.newton_max_iters);
      take("bcd_tol", "--bcd-tol", pcfg.fit.bcd_tol);
      take("bcd_max_rounds", "--bcd-max-rounds", pcfg.fit.bcd_max_rounds);
      take("damping_init", "--damping-init", pcfg.fit.damping_init);
      take("sigma_floor", "--sigma-floor", pcfg.fit.sigma_floor);
      take("sigma_s_floor", "--sigma-s-floor", pcfg.fit.sigma_s_floor);
      take("multistart_count", "--multistart", pcfg.fit.multistart_count);
      take("prior_exponent", "--prior-exponent", prior_exponent_);
      take("initial_lots", "--initial-lots", pcfg.initial_lots);
      take("workers", "--workers", pcfg.workers);
      take("z_spike", "--z-spike", pcfg.z_spike);
      take("z_change", "--z-change", pcfg.z_change);
      take("change_window", "--change-window", pcfg.change_window);
      take("lot_size", "--lot-size", ingest.lot_size_fallback);
      int force_int = -1;
      take("force", "--force", force_int);
      if (force_int >= 0) ingest.force = force_int != 0;
      static const std::set<std::string> known = {
          "newton_tol", "newton_max_iters", "bcd_tol", "bcd_max_rounds",
          "damping_init", "sigma_floor", "sigma_s_floor", "multistart_count",
          "prior_exponent", "initial_lots", "workers", "z_spike", "z_change",
          "change_window", "lot_size", "force"};
      for (const auto& entry : kv)
        if (!known.count(entry.first))
          throw ValidationError("config file: unknown key '" + entry.first +
                                "'");
    }
    if (prior_exponent_ == "std")
      pcfg.fit.prior_exponent = PriorExponent::std_dev;
    pcfg.fit.validate();
    if (pcfg.workers < 1) throw ValidationError("workers must be >= 1");
    if (pcfg.initial_lots < 1) throw ValidationError("initial_lots must be >= 1");
  }

 private:
  std::string prior_exponent_ = "variance";
};

void print_triple_status(const RunResult& run, std::ostream& os) {
  for (const TripleResult& tr : run.triples) {
    if (tr.ok) {
      os << "fitted " << tr.key.str() << ": " << tr.records.size()
         << " wafers, " << tr.lots.size() << " lots";
      if (!tr.spikes.empty()) {
        os << ", spikes at";
        for (int i : tr.spikes) os << " " << i;
      }
      if (!tr.changepoints.empty()) {
        os << ", change points at";
        for (int i : tr.changepoints) os << " " << i;
      }
      os << "\n";
    } else {
      os << "skipped " << tr.key.str() << ": " << tr.error << "\n";
    }
    for (const std::string& note : tr.notes)
      os << "  note: " << note << "\n";
  }
}

// Locates the triple containing a wafer; the explicit ids win when given.
const std::pair<const TripleKey, std::vector<TraceSeries>>* find_triple(
    const Dataset& ds, const std::string& tool, const std::string& sensor,
    const std::string& step, const std::string& wafer) {
  const std::pair<const TripleKey, std::vector<TraceSeries>>* found = nullptr;
  for (const auto& entry : ds.triples) {
    const auto& [key, wafers] = entry;
    if (!tool.empty() && key.tool != tool) continue;
    if (!sensor.empty() && key.sensor != sensor) continue;
    if (!step.empty() && key.step != step) continue;
    if (!wafer.empty()) {
      bool has = false;
      for (const TraceSeries& tr : wafers)
        if (tr.wafer_id == wafer) has = true;
      if (!has) continue;
    }
    if (found)
      throw ValidationError(
          "selection matches more than one triple; pass --tool/--sensor/--step");
    found = &entry;
  }
  if (!found) throw ValidationError("no triple matches the selection");
  return found;
}

int run_simulate(const std::string& plan_path, const std::string& out_path,
                 std::string truth_path) {
  const GenerationPlan plan = plan_from_json_file(plan_path);
  const SyntheticDataset ds = make_dataset(plan);
  write_dataset_csv(ds, out_path);
  if (truth_path.empty()) truth_path = out_path + ".truth.csv";
  write_ground_truth_csv(ds, truth_path);
  std::size_t points = 0;
  for (const TraceSeries& tr : ds.traces) points += tr.size();
  std::cout << "wrote " << ds.traces.size() << " traces (" << points
            << " points) to " << out_path << "\n"
            << "wrote ground truth to " << truth_path << "\n";
  return 0;
}

int run_fit_cmd(const CommonOptions& opts, const std::string& input,
                const std::string& out_dir) {
  const Dataset ds = ingest_csv(input, opts.ingest);
  const RunResult run = run_fit(ds, opts.pcfg);
  print_triple_status(run, std::cout);
  const auto tables = build_tables(ds, run);
  for (const std::string& path : export_tables(tables, out_dir))
    std::cout << "wrote " << path << "\n";
  return 0;
}

int run_normal(const CommonOptions& opts, const std::string& input,
               const std::string& tool, const std::string& sensor,
               const std::string& step, const std::string& out_path) {
  const Dataset ds = ingest_csv(input, opts.ingest);
  const auto* entry = find_triple(ds, tool, sensor, step, "");
  const TripleResult tr = process_triple(entry->first, entry->second, opts.pcfg);
  if (!tr.ok) throw ValidationError("normal model failed: " + tr.error);
  write_normal_model(tr.normal, out_path);
  std::cout << "wrote normal model for " << entry->first.str() << " to "
            << out_path << "\n";
  return 0;
}

int run_score(const CommonOptions& opts, const std::string& input,
              const std::string& normal_path, const std::string& out_path) {
  const Dataset ds = ingest_csv(input, opts.ingest);
  const NormalModel nm = read_normal_model(normal_path);
  const TripleKey key{nm.tool, nm.sensor, nm.step};
  const auto it = ds.triples.find(key);
  if (it == ds.triples.end())
    throw ValidationError("dataset has no triple " + key.str() +
                          " matching the normal model");
  const TripleResult tr = process_triple(key, it->second, opts.pcfg, &nm);
  if (!tr.ok) throw ValidationError("scoring failed: " + tr.error);
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw ValidationError("cannot open for writing: " + out_path);
  out << records_csv_string(tr, ds);
  std::cout << "wrote " << tr.records.size() << " anomaly records to "
            << out_path << "\n";
  if (!tr.spikes.empty()) {
    std::cout << "spikes at sequence indices:";
    for (int i : tr.spikes) std::cout << " " << i;
    std::cout << "\n";
  }
  if (!tr.changepoints.empty()) {
    std::cout << "change points at sequence indices:";
    for (int i : tr.changepoints) std::cout << " " << i;
    std::cout << "\n";
  }
  return 0;
}

int run_deconstruct(const CommonOptions& opts, const std::string& input,
                    const std::string& tool, const std::string& sensor,
                    const std::string& step, const std::string& wafer,
                    const std::string& after,
                    const std::string& normal_path) {
  const Dataset ds = ingest_csv(input, opts.ingest);
  const auto* entry = find_triple(ds, tool, sensor, step, wafer);

  std::optional<NormalModel> preset;
  if (!normal_path.empty()) preset = read_normal_model(normal_path);
  const TripleResult tr = process_triple(entry->first, entry->second,
                                         opts.pcfg,
                                         preset ? &*preset : nullptr);
  if (!tr.ok) throw ValidationError("fit failed: " + tr.error);

  const auto record_of = [&](const std::string& id) -> const AnomalyRecord& {
    for (const AnomalyRecord& rec : tr.records)
      if (rec.wafer_id == id) return rec;
    throw ValidationError("wafer '" + id + "' not found in triple " +
                          entry->first.str());
  };
  const auto trace_of = [&](const std::string& id) -> const TraceSeries& {
    for (const TraceSeries& t : entry->second)
      if (t.wafer_id == id) return t;
    throw ValidationError("wafer '" + id + "' not found");
  };

  Vec7 gradient;
  const AnomalyRecord& rec = record_of(wafer);
  if (after.empty()) {
    gradient = rec.gradient;
  } else {
    const AnomalyRecord& rec_after = record_of(after);
    gradient = changepoint_gradient(rec.signature, rec_after.signature,
                                    trace_of(wafer), tr.normal);
  }
  for (const Contribution& contrib : rank_contributors(gradient))
    std::cout << contrib.param << " " << fmt_double(contrib.value) << "\n";
  return 0;
}

int run_heatmap(const std::string& table_path, const std::string& sensor,
                const std::string& step, const std::string& out_prefix) {
  const SignatureTable table = read_table_csv(table_path);
  const HeatmapData hm = heatmap_from_table(table, sensor, step);
  render_heatmap(hm, table.tool.empty()
                         ? sensor + "/" + step
                         : table.tool + "/" + sensor + "/" + step,
                 out_prefix);
  std::cout << "wrote " << out_prefix << ".csv and " << out_prefix << ".svg\n";
  return 0;
}

std::string sanitize_filename(const std::string& name) {
  std::string out = name;
  for (char& c : out)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.' && c != '-' &&
        c != '_')
      c = '_';
  return out;
}

int run_report(const CommonOptions& opts, const std::string& input,
               const std::string& out_dir) {
  namespace fs = std::filesystem;
  const Dataset ds = ingest_csv(input, opts.ingest);
  const RunResult run = run_fit(ds, opts.pcfg);
  fs::create_directories(out_dir);

  const auto tables = build_tables(ds, run);
  export_tables(tables, out_dir);

  std::ostringstream summary;
  summary << "ingest: " << ds.report.total_rows << " rows, "
          << ds.report.rejected << " rejected, " << ds.triples.size()
          << " triples, " << ds.wafer_count() << " wafers\n\n";
  for (const TripleResult& tr : run.triples) {
    summary << tr.key.str() << ":\n";
    if (!tr.ok) {
      summary << "  skipped: " << tr.error << "\n";
      continue;
    }
    const std::string base = sanitize_filename(
        tr.key.tool + "_" + tr.key.sensor + "_" + tr.key.step);
    const std::string records_path =
        (fs::path(out_dir) / ("records_" + base + ".csv")).string();
    {
      std::ofstream out(records_path, std::ios::binary);
      if (!out) throw ValidationError("cannot open for writing: " + records_path);
      out << records_csv_string(tr, ds);
    }
    write_normal_model(tr.normal,
                       (fs::path(out_dir) / ("normal_" + base + ".txt")).string());
    if (tr.records.size() >= 2)
      render_heatmap(heatmap_matrix(tr), tr.key.str(),
                     (fs::path(out_dir) / ("heatmap_" + base)).string());

    summary << "  wafers: " << tr.records.size()
            << ", lots: " << tr.lots.size() << "\n";
    for (const std::string& note : tr.notes) summary << "  note: " << note << "\n";
    std::vector<const AnomalyRecord*> top;
    for (const AnomalyRecord& rec : tr.records) top.push_back(&rec);
    std::stable_sort(top.begin(), top.end(),
                     [](const AnomalyRecord* a, const AnomalyRecord* b) {
                       return a->score > b->score;
                     });
    summary << "  top anomalies:";
    for (std::size_t i = 0; i < std::min<std::size_t>(3, top.size()); ++i)
      summary << " " << top[i]->wafer_id << " (score "
              << fmt_double(top[i]->score) << ")";
    summary << "\n";
    summary << "  spikes:";
    for (int i : tr.spikes) summary << " " << i;
    summary << "\n  change points:";
    for (int i : tr.changepoints) summary << " " << i;
    summary << "\n";
  }
  const std::string summary_path = (fs::path(out_dir) / "summary.txt").string();
  std::ofstream out(summary_path, std::ios::binary);
  if (!out) throw ValidationError("cannot open for writing: " + summary_path);
  out << summary.str();
  std::cout << summary.str();
  std::cout << "report written to " << out_dir << "\n";
  return 0;
}

}  // namespace

int cli(int argc, const char* const* argv) {
  CLI::App app{"grey-box process-control mining toolkit"};
  app.require_subcommand(1);

  // simulate
  auto* sim = app.add_subcommand("simulate",
                                 "generate a synthetic dataset from a plan");
  std::string plan_path, sim_out, sim_truth;
  sim->add_option("--plan", plan_path, "generation plan JSON")->required();
  sim->add_option("--out", sim_out, "dataset CSV to write")->required();
  sim->add_option("--truth", sim_truth,
                  "ground-truth sidecar path (default <out>.truth.csv)");

  // fit
  auto* fit_cmd = app.add_subcommand("fit", "fit signature tables");
  std::string fit_input, fit_out_dir;
  fit_cmd->add_option("--input", fit_input, "dataset CSV")->required();
  fit_cmd->add_option("--out-dir", fit_out_dir, "output directory")->required();
  CommonOptions fit_opts;
  fit_opts.attach(*fit_cmd);

  // normal
  auto* normal_cmd =
      app.add_subcommand("normal", "fit and save a normal model");
  std::string nm_input, nm_tool, nm_sensor, nm_step, nm_out;
  normal_cmd->add_option("--input", nm_input, "dataset CSV")->required();
  normal_cmd->add_option("--tool", nm_tool);
  normal_cmd->add_option("--sensor", nm_sensor);
  normal_cmd->add_option("--step", nm_step);
  normal_cmd->add_option("--out", nm_out, "normal-model file")->required();
  CommonOptions normal_opts;
  normal_opts.attach(*normal_cmd);

  // score
  auto* score_cmd =
      app.add_subcommand("score", "score a dataset against a normal model");
  std::string sc_input, sc_normal, sc_out;
  score_cmd->add_option("--input", sc_input, "dataset CSV")->required();
  score_cmd->add_option("--normal", sc_normal, "normal-model file")->required();
  score_cmd->add_option("--out", sc_out, "anomaly records CSV")->required();
  CommonOptions score_opts;
  score_opts.attach(*score_cmd);

  // deconstruct
  auto* dec_cmd = app.add_subcommand(
      "deconstruct", "rank parameter contributions for a wafer or pair");
  std::string dc_input, dc_tool, dc_sensor, dc_step, dc_wafer, dc_after,
      dc_normal;
  dec_cmd->add_option("--input", dc_input, "dataset CSV")->required();
  dec_cmd->add_option("--tool", dc_tool);
  dec_cmd->add_option("--sensor", dc_sensor);
  dec_cmd->add_option("--step", dc_step);
  dec_cmd->add_option("--wafer", dc_wafer, "wafer id")->required();
  dec_cmd->add_option("--after", dc_after,
                      "wafer after a change point (Taylor variant)");
  dec_cmd->add_option("--normal", dc_normal, "optional normal-model file");
  CommonOptions dec_opts;
  dec_opts.attach(*dec_cmd);

  // heatmap
  auto* heat_cmd =
      app.add_subcommand("heatmap", "render a heatmap from a signature table");
  std::string hm_table, hm_sensor, hm_step, hm_prefix;
  heat_cmd->add_option("--table", hm_table, "signature table CSV")->required();
  heat_cmd->add_option("--sensor", hm_sensor)->required();
  heat_cmd->add_option("--step", hm_step)->required();
  heat_cmd->add_option("--out-prefix", hm_prefix, "output path prefix")
      ->required();

  // report
  auto* rep_cmd = app.add_subcommand("report", "full run summary");
  std::string rp_input, rp_out_dir;
  rep_cmd->add_option("--input", rp_input, "dataset CSV")->required();
  rep_cmd->add_option("--out-dir", rp_out_dir, "output directory")->required();
  CommonOptions rep_opts;
  rep_opts.attach(*rep_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (sim->parsed()) return run_simulate(plan_path, sim_out, sim_truth);
    if (fit_cmd->parsed()) {
      fit_opts.finalize();
      return run_fit_cmd(fit_opts, fit_input, fit_out_dir);
    }
    if (normal_cmd->parsed()) {
      normal_opts.finalize();
      return run_normal(normal_opts, nm_input, nm_tool, nm_sensor, nm_step,
                        nm_out);
    }
    if (score_cmd->parsed()) {
      score_opts.finalize();
      return run_score(score_opts, sc_input, sc_normal, sc_out);
    }
    if (dec_cmd->parsed()) {
      dec_opts.finalize();
      return run_deconstruct(dec_opts, dc_input, dc_tool, dc_sensor, dc_step,
                             dc_wafer, dc_after, dc_normal);
    }
    if (heat_cmd->parsed())
      return run_heatmap(hm_table, hm_sensor, hm_step, hm_prefix);
    if (rep_cmd->parsed()) {
      rep_opts.finalize();
      return run_report(rep_opts, rp_input, rp_out_dir);
    }
    return 1;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::domain_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 2;
  }
}

int cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("shapesig");
  for (const std::string& a : args) argv.push_back(a.c_str());
  return cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace shapesig
