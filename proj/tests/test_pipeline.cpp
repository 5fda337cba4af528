#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "shapesig/csv.hpp"
#include "shapesig/errors.hpp"
#include "shapesig/pipeline.hpp"
#include "shapesig/simulate.hpp"
#include "test_util.hpp"

using namespace shapesig;

namespace {

GenerationPlan small_plan(std::uint64_t seed, int lots = 5, int wpl = 2) {
  GenerationPlan plan;
  plan.seed = seed;
  TriplePlan tp;
  tp.tool = "T1";
  tp.sensor = "S1";
  tp.step = "K1";
  tp.lots = lots;
  tp.wafers_per_lot = wpl;
  tp.base_signature = ShapeSignature{0.5, 1.2, 1.0, 6.0, 0.1, 0.08, 0.0};
  tp.samples = 80;
  tp.dt_sample = 0.15;
  plan.triples.push_back(tp);
  return plan;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace

TEST_CASE("ingest: empty file with header yields an empty dataset") {
  const Dataset ds =
      ingest_csv_text("tool,sensor,step,wafer,lot,seq,timestamp,value\n");
  CHECK(ds.triples.empty());
  CHECK(ds.report.total_rows == 0);
}

TEST_CASE("ingest: simulator output round-trips exactly") {
  const SyntheticDataset synth = make_dataset(small_plan(3));
  const Dataset ds = ingest_csv_text(dataset_csv_string(synth));
  REQUIRE(ds.triples.size() == 1);
  const auto& wafers = ds.triples.begin()->second;
  REQUIRE(wafers.size() == synth.traces.size());
  for (std::size_t i = 0; i < wafers.size(); ++i) {
    CHECK(wafers[i].wafer_id == synth.traces[i].wafer_id);
    CHECK(wafers[i].lot_id == synth.traces[i].lot_id);
    CHECK(wafers[i].sequence_index == synth.traces[i].sequence_index);
    CHECK(wafers[i].times == synth.traces[i].times);
    CHECK(wafers[i].values == synth.traces[i].values);
  }
}

TEST_CASE("ingest: duplicates, bad rows, and the 1% gate") {
  const std::string header = "tool,sensor,step,wafer,lot,seq,timestamp,value\n";
  std::string body;
  for (int i = 0; i < 300; ++i)
    body += "T1,S1,K1,w0,lot0,0," + std::to_string(0.1 * i) + ",1.5\n";

  // A duplicate timestamp row is rejected and counted.
  const Dataset dup = ingest_csv_text(header + body + "T1,S1,K1,w0,lot0,0,0.0,9\n");
  CHECK(dup.report.rejected == 1);
  CHECK(dup.triples.begin()->second[0].size() == 300);
  CHECK(!dup.report.diagnostics.empty());

  // Over 1% malformed rows is fatal without force.
  std::string bad = header + body;
  for (int i = 0; i < 10; ++i) bad += "T1,S1,K1,w0,lot0,0,not_a_time,1.5\n";
  CHECK_THROWS_AS(ingest_csv_text(bad), ValidationError);
  IngestOptions force;
  force.force = true;
  const Dataset forced = ingest_csv_text(bad, force);
  CHECK(forced.report.rejected == 10);

  // Missing required column is always fatal.
  CHECK_THROWS_AS(ingest_csv_text("tool,sensor,step,wafer,lot,seq,value\n"),
                  ValidationError);
}

TEST_CASE("ingest: ISO-8601 timestamps and non-uniform sampling") {
  const std::string text =
      "tool,sensor,step,wafer,lot,seq,timestamp,value\n"
      "T1,S1,K1,w0,lot0,0,2021-03-05T12:00:00Z,1.0\n"
      "T1,S1,K1,w0,lot0,0,2021-03-05T12:00:01.5Z,2.0\n"
      "T1,S1,K1,w0,lot0,0,2021-03-05 12:00:04,3.0\n";
  const Dataset ds = ingest_csv_text(text);
  const TraceSeries& tr = ds.triples.begin()->second[0];
  REQUIRE(tr.size() == 3);
  CHECK(tr.times[1] - tr.times[0] == doctest::Approx(1.5).epsilon(1e-12));
  CHECK(tr.times[2] - tr.times[0] == doctest::Approx(4.0).epsilon(1e-12));

  CHECK(parse_timestamp("12.25") == 12.25);
  CHECK(parse_timestamp("1970-01-01T00:00:00Z") == 0.0);
  CHECK(parse_timestamp("1970-01-02T00:00:00") == 86400.0);
  CHECK_THROWS_AS(parse_timestamp("yesterday"), ValidationError);
}

TEST_CASE("ingest: lot fallback groups consecutive wafers") {
  std::string text = "tool,sensor,step,wafer,lot,seq,timestamp,value\n";
  for (int w = 0; w < 6; ++w)
    for (int i = 0; i < 3; ++i)
      text += "T1,S1,K1,w" + std::to_string(w) + ",," + std::to_string(w) +
              "," + std::to_string(i) + ",1.0\n";
  CHECK_THROWS_AS(ingest_csv_text(text), ValidationError);
  IngestOptions opts;
  opts.lot_size_fallback = 3;
  const Dataset ds = ingest_csv_text(text, opts);
  const auto& wafers = ds.triples.begin()->second;
  CHECK(wafers[0].lot_id == "lot0");
  CHECK(wafers[2].lot_id == "lot0");
  CHECK(wafers[3].lot_id == "lot1");
}

TEST_CASE("run_fit: identical lots score at the baseline") {
  const Dataset ds =
      dataset_from_traces(make_dataset(small_plan(5)).traces);
  PipelineConfig cfg;
  const RunResult run = run_fit(ds, cfg);
  REQUIRE(run.triples.size() == 1);
  const TripleResult& tr = run.triples[0];
  REQUIRE(tr.ok);
  REQUIRE(tr.records.size() == 10);

  double expected = 0.5 *
                    std::log(tr.normal.sigma_star * tr.normal.sigma_star) *
                    80.0;
  for (int d = 0; d < 7; ++d)
    expected += std::log(tr.normal.sigma_star_s[d]);
  for (const AnomalyRecord& rec : tr.records)
    CHECK(rec.score == doctest::Approx(expected).epsilon(1e-4));
  CHECK(tr.spikes.empty());
}

TEST_CASE("run_fit: an injected spike tops its triple and is detected") {
  GenerationPlan plan = small_plan(7, 8, 5);
  plan.triples[0].jitter << 0.01, 0.02, 0.015, 0.08, 0.005, 0.004, 0.0;
  plan.triples[0].noise_sigma = 0.02;
  plan.triples[0].injections.push_back({23, "c", 0.06, true});  // 15 jitters
  const Dataset ds = dataset_from_traces(make_dataset(plan).traces);
  PipelineConfig cfg;
  const RunResult run = run_fit(ds, cfg);
  REQUIRE(run.triples[0].ok);
  const auto& records = run.triples[0].records;

  int top = 0;
  for (std::size_t i = 1; i < records.size(); ++i)
    if (records[i].score > records[top].score) top = static_cast<int>(i);
  CHECK(top == 23);
  CHECK(std::count(run.triples[0].spikes.begin(),
                   run.triples[0].spikes.end(), 23) == 1);

  // The slope drives the spike wafer's gradient.
  const auto ranked = rank_contributors(records[23].gradient);
  CHECK(ranked[0].param == "c");
}

TEST_CASE("run_fit: outputs are independent of the worker count") {
  GenerationPlan plan = small_plan(11, 6, 3);
  TriplePlan second = plan.triples[0];
  second.sensor = "S2";
  second.base_signature->y = 12.0;
  plan.triples.push_back(second);
  plan.triples[0].jitter << 0.01, 0.02, 0.015, 0.08, 0.005, 0.004, 0.0;
  plan.triples[1].jitter << 0.01, 0.02, 0.015, 0.08, 0.005, 0.004, 0.0;
  plan.triples[0].noise_sigma = 0.02;
  plan.triples[1].noise_sigma = 0.02;
  const Dataset ds = dataset_from_traces(make_dataset(plan).traces);

  PipelineConfig serial;
  serial.workers = 1;
  PipelineConfig wide;
  wide.workers = 8;
  const RunResult a = run_fit(ds, serial);
  const RunResult b = run_fit(ds, wide);
  const auto ta = build_tables(ds, a);
  const auto tb = build_tables(ds, b);
  REQUIRE(ta.size() == tb.size());
  for (const auto& [tool, table] : ta)
    CHECK(table_csv_string(table) == table_csv_string(tb.at(tool)));
}

TEST_CASE("tables: completeness and column structure") {
  GenerationPlan plan = small_plan(13, 5, 2);
  TriplePlan second = plan.triples[0];
  second.sensor = "S2";
  plan.triples.push_back(second);
  const Dataset ds = dataset_from_traces(make_dataset(plan).traces);
  PipelineConfig cfg;
  const RunResult run = run_fit(ds, cfg);
  const auto tables = build_tables(ds, run);
  REQUIRE(tables.size() == 1);
  const SignatureTable& table = tables.at("T1");
  CHECK(table.groups.size() == 2);
  CHECK(table.rows.size() == 10);  // every wafer exactly once

  const std::string csv = table_csv_string(table);
  std::istringstream lines(csv);
  std::string header;
  std::getline(lines, header);
  std::size_t commas = 0;
  for (char c : header) commas += c == ',';
  CHECK(commas + 1 == 3 + 9 * table.groups.size());

  // Round trip through the table reader.
  testutil::TempDir tmp("table");
  const auto paths = export_tables(tables, tmp.str());
  REQUIRE(paths.size() == 1);
  const SignatureTable back = read_table_csv(paths[0]);
  CHECK(back.groups == table.groups);
  REQUIRE(back.rows.size() == table.rows.size());
  for (std::size_t r = 0; r < back.rows.size(); ++r) {
    CHECK(back.rows[r].wafer_id == table.rows[r].wafer_id);
    const auto& cell = back.rows[r].cells.at({"S1", "K1"});
    const auto& orig = table.rows[r].cells.at({"S1", "K1"});
    CHECK(cell.score == orig.score);
    CHECK(cell.signature[0] == orig.signature[0]);
  }
}

TEST_CASE("heatmap: constant parameters give an all-zero matrix") {
  const Dataset ds =
      dataset_from_traces(make_dataset(small_plan(17)).traces);
  PipelineConfig cfg;
  const RunResult run = run_fit(ds, cfg);
  const HeatmapData hm = heatmap_matrix(run.triples[0]);
  CHECK(hm.z.cwiseAbs().maxCoeff() < 1e-6);
  const std::string svg = heatmap_svg_string(hm, "t");
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("#f7f7f7") != std::string::npos);  // mid-scale everywhere
  CHECK(svg.find("#b2182b") == std::string::npos);  // no saturated cells
}

TEST_CASE("heatmap: standardization is idempotent") {
  Rng rng(31);
  Eigen::MatrixXd m(30, 9);
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      m(r, c) = rng.uniform(-2.0, 5.0);
  const Eigen::MatrixXd z = standardize(m);
  const Eigen::MatrixXd zz = standardize(z);
  CHECK((zz - z).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("heatmap: an injected change point shifts the columns") {
  GenerationPlan plan = small_plan(19, 8, 10);  // 80 wafers
  TriplePlan& tp = plan.triples[0];
  tp.jitter << 0.01, 0.02, 0.015, 0.08, 0.005, 0.004, 0.0;
  tp.noise_sigma = 0.02;
  const ShapeSignature base = *tp.base_signature;
  tp.injections.push_back({64, "gamma", -0.2 * base.gamma, false});
  tp.injections.push_back({64, "c", 0.2 * base.c, false});
  tp.injections.push_back({64, "R", 0.2 * base.R, false});
  const Dataset ds = dataset_from_traces(make_dataset(plan).traces);
  PipelineConfig cfg;
  const RunResult run = run_fit(ds, cfg);
  REQUIRE(run.triples[0].ok);
  const HeatmapData hm = heatmap_matrix(run.triples[0]);

  double before = 0.0, after = 0.0;
  int nb = 0, na = 0;
  for (Eigen::Index r = 0; r < hm.z.rows(); ++r)
    for (Eigen::Index c = 0; c < hm.z.cols(); ++c) {
      if (c < 64) {
        before += std::fabs(hm.z(r, c));
        ++nb;
      } else {
        after += std::fabs(hm.z(r, c));
        ++na;
      }
    }
  CHECK(after / na > 2.0 * (before / nb));
}

TEST_CASE("normal-model files round-trip") {
  NormalModel nm;
  nm.sigma_star = 0.123;
  nm.mu_star = (Vec7() << 0.5, 1.2, 1.0, 6.0, 0.1, 0.08, 0.0).finished();
  nm.sigma_star_s = Vec7::Constant(0.05);
  nm.source_lots = {"lotA", "lotB"};
  nm.tool = "T1";
  nm.sensor = "S1";
  nm.step = "K1";
  testutil::TempDir tmp("nm");
  const std::string path = tmp.file("nm.txt");
  write_normal_model(nm, path);
  const NormalModel back = read_normal_model(path);
  CHECK(back.sigma_star == nm.sigma_star);
  for (int d = 0; d < 7; ++d) {
    CHECK(back.mu_star[d] == nm.mu_star[d]);
    CHECK(back.sigma_star_s[d] == nm.sigma_star_s[d]);
  }
  CHECK(back.source_lots == nm.source_lots);
  CHECK(back.tool == "T1");
}

TEST_CASE("cli: simulate / fit / normal / score / deconstruct smoke") {
  testutil::TempDir tmp("cli");

  // Plan with a slope spike large relative to the jitter.
  const std::string plan_path = tmp.file("plan.json");
  {
    std::ofstream plan(plan_path);
    plan << R"({
      "seed": 21,
      "triples": [{
        "tool": "T1", "sensor": "S1", "step": "K1",
        "lots": 8, "wafers_per_lot": 5,
        "base_signature": {"gamma": 0.5, "R": 1.2, "omega": 1.0,
                            "y": 6.0, "phi": 0.1, "c": 0.08, "x": 0.0},
        "jitter": {"gamma": 0.01, "R": 0.02, "omega": 0.015,
                    "y": 0.08, "phi": 0.005, "c": 0.004},
        "noise_sigma": 0.02, "samples": 80, "dt": 0.15,
        "injections": [{"wafer_index": 23, "param": "c",
                         "delta": 0.06, "mode": "spike"}]
      }]
    })";
  }
  const std::string data = tmp.file("data.csv");
  CHECK(cli({"simulate", "--plan", plan_path, "--out", data}) == 0);
  CHECK(std::ifstream(data).good());
  CHECK(std::ifstream(data + ".truth.csv").good());

  CHECK(cli({"fit", "--input", data, "--out-dir", tmp.file("tables")}) == 0);
  CHECK(std::ifstream(tmp.file("tables/table_T1.csv")).good());

  const std::string nm_path = tmp.file("nm.txt");
  CHECK(cli({"normal", "--input", data, "--out", nm_path}) == 0);
  CHECK(cli({"score", "--input", data, "--normal", nm_path, "--out",
             tmp.file("records.csv")}) == 0);
  const std::string records = slurp(tmp.file("records.csv"));
  CHECK(records.find("wafer,lot,seq,score,ssr") == 0);

  CHECK(cli({"heatmap", "--table", tmp.file("tables/table_T1.csv"),
             "--sensor", "S1", "--step", "K1", "--out-prefix",
             tmp.file("hm")}) == 0);
  CHECK(std::ifstream(tmp.file("hm.svg")).good());

  CHECK(cli({"report", "--input", data, "--out-dir", tmp.file("report")}) ==
        0);
  CHECK(std::ifstream(tmp.file("report/summary.txt")).good());
}

TEST_CASE("cli: deconstruct names the injected slope first") {
  testutil::TempDir tmp("dec");
  GenerationPlan plan = small_plan(21, 8, 5);
  plan.triples[0].jitter << 0.01, 0.02, 0.015, 0.08, 0.005, 0.004, 0.0;
  plan.triples[0].noise_sigma = 0.02;
  plan.triples[0].injections.push_back({23, "c", 0.06, true});
  const SyntheticDataset synth = make_dataset(plan);
  const std::string data = tmp.file("data.csv");
  write_dataset_csv(synth, data);
  const std::string spiked = synth.traces[23].wafer_id;

  // Capture stdout of the deconstruct subcommand.
  std::ostringstream captured;
  std::streambuf* old = std::cout.rdbuf(captured.rdbuf());
  const int code = cli({"deconstruct", "--input", data, "--wafer", spiked});
  std::cout.rdbuf(old);
  const std::string out = captured.str();
  CHECK(code == 0);
  CHECK(out.substr(0, 2) == "c ");
}

TEST_CASE("cli: bad inputs exit with code 1") {
  CHECK(cli({"fit", "--input", "/nonexistent/path.csv", "--out-dir",
             "/tmp/unused"}) == 1);
  CHECK(cli({"frobnicate"}) == 1);
  CHECK(cli({"fit", "--no-such-flag"}) == 1);
}

TEST_CASE("run_fit: a short triple is skipped with a diagnostic") {
  // 4 wafers total: below the 8-wafer initial-fit threshold.
  const Dataset ds =
      dataset_from_traces(make_dataset(small_plan(23, 2, 2)).traces);
  PipelineConfig cfg;
  const RunResult run = run_fit(ds, cfg);
  REQUIRE(run.triples.size() == 1);
  CHECK_FALSE(run.triples[0].ok);
  CHECK(run.triples[0].error.find("8 wafers") != std::string::npos);
}
