#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "shapesig/csv.hpp"
#include "shapesig/fit.hpp"
#include "shapesig/simulate.hpp"
#include "test_util.hpp"

using namespace shapesig;

namespace {

SimConfig base_config() {
  SimConfig cfg;
  cfg.cp = ControlParams{1.0, 1.0, 1.0, 0.5, 0.0, 1.0};
  cfg.v0 = 0.0;
  cfg.i0 = 0.0;
  cfg.dt = 0.01;
  cfg.duration = 10.0;
  cfg.sample_every = 2;
  cfg.noise_sigma = 0.0;
  cfg.seed = 99;
  return cfg;
}

double final_v(double dt) {
  SimConfig cfg = base_config();
  cfg.dt = dt;
  cfg.duration = 2.0;
  cfg.sample_every = 1;
  const SimResult res = simulate_closed_loop(cfg);
  return res.v_trace.values.back();
}

}  // namespace

TEST_CASE("equilibrium: zero set point stays at zero") {
  SimConfig cfg = base_config();
  cfg.cp.q2 = 0.0;
  cfg.v0 = 0.0;
  const SimResult res = simulate_closed_loop(cfg);
  for (double v : res.v_trace.values) CHECK(std::fabs(v) < 1e-9);
}

TEST_CASE("equilibrium: pre-charged integral holds any constant set point") {
  // v = q2 with integral = q2 tau_I / (k_p k_c) is a fixed point of the loop.
  SimConfig cfg = base_config();
  cfg.cp.q2 = 3.0;
  cfg.v0 = 3.0;
  cfg.i0 = 3.0 * cfg.cp.tau_I / (cfg.cp.k_p * cfg.cp.k_c);
  const SimResult res = simulate_closed_loop(cfg);
  for (double v : res.v_trace.values) CHECK(std::fabs(v - 3.0) < 1e-9);
}

TEST_CASE("closed loop converges to the set point and is flagged stable") {
  const SimResult res = simulate_closed_loop(base_config());
  CHECK(res.stable);
  CHECK(res.v_trace.values.back() == doctest::Approx(1.0).epsilon(1e-4));
  CHECK(res.v_trace.times.size() == res.u_trace.times.size());
}

TEST_CASE("RK4 order: halving dt shrinks the error ~16x") {
  // Reference at a much finer step.
  const double ref = final_v(0.02 / 16.0);
  const double e1 = std::fabs(final_v(0.02) - ref);
  const double e2 = std::fabs(final_v(0.01) - ref);
  const double e3 = std::fabs(final_v(0.005) - ref);
  const double slope1 = std::log2(e1 / e2);
  const double slope2 = std::log2(e2 / e3);
  CHECK(slope1 > 3.7);
  CHECK(slope1 < 4.3);
  CHECK(slope2 > 3.7);
  CHECK(slope2 < 4.3);
}

TEST_CASE("simulated trajectory matches the oscillator form") {
  // gamma = 2, k = 2 -> omega = 1, c = 0, y = 1 for this loop.
  SimConfig cfg = base_config();
  const SimResult res = simulate_closed_loop(cfg);

  FitConfig fit_cfg;
  const LotFit lf = fit_lot({res.v_trace}, fit_cfg);
  const ShapeSignature s = lf.signatures[0];

  const auto [lo, hi] = std::minmax_element(res.v_trace.values.begin(),
                                            res.v_trace.values.end());
  const double amplitude = *hi - *lo;
  double worst = 0.0;
  for (std::size_t i = 0; i < res.v_trace.times.size(); ++i)
    worst = std::max(worst, std::fabs(res.v_trace.values[i] -
                                      eval(s, res.v_trace.times[i])));
  CHECK(worst < 1e-3 * amplitude);
  CHECK(s.gamma == doctest::Approx(2.0).epsilon(0.02));
  CHECK(s.omega == doctest::Approx(1.0).epsilon(0.01));
  CHECK(s.y == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("unstable configurations are flagged") {
  SimConfig cfg = base_config();
  cfg.cp.k_c = -0.5;  // kbar < 0
  cfg.duration = 1.0;
  const SimResult res = simulate_closed_loop(cfg);
  CHECK_FALSE(res.stable);
}

TEST_CASE("synth_from_signature: exactness, noise level, determinism") {
  Rng rng(4);
  const ShapeSignature s{0.4, 1.5, 1.2, 8.0, 0.1, 0.05, 0.0};
  const auto times = testutil::linspace(0.0, 12.0, 80);

  const TraceSeries clean = synth_from_signature(s, times, 0.0, 7);
  CHECK(ssr(s, clean) == 0.0);

  const double sigma = 0.3;
  double acc = 0.0;
  const int reps = 1000;
  for (int rep = 0; rep < reps; ++rep) {
    const TraceSeries noisy =
        synth_from_signature(s, times, sigma, 1000 + rep);
    acc += ssr(s, noisy) / static_cast<double>(times.size());
  }
  CHECK(acc / reps == doctest::Approx(sigma * sigma).epsilon(0.05));

  const TraceSeries a = synth_from_signature(s, times, sigma, 42);
  const TraceSeries b = synth_from_signature(s, times, sigma, 42);
  CHECK(a.values == b.values);
  const TraceSeries c = synth_from_signature(s, times, sigma, 43);
  CHECK(a.values != c.values);
}

TEST_CASE("make_dataset: identical wafers without jitter or noise") {
  GenerationPlan plan;
  plan.seed = 5;
  TriplePlan tp;
  tp.tool = "T1";
  tp.sensor = "S1";
  tp.step = "K1";
  tp.lots = 1;
  tp.wafers_per_lot = 3;
  tp.base_signature = ShapeSignature{0.5, 1.0, 1.0, 5.0, 0.0, 0.1, 0.0};
  tp.samples = 40;
  tp.dt_sample = 0.2;
  plan.triples.push_back(tp);

  const SyntheticDataset ds = make_dataset(plan);
  REQUIRE(ds.traces.size() == 3);
  CHECK(ds.traces[0].values == ds.traces[1].values);
  CHECK(ds.traces[1].values == ds.traces[2].values);
  CHECK(ds.injected.empty());
}

TEST_CASE("make_dataset: spike bookkeeping and reproducibility") {
  GenerationPlan plan;
  plan.seed = 6;
  TriplePlan tp;
  tp.tool = "T1";
  tp.sensor = "S1";
  tp.step = "K1";
  tp.lots = 3;
  tp.wafers_per_lot = 4;
  tp.base_signature = ShapeSignature{0.5, 1.0, 1.0, 5.0, 0.0, 0.1, 0.0};
  tp.jitter << 0.01, 0.02, 0.01, 0.05, 0.01, 0.005, 0.0;
  tp.noise_sigma = 0.02;
  tp.samples = 50;
  tp.dt_sample = 0.2;
  tp.injections.push_back({7, "c", 0.5, true});
  plan.triples.push_back(tp);

  const SyntheticDataset ds = make_dataset(plan);
  REQUIRE(ds.injected.size() == 1);
  CHECK(ds.injected[0].wafer == ds.traces[7].wafer_id);
  CHECK(ds.injected[0].param == "c");
  REQUIRE(ds.ground_truth[7].signature.has_value());
  REQUIRE(ds.ground_truth[6].signature.has_value());
  CHECK(ds.ground_truth[7].signature->c >
        ds.ground_truth[6].signature->c + 0.4);

  // Byte-identical replay with the same seed.
  const SyntheticDataset again = make_dataset(plan);
  CHECK(dataset_csv_string(ds) == dataset_csv_string(again));

  GenerationPlan other = plan;
  other.seed = 7;
  CHECK(dataset_csv_string(make_dataset(other)) != dataset_csv_string(ds));
}

TEST_CASE("make_dataset: change-point injection applies onward") {
  GenerationPlan plan;
  plan.seed = 8;
  TriplePlan tp;
  tp.tool = "T1";
  tp.sensor = "S1";
  tp.step = "K1";
  tp.lots = 2;
  tp.wafers_per_lot = 5;
  tp.base_signature = ShapeSignature{0.5, 1.0, 1.0, 5.0, 0.0, 0.1, 0.0};
  tp.samples = 30;
  tp.dt_sample = 0.2;
  tp.injections.push_back({4, "y", 2.0, false});
  plan.triples.push_back(tp);

  const SyntheticDataset ds = make_dataset(plan);
  REQUIRE(ds.injected.size() == 1);  // recorded once, at the change point
  for (int i = 0; i < 10; ++i) {
    const double y = ds.ground_truth[static_cast<std::size_t>(i)].signature->y;
    if (i < 4)
      CHECK(y == doctest::Approx(5.0).epsilon(1e-12));
    else
      CHECK(y == doctest::Approx(7.0).epsilon(1e-12));
  }
}

TEST_CASE("make_dataset: control-mode triples simulate the loop") {
  GenerationPlan plan;
  plan.seed = 9;
  TriplePlan tp;
  tp.tool = "T1";
  tp.sensor = "S1";
  tp.step = "K1";
  tp.lots = 1;
  tp.wafers_per_lot = 2;
  tp.base_control = ControlParams{1.0, 1.0, 1.0, 0.5, 0.0, 1.0};
  tp.samples = 100;
  tp.dt_sample = 0.05;
  plan.triples.push_back(tp);

  const SyntheticDataset ds = make_dataset(plan);
  REQUIRE(ds.traces.size() == 2);
  CHECK(ds.traces[0].values.back() == doctest::Approx(1.0).epsilon(0.05));
  REQUIRE(ds.ground_truth[0].control.has_value());
  CHECK_FALSE(ds.ground_truth[0].signature.has_value());
}

TEST_CASE("make_dataset: inconsistent plans list every offense") {
  GenerationPlan plan;
  TriplePlan tp;
  tp.tool = "T1";
  tp.sensor = "S1";
  tp.step = "K1";
  tp.lots = 0;  // bad
  tp.base_signature = ShapeSignature{};
  tp.injections.push_back({99, "nope", 1.0, true});  // bad index + name
  plan.triples.push_back(tp);
  try {
    make_dataset(plan);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    const std::string what = e.what();
    CHECK(what.find("lots must be >= 1") != std::string::npos);
    CHECK(what.find("out of range") != std::string::npos);
    CHECK(what.find("unknown parameter") != std::string::npos);
  }
}
