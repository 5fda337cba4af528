#pragma once

// White-box oracle and synthetic-data generator. The closed PI loop is
// integrated numerically (classical RK4 on the augmented (v, integral-of-e)
// state) rather than sampled from the analytic solution, so simulator
// output is an independent check of the oscillator form.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "shapesig/control_map.hpp"
#include "shapesig/oscillator.hpp"

namespace shapesig {

struct SimConfig {
  ControlParams cp;
  double v0 = 0.0;        // initial output value
  double i0 = 0.0;        // initial error integral
  double dt = 0.01;       // integration step (s)
  double duration = 10.0; // total simulated time (s)
  int sample_every = 10;  // emit one observation per this many steps
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;

  std::string tool_id = "tool";
  std::string sensor_id = "v";
  std::string step_id = "step";
  std::string wafer_id = "w0";
  std::string lot_id = "lot0";
  int sequence_index = 0;

  void validate() const;
};

struct SimResult {
  TraceSeries v_trace;  // controlled output observations
  TraceSeries u_trace;  // controller input observations (sensor id suffixed ".u")
  bool stable = true;   // kbar > 0; unstable configs are allowed, just flagged
};

/// Integrates v' = (-v + k_p u)/tau_p, I' = r(t) - v with u from the PI law,
/// sampling every sample_every steps with seeded i.i.d. Gaussian noise.
SimResult simulate_closed_loop(const SimConfig& cfg);

/// Samples alpha(t, s) at the given (increasing) times plus seeded noise.
TraceSeries synth_from_signature(const ShapeSignature& s,
                                 const std::vector<double>& times,
                                 double noise_sigma, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Dataset generation plans
// ---------------------------------------------------------------------------

struct AnomalyInjection {
  int wafer_index = 0;  // within-triple sequence index the delta applies to
  std::string param;    // signature name (or control name for ODE triples)
  double delta = 0.0;
  bool spike = true;    // true: that wafer only; false: change point (onward)
};

// One (tool, sensor, step) triple of the plan. Wafer traces are generated
// either directly from a base signature plus per-wafer jitter, or by
// simulating a (jittered) control loop.
struct TriplePlan {
  std::string tool, sensor, step;
  int lots = 1;
  int wafers_per_lot = 1;

  std::optional<ShapeSignature> base_signature;
  Eigen::Matrix<double, 7, 1> jitter = Eigen::Matrix<double, 7, 1>::Zero();

  std::optional<ControlParams> base_control;
  Eigen::Matrix<double, 6, 1> control_jitter =
      Eigen::Matrix<double, 6, 1>::Zero();
  double v0 = 0.0;
  double i0 = 0.0;
  int oversample = 20;  // RK4 steps per emitted sample in control mode

  int samples = 150;
  double t_start = 0.0;
  double dt_sample = 0.1;
  double noise_sigma = 0.0;

  std::vector<AnomalyInjection> injections;
};

struct GenerationPlan {
  std::uint64_t seed = 0;
  std::vector<TriplePlan> triples;

  // Throws ValidationError listing every offending entry.
  void validate() const;
};

struct WaferTruth {
  std::string tool, sensor, step, wafer;
  std::optional<ShapeSignature> signature;
  std::optional<ControlParams> control;
};

struct InjectedAnomaly {
  std::string tool, sensor, step, wafer;
  std::string param;
  double delta = 0.0;
  bool spike = true;
};

struct SyntheticDataset {
  std::vector<TraceSeries> traces;        // generation order
  std::vector<WaferTruth> ground_truth;   // one entry per wafer
  std::vector<InjectedAnomaly> injected;  // bookkeeping of applied deltas
};

/// Reproducible dataset from a plan; per-wafer RNG substreams make the
/// result independent of generation order.
SyntheticDataset make_dataset(const GenerationPlan& plan);

/// Parses the JSON plan document (see README for the schema).
GenerationPlan plan_from_json(const std::string& text);
GenerationPlan plan_from_json_file(const std::string& path);

}  // namespace shapesig
