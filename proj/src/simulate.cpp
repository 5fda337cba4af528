#include "shapesig/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "shapesig/errors.hpp"
#include "shapesig/rng.hpp"

namespace shapesig {

namespace {

constexpr double kHalfPi = std::numbers::pi / 2.0;

constexpr const char* kControlNames[6] = {"k_p", "k_c", "tau_p",
                                          "tau_I", "q1", "q2"};

int control_index(const std::string& name) {
  for (int i = 0; i < 6; ++i)
    if (name == kControlNames[i]) return i;
  return -1;
}

double& control_field(ControlParams& cp, int i) {
  switch (i) {
    case 0: return cp.k_p;
    case 1: return cp.k_c;
    case 2: return cp.tau_p;
    case 3: return cp.tau_I;
    case 4: return cp.q1;
    default: return cp.q2;
  }
}

// Keeps injected/jittered signatures inside the physical boxes.
void clamp_to_boxes(ShapeSignature& s) {
  s.omega = std::max(s.omega, 0.0);
  s.phi = std::clamp(s.phi, -kHalfPi, kHalfPi);
}

}  // namespace

void SimConfig::validate() const {
  cp.validate();
  if (!(dt > 0.0)) throw std::domain_error("SimConfig: dt must be > 0");
  if (!(duration >= dt))
    throw std::domain_error("SimConfig: duration must be >= dt");
  if (sample_every < 1)
    throw std::domain_error("SimConfig: sample_every must be >= 1");
  if (!(noise_sigma >= 0.0))
    throw std::domain_error("SimConfig: noise_sigma must be >= 0");
  if (!std::isfinite(v0) || !std::isfinite(i0))
    throw std::domain_error("SimConfig: non-finite initial state");
}

SimResult simulate_closed_loop(const SimConfig& cfg) {
  cfg.validate();
  const ControlParams& cp = cfg.cp;

  const auto setpoint = [&](double t) { return cp.q1 * t + cp.q2; };
  const auto control = [&](double t, double v, double integral) {
    return cp.k_c * (setpoint(t) - v) + cp.k_c / cp.tau_I * integral;
  };
  // State is (v, integral of e); dv = (-v + k_p u)/tau_p, dI = e.
  const auto deriv = [&](double t, double v, double integral, double& dv,
                         double& di) {
    const double e = setpoint(t) - v;
    const double u = cp.k_c * e + cp.k_c / cp.tau_I * integral;
    dv = (-v + cp.k_p * u) / cp.tau_p;
    di = e;
  };

  SimResult out;
  out.stable = is_stable(ode_from_control_output(cp).gamma, cp.tau_p);

  Rng rng = Rng::for_stream(
      cfg.seed, cfg.tool_id + "/" + cfg.sensor_id + "/" + cfg.step_id + "/" +
                    cfg.wafer_id);

  TraceSeries& vt = out.v_trace;
  TraceSeries& ut = out.u_trace;
  vt.tool_id = ut.tool_id = cfg.tool_id;
  vt.sensor_id = cfg.sensor_id;
  ut.sensor_id = cfg.sensor_id + ".u";
  vt.step_id = ut.step_id = cfg.step_id;
  vt.wafer_id = ut.wafer_id = cfg.wafer_id;
  vt.lot_id = ut.lot_id = cfg.lot_id;
  vt.sequence_index = ut.sequence_index = cfg.sequence_index;

  const long steps = std::lround(cfg.duration / cfg.dt);
  const auto sample = [&](double t, double v, double integral) {
    vt.times.push_back(t);
    vt.values.push_back(v + cfg.noise_sigma * rng.normal());
    ut.times.push_back(t);
    ut.values.push_back(control(t, v, integral) +
                        cfg.noise_sigma * rng.normal());
  };

  double v = cfg.v0;
  double integral = cfg.i0;
  sample(0.0, v, integral);
  for (long i = 0; i < steps; ++i) {
    const double t = static_cast<double>(i) * cfg.dt;
    const double h = cfg.dt;
    double k1v, k1i, k2v, k2i, k3v, k3i, k4v, k4i;
    deriv(t, v, integral, k1v, k1i);
    deriv(t + 0.5 * h, v + 0.5 * h * k1v, integral + 0.5 * h * k1i, k2v, k2i);
    deriv(t + 0.5 * h, v + 0.5 * h * k2v, integral + 0.5 * h * k2i, k3v, k3i);
    deriv(t + h, v + h * k3v, integral + h * k3i, k4v, k4i);
    v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
    integral += h / 6.0 * (k1i + 2.0 * k2i + 2.0 * k3i + k4i);
    if ((i + 1) % cfg.sample_every == 0)
      sample(static_cast<double>(i + 1) * cfg.dt, v, integral);
  }
  return out;
}

TraceSeries synth_from_signature(const ShapeSignature& s,
                                 const std::vector<double>& times,
                                 double noise_sigma, std::uint64_t seed) {
  if (times.empty())
    throw std::domain_error("synth_from_signature: empty time vector");
  if (!(noise_sigma >= 0.0))
    throw std::domain_error("synth_from_signature: negative noise sigma");
  TraceSeries trace;
  trace.times = times;
  trace.values = eval_vec(s, times);
  Rng rng(seed);
  if (noise_sigma > 0.0)
    for (double& v : trace.values) v += noise_sigma * rng.normal();
  else
    for (std::size_t i = 0; i < trace.values.size(); ++i) rng.normal();
  trace.validate();
  return trace;
}

void GenerationPlan::validate() const {
  std::vector<std::string> problems;
  if (triples.empty()) problems.push_back("plan lists no triples");
  std::map<std::tuple<std::string, std::string, std::string>, int> seen;
  for (std::size_t ti = 0; ti < triples.size(); ++ti) {
    const TriplePlan& tp = triples[ti];
    const std::string where = "triple #" + std::to_string(ti) + " (" +
                              tp.tool + "/" + tp.sensor + "/" + tp.step + ")";
    if (tp.tool.empty() || tp.sensor.empty() || tp.step.empty())
      problems.push_back(where + ": empty identifier");
    if (++seen[{tp.tool, tp.sensor, tp.step}] > 1)
      problems.push_back(where + ": duplicate triple");
    if (tp.lots < 1) problems.push_back(where + ": lots must be >= 1");
    if (tp.wafers_per_lot < 1)
      problems.push_back(where + ": wafers_per_lot must be >= 1");
    if (tp.samples < 1) problems.push_back(where + ": samples must be >= 1");
    if (!(tp.dt_sample > 0.0)) problems.push_back(where + ": dt must be > 0");
    if (!(tp.noise_sigma >= 0.0))
      problems.push_back(where + ": noise_sigma must be >= 0");
    const bool sig_mode = tp.base_signature.has_value();
    const bool ctl_mode = tp.base_control.has_value();
    if (sig_mode == ctl_mode)
      problems.push_back(where +
                         ": exactly one of base_signature/base_control required");
    if (sig_mode) {
      if (!tp.base_signature->is_finite())
        problems.push_back(where + ": non-finite base signature");
      for (int d = 0; d < 7; ++d)
        if (!(tp.jitter[d] >= 0.0))
          problems.push_back(where + ": negative jitter for " +
                             kParamNames[d]);
    }
    if (ctl_mode) {
      try {
        tp.base_control->validate();
      } catch (const std::exception& e) {
        problems.push_back(where + ": " + e.what());
      }
      for (int d = 0; d < 6; ++d)
        if (!(tp.control_jitter[d] >= 0.0))
          problems.push_back(where + ": negative jitter for " +
                             kControlNames[d]);
      if (tp.oversample < 1)
        problems.push_back(where + ": oversample must be >= 1");
    }
    const int wafer_total = tp.lots * tp.wafers_per_lot;
    for (const AnomalyInjection& inj : tp.injections) {
      if (inj.wafer_index < 0 || inj.wafer_index >= wafer_total)
        problems.push_back(where + ": injection wafer_index " +
                           std::to_string(inj.wafer_index) + " out of range");
      const bool known = sig_mode ? param_index(inj.param) >= 0
                                  : control_index(inj.param) >= 0;
      if (!known)
        problems.push_back(where + ": injection targets unknown parameter '" +
                           inj.param + "'");
    }
  }
  if (!problems.empty()) {
    std::string msg = "invalid generation plan:";
    for (const std::string& p : problems) msg += "\n  - " + p;
    throw ValidationError(msg);
  }
}

SyntheticDataset make_dataset(const GenerationPlan& plan) {
  plan.validate();
  SyntheticDataset out;
  for (const TriplePlan& tp : plan.triples) {
    const int wafer_total = tp.lots * tp.wafers_per_lot;
    for (int seq = 0; seq < wafer_total; ++seq) {
      const int lot_idx = seq / tp.wafers_per_lot;
      std::ostringstream lot_name, wafer_name;
      lot_name << tp.tool << "-L" << lot_idx;
      wafer_name << lot_name.str() << "-w" << seq;
      const std::string lot_id = lot_name.str();
      const std::string wafer_id = wafer_name.str();
      const std::string stream =
          tp.tool + "/" + tp.sensor + "/" + tp.step + "/" + wafer_id;
      Rng rng = Rng::for_stream(plan.seed, stream);

      std::vector<double> times(tp.samples);
      for (int i = 0; i < tp.samples; ++i)
        times[i] = tp.t_start + static_cast<double>(i) * tp.dt_sample;

      WaferTruth truth;
      truth.tool = tp.tool;
      truth.sensor = tp.sensor;
      truth.step = tp.step;
      truth.wafer = wafer_id;

      TraceSeries trace;
      if (tp.base_signature) {
        ShapeSignature s = *tp.base_signature;
        for (int d = 0; d < 7; ++d) s[d] += tp.jitter[d] * rng.normal();
        for (const AnomalyInjection& inj : tp.injections) {
          const bool applies = inj.spike ? seq == inj.wafer_index
                                         : seq >= inj.wafer_index;
          if (!applies) continue;
          s[param_index(inj.param)] += inj.delta;
          if (inj.wafer_index == seq || inj.spike)
            out.injected.push_back({tp.tool, tp.sensor, tp.step, wafer_id,
                                    inj.param, inj.delta, inj.spike});
        }
        clamp_to_boxes(s);
        truth.signature = s;
        trace.times = times;
        trace.values = eval_vec(s, times);
        if (tp.noise_sigma > 0.0)
          for (double& v : trace.values) v += tp.noise_sigma * rng.normal();
      } else {
        ControlParams cp = *tp.base_control;
        for (int d = 0; d < 6; ++d)
          control_field(cp, d) += tp.control_jitter[d] * rng.normal();
        for (const AnomalyInjection& inj : tp.injections) {
          const bool applies = inj.spike ? seq == inj.wafer_index
                                         : seq >= inj.wafer_index;
          if (!applies) continue;
          control_field(cp, control_index(inj.param)) += inj.delta;
          if (inj.wafer_index == seq || inj.spike)
            out.injected.push_back({tp.tool, tp.sensor, tp.step, wafer_id,
                                    inj.param, inj.delta, inj.spike});
        }
        truth.control = cp;
        SimConfig sim;
        sim.cp = cp;
        sim.v0 = tp.v0;
        sim.i0 = tp.i0;
        sim.dt = tp.dt_sample / tp.oversample;
        const long steps = std::max<long>(
            static_cast<long>(tp.samples - 1) * tp.oversample, 1);
        sim.duration = sim.dt * static_cast<double>(steps);
        sim.sample_every = tp.oversample;
        sim.noise_sigma = tp.noise_sigma;
        sim.seed = splitmix64(plan.seed) ^ fnv1a64(stream);
        sim.tool_id = tp.tool;
        sim.sensor_id = tp.sensor;
        sim.step_id = tp.step;
        sim.wafer_id = wafer_id;
        sim.lot_id = lot_id;
        sim.sequence_index = seq;
        SimResult res = simulate_closed_loop(sim);
        if (res.v_trace.times.size() < static_cast<std::size_t>(tp.samples))
          throw std::runtime_error("make_dataset: simulation emitted fewer "
                                   "samples than planned");
        trace.times.assign(res.v_trace.times.begin(),
                           res.v_trace.times.begin() + tp.samples);
        trace.values.assign(res.v_trace.values.begin(),
                            res.v_trace.values.begin() + tp.samples);
        for (double& t : trace.times) t += tp.t_start;
      }

      trace.tool_id = tp.tool;
      trace.sensor_id = tp.sensor;
      trace.step_id = tp.step;
      trace.wafer_id = wafer_id;
      trace.lot_id = lot_id;
      trace.sequence_index = seq;
      trace.validate();
      out.traces.push_back(std::move(trace));
      out.ground_truth.push_back(std::move(truth));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Plan JSON
// ---------------------------------------------------------------------------

namespace {

using nlohmann::json;

ShapeSignature signature_from_json(const json& j) {
  ShapeSignature s;
  for (int d = 0; d < 7; ++d)
    if (j.contains(kParamNames[d])) s[d] = j.at(kParamNames[d]).get<double>();
  return s;
}

ControlParams control_from_json(const json& j) {
  ControlParams cp;
  for (int d = 0; d < 6; ++d)
    if (j.contains(kControlNames[d]))
      control_field(cp, d) = j.at(kControlNames[d]).get<double>();
  return cp;
}

}  // namespace

GenerationPlan plan_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("plan JSON parse error: ") + e.what());
  }
  GenerationPlan plan;
  try {
    plan.seed = doc.value("seed", std::uint64_t{0});
    for (const json& jt : doc.at("triples")) {
      TriplePlan tp;
      tp.tool = jt.at("tool").get<std::string>();
      tp.sensor = jt.at("sensor").get<std::string>();
      tp.step = jt.at("step").get<std::string>();
      tp.lots = jt.value("lots", 1);
      tp.wafers_per_lot = jt.value("wafers_per_lot", 1);
      tp.samples = jt.value("samples", 150);
      tp.t_start = jt.value("t_start", 0.0);
      tp.dt_sample = jt.value("dt", 0.1);
      tp.noise_sigma = jt.value("noise_sigma", 0.0);
      if (jt.contains("base_signature"))
        tp.base_signature = signature_from_json(jt.at("base_signature"));
      if (jt.contains("jitter")) {
        const json& jj = jt.at("jitter");
        for (int d = 0; d < 7; ++d)
          if (jj.contains(kParamNames[d]))
            tp.jitter[d] = jj.at(kParamNames[d]).get<double>();
      }
      if (jt.contains("base_control")) {
        tp.base_control = control_from_json(jt.at("base_control"));
        tp.v0 = jt.value("v0", 0.0);
        tp.i0 = jt.value("i0", 0.0);
        tp.oversample = jt.value("oversample", 20);
        if (jt.contains("control_jitter")) {
          const json& jj = jt.at("control_jitter");
          for (int d = 0; d < 6; ++d)
            if (jj.contains(kControlNames[d]))
              tp.control_jitter[d] = jj.at(kControlNames[d]).get<double>();
        }
      }
      if (jt.contains("injections")) {
        for (const json& ji : jt.at("injections")) {
          AnomalyInjection inj;
          inj.wafer_index = ji.at("wafer_index").get<int>();
          inj.param = ji.at("param").get<std::string>();
          inj.delta = ji.at("delta").get<double>();
          inj.spike = ji.value("mode", std::string("spike")) != "changepoint";
          tp.injections.push_back(inj);
        }
      }
      plan.triples.push_back(std::move(tp));
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("plan JSON schema error: ") + e.what());
  }
  plan.validate();
  return plan;
}

GenerationPlan plan_from_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open plan file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return plan_from_json(buf.str());
}

}  // namespace shapesig
