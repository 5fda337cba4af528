#pragma once

// Exact algebra linking PI-controller parameters, the reduced second-order
// ODE coefficients, and the oscillator parameters, in both directions.
//
// The closed loop of a first-order process v' = (-v + k_p u)/tau_p under a
// PI controller u = k_c e + (k_c/tau_I) int(e) with linear set point
// r(t) = q1 t + q2 collapses to
//
//   v'' + gamma v' + k v = a t + b
//
// whose solution is the damped linearly driven oscillator of oscillator.hpp.

#include <optional>

#include "shapesig/oscillator.hpp"

namespace shapesig {

// White-box PI loop parameters. The controller bias is fixed at zero.
struct ControlParams {
  double k_p = 1.0;    // process gain, nonzero
  double k_c = 1.0;    // proportional gain, nonzero
  double tau_p = 1.0;  // process time constant (s), nonzero
  double tau_I = 1.0;  // integral time (s), nonzero
  double q1 = 0.0;     // set-point slope
  double q2 = 0.0;     // set-point intercept

  void validate() const;  // throws std::domain_error
};

// Reduced ODE coefficients (mass divided through).
struct OdeParams {
  double gamma = 0.0;  // 1/s
  double k = 0.0;      // 1/s^2
  double a = 0.0;      // driving-force slope
  double b = 0.0;      // driving-force intercept
};

/// ODE coefficients induced on the controlled output v.
OdeParams ode_from_control_output(const ControlParams& cp);

/// ODE coefficients induced on the controller input u. Same (gamma, k) as
/// the output variant; only the driving force differs.
OdeParams ode_from_control_input(const ControlParams& cp);

// Deterministic part of the signature. Amplitude and phase depend on the
// initial conditions and are always obtained by fitting, never derived.
struct ShapeFromOde {
  std::optional<double> omega;  // nullopt when 4k < gamma^2 (overdamped)
  double c = 0.0;
  double y = 0.0;
};

/// omega = sqrt(4k - gamma^2)/2, c = a/k, y = (b - c gamma)/k.
ShapeFromOde shape_from_ode(const OdeParams& ode);

/// Exact inverse on the (omega, c, y, gamma) part:
/// k = omega^2 + gamma^2/4, a = c k, b = y k + c gamma.
OdeParams ode_from_signature(const ShapeSignature& s);

struct RecoveredControl {
  double tau_p = 0.0;
  double k_p = 0.0;
  double q1 = 0.0;
  double q2 = 0.0;
};

/// Recovers the process parameters when the controller side (k_c, tau_I)
/// is known: tau_p = 1/(gamma - tau_I k), k_p = k tau_I/(k_c (gamma - tau_I k)),
/// q1 = a/k, q2 = (b - tau_I a)/k. Throws on the singular configuration
/// gamma - tau_I k ~= 0.
RecoveredControl control_from_ode_known(const OdeParams& ode, double k_c,
                                        double tau_I);

struct SingleDofReduction {
  double tau_I = 0.0;
  double kbar = 0.0;  // k_p k_c
  double q1 = 0.0;
  double q2 = 0.0;
};

/// Expresses the whole loop as a function of tau_p alone:
/// tau_I = (gamma tau_p - 1)/(k tau_p), kbar = gamma tau_p - 1.
SingleDofReduction reduce_single_dof(const OdeParams& ode, double tau_p);

/// True iff the induced motion oscillates (4k - gamma^2 > 0). Evaluated in
/// control-parameter form, rearranged so it is sign-exact for any nonzero
/// time constants: 4 k_p k_c (tau_p/tau_I) > (1 + k_p k_c)^2.
bool oscillates(const ControlParams& cp);

/// Stability of the PI loop for the first-order process:
/// kbar = gamma tau_p - 1 > 0 (equivalently tau_p > 1/gamma for gamma > 0).
bool is_stable(double gamma, double tau_p);

}  // namespace shapesig
