#include "shapesig/control_map.hpp"

#include <cmath>
#include <stdexcept>

namespace shapesig {

void ControlParams::validate() const {
  if (!std::isfinite(k_p) || !std::isfinite(k_c) || !std::isfinite(tau_p) ||
      !std::isfinite(tau_I) || !std::isfinite(q1) || !std::isfinite(q2))
    throw std::domain_error("ControlParams: non-finite component");
  if (tau_p == 0.0) throw std::domain_error("ControlParams: tau_p must be nonzero");
  if (tau_I == 0.0) throw std::domain_error("ControlParams: tau_I must be nonzero");
  if (k_p == 0.0) throw std::domain_error("ControlParams: k_p must be nonzero");
  if (k_c == 0.0) throw std::domain_error("ControlParams: k_c must be nonzero");
}

OdeParams ode_from_control_output(const ControlParams& cp) {
  cp.validate();
  const double kpkc = cp.k_p * cp.k_c;
  OdeParams ode;
  ode.gamma = (1.0 + kpkc) / cp.tau_p;
  ode.k = kpkc / (cp.tau_I * cp.tau_p);
  ode.a = kpkc * cp.q1 / (cp.tau_I * cp.tau_p);
  ode.b = kpkc * cp.q1 / cp.tau_p + kpkc * cp.q2 / (cp.tau_I * cp.tau_p);
  return ode;
}

OdeParams ode_from_control_input(const ControlParams& cp) {
  cp.validate();
  const double kpkc = cp.k_p * cp.k_c;
  OdeParams ode;
  ode.gamma = (1.0 + kpkc) / cp.tau_p;
  ode.k = kpkc / (cp.tau_I * cp.tau_p);
  ode.a = cp.k_c * cp.q1 / (cp.tau_I * cp.tau_p);
  ode.b = cp.k_c * (cp.q1 * (cp.tau_p + cp.tau_I) + cp.q2) /
          (cp.tau_I * cp.tau_p);
  return ode;
}

ShapeFromOde shape_from_ode(const OdeParams& ode) {
  if (ode.k == 0.0) throw std::domain_error("shape_from_ode: k must be nonzero");
  ShapeFromOde out;
  const double disc = 4.0 * ode.k - ode.gamma * ode.gamma;
  if (disc >= 0.0) out.omega = 0.5 * std::sqrt(disc);
  out.c = ode.a / ode.k;
  out.y = (ode.b - out.c * ode.gamma) / ode.k;
  return out;
}

OdeParams ode_from_signature(const ShapeSignature& s) {
  s.validate();
  OdeParams ode;
  ode.gamma = s.gamma;
  ode.k = s.omega * s.omega + 0.25 * s.gamma * s.gamma;
  ode.a = s.c * ode.k;
  ode.b = s.y * ode.k + s.c * s.gamma;
  return ode;
}

RecoveredControl control_from_ode_known(const OdeParams& ode, double k_c,
                                        double tau_I) {
  if (ode.k == 0.0)
    throw std::domain_error("control_from_ode_known: k must be nonzero");
  if (k_c == 0.0 || tau_I == 0.0)
    throw std::domain_error("control_from_ode_known: k_c and tau_I must be nonzero");
  const double denom = ode.gamma - tau_I * ode.k;
  const double scale =
      std::max({std::fabs(ode.gamma), std::fabs(tau_I * ode.k), 1.0});
  if (std::fabs(denom) <= 1e-12 * scale)
    throw std::domain_error(
        "control_from_ode_known: singular configuration (gamma ~= tau_I k)");
  RecoveredControl rc;
  rc.tau_p = 1.0 / denom;
  rc.k_p = ode.k * tau_I / (k_c * denom);
  rc.q1 = ode.a / ode.k;
  rc.q2 = (ode.b - tau_I * ode.a) / ode.k;
  return rc;
}

SingleDofReduction reduce_single_dof(const OdeParams& ode, double tau_p) {
  if (ode.k == 0.0)
    throw std::domain_error("reduce_single_dof: k must be nonzero");
  if (tau_p == 0.0)
    throw std::domain_error("reduce_single_dof: tau_p must be nonzero");
  SingleDofReduction out;
  out.tau_I = (ode.gamma * tau_p - 1.0) / (ode.k * tau_p);
  out.kbar = ode.gamma * tau_p - 1.0;
  out.q1 = ode.a / ode.k;
  out.q2 = (ode.b - out.tau_I * ode.a) / ode.k;
  return out;
}

bool oscillates(const ControlParams& cp) {
  cp.validate();
  const double kpkc = cp.k_p * cp.k_c;
  // tau_I < 4 k_p k_c tau_p / (1 + k_p k_c)^2, rearranged by multiplying
  // through by tau_p^2 > 0 so the comparison matches sign(4k - gamma^2) for
  // any nonzero time constants.
  return 4.0 * kpkc * (cp.tau_p / cp.tau_I) > (1.0 + kpkc) * (1.0 + kpkc);
}

bool is_stable(double gamma, double tau_p) {
  return gamma * tau_p - 1.0 > 0.0;
}

}  // namespace shapesig
