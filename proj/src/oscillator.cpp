#include "shapesig/oscillator.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace shapesig {

namespace {
constexpr double kHalfPi = std::numbers::pi / 2.0;
}

int param_index(const std::string& name) {
  for (int i = 0; i < kNumParams; ++i)
    if (name == kParamNames[i]) return i;
  return -1;
}

Vec7 ShapeSignature::to_vec() const {
  Vec7 v;
  v << gamma, R, omega, y, phi, c, x;
  return v;
}

ShapeSignature ShapeSignature::from_vec(const Vec7& v) {
  return ShapeSignature{v[0], v[1], v[2], v[3], v[4], v[5], v[6]};
}

double ShapeSignature::operator[](int i) const {
  return const_cast<ShapeSignature&>(*this)[i];
}

double& ShapeSignature::operator[](int i) {
  switch (i) {
    case 0: return gamma;
    case 1: return R;
    case 2: return omega;
    case 3: return y;
    case 4: return phi;
    case 5: return c;
    case 6: return x;
    default: throw std::out_of_range("ShapeSignature index out of range");
  }
}

bool ShapeSignature::is_finite() const {
  return std::isfinite(gamma) && std::isfinite(R) && std::isfinite(omega) &&
         std::isfinite(y) && std::isfinite(phi) && std::isfinite(c) &&
         std::isfinite(x);
}

void ShapeSignature::validate() const {
  if (!is_finite())
    throw std::domain_error("ShapeSignature: non-finite component");
  if (omega < 0.0)
    throw std::domain_error("ShapeSignature: omega must be >= 0");
  if (phi < -kHalfPi || phi > kHalfPi)
    throw std::domain_error("ShapeSignature: phi outside [-pi/2, pi/2]");
}

void TraceSeries::validate() const {
  if (times.empty()) throw std::domain_error("TraceSeries: empty trace");
  if (times.size() != values.size())
    throw std::domain_error("TraceSeries: times/values length mismatch");
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (!std::isfinite(times[i]) || !std::isfinite(values[i]))
      throw std::domain_error("TraceSeries: non-finite entry");
    if (i > 0 && times[i] <= times[i - 1])
      throw std::domain_error("TraceSeries: times not strictly increasing");
  }
}

double eval(const ShapeSignature& s, double t) {
  if (!std::isfinite(t) || !s.is_finite())
    throw std::domain_error("eval: non-finite input");
  const double tau = t - s.x;
  return s.R * std::exp(-0.5 * s.gamma * tau) *
             std::cos(s.omega * tau - s.phi) +
         s.c * tau + s.y;
}

std::vector<double> eval_vec(const ShapeSignature& s,
                             const std::vector<double>& times) {
  if (times.empty()) throw std::domain_error("eval_vec: empty time vector");
  if (!s.is_finite()) throw std::domain_error("eval_vec: non-finite input");
  std::vector<double> out;
  out.reserve(times.size());
  for (double t : times) {
    if (!std::isfinite(t)) throw std::domain_error("eval_vec: non-finite time");
    const double tau = t - s.x;
    out.push_back(s.R * std::exp(-0.5 * s.gamma * tau) *
                      std::cos(s.omega * tau - s.phi) +
                  s.c * tau + s.y);
  }
  return out;
}

void eval_with_derivatives(const ShapeSignature& s, double t, double* value,
                           Vec7* grad, Mat7* hess) {
  const double tau = t - s.x;
  const double E = std::exp(-0.5 * s.gamma * tau);
  const double u = s.omega * tau - s.phi;
  const double C = std::cos(u);
  const double S = std::sin(u);
  const double EC = E * C;
  const double ES = E * S;
  const double REC = s.R * EC;  // the oscillatory term itself
  const double RES = s.R * ES;

  if (value) *value = REC + s.c * tau + s.y;

  if (grad) {
    Vec7& g = *grad;
    g[0] = -0.5 * tau * REC;                        // d/d gamma
    g[1] = EC;                                      // d/d R
    g[2] = -tau * RES;                              // d/d omega
    g[3] = 1.0;                                     // d/d y
    g[4] = RES;                                     // d/d phi
    g[5] = tau;                                     // d/d c
    g[6] = 0.5 * s.gamma * REC + s.omega * RES - s.c;  // d/d x
  }

  if (hess) {
    Mat7& h = *hess;
    h.setZero();
    h(0, 0) = 0.25 * tau * tau * REC;
    h(0, 1) = -0.5 * tau * EC;
    h(0, 2) = 0.5 * tau * tau * RES;
    h(0, 4) = -0.5 * tau * RES;
    h(0, 6) = 0.5 * (REC - 0.5 * s.gamma * tau * REC - s.omega * tau * RES);
    h(1, 2) = -tau * ES;
    h(1, 4) = ES;
    h(1, 6) = 0.5 * s.gamma * EC + s.omega * ES;
    h(2, 2) = -tau * tau * REC;
    h(2, 4) = tau * REC;
    h(2, 6) = RES - 0.5 * s.gamma * tau * RES + s.omega * tau * REC;
    h(4, 4) = -REC;
    h(4, 6) = 0.5 * s.gamma * RES - s.omega * REC;
    h(5, 6) = -1.0;
    h(6, 6) = (0.25 * s.gamma * s.gamma - s.omega * s.omega) * REC +
              s.gamma * s.omega * RES;
    h.triangularView<Eigen::StrictlyLower>() = h.transpose();
  }
}

Vec7 grad_params(const ShapeSignature& s, double t) {
  if (!std::isfinite(t) || !s.is_finite())
    throw std::domain_error("grad_params: non-finite input");
  Vec7 g;
  eval_with_derivatives(s, t, nullptr, &g, nullptr);
  return g;
}

Mat7 hess_params(const ShapeSignature& s, double t) {
  if (!std::isfinite(t) || !s.is_finite())
    throw std::domain_error("hess_params: non-finite input");
  Mat7 h;
  eval_with_derivatives(s, t, nullptr, nullptr, &h);
  return h;
}

double ssr(const ShapeSignature& s, const TraceSeries& trace) {
  trace.validate();
  if (!s.is_finite()) throw std::domain_error("ssr: non-finite signature");
  double total = 0.0;
  for (std::size_t i = 0; i < trace.times.size(); ++i) {
    double v;
    eval_with_derivatives(s, trace.times[i], &v, nullptr, nullptr);
    const double r = trace.values[i] - v;
    total += r * r;
  }
  return total;
}

}  // namespace shapesig
