#pragma once

// Damped linearly driven oscillator: the parametric trace model
//
//   alpha(t, s) = R exp(-gamma (t - x)/2) cos(omega (t - x) - phi)
//               + c (t - x) + y
//
// together with its exact first and second partial derivatives in the
// seven parameters. Everything here is a pure function of its inputs.

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace shapesig {

using Vec7 = Eigen::Matrix<double, 7, 1>;
using Mat7 = Eigen::Matrix<double, 7, 7>;

inline constexpr int kNumParams = 7;

// Canonical parameter order used by every 7-vector in the project.
inline constexpr const char* kParamNames[kNumParams] = {
    "gamma", "R", "omega", "y", "phi", "c", "x"};

/// Index of a parameter name in kParamNames, or -1 if unknown.
int param_index(const std::string& name);

// Shape signature: the seven oscillator parameters summarizing one trace.
// gamma and R may be negative; omega >= 0 and phi in [-pi/2, pi/2] are the
// physical boxes enforced during fitting.
struct ShapeSignature {
  double gamma = 0.0;  // damping coefficient (1/s)
  double R = 0.0;      // amplitude (sensor units)
  double omega = 0.0;  // angular frequency (rad/s)
  double y = 0.0;      // vertical shift (sensor units)
  double phi = 0.0;    // phase shift (rad)
  double c = 0.0;      // slope (sensor units/s)
  double x = 0.0;      // horizontal shift (s)

  Vec7 to_vec() const;
  static ShapeSignature from_vec(const Vec7& v);

  double operator[](int i) const;
  double& operator[](int i);

  bool is_finite() const;
  // Throws std::domain_error when a component is non-finite or the
  // omega/phi boxes are violated.
  void validate() const;
};

// One (tool, sensor, step, wafer) trace: timestamped sensor readings plus
// identifiers and the wafer's time order within its triple.
struct TraceSeries {
  std::vector<double> times;   // strictly increasing, seconds
  std::vector<double> values;  // same length as times
  std::string tool_id;
  std::string sensor_id;
  std::string step_id;
  std::string wafer_id;
  std::string lot_id;
  int sequence_index = 0;

  std::size_t size() const { return times.size(); }
  void validate() const;  // throws std::domain_error
};

/// alpha(t, s). Rejects non-finite inputs with std::domain_error.
double eval(const ShapeSignature& s, double t);

/// Elementwise eval over a nonempty time vector, order preserved.
std::vector<double> eval_vec(const ShapeSignature& s,
                             const std::vector<double>& times);

/// Exact partial derivatives (d alpha/d gamma, ..., d alpha/d x).
Vec7 grad_params(const ShapeSignature& s, double t);

/// Exact symmetric matrix of second partials.
Mat7 hess_params(const ShapeSignature& s, double t);

// Value, gradient, and Hessian in one pass, sharing the transcendental
// evaluations; any output pointer may be null. No input validation.
void eval_with_derivatives(const ShapeSignature& s, double t, double* value,
                           Vec7* grad, Mat7* hess);

/// Sum of squared residuals of the trace values against alpha(t, s).
double ssr(const ShapeSignature& s, const TraceSeries& trace);

}  // namespace shapesig
