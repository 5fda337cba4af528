#pragma once

// Constrained MAP fitting of shape signatures per lot.
//
// The joint negative log density over a lot of wafers is
//
//   sum_m [ (ln sigma^2 / 2) n_m + ssr_m / (2 sigma^2) ]          (data)
// + sum_m [ sum_d ln (sigma_S)_d + (1/2) |s_m - mu_S|^2_W ]       (prior)
//
// with W = diag(sigma_S)^-2 by default (Gaussian-consistent) or
// diag(sigma_S)^-1 when PriorExponent::std_dev is selected.
//
// It is minimized by block coordinate descent: box-constrained modified
// Newton over each wafer's signature (independent given the hyperparameters)
// alternating with closed-form hyperparameter updates.

#include <optional>
#include <stdexcept>
#include <vector>

#include "shapesig/oscillator.hpp"

namespace shapesig {

// Exponent convention for the prior quadratic: weight each component by
// 1/sigma_d^2 (variance) or 1/sigma_d (std_dev).
enum class PriorExponent { variance, std_dev };

struct Hyperparams {
  double sigma = 1.0;            // observation noise std
  Vec7 mu = Vec7::Zero();        // prior mean, parameter order gamma..x
  Vec7 sigma_s = Vec7::Ones();   // prior stds, all > 0

  void validate() const;  // throws std::domain_error
};

struct FitConfig {
  double newton_tol = 1e-8;      // relative objective-change stop
  int newton_max_iters = 200;
  double bcd_tol = 1e-6;         // relative hyperparameter-change stop
  int bcd_max_rounds = 50;
  double damping_init = 1e-3;    // Hessian modification seed
  double sigma_floor = 1e-6;
  double sigma_s_floor = 1e-4;
  int multistart_count = 3;      // omega candidates for the first refinement
  PriorExponent prior_exponent = PriorExponent::variance;
  int threads = 1;               // wafer-level parallelism within a round

  void validate() const;
};

struct LotFit {
  std::vector<ShapeSignature> signatures;  // wafer order preserved
  Hyperparams hyper;
  std::vector<double> objective_history;   // after every block update
  std::vector<double> per_wafer_ssr;
  bool converged = false;
};

// Thrown when the objective turns non-finite during refinement; carries the
// last iterate that still evaluated cleanly.
class NewtonFailure : public std::runtime_error {
 public:
  NewtonFailure(const std::string& what, const ShapeSignature& last)
      : std::runtime_error(what), last_iterate(last) {}
  ShapeSignature last_iterate;
};

/// Joint negative log density of all wafers (additive 2*pi constants
/// dropped). signatures[i] pairs with traces[i].
double neg_log_joint(const std::vector<ShapeSignature>& signatures,
                     const Hyperparams& hyper,
                     const std::vector<TraceSeries>& traces,
                     PriorExponent pe = PriorExponent::variance);

// Single-wafer slice of neg_log_joint and its exact derivatives in s.
// The anomaly score is this same quantity evaluated under a frozen model.
double wafer_objective(const ShapeSignature& s, const TraceSeries& trace,
                       const Hyperparams& hyper, PriorExponent pe);
Vec7 wafer_objective_gradient(const ShapeSignature& s,
                              const TraceSeries& trace,
                              const Hyperparams& hyper, PriorExponent pe);
Mat7 wafer_objective_hessian(const ShapeSignature& s, const TraceSeries& trace,
                             const Hyperparams& hyper, PriorExponent pe);

/// Heuristic starting signature: x = min time, (c, y) by least squares on
/// the trailing half, gamma from the decay of successive envelope peaks,
/// omega from the dominant periodogram bin of the detrended residual.
/// Traces shorter than 2 points fall back to the prior mean when given one.
ShapeSignature init_signature(const TraceSeries& trace,
                              const Hyperparams* prior = nullptr);

// Periodogram-based oscillation candidates of a detrended residual,
// strongest first; used to multistart the omega search.
std::vector<double> oscillation_candidates(const std::vector<double>& times,
                                           const std::vector<double>& resid,
                                           int max_count);

/// Box-constrained modified Newton descent on the single-wafer objective
/// over the six free components (x stays fixed). The returned objective
/// never exceeds the starting one.
ShapeSignature newton_refine(const ShapeSignature& s0,
                             const TraceSeries& trace,
                             const Hyperparams& hyper, const FitConfig& cfg);

/// Closed-form hyperparameter update given fixed signatures:
/// sigma^2 = total ssr / total points, mu = componentwise mean,
/// sigma_S from the componentwise spread (exponent-consistent), floored.
Hyperparams update_hyperparams(const std::vector<ShapeSignature>& signatures,
                               const std::vector<TraceSeries>& traces,
                               const FitConfig& cfg);

/// Full block-coordinate-descent fit of one lot. warm_hyper, when given,
/// replaces the heuristic initial hyperparameters.
LotFit fit_lot(const std::vector<TraceSeries>& traces, const FitConfig& cfg,
               const Hyperparams* warm_hyper = nullptr);

}  // namespace shapesig
