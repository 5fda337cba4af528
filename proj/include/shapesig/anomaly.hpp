#pragma once

// Anomaly scoring against a frozen normal model, score deconstruction via
// exact gradients, and the monitoring utilities (standardization, spike and
// change-point detection, contributor ranking).

#include <string>
#include <vector>

#include "shapesig/fit.hpp"
#include "shapesig/oscillator.hpp"

namespace shapesig {

// Frozen hyperparameters from the initial fit; the reference for "normal".
struct NormalModel {
  double sigma_star = 1.0;
  Vec7 mu_star = Vec7::Zero();
  Vec7 sigma_star_s = Vec7::Ones();
  std::vector<std::string> source_lots;
  std::string tool, sensor, step;
  PriorExponent prior_exponent = PriorExponent::variance;

  void validate() const;
  Hyperparams as_hyperparams() const;
};

struct AnomalyRecord {
  std::string wafer_id;
  int sequence_index = 0;
  double score = 0.0;
  double ssr = 0.0;
  Vec7 gradient = Vec7::Zero();  // d score / d (gamma, R, omega, y, phi, c, x)
  ShapeSignature signature;
};

/// Pools the given wafers (not required to share a lot) into one fit and
/// freezes the resulting hyperparameters. Refuses fewer than 8 wafers.
/// diagnostics, when non-null, receives the underlying lot fit.
NormalModel fit_normal_model(const std::vector<TraceSeries>& initial_traces,
                             const FitConfig& cfg,
                             LotFit* diagnostics = nullptr);

/// anom(s) = -ln P(z | s; sigma*) - ln P(s; mu*, sigma_S*). Higher is more
/// anomalous; penalizes both poor fit and deviation from the normal prior.
double score(const ShapeSignature& s, const TraceSeries& trace,
             const NormalModel& nm);

/// Exact gradient/Hessian of the score in the seven parameters (the x
/// component is reported even though x is frozen during fitting).
Vec7 score_gradient(const ShapeSignature& s, const TraceSeries& trace,
                    const NormalModel& nm);
Mat7 score_hessian(const ShapeSignature& s, const TraceSeries& trace,
                   const NormalModel& nm);

/// First-order Taylor estimate of the gradient at the (unobserved) change
/// point between two wafers:
///   grad anom(s_bef) + hess anom(s_bef) (s_aft - s_bef)/2.
Vec7 changepoint_gradient(const ShapeSignature& s_bef,
                          const ShapeSignature& s_aft,
                          const TraceSeries& trace_bef, const NormalModel& nm);

/// Per-column population z-scores of a (rows = wafers in time order,
/// cols = parameters) matrix; columns with std < 1e-12 map to zeros.
Eigen::MatrixXd standardize(const Eigen::MatrixXd& values);

/// Indices whose standardized score exceeds z_threshold while both
/// neighbors stay below z_threshold/2 (a missing neighbor counts as quiet).
std::vector<int> detect_spikes(const std::vector<double>& scores,
                               double z_threshold = 3.0);

/// Two-window mean-shift detector: reports index i (first wafer of the
/// "after" window) where |mean after - mean before| / pooled std exceeds
/// z_threshold; detections within `window` of a stronger one are suppressed.
std::vector<int> detect_changepoints(const std::vector<double>& scores,
                                     int window = 8, double z_threshold = 3.0);

struct Contribution {
  std::string param;
  double value = 0.0;  // signed gradient component
};

/// Parameters ordered by descending gradient magnitude, sign preserved.
std::vector<Contribution> rank_contributors(const Vec7& gradient);

}  // namespace shapesig
